//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable operation appends a node to the [`Tape`] holding its
//! forward value and the handles of its inputs. [`Tape::backward`] walks the
//! nodes in exact reverse order of execution and accumulates gradients; a
//! tensor used several times receives the sum of all its contributions.
//!
//! ```
//! use vdan_core::tape::Tape;
//! use vdan_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(&[1.0, -2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::TensorError;
use crate::tensor::{sigmoid, softmax, strides_of, Tensor};

type OpResult = Result<Var, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulAlongAxis { x: Var, w: Var, axis: usize },
    Scale { x: Var, s: Var },
    ScaleConst(Var, f64),
    AddConst(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    ReduceMean { x: Var, out_index: Vec<usize>, count: usize },
    ReduceMax { x: Var, argmax: Vec<usize> },
    Affine { x: Var, w: Var, b: Var },
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Gather { x: Var, source: Vec<usize> },
    Narrow { x: Var, offset: usize },
    DepthwiseConv1d { x: Var, w: Var, b: Var },
    PointwiseConv1d { x: Var, w: Var, b: Var },
    Downsample { x: Var, stride: usize },
    Lstm(Box<LstmNode>),
}

#[derive(Debug)]
struct LstmNode {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    reverse: bool,
    hidden: usize,
    // Per processed step, in processing order: gate activations (i, f, g, o),
    // previous hidden and cell state, and tanh of the new cell state.
    gates: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but yields zeros of the right length for
    /// variables the loss does not reach.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Gradient buffer for `v`, created on first use; None when `v` needs no
/// gradient.
fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> OpResult {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> OpResult {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies `x` by the vector `w` broadcast along `axis`. This is the
    /// only broadcasting pattern the tape supports.
    pub fn mul_along_axis(&mut self, x: Var, w: Var, axis: usize) -> OpResult {
        let (vx, vw) = (self.value(x), self.value(w));
        if axis >= vx.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "mul_along_axis",
                axis,
                rank: vx.rank(),
            });
        }
        if vw.rank() != 1 || vw.len() != vx.shape()[axis] {
            return Err(TensorError::shape(
                "mul_along_axis",
                format!("weight {:?} against axis {axis} of {:?}", vw.shape(), vx.shape()),
            ));
        }
        let (outer, n, inner) = split_at_axis(vx.shape(), axis);
        let (xd, wd) = (vx.data(), vw.data());
        let mut data = Vec::with_capacity(xd.len());
        for o in 0..outer {
            for (j, &wj) in wd.iter().enumerate().take(n) {
                let base = (o * n + j) * inner;
                data.extend(xd[base..base + inner].iter().map(|v| v * wj));
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("mul_along_axis", value, Op::MulAlongAxis { x, w, axis }, &[x, w])
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> OpResult {
        if self.value(s).len() != 1 {
            return Err(TensorError::shape("scale", "scale factor must have one element"));
        }
        let factor = self.value(s).item();
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale { x, s }, &[x, s])
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> OpResult {
        self.unary("scale_const", x, |v| v * c, Op::ScaleConst(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> OpResult {
        self.unary("add_const", x, |v| v + c, Op::AddConst(x))
    }

    pub fn exp(&mut self, x: Var) -> OpResult {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> OpResult {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> OpResult {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> OpResult {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> OpResult {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Mean over the listed axes; those axes are removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> OpResult {
        let (out_shape, out_index) = self.reduction_map("reduce_mean", x, axes)?;
        let vx = self.value(x);
        let out_len: usize = out_shape.iter().product();
        let count = vx.len() / out_len;
        let mut data = vec![0.0; out_len];
        for (&v, &o) in vx.data().iter().zip(&out_index) {
            data[o] += v;
        }
        for d in &mut data {
            *d /= count as f64;
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "reduce_mean",
            value,
            Op::ReduceMean {
                x,
                out_index,
                count,
            },
            &[x],
        )
    }

    /// Maximum over the listed axes. The gradient flows to the first
    /// maximising element of each reduced slice.
    pub fn reduce_max(&mut self, x: Var, axes: &[usize]) -> OpResult {
        let (out_shape, out_index) = self.reduction_map("reduce_max", x, axes)?;
        let vx = self.value(x);
        let out_len: usize = out_shape.iter().product();
        let mut data = vec![f64::NEG_INFINITY; out_len];
        let mut argmax = vec![usize::MAX; out_len];
        for (i, (&v, &o)) in vx.data().iter().zip(&out_index).enumerate() {
            if argmax[o] == usize::MAX || v > data[o] {
                data[o] = v;
                argmax[o] = i;
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push("reduce_max", value, Op::ReduceMax { x, argmax }, &[x])
    }

    /// Output shape and, for every input element, the flat index of the
    /// output element it reduces into.
    fn reduction_map(
        &self,
        op: &'static str,
        x: Var,
        axes: &[usize],
    ) -> Result<(Vec<usize>, Vec<usize>), TensorError> {
        let vx = self.value(x);
        let rank = vx.rank();
        if vx.is_empty() {
            return Err(TensorError::Empty);
        }
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::AxisOutOfRange { op, axis: a, rank });
            }
            if reduced[a] {
                return Err(TensorError::invalid(op, format!("axis {a} listed twice")));
            }
            reduced[a] = true;
        }
        let shape = vx.shape();
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
        let out_strides = strides_of(&out_shape);
        // Stride in the output for each input axis (0 for reduced axes).
        let mut axis_stride = vec![0; rank];
        let mut k = 0;
        for i in 0..rank {
            if !reduced[i] {
                axis_stride[i] = out_strides[k];
                k += 1;
            }
        }
        let mut out_index = Vec::with_capacity(vx.len());
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..vx.len() {
            out_index.push(offset);
            for i in (0..rank).rev() {
                counter[i] += 1;
                offset += axis_stride[i];
                if counter[i] < shape[i] {
                    break;
                }
                offset -= axis_stride[i] * shape[i];
                counter[i] = 0;
            }
        }
        Ok((out_shape, out_index))
    }

    /// `x · weight + bias` for a vector `x` of length `in` or a batch of
    /// row vectors `[n, in]`, with `weight` of shape `[in, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> OpResult {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vw.rank() != 2 || vb.rank() != 1 || vb.len() != vw.shape()[1] {
            return Err(TensorError::shape(
                "affine",
                format!("weight {:?} with bias {:?}", vw.shape(), vb.shape()),
            ));
        }
        let (fan_in, fan_out) = (vw.shape()[0], vw.shape()[1]);
        let (rows, out_shape) = match vx.shape() {
            [n] if *n == fan_in => (1, vec![fan_out]),
            [r, n] if *n == fan_in => (*r, vec![*r, fan_out]),
            other => {
                return Err(TensorError::shape(
                    "affine",
                    format!("input {other:?} against weight {:?}", vw.shape()),
                ))
            }
        };
        let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut data = Vec::with_capacity(rows * fan_out);
        for r in 0..rows {
            let mut row = bd.to_vec();
            for (i, &xi) in xd[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (acc, &wij) in row.iter_mut().zip(&wd[i * fan_out..(i + 1) * fan_out]) {
                    *acc += xi * wij;
                }
            }
            data.extend(row);
        }
        let value = Tensor::new(out_shape, data)?;
        self.push("affine", value, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> OpResult {
        let vx = self.value(x);
        let row = *vx.shape().last().ok_or(TensorError::invalid("softmax", "rank-0 input"))?;
        let data: Vec<f64> = vx.data().chunks(row).flat_map(softmax).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Cross-entropy `-log softmax(logits)[label]` for a logits vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> OpResult {
        let vl = self.value(logits);
        if vl.rank() != 1 {
            return Err(TensorError::shape("softmax_cross_entropy", "logits must be a vector"));
        }
        if label >= vl.len() {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("label {label} out of range for {} classes", vl.len()),
            ));
        }
        let max = vl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_total = vl.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = log_total - vl.data()[label];
        let probs = softmax(vl.data());
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        )
    }

    /// Concatenates tensors that agree on every axis but `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> OpResult {
        let first = parts
            .first()
            .map(|&p| self.value(p))
            .ok_or(TensorError::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let agrees = s.len() == rank
                && (0..rank).all(|i| i == axis || s[i] == first.shape()[i]);
            if !agrees {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} against {:?} on axis {axis}", first.shape()),
                ));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * out_shape[axis] * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> OpResult {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> OpResult {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let in_strides = vx.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| vx.shape()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut source = Vec::with_capacity(vx.len());
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..vx.len() {
            source.push(offset);
            for i in (0..rank).rev() {
                counter[i] += 1;
                offset += strides[i];
                if counter[i] < out_shape[i] {
                    break;
                }
                offset -= strides[i] * out_shape[i];
                counter[i] = 0;
            }
        }
        let data = source.iter().map(|&s| vx.data()[s]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Gather { x, source }, &[x])
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> OpResult {
        if self.value(x).rank() != 2 {
            return Err(TensorError::shape("transpose", "expected a matrix"));
        }
        self.permute(x, &[1, 0])
    }

    /// Rows `start..start + len` along the first axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> OpResult {
        let vx = self.value(x);
        if vx.rank() == 0 || len == 0 || start + len > vx.shape()[0] {
            return Err(TensorError::invalid(
                "narrow",
                format!("rows {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let inner: usize = vx.shape()[1..].iter().product();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let data = vx.data()[start * inner..(start + len) * inner].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(
            "narrow",
            value,
            Op::Narrow {
                x,
                offset: start * inner,
            },
            &[x],
        )
    }

    /// Per-channel 1-D convolution with zero "same" padding: `x` is
    /// `[channels, length]`, `w` is `[channels, kernel]` with an odd kernel,
    /// `b` is `[channels]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> OpResult {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let ok = vx.rank() == 2
            && vw.rank() == 2
            && vb.rank() == 1
            && vw.shape()[0] == vx.shape()[0]
            && vb.len() == vx.shape()[0]
            && vw.shape()[1] % 2 == 1;
        if !ok {
            return Err(TensorError::shape(
                "depthwise_conv1d",
                format!("x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (channels, len, kernel) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
        let pad = kernel / 2;
        let mut data = Vec::with_capacity(channels * len);
        for c in 0..channels {
            let xs = &vx.data()[c * len..(c + 1) * len];
            let ws = &vw.data()[c * kernel..(c + 1) * kernel];
            for t in 0..len {
                let mut acc = vb.data()[c];
                for (k, &wk) in ws.iter().enumerate() {
                    let src = t + k;
                    if src >= pad && src - pad < len {
                        acc += wk * xs[src - pad];
                    }
                }
                data.push(acc);
            }
        }
        let value = Tensor::new(vec![channels, len], data)?;
        self.push("depthwise_conv1d", value, Op::DepthwiseConv1d { x, w, b }, &[x, w, b])
    }

    /// 1×1 convolution mixing channels: `x` is `[in, length]`, `w` is
    /// `[out, in]`, `b` is `[out]`.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> OpResult {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let ok = vx.rank() == 2
            && vw.rank() == 2
            && vb.rank() == 1
            && vw.shape()[1] == vx.shape()[0]
            && vb.len() == vw.shape()[0];
        if !ok {
            return Err(TensorError::shape(
                "pointwise_conv1d",
                format!("x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let (c_in, len, c_out) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut data = vec![0.0; c_out * len];
        for o in 0..c_out {
            let row = &mut data[o * len..(o + 1) * len];
            row.fill(vb.data()[o]);
            for i in 0..c_in {
                let wi = vw.data()[o * c_in + i];
                for (acc, &xv) in row.iter_mut().zip(&vx.data()[i * len..(i + 1) * len]) {
                    *acc += wi * xv;
                }
            }
        }
        let value = Tensor::new(vec![c_out, len], data)?;
        self.push("pointwise_conv1d", value, Op::PointwiseConv1d { x, w, b }, &[x, w, b])
    }

    /// Keeps every `stride`-th element of the last axis, starting at 0.
    pub fn downsample(&mut self, x: Var, stride: usize) -> OpResult {
        let vx = self.value(x);
        if stride == 0 || vx.rank() == 0 {
            return Err(TensorError::invalid("downsample", "stride must be positive on a non-scalar"));
        }
        let len = *vx.shape().last().unwrap_or(&1);
        let out_len = len.div_ceil(stride);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank checked") = out_len;
        let data = vx
            .data()
            .chunks(len)
            .flat_map(|row| row.iter().step_by(stride).copied())
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("downsample", value, Op::Downsample { x, stride }, &[x])
    }

    /// One direction of an LSTM layer over a `[steps, input]` sequence.
    ///
    /// Gates are laid out `(input, forget, candidate, output)` along the
    /// `4·hidden` axis of `w_ih: [input, 4H]`, `w_hh: [H, 4H]` and `b: [4H]`.
    /// With `reverse` the sequence is consumed from the last step to the
    /// first. Row `t` of the `[steps, H]` output is the hidden state after
    /// consuming step `t`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> OpResult {
        let (vx, vi, vh, vb) = (self.value(x), self.value(w_ih), self.value(w_hh), self.value(b));
        let shapes_ok = vx.rank() == 2
            && vi.rank() == 2
            && vh.rank() == 2
            && vb.rank() == 1
            && vi.shape()[0] == vx.shape()[1]
            && vh.shape()[1] == 4 * vh.shape()[0]
            && vi.shape()[1] == vh.shape()[1]
            && vb.len() == vh.shape()[1];
        if !shapes_ok {
            return Err(TensorError::shape(
                "lstm",
                format!(
                    "x {:?}, w_ih {:?}, w_hh {:?}, b {:?}",
                    vx.shape(),
                    vi.shape(),
                    vh.shape(),
                    vb.shape()
                ),
            ));
        }
        let (steps, fan_in) = (vx.shape()[0], vx.shape()[1]);
        let hidden = vh.shape()[0];
        let g4 = 4 * hidden;
        let mut out = vec![0.0; steps * hidden];
        let mut gates = Vec::with_capacity(steps * g4);
        let mut h_prev_all = Vec::with_capacity(steps * hidden);
        let mut c_prev_all = Vec::with_capacity(steps * hidden);
        let mut tanh_c_all = Vec::with_capacity(steps * hidden);
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut pre = vec![0.0; g4];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            pre.copy_from_slice(vb.data());
            for (k, &xk) in vx.data()[t * fan_in..(t + 1) * fan_in].iter().enumerate() {
                for (p, &wv) in pre.iter_mut().zip(&vi.data()[k * g4..(k + 1) * g4]) {
                    *p += xk * wv;
                }
            }
            for (k, &hk) in h.iter().enumerate() {
                for (p, &wv) in pre.iter_mut().zip(&vh.data()[k * g4..(k + 1) * g4]) {
                    *p += hk * wv;
                }
            }
            h_prev_all.extend_from_slice(&h);
            c_prev_all.extend_from_slice(&c);
            for j in 0..hidden {
                let ig = sigmoid(pre[j]);
                let fg = sigmoid(pre[hidden + j]);
                let cand = pre[2 * hidden + j].tanh();
                let og = sigmoid(pre[3 * hidden + j]);
                c[j] = fg * c[j] + ig * cand;
                let tc = c[j].tanh();
                h[j] = og * tc;
                tanh_c_all.push(tc);
                pre[j] = ig;
                pre[hidden + j] = fg;
                pre[2 * hidden + j] = cand;
                pre[3 * hidden + j] = og;
            }
            gates.extend_from_slice(&pre);
            out[t * hidden..(t + 1) * hidden].copy_from_slice(&h);
        }
        let value = Tensor::new(vec![steps, hidden], out)?;
        let node = LstmNode {
            x,
            w_ih,
            w_hh,
            b,
            reverse,
            hidden,
            gates,
            h_prev: h_prev_all,
            c_prev: c_prev_all,
            tanh_c: tanh_c_all,
        };
        self.push("lstm", value, Op::Lstm(Box::new(node)), &[x, w_ih, w_hh, b])
    }

    /// Backpropagates from the single-element `loss`.
    ///
    /// May run once per tape; a second call returns
    /// [`TensorError::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::shape("backward", "loss must have exactly one element"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = nodes[i].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_buf(nodes, grads, $v) $body
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(s, d)| *s += d) });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(s, d)| *s += d) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(s, d)| *s += d) });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(s, d)| *s -= d) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                with_grad!(*b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::MulAlongAxis { x, w, axis } => {
                let (vx, vw) = (val(*x), val(*w));
                let (outer, n, inner) = split_at_axis(nodes[x.0].value.shape(), *axis);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for k in base..base + inner {
                                gx[k] += g[k] * vw[j];
                            }
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            gw[j] += (base..base + inner).map(|k| g[k] * vx[k]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Scale { x, s } => {
                let factor = val(*s)[0];
                let vx = val(*x);
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * factor) });
                with_grad!(*s, |gs| {
                    gs[0] += g.iter().zip(vx).map(|(d, v)| d * v).sum::<f64>();
                });
            }
            Op::ScaleConst(x, c) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * c) });
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, d)| *a += d) });
            }
            Op::Exp(x) => {
                with_grad!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k];
                    }
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                with_grad!(*x, |gx| {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                with_grad!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().for_each(|a| *a += g[0]) });
            }
            Op::ReduceMean {
                x,
                out_index,
                count,
            } => {
                let scale = 1.0 / *count as f64;
                with_grad!(*x, |gx| {
                    for (a, &o) in gx.iter_mut().zip(out_index) {
                        *a += g[o] * scale;
                    }
                });
            }
            Op::ReduceMax { x, argmax } => {
                with_grad!(*x, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let wshape = nodes[w.0].value.shape();
                let (fan_in, fan_out) = (wshape[0], wshape[1]);
                let rows = vx.len() / fan_in;
                with_grad!(*x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * fan_out..(r + 1) * fan_out];
                        for i in 0..fan_in {
                            let wrow = &vw[i * fan_out..(i + 1) * fan_out];
                            gx[r * fan_in + i] += gr.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for r in 0..rows {
                        let gr = &g[r * fan_out..(r + 1) * fan_out];
                        for i in 0..fan_in {
                            let xi = vx[r * fan_in + i];
                            if xi == 0.0 {
                                continue;
                            }
                            for (a, d) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(gr) {
                                *a += xi * d;
                            }
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..rows {
                        for (a, d) in gb.iter_mut().zip(&g[r * fan_out..(r + 1) * fan_out]) {
                            *a += d;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let row = *nodes[i].value.shape().last().expect("softmax rank");
                with_grad!(*x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(row).zip(g.chunks(row)).zip(y.chunks(row)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..row {
                            gxr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                with_grad!(*logits, |gl| {
                    for (k, p) in probs.iter().enumerate() {
                        let target = if k == *label { 1.0 } else { 0.0 };
                        gl[k] += g[0] * (p - target);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    with_grad!(p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (a, d) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *a += d;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather { x, source } => {
                with_grad!(*x, |gx| {
                    for (&s, d) in source.iter().zip(g) {
                        gx[s] += d;
                    }
                });
            }
            Op::Narrow { x, offset } => {
                with_grad!(*x, |gx| {
                    for (a, d) in gx[*offset..*offset + g.len()].iter_mut().zip(g) {
                        *a += d;
                    }
                });
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let xs = nodes[x.0].value.shape();
                let (channels, len) = (xs[0], xs[1]);
                let kernel = nodes[w.0].value.shape()[1];
                let pad = kernel / 2;
                with_grad!(*x, |gx| {
                    for c in 0..channels {
                        for t in 0..len {
                            let d = g[c * len + t];
                            for k in 0..kernel {
                                let src = t + k;
                                if src >= pad && src - pad < len {
                                    gx[c * len + src - pad] += d * vw[c * kernel + k];
                                }
                            }
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for c in 0..channels {
                        for t in 0..len {
                            let d = g[c * len + t];
                            for k in 0..kernel {
                                let src = t + k;
                                if src >= pad && src - pad < len {
                                    gw[c * kernel + k] += d * vx[c * len + src - pad];
                                }
                            }
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for c in 0..channels {
                        gb[c] += g[c * len..(c + 1) * len].iter().sum::<f64>();
                    }
                });
            }
            Op::PointwiseConv1d { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let xs = nodes[x.0].value.shape();
                let (c_in, len) = (xs[0], xs[1]);
                let c_out = nodes[w.0].value.shape()[0];
                with_grad!(*x, |gx| {
                    for o in 0..c_out {
                        let go = &g[o * len..(o + 1) * len];
                        for ci in 0..c_in {
                            let wv = vw[o * c_in + ci];
                            for (a, d) in gx[ci * len..(ci + 1) * len].iter_mut().zip(go) {
                                *a += wv * d;
                            }
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for o in 0..c_out {
                        let go = &g[o * len..(o + 1) * len];
                        for ci in 0..c_in {
                            let xr = &vx[ci * len..(ci + 1) * len];
                            gw[o * c_in + ci] += go.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for o in 0..c_out {
                        gb[o] += g[o * len..(o + 1) * len].iter().sum::<f64>();
                    }
                });
            }
            Op::Downsample { x, stride } => {
                let len = *nodes[x.0].value.shape().last().expect("rank checked");
                let out_len = len.div_ceil(*stride);
                with_grad!(*x, |gx| {
                    for (r, gr) in g.chunks(out_len).enumerate() {
                        for (j, d) in gr.iter().enumerate() {
                            gx[r * len + j * stride] += d;
                        }
                    }
                });
            }
            Op::Lstm(node) => self.propagate_lstm(node, g, grads),
        }
    }

    fn propagate_lstm(&self, node: &LstmNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let value = |v: Var| &self.nodes[v.0].value;
        let (vx, vi, vh) = (value(node.x), value(node.w_ih), value(node.w_hh));
        let (steps, fan_in) = (vx.shape()[0], vx.shape()[1]);
        let hidden = node.hidden;
        let g4 = 4 * hidden;

        let mut gx = vec![0.0; vx.len()];
        let mut gw_ih = vec![0.0; vi.len()];
        let mut gw_hh = vec![0.0; vh.len()];
        let mut gb = vec![0.0; g4];
        let mut dh_next = vec![0.0; hidden];
        let mut dc_next = vec![0.0; hidden];
        let mut da = vec![0.0; g4];
        for step in (0..steps).rev() {
            let t = if node.reverse { steps - 1 - step } else { step };
            let gates = &node.gates[step * g4..(step + 1) * g4];
            let c_prev = &node.c_prev[step * hidden..(step + 1) * hidden];
            let h_prev = &node.h_prev[step * hidden..(step + 1) * hidden];
            let tanh_c = &node.tanh_c[step * hidden..(step + 1) * hidden];
            for j in 0..hidden {
                let (ig, fg, cand, og) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let dh = g[t * hidden + j] + dh_next[j];
                let d_og = dh * tanh_c[j];
                let dc = dh * og * (1.0 - tanh_c[j] * tanh_c[j]) + dc_next[j];
                dc_next[j] = dc * fg;
                da[j] = dc * cand * ig * (1.0 - ig);
                da[hidden + j] = dc * c_prev[j] * fg * (1.0 - fg);
                da[2 * hidden + j] = dc * ig * (1.0 - cand * cand);
                da[3 * hidden + j] = d_og * og * (1.0 - og);
            }
            for (a, d) in gb.iter_mut().zip(&da) {
                *a += d;
            }
            let xt = &vx.data()[t * fan_in..(t + 1) * fan_in];
            for k in 0..fan_in {
                let wrow = &vi.data()[k * g4..(k + 1) * g4];
                gx[t * fan_in + k] += wrow.iter().zip(&da).map(|(a, b)| a * b).sum::<f64>();
                if xt[k] != 0.0 {
                    for (a, d) in gw_ih[k * g4..(k + 1) * g4].iter_mut().zip(&da) {
                        *a += xt[k] * d;
                    }
                }
            }
            for k in 0..hidden {
                let wrow = &vh.data()[k * g4..(k + 1) * g4];
                dh_next[k] = wrow.iter().zip(&da).map(|(a, b)| a * b).sum::<f64>();
                if h_prev[k] != 0.0 {
                    for (a, d) in gw_hh[k * g4..(k + 1) * g4].iter_mut().zip(&da) {
                        *a += h_prev[k] * d;
                    }
                }
            }
        }
        for (v, contribution) in [(node.x, gx), (node.w_ih, gw_ih), (node.w_hh, gw_hh), (node.b, gb)] {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contribution).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(contribution),
            }
        }
    }
}
