//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `VDAN`, u32 version, fifteen u32 config
//! fields (C, T, S, D, T′, r_c, r_t, subcarrier hidden, temporal hidden, K,
//! LSTM layers, LSTM hidden, variant code, SE hidden, CBAM hidden), u32
//! parameter count, then per parameter: u32 name length, UTF-8 name, u32
//! rank, u32 extents and f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::model::{ArchConfig, InputShape, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::variants::VariantKind;

const MAGIC: &[u8; 4] = b"VDAN";
const VERSION: u32 = 1;

fn config_echo(model: &Model) -> [u32; 15] {
    let s = &model.config.shape;
    let a = &model.config.arch;
    [
        s.subcarriers,
        s.frames,
        s.streams,
        a.feature_dim,
        a.feature_len,
        a.ratio_subcarrier,
        a.ratio_time,
        a.hidden_subcarrier,
        a.hidden_time,
        s.classes,
        a.lstm_layers,
        a.lstm_hidden,
        model.kind.code() as usize,
        a.se_hidden,
        a.cbam_hidden,
    ]
    .map(|v| v as u32)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(FormatError::from)?);
    encode(&mut out, model)?;
    out.flush().map_err(FormatError::from)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut input = BufReader::new(File::open(path).map_err(FormatError::from)?);
    decode(&mut input)
}

pub fn encode<W: Write>(out: &mut W, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in config_echo(model) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, value) in model.store.names().iter().zip(model.store.values()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &e in value.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(FormatError::from)?;
    Ok(())
}

pub fn decode<R: Read>(input: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { expected: *MAGIC, found: magic }.into());
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mut echo = [0usize; 15];
    for e in &mut echo {
        *e = read_u32(input)? as usize;
    }
    let kind = VariantKind::from_code(echo[12] as u32)
        .ok_or_else(|| FormatError::Malformed(format!("unknown variant code {}", echo[12])))?;
    let shape = InputShape { subcarriers: echo[0], frames: echo[1], streams: echo[2], classes: echo[9] };
    let arch = ArchConfig {
        feature_dim: echo[3],
        feature_len: echo[4],
        ratio_subcarrier: echo[5],
        ratio_time: echo[6],
        hidden_subcarrier: echo[7],
        hidden_time: echo[8],
        lstm_layers: echo[10],
        lstm_hidden: echo[11],
        se_hidden: echo[13],
        cbam_hidden: echo[14],
        ..ArchConfig::default()
    };
    let config = ModelConfig::new(shape, arch).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let mut model = Model::new(kind, &config, 0)?;

    let count = read_u32(input)? as usize;
    if count != model.store.len() {
        return Err(FormatError::Malformed(format!(
            "{count} parameters stored, architecture has {}",
            model.store.len()
        ))
        .into());
    }
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        read_exact(input, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = read_u32(input)? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(read_u32(input)? as usize);
        }
        let n: usize = extents.iter().product();
        if model.store.id(&name).is_none_or(|id| model.store.get(id).len() != n) {
            return Err(FormatError::Malformed(format!("unexpected parameter {name} {extents:?}")).into());
        }
        let mut raw = vec![0u8; n * 8];
        read_exact(input, &mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(extents, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        named.push((name, tensor));
    }
    model.store.load(named).map_err(|e| match e {
        Error::InvalidInput(m) => Error::Format(FormatError::Malformed(m)),
        other => other,
    })?;
    Ok(model)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => FormatError::Truncated,
        _ => FormatError::Io(e),
    })?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::tiny_model_config;

    fn trained_looking(kind: VariantKind) -> Model {
        let mut model = Model::new(kind, &tiny_model_config(), 6).unwrap();
        // Perturb every entry so zero-initialised biases are covered too.
        for (i, t) in model.store.values_mut().iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 1e-3 * ((i * 31 + j) % 17) as f64 + 1e-17;
            }
        }
        model
    }

    fn bytes(model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        encode(&mut out, model).unwrap();
        out
    }

    #[test]
    fn every_variant_round_trips_bit_exactly() {
        for kind in VariantKind::ALL {
            let model = trained_looking(kind);
            let back = decode(&mut bytes(&model).as_slice()).unwrap();
            assert_eq!(back, model, "{kind}");
        }
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = trained_looking(VariantKind::DualDet);
        save(&model, &path).unwrap();
        assert_eq!(load(&path).unwrap(), model);
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Format(FormatError::Io(_)))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = bytes(&trained_looking(VariantKind::SapOnly));
        let decode_err = |b: &[u8]| decode(&mut &b[..]).unwrap_err();

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_err(&magic), Error::Format(FormatError::BadMagic { .. })));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(decode_err(&version), Error::Format(FormatError::UnsupportedVersion(9))));

        let mut variant = good.clone();
        variant[8 + 12 * 4] = 42;
        assert!(matches!(decode_err(&variant), Error::Format(FormatError::Malformed(_))));

        // A different variant code makes the stored parameters inconsistent.
        let mut swapped = good.clone();
        swapped[8 + 12 * 4] = VariantKind::TapOnly.code() as u8;
        assert!(matches!(decode_err(&swapped), Error::Format(FormatError::Malformed(_))));

        for cut in [3, 20, good.len() / 2, good.len() - 1] {
            assert!(matches!(decode_err(&good[..cut]), Error::Format(FormatError::Truncated)), "cut at {cut}");
        }
    }
}
