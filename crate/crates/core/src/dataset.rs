//! Binary dataset files (little-endian, 32-bit float payloads).
//!
//! Layout: magic `CSID`, then u32 version, sample count, C, T, S, K.
//! Each sample stores a u32 label, C subcarrier-mask bytes, T time-mask
//! bytes and `C·T·S·2` f32 values with real/imag innermost. A sample
//! without masks is written with all-zero mask bytes and reads back as
//! `None`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::synth::CsiSample;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CSID";
const VERSION: u32 = 1;

/// Shape header shared by every sample in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub subcarriers: usize,
    pub frames: usize,
    pub streams: usize,
    pub classes: usize,
}

pub fn write_dataset(path: &Path, header: DatasetHeader, samples: &[CsiSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(FormatError::from)?);
    encode(&mut out, header, samples)?;
    out.flush().map_err(FormatError::from)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<CsiSample>)> {
    let mut input = BufReader::new(File::open(path).map_err(FormatError::from)?);
    decode(&mut input)
}

pub fn encode<W: Write>(out: &mut W, header: DatasetHeader, samples: &[CsiSample]) -> Result<()> {
    let DatasetHeader { subcarriers: c, frames: t, streams: s, classes: k } = header;
    for sample in samples {
        if sample.data.shape() != [c, t, s, 2] {
            return Err(Error::InvalidInput(format!(
                "sample shape {:?} does not match header [{c}, {t}, {s}, 2]",
                sample.data.shape()
            )));
        }
        if sample.label >= k {
            return Err(Error::InvalidInput(format!("label {} out of range for {k} classes", sample.label)));
        }
    }
    let io = |r: std::io::Result<()>| r.map_err(FormatError::from);
    io(out.write_all(MAGIC))?;
    for v in [VERSION, to_u32(samples.len())?, to_u32(c)?, to_u32(t)?, to_u32(s)?, to_u32(k)?] {
        io(out.write_all(&v.to_le_bytes()))?;
    }
    for sample in samples {
        io(out.write_all(&(sample.label as u32).to_le_bytes()))?;
        io(out.write_all(&mask_bytes(sample.subcarrier_mask.as_deref(), c)))?;
        io(out.write_all(&mask_bytes(sample.time_mask.as_deref(), t)))?;
        let payload: Vec<u8> = sample.data.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        io(out.write_all(&payload))?;
    }
    Ok(())
}

pub fn decode<R: Read>(input: &mut R) -> Result<(DatasetHeader, Vec<CsiSample>)> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic { expected: *MAGIC, found: magic }.into());
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let count = read_u32(input)? as usize;
    let c = read_u32(input)? as usize;
    let t = read_u32(input)? as usize;
    let s = read_u32(input)? as usize;
    let k = read_u32(input)? as usize;
    if c == 0 || t == 0 || s == 0 || k == 0 {
        return Err(FormatError::Malformed("zero extent in header".into()).into());
    }
    let header = DatasetHeader { subcarriers: c, frames: t, streams: s, classes: k };

    let values = c * t * s * 2;
    let mut samples = Vec::new();
    let mut payload = vec![0u8; values * 4];
    for _ in 0..count {
        let label = read_u32(input)? as usize;
        if label >= k {
            return Err(FormatError::Malformed(format!("label {label} out of range")).into());
        }
        let subcarrier_mask = read_mask(input, c)?;
        let time_mask = read_mask(input, t)?;
        read_exact(input, &mut payload)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Malformed("non-finite payload value".into()).into());
        }
        samples.push(CsiSample {
            data: Tensor::new(vec![c, t, s, 2], data)?,
            label,
            subcarrier_mask,
            time_mask,
        });
    }
    Ok((header, samples))
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{v} does not fit in a u32 field")))
}

fn mask_bytes(mask: Option<&[bool]>, len: usize) -> Vec<u8> {
    match mask {
        Some(m) => m.iter().map(|&b| u8::from(b)).collect(),
        None => vec![0; len],
    }
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

fn read_mask<R: Read>(input: &mut R, len: usize) -> Result<Option<Vec<bool>>> {
    let mut bytes = vec![0u8; len];
    read_exact(input, &mut bytes)?;
    if bytes.iter().any(|&b| b > 1) {
        return Err(FormatError::Malformed("mask byte other than 0/1".into()).into());
    }
    if bytes.iter().all(|&b| b == 0) {
        return Ok(None);
    }
    Ok(Some(bytes.iter().map(|&b| b == 1).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn header() -> DatasetHeader {
        DatasetHeader { subcarriers: 30, frames: 100, streams: 3, classes: 5 }
    }

    fn roundtrip(samples: &[CsiSample]) -> Vec<CsiSample> {
        let mut buf = Vec::new();
        encode(&mut buf, header(), samples).unwrap();
        let (h, back) = decode(&mut buf.as_slice()).unwrap();
        assert_eq!(h, header());
        back
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let mut buf = Vec::new();
        encode(&mut buf, header(), &[]).unwrap();
        assert_eq!(buf.len(), 28);
        assert!(roundtrip(&[]).is_empty());
    }

    #[test]
    fn generated_samples_roundtrip_bit_exact() {
        let samples = generate_dataset(&SynthConfig::default(), 10).unwrap();
        let back = roundtrip(&samples);
        assert_eq!(back.len(), 10);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.subcarrier_mask, b.subcarrier_mask);
            assert_eq!(a.time_mask, b.time_mask);
            let bits = |s: &CsiSample| s.data.data().iter().map(|v| (*v as f32).to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut buf = Vec::new();
        encode(&mut buf, header(), &[]).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            decode(&mut buf.as_slice()),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn wrong_version_and_truncation_are_reported() {
        let samples = generate_dataset(&SynthConfig::default(), 2).unwrap();
        let mut buf = Vec::new();
        encode(&mut buf, header(), &samples).unwrap();

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            decode(&mut bad.as_slice()),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(decode(&mut &cut[..]), Err(Error::Format(FormatError::Truncated))));
    }

    #[test]
    fn mismatched_shape_is_rejected_on_write() {
        let samples = generate_dataset(&SynthConfig::default(), 1).unwrap();
        let h = DatasetHeader { frames: 50, ..header() };
        assert!(encode(&mut Vec::new(), h, &samples).is_err());
    }
}
