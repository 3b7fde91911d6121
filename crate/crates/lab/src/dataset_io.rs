//! Dataset files: `f32` little-endian tensors in (sample, step, re/im, tx, rx,
//! prb) order.
//!
//! Native files start with a 64-byte header:
//!
//! | bytes  | content                                        |
//! |--------|------------------------------------------------|
//! | 0..8   | magic `CSILLMDS`                               |
//! | 8..12  | format version (`u32`, currently 1)            |
//! | 12..16 | reserved, zero                                 |
//! | 16..64 | six `u64` dimensions `(N, steps, 2, tx, rx, prb)` |
//!
//! The loader also accepts `.npy` arrays of `<f4` and headerless raw dumps,
//! whose element count must be a multiple of one sample.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use csi_llm_core::channel::{ChannelDataset, ChannelSample, SplitTag};
use csi_llm_core::config::{ScenarioConfig, SpeedSpec};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"CSILLMDS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;
const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

fn sample_dims(scenario: &ScenarioConfig) -> [usize; 5] {
    [
        scenario.n_steps,
        2,
        scenario.n_tx,
        scenario.n_rx,
        scenario.n_prb,
    ]
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &ChannelDataset) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    let io = |e| LabError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&0u32.to_le_bytes());
    header.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for d in sample_dims(&ds.scenario) {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    w.write_all(&header).map_err(io)?;
    for s in &ds.samples {
        let bytes: Vec<u8> = s.csi.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn check_dims(path: &Path, expected: [usize; 5], found: &[usize]) -> Result<()> {
    if found != expected {
        return Err(LabError::format(
            path,
            format!("per-sample shape {found:?} does not match scenario shape {expected:?}"),
        ));
    }
    Ok(())
}

fn parse_native(path: &Path, bytes: &[u8], expected: [usize; 5]) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(LabError::format(path, "truncated header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let version = u32_at(8);
    if version != VERSION {
        return Err(LabError::format(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let dims: Vec<usize> = (0..6).map(|i| u64_at(16 + 8 * i)).collect();
    check_dims(path, expected, &dims[1..])?;
    Ok((HEADER_LEN, dims[0]))
}

/// Returns `(data offset, leading dimension)`.
fn parse_npy(path: &Path, bytes: &[u8], expected: [usize; 5]) -> Result<(usize, usize)> {
    let bad = |reason: &str| LabError::format(path, format!("npy: {reason}"));
    if bytes.len() < 10 {
        return Err(bad("truncated header"));
    }
    let (len_bytes, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
            12,
        ),
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = bytes
        .get(start..start + len_bytes)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("unreadable header"))?;
    let compact: String = header.chars().filter(|c| !c.is_whitespace()).collect();
    if !compact.contains("'descr':'<f4'") {
        return Err(bad(
            "only little-endian float32 ('<f4') arrays are supported",
        ));
    }
    if compact.contains("'fortran_order':True") {
        return Err(bad("Fortran-ordered arrays are not supported"));
    }
    let shape_str = compact
        .split("'shape':(")
        .nth(1)
        .and_then(|rest| rest.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("malformed shape")))
        .collect::<Result<_>>()?;
    if dims.len() != 6 {
        return Err(bad(&format!("expected a 6-d array, found shape {dims:?}")));
    }
    check_dims(path, expected, &dims[1..])?;
    Ok((start + len_bytes, dims[0]))
}

/// Loads a dataset in file order with sample ids `0..N`; no normalization.
pub fn load_dataset(path: impl AsRef<Path>, scenario: &ScenarioConfig) -> Result<ChannelDataset> {
    let path = path.as_ref();
    scenario.validate()?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LabError::io(path, e))?;
    let expected = sample_dims(scenario);
    let per_sample: usize = expected.iter().product();

    let (offset, declared) = if bytes.starts_with(MAGIC) {
        let (o, n) = parse_native(path, &bytes, expected)?;
        (o, Some(n))
    } else if bytes.starts_with(NPY_MAGIC) {
        let (o, n) = parse_npy(path, &bytes, expected)?;
        (o, Some(n))
    } else {
        (0, None)
    };
    let payload = &bytes[offset..];
    if payload.len() % 4 != 0 {
        return Err(LabError::format(
            path,
            format!(
                "payload of {} bytes is not a whole number of f32 values",
                payload.len()
            ),
        ));
    }
    let elements = payload.len() / 4;
    let n = match declared {
        Some(n) => {
            if elements != n * per_sample {
                return Err(LabError::format(
                    path,
                    format!("expected {} elements, found {elements}", n * per_sample),
                ));
            }
            n
        }
        None => {
            if elements == 0 || elements % per_sample != 0 {
                return Err(LabError::format(
                    path,
                    format!("expected a multiple of {per_sample} elements, found {elements}"),
                ));
            }
            elements / per_sample
        }
    };
    let speed = match &scenario.speed_kmh {
        SpeedSpec::Single(v) => Some(*v),
        SpeedSpec::Mixture(_) => None,
    };
    let samples = payload
        .chunks_exact(per_sample * 4)
        .take(n)
        .enumerate()
        .map(|(i, chunk)| ChannelSample {
            csi: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            speed_kmh: speed,
            sample_id: i as u64,
        })
        .collect();
    let ds = ChannelDataset {
        samples,
        scenario: scenario.clone(),
        norm_stats: None,
        split_tag: SplitTag::All,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use csi_llm_core::channel::generate_synthetic_dataset;

    fn scenario() -> ScenarioConfig {
        ScenarioConfig {
            n_tx: 2,
            n_rx: 1,
            n_prb: 2,
            n_steps: 3,
            ..ScenarioConfig::ci()
        }
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csds");
        let ds = generate_synthetic_dataset(&scenario(), 2).unwrap();
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 3 * 2 * 2 * 2 * 4);
        let dims: Vec<u64> = (0..6)
            .map(|i| u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, [2, 3, 2, 2, 1, 2]);
        assert_eq!(&bytes[64..68], &ds.samples[0].csi[0].to_le_bytes());
    }

    #[test]
    fn npy_and_raw_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let sc = scenario();
        let ds = generate_synthetic_dataset(&sc, 2).unwrap();
        let payload: Vec<u8> = ds
            .samples
            .iter()
            .flat_map(|s| s.csi.iter().flat_map(|v| v.to_le_bytes()))
            .collect();

        let raw = dir.path().join("raw.bin");
        std::fs::write(&raw, &payload).unwrap();
        assert_eq!(
            load_dataset(&raw, &sc).unwrap().samples[1].csi,
            ds.samples[1].csi
        );

        let mut header =
            String::from("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3, 2, 2, 1, 2), }");
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut npy = Vec::from(&b"\x93NUMPY\x01\x00"[..]);
        npy.extend_from_slice(&(header.len() as u16).to_le_bytes());
        npy.extend_from_slice(header.as_bytes());
        npy.extend_from_slice(&payload);
        let path = dir.path().join("d.npy");
        std::fs::write(&path, &npy).unwrap();
        let loaded = load_dataset(&path, &sc).unwrap();
        assert_eq!(loaded.samples[0].csi, ds.samples[0].csi);

        let other = ScenarioConfig { n_prb: 1, ..sc };
        assert!(matches!(
            load_dataset(&path, &other),
            Err(LabError::Format { .. })
        ));
    }
}
