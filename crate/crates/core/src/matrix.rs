//! Sample matrices and the `SGMX` binary format.
//!
//! Layout: magic `SGMX`, version `u32 = 1`, rows `u64`, cols `u64`, then
//! `rows * cols` little-endian `f64` values in row-major order. Channel order
//! and column provenance of a [`SampleMatrix`] live in `<path>.meta.json`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChannelSpec, Mode};

pub const MAGIC: &[u8; 4] = b"SGMX";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Where a cross-section column came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub day: u32,
}

/// Channels x cross-sections matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub values: DMatrix<f64>,
    pub channels: Vec<ChannelSpec>,
    pub provenance: Vec<Provenance>,
}

impl SampleMatrix {
    pub fn new(
        values: DMatrix<f64>,
        channels: Vec<ChannelSpec>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if values.nrows() != channels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} channels",
                values.nrows(),
                channels.len()
            )));
        }
        if values.ncols() != provenance.len() {
            return Err(Error::Shape(format!(
                "{} columns but {} provenance entries",
                values.ncols(),
                provenance.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, column {}",
                bad % values.nrows(),
                bad / values.nrows()
            )));
        }
        Ok(SampleMatrix {
            values,
            channels,
            provenance,
        })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.channels.iter().map(|c| c.mode).collect()
    }

    /// Returns a matrix with the same metadata and new values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        SampleMatrix::new(values, self.channels.clone(), self.provenance.clone())
    }

    pub fn same_channels(&self, channels: &[ChannelSpec]) -> Result<()> {
        if self.channels.len() != channels.len()
            || self
                .channels
                .iter()
                .zip(channels)
                .any(|(a, b)| a.id != b.id || a.mode != b.mode)
        {
            return Err(Error::Shape("channel order mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    channels: Vec<ChannelSpec>,
    provenance: Vec<Provenance>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Serializes a bare matrix to `SGMX` bytes.
pub fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

/// Reads one `SGMX` block from the front of `bytes`, returning the matrix and
/// the number of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(DMatrix<f64>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = usize::try_from(rows)
        .ok()
        .zip(usize::try_from(cols).ok())
        .and_then(|(r, c)| r.checked_mul(c))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("dimensions {rows}x{cols} overflow")))?;
    let end = HEADER_LEN
        .checked_add(payload)
        .ok_or_else(|| Error::Format(format!("dimensions {rows}x{cols} overflow")))?;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated payload: need {payload} bytes, have {}",
            bytes.len() - HEADER_LEN
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let data = &bytes[HEADER_LEN..end];
    let m = DMatrix::from_fn(rows, cols, |r, c| {
        let o = 8 * (r * cols + c);
        f64::from_le_bytes(data[o..o + 8].try_into().unwrap())
    });
    Ok((m, end))
}

pub fn write_sgmx(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(m)).map_err(|e| Error::io(path, e))
}

pub fn read_sgmx(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (m, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after matrix",
            bytes.len() - used
        )));
    }
    Ok(m)
}

pub fn write_matrix(m: &SampleMatrix, path: &Path) -> Result<()> {
    write_sgmx(path, &m.values)?;
    let meta = Meta {
        channels: m.channels.clone(),
        provenance: m.provenance.clone(),
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
}

pub fn read_matrix(path: &Path) -> Result<SampleMatrix> {
    let values = read_sgmx(path)?;
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    SampleMatrix::new(values, meta.channels, meta.provenance)
        .map_err(|e| Error::Format(format!("metadata does not match matrix: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn channels(p: usize) -> Vec<ChannelSpec> {
        (0..p)
            .map(|i| ChannelSpec::new(format!("ch{i}"), Mode::Measurement, "u"))
            .collect()
    }

    fn prov(n: usize) -> Vec<Provenance> {
        (0..n)
            .map(|i| Provenance {
                record_id: format!("r{}", i / 2),
                day: i as u32,
            })
            .collect()
    }

    #[test]
    fn two_by_three_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgmx");
        let values = DMatrix::from_row_slice(2, 3, &[1.0, -0.0, 3.5, f64::MIN_POSITIVE, 5.0, -6.25]);
        let m = SampleMatrix::new(values, channels(2), prov(3)).unwrap();
        write_matrix(&m, &path).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.channels, m.channels);
        assert_eq!(back.provenance, m.provenance);
        for (a, b) in back.values.iter().zip(m.values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // row-major payload
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"SGMX");
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()).to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn empty_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.sgmx");
        let m = SampleMatrix::new(DMatrix::zeros(4, 0), channels(4), vec![]).unwrap();
        write_matrix(&m, &path).unwrap();
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode(&DMatrix::from_element(3, 3, 1.5));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&huge), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_entries_rejected() {
        let v = DMatrix::from_element(1, 1, f64::NAN);
        assert!(SampleMatrix::new(v, channels(1), prov(1)).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            rows in 0usize..5,
            cols in 0usize..5,
            seed in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL, 25)
        ) {
            let m = DMatrix::from_fn(rows, cols, |r, c| seed[r * 5 + c]);
            let (back, used) = decode(&encode(&m)).unwrap();
            prop_assert_eq!(used, HEADER_LEN + 8 * rows * cols);
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
