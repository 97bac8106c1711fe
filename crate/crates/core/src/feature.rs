//! Dense embedding matrices and their binary file format.
//!
//! Layout: a 16-byte header (`b"FMAT"`, rows `u32`, dim `u32`, provenance
//! code `u32`, all little-endian) followed by `rows * dim` little-endian
//! `f32` values in row-major order. External feature extractors can write
//! this format directly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;
use crate::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"FMAT";
pub const FEATURE_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Tile,
    Region,
    Compressed,
    Text,
}

impl Provenance {
    pub fn code(self) -> u32 {
        match self {
            Provenance::Tile => 0,
            Provenance::Region => 1,
            Provenance::Compressed => 2,
            Provenance::Text => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => Provenance::Tile,
            1 => Provenance::Region,
            2 => Provenance::Compressed,
            3 => Provenance::Text,
            other => return Err(Error::Format(format!("unknown provenance code {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    provenance: Provenance,
}

impl FeatureMatrix {
    /// Fails when `data.len() != rows * dim` or any entry is non-finite.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape("FeatureMatrix", rows * dim, data.len()));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature matrix entry {i}")));
        }
        Ok(Self {
            rows,
            dim,
            data,
            provenance,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], provenance: Provenance) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::shape("FeatureMatrix row", dim, format!("{} (row {i})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data, provenance)
    }

    /// Narrows an `f64` matrix to `f32` storage.
    pub fn from_mat(m: &Mat, provenance: Provenance) -> Result<Self> {
        let data = m.as_slice().iter().map(|&x| x as f32).collect();
        Self::new(m.rows(), m.cols(), data, provenance)
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.rows,
            self.dim,
            self.data.iter().map(|&x| x as f64).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// Stacks matrices of equal dim vertically.
    pub fn concat_rows(parts: &[FeatureMatrix], provenance: Provenance) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.dim != dim {
                return Err(Error::shape("concat_rows", dim, p.dim));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self::new(rows, dim, data, provenance)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.provenance.code().to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::Format("feature file shorter than header".into()));
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("bad feature file magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let rows = word(4) as usize;
        let dim = word(8) as usize;
        let provenance = Provenance::from_code(word(12))?;
        let body = &bytes[FEATURE_HEADER_LEN..];
        if body.len() != rows * dim * 4 {
            return Err(Error::Format(format!(
                "feature body is {} bytes, header declares {rows}x{dim}",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, dim, data, provenance)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(FeatureMatrix::new(1, 2, vec![1.0, f32::NAN], Provenance::Tile).is_err());
        assert!(FeatureMatrix::new(2, 2, vec![1.0; 3], Provenance::Tile).is_err());
    }

    #[test]
    fn header_layout() {
        let m = FeatureMatrix::new(2, 3, vec![0.5; 6], Provenance::Compressed).unwrap();
        let b = m.to_bytes();
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(&b[..4], b"FMAT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(&b[16..20], &0.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_or_corrupt_files_are_rejected() {
        let m = FeatureMatrix::new(2, 3, vec![0.25; 6], Provenance::Region).unwrap();
        let mut b = m.to_bytes();
        assert!(FeatureMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(rows in 0usize..6, dim in 0usize..6, seed in any::<u32>(), prov in 0u32..4) {
            let data: Vec<f32> = (0..rows * dim)
                .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) as f32) * 1e-6)
                .collect();
            let m = FeatureMatrix::new(rows, dim, data, Provenance::from_code(prov).unwrap()).unwrap();
            prop_assert_eq!(FeatureMatrix::from_bytes(&m.to_bytes()).unwrap(), m);
        }
    }
}
