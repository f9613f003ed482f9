//! Binary feature tables (`BFV1`).
//!
//! Layout: magic `BFV1`, u32 LE row count, u32 LE dimension, a presence
//! bitmap of `ceil(rows / 8)` bytes (LSB-first, bit set = present), then
//! `rows × dim` f32 LE values row-major. Absent rows still occupy space.

use std::io::{Read, Write};

use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"BFV1";

/// One modality: a dense value matrix plus a per-row presence flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRows {
    pub values: Matrix<f32>,
    pub present: Vec<bool>,
}

impl FeatureRows {
    pub fn new(values: Matrix<f32>, present: Vec<bool>) -> Self {
        assert_eq!(values.rows(), present.len(), "one presence flag per row");
        Self { values, present }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// The row if flagged present.
    pub fn get(&self, item: usize) -> Option<&[f32]> {
        self.present[item].then(|| self.values.row(item))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        let mut bitmap = vec![0u8; self.rows().div_ceil(8)];
        for (i, _) in self.present.iter().enumerate().filter(|(_, &p)| p) {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&bitmap)?;
        let mut buf = Vec::with_capacity(self.values.data().len() * 4);
        for v in self.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Parses a `BFV1` stream; the error string describes the format problem.
    pub fn read_from(mut r: impl Read) -> Result<Self, String> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return Err("missing BFV1 magic".into());
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let bitmap_len = rows.div_ceil(8);
        let expected = 12 + bitmap_len + rows * dim * 4;
        if bytes.len() != expected {
            return Err(format!(
                "expected {expected} bytes for {rows}x{dim}, found {}",
                bytes.len()
            ));
        }
        let bitmap = &bytes[12..12 + bitmap_len];
        let present = (0..rows).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
        let data = bytes[12 + bitmap_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = Matrix::from_vec(rows, dim, data).map_err(|e| e.to_string())?;
        Ok(Self { values, present })
    }
}

/// Text and media features for every item.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub text: FeatureRows,
    pub media: FeatureRows,
}

impl FeatureTable {
    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn rows(&self) -> usize {
        self.text.rows()
    }
}
