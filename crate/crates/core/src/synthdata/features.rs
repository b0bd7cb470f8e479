use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CLFG";
const VERSION: u32 = 1;

/// Row-major `height x width x d_in` pixel features.
///
/// Binary form: `b"CLFG"`, version `u32`, `H`, `W`, `D` as `u32`, then
/// `H*W*D` little-endian `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    d_in: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, d_in: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * d_in {
            return Err(Error::DimensionMismatch {
                expected: format!("{height}x{width}x{d_in} = {} values", height * width * d_in),
                got: data.len().to_string(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("feature value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            d_in,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.d_in;
        &self.data[i..i + self.d_in]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.height as u32, self.width as u32, self.d_in as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::format("feature grid", "bad magic or truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != VERSION {
            return Err(Error::format("feature grid", format!("unsupported version {}", word(0))));
        }
        let (h, w, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let body = &bytes[20..];
        if body.len() != 8 * h * w * d {
            return Err(Error::format(
                "feature grid",
                format!("expected {} payload bytes for {h}x{w}x{d}, found {}", 8 * h * w * d, body.len()),
            ));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(h, w, d, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
