use std::path::Path;

use super::ClassId;
use crate::error::{Error, Result};

/// Row-major per-pixel class labels.
///
/// Text form: a first line `H W`, then `H` lines of `W` space-separated ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<ClassId>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{height}x{width} = {} labels", height * width),
                got: labels.len().to_string(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, c: ClassId) -> Self {
        Self {
            height,
            width,
            labels: vec![c; height * width],
        }
    }

    pub fn from_rows(rows: &[&[u32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::format("label grid", "ragged rows"));
        }
        Self::new(
            height,
            width,
            rows.iter().flat_map(|r| r.iter().map(|&v| ClassId(v))).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> ClassId {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, c: ClassId) {
        self.labels[row * self.width + col] = c;
    }

    pub fn try_map(&self, f: impl Fn(ClassId) -> Result<ClassId>) -> Result<Self> {
        Ok(Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&c| f(c)).collect::<Result<_>>()?,
        })
    }

    pub fn ensure_same_shape(&self, other: &LabelGrid) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.height, self.width),
                got: format!("{}x{}", other.height, other.width),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.height, self.width);
        for row in self.labels.chunks(self.width.max(1)).take(self.height) {
            let line: Vec<String> = row.iter().map(|c| c.0.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("label grid", "missing header"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("label grid", format!("bad header `{header}`: {e}")))?;
        let [height, width] = dims[..] else {
            return Err(Error::format("label grid", format!("bad header `{header}`")));
        };
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            let line = lines
                .next()
                .ok_or_else(|| Error::format("label grid", format!("missing row {r}")))?;
            let before = labels.len();
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<u32>()
                    .map_err(|e| Error::format("label grid", format!("row {r}: `{tok}`: {e}")))?;
                labels.push(ClassId(v));
            }
            if labels.len() - before != width {
                return Err(Error::format(
                    "label grid",
                    format!("row {r} has {} values, expected {width}", labels.len() - before),
                ));
            }
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::format("label grid", "trailing rows"));
        }
        Self::new(height, width, labels)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
