use serde::{Deserialize, Serialize};

/// Row-major boolean grid. `true` means the (query, key) pair participates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoolGrid {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolGrid {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                bits.push(f(r, c));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Self {
            rows: rows.len(),
            cols,
            bits: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    /// Whether row `r` has at least one participating key.
    pub fn row_active(&self, r: usize) -> bool {
        self.row(r).iter().any(|&b| b)
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fill_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_true() as f64 / self.bits.len() as f64
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Copies the sub-grid at `(r0, c0)` of the given size.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> BoolGrid {
        BoolGrid::from_fn(rows, cols, |r, c| self.get(r0 + r, c0 + c))
    }
}
