//! 2D rotary positions. Each head's rotary pairs are split in half: the first
//! half rotates by the row coordinate, the second by the column.

use ndarray::{Array2, ArrayViewMut2};

use super::Float;

/// Per-token `cos`/`sin` tables, `S x (head_dim / 2)`.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    pub cos: Array2<T>,
    pub sin: Array2<T>,
}

impl<T: Float> RopeTable<T> {
    pub fn new(positions: &[(i32, i32)], head_dim: usize, base: f64) -> Self {
        let pairs = head_dim / 2;
        let row_pairs = pairs / 2;
        let col_pairs = pairs - row_pairs;
        let freq = |j: usize, n: usize| base.powf(-(j as f64) / n as f64);
        let mut cos = Array2::zeros((positions.len(), pairs));
        let mut sin = Array2::zeros((positions.len(), pairs));
        for (i, &(r, c)) in positions.iter().enumerate() {
            for p in 0..pairs {
                let angle = if p < row_pairs {
                    r as f64 * freq(p, row_pairs)
                } else {
                    c as f64 * freq(p - row_pairs, col_pairs)
                };
                cos[[i, p]] = T::from_f64(angle.cos()).unwrap();
                sin[[i, p]] = T::from_f64(angle.sin()).unwrap();
            }
        }
        RopeTable { cos, sin }
    }

    /// Rotate every head of `x` (`S x heads*head_dim`) in place. `inverse`
    /// applies the transpose rotation, which is what the backward pass needs.
    pub fn apply(&self, mut x: ArrayViewMut2<T>, heads: usize, inverse: bool) {
        let pairs = self.cos.ncols();
        let hd = 2 * pairs;
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            for h in 0..heads {
                for p in 0..pairs {
                    let (c, mut s) = (self.cos[[i, p]], self.sin[[i, p]]);
                    if inverse {
                        s = -s;
                    }
                    let a = h * hd + 2 * p;
                    let (x0, x1) = (row[a], row[a + 1]);
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}
