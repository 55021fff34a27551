//! Dense/sparse matrix substrate.
//!
//! Dense matrices are `ndarray::Array2<f64>` throughout. Sparse matrices
//! use a minimal CSR layout with `f64` values; the two products the
//! training path needs (`S · X` and `Sᵀ · X` for dense `X`) both iterate
//! the stored row order so the dense operand streams sequentially.

use ndarray::{Array2, ArrayView2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Compressed sparse row matrix, `f64` values, deterministic entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    /// Build from triplets. Entries must be unique; they are sorted
    /// row-major then by column.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(u32, u32, f64)>,
    ) -> Result<Self> {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::data(format!(
                    "duplicate sparse entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            if r as usize >= rows || c as usize >= cols {
                return Err(Error::data(format!("sparse entry ({r}, {c}) out of bounds")));
            }
            indptr[r as usize + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// CSR copy of a dense matrix, keeping entries that are exactly nonzero.
    pub fn from_dense(m: &ArrayView2<f64>) -> Self {
        let (rows, cols) = m.dim();
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in m.rows() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// (column, value) pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    /// `self · x` for dense `x`.
    pub fn mul_dense(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(
            self.cols,
            x.nrows(),
            "csr mul: {}x{} times {}x{}",
            self.rows,
            self.cols,
            x.nrows(),
            x.ncols()
        );
        let k = x.ncols();
        let mut out = Array2::zeros((self.rows, k));
        let x = x
            .as_standard_layout()
            .into_owned();
        let xs = x.as_slice().expect("standard layout");
        for i in 0..self.rows {
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            let mut out_row = out.row_mut(i);
            let or = out_row.as_slice_mut().expect("row-major");
            for t in lo..hi {
                let j = self.indices[t] as usize;
                let v = self.values[t];
                let xr = &xs[j * k..(j + 1) * k];
                for (o, &xv) in or.iter_mut().zip(xr) {
                    *o += v * xv;
                }
            }
        }
        out
    }

    /// `selfᵀ · x` for dense `x`, iterating stored rows so `x` streams
    /// sequentially and the output stays cache-resident when small.
    pub fn tr_mul_dense(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(
            self.rows,
            x.nrows(),
            "csr tr_mul: ({}x{})ᵀ times {}x{}",
            self.rows,
            self.cols,
            x.nrows(),
            x.ncols()
        );
        let k = x.ncols();
        let mut out = Array2::zeros((self.cols, k));
        let os = out.as_slice_mut().expect("row-major");
        let x = x.as_standard_layout().into_owned();
        let xs = x.as_slice().expect("standard layout");
        for i in 0..self.rows {
            let lo = self.indptr[i];
            let hi = self.indptr[i + 1];
            let xr = &xs[i * k..(i + 1) * k];
            for t in lo..hi {
                let j = self.indices[t] as usize;
                let v = self.values[t];
                let or = &mut os[j * k..(j + 1) * k];
                for (o, &xv) in or.iter_mut().zip(xr) {
                    *o += v * xv;
                }
            }
        }
        out
    }

    /// Dense copy (test-scale graphs only).
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// True when the matrix equals its transpose (pattern and values).
    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                let lo = self.indptr[j];
                let hi = self.indptr[j + 1];
                let back = self.indices[lo..hi]
                    .binary_search(&(i as u32))
                    .ok()
                    .map(|p| self.values[lo + p]);
                if back != Some(v) {
                    return false;
                }
            }
        }
        true
    }
}

/// Deterministic RNG stream `idx` of a master seed. Runs that must not
/// share randomness (per-seed benchmark runs, per-purpose trainer streams)
/// each take their own stream index.
pub fn seeded_stream(master_seed: u64, idx: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(idx.into());
    rng
}

/// Max |a - b| over all entries; shapes must agree.
pub fn max_abs_diff(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csr_round_trip_dense() {
        let d = array![[0.0, 1.5, 0.0], [2.0, 0.0, 3.0]];
        let s = Csr::from_dense(&d.view());
        assert_eq!(s.nnz(), 3);
        assert_eq!(s.to_dense(), d);
    }

    #[test]
    fn csr_mul_matches_dense() {
        let d = array![[0.0, 2.0], [1.0, 0.0], [0.5, 0.5]];
        let s = Csr::from_dense(&d.view());
        let x = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(s.mul_dense(&x.view()), d.dot(&x));
        let g = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(s.tr_mul_dense(&g.view()), d.t().dot(&g));
    }

    #[test]
    fn duplicate_triplets_rejected() {
        let r = Csr::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn symmetry_detection() {
        let sym = Csr::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(sym.is_symmetric());
        let asym = Csr::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        assert!(!asym.is_symmetric());
    }

    #[test]
    fn streams_are_independent_and_deterministic() {
        use rand::RngCore;
        let mut a = seeded_stream(7, 0);
        let mut b = seeded_stream(7, 1);
        let mut a2 = seeded_stream(7, 0);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut a = seeded_stream(7, 0);
        assert_eq!(a.next_u64(), a2.next_u64());
    }
}
