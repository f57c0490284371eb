//! Sparse linear operators applied independently to every sample of a batch.
//!
//! Patch extraction for convolutions, pooling, nearest/bilinear resampling,
//! flips, rotations and translations are all instances. The adjoint is built
//! lazily, and the adjoint of the adjoint is the original map, so these
//! operators can be differentiated to any order.

use super::Array;
use ndarray::IxDyn;
use std::sync::{Arc, OnceLock};

pub struct LinearMap {
    in_len: usize,
    out_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    /// `None` means every stored entry has weight 1.
    weights: Option<Vec<f64>>,
    adjoint: OnceLock<Arc<LinearMap>>,
}

impl std::fmt::Debug for LinearMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LinearMap({} -> {}, nnz {})", self.in_len, self.out_len, self.cols.len())
    }
}

/// Accumulates a map row by row.
pub struct MapBuilder {
    in_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    unit: bool,
}

impl MapBuilder {
    pub fn new(in_len: usize) -> Self {
        MapBuilder {
            in_len,
            row_ptr: vec![0],
            cols: Vec::new(),
            weights: Vec::new(),
            unit: true,
        }
    }

    pub fn with_capacity(in_len: usize, rows: usize, nnz: usize) -> Self {
        let mut b = Self::new(in_len);
        b.row_ptr.reserve(rows);
        b.cols.reserve(nnz);
        b.weights.reserve(nnz);
        b
    }

    /// Appends an output row equal to `x[col]`, or zero when `col` is `None`.
    pub fn push_single(&mut self, col: Option<usize>) {
        if let Some(c) = col {
            debug_assert!(c < self.in_len);
            self.cols.push(c as u32);
            self.weights.push(1.0);
        }
        self.row_ptr.push(self.cols.len());
    }

    /// Appends an output row equal to `sum_k w_k * x[col_k]`.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(c, w) in entries {
            debug_assert!(c < self.in_len);
            if w == 0.0 {
                continue;
            }
            if w != 1.0 {
                self.unit = false;
            }
            self.cols.push(c as u32);
            self.weights.push(w);
        }
        self.row_ptr.push(self.cols.len());
    }

    pub fn build(self) -> LinearMap {
        LinearMap {
            in_len: self.in_len,
            out_len: self.row_ptr.len() - 1,
            row_ptr: self.row_ptr,
            cols: self.cols,
            weights: if self.unit { None } else { Some(self.weights) },
            adjoint: OnceLock::new(),
        }
    }
}

impl LinearMap {
    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// The transposed operator, computed once and shared.
    pub fn adjoint(self: &Arc<Self>) -> Arc<LinearMap> {
        self.adjoint
            .get_or_init(|| Arc::new(self.transpose_uncached()))
            .clone()
    }

    fn transpose_uncached(&self) -> LinearMap {
        let mut counts = vec![0usize; self.in_len + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.in_len {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0u32; self.cols.len()];
        let mut weights = self.weights.as_ref().map(|_| vec![0.0; self.cols.len()]);
        for r in 0..self.out_len {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k] as usize;
                let dst = fill[c];
                fill[c] += 1;
                cols[dst] = r as u32;
                if let (Some(w), Some(src)) = (weights.as_mut(), self.weights.as_ref()) {
                    w[dst] = src[k];
                }
            }
        }
        LinearMap {
            in_len: self.out_len,
            out_len: self.in_len,
            row_ptr,
            cols,
            weights,
            adjoint: OnceLock::new(),
        }
    }

    /// Applies the map to each leading-axis sample of `x`.
    pub fn apply(&self, x: &Array, out_sample_shape: &[usize]) -> Array {
        let shape = x.shape();
        let n = shape[0];
        let per: usize = shape[1..].iter().product();
        assert_eq!(per, self.in_len, "linear map expects {} values per sample, got {}", self.in_len, per);
        assert_eq!(
            out_sample_shape.iter().product::<usize>(),
            self.out_len,
            "output sample shape does not match map"
        );
        let std = x.as_standard_layout();
        let src = std.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * self.out_len];
        for s in 0..n {
            let xs = &src[s * per..(s + 1) * per];
            let ys = &mut out[s * self.out_len..(s + 1) * self.out_len];
            match &self.weights {
                None => {
                    for (r, y) in ys.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for &c in &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]] {
                            acc += xs[c as usize];
                        }
                        *y = acc;
                    }
                }
                Some(w) => {
                    for (r, y) in ys.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                            acc += w[k] * xs[self.cols[k] as usize];
                        }
                        *y = acc;
                    }
                }
            }
        }
        let mut full = vec![n];
        full.extend_from_slice(out_sample_shape);
        Array::from_shape_vec(IxDyn(&full), out).expect("linear map output shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut b = MapBuilder::new(3);
        b.push_row(&[(0, 2.0), (2, -1.0)]);
        b.push_single(None);
        b.push_row(&[(1, 0.5)]);
        b.push_single(Some(2));
        let m = Arc::new(b.build());
        let x = Array::from_shape_vec(IxDyn(&[1, 3]), vec![1.0, 2.0, 3.0]).unwrap();
        let y = Array::from_shape_vec(IxDyn(&[1, 4]), vec![0.5, -1.0, 4.0, 2.0]).unwrap();
        let mx = m.apply(&x, &[4]);
        let mty = m.adjoint().apply(&y, &[3]);
        let lhs: f64 = mx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(mty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let back = m.adjoint().adjoint().apply(&x, &[4]);
        assert_eq!(back, mx);
    }
}
