// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices and the handful of kernels the engine needs.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Square identity.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Wrap row-major data. Entries must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Shape("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True when every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product with `f64` accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LabError::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `out += x · W` for a row vector `x`. Zero entries of `x` are skipped.
#[inline]
pub fn vecmat_acc(x: &[f64], w: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &wkj) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wkj;
        }
    }
}

/// Softmax of every row, optionally restricted to entries where `mask` is true.
///
/// Masked entries come out as exactly `0.0`. Rows are shifted by their
/// maximum before exponentiation.
pub fn row_softmax(m: &Matrix, mask: Option<&[Vec<bool>]>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.len() != m.rows || mask.iter().any(|r| r.len() != m.cols) {
            return Err(LabError::Shape("mask shape differs from matrix".into()));
        }
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let keep: Vec<bool> = match mask {
            Some(mask) => mask[r].clone(),
            None => vec![true; m.cols],
        };
        softmax_masked_into(m.row(r), &keep, out.row_mut(r))
            .map_err(|_| LabError::DegenerateRow { row: r })?;
    }
    Ok(out)
}

/// Softmax of `scores` over the entries flagged in `keep`, written into `out`.
pub(crate) fn softmax_masked_into(scores: &[f64], keep: &[bool], out: &mut [f64]) -> Result<()> {
    let max = scores
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(LabError::DegenerateRow { row: 0 });
    }
    let mut sum = 0.0;
    for ((o, &s), &k) in out.iter_mut().zip(scores).zip(keep) {
        *o = if k { (s - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Full softmax of a vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Natural-log softmax of a vector.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

/// Index of the maximum and its lead over the runner-up.
///
/// Ties go to the lower index.
pub fn argmax_with_margin(v: &[f64]) -> Result<(usize, f64)> {
    if v.len() < 2 {
        return Err(LabError::Shape(format!(
            "argmax_with_margin needs at least 2 entries, got {}",
            v.len()
        )));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    let second = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((best, v[best] - second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn identity_product() {
        let x = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_triple_loop_5x7x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(LabError::Shape(_))));
    }

    #[test]
    fn softmax_rows() {
        let m = Matrix::from_rows(&[
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1000.0, 1000.0, 0.0, 0.0],
            vec![0.0, 3f64.ln(), 0.0, 0.0],
        ])
        .unwrap();
        let mask = vec![
            vec![true; 4],
            vec![true, true, false, false],
            vec![true, true, false, false],
        ];
        let s = row_softmax(&m, Some(&mask)).unwrap();
        assert!(s.row(0).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(s.row(1), &[0.5, 0.5, 0.0, 0.0]);
        assert!((s.get(2, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let m = Matrix::zeros(2, 2);
        let mask = vec![vec![true, false], vec![false, false]];
        assert!(matches!(
            row_softmax(&m, Some(&mask)),
            Err(LabError::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn argmax_examples() {
        let (i, m) = argmax_with_margin(&[0.1, 0.9, 0.3]).unwrap();
        assert_eq!(i, 1);
        assert!((m - 0.6).abs() < 1e-12);
        assert_eq!(argmax_with_margin(&[0.5, 0.5]).unwrap(), (0, 0.0));
        assert!(argmax_with_margin(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_normalised(
            rows in prop::collection::vec(prop::collection::vec(-500.0f64..500.0, 1..12), 1..8),
            seed in any::<u64>(),
        ) {
            let cols = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let m = Matrix::from_rows(&rows).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<Vec<bool>> = (0..m.rows()).map(|_| {
                let mut r: Vec<bool> = (0..cols).map(|_| rng.gen_bool(0.6)).collect();
                r[rng.gen_range(0..cols)] = true;
                r
            }).collect();
            let s = row_softmax(&m, Some(&mask)).unwrap();
            for (r, keep) in mask.iter().enumerate() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                for (c, &k) in keep.iter().enumerate() {
                    if !k { prop_assert_eq!(s.get(r, c), 0.0); }
                }
            }
        }

        #[test]
        fn matmul_matches_oracle(r in 1usize..64, k in 1usize..64, c in 1usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, r, k);
            let b = random(&mut rng, k, c);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn argmax_permutation_consistent(v in prop::collection::vec(-10.0f64..10.0, 2..20), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..v.len()).collect();
            for i in (1..perm.len()).rev() { perm.swap(i, rng.gen_range(0..=i)); }
            let permuted: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let (a, ma) = argmax_with_margin(&v).unwrap();
            let (b, mb) = argmax_with_margin(&permuted).unwrap();
            prop_assert_eq!(v[perm[b]], v[a]);
            prop_assert_eq!(ma, mb);
            if ma > 0.0 { prop_assert_eq!(perm[b], a); }
        }
    }
}
