//! Dense row-major f64 matrices and the matmul kernels the tape is built on.
//!
//! Parallel kernels split work into a fixed number of chunks with disjoint
//! output ranges and combine partials in index order, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

/// Number of chunks used by parallel reductions. Fixed so that floating-point
/// summation order does not depend on the thread pool size.
const REDUCE_CHUNKS: usize = 8;

/// Row-major 2D array of f64. Vectors are 1xN or Nx1; scalars are 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    /// A 1x1 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Build an Nx3 tensor from a slice of 3D points.
    pub fn from_points(points: &[[f64; 3]]) -> Self {
        let mut data = Vec::with_capacity(points.len() * 3);
        for p in points {
            data.extend_from_slice(p);
        }
        Tensor {
            rows: points.len(),
            cols: 3,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// The single value of a 1x1 tensor.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "as_scalar on non-scalar tensor");
        self.data[0]
    }

    /// Row `r` interpreted as a 3D point. Requires 3 columns.
    pub fn point(&self, r: usize) -> [f64; 3] {
        debug_assert_eq!(self.cols, 3);
        let row = self.row(r);
        [row[0], row[1], row[2]]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Sum of all entries, accumulated in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// C = A * B.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dimensions {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_acc(&mut out, self, other);
        out
    }
}

/// Work threshold (in multiply-add counts) below which parallel dispatch
/// costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 20;

/// dst += A * B. Parallel over fixed row blocks; each row is computed
/// sequentially, so output bits do not depend on the thread count.
pub fn matmul_acc(dst: &mut Tensor, a: &Tensor, b: &Tensor) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(dst.rows, a.rows);
    assert_eq!(dst.cols, b.cols);
    let n = b.cols;
    let k = a.cols;
    let work = a.rows * k * n;
    let body = |row0: usize, rows: &mut [f64]| {
        for (local, dst_row) in rows.chunks_mut(n).enumerate() {
            let a_row = a.row(row0 + local);
            // Register-tiled columns: accumulate 32 outputs across the whole
            // k loop so the destination is touched once per tile.
            let mut j = 0;
            while j + 32 <= n {
                let mut acc = [0.0f64; 32];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b.data[kk * n + j..kk * n + j + 32];
                    for t in 0..32 {
                        acc[t] += aik * b_row[t];
                    }
                }
                for t in 0..32 {
                    dst_row[j + t] += acc[t];
                }
                j += 32;
            }
            if j < n {
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b.data[kk * n..kk * n + n];
                    for t in j..n {
                        dst_row[t] += aik * b_row[t];
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && a.rows >= 2 * REDUCE_CHUNKS {
        let chunk_rows = a.rows.div_ceil(REDUCE_CHUNKS);
        dst.data
            .par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| body(ci * chunk_rows, chunk));
    } else {
        body(0, &mut dst.data);
    }
}

/// dst += A^T * B, where A is MxK and B is MxN (dst is KxN).
///
/// This is the weight-gradient kernel: reduction over the M batch rows uses a
/// fixed chunk count so the summation order is independent of thread count.
pub fn matmul_atb_acc(dst: &mut Tensor, a: &Tensor, b: &Tensor) {
    assert_eq!(a.rows, b.rows);
    assert_eq!(dst.rows, a.cols);
    assert_eq!(dst.cols, b.cols);
    let m = a.rows;
    let k = a.cols;
    let n = b.cols;
    let chunk = m.div_ceil(REDUCE_CHUNKS).max(1);
    let partial = |range: std::ops::Range<usize>| -> Tensor {
        let mut acc = Tensor::zeros(k, n);
        for r in range {
            let a_row = a.row(r);
            let b_row = b.row(r);
            for (i, &ari) in a_row.iter().enumerate() {
                if ari == 0.0 {
                    continue;
                }
                let acc_row = &mut acc.data[i * n..i * n + n];
                for j in 0..n {
                    acc_row[j] += ari * b_row[j];
                }
            }
        }
        acc
    };
    let ranges: Vec<_> = (0..m)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(m))
        .collect();
    let partials: Vec<Tensor> = if m * k * n >= PAR_THRESHOLD {
        ranges.into_par_iter().map(partial).collect()
    } else {
        ranges.into_iter().map(partial).collect()
    };
    for p in partials {
        for (d, s) in dst.data.iter_mut().zip(p.data.iter()) {
            *d += s;
        }
    }
}

/// dst += A * B^T, where A is MxK and B is NxK (dst is MxN).
///
/// B is a parent value in backward passes and is small in every graph this
/// crate builds, so materializing its transpose and reusing the tiled kernel
/// beats a dot-product loop.
pub fn matmul_abt_acc(dst: &mut Tensor, a: &Tensor, b: &Tensor) {
    assert_eq!(a.cols, b.cols);
    assert_eq!(dst.rows, a.rows);
    assert_eq!(dst.cols, b.rows);
    let bt = b.transpose();
    matmul_acc(dst, a, &bt);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::from_vec(4, 3, (0..12).map(|v| v as f64 * 0.37 - 1.1).collect());
        let b = Tensor::from_vec(4, 2, (0..8).map(|v| v as f64 * 0.21 - 0.4).collect());
        // A^T * B via kernel vs explicit transpose.
        let mut atb = Tensor::zeros(3, 2);
        matmul_atb_acc(&mut atb, &a, &b);
        let expected = a.transpose().matmul(&b);
        for (x, y) in atb.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // A * B^T via kernel vs explicit transpose.
        let c = Tensor::from_vec(5, 3, (0..15).map(|v| (v as f64).sin()).collect());
        let mut abt = Tensor::zeros(4, 5);
        matmul_abt_acc(&mut abt, &a, &c);
        let expected = a.matmul(&c.transpose());
        for (x, y) in abt.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_matmul_matches_serial() {
        // Large enough to take the parallel path; compare against a naive loop.
        let m = 300;
        let k = 17;
        let n = 23;
        let a = Tensor::from_vec(m, k, (0..m * k).map(|v| ((v * 31 % 97) as f64) / 97.0).collect());
        let b = Tensor::from_vec(k, n, (0..k * n).map(|v| ((v * 17 % 89) as f64) / 89.0).collect());
        let c = a.matmul(&b);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.get(i, kk) * b.get(kk, j);
                }
                assert!((c.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(3, 4, (0..12).map(|v| v as f64).collect());
        assert_eq!(a.transpose().transpose(), a);
    }
}
