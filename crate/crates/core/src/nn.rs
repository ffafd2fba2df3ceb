//! Dense f64 kernels with explicit backward passes.
//!
//! Everything is row-major. Matrix products go through `matrixmultiply`;
//! strided views let attention heads be addressed without copies.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_> {
        View {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_> {
        let (rows, cols) = (self.rows, self.cols);
        ViewMut {
            data: &mut self.data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
        }
    }

    /// Columns `[c0, c0 + n)` as a strided view.
    pub fn col_block(&self, c0: usize, n: usize) -> View<'_> {
        assert!(c0 + n <= self.cols);
        View {
            data: &self.data,
            offset: c0,
            rows: self.rows,
            cols: n,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn col_block_mut(&mut self, c0: usize, n: usize) -> ViewMut<'_> {
        assert!(c0 + n <= self.cols);
        let (rows, cols) = (self.rows, self.cols);
        ViewMut {
            data: &mut self.data,
            offset: c0,
            rows,
            cols: n,
            rs: cols as isize,
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a row vector to every row.
    pub fn add_row_vec(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    /// Accumulates the column sums into `out`.
    pub fn sum_rows_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub fn t(self) -> View<'a> {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize + (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        assert!(last >= 0 && (last as usize) < self.data.len(), "view out of bounds");
    }
}

/// Mutable view with unit column stride.
pub struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: isize,
}

impl ViewMut<'_> {
    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset as isize + (self.rows as isize - 1) * self.rs + self.cols as isize - 1;
        assert!(last >= 0 && (last as usize) < self.data.len(), "view out of bounds");
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for r in 0..c.rows {
            let start = (c.offset as isize + r as isize * c.rs) as usize;
            for v in &mut c.data[start..start + c.cols] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above; `c` is borrowed
    // mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a.view(), b.view(), 0.0, c.view_mut());
    c
}

/// `x * w + b` for a weight `(in, out)` and bias `(1, out)`.
pub fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = matmul(x, w);
    y.add_row_vec(&b.data);
    y
}

/// Backward of [`linear`]: accumulates weight and bias gradients and
/// returns the input gradient.
pub fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    gemm(1.0, x.view().t(), dy.view(), 1.0, dw.view_mut());
    dy.sum_rows_into(&mut db.data);
    let mut dx = Mat::zeros(x.rows, x.cols);
    gemm(1.0, dy.view(), w.view().t(), 0.0, dx.view_mut());
    dx
}

const LN_EPS: f64 = 1e-6;

/// Row-wise layer norm without affine parameters. Returns the normalized
/// rows and the per-row inverse standard deviation.
pub fn layer_norm(x: &Mat) -> (Mat, Vec<f64>) {
    let n = x.cols as f64;
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in y.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (y, inv_std)
}

pub fn layer_norm_backward(y: &Mat, inv_std: &[f64], dy: &Mat) -> Mat {
    let n = y.cols as f64;
    let mut dx = Mat::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (yr, gr) = (y.row(r), dy.row(r));
        let mean_g = gr.iter().sum::<f64>() / n;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
        for ((o, g), yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
            *o = inv_std[r] * (g - mean_g - yv * mean_gy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// In-place numerically stable softmax of every row. Entries equal to
/// `-inf` receive zero weight; a row that is entirely `-inf` is left as all
/// zeros.
pub fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Saved state of one multi-head attention call.
pub struct AttentionCache {
    /// Per-head attention probabilities, each `(n_q, n_k)`.
    pub probs: Vec<Mat>,
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `(n_q, d)`, `k` and `v` are `(n_k, d)` with `d` split evenly over
/// `heads`. `bias`, when given, is a dense `(n_q, n_k)` additive logit bias
/// shared by all heads and may contain `-inf`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, bias: Option<&[f64]>) -> (Mat, AttentionCache) {
    let d = q.cols;
    assert_eq!(k.cols, d);
    assert_eq!(v.cols, d);
    assert_eq!(k.rows, v.rows);
    assert_eq!(d % heads, 0, "dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if let Some(b) = bias {
        assert_eq!(b.len(), q.rows * k.rows, "bias shape");
    }
    let mut out = Mat::zeros(q.rows, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = Mat::zeros(q.rows, k.rows);
        gemm(scale, q.col_block(h * dh, dh), k.col_block(h * dh, dh).t(), 0.0, s.view_mut());
        if let Some(b) = bias {
            for (sv, bv) in s.data.iter_mut().zip(b) {
                *sv += bv;
            }
        }
        softmax_rows(&mut s);
        gemm(1.0, s.view(), v.col_block(h * dh, dh), 0.0, out.col_block_mut(h * dh, dh));
        probs.push(s);
    }
    (out, AttentionCache { probs })
}

/// Backward of [`attention`]; returns `(dq, dk, dv)`.
pub fn attention_backward(q: &Mat, k: &Mat, v: &Mat, cache: &AttentionCache, dout: &Mat) -> (Mat, Mat, Mat) {
    let heads = cache.probs.len();
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, d);
    let mut dk = Mat::zeros(k.rows, d);
    let mut dv = Mat::zeros(v.rows, d);
    for (h, p) in cache.probs.iter().enumerate() {
        let doh = dout.col_block(h * dh, dh);
        gemm(1.0, p.view().t(), doh, 0.0, dv.col_block_mut(h * dh, dh));
        let mut ds = Mat::zeros(p.rows, p.cols);
        gemm(1.0, doh, v.col_block(h * dh, dh).t(), 0.0, ds.view_mut());
        for r in 0..p.rows {
            let pr = p.row(r);
            let dr = ds.row_mut(r);
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot);
            }
        }
        gemm(scale, ds.view(), k.col_block(h * dh, dh), 0.0, dq.col_block_mut(h * dh, dh));
        gemm(scale, ds.view().t(), q.col_block(h * dh, dh), 0.0, dk.col_block_mut(h * dh, dh));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        Mat::from_fn(a.rows, b.cols, |r, c| (0..a.cols).map(|i| a.at(r, i) * b.at(i, c)).sum())
    }

    fn pseudo(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed;
        Mat::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn gemm_matches_naive_including_transposed_and_blocked_views() {
        let a = pseudo(5, 7, 1);
        let b = pseudo(7, 3, 2);
        let c = matmul(&a, &b);
        let n = naive(&a, &b);
        for (x, y) in c.data.iter().zip(&n.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = Mat::from_fn(3, 7, |r, c| b.at(c, r));
        let mut c2 = Mat::zeros(5, 3);
        gemm(1.0, a.view(), bt.view().t(), 0.0, c2.view_mut());
        assert_eq!(c2, c);

        let mut wide = Mat::zeros(5, 6);
        gemm(1.0, a.view(), b.view(), 0.0, wide.col_block_mut(2, 3));
        for r in 0..5 {
            assert_eq!(&wide.row(r)[2..5], c.row(r));
            assert_eq!(wide.row(r)[0], 0.0);
        }
    }

    #[test]
    fn softmax_handles_masked_entries() {
        let mut m = Mat::from_vec(2, 3, vec![0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        softmax_rows(&mut m);
        assert_eq!(m.row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_gradients_match_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_backward_matches_differences() {
        let q = pseudo(4, 6, 3);
        let k = pseudo(5, 6, 4);
        let v = pseudo(5, 6, 5);
        let g = pseudo(4, 6, 6);
        let mut bias = vec![0.0; 20];
        bias[3] = 1.5;
        bias[7] = f64::NEG_INFINITY;
        let loss = |q: &Mat, k: &Mat, v: &Mat| -> f64 {
            let (o, _) = attention(q, k, v, 2, Some(&bias));
            o.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = attention(&q, &k, &v, 2, Some(&bias));
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &g);
        let h = 1e-6;
        for (m, dm, which) in [(&q, &dq, 0), (&k, &dk, 1), (&v, &dv, 2)] {
            for i in 0..m.data.len() {
                let mut plus = m.clone();
                plus.data[i] += h;
                let mut minus = m.clone();
                minus.data[i] -= h;
                let (lp, lm) = match which {
                    0 => (loss(&plus, &k, &v), loss(&minus, &k, &v)),
                    1 => (loss(&q, &plus, &v), loss(&q, &minus, &v)),
                    _ => (loss(&q, &k, &plus), loss(&q, &k, &minus)),
                };
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - dm.data[i]).abs() < 1e-7, "tensor {which} entry {i}: {fd} vs {}", dm.data[i]);
            }
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x = pseudo(3, 5, 9);
        let g = pseudo(3, 5, 10);
        let (y, is) = layer_norm(&x);
        let dx = layer_norm_backward(&y, &is, &g);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            let f = |x: &Mat| layer_norm(x).0.data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
    }
}
