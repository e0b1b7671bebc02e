//! Dense kernels over row-major `f64` buffers.

/// Strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    /// Columns `start..start + n`.
    pub fn cols(self, start: usize, n: usize) -> Self {
        assert!(start + n <= self.cols);
        Mat {
            off: self.off + start * self.cs,
            cols: n,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len());
        }
    }
}

pub(crate) struct MatMut<'a> {
    data: &'a mut [f64],
    off: usize,
    rows: usize,
    cols: usize,
    rs: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        MatMut {
            data,
            off: 0,
            rows,
            cols,
            rs: cols,
        }
    }

    pub fn cols(self, start: usize, n: usize) -> Self {
        assert!(start + n <= self.cols);
        MatMut {
            off: self.off + start,
            cols: n,
            ..self
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: Mat, b: Mat, beta: f64, c: MatMut) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(a.rows, c.rows);
    assert_eq!(b.cols, c.cols);
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        assert!(c.off + (c.rows - 1) * c.rs + c.cols - 1 < c.data.len());
    }
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    // SAFETY: the checks above bound every index each view can touch, and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            1,
        );
    }
}

/// `out[r, :] = x[r, :] @ w + bias`.
pub(crate) fn linear(x: &[f64], rows: usize, w: &[f64], bias: &[f64], out: &mut [f64]) {
    let n_in = w.len() / bias.len();
    let n_out = bias.len();
    for r in 0..rows {
        out[r * n_out..(r + 1) * n_out].copy_from_slice(bias);
    }
    gemm(
        1.0,
        Mat::new(x, rows, n_in),
        Mat::new(w, n_in, n_out),
        1.0,
        MatMut::new(out, rows, n_out),
    );
}

/// Backward of [`linear`]: accumulates `dw += x^T dy`, `db += colsum(dy)`
/// and, if given, writes (or adds to) `dx = dy w^T`.
pub(crate) fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<(&mut [f64], bool)>,
) {
    let n_out = db.len();
    let n_in = w.len() / n_out;
    gemm(
        1.0,
        Mat::new(x, rows, n_in).t(),
        Mat::new(dy, rows, n_out),
        1.0,
        MatMut::new(dw, n_in, n_out),
    );
    for r in 0..rows {
        for (b, g) in db.iter_mut().zip(&dy[r * n_out..(r + 1) * n_out]) {
            *b += g;
        }
    }
    if let Some((dx, accumulate)) = dx {
        gemm(
            1.0,
            Mat::new(dy, rows, n_out),
            Mat::new(w, n_in, n_out).t(),
            if accumulate { 1.0 } else { 0.0 },
            MatMut::new(dx, rows, n_in),
        );
    }
}

pub(crate) const LN_EPS: f64 = 1e-12;

/// Per-row layer norm cache.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], width: usize, gamma: &[f64], beta: &[f64]) -> NormCache {
    let rows = x.len() / width;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..width {
            let xh = (row[c] - mean) * is;
            xhat[r * width + c] = xh;
            out[r * width + c] = xh * gamma[c] + beta[c];
        }
    }
    NormCache { xhat, inv_std, out }
}

/// Returns `dx`; accumulates gamma/beta gradients.
pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    width: usize,
    gamma: &[f64],
    dy: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let rows = cache.inv_std.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; width];
    for r in 0..rows {
        let base = r * width;
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for c in 0..width {
            let g = dy[base + c];
            let xh = cache.xhat[base + c];
            dgamma[c] += g * xh;
            dbeta[c] += g;
            dxhat[c] = g * gamma[c];
            sum += dxhat[c];
            sum_xh += dxhat[c] * xh;
        }
        let n = width as f64;
        let is = cache.inv_std[r];
        for c in 0..width {
            dx[base + c] = is / n * (n * dxhat[c] - sum - cache.xhat[base + c] * sum_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place softmax over `row` restricted to `allowed` entries; the rest
/// become exactly zero.
pub(crate) fn masked_softmax(row: &mut [f64], allowed: &[bool]) {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, &a) in row.iter_mut().zip(allowed) {
        *v = if a { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable log-softmax; returns `(log_probs, argmax)` with ties
/// going to the lowest index.
pub(crate) fn log_softmax(logits: &[f64]) -> (Vec<f64>, usize) {
    let mut argmax = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[argmax] {
            argmax = i;
        }
    }
    let max = logits[argmax];
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    (logits.iter().map(|v| v - lse).collect(), argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transpose_and_columns() {
        // a: 2x3, b: 2x3 -> a @ b^T : 2x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [0.0; 4];
        gemm(
            1.0,
            Mat::new(&a, 2, 3),
            Mat::new(&b, 2, 3).t(),
            0.0,
            MatMut::new(&mut c, 2, 2),
        );
        assert_eq!(c, [4.0, 2.0, 10.0, 5.0]);
        // columns 1..3 of a (2x2) @ identity into columns 0..2 of a 2x3 output
        let id = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0; 6];
        gemm(
            1.0,
            Mat::new(&a, 2, 3).cols(1, 2),
            Mat::new(&id, 2, 2),
            0.0,
            MatMut::new(&mut out, 2, 3).cols(1, 2),
        );
        assert_eq!(out, [0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = [1.0, 3.0, -2.0, 100.0];
        masked_softmax(&mut row, &[true, true, true, false]);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn log_softmax_uniform() {
        let (lp, am) = log_softmax(&[0.5; 4]);
        assert_eq!(am, 0);
        assert!((lp[2] + 4f64.ln()).abs() < 1e-12);
    }
}
