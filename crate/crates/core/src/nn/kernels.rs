//! Forward and backward kernels on flat row-major buffers.
//!
//! Convolutions are lowered to one GEMM per call via im2col. The convention is
//! cross-correlation with zero "same" padding:
//! `out[co, t] = bias[co] + Σ_ci Σ_j w[co, ci, j] · x[ci, t + j - (k-1)/2]`.

/// `c = a · b` with arbitrary strides; `c` is overwritten.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    debug_assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.len
    }
}

fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (l, k, p) = (s.len, s.kernel, s.pad());
    let cols = s.cols();
    let mut col = vec![0.0; s.rows() * cols];
    for ci in 0..s.c_in {
        for j in 0..k {
            let row = &mut col[(ci * k + j) * cols..(ci * k + j + 1) * cols];
            // t + j - p in [0, l)
            let t0 = p.saturating_sub(j);
            let t1 = (l + p).saturating_sub(j).min(l);
            for bi in 0..s.batch {
                let src = &x[(bi * s.c_in + ci) * l..(bi * s.c_in + ci + 1) * l];
                let dst = &mut row[bi * l..(bi + 1) * l];
                if t1 > t0 {
                    dst[t0..t1].copy_from_slice(&src[t0 + j - p..t1 + j - p]);
                }
            }
        }
    }
    col
}

/// Returns the output `(batch, c_out, len)` and the im2col buffer for backward.
pub fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], s: &ConvShape) -> (Vec<f64>, Vec<f64>) {
    let col = im2col(x, s);
    let cols = s.cols();
    let mut mat = vec![0.0; s.c_out * cols];
    gemm(s.c_out, s.rows(), cols, w, s.rows(), 1, &col, cols, 1, &mut mat, cols, 1);
    let l = s.len;
    let mut out = vec![0.0; s.batch * s.c_out * l];
    for co in 0..s.c_out {
        for bi in 0..s.batch {
            let src = &mat[co * cols + bi * l..co * cols + (bi + 1) * l];
            let dst = &mut out[(bi * s.c_out + co) * l..(bi * s.c_out + co + 1) * l];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + bias[co];
            }
        }
    }
    (out, col)
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv1d_backward(dout: &[f64], col: &[f64], w: &[f64], s: &ConvShape, need_dx: bool, need_dw: bool) -> ConvGrads {
    let (l, k, p) = (s.len, s.kernel, s.pad());
    let cols = s.cols();
    let rows = s.rows();
    // (c_out, batch·len) view of dout
    let mut dmat = vec![0.0; s.c_out * cols];
    for bi in 0..s.batch {
        for co in 0..s.c_out {
            dmat[co * cols + bi * l..co * cols + (bi + 1) * l]
                .copy_from_slice(&dout[(bi * s.c_out + co) * l..(bi * s.c_out + co + 1) * l]);
        }
    }
    let (dw, dbias) = if need_dw {
        let mut dw = vec![0.0; s.c_out * rows];
        gemm(s.c_out, cols, rows, &dmat, cols, 1, col, 1, cols, &mut dw, rows, 1);
        let db = (0..s.c_out)
            .map(|co| dmat[co * cols..(co + 1) * cols].iter().sum())
            .collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let dx = if need_dx {
        let mut dcol = vec![0.0; rows * cols];
        gemm(rows, s.c_out, cols, w, 1, rows, &dmat, cols, 1, &mut dcol, cols, 1);
        let mut dx = vec![0.0; s.batch * s.c_in * l];
        for ci in 0..s.c_in {
            for j in 0..k {
                let row = &dcol[(ci * k + j) * cols..(ci * k + j + 1) * cols];
                let t0 = p.saturating_sub(j);
                let t1 = (l + p).saturating_sub(j).min(l);
                for bi in 0..s.batch {
                    let dst = &mut dx[(bi * s.c_in + ci) * l..(bi * s.c_in + ci + 1) * l];
                    let src = &row[bi * l..(bi + 1) * l];
                    for t in t0..t1 {
                        dst[t + j - p] += src[t];
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    ConvGrads { dx, dw, dbias }
}

/// `out = x · Wᵀ + bias` for `x: (batch, f_in)`, `W: (f_out, f_in)`.
pub fn dense_forward(x: &[f64], w: &[f64], bias: &[f64], batch: usize, f_in: usize, f_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * f_out];
    gemm(batch, f_in, f_out, x, f_in, 1, w, 1, f_in, &mut out, f_out, 1);
    for row in out.chunks_exact_mut(f_out) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub struct DenseGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    batch: usize,
    f_in: usize,
    f_out: usize,
    need_dx: bool,
    need_dw: bool,
) -> DenseGrads {
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; batch * f_in];
        gemm(batch, f_out, f_in, dout, f_out, 1, w, f_in, 1, &mut dx, f_in, 1);
        dx
    });
    let (dw, dbias) = if need_dw {
        let mut dw = vec![0.0; f_out * f_in];
        gemm(f_out, batch, f_in, dout, 1, f_out, x, f_in, 1, &mut dw, f_in, 1);
        let mut db = vec![0.0; f_out];
        for row in dout.chunks_exact(f_out) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    DenseGrads { dx, dw, dbias }
}

/// Window max with stride `k` over the last axis; trailing `len % k` samples
/// are dropped. Returns values and the flat input index of each window's
/// first maximum.
pub fn maxpool_forward(x: &[f64], rows: usize, len: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / k;
    let mut out = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let base = r * len;
        for o in 0..out_len {
            let start = base + o * k;
            let mut best = start;
            for i in start + 1..start + k {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &[f64], w: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
        let p = (s.kernel - 1) as isize / 2;
        let mut out = vec![0.0; s.batch * s.c_out * s.len];
        for b in 0..s.batch {
            for co in 0..s.c_out {
                for t in 0..s.len {
                    let mut acc = bias[co];
                    for ci in 0..s.c_in {
                        for j in 0..s.kernel {
                            let src = t as isize + j as isize - p;
                            if src >= 0 && (src as usize) < s.len {
                                acc += w[(co * s.c_in + ci) * s.kernel + j] * x[(b * s.c_in + ci) * s.len + src as usize];
                            }
                        }
                    }
                    out[(b * s.c_out + co) * s.len + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(batch, c_in, c_out, len, kernel) in &[(3, 2, 4, 17, 5), (1, 3, 2, 6, 3), (2, 1, 1, 9, 1)] {
            let s = ConvShape { batch, c_in, c_out, len, kernel };
            let x: Vec<f64> = (0..batch * c_in * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..c_out * c_in * kernel).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (got, _) = conv1d_forward(&x, &w, &b, &s);
            for (g, n) in got.iter().zip(naive_conv(&x, &w, &b, &s)) {
                assert!((g - n).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_unit_kernel_is_identity() {
        let s = ConvShape { batch: 1, c_in: 1, c_out: 1, len: 5, kernel: 1 };
        let x = [1.0, -2.0, 3.0, 0.5, 4.0];
        assert_eq!(conv1d_forward(&x, &[1.0], &[0.0], &s).0, x.to_vec());
    }

    #[test]
    fn conv_impulse_golden() {
        // cross-correlation: out[t] = a·x[t-1] + b·x[t] + c·x[t+1]
        let s = ConvShape { batch: 1, c_in: 1, c_out: 1, len: 10, kernel: 3 };
        let mut x = vec![0.0; 10];
        x[5] = 1.0;
        let (out, _) = conv1d_forward(&x, &[2.0, 3.0, 5.0], &[0.0], &s);
        let mut want = vec![0.0; 10];
        want[4] = 5.0;
        want[5] = 3.0;
        want[6] = 2.0;
        assert_eq!(out, want);
    }

    #[test]
    fn dense_hand_cases() {
        assert_eq!(dense_forward(&[1.0, 2.0], &[1.0, 1.0], &[1.0], 1, 2, 1), vec![4.0]);
        let x = [1.5, -2.0, 0.25];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense_forward(&x, &eye, &[0.0; 3], 1, 3, 3), x.to_vec());
    }

    #[test]
    fn dense_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, fi, fo) = (4, 7, 3);
        let x: Vec<f64> = (0..b * fi).map(|_| rng.random()).collect();
        let w: Vec<f64> = (0..fo * fi).map(|_| rng.random()).collect();
        let bias: Vec<f64> = (0..fo).map(|_| rng.random()).collect();
        let out = dense_forward(&x, &w, &bias, b, fi, fo);
        for r in 0..b {
            for o in 0..fo {
                let mut acc = bias[o];
                for i in 0..fi {
                    acc += x[r * fi + i] * w[o * fi + i];
                }
                assert!((out[r * fo + o] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn maxpool_hand_cases() {
        let (v, a) = maxpool_forward(&[1.0, 3.0, 2.0, 4.0], 1, 4, 2);
        assert_eq!(v, vec![3.0, 4.0]);
        assert_eq!(a, vec![1, 3]);
        let (v, _) = maxpool_forward(&[1.0, 3.0, 2.0], 1, 3, 1);
        assert_eq!(v, vec![1.0, 3.0, 2.0]);
        // remainder dropped; ties go to the first index
        let (v, a) = maxpool_forward(&[2.0, 2.0, 1.0, 7.0, 9.0], 1, 5, 2);
        assert_eq!(v, vec![2.0, 7.0]);
        assert_eq!(a, vec![0, 3]);
    }
}
