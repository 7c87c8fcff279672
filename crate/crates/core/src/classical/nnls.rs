//! Lawson–Hanson active-set nonnegative least squares.

use crate::error::{Error, Result};
use crate::linalg::lstsq;
use crate::spectral::{AbundanceVector, EndmemberLibrary, Spectrum};

/// Relative KKT tolerance, scaled by `||Aᵀy||∞ + 1`.
pub const KKT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub z: Vec<f64>,
    /// ||A z - y||₂
    pub residual: f64,
    pub iterations: usize,
}

fn gradient(a: &[f64], m: usize, k: usize, y: &[f64], z: &[f64]) -> Vec<f64> {
    // w = Aᵀ(y - A z)
    let mut r = y.to_vec();
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        r[i] -= row.iter().zip(z).map(|(x, zj)| x * zj).sum::<f64>();
    }
    (0..k).map(|j| (0..m).map(|i| a[i * k + j] * r[i]).sum()).collect()
}

fn residual_norm(a: &[f64], m: usize, k: usize, y: &[f64], z: &[f64]) -> f64 {
    (0..m)
        .map(|i| {
            let row = &a[i * k..(i + 1) * k];
            let v: f64 = row.iter().zip(z).map(|(x, zj)| x * zj).sum();
            (v - y[i]).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// `||Aᵀy||∞ + 1`, the scale the KKT tolerance is measured against.
pub fn kkt_scale(a: &[f64], m: usize, k: usize, y: &[f64]) -> f64 {
    (0..k)
        .map(|j| (0..m).map(|i| a[i * k + j] * y[i]).sum::<f64>().abs())
        .fold(0.0, f64::max)
        + 1.0
}

/// Largest KKT violation at `z`, in units of [`kkt_scale`]. A value ≤
/// [`KKT_TOLERANCE`] certifies optimality.
pub fn kkt_violation(a: &[f64], m: usize, k: usize, y: &[f64], z: &[f64]) -> f64 {
    let scale = kkt_scale(a, m, k, y);
    // gradient of ½||Az - y||² is -w
    let w = gradient(a, m, k, y, z);
    let mut worst: f64 = 0.0;
    for j in 0..k {
        let g = -w[j];
        let v = if z[j] > 0.0 { g.abs() } else { (-g).max(0.0) };
        worst = worst.max(v);
        if z[j] < 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst / scale
}

/// Solves `min ||A z - y||₂ s.t. z ≥ 0` for a row-major m×k matrix.
pub fn solve_nnls(a: &[f64], m: usize, k: usize, y: &[f64]) -> Result<NnlsSolution> {
    if a.len() != m * k {
        return Err(Error::dim("nnls matrix", m * k, a.len()));
    }
    if y.len() != m {
        return Err(Error::dim("nnls target", m, y.len()));
    }
    if y.iter().chain(a).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "nnls" });
    }
    let tol = 1e-11 * kkt_scale(a, m, k, y);
    let max_iter = 3 * k;
    let mut z = vec![0.0; k];
    let mut passive = vec![false; k];
    let mut w = gradient(a, m, k, y, &z);
    let mut iterations = 0;

    let solve_passive = |passive: &[bool]| -> Option<Vec<f64>> {
        let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
        let p = idx.len();
        let mut sub = vec![0.0; m * p];
        for i in 0..m {
            for (c, &j) in idx.iter().enumerate() {
                sub[i * p + c] = a[i * k + j];
            }
        }
        let sol = lstsq(&sub, m, p, y)?;
        let mut s = vec![0.0; k];
        for (c, &j) in idx.iter().enumerate() {
            s[j] = sol[c];
        }
        Some(s)
    };

    loop {
        let candidate = (0..k)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)));
        let Some(t) = candidate else { break };
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::Solver {
                op: "nnls",
                reason: format!("active set did not converge in {max_iter} iterations"),
            });
        }
        passive[t] = true;
        loop {
            let s = solve_passive(&passive).ok_or_else(|| Error::Solver {
                op: "nnls",
                reason: "rank-deficient passive set".into(),
            })?;
            if (0..k).filter(|&j| passive[j]).all(|j| s[j] > 0.0) {
                z = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for j in (0..k).filter(|&j| passive[j] && s[j] <= 0.0) {
                alpha = alpha.min(z[j] / (z[j] - s[j]));
            }
            for j in 0..k {
                z[j] += alpha * (s[j] - z[j]);
            }
            for j in 0..k {
                if passive[j] && z[j] <= 1e-15 * (1.0 + z.iter().cloned().fold(0.0, f64::max)) {
                    passive[j] = false;
                    z[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
        w = gradient(a, m, k, y, &z);
    }
    for v in z.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let residual = residual_norm(a, m, k, y, &z);
    Ok(NnlsSolution { z, residual, iterations })
}

/// NNLS unmixing of `y` against the library columns.
pub fn nnls(lib: &EndmemberLibrary, y: &Spectrum) -> Result<AbundanceVector> {
    Ok(nnls_detailed(lib, y)?.0)
}

pub fn nnls_detailed(lib: &EndmemberLibrary, y: &Spectrum) -> Result<(AbundanceVector, NnlsSolution)> {
    if !y.grid().same_as(lib.grid()) {
        return Err(Error::dim("nnls grid", lib.m(), y.len()));
    }
    let sol = solve_nnls(lib.matrix(), lib.m(), lib.k(), y.values())?;
    Ok((AbundanceVector::new(sol.z.clone())?, sol))
}
