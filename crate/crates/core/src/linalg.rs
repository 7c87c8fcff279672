//! Small dense helpers for the K×K and m×K systems that unmixing needs.
//! Matrices are row-major slices.

/// Householder QR least squares: minimizes ||A x - b||₂ for an m×n `a` with
/// m ≥ n and full column rank. Returns `None` when a column is numerically
/// dependent on the previous ones.
pub(crate) fn lstsq(a: &[f64], m: usize, n: usize, b: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m);
    if n == 0 {
        return Some(Vec::new());
    }
    if m < n {
        return None;
    }
    let mut r = a.to_vec();
    let mut qtb = b.to_vec();
    let mut norms = vec![0.0; n];
    for (j, norm) in norms.iter_mut().enumerate() {
        *norm = (0..m).map(|i| a[i * n + j].powi(2)).sum::<f64>().sqrt();
    }
    let mut v = vec![0.0; m];
    for j in 0..n {
        let alpha_norm = (j..m).map(|i| r[i * n + j].powi(2)).sum::<f64>().sqrt();
        if alpha_norm <= 1e-13 * norms[j].max(f64::MIN_POSITIVE) {
            return None;
        }
        let x0 = r[j * n + j];
        let alpha = if x0 > 0.0 { -alpha_norm } else { alpha_norm };
        for i in j..m {
            v[i] = r[i * n + j];
        }
        v[j] -= alpha;
        let vnorm2: f64 = (j..m).map(|i| v[i] * v[i]).sum();
        if vnorm2 > 0.0 {
            for c in j..n {
                let dot: f64 = (j..m).map(|i| v[i] * r[i * n + c]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in j..m {
                    r[i * n + c] -= f * v[i];
                }
            }
            let dot: f64 = (j..m).map(|i| v[i] * qtb[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                qtb[i] -= f * v[i];
            }
        }
    }
    let mut x = vec![0.0; n];
    for j in (0..n).rev() {
        let mut s = qtb[j];
        for c in j + 1..n {
            s -= r[j * n + c] * x[c];
        }
        x[j] = s / r[j * n + j];
    }
    Some(x)
}

/// Eigenvalues of a symmetric n×n matrix by cyclic Jacobi rotations,
/// ascending.
pub(crate) fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Smallest singular value of an m×n matrix (via the Gram matrix).
pub(crate) fn smallest_singular_value(a: &[f64], m: usize, n: usize) -> f64 {
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = (0..m).map(|r| a[r * n + i] * a[r * n + j]).sum();
        }
    }
    symmetric_eigenvalues(&gram, n)
        .first()
        .map(|&e| e.max(0.0).sqrt())
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstsq_solves_overdetermined_consistent_system() {
        // columns [1,1,1] and [0,1,2]; b = 2 + 3t
        let a = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0];
        let b = [2.0, 5.0, 8.0];
        let x = lstsq(&a, 3, 2, &b).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_rejects_dependent_columns() {
        let a = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(lstsq(&a, 3, 2, &[1.0, 2.0, 3.0]).is_none());
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let ev = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_value_of_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.5, 0.0, 0.0];
        assert!((smallest_singular_value(&a, 3, 2) - 0.5).abs() < 1e-12);
    }
}
