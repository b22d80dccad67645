//! Shared numerical primitives: finite-difference weight generation, deterministic
//! summation, small dense linear algebra, and least-squares order fitting.

/// Finite-difference / interpolation weights on arbitrary nodes (Fornberg's algorithm).
///
/// Given nodes `x` and an evaluation point `x0`, returns a table `w` where
/// `w[m][j]` is the weight of `f(x[j])` in the approximation of the m-th
/// derivative at `x0`, for m = 0..=max_order. Exact for polynomials of degree
/// `x.len() - 1`.
pub fn fd_weights(x: &[f64], x0: f64, max_order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    assert!(n > max_order, "need more nodes than derivative order");
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - x0;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Deterministic pairwise (tree) summation. The result depends only on the
/// order of `v`, never on thread count, so reductions are reproducible.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        let mut s = 0.0;
        for &x in v {
            s += x;
        }
        return s;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Dot product with pairwise accumulation (deterministic).
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    fn rec(a: &[f64], b: &[f64]) -> f64 {
        if a.len() <= 8 {
            let mut s = 0.0;
            for i in 0..a.len() {
                s += a[i] * b[i];
            }
            return s;
        }
        let mid = a.len() / 2;
        rec(&a[..mid], &b[..mid]) + rec(&a[mid..], &b[mid..])
    }
    rec(a, b)
}

/// Solve a small dense symmetric system in place (Gauss-Jordan, partial pivot).
/// Intended for n <= 8. Returns None if the pivot collapses.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<()> {
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
        }
        b[col] /= d;
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        a[r * n + k] -= f * a[col * n + k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some(())
}

/// Invert a small dense matrix (row-major). Returns None if singular.
pub fn invert_dense(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
                inv.swap(col * n + k, piv * n + k);
            }
        }
        let d = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        m[r * n + k] -= f * m[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Infinitely differentiable ramp: exactly 0 for `u <= 0`, exactly 1 for
/// `u >= 1`, strictly monotone between. Exact-zero tails let compactly
/// supported test fields stay bitwise zero outside their support.
pub fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let e = |t: f64| (-1.0 / t).exp();
    e(u) / (e(u) + e(1.0 - u))
}

/// Determinant of a small dense matrix (row-major) by partial-pivot LU.
pub fn det_dense(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r * n + col].abs() > m[piv * n + col].abs() {
                piv = r;
            }
        }
        if m[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            det = -det;
        }
        let d = m[col * n + col];
        det *= d;
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    m[r * n + k] -= f * m[col * n + k];
                }
            }
        }
    }
    det
}

/// Check positive definiteness of a small symmetric matrix via LDL^T pivots.
pub fn is_positive_definite(a: &[f64], n: usize) -> bool {
    let mut m = a.to_vec();
    for k in 0..n {
        let d = m[k * n + k];
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        for i in k + 1..n {
            let f = m[i * n + k] / d;
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
        }
    }
    true
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi sweeps, ascending.
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-15 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
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
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

/// Least-squares slope of log|y| against log(x). Returns (slope, max abs fit
/// residual in log10 space). Values below `floor` are clamped so exact zeros
/// do not produce -inf.
pub fn fitted_order(x: &[f64], y: &[f64], floor: f64) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2);
    let lx: Vec<f64> = x.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().max(floor).log10()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..lx.len() {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut max_res: f64 = 0.0;
    for i in 0..lx.len() {
        max_res = max_res.max((ly[i] - (intercept + slope * lx[i])).abs());
    }
    (slope, max_res)
}

/// Convergence order from two (grid spacing, error) pairs: errors at or below
/// `floor` count as converged and report an effectively infinite order.
pub fn refinement_order(h_coarse: f64, e_coarse: f64, h_fine: f64, e_fine: f64, floor: f64) -> f64 {
    if e_coarse.abs() <= floor && e_fine.abs() <= floor {
        return f64::INFINITY;
    }
    (e_coarse.abs().max(floor) / e_fine.abs().max(floor)).ln() / (h_coarse / h_fine).ln()
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual_inf: f64,
    pub converged: bool,
}

/// Preconditioned conjugate gradients on a matrix-free SPD operator.
///
/// `apply(x, y)` writes `A x` into `y`; `precond` is a diagonal preconditioner
/// (entries of 1/diag(A) or similar). Convergence is declared on the
/// infinity norm of the true residual `b - A x`.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    precond: &[f64],
    tol_inf: f64,
    max_iter: usize,
) -> CgOutcome
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    for i in 0..n {
        z[i] = precond[i] * r[i];
    }
    p.copy_from_slice(&z);
    let mut rz = pairwise_dot(&r, &z);
    let mut res_inf = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if res_inf <= tol_inf {
        return CgOutcome { iterations: 0, residual_inf: res_inf, converged: true };
    }
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = pairwise_dot(&p, &ap);
        if !(pap > 0.0) {
            return CgOutcome { iterations: it, residual_inf: res_inf, converged: false };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if it % 8 == 0 {
            // Periodically recompute the true residual to stop drift.
            apply(x, &mut ap);
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
        }
        res_inf = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if res_inf <= tol_inf {
            return CgOutcome { iterations: it, residual_inf: res_inf, converged: true };
        }
        for i in 0..n {
            z[i] = precond[i] * r[i];
        }
        let rz_new = pairwise_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    CgOutcome { iterations: max_iter, residual_inf: res_inf, converged: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fornberg_reproduces_centered_first_derivative() {
        let x = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let w = fd_weights(&x, 0.0, 1);
        let expect = [-1.0 / 60.0, 9.0 / 60.0, -45.0 / 60.0, 0.0, 45.0 / 60.0, -9.0 / 60.0, 1.0 / 60.0];
        for (a, b) in w[1].iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn fornberg_second_derivative_exact_on_polynomial() {
        let x: Vec<f64> = (0..8).map(|i| 0.3 + 0.1 * i as f64).collect();
        let w = fd_weights(&x, 0.55, 2);
        // f(t) = t^5: f''(0.55) = 20 * 0.55^3
        let d2: f64 = x.iter().zip(w[2].iter()).map(|(t, c)| c * t.powi(5)).sum();
        assert!((d2 - 20.0 * 0.55f64.powi(3)).abs() < 1e-9);
    }

    #[test]
    fn pairwise_sum_matches_sequential() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let s1 = pairwise_sum(&v);
        let s2: f64 = v.iter().sum();
        assert!((s1 - s2).abs() < 1e-9);
    }

    #[test]
    fn dense_inverse_roundtrip() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = invert_dense(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * inv[k * 3 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_eigenvalues_of_diagonal_matrix() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let e = sym_eigenvalues(&a, 3);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 2.0).abs() < 1e-12);
        assert!((e[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn order_fit_recovers_cubic() {
        let x = [0.1, 0.0316227766, 0.01];
        let y: Vec<f64> = x.iter().map(|s: &f64| 2.0 * s.powi(3)).collect();
        let (slope, res) = fitted_order(&x, &y, 1e-300);
        assert!((slope - 3.0).abs() < 1e-10);
        assert!(res < 1e-10);
    }

    #[test]
    fn cg_solves_small_spd_system() {
        // 1-D Laplacian, 50 unknowns.
        let n = 50;
        let apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                y[i] = 2.0 * x[i] - l - r;
            }
        };
        let b = vec![1.0; n];
        let mut x = vec![0.0; n];
        let pre = vec![0.5; n];
        let out = conjugate_gradient(apply, &b, &mut x, &pre, 1e-12, 10_000);
        assert!(out.converged, "residual {}", out.residual_inf);
        let mut ax = vec![0.0; n];
        apply(&x, &mut ax);
        for i in 0..n {
            assert!((ax[i] - 1.0).abs() < 1e-10);
        }
    }
}
