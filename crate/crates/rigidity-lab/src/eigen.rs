//! First nonzero Neumann eigenvalue of geodesic caps in the unit n-sphere,
//! computed from the radial profile of the lowest angular mode.
//!
//! The eigenvalue mu(delta) of the cap of radius delta is characterized by a
//! profile J on [0, delta] solving
//!
//! ```text
//! {(sin t)^{n-1} J'}' + [mu - (n-1)(sin t)^{-2}] (sin t)^{n-1} J = 0,
//! J(0) = 0,   J'(delta) = 0,   J' != 0 on [0, delta).
//! ```
//!
//! [`neumann_mu`] shoots for that profile: a series start at a small offset
//! selects the regular branch (the indicial exponents at the singular end
//! are 1 and -(n-1)), an embedded Runge-Kutta pair integrates the flux-form
//! system, and bisection on J'(delta) pins the smallest admissible mu. An
//! independent tridiagonal discretization ([`oracle`]) cross-checks the shot
//! values. [`verify_monotone`] and [`verify_bounds`] test the qualitative
//! facts the rigidity chain consumes: mu decreases strictly in delta and
//! stays above two explicit positive bounds. [`epsilon_margin`] returns the
//! coercivity coefficient available once mu clears n - 2/(n+1).

use crate::{Error, Result};
use rayon::prelude::*;
use std::f64::consts::FRAC_PI_2;

/// Default shooting start offset.
const DEFAULT_T0: f64 = 1e-6;
/// Converged solutions must satisfy |J'(delta)| below this.
const RESIDUAL_LIMIT: f64 = 1e-10;
/// Accepted-step budget per integration; typical solves use a few hundred.
const MAX_STEPS: usize = 200_000;

/// One sample of the radial profile.
#[derive(Debug, Clone, Copy)]
pub struct ProfileSample {
    pub t: f64,
    pub j: f64,
    pub j_prime: f64,
}

/// Converged eigenvalue with its profile and shooting diagnostics.
#[derive(Debug, Clone)]
pub struct CapEigenResult {
    /// First Neumann eigenvalue of the cap.
    pub mu: f64,
    /// Profile samples at the accepted integration steps, from the start
    /// offset through delta.
    pub profile: Vec<ProfileSample>,
    /// Smallest J' over samples strictly before delta; positive for the
    /// first eigenvalue.
    pub min_j_prime: f64,
    /// |J'(delta)| at the converged eigenvalue.
    pub residual: f64,
    /// Flux-to-value ratio (sin delta)^{n-1} J'(delta) / J(delta); vanishes
    /// with the residual.
    pub f_delta: f64,
    /// Final bisection bracket around mu.
    pub bracket: (f64, f64),
    /// Number of ODE integrations spent in the scan and the bisection.
    pub evaluations: usize,
}

/// Shooting problem for the first Neumann eigenvalue of a geodesic cap.
#[derive(Debug, Clone)]
pub struct CapEigenProblem {
    /// Ambient dimension n >= 2.
    pub dim: usize,
    /// Cap radius in (0, pi/2]. The characterization is not validated past
    /// the quarter arc, so larger radii are refused.
    pub delta: f64,
    /// Shooting start offset in [1e-8, 1e-4]; the series start here selects
    /// the regular branch of the singular equation.
    pub start_offset: f64,
    /// Relative tolerance of the adaptive integrator.
    pub rel_tol: f64,
    /// Absolute tolerance of the adaptive integrator.
    pub abs_tol: f64,
    /// Scan step used to bracket the first sign change of J'(delta).
    pub scan_step: f64,
    /// Initial upper end of the scan range. Extended geometrically up to a
    /// hard cap when the sign change lies above it, so a successful scan
    /// brackets exactly the first crossing.
    pub scan_limit: f64,
    /// Bracket width at which bisection on mu is declared converged.
    pub bisect_tol: f64,
}

/// Outcome of one integration at a trial eigenvalue.
struct Shot {
    u_end: f64,
    v_end: f64,
    jp_end: f64,
    /// Sign changes of the flux before delta; zero below the first
    /// eigenvalue, one just above it.
    flips: usize,
    profile: Vec<ProfileSample>,
}

impl CapEigenProblem {
    /// Problem with default solver settings: offset 1e-6, integrator
    /// tolerances 1e-12 relative / 1e-14 absolute, scan step 0.1 over
    /// (0, 4n], bisection to 1e-12.
    pub fn new(dim: usize, delta: f64) -> Result<Self> {
        let problem = CapEigenProblem {
            dim,
            delta,
            start_offset: DEFAULT_T0,
            rel_tol: 1e-12,
            abs_tol: 1e-14,
            scan_step: 0.1,
            scan_limit: 4.0 * dim as f64,
            bisect_tol: 1e-12,
        };
        problem.validate()?;
        Ok(problem)
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Precondition(format!(
                "cap eigenproblem needs dimension >= 2, got {}",
                self.dim
            )));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Precondition(format!(
                "cap radius must be positive, got {}",
                self.delta
            )));
        }
        if self.delta > FRAC_PI_2 {
            return Err(Error::Range {
                what: "cap radius".into(),
                value: self.delta,
                limit: FRAC_PI_2,
            });
        }
        if !(self.start_offset >= 1e-8 && self.start_offset <= 1e-4) {
            return Err(Error::Precondition(format!(
                "shooting offset must lie in [1e-8, 1e-4], got {:e}",
                self.start_offset
            )));
        }
        if self.delta < 1e3 * self.start_offset {
            return Err(Error::Precondition(format!(
                "cap radius {} is too small against the shooting offset {:e}",
                self.delta, self.start_offset
            )));
        }
        if !(self.rel_tol > 0.0
            && self.abs_tol > 0.0
            && self.scan_step > 0.0
            && self.scan_limit > 0.0
            && self.bisect_tol > 0.0)
        {
            return Err(Error::Precondition(
                "solver tolerances and scan controls must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Solve for the first eigenvalue: bracket the first sign change of
    /// J'(delta) by scanning, bisect to `bisect_tol`, then integrate once
    /// more to record the profile and check it never turns before delta.
    pub fn solve(&self) -> Result<CapEigenResult> {
        self.validate()?;
        let (mut lo, mut hi, mut evaluations) = self.bracket()?;
        while hi - lo > self.bisect_tol {
            let mid = 0.5 * (lo + hi);
            let shot = self.integrate(mid, false)?;
            evaluations += 1;
            if shot.jp_end > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mu = 0.5 * (lo + hi);
        let fin = self.integrate(mu, true)?;
        evaluations += 1;

        let residual = fin.jp_end.abs();
        if residual > RESIDUAL_LIMIT {
            return Err(Error::Numerical(format!(
                "shooting residual |J'(delta)| = {residual:e} exceeds {RESIDUAL_LIMIT:e}"
            )));
        }
        let min_j_prime = fin
            .profile
            .iter()
            .filter(|s| s.t < self.delta)
            .map(|s| s.j_prime)
            .fold(f64::INFINITY, f64::min);
        if !(fin.profile[0].j > 0.0) || !(min_j_prime > 0.0) {
            return Err(Error::Numerical(
                "converged profile turns before the cap radius, so the value is not the first eigenvalue"
                    .into(),
            ));
        }
        Ok(CapEigenResult {
            mu,
            min_j_prime,
            residual,
            f_delta: fin.v_end / fin.u_end,
            bracket: (lo, hi),
            evaluations,
            profile: fin.profile,
        })
    }

    /// Scan upward in mu until J'(delta) first changes sign. The flux stays
    /// positive below the first eigenvalue, so the scan starts near zero; if
    /// the crossing lies above the current limit the limit doubles (the
    /// eigenvalue grows like n / sin^2(delta) for small caps). A candidate
    /// whose flux flipped more than once inside one scan step could bracket
    /// a higher eigenvalue, so it is rejected and the step refined.
    fn bracket(&self) -> Result<(f64, f64, usize)> {
        let hard_limit = 64.0 * self.dim as f64;
        let mut evaluations = 0usize;
        let mut step = self.scan_step;
        let mut limit = self.scan_limit.min(hard_limit);
        let mut mu = 0.5 * step;

        let first = self.integrate(mu, false)?;
        evaluations += 1;
        if first.jp_end <= 0.0 {
            return Err(Error::Numerical(format!(
                "scan start mu = {mu} already sits past a sign change of J'(delta)"
            )));
        }
        loop {
            let next = mu + step;
            if next > limit {
                if limit >= hard_limit {
                    return Err(Error::Numerical(format!(
                        "no sign change of J'(delta) for mu in (0, {limit}]"
                    )));
                }
                limit = (2.0 * limit).min(hard_limit);
                continue;
            }
            let shot = self.integrate(next, false)?;
            evaluations += 1;
            if shot.jp_end <= 0.0 {
                if shot.flips <= 1 {
                    return Ok((mu, next, evaluations));
                }
                if step <= self.scan_step * 1e-3 {
                    return Err(Error::Numerical(
                        "scan cannot isolate the first sign change of J'(delta)".into(),
                    ));
                }
                step /= 10.0;
                limit = next;
                continue;
            }
            mu = next;
        }
    }

    /// Integrate the profile at a trial mu in the flux variables
    /// (u, v) = (J, (sin t)^{n-1} J'). For n >= 3 both right-hand sides are
    /// regular away from t = 0 with no cancellation between the potential
    /// terms, which the second-order form does not offer near the start.
    fn integrate(&self, mu: f64, record: bool) -> Result<Shot> {
        let n = self.dim as i32;
        let nf = self.dim as f64;
        let delta = self.delta;
        let t0 = self.start_offset;
        let rhs = |t: f64, y: [f64; 2]| -> [f64; 2] {
            let s = t.sin();
            [
                y[1] / s.powi(n - 1),
                -(mu * s.powi(n - 1) - (nf - 1.0) * s.powi(n - 3)) * y[0],
            ]
        };

        // Series start J = t (1 + c2 t^2) + O(t^5); at offsets <= 1e-4 the
        // omitted tail sits below the integrator tolerance. At mu = n the
        // coefficient reduces to -1/6, the sine series.
        let c2 = (2.0 * (nf - 1.0) / 3.0 - mu) / (2.0 * nf + 4.0);
        let mut t = t0;
        let mut y = [
            t0 * (1.0 + c2 * t0 * t0),
            t0.sin().powi(n - 1) * (1.0 + 3.0 * c2 * t0 * t0),
        ];
        let mut h = t0;
        let mut flips = 0usize;
        let mut v_sign = 1.0f64;
        let mut profile = Vec::new();
        if record {
            profile.push(ProfileSample {
                t,
                j: y[0],
                j_prime: y[1] / t.sin().powi(n - 1),
            });
        }

        let mut steps = 0usize;
        while t < delta {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::Numerical(format!(
                    "step budget exhausted integrating the cap profile at mu = {mu}"
                )));
            }
            let remaining = delta - t;
            let snap = h >= remaining;
            let h_try = if snap { remaining } else { h };
            let (y_new, err_vec) = dp5_step(&rhs, t, y, h_try);
            let mut err = 0.0;
            for c in 0..2 {
                let scale = self.abs_tol + self.rel_tol * y[c].abs().max(y_new[c].abs());
                let r = err_vec[c] / scale;
                err += r * r;
            }
            let err = (0.5 * err).sqrt();
            if err <= 1.0 {
                t = if snap { delta } else { t + h_try };
                y = y_new;
                if record {
                    profile.push(ProfileSample {
                        t,
                        j: y[0],
                        j_prime: y[1] / t.sin().powi(n - 1),
                    });
                }
                if t < delta && y[1] != 0.0 && y[1].signum() != v_sign {
                    flips += 1;
                    v_sign = y[1].signum();
                }
            }
            let factor = if err > 0.0 { 0.9 * err.powf(-0.2) } else { 5.0 };
            h = h_try * factor.clamp(0.2, 5.0);
            if h < 1e-13 * delta {
                return Err(Error::Numerical(format!(
                    "step size underflow integrating the cap profile at mu = {mu}"
                )));
            }
        }
        Ok(Shot {
            u_end: y[0],
            v_end: y[1],
            jp_end: y[1] / delta.sin().powi(n - 1),
            flips,
            profile,
        })
    }
}

/// First Neumann eigenvalue of the radius-`delta` cap in the unit
/// `dim`-sphere, with default solver settings.
pub fn neumann_mu(dim: usize, delta: f64) -> Result<CapEigenResult> {
    CapEigenProblem::new(dim, delta)?.solve()
}

/// One Dormand-Prince 5(4) step; returns the fifth-order solution and the
/// embedded error estimate.
fn dp5_step<F: Fn(f64, [f64; 2]) -> [f64; 2]>(
    f: &F,
    t: f64,
    y: [f64; 2],
    h: f64,
) -> ([f64; 2], [f64; 2]) {
    const A2: [f64; 1] = [1.0 / 5.0];
    const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
    const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
    const A5: [f64; 4] = [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ];
    const A6: [f64; 5] = [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ];
    const B: [f64; 6] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let at = |ks: &[[f64; 2]], cs: &[f64]| {
        let mut out = y;
        for (k, c) in ks.iter().zip(cs) {
            out[0] += h * c * k[0];
            out[1] += h * c * k[1];
        }
        out
    };
    let k1 = f(t, y);
    let k2 = f(t + h / 5.0, at(&[k1], &A2));
    let k3 = f(t + 3.0 * h / 10.0, at(&[k1, k2], &A3));
    let k4 = f(t + 4.0 * h / 5.0, at(&[k1, k2, k3], &A4));
    let k5 = f(t + 8.0 * h / 9.0, at(&[k1, k2, k3, k4], &A5));
    let k6 = f(t + h, at(&[k1, k2, k3, k4, k5], &A6));
    let y5 = at(&[k1, k2, k3, k4, k5, k6], &B);
    let k7 = f(t + h, y5);

    let ks = [k1, k2, k3, k4, k5, k6, k7];
    let mut err = [0.0f64; 2];
    for (k, e) in ks.iter().zip(&E) {
        err[0] += h * e * k[0];
        err[1] += h * e * k[1];
    }
    (y5, err)
}

/// Eigenvalues along an increasing sweep of cap radii, with the strict
/// decreases checked pairwise.
#[derive(Debug, Clone)]
pub struct MonotoneReport {
    pub dim: usize,
    pub deltas: Vec<f64>,
    pub mus: Vec<f64>,
    /// Indices k with mu(deltas[k + 1]) >= mu(deltas[k]).
    pub violations: Vec<usize>,
}

impl MonotoneReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check that mu(delta) decreases strictly along `deltas` (which must
/// increase strictly within (0, pi/2]). Singleton and empty sweeps pass
/// vacuously. Solves run in parallel; violations are listed by index.
pub fn verify_monotone(dim: usize, deltas: &[f64]) -> Result<MonotoneReport> {
    for w in deltas.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Precondition(format!(
                "cap radii must increase strictly, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let mus = deltas
        .par_iter()
        .map(|&d| neumann_mu(dim, d).map(|r| r.mu))
        .collect::<Result<Vec<_>>>()?;
    let violations = (0..mus.len().saturating_sub(1))
        .filter(|&k| mus[k + 1] >= mus[k])
        .collect();
    Ok(MonotoneReport {
        dim,
        deltas: deltas.to_vec(),
        mus,
        violations,
    })
}

/// Computed eigenvalue against its two closed-form lower bounds.
#[derive(Debug, Clone)]
pub struct BoundsReport {
    pub dim: usize,
    pub delta: f64,
    pub mu: f64,
    /// n + (sin delta)^{n-2} cos delta / int_0^delta (sin t)^{n-1} dt.
    pub bound1: f64,
    /// n / sin^2(delta), the weaker bound.
    pub bound2: f64,
    /// mu - bound1.
    pub margin1: f64,
    /// bound1 - bound2.
    pub margin2: f64,
}

impl BoundsReport {
    pub fn holds(&self) -> bool {
        self.margin1 > 0.0 && self.margin2 > 0.0
    }
}

/// Evaluate both lower bounds for mu(delta) and report the margins of the
/// chain mu > bound1 > bound2. Both bounds collapse to n at the quarter arc,
/// so delta must sit strictly below pi/2.
pub fn verify_bounds(dim: usize, delta: f64) -> Result<BoundsReport> {
    if !(delta < FRAC_PI_2) {
        return Err(Error::Range {
            what: "cap radius for bound comparison".into(),
            value: delta,
            limit: FRAC_PI_2,
        });
    }
    let result = neumann_mu(dim, delta)?;
    let n = dim as i32;
    let nf = dim as f64;
    let integral = simpson(|t| t.sin().powi(n - 1), 0.0, delta, 4096);
    let bound1 = nf + delta.sin().powi(n - 2) * delta.cos() / integral;
    let bound2 = nf / (delta.sin() * delta.sin());
    Ok(BoundsReport {
        dim,
        delta,
        mu: result.mu,
        bound1,
        bound2,
        margin1: result.mu - bound1,
        margin2: bound1 - bound2,
    })
}

/// Largest coefficient eps in [0, 1] keeping the trace-coercivity bracket
///
/// ```text
/// -(n+1) + (2 - eps)/n + (1 - eps) mu / n + mu
/// ```
///
/// nonnegative. The bracket is linear and decreasing in eps, so equality
/// gives eps* = [(n+1)(mu - n) + 2] / (1 + mu), clamped to 1; the bracket
/// then stays nonnegative for every eps <= eps*. Requires mu >= n - 2/(n+1)
/// (eps* = 0 exactly at the threshold).
pub fn epsilon_margin(dim: usize, mu: f64) -> Result<f64> {
    if dim < 2 {
        return Err(Error::Precondition(format!(
            "coercivity margin needs dimension >= 2, got {dim}"
        )));
    }
    let nf = dim as f64;
    let raw = ((nf + 1.0) * (mu - nf) + 2.0) / (1.0 + mu);
    if raw < -1e-12 {
        return Err(Error::Precondition(format!(
            "spectral hypothesis mu >= n - 2/(n+1) fails: mu = {mu}, threshold = {}",
            nf - 2.0 / (nf + 1.0)
        )));
    }
    Ok(raw.clamp(0.0, 1.0))
}

/// Composite Simpson rule over `intervals` panels (must be even).
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    debug_assert!(intervals >= 2 && intervals % 2 == 0);
    let h = (b - a) / intervals as f64;
    let mut terms = Vec::with_capacity(intervals + 1);
    for k in 0..=intervals {
        let w = if k == 0 || k == intervals {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        terms.push(w * f(a + k as f64 * h));
    }
    crate::util::pairwise_sum(&terms) * h / 3.0
}

/// Matrix cross-check for the shooting solver: a flux-form tridiagonal
/// discretization of the same singular problem on a cell-centered grid.
///
/// The left end is closed by the zero flux that the vanishing coefficient
/// (sin 0)^{n-1} supplies, which is what excludes the singular branch; the
/// right end mirrors the last cell to enforce J'(delta) = 0. Eigenvalues
/// converge at second order in the cell width, so one Richardson step over
/// a doubled grid removes the leading error.
pub mod oracle {
    use super::FRAC_PI_2;
    use crate::{Error, Result};

    /// Smallest eigenvalue of the generalized problem A J = mu W J scaled
    /// symmetric, located by Sturm bisection.
    pub fn tridiagonal_mu(dim: usize, delta: f64, cells: usize) -> Result<f64> {
        if dim < 2 {
            return Err(Error::Precondition(format!(
                "matrix oracle needs dimension >= 2, got {dim}"
            )));
        }
        if !(delta > 0.0 && delta <= FRAC_PI_2) {
            return Err(Error::Range {
                what: "cap radius".into(),
                value: delta,
                limit: FRAC_PI_2,
            });
        }
        if cells < 8 {
            return Err(Error::Precondition(format!(
                "matrix oracle needs at least 8 cells, got {cells}"
            )));
        }
        let n = dim as i32;
        let nf = dim as f64;
        let h = delta / cells as f64;
        let p = |t: f64| t.sin().powi(n - 1);
        let q = |t: f64| (nf - 1.0) * t.sin().powi(n - 3);

        // C = W^{-1/2} A W^{-1/2} stays symmetric tridiagonal because the
        // weight W is diagonal.
        let mut diag = vec![0.0; cells];
        let mut off = vec![0.0; cells - 1];
        for i in 0..cells {
            let t = (i as f64 + 0.5) * h;
            let left = if i == 0 { 0.0 } else { p(i as f64 * h) };
            let right = if i + 1 == cells { 0.0 } else { p((i + 1) as f64 * h) };
            diag[i] = ((left + right) / (h * h) + q(t)) / p(t);
        }
        for i in 0..cells - 1 {
            let w_l = p((i as f64 + 0.5) * h);
            let w_r = p((i as f64 + 1.5) * h);
            off[i] = -p((i + 1) as f64 * h) / (h * h) / (w_l * w_r).sqrt();
        }

        let mut hi = diag
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let mut radius = a;
                if i > 0 {
                    radius += off[i - 1].abs();
                }
                if i + 1 < cells {
                    radius += off[i].abs();
                }
                radius
            })
            .fold(1.0f64, f64::max);
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if count_below(&diag, &off, mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-13 * mid.abs().max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Richardson-extrapolated oracle value from 1600 and 3200 cells.
    pub fn mu(dim: usize, delta: f64) -> Result<f64> {
        let coarse = tridiagonal_mu(dim, delta, 1600)?;
        let fine = tridiagonal_mu(dim, delta, 3200)?;
        Ok(fine + (fine - coarse) / 3.0)
    }

    /// Eigenvalues of the shifted matrix below x, from the sign count of the
    /// LDL^T pivots.
    fn count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
        let mut count = 0;
        let mut d = 1.0f64;
        for i in 0..diag.len() {
            let carried = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] / d };
            d = diag[i] - x - carried;
            if d == 0.0 {
                d = -1e-300;
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, FRAC_PI_6, PI};

    #[test]
    fn hemisphere_eigenvalue_is_dimension_with_sine_profile() {
        for dim in [3usize, 4, 5] {
            let result = neumann_mu(dim, FRAC_PI_2).unwrap();
            assert!(
                (result.mu - dim as f64).abs() <= 1e-8,
                "dim {dim}: mu = {}",
                result.mu
            );
            assert!(result.residual <= 1e-10);
            assert!(result.min_j_prime > 0.0);
            assert!(result.f_delta.abs() <= 1e-9);

            let amp = result.profile.last().unwrap().j / FRAC_PI_2.sin();
            for s in &result.profile {
                assert!(
                    (s.j / amp - s.t.sin()).abs() <= 1e-8,
                    "dim {dim}: profile off at t = {}: {} vs {}",
                    s.t,
                    s.j / amp,
                    s.t.sin()
                );
            }
        }
    }

    #[test]
    fn eigenvalue_decreases_strictly_in_cap_radius() {
        let grid = [FRAC_PI_6, PI / 5.0, FRAC_PI_4, FRAC_PI_3, FRAC_PI_2];
        let report = verify_monotone(3, &grid).unwrap();
        assert!(report.strictly_decreasing(), "mus = {:?}", report.mus);
        assert!((report.mus.last().unwrap() - 3.0).abs() <= 1e-8);

        // vacuous on a single radius
        assert!(verify_monotone(4, &[FRAC_PI_3])
            .unwrap()
            .strictly_decreasing());
        // a strict quarter cap sits strictly above the hemisphere value
        let pair = verify_monotone(4, &[FRAC_PI_4, FRAC_PI_2]).unwrap();
        assert!(pair.mus[0] > 4.0 && pair.strictly_decreasing());
    }

    #[test]
    fn lower_bounds_hold_with_positive_margins() {
        for dim in [3usize, 4, 5] {
            for delta in [FRAC_PI_6, FRAC_PI_4, FRAC_PI_3, 0.45 * PI] {
                let report = verify_bounds(dim, delta).unwrap();
                assert!(
                    report.holds(),
                    "dim {dim}, delta {delta}: margins {} and {}",
                    report.margin1,
                    report.margin2
                );
            }
        }
        // closed-form spot value: 3 / sin^2(pi/3) = 4
        let report = verify_bounds(3, FRAC_PI_3).unwrap();
        assert!((report.bound2 - 4.0).abs() <= 1e-12);
        assert!(report.mu > report.bound1 && report.bound1 > 4.0);
    }

    #[test]
    fn shooting_matches_tridiagonal_oracle() {
        for dim in [3usize, 4, 5] {
            for delta in [FRAC_PI_6, FRAC_PI_4, FRAC_PI_3, 0.45 * PI] {
                let shot = neumann_mu(dim, delta).unwrap().mu;
                let matrix = oracle::mu(dim, delta).unwrap();
                assert!(
                    (shot - matrix).abs() <= 1e-6 * matrix,
                    "dim {dim}, delta {delta}: shot {shot} vs oracle {matrix}"
                );
            }
        }
    }

    #[test]
    fn oracle_converges_at_second_order_on_the_hemisphere() {
        for dim in [3usize, 4] {
            let extrapolated = oracle::mu(dim, FRAC_PI_2).unwrap();
            assert!(
                (extrapolated - dim as f64).abs() <= 1e-7,
                "dim {dim}: {extrapolated}"
            );
            let coarse = oracle::tridiagonal_mu(dim, FRAC_PI_2, 400).unwrap();
            let fine = oracle::tridiagonal_mu(dim, FRAC_PI_2, 800).unwrap();
            let ratio = (coarse - dim as f64) / (fine - dim as f64);
            assert!(
                (3.4..4.6).contains(&ratio),
                "dim {dim}: error ratio {ratio} off the second-order value 4"
            );
        }
    }

    #[test]
    fn epsilon_margin_matches_closed_values() {
        assert_eq!(epsilon_margin(3, 3.0).unwrap(), 0.5);
        assert_eq!(epsilon_margin(3, 4.0).unwrap(), 1.0);

        let threshold = 5.0 - 2.0 / 6.0;
        assert!(epsilon_margin(5, threshold).unwrap().abs() <= 1e-15);
        assert!(epsilon_margin(3, 2.0).is_err());

        // the bracket vanishes at the returned coefficient and goes negative
        // just above it when the clamp is inactive
        let eps = epsilon_margin(4, 4.2).unwrap();
        let bracket =
            |e: f64| -5.0 + (2.0 - e) / 4.0 + (1.0 - e) / 4.0 * 4.2 + 4.2;
        assert!(bracket(eps).abs() <= 1e-12);
        assert!(bracket(eps + 1e-6) < 0.0);
    }

    #[test]
    fn rejects_inputs_outside_the_characterized_range() {
        assert!(matches!(
            neumann_mu(3, 1.6),
            Err(Error::Range { .. })
        ));
        assert!(neumann_mu(3, -0.1).is_err());
        assert!(neumann_mu(1, FRAC_PI_3).is_err());
        assert!(verify_bounds(3, FRAC_PI_2).is_err());
        assert!(verify_monotone(3, &[FRAC_PI_3, FRAC_PI_4]).is_err());

        let mut problem = CapEigenProblem::new(3, FRAC_PI_3).unwrap();
        problem.start_offset = 1e-2;
        assert!(problem.solve().is_err());
    }

    #[test]
    fn quadrature_matches_sine_power_reduction() {
        fn sin_power_integral(k: i32, d: f64) -> f64 {
            match k {
                0 => d,
                1 => 1.0 - d.cos(),
                _ => {
                    (-d.cos() * d.sin().powi(k - 1)
                        + (k - 1) as f64 * sin_power_integral(k - 2, d))
                        / k as f64
                }
            }
        }
        for (k, d) in [(2, FRAC_PI_3), (3, 0.9), (4, FRAC_PI_6)] {
            let direct = simpson(|t| t.sin().powi(k), 0.0, d, 4096);
            let exact = sin_power_integral(k, d);
            assert!(
                (direct - exact).abs() <= 1e-12,
                "k = {k}: {direct} vs {exact}"
            );
        }
    }
}
