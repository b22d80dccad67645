//! Closed-form background geometries of constant sectional curvature 0 or 1,
//! domain specifications, boundary geometry, and static potentials.
//!
//! Charts are either Cartesian (curvature 0 only) or polar around a center
//! point: coordinates `(r, a_1, .., a_{n-2}, phi)` with metric
//! `dr^2 + f(r)^2 dS^2` where `f(r) = sin r` on the unit sphere and
//! `f(r) = r` on flat space, and `dS^2` is the round metric of the unit
//! `(n-1)`-sphere in nested polar angles. Everything here is exact: metric,
//! Christoffel symbols and their coordinate derivatives, curvature, boundary
//! data, and potential derivatives are evaluated from formulas, never from
//! finite differences.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest supported manifold dimension for chart-based evaluation.
pub const MAX_DIM: usize = 5;

pub type Vector = [f64; MAX_DIM];
pub type Matrix = [[f64; MAX_DIM]; MAX_DIM];
pub type Rank3 = [[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM];
pub type Rank4 = [[[[f64; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    /// Sectional curvature 0 (Euclidean space).
    Flat,
    /// Sectional curvature 1 (unit round sphere).
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    /// Nested polar coordinates around a center point.
    Polar,
    /// Standard Cartesian coordinates; flat backgrounds only.
    Cartesian,
}

/// A constant-curvature background `(n, kappa)` together with a fixed chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpace {
    pub dim: usize,
    pub curvature: Curvature,
    pub chart: ChartKind,
}

impl BackgroundSpace {
    pub fn sphere_polar(dim: usize) -> Result<Self> {
        Self::new(dim, Curvature::Sphere, ChartKind::Polar)
    }

    pub fn flat_polar(dim: usize) -> Result<Self> {
        Self::new(dim, Curvature::Flat, ChartKind::Polar)
    }

    pub fn flat_cartesian(dim: usize) -> Result<Self> {
        Self::new(dim, Curvature::Flat, ChartKind::Cartesian)
    }

    pub fn new(dim: usize, curvature: Curvature, chart: ChartKind) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(Error::Config(format!("dimension {dim} outside supported range 2..={MAX_DIM}")));
        }
        if curvature == Curvature::Sphere && chart == ChartKind::Cartesian {
            return Err(Error::Config("sphere background requires a polar chart".into()));
        }
        Ok(BackgroundSpace { dim, curvature, chart })
    }

    pub fn kappa(&self) -> f64 {
        match self.curvature {
            Curvature::Flat => 0.0,
            Curvature::Sphere => 1.0,
        }
    }

    /// Warp factor of the polar chart: `(f, f', f'')` at radius `r`.
    fn warp(&self, r: f64) -> (f64, f64, f64) {
        match self.curvature {
            Curvature::Sphere => (r.sin(), r.cos(), -r.sin()),
            Curvature::Flat => (r, 1.0, 0.0),
        }
    }

    /// Validates that `x` lies strictly inside the chart's regular region.
    pub fn valid_point(&self, x: &[f64]) -> Result<()> {
        let n = self.dim;
        if x.len() < n {
            return Err(Error::Shape(format!("point has {} coordinates, chart needs {n}", x.len())));
        }
        match self.chart {
            ChartKind::Cartesian => {
                for (i, &v) in x.iter().take(n).enumerate() {
                    if !v.is_finite() {
                        return Err(Error::Domain { axis: AXIS_NAMES[i], value: v, reason: "not finite".into() });
                    }
                }
            }
            ChartKind::Polar => {
                let r = x[0];
                let r_max = match self.curvature {
                    Curvature::Sphere => std::f64::consts::PI,
                    Curvature::Flat => f64::INFINITY,
                };
                if !(r > 0.0 && r < r_max) {
                    return Err(Error::Domain {
                        axis: "r",
                        value: r,
                        reason: format!("radial coordinate must lie in (0, {r_max})"),
                    });
                }
                // Interior polar angles live in (0, pi); the last angle is periodic.
                for m in 1..n.saturating_sub(1) {
                    if !(x[m] > 0.0 && x[m] < std::f64::consts::PI) {
                        return Err(Error::Domain {
                            axis: AXIS_NAMES[m],
                            value: x[m],
                            reason: "polar angle must lie in (0, pi)".into(),
                        });
                    }
                }
                if n >= 2 && !x[n - 1].is_finite() {
                    return Err(Error::Domain { axis: AXIS_NAMES[n - 1], value: x[n - 1], reason: "not finite".into() });
                }
            }
        }
        Ok(())
    }

    /// Diagonal entries `A_i^2` of the metric. All charts here are orthogonal.
    pub fn metric_diag(&self, x: &[f64]) -> Result<Vector> {
        self.valid_point(x)?;
        let n = self.dim;
        let mut d = [0.0; MAX_DIM];
        match self.chart {
            ChartKind::Cartesian => {
                for v in d.iter_mut().take(n) {
                    *v = 1.0;
                }
            }
            ChartKind::Polar => {
                let (f, _, _) = self.warp(x[0]);
                d[0] = 1.0;
                let mut prod = f;
                for k in 1..n {
                    d[k] = prod * prod;
                    if k < n - 1 {
                        prod *= x[k].sin();
                    }
                }
            }
        }
        Ok(d)
    }

    /// Full metric matrix at `x` (diagonal for these charts).
    pub fn metric_at(&self, x: &[f64]) -> Result<Matrix> {
        let d = self.metric_diag(x)?;
        let mut m = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..self.dim {
            m[i][i] = d[i];
        }
        Ok(m)
    }

    pub fn inverse_metric_diag(&self, x: &[f64]) -> Result<Vector> {
        let d = self.metric_diag(x)?;
        let mut inv = [0.0; MAX_DIM];
        for i in 0..self.dim {
            inv[i] = 1.0 / d[i];
        }
        Ok(inv)
    }

    pub fn sqrt_det_metric(&self, x: &[f64]) -> Result<f64> {
        let d = self.metric_diag(x)?;
        let mut p = 1.0;
        for &v in d.iter().take(self.dim) {
            p *= v;
        }
        Ok(p.sqrt())
    }

    /// Logarithmic scale-factor derivatives `L[k][m] = d_m ln A_k`.
    ///
    /// For the orthogonal polar chart: `L[k][0] = f'/f` for k >= 1,
    /// `L[k][m] = cot(x_m)` for 1 <= m < k, zero otherwise.
    fn log_scale_grad(&self, x: &[f64]) -> Matrix {
        let n = self.dim;
        let mut l = [[0.0; MAX_DIM]; MAX_DIM];
        if self.chart == ChartKind::Cartesian {
            return l;
        }
        let (f, fp, _) = self.warp(x[0]);
        for k in 1..n {
            l[k][0] = fp / f;
            for m in 1..k {
                l[k][m] = x[m].cos() / x[m].sin();
            }
        }
        l
    }

    /// Diagonal second derivatives `dL[k][m] = d_m d_m ln A_k`.
    /// Mixed second derivatives of `ln A_k` vanish for this chart family.
    fn log_scale_grad2(&self, x: &[f64]) -> Matrix {
        let n = self.dim;
        let mut dl = [[0.0; MAX_DIM]; MAX_DIM];
        if self.chart == ChartKind::Cartesian {
            return dl;
        }
        let (f, fp, fpp) = self.warp(x[0]);
        for k in 1..n {
            dl[k][0] = fpp / f - (fp / f) * (fp / f);
            for m in 1..k {
                let s = x[m].sin();
                dl[k][m] = -1.0 / (s * s);
            }
        }
        dl
    }

    /// Christoffel symbols `gamma[k][i][j]` of the background metric.
    pub fn christoffel_at(&self, x: &[f64]) -> Result<Rank3> {
        self.valid_point(x)?;
        let n = self.dim;
        let mut gamma = [[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM];
        if self.chart == ChartKind::Cartesian {
            return Ok(gamma);
        }
        let d = self.metric_diag(x)?;
        let l = self.log_scale_grad(x);
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    gamma[k][i][j] = if i == j && i != k {
                        -(d[i] / d[k]) * l[i][k]
                    } else if k == i {
                        l[i][j]
                    } else if k == j {
                        l[j][i]
                    } else {
                        0.0
                    };
                }
            }
        }
        Ok(gamma)
    }

    /// Coordinate derivatives `dgamma[a][k][i][j] = d_a gamma[k][i][j]`.
    pub fn christoffel_grad_at(&self, x: &[f64]) -> Result<Rank4> {
        self.valid_point(x)?;
        let n = self.dim;
        let mut dg = [[[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];
        if self.chart == ChartKind::Cartesian {
            return Ok(dg);
        }
        let d = self.metric_diag(x)?;
        let l = self.log_scale_grad(x);
        let dl = self.log_scale_grad2(x);
        for a in 0..n {
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        dg[a][k][i][j] = if i == j && i != k {
                            // gamma = -(A_i^2/A_k^2) L[i][k]
                            let ratio = d[i] / d[k];
                            let dlik = if a == k { dl[i][k] } else { 0.0 };
                            -ratio * (2.0 * l[i][a] * l[i][k] + dlik - 2.0 * l[i][k] * l[k][a])
                        } else if k == i {
                            if a == j {
                                dl[i][j]
                            } else {
                                0.0
                            }
                        } else if k == j {
                            if a == i {
                                dl[j][i]
                            } else {
                                0.0
                            }
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        Ok(dg)
    }

    /// Fully lowered curvature tensor `R[i][k][j][l] = kappa (g_ij g_kl - g_il g_kj)`,
    /// assembled algebraically from the constant-curvature formula.
    pub fn riemann_at(&self, x: &[f64]) -> Result<Rank4> {
        let g = self.metric_at(x)?;
        let kappa = self.kappa();
        let n = self.dim;
        let mut r = [[[[0.0; MAX_DIM]; MAX_DIM]; MAX_DIM]; MAX_DIM];
        if kappa == 0.0 {
            return Ok(r);
        }
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    for l in 0..n {
                        r[i][k][j][l] = kappa * (g[i][j] * g[k][l] - g[i][l] * g[k][j]);
                    }
                }
            }
        }
        Ok(r)
    }

    /// Ricci tensor `(n-1) kappa g` at `x`.
    pub fn ricci_at(&self, x: &[f64]) -> Result<Matrix> {
        let g = self.metric_at(x)?;
        let c = (self.dim as f64 - 1.0) * self.kappa();
        let mut r = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..self.dim {
            for j in 0..self.dim {
                r[i][j] = c * g[i][j];
            }
        }
        Ok(r)
    }

    /// Scalar curvature of the background: `n(n-1) kappa`.
    pub fn scalar_curvature(&self) -> f64 {
        let n = self.dim as f64;
        n * (n - 1.0) * self.kappa()
    }

    /// Number of ambient Euclidean coordinates the chart embeds into.
    pub fn ambient_dim(&self) -> usize {
        match self.curvature {
            Curvature::Sphere => self.dim + 1,
            Curvature::Flat => self.dim,
        }
    }

    /// Ambient Euclidean coordinates of the chart point.
    ///
    /// Sphere: `X_0 = cos r`, `X_k = sin r * u_k`. Flat polar: `X_k = r * u_k`.
    /// Flat Cartesian: identity. `u` is the angular unit vector.
    pub fn ambient_at(&self, x: &[f64]) -> Result<[f64; MAX_DIM + 1]> {
        self.valid_point(x)?;
        let n = self.dim;
        let mut out = [0.0; MAX_DIM + 1];
        match self.chart {
            ChartKind::Cartesian => {
                out[..n].copy_from_slice(&x[..n]);
            }
            ChartKind::Polar => {
                let u = unit_vector(&x[1..n], n);
                match self.curvature {
                    Curvature::Sphere => {
                        out[0] = x[0].cos();
                        let s = x[0].sin();
                        for k in 0..n {
                            out[k + 1] = s * u[k];
                        }
                    }
                    Curvature::Flat => {
                        for k in 0..n {
                            out[k] = x[0] * u[k];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Jacobian `J[A][i] = dX_A / dx_i` of the ambient embedding.
    pub fn ambient_jacobian_at(&self, x: &[f64]) -> Result<[[f64; MAX_DIM]; MAX_DIM + 1]> {
        self.valid_point(x)?;
        let n = self.dim;
        let mut j = [[0.0; MAX_DIM]; MAX_DIM + 1];
        match self.chart {
            ChartKind::Cartesian => {
                for i in 0..n {
                    j[i][i] = 1.0;
                }
            }
            ChartKind::Polar => {
                let u = unit_vector(&x[1..n], n);
                let du = unit_vector_grad(&x[1..n], n);
                match self.curvature {
                    Curvature::Sphere => {
                        let (s, c) = x[0].sin_cos();
                        j[0][0] = -s;
                        for k in 0..n {
                            j[k + 1][0] = c * u[k];
                            for m in 0..n - 1 {
                                j[k + 1][m + 1] = s * du[k][m];
                            }
                        }
                    }
                    Curvature::Flat => {
                        for k in 0..n {
                            j[k][0] = u[k];
                            for m in 0..n - 1 {
                                j[k][m + 1] = x[0] * du[k][m];
                            }
                        }
                    }
                }
            }
        }
        Ok(j)
    }
}

const AXIS_NAMES: [&str; MAX_DIM] = ["r", "a1", "a2", "a3", "phi"];

/// Unit vector on the `(n-1)`-sphere in nested polar angles.
///
/// `u_k = (prod_{j<k} sin a_j) * cos a_k` for `k < n-1`, and
/// `u_{n-1} = prod_j sin a_j` (indices 0-based over `n` components,
/// `n-1` angles).
fn unit_vector(angles: &[f64], n: usize) -> [f64; MAX_DIM + 1] {
    let mut u = [0.0; MAX_DIM + 1];
    let mut prefix = 1.0;
    for k in 0..n {
        if k < n - 1 {
            u[k] = prefix * angles[k].cos();
            prefix *= angles[k].sin();
        } else {
            u[k] = prefix;
        }
    }
    u
}

/// Derivatives `du[k][m] = d u_k / d a_m`, by direct product evaluation
/// (no divisions, stable near angle poles).
fn unit_vector_grad(angles: &[f64], n: usize) -> [[f64; MAX_DIM]; MAX_DIM + 1] {
    let mut du = [[0.0; MAX_DIM]; MAX_DIM + 1];
    for m in 0..n - 1 {
        for k in 0..n {
            if m > k {
                continue;
            }
            // u_k = prod_{j<k} sin a_j * (cos a_k or 1); differentiate factor m.
            let mut v = 1.0;
            for j in 0..k.min(n - 1) {
                if j == m {
                    v *= angles[j].cos();
                } else if j < k {
                    v *= angles[j].sin();
                }
            }
            if k < n - 1 {
                if m == k {
                    v *= -angles[k].sin();
                } else {
                    v *= angles[k].cos();
                }
            } else if m == k {
                // u_{n-1} has no cos factor and no a_{n-1} dependence beyond sines.
                v = 0.0;
            }
            du[k][m] = v;
        }
    }
    du
}

/// Geometric domain on a background space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    /// Geodesic cap of radius `delta` in the unit sphere, polar chart.
    SphereCap { delta: f64 },
    /// Euclidean ball of radius `radius`, polar chart; `base_point` is the
    /// ambient base point of the quadratic potential's distance function.
    EuclideanBall { radius: f64, base_point: [f64; MAX_DIM] },
    /// Cartesian box `|x_i| <= half_widths[i]` in flat space.
    BoxSubdomain { half_widths: [f64; MAX_DIM] },
}

impl DomainSpec {
    pub fn sphere_cap(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < std::f64::consts::PI) {
            return Err(Error::Precondition(format!("cap radius {delta} outside (0, pi)")));
        }
        Ok(DomainSpec::SphereCap { delta })
    }

    pub fn euclidean_ball(radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::Precondition(format!("ball radius {radius} must be positive")));
        }
        Ok(DomainSpec::EuclideanBall { radius, base_point: [0.0; MAX_DIM] })
    }

    pub fn cartesian_box(half_widths: &[f64]) -> Result<Self> {
        let mut hw = [0.0; MAX_DIM];
        for (i, &w) in half_widths.iter().enumerate() {
            if w <= 0.0 {
                return Err(Error::Precondition(format!("box half width {w} on axis {i} must be positive")));
            }
            hw[i] = w;
        }
        Ok(DomainSpec::BoxSubdomain { half_widths: hw })
    }

    /// Background space this domain lives on, for dimension `n`.
    pub fn space(&self, n: usize) -> Result<BackgroundSpace> {
        match self {
            DomainSpec::SphereCap { .. } => BackgroundSpace::sphere_polar(n),
            DomainSpec::EuclideanBall { .. } => BackgroundSpace::flat_polar(n),
            DomainSpec::BoxSubdomain { .. } => BackgroundSpace::flat_cartesian(n),
        }
    }

    /// Radial extent of polar domains.
    pub fn radial_extent(&self) -> Option<f64> {
        match self {
            DomainSpec::SphereCap { delta } => Some(*delta),
            DomainSpec::EuclideanBall { radius, .. } => Some(*radius),
            DomainSpec::BoxSubdomain { .. } => None,
        }
    }

    /// Closed-form volume of the domain under the background metric.
    pub fn closed_form_volume(&self, n: usize) -> f64 {
        match self {
            DomainSpec::SphereCap { delta } => unit_sphere_area(n - 1) * sin_power_integral(n - 1, *delta),
            DomainSpec::EuclideanBall { radius, .. } => unit_sphere_area(n - 1) * radius.powi(n as i32) / n as f64,
            DomainSpec::BoxSubdomain { half_widths } => {
                half_widths.iter().take(n).map(|w| 2.0 * w).product()
            }
        }
    }

    /// Closed-form area of the boundary under the background metric.
    pub fn closed_form_boundary_area(&self, n: usize) -> f64 {
        match self {
            DomainSpec::SphereCap { delta } => unit_sphere_area(n - 1) * delta.sin().powi(n as i32 - 1),
            DomainSpec::EuclideanBall { radius, .. } => unit_sphere_area(n - 1) * radius.powi(n as i32 - 1),
            DomainSpec::BoxSubdomain { half_widths } => {
                let vol: f64 = half_widths.iter().take(n).map(|w| 2.0 * w).product();
                (0..n).map(|i| 2.0 * vol / (2.0 * half_widths[i])).sum()
            }
        }
    }

    /// Mean curvature of the boundary of a polar domain (constant over it).
    pub fn boundary_mean_curvature(&self, n: usize) -> Option<f64> {
        let m = (n - 1) as f64;
        match self {
            DomainSpec::SphereCap { delta } => Some(m * delta.cos() / delta.sin()),
            DomainSpec::EuclideanBall { radius, .. } => Some(m / radius),
            DomainSpec::BoxSubdomain { .. } => Some(0.0),
        }
    }
}

/// Surface area of the unit `k`-sphere.
pub fn unit_sphere_area(k: usize) -> f64 {
    use std::f64::consts::PI;
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI / (k as f64 - 1.0) * unit_sphere_area(k - 2),
    }
}

/// Exact `int_0^delta sin(t)^m dt` by the standard reduction formula.
pub fn sin_power_integral(m: usize, delta: f64) -> f64 {
    match m {
        0 => delta,
        1 => 1.0 - delta.cos(),
        _ => {
            let mf = m as f64;
            (-delta.cos() * delta.sin().powi(m as i32 - 1) + (mf - 1.0) * sin_power_integral(m - 2, delta)) / mf
        }
    }
}

/// Equivalence test of the two closed-form cap conditions
/// `cos(delta) >= 2/sqrt(n+3)` and `Hbar >= 4 tan(delta)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BallConditionReport {
    pub cos_condition: bool,
    pub mean_curvature_condition: bool,
    pub agree: bool,
    pub cos_margin: f64,
    pub mean_curvature_margin: f64,
}

pub fn geodesic_ball_condition(n: usize, delta: f64) -> Result<BallConditionReport> {
    if !(delta > 0.0 && delta < std::f64::consts::FRAC_PI_2) {
        return Err(Error::Precondition(format!("cap radius {delta} outside (0, pi/2)")));
    }
    let cos_margin = delta.cos() - 2.0 / ((n as f64) + 3.0).sqrt();
    let h = (n as f64 - 1.0) * delta.cos() / delta.sin();
    let h_margin = h - 4.0 * delta.tan();
    let c1 = cos_margin >= 0.0;
    let c2 = h_margin >= 0.0;
    Ok(BallConditionReport {
        cos_condition: c1,
        mean_curvature_condition: c2,
        agree: c1 == c2,
        cos_margin,
        mean_curvature_margin: h_margin,
    })
}

/// Extra per-node boundary fields for caps whose reference center is offset
/// from the chart center: distance `r` to the reference point, the angle
/// `theta` between the outward normal and the gradient of `r`, and the
/// lower-bound function `c` of the second-fundamental-form hypothesis.
#[derive(Debug, Clone)]
pub struct SurfaceExtras {
    pub dist: Vec<f64>,
    pub angle: Vec<f64>,
    pub lower_bound_c: Vec<f64>,
}

/// Per-boundary-node geometric data of a domain boundary.
///
/// The tangent frame is orthonormal with respect to the background metric, so
/// the induced metric in the frame is the identity and `II` is stored in frame
/// components. Nodes come from the caller (the grid's boundary node set);
/// everything here is closed-form.
#[derive(Debug, Clone)]
pub struct BoundaryGeometry {
    /// Chart coordinates of each boundary node.
    pub nodes: Vec<Vector>,
    /// Orthonormal tangent frame vectors `e_alpha`, chart components;
    /// `frames[node][alpha][i]`.
    pub frames: Vec<[[f64; MAX_DIM]; MAX_DIM]>,
    /// Outward unit normal, chart components.
    pub normals: Vec<Vector>,
    /// Second fundamental form in frame components, `ii[node][alpha][beta]`.
    pub second_form: Vec<Matrix>,
    /// Mean curvature at each node.
    pub mean_curvature: Vec<f64>,
    /// Quadrature weight of each node for surface integration (includes the
    /// induced area element); filled by the grid builder.
    pub weights: Vec<f64>,
    /// Optional offset-center fields.
    pub extras: Option<SurfaceExtras>,
}

/// Builds boundary geometry on the `r = r_max` face of a polar domain, or on
/// a box face (inferred from the nodes themselves, which all live on one
/// face of the box).
///
/// `nodes` must lie on the boundary to 1e-12 in the face coordinate.
pub fn boundary_geometry(space: &BackgroundSpace, domain: &DomainSpec, nodes: &[Vector]) -> Result<BoundaryGeometry> {
    let n = space.dim;
    if let DomainSpec::BoxSubdomain { half_widths } = domain {
        let first = nodes
            .first()
            .ok_or_else(|| Error::Precondition("cannot infer a box face from an empty node set".into()))?;
        let (axis, sign) = (0..n)
            .find_map(|a| {
                if (first[a] - half_widths[a]).abs() <= 1e-12 {
                    Some((a, 1.0))
                } else if (first[a] + half_widths[a]).abs() <= 1e-12 {
                    Some((a, -1.0))
                } else {
                    None
                }
            })
            .ok_or_else(|| Error::Precondition("box boundary nodes must lie on a face".into()))?;
        let mut frames = Vec::with_capacity(nodes.len());
        let mut normals = Vec::with_capacity(nodes.len());
        for (idx, x) in nodes.iter().enumerate() {
            if (x[axis] - sign * half_widths[axis]).abs() > 1e-12 {
                return Err(Error::Precondition(format!(
                    "boundary node {idx} off the box face on axis {axis} by {}",
                    (x[axis] - sign * half_widths[axis]).abs()
                )));
            }
            space.valid_point(x)?;
            let mut nu = [0.0; MAX_DIM];
            nu[axis] = sign;
            let mut frame = [[0.0; MAX_DIM]; MAX_DIM];
            for (alpha, t) in (0..n).filter(|&t| t != axis).enumerate() {
                frame[alpha][t] = 1.0;
            }
            frames.push(frame);
            normals.push(nu);
        }
        // Box faces are totally geodesic in the flat background.
        return Ok(BoundaryGeometry {
            nodes: nodes.to_vec(),
            frames,
            normals,
            second_form: vec![[[0.0; MAX_DIM]; MAX_DIM]; nodes.len()],
            mean_curvature: vec![0.0; nodes.len()],
            weights: vec![0.0; nodes.len()],
            extras: None,
        });
    }
    let r_max = domain
        .radial_extent()
        .ok_or_else(|| Error::Precondition("boundary geometry requires a polar or box domain".into()))?;
    let mut frames = Vec::with_capacity(nodes.len());
    let mut normals = Vec::with_capacity(nodes.len());
    let mut second_form = Vec::with_capacity(nodes.len());
    let mut mean_curvature = Vec::with_capacity(nodes.len());
    let (f, fp, _) = space.warp(r_max);
    let curv_ratio = fp / f;
    for (idx, x) in nodes.iter().enumerate() {
        if (x[0] - r_max).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "boundary node {idx} off the r = {r_max} face by {}",
                (x[0] - r_max).abs()
            )));
        }
        space.valid_point(x)?;
        let d = space.metric_diag(x)?;
        // Outward normal is the unit radial direction; tangent frame is the
        // normalized angular coordinate frame.
        let mut nu = [0.0; MAX_DIM];
        nu[0] = 1.0;
        let mut frame = [[0.0; MAX_DIM]; MAX_DIM];
        for alpha in 0..n - 1 {
            let axis = alpha + 1;
            if d[axis] <= 0.0 {
                return Err(Error::Frame { node: idx, detail: format!("degenerate scale factor on axis {axis}") });
            }
            frame[alpha][axis] = 1.0 / d[axis].sqrt();
        }
        // Geodesic sphere: II = (f'/f) * gamma, identity in the frame.
        let mut ii = [[0.0; MAX_DIM]; MAX_DIM];
        for alpha in 0..n - 1 {
            ii[alpha][alpha] = curv_ratio;
        }
        frames.push(frame);
        normals.push(nu);
        second_form.push(ii);
        mean_curvature.push((n as f64 - 1.0) * curv_ratio);
    }
    Ok(BoundaryGeometry {
        nodes: nodes.to_vec(),
        frames,
        normals,
        second_form,
        mean_curvature,
        weights: vec![0.0; nodes.len()],
        extras: None,
    })
}

impl BoundaryGeometry {
    /// Number of boundary nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attaches distance/angle fields for a reference center at geodesic
    /// distance `d` from the chart center along the `a1 = 0` axis, with
    /// a constant lower-bound function `c`.
    ///
    /// On the unit sphere, with `s` the chart radius and `psi` the first
    /// polar angle of a node: `cos r = cos s cos d + sin s sin d cos psi`
    /// and `cos theta = (sin s cos d - cos s sin d cos psi) / sin r`.
    pub fn attach_offset_extras(&mut self, space: &BackgroundSpace, offset: f64, c: f64) -> Result<()> {
        if space.curvature != Curvature::Sphere {
            return Err(Error::Precondition("offset-center boundary fields are defined on the sphere".into()));
        }
        let mut dist = Vec::with_capacity(self.len());
        let mut angle = Vec::with_capacity(self.len());
        for x in &self.nodes {
            let s = x[0];
            let psi = x[1];
            let cr = s.cos() * offset.cos() + s.sin() * offset.sin() * psi.cos();
            let r = cr.clamp(-1.0, 1.0).acos();
            let sr = r.sin();
            if sr < 1e-13 {
                return Err(Error::Numerical(
                    "boundary node coincides with the reference center; angle undefined".into(),
                ));
            }
            let ct = (s.sin() * offset.cos() - s.cos() * offset.sin() * psi.cos()) / sr;
            dist.push(r);
            angle.push(ct.clamp(-1.0, 1.0).acos());
        }
        self.extras = Some(SurfaceExtras { dist, angle, lower_bound_c: vec![c; self.len()] });
        Ok(())
    }
}

/// Scalar potentials with closed-form value, gradient, and Hessian, singled
/// out by the identities their images under the adjoint linearized scalar
/// curvature operator satisfy (zero, or the background metric).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StaticPotential {
    /// `lambda = cos r` on the sphere; in the kernel of the adjoint operator.
    SphereCos,
    /// `lambda = -1/(n-1)` on the sphere; adjoint image is the metric.
    SphereConstant,
    /// `lambda = -|x-a|^2 / (2(n-1)) + l` on flat space; adjoint image is the
    /// metric. `a` is an ambient point.
    FlatQuadratic { a: [f64; MAX_DIM], l: f64 },
}

impl StaticPotential {
    /// Validated constructor for the flat quadratic potential: `l` must make
    /// the potential strictly positive on the closed domain.
    pub fn flat_quadratic(domain: &DomainSpec, n: usize, a: [f64; MAX_DIM], l: f64) -> Result<Self> {
        let max_dist_sq = match domain {
            DomainSpec::EuclideanBall { radius, .. } => {
                let norm_a = a.iter().take(n).map(|v| v * v).sum::<f64>().sqrt();
                (radius + norm_a) * (radius + norm_a)
            }
            DomainSpec::BoxSubdomain { half_widths } => {
                let mut s = 0.0;
                for i in 0..n {
                    let far = half_widths[i] + a[i].abs();
                    s += far * far;
                }
                s
            }
            DomainSpec::SphereCap { .. } => {
                return Err(Error::Precondition("flat quadratic potential requires a flat domain".into()))
            }
        };
        let min_l = max_dist_sq / (2.0 * (n as f64 - 1.0));
        if l <= min_l {
            return Err(Error::Precondition(format!(
                "offset {l} too small for positivity; need l > {min_l}"
            )));
        }
        Ok(StaticPotential::FlatQuadratic { a, l })
    }

    pub fn value_at(&self, space: &BackgroundSpace, x: &[f64]) -> Result<f64> {
        match self {
            StaticPotential::SphereCos => {
                expect_sphere(space)?;
                Ok(x[0].cos())
            }
            StaticPotential::SphereConstant => {
                expect_sphere(space)?;
                Ok(-1.0 / (space.dim as f64 - 1.0))
            }
            StaticPotential::FlatQuadratic { a, l } => {
                expect_flat(space)?;
                let amb = space.ambient_at(x)?;
                let mut d2 = 0.0;
                for i in 0..space.dim {
                    let d = amb[i] - a[i];
                    d2 += d * d;
                }
                Ok(-d2 / (2.0 * (space.dim as f64 - 1.0)) + l)
            }
        }
    }

    /// Gradient in chart components (coordinate partial derivatives).
    pub fn gradient_at(&self, space: &BackgroundSpace, x: &[f64]) -> Result<Vector> {
        let mut grad = [0.0; MAX_DIM];
        match self {
            StaticPotential::SphereCos => {
                expect_sphere(space)?;
                grad[0] = -x[0].sin();
            }
            StaticPotential::SphereConstant => {
                expect_sphere(space)?;
            }
            StaticPotential::FlatQuadratic { a, .. } => {
                expect_flat(space)?;
                let amb = space.ambient_at(x)?;
                let jac = space.ambient_jacobian_at(x)?;
                let scale = -1.0 / (space.dim as f64 - 1.0);
                for i in 0..space.dim {
                    let mut s = 0.0;
                    for b in 0..space.dim {
                        s += (amb[b] - a[b]) * jac[b][i];
                    }
                    grad[i] = scale * s;
                }
            }
        }
        Ok(grad)
    }

    /// Hessian in chart components (covariant second derivative).
    pub fn hessian_at(&self, space: &BackgroundSpace, x: &[f64]) -> Result<Matrix> {
        let mut hess = [[0.0; MAX_DIM]; MAX_DIM];
        match self {
            StaticPotential::SphereCos => {
                expect_sphere(space)?;
                // Hessian of cos r on the unit sphere is -(cos r) g.
                let g = self.scaled_metric(space, x, -x[0].cos())?;
                hess = g;
            }
            StaticPotential::SphereConstant => {
                expect_sphere(space)?;
            }
            StaticPotential::FlatQuadratic { .. } => {
                expect_flat(space)?;
                // Hessian of |x-a|^2/2 on flat space is g, in any chart.
                let g = self.scaled_metric(space, x, -1.0 / (space.dim as f64 - 1.0))?;
                hess = g;
            }
        }
        Ok(hess)
    }

    fn scaled_metric(&self, space: &BackgroundSpace, x: &[f64], c: f64) -> Result<Matrix> {
        let g = space.metric_at(x)?;
        let mut out = [[0.0; MAX_DIM]; MAX_DIM];
        for i in 0..space.dim {
            for j in 0..space.dim {
                out[i][j] = c * g[i][j];
            }
        }
        Ok(out)
    }
}

fn expect_sphere(space: &BackgroundSpace) -> Result<()> {
    if space.curvature != Curvature::Sphere {
        return Err(Error::Precondition("potential requires the sphere background".into()));
    }
    Ok(())
}

fn expect_flat(space: &BackgroundSpace) -> Result<()> {
    if space.curvature != Curvature::Flat {
        return Err(Error::Precondition("potential requires a flat background".into()));
    }
    Ok(())
}
