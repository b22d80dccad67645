//! Discrete layer: structured grids with half-cell node offsets over the
//! chart domains, sixth-order finite differences with one-sided closures,
//! endpoint-corrected midpoint quadrature, boundary-face restriction, and
//! containers for scalar, one-form, and symmetric-tensor fields.
//!
//! On 3-d polar charts the coordinate poles (r = 0 and the polar-angle
//! ends) are not boundaries, so derivative rows there stay centered by
//! reading ghost values through the pole identification with a
//! component-dependent reflection sign. One-sided closures would otherwise
//! feed their larger truncation error into the inverse-metric frame
//! factors, which grow without bound at the poles.
//!
//! Node ordering is row-major with the last axis fastest. Every parallel
//! kernel writes each output slot exactly once and every reduction goes
//! through a fixed-shape pairwise tree, so results are bit-identical for any
//! worker count.

use crate::geometry::{BackgroundSpace, DomainSpec, Vector, MAX_DIM};
use crate::util::{fd_weights, is_positive_definite, pairwise_sum};
use crate::{Error, Result};
use rayon::prelude::*;
use std::io::Write as _;

/// Smallest per-axis node count the one-sided closures and quadrature
/// corrections support.
pub const MIN_NODES_PER_AXIS: usize = 12;

/// Width of the one-sided windows (degree-7 polynomial exactness).
const EDGE_WIDTH: usize = 8;

/// Packed index of the symmetric component `(i, j)`, `i <= j`.
pub fn sym_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i <= j { (i, j) } else { (j, i) };
    a * n - a * (a + 1) / 2 + b
}

/// Number of independent components of a symmetric 2-tensor.
pub fn sym_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Uniform 1-D axis with half-cell offset nodes: the j-th node sits at
/// `lower + (j + 1/2) * spacing`, so no node touches either edge.
#[derive(Debug, Clone)]
pub struct Axis {
    pub len: usize,
    pub spacing: f64,
    pub lower: f64,
    pub upper: f64,
    pub periodic: bool,
}

impl Axis {
    pub fn uniform(lower: f64, upper: f64, len: usize, periodic: bool, axis_id: usize) -> Result<Self> {
        if len < MIN_NODES_PER_AXIS {
            return Err(Error::GridSize { axis: axis_id, nodes: len, min: MIN_NODES_PER_AXIS });
        }
        if !(upper > lower) {
            return Err(Error::Config(format!("axis {axis_id}: empty range [{lower}, {upper}]")));
        }
        Ok(Axis { len, spacing: (upper - lower) / len as f64, lower, upper, periodic })
    }

    pub fn node(&self, j: usize) -> f64 {
        self.lower + (j as f64 + 0.5) * self.spacing
    }
}

/// One derivative stencil: applied as `sum_k w_k (v_k - v_center)`, which is
/// mathematically identical (derivative rows have zero weight sum) and makes
/// constants differentiate to exactly 0.0 regardless of weight roundoff.
#[derive(Debug, Clone)]
struct StencilRow {
    center: usize,
    terms: Vec<(usize, f64)>,
}

impl StencilRow {
    #[inline]
    fn apply(&self, values: &[f64], base: usize, stride: usize) -> f64 {
        let v0 = values[base + self.center * stride];
        let mut acc = 0.0;
        for &(k, w) in &self.terms {
            acc += w * (values[base + k * stride] - v0);
        }
        acc
    }
}

/// Per-axis difference and quadrature rows.
///
/// Derivative rows are exact on degree <= 6 polynomials (7-point centered)
/// and degree <= 7 at the one-sided closures; restriction rows are
/// normalized so constants restrict exactly.
#[derive(Debug, Clone)]
struct DiffTable {
    first: Vec<StencilRow>,
    second: Vec<StencilRow>,
    /// Quadrature weights: spacing everywhere plus Euler-Maclaurin endpoint
    /// corrections, exact on degree <= 5.
    quad: Vec<f64>,
    restrict_lower: Vec<(usize, f64)>,
    restrict_upper: Vec<(usize, f64)>,
    derive_lower: Option<StencilRow>,
    derive_upper: Option<StencilRow>,
}

fn normalize_sum(row: &mut [(usize, f64)]) {
    let s: f64 = row.iter().map(|e| e.1).sum();
    for e in row.iter_mut() {
        e.1 /= s;
    }
}

impl DiffTable {
    fn build(axis: &Axis) -> DiffTable {
        let n = axis.len;
        let h = axis.spacing;
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        if axis.periodic {
            let x: Vec<f64> = (-3..=3).map(|k| k as f64 * h).collect();
            let w = fd_weights(&x, 0.0, 2);
            for j in 0..n {
                let mut r1 = Vec::with_capacity(7);
                let mut r2 = Vec::with_capacity(7);
                for (t, off) in (-3i64..=3).enumerate() {
                    let idx = ((j as i64 + off).rem_euclid(n as i64)) as usize;
                    r1.push((idx, w[1][t]));
                    r2.push((idx, w[2][t]));
                }
                first.push(StencilRow { center: j, terms: r1 });
                second.push(StencilRow { center: j, terms: r2 });
            }
            return DiffTable {
                first,
                second,
                quad: vec![h; n],
                restrict_lower: Vec::new(),
                restrict_upper: Vec::new(),
                derive_lower: None,
                derive_upper: None,
            };
        }

        for j in 0..n {
            let centered = j >= 3 && j + 4 <= n;
            let (start, width) = if centered {
                (j - 3, 7)
            } else if j < 3 {
                (0, EDGE_WIDTH)
            } else {
                (n - EDGE_WIDTH, EDGE_WIDTH)
            };
            let x: Vec<f64> = (0..width).map(|k| (start as f64 + k as f64 - j as f64) * h).collect();
            let w = fd_weights(&x, 0.0, 2);
            let r1: Vec<(usize, f64)> = (0..width).map(|k| (start + k, w[1][k])).collect();
            let r2: Vec<(usize, f64)> = (0..width).map(|k| (start + k, w[2][k])).collect();
            first.push(StencilRow { center: j, terms: r1 });
            second.push(StencilRow { center: j, terms: r2 });
        }

        // Midpoint rule with Euler-Maclaurin endpoint corrections:
        //   int f = h*sum f  + (h^2/24)[f'(b) - f'(a)] - (7h^4/5760)[f'''(b) - f'''(a)] + O(h^6),
        // with the edge derivatives replaced by one-sided rows of degree-7
        // exactness.
        let mut quad = vec![h; n];
        let lo: Vec<f64> = (0..EDGE_WIDTH).map(|k| axis.node(k)).collect();
        let hi: Vec<f64> = (0..EDGE_WIDTH).map(|k| axis.node(n - EDGE_WIDTH + k)).collect();
        let wl = fd_weights(&lo, axis.lower, 3);
        let wh = fd_weights(&hi, axis.upper, 3);
        let c2 = h * h / 24.0;
        let c4 = 7.0 * h.powi(4) / 5760.0;
        for k in 0..EDGE_WIDTH {
            quad[k] += -c2 * wl[1][k] + c4 * wl[3][k];
            quad[n - EDGE_WIDTH + k] += c2 * wh[1][k] - c4 * wh[3][k];
        }

        let mut restrict_lower: Vec<(usize, f64)> = (0..EDGE_WIDTH).map(|k| (k, wl[0][k])).collect();
        let mut restrict_upper: Vec<(usize, f64)> =
            (0..EDGE_WIDTH).map(|k| (n - EDGE_WIDTH + k, wh[0][k])).collect();
        normalize_sum(&mut restrict_lower);
        normalize_sum(&mut restrict_upper);
        let derive_lower = StencilRow { center: 0, terms: (0..EDGE_WIDTH).map(|k| (k, wl[1][k])).collect() };
        let derive_upper = StencilRow {
            center: n - 1,
            terms: (0..EDGE_WIDTH).map(|k| (n - EDGE_WIDTH + k, wh[1][k])).collect(),
        };
        DiffTable {
            first,
            second,
            quad,
            restrict_lower,
            restrict_upper,
            derive_lower: Some(derive_lower),
            derive_upper: Some(derive_upper),
        }
    }
}

/// Identifies one face of the grid's cell box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceId {
    pub axis: usize,
    pub upper: bool,
}

/// Structured grid over a chart domain.
#[derive(Debug, Clone)]
pub struct Grid {
    pub space: BackgroundSpace,
    pub domain: DomainSpec,
    pub axes: Vec<Axis>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    /// Chart coordinates of every node.
    pub points: Vec<Vector>,
    /// Inverse background metric diagonal at every node.
    pub inv_diag: Vec<Vector>,
    /// Background volume density at every node.
    pub sqrt_det: Vec<f64>,
    /// Nodes whose stencils are fully centered on every non-periodic axis.
    pub interior: Vec<bool>,
    /// True when the chart poles admit reflective ghost continuation
    /// (3-d polar charts with an even azimuthal node count).
    pole_ghost: bool,
    diff: Vec<DiffTable>,
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let n = shape.len();
    let mut s = vec![1usize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

impl Grid {
    /// Builds the grid for `domain` in dimension `dim` with `nodes_per_axis`
    /// nodes on every axis.
    pub fn new(domain: DomainSpec, dim: usize, nodes_per_axis: usize) -> Result<Grid> {
        let space = domain.space(dim)?;
        let axes: Vec<Axis> = match domain {
            DomainSpec::SphereCap { delta } => polar_axes(dim, delta, nodes_per_axis)?,
            DomainSpec::EuclideanBall { radius, .. } => polar_axes(dim, radius, nodes_per_axis)?,
            DomainSpec::BoxSubdomain { half_widths } => {
                let mut v = Vec::with_capacity(dim);
                for (i, w) in half_widths.iter().take(dim).enumerate() {
                    v.push(Axis::uniform(-w, *w, nodes_per_axis, false, i)?);
                }
                v
            }
        };
        let shape: Vec<usize> = axes.iter().map(|a| a.len).collect();
        let strides = strides_for(&shape);
        let len = shape.iter().product();
        let mut points = Vec::with_capacity(len);
        let mut inv_diag = Vec::with_capacity(len);
        let mut sqrt_det = Vec::with_capacity(len);
        let mut interior = Vec::with_capacity(len);
        for idx in 0..len {
            let mut x = [0.0; MAX_DIM];
            let mut inner = true;
            for a in 0..dim {
                let j = (idx / strides[a]) % shape[a];
                x[a] = axes[a].node(j);
                if !axes[a].periodic && !(j >= 3 && j + 4 <= shape[a]) {
                    inner = false;
                }
            }
            space.valid_point(&x)?;
            inv_diag.push(space.inverse_metric_diag(&x)?);
            sqrt_det.push(space.sqrt_det_metric(&x)?);
            points.push(x);
            interior.push(inner);
        }
        let diff = axes.iter().map(DiffTable::build).collect();
        let pole_ghost = matches!(domain, DomainSpec::SphereCap { .. } | DomainSpec::EuclideanBall { .. })
            && dim == 3
            && shape[dim - 1] % 2 == 0;
        Ok(Grid { space, domain, axes, shape, strides, len, points, inv_diag, sqrt_det, interior, pole_ghost, diff })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.space.dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn node_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..self.dim() {
            idx += multi[a] * self.strides[a];
        }
        idx
    }

    pub fn multi_index(&self, idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0usize; MAX_DIM];
        for a in 0..self.dim() {
            m[a] = (idx / self.strides[a]) % self.shape[a];
        }
        m
    }

    /// Faces that form the domain boundary: the outer radial face for polar
    /// domains, all faces for boxes.
    pub fn boundary_faces(&self) -> Vec<FaceId> {
        match self.domain {
            DomainSpec::SphereCap { .. } | DomainSpec::EuclideanBall { .. } => {
                vec![FaceId { axis: 0, upper: true }]
            }
            DomainSpec::BoxSubdomain { .. } => {
                let mut v = Vec::with_capacity(2 * self.dim());
                for axis in 0..self.dim() {
                    v.push(FaceId { axis, upper: false });
                    v.push(FaceId { axis, upper: true });
                }
                v
            }
        }
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len {
            return Err(Error::Shape(format!("field has {} values, grid has {} nodes", values.len(), self.len)));
        }
        Ok(())
    }

    fn apply_rows(&self, values: &[f64], axis: usize, rows: &[StencilRow]) -> Vec<f64> {
        let stride = self.strides[axis];
        let dim_len = self.shape[axis];
        (0..self.len)
            .into_par_iter()
            .map(|idx| {
                let j = (idx / stride) % dim_len;
                let base = idx - j * stride;
                rows[j].apply(values, base, stride)
            })
            .collect()
    }

    /// Partial derivative of a nodal scalar array along one axis
    /// (`order` 1 or 2).
    pub fn axis_derivative(&self, values: &[f64], axis: usize, order: usize) -> Result<Vec<f64>> {
        self.check_len(values)?;
        if axis >= self.dim() {
            return Err(Error::Shape(format!("axis {axis} out of range for dimension {}", self.dim())));
        }
        match order {
            1 => Ok(self.apply_rows(values, axis, &self.diff[axis].first)),
            2 => Ok(self.apply_rows(values, axis, &self.diff[axis].second)),
            _ => Err(Error::Shape(format!("derivative order {order} unsupported"))),
        }
    }

    /// Mixed or repeated second partial derivative.
    pub fn partial_second(&self, values: &[f64], a: usize, b: usize) -> Result<Vec<f64>> {
        if a == b {
            self.axis_derivative(values, a, 2)
        } else {
            let da = self.axis_derivative(values, a, 1)?;
            self.axis_derivative(&da, b, 1)
        }
    }

    /// Value of a nodal array extrapolated onto a face, indexed by the face's
    /// node ordering.
    pub fn face_restrict(&self, values: &[f64], face: FaceId) -> Result<Vec<f64>> {
        self.check_len(values)?;
        let row = if face.upper { &self.diff[face.axis].restrict_upper } else { &self.diff[face.axis].restrict_lower };
        if row.is_empty() {
            return Err(Error::Precondition(format!("axis {} is periodic and has no faces", face.axis)));
        }
        let stride = self.strides[face.axis];
        Ok(self.face_map(face.axis, |base| {
            let mut acc = 0.0;
            for &(k, w) in row {
                acc += w * values[base + k * stride];
            }
            acc
        }))
    }

    /// Coordinate partial along `face.axis` evaluated at the face (one-sided).
    pub fn face_normal_partial(&self, values: &[f64], face: FaceId) -> Result<Vec<f64>> {
        self.check_len(values)?;
        let row = if face.upper { &self.diff[face.axis].derive_upper } else { &self.diff[face.axis].derive_lower };
        let row = row
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("axis {} is periodic and has no faces", face.axis)))?;
        let stride = self.strides[face.axis];
        Ok(self.face_map(face.axis, |base| row.apply(values, base, stride)))
    }

    /// Applies `f(base)` at every face node, where `base` is the flat index
    /// of the node with the face-axis slot set to zero; output is in face
    /// node order.
    fn face_map(&self, axis: usize, f: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
        let n = self.dim();
        let flen: usize = (0..n).filter(|&a| a != axis).map(|a| self.shape[a]).product();
        (0..flen)
            .into_par_iter()
            .map(|fidx| {
                let mut rem = fidx;
                let mut base = 0usize;
                for a in (0..n).rev() {
                    if a == axis {
                        continue;
                    }
                    let j = rem % self.shape[a];
                    rem /= self.shape[a];
                    base += j * self.strides[a];
                }
                f(base)
            })
            .collect()
    }

    /// Per-node 1-D quadrature weight product (chart measure only, no metric
    /// factor).
    fn chart_weight(&self, idx: usize) -> f64 {
        let mut w = 1.0;
        for a in 0..self.dim() {
            let j = (idx / self.strides[a]) % self.shape[a];
            w *= self.diff[a].quad[j];
        }
        w
    }

    /// True when `axis` continues through a chart pole at the given end, so
    /// derivative rows there can stay centered instead of one-sided. The
    /// radial axis has a pole at its lower end, the polar angle at both.
    fn pole_end(&self, axis: usize, upper: bool) -> bool {
        self.pole_ghost && ((axis == 0 && !upper) || axis == 1)
    }

    /// Sign a chart tensor component picks up under the pole identification
    /// used for ghost values on `axis`. The radial pole identifies
    /// (r, th, ph) with (-r, pi - th, ph + pi); the polar-angle ends identify
    /// (r, th, ph) with (r, -th, ph + pi) and (r, 2 pi - th, ph + pi). Each
    /// component slot on a reflected coordinate flips the sign once.
    pub fn pole_parity(&self, axis: usize, comp: &[usize]) -> f64 {
        let flip: [bool; 3] = match axis {
            0 => [true, true, false],
            1 => [false, true, false],
            _ => [false; 3],
        };
        comp.iter().fold(1.0, |s, &c| if c < 3 && flip[c] { -s } else { s })
    }

    /// Node holding the ghost value `m` layers past the `upper` end of
    /// `axis`: the image of the out-of-range index under the pole
    /// identification (reflected own-axis slot, antipodal partner angles).
    fn pole_partner(&self, idx: usize, axis: usize, upper: bool, m: usize) -> usize {
        let mut mi = self.multi_index(idx);
        mi[axis] = if upper { self.shape[axis] - m } else { m - 1 };
        if axis == 0 {
            mi[1] = self.shape[1] - 1 - mi[1];
        }
        mi[2] = (mi[2] + self.shape[2] / 2) % self.shape[2];
        self.node_index(&mi)
    }

    /// Partial derivative along `axis` of the nodal array holding the chart
    /// tensor component with index slots `comp` (empty for a scalar). Next
    /// to a chart pole the rows stay centered, reading ghost values through
    /// the pole identification; elsewhere this matches `axis_derivative`.
    /// One-sided closures survive only at true boundary ends.
    pub fn axis_derivative_comp(&self, values: &[f64], axis: usize, order: usize, comp: &[usize]) -> Result<Vec<f64>> {
        let parity = self.pole_parity(axis, comp);
        self.axis_derivative_parity(values, axis, order, parity)
    }

    /// Same as [`Grid::axis_derivative_comp`] with the reflection parity
    /// supplied directly, for arrays that are not plain tensor components
    /// (density-weighted fluxes and similar products).
    pub fn axis_derivative_parity(&self, values: &[f64], axis: usize, order: usize, parity: f64) -> Result<Vec<f64>> {
        self.check_len(values)?;
        if axis >= self.dim() {
            return Err(Error::Shape(format!("axis {axis} out of range for dimension {}", self.dim())));
        }
        let low = self.pole_end(axis, false);
        let high = self.pole_end(axis, true);
        if !low && !high {
            return self.axis_derivative(values, axis, order);
        }
        let rows = match order {
            1 => &self.diff[axis].first,
            2 => &self.diff[axis].second,
            _ => return Err(Error::Shape(format!("derivative order {order} unsupported"))),
        };
        let h = self.axes[axis].spacing;
        let offsets: Vec<f64> = (-3..=3).map(|k| k as f64 * h).collect();
        let wc = fd_weights(&offsets, 0.0, 2).swap_remove(order);
        let n_axis = self.shape[axis];
        let stride = self.strides[axis];
        let out = (0..self.len)
            .into_par_iter()
            .map(|idx| {
                let j = (idx / stride) % n_axis;
                let ghost_low = low && j < 3;
                let ghost_high = high && j + 4 > n_axis;
                if !ghost_low && !ghost_high {
                    return rows[j].apply(values, idx - j * stride, stride);
                }
                let base = idx - j * stride;
                let v0 = values[idx];
                let mut acc = 0.0;
                for (t, off) in (-3i64..=3).enumerate() {
                    let jj = j as i64 + off;
                    let v = if jj < 0 {
                        parity * values[self.pole_partner(idx, axis, false, (-jj) as usize)]
                    } else if jj >= n_axis as i64 {
                        parity * values[self.pole_partner(idx, axis, true, (jj + 1 - n_axis as i64) as usize)]
                    } else {
                        values[base + jj as usize * stride]
                    };
                    acc += wc[t] * (v - v0);
                }
                acc
            })
            .collect();
        Ok(out)
    }

    /// Matrix row of the order-1 [`Grid::axis_derivative_parity`] stencil at
    /// one node: `(column, weight)` pairs over the nodal array, with the
    /// reflection sign already folded into ghost columns. Sparse operators
    /// assembled from these rows agree with the applied stencils to roundoff.
    pub(crate) fn derivative_row_parity(&self, idx: usize, axis: usize, parity: f64) -> Vec<(usize, f64)> {
        let n_axis = self.shape[axis];
        let stride = self.strides[axis];
        let j = (idx / stride) % n_axis;
        let ghost_low = self.pole_end(axis, false) && j < 3;
        let ghost_high = self.pole_end(axis, true) && j + 4 > n_axis;
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);
        fn push(row: &mut Vec<(usize, f64)>, col: usize, w: f64) {
            if let Some(e) = row.iter_mut().find(|e| e.0 == col) {
                e.1 += w;
            } else {
                row.push((col, w));
            }
        }
        let base = idx - j * stride;
        if !ghost_low && !ghost_high {
            let r = &self.diff[axis].first[j];
            let mut wsum = 0.0;
            for &(k, w) in &r.terms {
                push(&mut row, base + k * stride, w);
                wsum += w;
            }
            push(&mut row, base + r.center * stride, -wsum);
            return row;
        }
        let h = self.axes[axis].spacing;
        let offsets: Vec<f64> = (-3..=3).map(|k| k as f64 * h).collect();
        let wc = fd_weights(&offsets, 0.0, 2).swap_remove(1);
        for (t, off) in (-3i64..=3).enumerate() {
            let jj = j as i64 + off;
            if jj < 0 {
                push(&mut row, self.pole_partner(idx, axis, false, (-jj) as usize), parity * wc[t]);
            } else if jj >= n_axis as i64 {
                push(&mut row, self.pole_partner(idx, axis, true, (jj + 1 - n_axis as i64) as usize), parity * wc[t]);
            } else {
                push(&mut row, base + jj as usize * stride, wc[t]);
            }
            push(&mut row, idx, -wc[t]);
        }
        row.retain(|e| e.1 != 0.0);
        row
    }

    /// Face-extrapolation row for one boundary face: `(layer, weight)` pairs
    /// along the face axis, applied at `base + layer * stride(face.axis)`.
    pub(crate) fn restrict_row(&self, face: FaceId) -> Result<&[(usize, f64)]> {
        let row =
            if face.upper { &self.diff[face.axis].restrict_upper } else { &self.diff[face.axis].restrict_lower };
        if row.is_empty() {
            return Err(Error::Precondition(format!("axis {} is periodic and has no faces", face.axis)));
        }
        Ok(row)
    }

    pub(crate) fn axis_stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Flat indices with the `axis` slot zeroed, one per face node, in the
    /// same order [`Grid::face_restrict`] emits values.
    pub(crate) fn face_bases(&self, axis: usize) -> Vec<usize> {
        let n = self.dim();
        let flen: usize = (0..n).filter(|&a| a != axis).map(|a| self.shape[a]).product();
        (0..flen)
            .map(|fidx| {
                let mut rem = fidx;
                let mut base = 0usize;
                for a in (0..n).rev() {
                    if a == axis {
                        continue;
                    }
                    let j = rem % self.shape[a];
                    rem /= self.shape[a];
                    base += j * self.strides[a];
                }
                base
            })
            .collect()
    }
}

fn polar_axes(dim: usize, r_max: f64, nodes: usize) -> Result<Vec<Axis>> {
    use std::f64::consts::PI;
    let mut v = vec![Axis::uniform(0.0, r_max, nodes, false, 0)?];
    for a in 1..dim - 1 {
        v.push(Axis::uniform(0.0, PI, nodes, false, a)?);
    }
    v.push(Axis::uniform(0.0, 2.0 * PI, nodes, true, dim - 1)?);
    Ok(v)
}

/// Quadrature rule over one boundary face, weights including the induced
/// area density of the background metric.
#[derive(Debug, Clone)]
pub struct SurfaceRule {
    pub face: FaceId,
    /// Coordinate value of the face along its axis.
    pub coordinate: f64,
    /// Face axes in original axis order (the grid's axes minus `face.axis`).
    pub axes: Vec<Axis>,
    pub shape: Vec<usize>,
    pub len: usize,
    /// Chart coordinates of the face nodes (full-dimension points).
    pub nodes: Vec<Vector>,
    pub weights: Vec<f64>,
    tables: Vec<DiffTable>,
    strides: Vec<usize>,
    /// True when the face's polar-angle axis continues through chart poles
    /// (radial face of a 3-d polar grid with even azimuthal count).
    pole_ghost: bool,
}

impl SurfaceRule {
    /// Tangential partial derivative on the face along `axes[t]`.
    pub fn axis_derivative(&self, values: &[f64], t: usize, order: usize) -> Result<Vec<f64>> {
        if values.len() != self.len {
            return Err(Error::Shape(format!("surface field has {} values, face has {}", values.len(), self.len)));
        }
        let rows = match order {
            1 => &self.tables[t].first,
            2 => &self.tables[t].second,
            _ => return Err(Error::Shape(format!("derivative order {order} unsupported"))),
        };
        let stride = self.strides[t];
        let dim_len = self.shape[t];
        Ok((0..self.len)
            .into_par_iter()
            .map(|idx| {
                let j = (idx / stride) % dim_len;
                let base = idx - j * stride;
                rows[j].apply(values, base, stride)
            })
            .collect())
    }

    /// Tangential derivative of the face array holding the chart tensor
    /// component with full-chart index slots `comp` (empty for a scalar).
    /// On the radial face of a polar grid the polar-angle rows stay centered
    /// through the poles, reading ghost values at antipodal azimuth; each
    /// component slot equal to the polar-angle axis flips the ghost sign.
    pub fn axis_derivative_comp(&self, values: &[f64], t: usize, order: usize, comp: &[usize]) -> Result<Vec<f64>> {
        let parity = comp.iter().fold(1.0, |s, &c| if c == 1 { -s } else { s });
        self.axis_derivative_parity(values, t, order, parity)
    }

    /// Same as [`SurfaceRule::axis_derivative_comp`] with the reflection
    /// parity supplied directly, for density-weighted products.
    pub fn axis_derivative_parity(&self, values: &[f64], t: usize, order: usize, parity: f64) -> Result<Vec<f64>> {
        if !(self.pole_ghost && t == 0) {
            return self.axis_derivative(values, t, order);
        }
        if values.len() != self.len {
            return Err(Error::Shape(format!("surface field has {} values, face has {}", values.len(), self.len)));
        }
        let rows = match order {
            1 => &self.tables[0].first,
            2 => &self.tables[0].second,
            _ => return Err(Error::Shape(format!("derivative order {order} unsupported"))),
        };
        let h = self.axes[0].spacing;
        let offsets: Vec<f64> = (-3..=3).map(|k| k as f64 * h).collect();
        let wc = fd_weights(&offsets, 0.0, 2).swap_remove(order);
        let n_axis = self.shape[0];
        let n_phi = self.shape[1];
        let stride = self.strides[0];
        Ok((0..self.len)
            .into_par_iter()
            .map(|idx| {
                let j = idx / stride;
                if j >= 3 && j + 4 <= n_axis {
                    return rows[j].apply(values, idx - j * stride, stride);
                }
                let k_phi = idx % n_phi;
                let partner_phi = (k_phi + n_phi / 2) % n_phi;
                let v0 = values[idx];
                let mut acc = 0.0;
                for (s, off) in (-3i64..=3).enumerate() {
                    let jj = j as i64 + off;
                    let v = if jj < 0 {
                        parity * values[((-jj - 1) as usize) * stride + partner_phi]
                    } else if jj >= n_axis as i64 {
                        parity * values[(2 * n_axis - 1 - jj as usize) * stride + partner_phi]
                    } else {
                        values[jj as usize * stride + k_phi]
                    };
                    acc += wc[s] * (v - v0);
                }
                acc
            })
            .collect())
    }
}

/// Volume and surface quadrature for a grid.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Per-node volume weight, including sqrt(det g).
    pub volume: Vec<f64>,
    /// One rule per boundary face, in `Grid::boundary_faces` order.
    pub surfaces: Vec<SurfaceRule>,
}

/// Builds the volume and boundary-face quadrature of a grid.
pub fn quadrature(grid: &Grid) -> Result<QuadratureRule> {
    let volume: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|idx| grid.chart_weight(idx) * grid.sqrt_det[idx])
        .collect();
    let mut surfaces = Vec::new();
    for face in grid.boundary_faces() {
        surfaces.push(build_surface_rule(grid, face)?);
    }
    Ok(QuadratureRule { volume, surfaces })
}

fn build_surface_rule(grid: &Grid, face: FaceId) -> Result<SurfaceRule> {
    let n = grid.dim();
    let ax = &grid.axes[face.axis];
    if ax.periodic {
        return Err(Error::Precondition(format!("axis {} is periodic and has no faces", face.axis)));
    }
    let coordinate = if face.upper { ax.upper } else { ax.lower };
    let axes: Vec<Axis> = (0..n).filter(|&a| a != face.axis).map(|a| grid.axes[a].clone()).collect();
    let shape: Vec<usize> = axes.iter().map(|a| a.len).collect();
    let strides = strides_for(&shape);
    let len: usize = shape.iter().product();
    let tables: Vec<DiffTable> = axes.iter().map(DiffTable::build).collect();
    let mut nodes = Vec::with_capacity(len);
    let mut weights = Vec::with_capacity(len);
    for fidx in 0..len {
        let mut x = [0.0; MAX_DIM];
        x[face.axis] = coordinate;
        let mut w = 1.0;
        let mut rem = fidx;
        for t in (0..axes.len()).rev() {
            let j = rem % shape[t];
            rem /= shape[t];
            let full_axis = if t < face.axis { t } else { t + 1 };
            x[full_axis] = axes[t].node(j);
            w *= tables[t].quad[j];
        }
        // Induced area density: product of the background scale factors of
        // the tangential axes.
        let d = grid.space.metric_diag(&x)?;
        let mut det = 1.0;
        for a in 0..n {
            if a != face.axis {
                det *= d[a];
            }
        }
        nodes.push(x);
        weights.push(w * det.sqrt());
    }
    let pole_ghost = matches!(grid.domain, DomainSpec::SphereCap { .. } | DomainSpec::EuclideanBall { .. })
        && n == 3
        && face.axis == 0
        && shape[1] % 2 == 0;
    Ok(SurfaceRule { face, coordinate, axes, shape, len, nodes, weights, tables, strides, pole_ghost })
}

/// Deterministic volume integral of a nodal scalar array.
pub fn integrate_volume(rule: &QuadratureRule, values: &[f64]) -> Result<f64> {
    if values.len() != rule.volume.len() {
        return Err(Error::Shape(format!(
            "field has {} values, rule has {} weights",
            values.len(),
            rule.volume.len()
        )));
    }
    let prod: Vec<f64> = rule.volume.par_iter().zip(values.par_iter()).map(|(w, v)| w * v).collect();
    Ok(pairwise_sum(&prod))
}

/// Deterministic surface integral of a face scalar array.
pub fn integrate_surface(surf: &SurfaceRule, values: &[f64]) -> Result<f64> {
    if values.len() != surf.len {
        return Err(Error::Shape(format!("surface field has {} values, face has {}", values.len(), surf.len)));
    }
    let prod: Vec<f64> = surf.weights.par_iter().zip(values.par_iter()).map(|(w, v)| w * v).collect();
    Ok(pairwise_sum(&prod))
}

/// Symmetric 2-tensor field; only components with i <= j are stored,
/// each as a contiguous nodal array.
#[derive(Debug, Clone)]
pub struct SymTensorField {
    pub dim: usize,
    pub n_nodes: usize,
    /// True when the field is a full metric (validated positive definite).
    pub is_metric: bool,
    comps: Vec<Vec<f64>>,
}

impl SymTensorField {
    pub fn zeros(grid: &Grid) -> Self {
        let dim = grid.dim();
        SymTensorField {
            dim,
            n_nodes: grid.len(),
            is_metric: false,
            comps: vec![vec![0.0; grid.len()]; sym_count(dim)],
        }
    }

    /// Builds a field from a per-(node, i, j) closure.
    pub fn from_fn(grid: &Grid, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Self {
        let dim = grid.dim();
        let comps: Vec<Vec<f64>> = (0..sym_count(dim))
            .map(|c| {
                let (i, j) = unpack_sym(dim, c);
                (0..grid.len()).into_par_iter().map(|node| f(node, i, j)).collect()
            })
            .collect();
        SymTensorField { dim, n_nodes: grid.len(), is_metric: false, comps }
    }

    /// The background metric as a field, flagged as a metric.
    pub fn background_metric(grid: &Grid) -> Self {
        let mut g = Self::from_fn(grid, |node, i, j| {
            if i == j {
                1.0 / grid.inv_diag[node][i]
            } else {
                0.0
            }
        });
        g.is_metric = true;
        g
    }

    /// Validates positive definiteness at every node and flags the field as
    /// a metric.
    pub fn into_metric(mut self, grid: &Grid) -> Result<Self> {
        let n = self.dim;
        let bad = (0..self.n_nodes)
            .into_par_iter()
            .find_first(|&node| {
                let mut a = [0.0; MAX_DIM * MAX_DIM];
                for i in 0..n {
                    for j in 0..n {
                        a[i * n + j] = self.get(node, i, j);
                    }
                }
                !is_positive_definite(&a[..n * n], n)
            });
        if let Some(node) = bad {
            return Err(Error::Metric {
                node,
                detail: format!("tensor at chart point {:?} is not positive definite", &grid.points[node][..n]),
            });
        }
        self.is_metric = true;
        Ok(self)
    }

    pub fn get(&self, node: usize, i: usize, j: usize) -> f64 {
        self.comps[sym_index(self.dim, i, j)][node]
    }

    pub fn set(&mut self, node: usize, i: usize, j: usize, v: f64) {
        self.comps[sym_index(self.dim, i, j)][node] = v;
    }

    pub fn component(&self, i: usize, j: usize) -> &[f64] {
        &self.comps[sym_index(self.dim, i, j)]
    }

    pub fn component_mut(&mut self, i: usize, j: usize) -> &mut Vec<f64> {
        let c = sym_index(self.dim, i, j);
        &mut self.comps[c]
    }

    /// self + s * other, component-wise.
    pub fn add_scaled(&self, other: &SymTensorField, s: f64) -> Result<SymTensorField> {
        if self.dim != other.dim || self.n_nodes != other.n_nodes {
            return Err(Error::Shape("tensor fields live on different grids".into()));
        }
        let comps = self
            .comps
            .iter()
            .zip(other.comps.iter())
            .map(|(a, b)| a.par_iter().zip(b.par_iter()).map(|(x, y)| x + s * y).collect())
            .collect();
        Ok(SymTensorField { dim: self.dim, n_nodes: self.n_nodes, is_metric: false, comps })
    }

    pub fn scaled(&self, s: f64) -> SymTensorField {
        let comps = self.comps.iter().map(|a| a.par_iter().map(|x| s * x).collect()).collect();
        SymTensorField { dim: self.dim, n_nodes: self.n_nodes, is_metric: false, comps }
    }
}

pub fn unpack_sym(n: usize, mut c: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - i;
        if c < row {
            return (i, i + c);
        }
        c -= row;
    }
    unreachable!("component index out of range");
}

/// Rank-3 field storing nabla_k h_ij, symmetric in (i, j).
#[derive(Debug)]
pub struct Rank3Field {
    pub dim: usize,
    pub n_nodes: usize,
    comps: Vec<Vec<f64>>,
}

impl Rank3Field {
    pub fn get(&self, node: usize, k: usize, i: usize, j: usize) -> f64 {
        self.comps[k * sym_count(self.dim) + sym_index(self.dim, i, j)][node]
    }

    pub fn component(&self, k: usize, i: usize, j: usize) -> &[f64] {
        &self.comps[k * sym_count(self.dim) + sym_index(self.dim, i, j)]
    }
}

/// Coordinate gradient of a scalar (equals its covariant derivative).
pub fn scalar_gradient(grid: &Grid, f: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..grid.dim()).map(|a| grid.axis_derivative_comp(f, a, 1, &[])).collect()
}

/// Covariant Hessian of a scalar, packed symmetric components.
pub fn scalar_hessian(grid: &Grid, f: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = grid.dim();
    let grad = scalar_gradient(grid, f)?;
    let mut out = Vec::with_capacity(sym_count(n));
    for c in 0..sym_count(n) {
        let (i, j) = unpack_sym(n, c);
        let d = if i == j {
            grid.axis_derivative_comp(f, i, 2, &[])?
        } else {
            grid.axis_derivative_comp(&grad[j], i, 1, &[j])?
        };
        out.push(d);
    }
    // Christoffel correction: -Gamma^k_ij d_k f, node-parallel.
    let grad = &grad;
    let corr: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|node| {
            let gamma = grid.space.christoffel_at(&grid.points[node]).expect("grid nodes are valid");
            (0..sym_count(n)).map(move |c| {
                let (i, j) = unpack_sym(n, c);
                let mut s = 0.0;
                for k in 0..n {
                    s += gamma[k][i][j] * grad[k][node];
                }
                s
            })
        })
        .collect();
    let nc = sym_count(n);
    out.par_iter_mut().enumerate().for_each(|(c, field)| {
        for node in 0..grid.len() {
            field[node] -= corr[node * nc + c];
        }
    });
    Ok(out)
}

/// Covariant derivative of a symmetric 2-tensor:
/// nabla_k h_ij = d_k h_ij - Gamma^l_ki h_lj - Gamma^l_kj h_il.
pub fn covariant_derivative(grid: &Grid, h: &SymTensorField) -> Result<Rank3Field> {
    let n = grid.dim();
    if h.n_nodes != grid.len() || h.dim != n {
        return Err(Error::Shape("tensor field does not match grid".into()));
    }
    let nc = sym_count(n);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(n * nc);
    for k in 0..n {
        for c in 0..nc {
            let (i, j) = unpack_sym(n, c);
            comps.push(grid.axis_derivative_comp(h.component(i, j), k, 1, &[i, j])?);
        }
    }
    // Node-major corrections, then a slot-parallel combine.
    let corr: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|node| {
            let gamma = grid.space.christoffel_at(&grid.points[node]).expect("grid nodes are valid");
            (0..n * nc).map(move |slot| {
                let k = slot / nc;
                let (i, j) = unpack_sym(n, slot % nc);
                let mut s = 0.0;
                for l in 0..n {
                    s += gamma[l][k][i] * h.get(node, l, j) + gamma[l][k][j] * h.get(node, i, l);
                }
                s
            })
        })
        .collect();
    let slots = n * nc;
    comps.par_iter_mut().enumerate().for_each(|(slot, field)| {
        for node in 0..grid.len() {
            field[node] -= corr[node * slots + slot];
        }
    });
    Ok(Rank3Field { dim: n, n_nodes: grid.len(), comps })
}

/// Covariant derivative of a one-form: out[a*n + b] = nabla_a w_b.
pub fn oneform_covariant_derivative(grid: &Grid, w: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = grid.dim();
    if w.len() != n {
        return Err(Error::Shape(format!("one-form has {} components, need {n}", w.len())));
    }
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            out.push(grid.axis_derivative_comp(&w[b], a, 1, &[b])?);
        }
    }
    let corr: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|node| {
            let gamma = grid.space.christoffel_at(&grid.points[node]).expect("grid nodes are valid");
            (0..n * n).map(move |slot| {
                let (a, b) = (slot / n, slot % n);
                let mut s = 0.0;
                for m in 0..n {
                    s += gamma[m][a][b] * w[m][node];
                }
                s
            })
        })
        .collect();
    let slots = n * n;
    out.par_iter_mut().enumerate().for_each(|(slot, field)| {
        for node in 0..grid.len() {
            field[node] -= corr[node * slots + slot];
        }
    });
    Ok(out)
}

/// Pointwise trace tr h = g^{ij} h_ij (background metric).
pub fn tensor_trace(grid: &Grid, h: &SymTensorField) -> Vec<f64> {
    let n = grid.dim();
    (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let mut s = 0.0;
            for i in 0..n {
                s += grid.inv_diag[node][i] * h.get(node, i, i);
            }
            s
        })
        .collect()
}

/// Pointwise squared frame norm |h|^2 = g^{ik} g^{jl} h_ij h_kl.
pub fn tensor_norm_sq(grid: &Grid, h: &SymTensorField) -> Vec<f64> {
    let n = grid.dim();
    (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let inv = &grid.inv_diag[node];
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = h.get(node, i, j);
                    s += inv[i] * inv[j] * v * v;
                }
            }
            s
        })
        .collect()
}

/// Pointwise inner product <a, b> = g^{ik} g^{jl} a_ij b_kl.
pub fn tensor_inner(grid: &Grid, a: &SymTensorField, b: &SymTensorField) -> Vec<f64> {
    let n = grid.dim();
    (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let inv = &grid.inv_diag[node];
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += inv[i] * inv[j] * a.get(node, i, j) * b.get(node, i, j);
                }
            }
            s
        })
        .collect()
}

/// Pointwise squared frame norm of a rank-3 field,
/// |T|^2 = g^{km} g^{ip} g^{jq} T_kij T_mpq.
pub fn rank3_norm_sq(grid: &Grid, t: &Rank3Field) -> Vec<f64> {
    let n = grid.dim();
    (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let inv = &grid.inv_diag[node];
            let mut s = 0.0;
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        let v = t.get(node, k, i, j);
                        s += inv[k] * inv[i] * inv[j] * v * v;
                    }
                }
            }
            s
        })
        .collect()
}

/// Norm summary of a perturbation and its covariant derivative.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GridNorms {
    pub c0: f64,
    pub c1: f64,
    pub l2_h: f64,
    pub l2_grad_h: f64,
    pub l2_tr: f64,
    pub l2_grad_tr: f64,
}

/// Max and quadrature norms of h, nabla h, tr h, nabla tr h. C-norms are
/// nodal max norms in the background frame; C1 = C0 + max |nabla h|.
pub fn grid_norms(grid: &Grid, rule: &QuadratureRule, h: &SymTensorField, grad: &Rank3Field) -> Result<GridNorms> {
    let h2 = tensor_norm_sq(grid, h);
    let g2 = rank3_norm_sq(grid, grad);
    let tr = tensor_trace(grid, h);
    let tr_grad = scalar_gradient(grid, &tr)?;
    let trg2: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let mut s = 0.0;
            for k in 0..grid.dim() {
                s += grid.inv_diag[node][k] * tr_grad[k][node] * tr_grad[k][node];
            }
            s
        })
        .collect();
    let max_of = |v: &[f64]| v.iter().cloned().fold(0.0f64, f64::max);
    let c0 = max_of(&h2).sqrt();
    let c1 = c0 + max_of(&g2).sqrt();
    let tr2: Vec<f64> = tr.par_iter().map(|v| v * v).collect();
    Ok(GridNorms {
        c0,
        c1,
        l2_h: integrate_volume(rule, &h2)?.max(0.0).sqrt(),
        l2_grad_h: integrate_volume(rule, &g2)?.max(0.0).sqrt(),
        l2_tr: integrate_volume(rule, &tr2)?.max(0.0).sqrt(),
        l2_grad_tr: integrate_volume(rule, &trg2)?.max(0.0).sqrt(),
    })
}

/// Writes named nodal columns (plus chart coordinates) to CSV.
pub fn export_csv(path: &std::path::Path, grid: &Grid, columns: &[(&str, &[f64])]) -> Result<()> {
    let n = grid.dim();
    for (name, col) in columns {
        if col.len() != grid.len() {
            return Err(Error::Shape(format!("column {name} has {} values, grid has {}", col.len(), grid.len())));
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let axis_names = ["x0", "x1", "x2", "x3", "x4"];
    let mut header: Vec<&str> = axis_names[..n].to_vec();
    header.extend(columns.iter().map(|(name, _)| *name));
    writeln!(out, "{}", header.join(","))?;
    for node in 0..grid.len() {
        let mut fields: Vec<String> = (0..n).map(|a| format!("{:?}", grid.points[node][a])).collect();
        fields.extend(columns.iter().map(|(_, col)| format!("{:?}", col[node])));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::StaticPotential;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cap_grid(delta: f64, nodes: usize) -> Grid {
        Grid::new(DomainSpec::sphere_cap(delta).unwrap(), 3, nodes).unwrap()
    }

    #[test]
    fn grid_rejects_too_few_nodes() {
        let err = Grid::new(DomainSpec::sphere_cap(1.0).unwrap(), 3, 8).unwrap_err();
        assert!(matches!(err, Error::GridSize { nodes: 8, .. }));
    }

    #[test]
    fn hemisphere_volume_and_area_match_closed_forms() {
        let grid = cap_grid(FRAC_PI_2, 48);
        let rule = quadrature(&grid).unwrap();
        let ones = vec![1.0; grid.len()];
        let vol = integrate_volume(&rule, &ones).unwrap();
        assert!((vol - PI * PI).abs() < 1e-8, "volume {vol}");
        let surf = &rule.surfaces[0];
        let area = integrate_surface(surf, &vec![1.0; surf.len]).unwrap();
        assert!((area - 4.0 * PI).abs() < 1e-8, "area {area}");

        // Radial profile integral: cos r over the hemisphere cap.
        let space = grid.space;
        let cosr: Vec<f64> = grid.points.iter().map(|x| StaticPotential::SphereCos.value_at(&space, x).unwrap()).collect();
        let v = integrate_volume(&rule, &cosr).unwrap();
        assert!((v - 4.0 * PI / 3.0).abs() < 1e-9, "integral {v}");
    }

    #[test]
    fn ball_boundary_area_matches_closed_form() {
        let grid = Grid::new(DomainSpec::euclidean_ball(1.0).unwrap(), 3, 48).unwrap();
        let rule = quadrature(&grid).unwrap();
        let surf = &rule.surfaces[0];
        let area = integrate_surface(surf, &vec![1.0; surf.len]).unwrap();
        assert!((area - 4.0 * PI).abs() < 1e-8, "area {area}");
        let ones = vec![1.0; grid.len()];
        let vol = integrate_volume(&rule, &ones).unwrap();
        assert!((vol - 4.0 * PI / 3.0).abs() < 1e-8, "volume {vol}");
    }

    #[test]
    fn box_quadrature_exact_on_cubics() {
        let dom = DomainSpec::cartesian_box(&[0.8, 0.5, 1.2]).unwrap();
        let grid = Grid::new(dom, 3, 12).unwrap();
        let rule = quadrature(&grid).unwrap();
        let f: Vec<f64> = grid
            .points
            .iter()
            .map(|p| {
                let (x, y, z) = (p[0], p[1], p[2]);
                x * x * x - 2.0 * x * x * y + 4.0 * x * y * z + z * z * z - y + 7.0
            })
            .collect();
        // Odd powers vanish over the symmetric box; only the constant
        // survives: 7 * vol.
        let vol = 2.0f64.powi(3) * 0.8 * 0.5 * 1.2;
        let exact = 7.0 * vol;
        let got = integrate_volume(&rule, &f).unwrap();
        assert!((got - exact).abs() < 1e-13 * exact.abs(), "{got} vs {exact}");

        // Even quartic is NOT required to be exact, but degree <= 5 is:
        let f5: Vec<f64> = grid.points.iter().map(|p| p[0].powi(5) - 3.0 * p[1].powi(3) * p[2] * p[2]).collect();
        let got5 = integrate_volume(&rule, &f5).unwrap();
        assert!(got5.abs() < 1e-12, "{got5}");
    }

    #[test]
    fn derivatives_exact_on_constants_and_flat_tensors() {
        let grid = cap_grid(1.0, 16);
        let c = vec![3.25; grid.len()];
        for a in 0..3 {
            let d = grid.axis_derivative(&c, a, 1).unwrap();
            assert!(d.iter().all(|&v| v == 0.0), "axis {a} not exactly zero");
        }

        let boxg = Grid::new(DomainSpec::cartesian_box(&[1.0, 1.0, 1.0]).unwrap(), 3, 12).unwrap();
        let h = SymTensorField::from_fn(&boxg, |_, i, j| (i + j) as f64 + 1.0);
        let grad = covariant_derivative(&boxg, &h).unwrap();
        for k in 0..3 {
            for i in 0..3 {
                for j in i..3 {
                    assert!(grad.component(k, i, j).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    /// Hessian of cos r on the unit sphere must be -(cos r) g; checks both
    /// the error size and the refinement order.
    #[test]
    fn hessian_of_cos_r_converges_at_high_order() {
        let mut errs = Vec::new();
        let grids = [16usize, 32, 64];
        for &ng in &grids {
            let grid = cap_grid(1.0, ng);
            let f: Vec<f64> = grid.points.iter().map(|x| x[0].cos()).collect();
            let hess = scalar_hessian(&grid, &f).unwrap();
            let mut emax = 0.0f64;
            for node in 0..grid.len() {
                for c in 0..sym_count(3) {
                    let (i, j) = unpack_sym(3, c);
                    let g = if i == j { 1.0 / grid.inv_diag[node][i] } else { 0.0 };
                    let expect = -grid.points[node][0].cos() * g;
                    // Frame-normalized error.
                    let scale = (grid.inv_diag[node][i] * grid.inv_diag[node][j]).sqrt();
                    emax = emax.max((hess[c][node] - expect).abs() * scale);
                }
            }
            errs.push(emax);
        }
        let h: Vec<f64> = grids.iter().map(|&n| 1.0 / n as f64).collect();
        let (slope, _) = crate::util::fitted_order(&h, &errs, 1e-14);
        assert!(slope >= 3.7, "order {slope}, errors {errs:?}");
        assert!(errs[2] < 1e-8, "finest error {}", errs[2]);
    }

    #[test]
    fn mixed_partials_commute_to_truncation() {
        let grid = Grid::new(DomainSpec::cartesian_box(&[1.0, 1.0, 1.0]).unwrap(), 3, 16).unwrap();
        let f: Vec<f64> = grid.points.iter().map(|p| (p[0] * 1.3).sin() * (p[1] * 0.7).cos() * p[2]).collect();
        let dxy = grid.partial_second(&f, 0, 1).unwrap();
        let dyx = grid.partial_second(&f, 1, 0).unwrap();
        let emax = dxy.iter().zip(&dyx).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(emax < 1e-8, "commutator {emax}");
    }

    #[test]
    fn metric_validation_rejects_indefinite_tensor() {
        let grid = cap_grid(1.0, 12);
        let h = SymTensorField::from_fn(&grid, |_, i, j| if i == j { -1.0 } else { 0.0 });
        assert!(matches!(h.into_metric(&grid), Err(Error::Metric { .. })));
        let g = SymTensorField::background_metric(&grid);
        assert!(g.clone().into_metric(&grid).is_ok());
        assert!(g.is_metric);
    }

    #[test]
    fn norms_of_scaled_background_metric() {
        let grid = Grid::new(DomainSpec::cartesian_box(&[1.0, 1.0, 1.0]).unwrap(), 3, 12).unwrap();
        let rule = quadrature(&grid).unwrap();
        let c = 0.37;
        let h = SymTensorField::background_metric(&grid).scaled(c);
        let grad = covariant_derivative(&grid, &h).unwrap();
        let norms = grid_norms(&grid, &rule, &h, &grad).unwrap();
        let vol = 8.0;
        assert!((norms.c0 - c * 3.0f64.sqrt()).abs() < 1e-12);
        assert!((norms.c1 - c * 3.0f64.sqrt()).abs() < 1e-12);
        assert!((norms.l2_h - (3.0 * c * c * vol).sqrt()).abs() < 1e-12);
        assert!((norms.l2_tr - (9.0 * c * c * vol).sqrt()).abs() < 1e-12);
        assert!(norms.l2_grad_h < 1e-13);

        // Homogeneity.
        let h2 = h.scaled(-2.0);
        let grad2 = covariant_derivative(&grid, &h2).unwrap();
        let n2 = grid_norms(&grid, &rule, &h2, &grad2).unwrap();
        assert!((n2.c0 - 2.0 * norms.c0).abs() < 1e-12);
        assert!((n2.l2_h - 2.0 * norms.l2_h).abs() < 1e-12);
    }

    #[test]
    fn face_restriction_recovers_smooth_traces() {
        let grid = cap_grid(1.0, 32);
        let f: Vec<f64> = grid.points.iter().map(|x| (x[0] * 1.7).cos() + x[0] * x[0]).collect();
        let face = FaceId { axis: 0, upper: true };
        let vals = grid.face_restrict(&f, face).unwrap();
        let expect = (1.0f64 * 1.7).cos() + 1.0;
        for v in &vals {
            assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
        }
        let dvals = grid.face_normal_partial(&f, face).unwrap();
        let dexpect = -(1.0f64 * 1.7).sin() * 1.7 + 2.0;
        for v in &dvals {
            assert!((v - dexpect).abs() < 1e-8, "{v} vs {dexpect}");
        }
    }

    #[test]
    fn surface_tangential_derivative_matches_closed_form() {
        let grid = cap_grid(FRAC_PI_2, 24);
        let rule = quadrature(&grid).unwrap();
        let surf = &rule.surfaces[0];
        // f(theta, phi) = cos(theta): d/dtheta = -sin(theta). One-sided rows
        // near the theta edges dominate the error at this resolution.
        let f: Vec<f64> = surf.nodes.iter().map(|x| x[1].cos()).collect();
        let df = surf.axis_derivative(&f, 0, 1).unwrap();
        for (v, x) in df.iter().zip(surf.nodes.iter()) {
            assert!((v + x[1].sin()).abs() < 1e-5, "{v} vs {}", -x[1].sin());
        }
    }

    #[test]
    fn integration_is_bit_identical_across_worker_counts() {
        let grid = cap_grid(1.0, 24);
        let rule = quadrature(&grid).unwrap();
        let f: Vec<f64> = grid.points.iter().map(|x| (x[0] + x[1]).sin() * (3.0 * x[2]).cos() + x[0]).collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let v = integrate_volume(&rule, &f).unwrap();
                let d = grid.axis_derivative(&f, 1, 1).unwrap();
                (v, d)
            })
        };
        let (v1, d1) = run(1);
        let (v4, d4) = run(4);
        assert_eq!(v1.to_bits(), v4.to_bits());
        assert_eq!(d1.len(), d4.len());
        for (a, b) in d1.iter().zip(&d4) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_export_roundtrips_values() {
        let grid = Grid::new(DomainSpec::cartesian_box(&[1.0, 1.0, 1.0]).unwrap(), 3, 12).unwrap();
        let f: Vec<f64> = grid.points.iter().map(|p| p[0] * 1.5 - p[2]).collect();
        let dir = std::env::temp_dir().join("rigidity-lab-test-csv");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("field.csv");
        export_csv(&path, &grid, &[("f", &f)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x0,x1,x2,f");
        for (node, line) in lines.enumerate() {
            let cols: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
            assert_eq!(cols[3].to_bits(), f[node].to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    /// Quadrature order on a smooth non-polynomial integrand over a cap.
    #[test]
    fn volume_integration_order_exceeds_threshold() {
        let exact = {
            // Reference by a fine 1-D radial quadrature of the closed-form
            // angular reduction: integrand depends on r only.
            let steps = 400_000;
            let delta = 1.0;
            let dt = delta / steps as f64;
            let mut s = 0.0;
            for k in 0..steps {
                let t = (k as f64 + 0.5) * dt;
                s += (2.5 * t).sin().exp() * t.sin() * t.sin() * dt;
            }
            4.0 * PI * s
        };
        let mut errs = Vec::new();
        let grids = [12usize, 24, 48];
        for &ng in &grids {
            let grid = cap_grid(1.0, ng);
            let rule = quadrature(&grid).unwrap();
            let f: Vec<f64> = grid.points.iter().map(|x| (2.5 * x[0]).sin().exp()).collect();
            errs.push((integrate_volume(&rule, &f).unwrap() - exact).abs());
        }
        let h: Vec<f64> = grids.iter().map(|&n| 1.0 / n as f64).collect();
        let (slope, _) = crate::util::fitted_order(&h, &errs, 1e-12);
        assert!(slope >= 3.7, "order {slope}, errors {errs:?}");
    }
}
