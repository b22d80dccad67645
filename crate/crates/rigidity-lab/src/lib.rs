//! rigidity-lab: a numerical verification engine for curvature identities and
//! inequality chains on constant-curvature domains (spherical caps, Euclidean
//! balls, flat boxes).
//!
//! The library is organized in layers:
//!
//! - [`geometry`]: closed-form background spaces, domains, boundary geometry,
//!   static potentials.
//! - [`fields`]: discrete fields on tensor-product grids, covariant
//!   differentiation, quadrature.
//! - [`operators`]: exact curvature of perturbed metrics, linearized operators,
//!   expansion remainders.
//! - [`perturb`]: constraint projection and scalar-flat conformal families.
//! - [`eigen`]: radial Neumann eigenvalue solver for geodesic caps.
//! - [`harness`]: scenario runners, configuration, reports, CLI plumbing.

pub mod eigen;
pub mod fields;
pub mod geometry;
pub mod harness;
pub mod operators;
pub mod perturb;
pub mod util;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("coordinate {axis} = {value} outside the valid chart region: {reason}")]
    Domain { axis: &'static str, value: f64, reason: String },

    #[error("grid too small on axis {axis}: {nodes} nodes, minimum {min}")]
    GridSize { axis: usize, nodes: usize, min: usize },

    #[error("metric degenerate or not positive definite at node {node}: {detail}")]
    Metric { node: usize, detail: String },

    #[error("boundary frame degenerate at node {node}: {detail}")]
    Frame { node: usize, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{what} = {value:e} exceeds the validity range (limit {limit:e})")]
    Range { what: String, value: f64, limit: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
