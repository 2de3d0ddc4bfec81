//! Shared error type for all fitting, simulation, and I/O stages.

use thiserror::Error;

/// Errors surfaced by dataset handling, basis construction, prior setup,
/// the variational engine, post-processing, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{column}` in {path}")]
    MissingColumn { column: String, path: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at cell {cell_id} (fov {fov_id}), column `{column}`")]
    NonFiniteValue {
        cell_id: u64,
        fov_id: u32,
        column: String,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("rho_decay must lie in (0,1), got {0}")]
    InvalidRho(f64),

    #[error("degenerate input for spatial autocorrelation: {0}")]
    DegenerateInput(String),

    #[error("invalid kernel shape: {0}")]
    InvalidShape(String),

    #[error("non-finite basis value at fov {fov_id}, cell {cell}, component {component}")]
    NonFiniteBasis {
        fov_id: u32,
        cell: usize,
        component: usize,
    },

    #[error("singular design in node initialization: {0}")]
    SingularDesign(String),

    #[error("non-positive Gamma rate for node {node}, fov {fov_id}: {rate}")]
    NonPositiveRate { node: usize, fov_id: u32, rate: f64 },

    #[error("singular FOV coupling matrix: {0}")]
    SingularPrior(String),

    #[error("Cholesky factorization failed: {0}")]
    CholeskyFailure(String),

    #[error("missing variational state for node {0}")]
    MissingNode(usize),

    #[error("gene subset must contain at least 2 genes, got {0}")]
    SubsetTooSmall(usize),

    #[error("edge ({i}, {j}) not selected in fov {fov_id}")]
    EdgeNotSelected { i: usize, j: usize, fov_id: u32 },

    #[error("requested {requested} cells per fov but candidate grid only has {available}")]
    TooManyCells { requested: usize, available: usize },

    #[error("precision surface not positive definite: {0}")]
    NonPd(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("node {node} failed: {source}")]
    NodeFailure {
        node: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
