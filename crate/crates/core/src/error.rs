use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("capacity exceeded: {what} has dimension {dimension}, cap is {cap}")]
    Capacity { what: String, dimension: u128, cap: usize },

    #[error("lattice dimension must be at least 1")]
    ZeroLatticeDim,

    #[error("boundary shell of radius 0 is not defined")]
    BoundaryRadiusZero,

    #[error("site {site} lies outside the window of radius {radius}")]
    SiteOutsideWindow { site: String, radius: usize },

    #[error("site {site} has {got} coordinates, expected {expected}")]
    SiteDimension { site: String, got: usize, expected: usize },

    #[error("duplicate site {0}")]
    DuplicateSite(String),

    #[error("factor at site {site} is {rows}x{cols}, expected {expected}x{expected}")]
    FactorDimension {
        site: String,
        rows: usize,
        cols: usize,
        expected: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("window mismatch: radius {left} vs {right}")]
    WindowMismatch { left: usize, right: usize },

    #[error("local dimension must be at least 2, got {0}")]
    LocalDim(usize),

    #[error("level {level} exceeds the available shells (max {max})")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("shell {level} is not supported on its boundary: site {site} is active")]
    SupportViolation { level: usize, site: String },

    #[error("duplicate shell at level {0}")]
    DuplicateShell(usize),

    #[error("superoperator flavors differ: {left} vs {right}")]
    FlavorMismatch { left: String, right: String },

    #[error("time must be finite and non-negative, got {0}")]
    InvalidTime(f64),

    #[error("step size must be finite and positive, got {0}")]
    InvalidStepSize(f64),

    #[error("operator is not self-adjoint: defect {defect:e}")]
    NotSelfAdjoint { defect: f64 },

    #[error("scattering block is not unitary: defect {defect:e}")]
    NotUnitary { defect: f64 },

    #[error("index ({i}, {j}) out of range for {channels} channels")]
    IndexOutOfRange { i: usize, j: usize, channels: usize },

    #[error("operation requires the {expected} scheme, got {got}")]
    SchemeMismatch { expected: String, got: String },

    #[error("{0} needs dense step matrices")]
    MatrixFree(&'static str),

    #[error("full noise-space state needs {slots} slots, cap is {cap}")]
    SlotCap { slots: usize, cap: usize },
}
