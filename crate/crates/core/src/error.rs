use alloc::string::String;

/// Errors raised by the registration core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("matrix is not a rigid transform (orthonormality error {0:e})")]
    NonRigidMatrix(f64),
    #[error("gimbal lock: |cos(ry)| = {0:e}")]
    GimbalLock(f64),
    #[error("phantom anatomy does not fit the grid: {0}")]
    GeometryOverflow(String),
    #[error("downsample factor {factor} does not divide dims {dims:?}")]
    IndivisibleDims { dims: [usize; 3], factor: usize },
    #[error("mask grid does not match volume grid")]
    GridMismatch,
    #[error("image dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 2], [usize; 2]),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at iteration {iteration}")]
    NonFiniteFault { iteration: usize },
    #[error("mask has no positive element")]
    EmptyMask,
    #[error("gradient component norm below 1e-12")]
    ZeroGradient,
    #[error("projected point falls off the detector")]
    OffDetector,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = core::result::Result<T, Error>;
