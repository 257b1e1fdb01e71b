use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("probe pair {index} is degenerate: {reason}")]
    DegeneratePair { index: usize, reason: String },

    #[error("singular diffusion matrix at {point:?} (inversion residual {residual:e})")]
    SingularDiffusion { point: Vec<f64>, residual: f64 },

    #[error("non-finite or exploding state at step {step} (|x| = {norm:e})")]
    BlowUp { step: usize, norm: f64 },

    #[error("drift `{label}` has no Jacobian; mollify it first or route through the transform")]
    MissingJacobian { label: String },

    #[error("quadrature rejected: {0}")]
    Quadrature(String),

    #[error("resolvent horizon too short: e^(-λT)(1+|x|max) = {bound:e} exceeds {tol:e}")]
    Truncation { bound: f64, tol: f64 },

    #[error("λ ladder exhausted without ‖Dψ‖ certificate below {gamma}: {trace}")]
    LadderExhausted { gamma: f64, trace: String },

    #[error("transform is not a contraction: certified ‖Dψ‖ bound {gamma} ≥ 1")]
    NotContraction { gamma: f64 },

    #[error("inverse iteration did not converge after {iterations} steps (residual {residual:e})")]
    InverseDiverged { iterations: usize, residual: f64 },

    #[error("point {point:?} lies outside the ψ cache box of radius {radius}")]
    OutsideCache { point: Vec<f64>, radius: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<FlowError>,
    },

    #[error("stability member n = {n} failed: {source}")]
    StabilityMember {
        n: usize,
        #[source]
        source: Box<FlowError>,
    },

    #[error("grid misalignment: {0}")]
    Grid(String),
}

impl FlowError {
    pub fn invalid(name: &str, reason: impl Into<String>) -> Self {
        FlowError::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(step: usize, source: FlowError) -> Self {
        FlowError::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
