use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("profile tail is not integrable in dimension {dim}: tail estimate {estimate:.3e}")]
    NonIntegrable { dim: usize, estimate: f64 },

    #[error("quadrature error estimate {estimate:.3e} exceeds tolerance {tolerance:.3e} ({context})")]
    QuadratureFailure {
        context: &'static str,
        estimate: f64,
        tolerance: f64,
    },

    #[error("momentum profile not resolved at the lattice edge: tail mass {tail:.3e} > {tolerance:.3e}")]
    NyquistUnderresolved { tail: f64, tolerance: f64 },

    #[error("wavevector {xi:?} is not on the frequency lattice")]
    OffLatticeFrequency { xi: [f64; 3] },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("response symbol margin {margin:.3e} below threshold {threshold:.3e}; Id - L2 near resonance")]
    ResonantSymbol { margin: f64, threshold: f64 },

    #[error("collinear wavevector pair: determinant {det:.3e} below threshold")]
    CollinearPair { det: f64 },

    #[error("estimated cost {estimated:.3e} flops exceeds the configured budget {budget:.3e}")]
    ComplexityGuard { estimated: f64, budget: f64 },

    #[error("NaN or Inf detected in ensemble values at step {step}")]
    NaNDetected { step: usize },

    #[error("box guard violated: travel distance {travel:.3e} exceeds allowed {allowed:.3e}")]
    BoxGuardViolated { travel: f64, allowed: f64 },

    #[error("no contraction: residual ratio >= 1 for {consecutive} consecutive iterates")]
    NoContraction { consecutive: usize },

    #[error("frequency cutoff {cutoff:.3e} outside the lattice (max {max:.3e})")]
    CutoffTooLarge { cutoff: f64, max: f64 },

    #[error("exponents (p={p}, q={q}, s={s}) are not Strichartz-admissible in dimension {dim}")]
    InadmissibleExponents { p: f64, q: f64, s: f64, dim: usize },

    #[error("SVD failed to converge")]
    SvdFailure,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
