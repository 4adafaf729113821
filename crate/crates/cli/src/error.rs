//! Error-to-exit-code mapping: 2 = hypothesis/validation failure,
//! 3 = numerical error, 4 = configuration error.

use hartree_core::error::CoreError;

#[derive(Debug)]
pub enum AppError {
    /// hypothesis or verification failure (exit 2)
    Validation(String),
    /// numerical failure: resonance, NaN, non-contraction (exit 3)
    Numerical(String),
    /// configuration / IO problems (exit 4)
    Config(String),
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Config(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            AppError::Validation(m) | AppError::Numerical(m) | AppError::Config(m) => m,
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::ResonantSymbol { .. }
            | CoreError::NaNDetected { .. }
            | CoreError::NoContraction { .. }
            | CoreError::QuadratureFailure { .. }
            | CoreError::BoxGuardViolated { .. }
            | CoreError::SvdFailure => AppError::Numerical(e.to_string()),
            CoreError::NonIntegrable { .. }
            | CoreError::NyquistUnderresolved { .. }
            | CoreError::OffLatticeFrequency { .. }
            | CoreError::CollinearPair { .. }
            | CoreError::ComplexityGuard { .. }
            | CoreError::CutoffTooLarge { .. }
            | CoreError::InadmissibleExponents { .. }
            | CoreError::GridMismatch(_)
            | CoreError::InvalidParameter(_) => AppError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Config(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Config(format!("json: {e}"))
    }
}
