use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("treatment indicator must be 0/1, got {0:?}")]
    NonBinaryTreatment(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("outcome has zero or non-finite standard deviation")]
    DegenerateOutcome,
    #[error("units {0} and {1} share no control periods")]
    NoSharedControlPeriods(usize, usize),
    #[error("all loss weights are zero")]
    AllZeroWeights,
    #[error("{0} has zero total weight")]
    EmptyRowOrColumn(String),
    #[error("no treated cells")]
    NoTreatedCells,
    #[error("covariate design is rank deficient after removing fixed effects")]
    RankDeficientCovariates,
    #[error("treatment pattern is not a block design")]
    NotBlockDesign,
    #[error("insufficient control units or periods: {0}")]
    InsufficientControls(String),
    #[error("bootstrap draw {0} kept resampling identical control rows")]
    DegenerateResample(usize),
    #[error("weights do not sum to one (sum = {0})")]
    WeightsNotNormalized(f64),
    #[error("too few periods: {0}")]
    TooFewPeriods(String),
    #[error("infeasible sweep value {value} for axis {axis}")]
    InfeasibleSweepValue { axis: String, value: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::DegenerateResample(_) | Error::RankDeficientCovariates
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
