use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),

    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("syndrome has an odd number of defects ({0}); a perfect matching does not exist")]
    OddDefectCount(usize),

    #[error("target error rate {target} is unachievable: the squeezing-independent noise floor already gives {floor}")]
    Unachievable { target: f64, floor: f64 },

    #[error("failure curves do not cross inside the swept range")]
    NoCrossing,

    #[error("matching backend failed: {0}")]
    Matching(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_variance(v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::NonPositiveVariance(v))
    }
}
