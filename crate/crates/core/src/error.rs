//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{0} requires a nonempty dataset")]
    EmptyDataset(&'static str),

    #[error("dictionary size {requested} cannot hold the {n} identity observables")]
    DictionaryTooSmall { requested: usize, n: usize },

    #[error("need at least {need} snapshot pairs, got {got}")]
    TooFewSnapshots { need: usize, got: usize },

    #[error(
        "regressor is rank deficient without regularization: numerical rank {rank} of {expected}, \
         smallest singular value {sigma_min:.3e}"
    )]
    RankDeficient {
        rank: usize,
        expected: usize,
        sigma_min: f64,
    },

    #[error(
        "(A, B) is uncontrollable: numerical rank {rank} of {n}, \
         sigma_min/sigma_max = {ratio:.3e}; shrink the dictionary"
    )]
    Uncontrollable { rank: usize, n: usize, ratio: f64 },

    #[error(
        "companion transform is too ill-conditioned: similarity defect {defect:.3e} \
         exceeds {bound:.3e}; shrink the dictionary"
    )]
    CompanionIllConditioned { defect: f64, bound: f64 },

    #[error("sampling interval mismatch: model dt = {model_dt}, data dt = {data_dt}")]
    DtMismatch { model_dt: f64, data_dt: f64 },

    #[error("adaptation gain matrix is not symmetric positive definite")]
    GammaNotPositiveDefinite,

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    #[error("trajectory escaped: |x| = {norm:.3} exceeded radius {radius} at t = {t:.4}")]
    Escape { norm: f64, radius: f64, t: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
