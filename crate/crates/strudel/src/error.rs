//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented range or relation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value lies outside its mathematical domain (e.g. sigma not in [0,1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// Loss routing and the presence of an uncertainty map disagree.
    #[error("routing error: {0}")]
    Routing(String),

    /// A without-replacement pool has fewer samples than requested.
    #[error("pool exhausted: requested {requested}, only {remaining} remaining")]
    PoolExhausted { requested: usize, remaining: usize },

    /// Training produced a non-finite loss.
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (total={total}, dice={dice}, bce={bce}, ubce={ubce})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        total: f64,
        dice: f64,
        bce: f64,
        ubce: f64,
    },

    /// Statistical test input is degenerate (all paired differences zero).
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// Checkpoint or dataset file is malformed or version-mismatched.
    #[error("format error: {0}")]
    Format(String),

    /// A self-training iteration failed; wraps the cause with its index.
    #[error("iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn in_iteration(self, iteration: usize) -> Error {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
