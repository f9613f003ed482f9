use thiserror::Error;

use crate::cf::CfError;
use crate::corpus::CorpusError;
use crate::numerics::NumericsError;

/// Errors raised by the encoders, trainer and evaluation code.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Cf(#[from] CfError),
    #[error("item {item} has neither a text nor a media feature")]
    MissingContent { item: usize },
    #[error("cannot encode an empty bundle")]
    EmptyBundle,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: NumericsError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}
