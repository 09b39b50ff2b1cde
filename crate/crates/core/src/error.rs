use std::io;

use thiserror::Error;

use crate::fabric::FabricError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Invalid hyper-parameters, plans, or layer geometry.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("partition error at layer {layer}: {message}")]
    Partition { layer: usize, message: String },

    #[error(transparent)]
    Fabric(#[from] FabricError),

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Shape(_)
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Layer { .. }
            | Error::Partition { .. }
            | Error::Infeasible(_)
            | Error::Format(_)
            | Error::Calibration(_) => true,
            Error::Fabric(FabricError::CapacityBreach { .. }) => true,
            Error::Fabric(_) | Error::Diverged(_) | Error::Io(_) | Error::Csv(_) => false,
        }
    }
}
