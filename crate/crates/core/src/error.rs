use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::BackboneError;
use crate::data::DataError;
use crate::geometry::GeometryError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::views::ViewError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("incompatible checkpoint, mismatched keys: {0}")]
    Incompatible(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGrad(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
