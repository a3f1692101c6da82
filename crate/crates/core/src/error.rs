use thiserror::Error;

use crate::distortions::DistortionError;
use crate::evaluation::EvalError;
use crate::models::ModelError;
use crate::store::StoreError;
use crate::training::TrainError;
use crate::zerowatermark::WatermarkError;

/// Umbrella error for callers that drive several modules (the CLI).
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Distortion(#[from] DistortionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("image error: {0}")]
    Image(#[from] crate::image::ImageError),
}
