//! Robust zero-watermarking on learned distortion-invariant features.

pub mod data;
pub mod distortions;
mod error;
pub mod evaluation;
pub mod image;
pub mod models;
pub mod store;
pub mod training;
pub mod zerowatermark;

pub use error::Error;
