//! Minimal neural-network layers with hand-written backward passes.
//!
//! Every layer exposes `forward` (returning whatever it must remember) and
//! `backward` (accumulating parameter gradients and returning the input
//! gradient). Layers are generic over [`Real`] so the same code runs in
//! `f32` for training and `f64` for finite-difference checks.

pub mod init;
pub mod layers;
mod optim;
mod real;
mod tensor;

pub use optim::{clip_grad_norm, Adam};
pub use real::{gemm, matmul, MatMut, MatRef, Real};
pub use tensor::{join, Module, Param, Tensor};
