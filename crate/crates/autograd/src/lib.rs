//! Minimal reverse-mode autodiff for the DualTrack networks.
//!
//! Tensors are dense row-major buffers; matrix products and convolutions go
//! through `matrixmultiply` so that training fits a CPU budget. Everything is
//! generic over [`Scalar`] so the same model code runs in `f32` for training
//! and `f64` for finite-difference gradient checks.

pub mod conv;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, CosineSchedule};
pub use params::{ParamId, ParamStore, Session, TrainMask};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
