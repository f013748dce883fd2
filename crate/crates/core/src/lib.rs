//! Neural variational text modelling toolkit.
//!
//! Two models built on one small reverse-mode autodiff tape:
//!
//! * **NVDM** — an unsupervised bag-of-words document model: an MLP encoder
//!   maps a document to a diagonal Gaussian over a continuous semantic
//!   vector, a softmax decoder reconstructs the words, and training
//!   maximises the evidence lower bound with an analytic KL term.
//! * **NASM** — a supervised answer-selection model: LSTM sentence encoders,
//!   a latent Gaussian over question semantics driving a stochastic
//!   attention mechanism over answer tokens, and a bilinear sigmoid
//!   relatedness predictor, trained against a conditional-prior KL.
//!
//! Training runs in `f32`; every oracle path (finite differences, Monte
//! Carlo, quadrature) instantiates the same generic code at `f64`.

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod params;
pub mod quadrature;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
