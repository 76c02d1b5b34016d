//! Few-shot adaptation of a pretrained generator toward a small target set, keeping
//! source identity through latent-space identity injection, style/content decoupling
//! and identity-consistency losses. Includes FID, LPIPS / Intra-LPIPS and
//! encoder-cosine evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod images;
pub mod injection;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod runs;
pub mod substitution;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
