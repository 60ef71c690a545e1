//! Semi-supervised domain-adaptive segmentation with an inter-domain teacher
//! (knowledge distillation from translated source images, weighted by a
//! target discriminator) and an intra-domain teacher (EMA self-ensembling
//! with Monte-Carlo-dropout uncertainty masking).

pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod consistency;
pub mod distill;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod phantom;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
