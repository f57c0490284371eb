//! Self-supervised pretraining pipeline for face recognition: a style-based
//! generative prior, a latent-inversion encoder whose trunk initialises the
//! recognition backbone, angular-margin fine-tuning, and the verification
//! benchmark tooling used to evaluate it.

pub mod checkpoint;
pub mod error;
pub mod evalbench;
pub mod facerec;
pub mod features;
pub mod gan_prior;
pub mod groups;
pub mod imaging;
pub mod latent_encoder;
pub mod nn;
pub mod prior_data;
pub mod runner;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod testing;
pub mod trend;
pub mod trunk;

pub use error::{Error, Result};
pub use tensor::Tensor;
