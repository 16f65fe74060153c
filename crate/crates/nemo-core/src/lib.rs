//! Localizing memorization neurons in the value layers of a text-conditioned
//! diffusion denoiser, with a small trainable toy model to run it on.

pub mod config;
pub mod ddpm_core;
pub mod error;
pub mod localizer;
pub mod metrics;
pub mod mem_score;
pub mod oracle;
pub mod par;
pub mod suite;
pub mod toy_model;

pub use error::{NemoError, Result};
