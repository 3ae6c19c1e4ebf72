//! Adversarial training for toy machine reading comprehension, with
//! per-token perturbations and trainable virtual embedding matrices for
//! passage and question tokens.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod perturb;
pub mod train;

pub use error::{Error, Result};
