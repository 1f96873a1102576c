//! Generalised zero-shot learning over a joint visual/semantic latent space.
//!
//! Two latent model families are available through [`latent::registry`]:
//! an aligned variational autoencoder ([`cada`]) and a cycle-regularised
//! Wasserstein generator ([`cycle`]). On top of either, [`gate`] trains a
//! seen/unseen domain classifier and [`gzsl`] combines it with a latent class
//! head. [`eval`] implements the per-class accuracy, H-mean and AUSUC
//! protocol, and [`run`] wires everything into reproducible train/eval runs. [`checks`] holds the gradient checks for every
//! training loss on small toy instances.

pub mod autodiff;
pub mod error;
pub mod data;
pub mod cada;
pub mod cycle;
pub mod latent;
pub mod gate;
pub mod eval;
pub mod gzsl;
pub mod run;
pub mod checks;

pub use error::{Error, Result};
