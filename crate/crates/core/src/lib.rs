//! Unsupervised training of products of expert capsules.
//!
//! Capsules fire with probability equal to their squashed magnitude. An
//! energy function built on routing by agreement makes the upper capsules
//! conditionally independent given the lower layer, which turns the
//! log-likelihood gradient into a contrastive-divergence rule that is mixed
//! by routing forward, backward and forward again.
//!
//! - [`numerics`]: matrices, the seeded random source, momentum SGD
//! - [`capsule`]: squash/unsquash, routing, energy and probabilities
//! - [`train`]: CD training of encoder and decoder, gradient checking, generation
//! - [`conv`]: convolutional autoencoder front end
//! - [`io`]: IDX datasets, PGM grids and the checkpoint format
//! - [`synthetic`]: generated datasets for tests and demos

pub mod capsule;
pub mod conv;
pub mod error;
pub mod io;
pub mod numerics;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
