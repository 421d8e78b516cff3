//! Online continual test-time adaptation.
//!
//! A deployed classifier is adapted on a stream of unlabeled batches whose
//! input distribution shifts from domain to domain. The engine keeps a
//! small set of domain prototypes from the most recent previous domain and
//! trains the encoder so that current-domain embeddings become
//! indistinguishable from them, alongside EMA-teacher self-training.
//!
//! Layout:
//! - [`numerics`]: dense arrays, reverse-mode tape, optimizers
//! - [`kernels`]: RBF / MMD / prototype score / greedy selection / Chamfer
//! - [`model`]: encoder, amplifier, extractor, discriminator, teacher, losses
//! - [`adaptation`]: detection, queue, prototypes, the two-step iteration
//! - [`stream`]: synthetic shifted classification streams
//! - [`harness`]: pretraining, scenario runs, baselines, reports

pub mod adaptation;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
