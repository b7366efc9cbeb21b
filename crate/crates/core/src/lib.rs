//! Cross-modal contrastive retrieval with the inter-intra modal loss.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: f64 tensors and a reverse-mode tape with a
//!   central-difference gradient checker.
//! * [`data`]: feature sequences, GS/FD sampling, the `IITNSR01` tensor
//!   container, manifests, and the clustered synthetic generator.
//! * [`encoders`]: mean-pool linear, MLP, and attention-pool encoders.
//! * [`losses`]: inter-modal, intra-modal and combined losses.
//! * [`train`]: batch composition, Adam, the training loop, and recall@k.
//! * [`experiments`]: config documents and the sweep drivers behind the CLI.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
