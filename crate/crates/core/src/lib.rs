//! Multimodal relation extraction over cross-modal scene graphs with
//! information-bottleneck refinement and latent topic features.

#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod cmg;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod gene;
pub mod lamo;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sg;
pub mod synth;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
