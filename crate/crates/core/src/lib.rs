//! Weakly-supervised cell classification and counting from point annotations.
//!
//! A shared encoder feeds three decoders: the main branch trained on fixed
//! circle masks, a dynamic branch trained on per-iteration random polygon
//! masks and tied to the main branch by a consistency loss, and a prior branch
//! that learns tumor regions mined from an early-stopped pre-trained model.
//! Inference uses only the encoder and main decoder, followed by peak picking.

pub mod cli;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod losses;
pub mod maskgen;
pub mod net;
pub mod plot;
pub mod optim;
pub mod seed;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
