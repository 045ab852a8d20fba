//! Dual transformer contrastive network (DTCN) for text-image sentiment
//! classification, trained from scratch on a small reverse-mode tape.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
