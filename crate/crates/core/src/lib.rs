//! Quantity-consistent multi-object image generation at desk scale.
//!
//! The crate holds a small reverse-mode tensor engine, toy text, image and
//! box encoders, the regional semantic anchor (global and phrase-level text
//! semantics with layout-block gating), adaptive multi-modal guidance
//! (signal encoder, adaptive controller, intent injection), a
//! transformer-token diffusion backbone with a DDIM sampler, a procedural
//! multi-object dataset, and the staged training and evaluation harness.

pub mod amg;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod model;
pub mod moca;
pub mod optim;
pub mod rsa;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use tensor::{Tensor, Tape, Var};
