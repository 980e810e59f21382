//! Memory-efficient volumetric segmentation.
//!
//! A small, dependency-light toolkit for training 3D U-nets on CPU:
//! a reverse-mode tensor engine ([`tensor`]), 3D network ops ([`nn`]),
//! class-imbalance losses ([`loss`]), the standard / memory-efficient /
//! post-concatenation network variants ([`unet`]), patch sampling
//! ([`sampler`]), training loops ([`train`]), a two-stage cascade
//! ([`cascade`]), sliding-window inference ([`infer`]), an analytic
//! training-memory model ([`ledger`]) and volume I/O ([`volio`]).

pub mod cascade;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod infer;
pub mod ledger;
pub mod loss;
pub mod nn;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod volio;

pub use error::{Error, Result};
pub use tensor::{no_grad, Element, Tensor};
