//! Multi-task video action recognition with auxiliary flow-prediction and
//! reversed-frame reconstruction decoders, trained from scratch on CPU.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: tensors and a define-by-run reverse-mode tape
//! - [`nn`]: 3D convolution, transposed convolution, pooling, dense layers
//! - [`flow`]: a TV-L1 optical-flow solver and a block-matching oracle
//! - [`data`]: synthetic two-domain sprite videos and their file format
//! - [`model`]: the encoder/classifier/decoder network
//! - [`loss`]: the five training terms and their weighted sum
//! - [`train`]: optimization, evaluation, grid search, ablation and
//!   cross-domain protocols

pub mod container;
pub mod data;
pub mod element;
pub mod error;
pub mod flow;
pub mod loss;
pub mod model;
pub mod nn;
pub mod seed;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::{Init, Shape, Tape, Tensor};
