//! Structure-token semantic segmentation.
//!
//! Learnable per-class structure tokens are refined against an image feature
//! map by a stack of extraction blocks (cross-slice, self-slice or point-wise)
//! and read out directly as class score maps. The crate carries its own small
//! reverse-mode autograd engine, a synthetic shapes dataset, training,
//! evaluation (mIoU, multi-scale and slide-window inference), an analytic cost
//! model and the file formats used by the `structtoken` command-line tool.

pub mod autograd;
mod binio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;

pub use autograd::{Graph, Var};
pub use decoder::{DecoderConfig, Variant};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Element, Tensor};
