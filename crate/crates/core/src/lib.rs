//! Layout-guided sampling for a small attention denoiser.
//!
//! The pipeline: a [`layout::LayoutSpec`] binds prompt tokens to boxes, the
//! denoiser exposes its attention maps as an [`attention::AttentionBundle`],
//! [`losses`] scores those maps against the layout, and [`guidance`] nudges
//! the latent between [`sampler`] steps.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod image_io;
pub mod layout;
pub mod losses;
pub mod rng;
pub mod sampler;
pub mod toymodel;
pub mod trace;

pub use error::{Error, Result};
