//! Blur-to-blur domain translation for camera-specific deblurring.
//!
//! The crate trains a translation network that converts images with an
//! unknown blur pattern into images carrying a known, easy-to-deblur blur,
//! then deblurs through a model for the known domain. Everything runs on
//! synthetic blur domains where exact oracles exist.

pub mod autodiff;
pub mod blur;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod nets;
pub mod train;
pub mod wiener;

pub use error::{Error, Result};
