//! Language-conditioned automatic colorization.
//!
//! A fully-convolutional network predicts, for every pixel of a greyscale
//! image, one of 625 quantized CIE Lab ab classes. A caption encoded by a
//! bi-directional LSTM conditions every convolutional block, either by
//! channel concatenation or by feature-wise affine modulation (FiLM).

// Kernels index several parallel buffers with one loop variable.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod colorspace;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod model;
pub mod network;
pub mod nn;
pub mod quantizer;
pub mod text;
pub mod training;

pub use error::{Error, Result};
