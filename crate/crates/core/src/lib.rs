//! Wavelet-domain diffusion super-resolution with a self-cascade for large magnifications.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod sampler;
pub mod schedule;
pub mod selftest;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::ImageTensor;
