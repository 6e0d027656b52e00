//! Simulation and analysis toolkit for uncertainty-aware point-scan
//! microscopy: synthetic samples and noisy scans, a quantile-regression
//! denoiser, conformal calibration of its intervals, and adaptive rescanning
//! of the least certain pixels with time and light-dose accounting.

pub mod adaptive;
pub mod cli;
pub mod config;
pub mod conformal;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod image;
pub mod metrics;
pub mod phantom;
pub(crate) mod rng;
pub mod scan;

pub use error::{Error, Result};
pub use image::{Image, ScanMask};
