//! Attenuation correction and spectral unmixing of fluorescence emission
//! spectra.
//!
//! The crate provides a classical baseline (dual-band reflectance correction
//! followed by nonnegative least squares) and two learned models built on a
//! small reverse-mode differentiation kernel: a supervised residual 1-D CNN
//! that maps stacked fluorescence/white-light spectra to abundances, and a
//! semi-supervised variant that pairs a correction network with an unmixing
//! autoencoder whose decoder is the fixed endmember matrix. A parametric
//! simulator supplies labeled data with known PpIX concentrations.

pub mod error;
pub mod spectral;
pub mod simulate;
pub mod classical;
pub mod nn;
pub mod models;
pub mod pipeline;
pub mod config;
pub mod experiment;
pub mod sweep;

mod linalg;

pub use error::{Error, Result};
pub use spectral::{
    mix, mse, normalize_l2, pearson_r, resample, AbundanceVector, Domain, EndmemberLibrary,
    LabeledSample, Role, Spectrum, WavelengthGrid, PPIX634,
};
