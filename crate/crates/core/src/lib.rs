//! Calibration toolkit for camera-based dissolved-oxygen optodes.
//!
//! The crate covers the full hierarchy from frame-averaged Stern–Volmer
//! calibration through per-pixel fitting to a physics-informed neural
//! calibrator with deep-ensemble uncertainty, plus the deterministic synthetic
//! optode simulator used to validate all of it.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the `f64` instantiations used by the pipelines.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod pixel_fit;
pub mod scalar;
pub mod sim;
pub mod stats;
pub mod sv;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type SvLinearF64 = sv::SvLinear<f64>;
pub type SvTwoSiteF64 = sv::SvTwoSite<f64>;
pub type PixelMetricsF64 = sv::PixelMetrics<f64>;
pub type ParameterMapsF64 = pixel_fit::ParameterMaps<f64>;
pub type PlateauStackF64 = pixel_fit::PlateauStack<f64>;
pub type ModelF64 = nn::Model<f64>;
