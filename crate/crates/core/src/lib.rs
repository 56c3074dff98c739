//! Multi-view facial reflectance and geometry recovery.
//!
//! A closed-loop inverse-rendering toolkit: given two calibrated views of a
//! textured parametric face mesh, it recovers diffuse albedo, specular
//! albedo, second-order spherical-harmonic lighting, rigid pose and refined
//! per-texel normals, and verifies the whole pipeline against synthetic
//! ground truth it generates itself.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`fitting`] — multi-view model fitting (landmarks + photo-consistency,
//!    Gauss-Newton) producing a fit state and baked UV maps.
//! 2. [`reflectance`] — specular/diffuse separation across frame pairs
//!    (block-coordinate Adam under box constraints).
//! 3. [`georefine`] — per-texel normal correction and a least-squares vertex
//!    update.
//!
//! [`harness`] generates synthetic scenes with full ground truth and scores
//! re-rendered held-out views by PSNR/RMSE.

pub mod facemodel;
pub mod fitting;
pub mod geom;
pub mod georefine;
pub mod harness;
pub mod io;
pub mod optim;
pub mod reflectance;
pub mod render;
pub mod rng;
pub mod shading;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("point at or behind the camera plane (z = {0})")]
    NonProjectable(f64),
    #[error("uv coordinate ({0}, {1}) outside [0,1]^2")]
    UvOutOfRange(f64, f64),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("degenerate fit: {0}")]
    FitDegenerate(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
