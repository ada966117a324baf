//! Photogrammetric toolkit for satellite scene mosaics: refines Rational
//! Polynomial Camera models with a rotation-only bundle adjustment,
//! reconstructs consistent Digital Surface Models from the refined cameras,
//! and tracks surface volume over a time series.
//!
//! The crate ships with a synthetic-scene generator ([`synth`]) that
//! manufactures pushframe-like acquisitions with known ground truth, so the
//! whole pipeline is testable without proprietary imagery.

pub mod bundle;
pub mod geodesy;
pub mod geometry;
pub mod config;
pub mod matching;
pub mod pipeline;
pub mod raster;
pub mod rpc;
pub mod synth;
pub mod volume;

pub use geodesy::{EcefPoint, EnuFrame, EnuPoint, GeodeticPoint};
pub use rpc::{PixelPoint, RpcModel};
