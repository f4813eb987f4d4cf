//! Aerial geolocalization pipeline.
//!
//! Road masks are mapped to a location on a city-wide localization grid,
//! decoded to geographic coordinates (with a regression fallback for blank
//! maps) and refined by translation-only ICP against rasterized map roads.
//! The crate also carries the training losses, segmentation and
//! localization metrics, a forward-only replica of the encoder-decoder
//! network, a descriptor nearest-neighbor baseline and a seeded synthetic
//! city generator that makes the whole pipeline testable without data.

pub mod cli;
pub mod geo;
pub mod icp;
pub mod locmap;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nnmatch;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod synth;

pub use geo::{GeoPoint, LocalXY, PixelCoord, RegionFrame};
pub use locmap::{EstimateSource, LocationEstimate};
pub use raster::{Mask, ProbMap, RoadNetwork};
