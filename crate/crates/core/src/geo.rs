//! Coordinate frames: WGS84 latitude/longitude, a flat local metric plane,
//! the square localization-map grid and the 0..100 regression space.
//!
//! The local plane uses the equirectangular small-area approximation
//! anchored at the south-west corner of a [`RegionFrame`]. All transforms
//! are pure and exactly invertible up to floating point rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Meters per degree of latitude used by the flat approximation.
pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

/// Default localization grid side.
pub const DEFAULT_LOCMAP_PX: usize = 128;

/// Default frame extent: 128 px at exactly 80 m per pixel.
pub const DEFAULT_EXTENT_M: f64 = 10_240.0;

// Slack for points that sit on the frame border after a round trip.
const FRAME_EPS_M: f64 = 1e-6;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("point ({lat}, {lon}) lies outside the region frame")]
    OutOfFrame { lat: f64, lon: f64 },
    #[error("regression coordinates ({0}, {1}) outside [0, 100]")]
    OutOfRange(f64, f64),
}

/// WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Meters east (`x`) and north (`y`) of the frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalXY {
    pub x: f64,
    pub y: f64,
}

impl LocalXY {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &LocalXY) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Fractional grid position. Integer values are cell centers; row 0 is north.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelCoord {
    pub row: f64,
    pub col: f64,
}

impl PixelCoord {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

/// Georeferenced flat rectangle tying all coordinate systems together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionFrame {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub width_m: f64,
    pub height_m: f64,
    #[serde(default = "default_locmap_px")]
    pub locmap_px: usize,
}

fn default_locmap_px() -> usize {
    DEFAULT_LOCMAP_PX
}

impl Default for RegionFrame {
    fn default() -> Self {
        Self {
            origin_lat: 46.74,
            origin_lon: 23.55,
            width_m: DEFAULT_EXTENT_M,
            height_m: DEFAULT_EXTENT_M,
            locmap_px: DEFAULT_LOCMAP_PX,
        }
    }
}

impl RegionFrame {
    pub fn new(
        origin: GeoPoint,
        width_m: f64,
        height_m: f64,
        locmap_px: usize,
    ) -> Result<Self, GeoError> {
        let f = Self {
            origin_lat: origin.lat,
            origin_lon: origin.lon,
            width_m,
            height_m,
            locmap_px,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !self.origin().is_valid() {
            return Err(GeoError::InvalidFrame(format!(
                "origin ({}, {}) is not a valid WGS84 position",
                self.origin_lat, self.origin_lon
            )));
        }
        if !(self.width_m.is_finite() && self.width_m > 0.0)
            || !(self.height_m.is_finite() && self.height_m > 0.0)
        {
            return Err(GeoError::InvalidFrame(format!(
                "extent {} x {} m must be positive",
                self.width_m, self.height_m
            )));
        }
        if self.locmap_px < 2 {
            return Err(GeoError::InvalidFrame(format!(
                "locmap_px = {} must be at least 2",
                self.locmap_px
            )));
        }
        let px_w = self.width_m / self.locmap_px as f64;
        let px_h = self.height_m / self.locmap_px as f64;
        if (px_w - px_h).abs() > 1e-9 * px_w.max(px_h) {
            return Err(GeoError::InvalidFrame(format!(
                "pixels are not square: {px_w} m x {px_h} m"
            )));
        }
        if self.origin_lat.abs() >= 89.0 {
            return Err(GeoError::InvalidFrame(
                "flat approximation undefined near the poles".into(),
            ));
        }
        Ok(())
    }

    pub fn origin(&self) -> GeoPoint {
        GeoPoint::new(self.origin_lat, self.origin_lon)
    }

    /// Side of one localization-map cell in meters.
    pub fn locmap_pixel_m(&self) -> f64 {
        self.width_m / self.locmap_px as f64
    }

    pub fn center_local(&self) -> LocalXY {
        LocalXY::new(self.width_m / 2.0, self.height_m / 2.0)
    }

    pub fn contains_local(&self, q: LocalXY) -> bool {
        q.x >= -FRAME_EPS_M
            && q.y >= -FRAME_EPS_M
            && q.x <= self.width_m + FRAME_EPS_M
            && q.y <= self.height_m + FRAME_EPS_M
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.contains_local(latlon_to_local(p, self))
    }

    fn lon_scale(&self) -> f64 {
        METERS_PER_DEG_LAT * self.origin_lat.to_radians().cos()
    }
}

pub fn latlon_to_local(p: GeoPoint, f: &RegionFrame) -> LocalXY {
    LocalXY {
        x: (p.lon - f.origin_lon) * f.lon_scale(),
        y: (p.lat - f.origin_lat) * METERS_PER_DEG_LAT,
    }
}

pub fn local_to_latlon(q: LocalXY, f: &RegionFrame) -> GeoPoint {
    GeoPoint {
        lat: f.origin_lat + q.y / METERS_PER_DEG_LAT,
        lon: f.origin_lon + q.x / f.lon_scale(),
    }
}

pub fn local_to_locmap(q: LocalXY, f: &RegionFrame) -> PixelCoord {
    let px = f.locmap_pixel_m();
    PixelCoord {
        row: (f.height_m - q.y) / px - 0.5,
        col: q.x / px - 0.5,
    }
}

pub fn locmap_to_local(c: PixelCoord, f: &RegionFrame) -> LocalXY {
    let px = f.locmap_pixel_m();
    LocalXY {
        x: (c.col + 0.5) * px,
        y: f.height_m - (c.row + 0.5) * px,
    }
}

pub fn latlon_to_regression(p: GeoPoint, f: &RegionFrame) -> Result<(f64, f64), GeoError> {
    let q = latlon_to_local(p, f);
    if !f.contains_local(q) {
        return Err(GeoError::OutOfFrame {
            lat: p.lat,
            lon: p.lon,
        });
    }
    let rx = (100.0 * q.x / f.width_m).clamp(0.0, 100.0);
    let ry = (100.0 * q.y / f.height_m).clamp(0.0, 100.0);
    Ok((rx, ry))
}

pub fn regression_to_latlon(reg: (f64, f64), f: &RegionFrame) -> Result<GeoPoint, GeoError> {
    let (rx, ry) = reg;
    if !(0.0..=100.0).contains(&rx) || !(0.0..=100.0).contains(&ry) {
        return Err(GeoError::OutOfRange(rx, ry));
    }
    let q = LocalXY::new(rx / 100.0 * f.width_m, ry / 100.0 * f.height_m);
    Ok(local_to_latlon(q, f))
}

/// Great-circle distance on a sphere with the WGS84 equatorial radius, the
/// sphere on which one degree of arc is [`METERS_PER_DEG_LAT`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    const R: f64 = 6_378_137.0;
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * R * h.sqrt().asin()
}

/// Planar distance between two positions measured in the frame's local plane.
pub fn planar_distance_m(a: GeoPoint, b: GeoPoint, f: &RegionFrame) -> f64 {
    latlon_to_local(a, f).distance(&latlon_to_local(b, f))
}
