//! Decoding localization maps into geographic estimates.
//!
//! A predicted map is thresholded, labeled with 8-connectivity, and the
//! probability-weighted centroid of the largest component becomes the
//! estimate. Blank maps yield no estimate; [`combine`] then falls back to
//! the regression branch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    local_to_latlon, locmap_to_local, regression_to_latlon, GeoError, GeoPoint, PixelCoord,
    RegionFrame,
};
use crate::raster::{Mask, ProbMap};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LocmapError {
    #[error("localization map is {got_w}x{got_h}, expected {want}x{want}")]
    BadShape {
        got_w: usize,
        got_h: usize,
        want: usize,
    },
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimateSource {
    Segmentation,
    Regression,
    Fallback,
    Refined,
}

impl EstimateSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Segmentation => "segmentation",
            Self::Regression => "regression",
            Self::Fallback => "fallback",
            Self::Refined => "refined",
        }
    }
}

impl std::fmt::Display for EstimateSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimateSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "segmentation" => Ok(Self::Segmentation),
            "regression" => Ok(Self::Regression),
            "fallback" => Ok(Self::Fallback),
            "refined" => Ok(Self::Refined),
            other => Err(format!("unknown estimate source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub position: GeoPoint,
    /// Position on the localization grid.
    pub pixel: PixelCoord,
    pub source: EstimateSource,
    /// Pixels in the winning component; 0 for non-segmentation sources.
    pub component_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    pub width: usize,
    pub height: usize,
    /// 0 is background, components are numbered from 1 in scan order.
    pub labels: Vec<u32>,
    pub count: usize,
    /// `sizes[k]` is the pixel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

pub fn binarize(m: &ProbMap, thr: f64) -> Mask {
    Mask {
        width: m.width,
        height: m.height,
        values: m.values.iter().map(|&v| (v >= thr) as u8).collect(),
        meters_per_pixel: m.meters_per_pixel,
        origin_local: m.origin_local,
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // keep the earlier provisional label as root
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling with 8-connectivity. Final labels are
/// numbered by first appearance in a row-major scan.
pub fn connected_components(m: &Mask) -> ComponentLabeling {
    let (w, h) = (m.width, m.height);
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut k = 0;
            if c > 0 && labels[r * w + c - 1] != 0 {
                neighbors[k] = labels[r * w + c - 1];
                k += 1;
            }
            if r > 0 {
                let up = (r - 1) * w;
                if c > 0 && labels[up + c - 1] != 0 {
                    neighbors[k] = labels[up + c - 1];
                    k += 1;
                }
                if labels[up + c] != 0 {
                    neighbors[k] = labels[up + c];
                    k += 1;
                }
                if c + 1 < w && labels[up + c + 1] != 0 {
                    neighbors[k] = labels[up + c + 1];
                    k += 1;
                }
            }
            if k == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                labels[r * w + c] = l;
            } else {
                let first = neighbors[..k].iter().copied().min().unwrap();
                labels[r * w + c] = first;
                for &n in &neighbors[..k] {
                    union(&mut parent, first, n);
                }
            }
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut sizes = Vec::new();
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        *l = remap[root];
        sizes[*l as usize - 1] += 1;
    }
    ComponentLabeling {
        width: w,
        height: h,
        labels,
        count: sizes.len(),
        sizes,
    }
}

/// Decode a localization map. `None` means the map is blank at `thr`.
pub fn decode_locmap(
    m: &ProbMap,
    f: &RegionFrame,
    thr: f64,
) -> Result<Option<LocationEstimate>, LocmapError> {
    decode_locmap_min_size(m, f, thr, 1)
}

/// As [`decode_locmap`], additionally treating maps whose largest component
/// has fewer than `min_component_size` pixels as blank.
pub fn decode_locmap_min_size(
    m: &ProbMap,
    f: &RegionFrame,
    thr: f64,
    min_component_size: usize,
) -> Result<Option<LocationEstimate>, LocmapError> {
    if m.width != f.locmap_px || m.height != f.locmap_px {
        return Err(LocmapError::BadShape {
            got_w: m.width,
            got_h: m.height,
            want: f.locmap_px,
        });
    }
    if !(thr > 0.0 && thr < 1.0) {
        return Err(LocmapError::BadThreshold(thr));
    }
    let cc = connected_components(&binarize(m, thr));
    // labels are in first-pixel order, so the first maximum wins ties
    let Some((best, &size)) = cc
        .sizes
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, s)| *s)
    else {
        return Ok(None);
    };
    if size < min_component_size.max(1) {
        return Ok(None);
    }
    let label = best as u32 + 1;
    let (mut sw, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for (i, &l) in cc.labels.iter().enumerate() {
        if l == label {
            let p = m.values[i];
            sw += p;
            sr += p * (i / m.width) as f64;
            sc += p * (i % m.width) as f64;
        }
    }
    let pixel = PixelCoord::new(sr / sw, sc / sw);
    Ok(Some(LocationEstimate {
        position: local_to_latlon(locmap_to_local(pixel, f), f),
        pixel,
        source: EstimateSource::Segmentation,
        component_size: size,
    }))
}

/// Estimate from the regression branch alone.
pub fn regression_estimate(
    reg: (f64, f64),
    f: &RegionFrame,
    source: EstimateSource,
) -> Result<LocationEstimate, LocmapError> {
    let position = regression_to_latlon(reg, f)?;
    let pixel = crate::geo::local_to_locmap(crate::geo::latlon_to_local(position, f), f);
    Ok(LocationEstimate {
        position,
        pixel,
        source,
        component_size: 0,
    })
}

/// Segmentation estimate when present, regression fallback otherwise.
pub fn combine(
    seg: Option<LocationEstimate>,
    reg: (f64, f64),
    f: &RegionFrame,
) -> Result<LocationEstimate, LocmapError> {
    if !(0.0..=100.0).contains(&reg.0) || !(0.0..=100.0).contains(&reg.1) {
        return Err(GeoError::OutOfRange(reg.0, reg.1).into());
    }
    match seg {
        Some(est) => Ok(est),
        None => regression_estimate(reg, f, EstimateSource::Fallback),
    }
}
