//! Road vectors, binary masks and probability maps.
//!
//! Rasterization is distance based: a pixel is positive iff its center lies
//! within half the road thickness of some polyline segment. Masks and maps
//! are stored row-major with row 0 at the northern edge.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    latlon_to_local, local_to_latlon, local_to_locmap, GeoError, GeoPoint, LocalXY, PixelCoord,
    RegionFrame,
};

/// Polylines passing within this distance of each other intersect.
pub const INTERSECTION_TOL_M: f64 = 0.5;

/// Default ground-truth dot radius on the localization grid.
pub const DEFAULT_DOT_RADIUS_PX: f64 = 1.5;

const BUCKET_M: f64 = 128.0;

#[derive(Error, Debug)]
pub enum RasterError {
    #[error("polyline {index}: {reason}")]
    InvalidPolyline { index: usize, reason: String },
    #[error("invalid raster parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error("grid shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ordered road centerline. At least two points, no repeated consecutive points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<GeoPoint>,
}

impl Polyline {
    pub fn new(points: Vec<GeoPoint>) -> Self {
        Self { points }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: LocalXY,
    b: LocalXY,
    road: usize,
}

/// Georeferenced road network with cached local geometry and intersections.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    roads: Vec<Polyline>,
    frame: RegionFrame,
    local: Vec<Vec<LocalXY>>,
    segments: Vec<Segment>,
    buckets: SegmentBuckets,
    intersections: Vec<GeoPoint>,
}

#[derive(Debug, Clone)]
struct SegmentBuckets {
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl SegmentBuckets {
    fn build(frame: &RegionFrame, segments: &[Segment]) -> Self {
        let cols = (frame.width_m / BUCKET_M).ceil().max(1.0) as usize;
        let rows = (frame.height_m / BUCKET_M).ceil().max(1.0) as usize;
        let mut cells = vec![Vec::new(); cols * rows];
        let clamp_c = |v: f64| ((v / BUCKET_M).floor().max(0.0) as usize).min(cols - 1);
        let clamp_r = |v: f64| ((v / BUCKET_M).floor().max(0.0) as usize).min(rows - 1);
        for (i, s) in segments.iter().enumerate() {
            let pad = INTERSECTION_TOL_M;
            let (c0, c1) = (clamp_c(s.a.x.min(s.b.x) - pad), clamp_c(s.a.x.max(s.b.x) + pad));
            let (r0, r1) = (clamp_r(s.a.y.min(s.b.y) - pad), clamp_r(s.a.y.max(s.b.y) + pad));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    cells[r * cols + c].push(i as u32);
                }
            }
        }
        Self { cols, rows, cells }
    }

    /// Sorted, deduplicated indices of segments whose buckets touch the box.
    fn query(&self, xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Vec<usize> {
        let bucket = |v: f64, n: usize| ((v / BUCKET_M).floor().max(0.0) as usize).min(n - 1);
        if xmax < 0.0 || ymax < 0.0 {
            return Vec::new();
        }
        let (c0, c1) = (bucket(xmin, self.cols), bucket(xmax, self.cols));
        let (r0, r1) = (bucket(ymin, self.rows), bucket(ymax, self.rows));
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                out.extend(self.cells[r * self.cols + c].iter().map(|&i| i as usize));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    frame: RegionFrame,
    roads: Vec<Vec<[f64; 2]>>,
}

impl RoadNetwork {
    pub fn new(frame: RegionFrame, roads: Vec<Polyline>) -> Result<Self, RasterError> {
        frame.validate()?;
        let mut local = Vec::with_capacity(roads.len());
        let mut segments = Vec::new();
        for (index, road) in roads.iter().enumerate() {
            if road.points.len() < 2 {
                return Err(RasterError::InvalidPolyline {
                    index,
                    reason: "fewer than two points".into(),
                });
            }
            let pts: Vec<LocalXY> = road
                .points
                .iter()
                .map(|&p| latlon_to_local(p, &frame))
                .collect();
            if let Some(p) = pts.iter().find(|q| !frame.contains_local(**q)) {
                return Err(RasterError::InvalidPolyline {
                    index,
                    reason: format!("point ({:.3}, {:.3}) m lies outside the frame", p.x, p.y),
                });
            }
            for w in pts.windows(2) {
                if w[0] == w[1] {
                    return Err(RasterError::InvalidPolyline {
                        index,
                        reason: "repeated consecutive point".into(),
                    });
                }
                segments.push(Segment {
                    a: w[0],
                    b: w[1],
                    road: index,
                });
            }
            local.push(pts);
        }
        let buckets = SegmentBuckets::build(&frame, &segments);
        let mut net = Self {
            roads,
            frame,
            local,
            segments,
            buckets,
            intersections: Vec::new(),
        };
        net.intersections = compute_intersections(&net);
        Ok(net)
    }

    pub fn roads(&self) -> &[Polyline] {
        &self.roads
    }

    pub fn frame(&self) -> &RegionFrame {
        &self.frame
    }

    /// Polylines in local meters, parallel to [`RoadNetwork::roads`].
    pub fn local_roads(&self) -> &[Vec<LocalXY>] {
        &self.local
    }

    pub fn intersections(&self) -> &[GeoPoint] {
        &self.intersections
    }

    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = NetworkFile {
            frame: self.frame,
            roads: self
                .roads
                .iter()
                .map(|r| r.points.iter().map(|p| [p.lat, p.lon]).collect())
                .collect(),
        };
        serde_json::to_string(&file).expect("network serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RasterError> {
        let file: NetworkFile = serde_json::from_str(text)?;
        let roads = file
            .roads
            .into_iter()
            .map(|r| Polyline::new(r.into_iter().map(|[a, b]| GeoPoint::new(a, b)).collect()))
            .collect();
        Self::new(file.frame, roads)
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Euclidean distance from `p` to segment `ab`.
pub fn point_segment_distance(p: LocalXY, a: LocalXY, b: LocalXY) -> f64 {
    point_segment_distance2(p, a, b).sqrt()
}

fn point_segment_distance2(p: LocalXY, a: LocalXY, b: LocalXY) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a.x + t * dx - p.x, a.y + t * dy - p.y);
    ex * ex + ey * ey
}

fn cross(o: LocalXY, a: LocalXY, b: LocalXY) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Meeting point of two segments: the proper crossing point, or the
/// midpoint of the closest approach when it is within `tol`.
fn segment_meeting(s: &Segment, t: &Segment, tol: f64) -> Option<LocalXY> {
    let d1 = cross(t.a, t.b, s.a);
    let d2 = cross(t.a, t.b, s.b);
    let d3 = cross(s.a, s.b, t.a);
    let d4 = cross(s.a, s.b, t.b);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        let u = d1 / (d1 - d2);
        return Some(LocalXY::new(
            s.a.x + u * (s.b.x - s.a.x),
            s.a.y + u * (s.b.y - s.a.y),
        ));
    }
    let closest = |p: LocalXY, a: LocalXY, b: LocalXY| {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let u = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
        let q = LocalXY::new(a.x + u * dx, a.y + u * dy);
        (p.distance(&q), p, q)
    };
    let candidates = [
        closest(s.a, t.a, t.b),
        closest(s.b, t.a, t.b),
        closest(t.a, s.a, s.b),
        closest(t.b, s.a, s.b),
    ];
    let (d, p, q) = candidates
        .into_iter()
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .expect("four candidates");
    (d <= tol).then(|| LocalXY::new((p.x + q.x) / 2.0, (p.y + q.y) / 2.0))
}

fn compute_intersections(net: &RoadNetwork) -> Vec<GeoPoint> {
    let mut pairs = BTreeSet::new();
    for cell in &net.buckets.cells {
        for (i, &a) in cell.iter().enumerate() {
            for &b in &cell[i + 1..] {
                let (sa, sb) = (&net.segments[a as usize], &net.segments[b as usize]);
                if sa.road != sb.road {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    let mut found: Vec<LocalXY> = Vec::new();
    for (a, b) in pairs {
        let (sa, sb) = (&net.segments[a as usize], &net.segments[b as usize]);
        if let Some(p) = segment_meeting(sa, sb, INTERSECTION_TOL_M) {
            if found.iter().all(|q| q.distance(&p) > INTERSECTION_TOL_M) {
                found.push(p);
            }
        }
    }
    found
        .into_iter()
        .map(|q| local_to_latlon(q, &net.frame))
        .collect()
}

/// All crossing points and shared endpoints between distinct polylines,
/// deduplicated within [`INTERSECTION_TOL_M`].
pub fn find_intersections(net: &RoadNetwork) -> Vec<GeoPoint> {
    net.intersections.clone()
}

/// Dense binary grid. `origin_local` is the south-west corner of the grid,
/// i.e. the outer corner of cell `(height - 1, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
    pub meters_per_pixel: f64,
    pub origin_local: LocalXY,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
            meters_per_pixel: 1.0,
            origin_local: LocalXY::default(),
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<u8>) -> Result<Self, RasterError> {
        if values.len() != width * height {
            return Err(RasterError::Shape(format!(
                "{} values for a {width}x{height} mask",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(RasterError::InvalidParams("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            values,
            ..Self::zeros(width, height)
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Local coordinates of the center of cell `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> LocalXY {
        pixel_center(self.origin_local, self.meters_per_pixel, self.height, row, col)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        encode_pgm(self.width, self.height, &bytes)
    }

    /// Pixels at or above mid-gray are positive.
    pub fn from_pgm(data: &[u8]) -> Result<Self, RasterError> {
        let (w, h, bytes) = decode_pgm(data)?;
        let values = bytes.iter().map(|&b| (b >= 128) as u8).collect();
        Ok(Self {
            values,
            ..Self::zeros(w, h)
        })
    }

    pub fn load_pgm(path: &Path) -> Result<Self, RasterError> {
        Self::from_pgm(&std::fs::read(path)?)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::File::create(path)?.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Real-valued map with the same geometry as [`Mask`], values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub meters_per_pixel: f64,
    pub origin_local: LocalXY,
}

impl ProbMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            meters_per_pixel: 1.0,
            origin_local: LocalXY::default(),
        }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            values: vec![v; width * height],
            ..Self::zeros(width, height)
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, RasterError> {
        if values.len() != width * height {
            return Err(RasterError::Shape(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RasterError::InvalidParams(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            values,
            ..Self::zeros(width, height)
        })
    }

    /// Map over the frame's localization grid.
    pub fn locmap(frame: &RegionFrame) -> Self {
        Self {
            meters_per_pixel: frame.locmap_pixel_m(),
            ..Self::zeros(frame.locmap_px, frame.locmap_px)
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn from_mask(m: &Mask) -> Self {
        Self {
            width: m.width,
            height: m.height,
            values: m.values.iter().map(|&v| v as f64).collect(),
            meters_per_pixel: m.meters_per_pixel,
            origin_local: m.origin_local,
        }
    }

    /// Linear quantization `round(255 v)`; lossy.
    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        encode_pgm(self.width, self.height, &bytes)
    }

    pub fn from_pgm(data: &[u8]) -> Result<Self, RasterError> {
        let (w, h, bytes) = decode_pgm(data)?;
        Ok(Self {
            values: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
            ..Self::zeros(w, h)
        })
    }

    pub fn load_pgm(path: &Path) -> Result<Self, RasterError> {
        Self::from_pgm(&std::fs::read(path)?)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), RasterError> {
        std::fs::File::create(path)?.write_all(&self.to_pgm())?;
        Ok(())
    }
}

fn pixel_center(origin: LocalXY, mpp: f64, height: usize, row: usize, col: usize) -> LocalXY {
    LocalXY::new(
        origin.x + (col as f64 + 0.5) * mpp,
        origin.y + ((height - 1 - row) as f64 + 0.5) * mpp,
    )
}

/// Result of rasterizing a window: the mask plus the warning-level
/// "no road touches this window" flag.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadRaster {
    pub mask: Mask,
    pub empty_window: bool,
}

pub fn rasterize_roads(
    net: &RoadNetwork,
    window_center: LocalXY,
    size_px: usize,
    meters_per_pixel: f64,
    thickness_m: f64,
) -> Result<RoadRaster, RasterError> {
    if size_px == 0 {
        return Err(RasterError::InvalidParams("window size must be >= 1".into()));
    }
    if !(thickness_m > 0.0 && thickness_m.is_finite()) {
        return Err(RasterError::InvalidParams("thickness must be > 0".into()));
    }
    if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) {
        return Err(RasterError::InvalidParams("meters per pixel must be > 0".into()));
    }
    let half_extent = size_px as f64 * meters_per_pixel / 2.0;
    let origin = LocalXY::new(window_center.x - half_extent, window_center.y - half_extent);
    let mut mask = Mask {
        width: size_px,
        height: size_px,
        values: vec![0; size_px * size_px],
        meters_per_pixel,
        origin_local: origin,
    };
    let half = thickness_m / 2.0;
    let half2 = half * half;
    let n = size_px as isize;
    // Column c has center x = ox + (c + 0.5) mpp; row r has y = oy + (n - 1 - r + 0.5) mpp.
    let col_of = |x: f64| (x - origin.x) / meters_per_pixel - 0.5;
    let row_of = |y: f64| n as f64 - 1.0 - ((y - origin.y) / meters_per_pixel - 0.5);
    let extent = size_px as f64 * meters_per_pixel;
    let candidates = net.buckets.query(
        origin.x - half,
        origin.x + extent + half,
        origin.y - half,
        origin.y + extent + half,
    );
    for s in candidates.iter().map(|&i| &net.segments[i]) {
        let (xmin, xmax) = (s.a.x.min(s.b.x) - half, s.a.x.max(s.b.x) + half);
        let (ymin, ymax) = (s.a.y.min(s.b.y) - half, s.a.y.max(s.b.y) + half);
        let c0 = col_of(xmin).ceil().max(0.0) as isize;
        let c1 = (col_of(xmax).floor() as isize).min(n - 1);
        let r0 = row_of(ymax).ceil().max(0.0) as isize;
        let r1 = (row_of(ymin).floor() as isize).min(n - 1);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for r in r0..=r1 {
            for c in c0..=c1 {
                let idx = r as usize * size_px + c as usize;
                if mask.values[idx] != 0 {
                    continue;
                }
                let p = pixel_center(origin, meters_per_pixel, size_px, r as usize, c as usize);
                if point_segment_distance2(p, s.a, s.b) <= half2 {
                    mask.values[idx] = 1;
                }
            }
        }
    }
    let empty_window = mask.values.iter().all(|&v| v == 0);
    Ok(RoadRaster { mask, empty_window })
}

/// Ground-truth localization map: 1 for cells whose center lies within
/// `radius_px` of the location's grid position, 0 elsewhere.
pub fn render_locmap_dot(
    p: GeoPoint,
    f: &RegionFrame,
    radius_px: f64,
) -> Result<ProbMap, RasterError> {
    if !(radius_px > 0.0 && radius_px.is_finite()) {
        return Err(RasterError::InvalidParams("dot radius must be > 0".into()));
    }
    if !f.contains(p) {
        return Err(GeoError::OutOfFrame { lat: p.lat, lon: p.lon }.into());
    }
    let c = local_to_locmap(latlon_to_local(p, f), f);
    Ok(render_dot_at(c, f, radius_px))
}

/// Dot centered on an arbitrary (possibly off-grid) fractional position.
pub(crate) fn render_dot_at(c: PixelCoord, f: &RegionFrame, radius_px: f64) -> ProbMap {
    let mut map = ProbMap::locmap(f);
    let n = f.locmap_px as isize;
    let r2 = radius_px * radius_px;
    let r0 = ((c.row - radius_px).ceil() as isize).max(0);
    let r1 = ((c.row + radius_px).floor() as isize).min(n - 1);
    let c0 = ((c.col - radius_px).ceil() as isize).max(0);
    let c1 = ((c.col + radius_px).floor() as isize).min(n - 1);
    for r in r0..=r1 {
        for col in c0..=c1 {
            let (dr, dc) = (r as f64 - c.row, col as f64 - c.col);
            if dr * dr + dc * dc <= r2 {
                map.set(r as usize, col as usize, 1.0);
            }
        }
    }
    map
}

fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let mut out = Vec::with_capacity(bytes.len() + 32);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(bytes, width as u32, height as u32, image::ExtendedColorType::L8)
        .expect("in-memory graymap encoding");
    out
}

/// Any PNM graymap (binary or ASCII, 8 or 16 bit), rescaled to 0..=255.
fn decode_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u8>), RasterError> {
    let img = image::load_from_memory_with_format(data, image::ImageFormat::Pnm)
        .map_err(|e| RasterError::Pgm(e.to_string()))?;
    if img.color().channel_count() != 1 {
        return Err(RasterError::Pgm(format!("expected a graymap, found {:?}", img.color())));
    }
    let g = img.into_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}
