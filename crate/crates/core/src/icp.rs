//! Translation-only iterative closest point.
//!
//! Predicted road pixels are sampled on a lattice, matched one-directionally
//! to the nearest reference pixel, and the translation is reset so that the
//! predicted centroid lands on the centroid of its matches. Reference sets
//! are indexed with a uniform grid; small sets are searched exhaustively.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{latlon_to_local, local_to_latlon, local_to_locmap, LocalXY};
use crate::locmap::{EstimateSource, LocationEstimate};
use crate::raster::{Mask, RasterError, RoadNetwork};

/// Lattice spacing for sampling point sets out of masks.
pub const DEFAULT_STRIDE_PX: usize = 10;
/// Lattice spacing used for predicted masks during refinement.
pub const DEFAULT_PRED_STRIDE_PX: usize = 2;
pub const DEFAULT_REF_SPACING_PX: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL_PX: f64 = 0.05;
/// Reference sets smaller than this are searched exhaustively.
pub const BRUTE_FORCE_BELOW: usize = 2000;

#[derive(Error, Debug)]
pub enum IcpError {
    #[error("mask has no positive pixel on the sampling lattice")]
    EmptyMask,
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Points in pixel units, `x` along columns and `y` along rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<(f64, f64)>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
        (sx / n, sy / n)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> PointSet {
        PointSet {
            points: self.points.iter().map(|&(x, y)| (x + dx, y + dy)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Cumulative shift (dx, dy) in pixels mapping pred onto ref.
    pub translation: (f64, f64),
    pub iterations: usize,
    pub final_mean_nn_dist: f64,
    pub converged: bool,
    /// Mean nearest-neighbor distance at the start of every iteration, then
    /// at the returned translation.
    pub mean_nn_history: Vec<f64>,
    /// Same as `mean_nn_history` for squared distances.
    pub mean_sq_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub pred_stride_px: usize,
    /// Spacing of reference samples along map centerlines.
    pub ref_spacing_px: f64,
    pub max_iter: usize,
    pub tol_px: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            pred_stride_px: DEFAULT_PRED_STRIDE_PX,
            ref_spacing_px: DEFAULT_REF_SPACING_PX,
            max_iter: DEFAULT_MAX_ITER,
            tol_px: DEFAULT_TOL_PX,
        }
    }
}

pub fn sample_points(m: &Mask, stride_px: usize) -> Result<PointSet, IcpError> {
    if stride_px == 0 {
        return Err(IcpError::InvalidStride);
    }
    let mut points = Vec::new();
    for r in (0..m.height).step_by(stride_px) {
        for c in (0..m.width).step_by(stride_px) {
            if m.values[r * m.width + c] != 0 {
                points.push((c as f64, r as f64));
            }
        }
    }
    if points.is_empty() {
        return Err(IcpError::EmptyMask);
    }
    Ok(PointSet { points })
}

/// Nearest-neighbor index. Ties resolve to the lowest point index in both
/// the grid and the exhaustive path.
#[derive(Debug, Clone)]
pub struct NearestIndex {
    points: Vec<(f64, f64)>,
    grid: Option<Grid>,
}

#[derive(Debug, Clone)]
struct Grid {
    cell: f64,
    x0: f64,
    y0: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl NearestIndex {
    pub fn new(points: &PointSet, cell_px: f64) -> Self {
        let pts = points.points.clone();
        let grid = (pts.len() >= BRUTE_FORCE_BELOW).then(|| Grid::build(&pts, cell_px));
        Self { points: pts, grid }
    }

    pub fn brute_force(points: &PointSet) -> Self {
        Self { points: points.points.clone(), grid: None }
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: (f64, f64)) -> (usize, f64) {
        match &self.grid {
            Some(g) => g.nearest(&self.points, q),
            None => brute_nearest(&self.points, q),
        }
    }
}

fn d2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

fn brute_nearest(points: &[(f64, f64)], q: (f64, f64)) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &p) in points.iter().enumerate() {
        let d = d2(p, q);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

impl Grid {
    fn build(points: &[(f64, f64)], cell: f64) -> Self {
        let cell = cell.max(1.0);
        let (mut x0, mut y0, mut x1, mut y1) =
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let cols = ((x1 - x0) / cell).floor() as usize + 1;
        let rows = ((y1 - y0) / cell).floor() as usize + 1;
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, &(x, y)) in points.iter().enumerate() {
            let c = (((x - x0) / cell).floor() as usize).min(cols - 1);
            let r = (((y - y0) / cell).floor() as usize).min(rows - 1);
            cells[r * cols + c].push(i as u32);
        }
        Self { cell, x0, y0, cols, rows, cells }
    }

    fn nearest(&self, points: &[(f64, f64)], q: (f64, f64)) -> (usize, f64) {
        let qc = ((q.0 - self.x0) / self.cell).floor() as i64;
        let qr = ((q.1 - self.y0) / self.cell).floor() as i64;
        let (cols, rows) = (self.cols as i64, self.rows as i64);
        // rings beyond this radius cannot contain any cell
        let max_ring = qc.max(cols - 1 - qc).max(qr).max(rows - 1 - qr).max(0);
        let mut best = (usize::MAX, f64::INFINITY);
        let visit = |r: i64, c: i64, best: &mut (usize, f64)| {
            if r < 0 || c < 0 || r >= rows || c >= cols {
                return;
            }
            for &i in &self.cells[(r * cols + c) as usize] {
                let d = d2(points[i as usize], q);
                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d);
                }
            }
        };
        // a point outside the grid needs the rings that reach into it first
        let start = (-qc).max(qc - (cols - 1)).max(-qr).max(qr - (rows - 1)).max(0);
        for k in 0..=max_ring {
            if k == 0 {
                visit(qr, qc, &mut best);
            } else {
                for c in qc - k..=qc + k {
                    visit(qr - k, c, &mut best);
                    visit(qr + k, c, &mut best);
                }
                for r in qr - k + 1..=qr + k - 1 {
                    visit(r, qc - k, &mut best);
                    visit(r, qc + k, &mut best);
                }
            }
            // anything in ring k + 1 is at least k cells away
            if k >= start && best.0 != usize::MAX {
                let reach = k as f64 * self.cell;
                if best.1 < reach * reach {
                    break;
                }
            }
        }
        best
    }
}

fn match_pass(pred: &PointSet, index: &NearestIndex, t: (f64, f64)) -> ((f64, f64), f64, f64) {
    let (mut sx, mut sy, mut sd, mut sd2) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in &pred.points {
        let (i, d) = index.nearest((x + t.0, y + t.1));
        let m = index.points[i];
        sx += m.0;
        sy += m.1;
        sd += d.sqrt();
        sd2 += d;
    }
    let n = pred.len() as f64;
    ((sx / n, sy / n), sd / n, sd2 / n)
}

/// Translation-only ICP from `pred` onto `reference`, starting at zero.
pub fn icp_translate(
    pred: &PointSet,
    reference: &PointSet,
    max_iter: usize,
    tol_px: f64,
) -> Result<AlignmentResult, IcpError> {
    if pred.is_empty() || reference.is_empty() {
        return Err(IcpError::EmptyPointSet);
    }
    let index = NearestIndex::new(reference, DEFAULT_STRIDE_PX as f64);
    icp_with_index(pred, &index, (0.0, 0.0), max_iter, tol_px)
}

/// Step halvings tried before an iteration is declared stationary.
pub const MAX_HALVINGS: usize = 10;

/// ICP against a prebuilt index, starting from translation `init`.
///
/// Each iteration moves toward the translation that makes the centroids
/// coincide. A move that would raise the mean nearest-neighbor distance is
/// halved until it does not; if no halving helps the run stops as
/// converged. Any partial move also lowers the squared cost of the current
/// matches, so both recorded histories are non-increasing.
pub fn icp_with_index(
    pred: &PointSet,
    index: &NearestIndex,
    init: (f64, f64),
    max_iter: usize,
    tol_px: f64,
) -> Result<AlignmentResult, IcpError> {
    if pred.is_empty() || index.points.is_empty() {
        return Err(IcpError::EmptyPointSet);
    }
    let pc = pred.centroid();
    let mut t = init;
    let (mut mc, mut md, mut md2) = match_pass(pred, index, t);
    let mut mean_nn_history = vec![md];
    let mut mean_sq_history = vec![md2];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let delta = (mc.0 - pc.0 - t.0, mc.1 - pc.1 - t.1);
        let full = delta.0.hypot(delta.1);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = (t.0 + alpha * delta.0, t.1 + alpha * delta.1);
            let (c_mc, c_md, c_md2) = match_pass(pred, index, cand);
            if c_md <= md {
                t = cand;
                (mc, md, md2) = (c_mc, c_md, c_md2);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        mean_nn_history.push(md);
        mean_sq_history.push(md2);
        if alpha * full < tol_px {
            converged = true;
            break;
        }
    }
    Ok(AlignmentResult {
        translation: t,
        iterations,
        final_mean_nn_dist: md,
        converged,
        mean_nn_history,
        mean_sq_history,
    })
}

/// Points every `spacing_px` along the road centerlines that fall inside a
/// `window_px` square window centered at `center`, in window pixel
/// coordinates (x along columns, y down the rows, cell centers at integers).
pub fn centerline_points(
    net: &RoadNetwork,
    center: LocalXY,
    window_px: usize,
    meters_per_pixel: f64,
    spacing_px: f64,
) -> PointSet {
    let n = window_px as f64;
    let half = n * meters_per_pixel / 2.0;
    let (ox, oy) = (center.x - half, center.y - half);
    let to_px = |q: LocalXY| ((q.x - ox) / meters_per_pixel - 0.5, n - 0.5 - (q.y - oy) / meters_per_pixel);
    let inside = |(x, y): (f64, f64)| x >= -0.5 && y >= -0.5 && x <= n - 0.5 && y <= n - 0.5;
    let mut points = Vec::new();
    for road in net.local_roads() {
        for w in road.windows(2) {
            let (a, b) = (to_px(w[0]), to_px(w[1]));
            let (xmin, xmax) = (a.0.min(b.0), a.0.max(b.0));
            let (ymin, ymax) = (a.1.min(b.1), a.1.max(b.1));
            if xmax < -0.5 || ymax < -0.5 || xmin > n - 0.5 || ymin > n - 0.5 {
                continue;
            }
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            let k = (len / spacing_px).ceil().max(1.0) as usize;
            for i in 0..=k {
                let u = i as f64 / k as f64;
                let p = (a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1));
                if inside(p) {
                    points.push(p);
                }
            }
        }
    }
    PointSet { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Refined,
    EmptyWindow,
    EmptyMask,
    /// The recovered shift leaves the overlap margin of the window.
    OutOfWindow,
}

impl RefineStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefineStatus::Refined => "refined",
            RefineStatus::EmptyWindow => "empty_window",
            RefineStatus::EmptyMask => "empty_mask",
            RefineStatus::OutOfWindow => "out_of_window",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    /// The refined estimate, or the input unchanged when not refined.
    pub estimate: LocationEstimate,
    pub status: RefineStatus,
    /// Applied shift in local meters (east, north).
    pub shift_m: (f64, f64),
    pub alignment: Option<AlignmentResult>,
}

impl RefineOutcome {
    pub fn refined(&self) -> bool {
        self.status == RefineStatus::Refined
    }
}

/// Aligns a north-up road mask, assumed centered on the true location, to
/// the map road centerlines in a `window_px` window around `est`.
pub fn refine_location(
    est: &LocationEstimate,
    pred_roads: &Mask,
    net: &RoadNetwork,
    window_px: usize,
    meters_per_pixel: f64,
    params: &IcpParams,
) -> Result<RefineOutcome, IcpError> {
    if !(meters_per_pixel > 0.0 && meters_per_pixel.is_finite()) || window_px == 0 {
        return Err(RasterError::InvalidParams("window and pixel size must be positive".into()).into());
    }
    let frame = net.frame();
    let unrefined = |status| RefineOutcome {
        estimate: *est,
        status,
        shift_m: (0.0, 0.0),
        alignment: None,
    };
    let e = latlon_to_local(est.position, frame);
    let reference = centerline_points(net, e, window_px, meters_per_pixel, params.ref_spacing_px);
    if reference.is_empty() {
        return Ok(unrefined(RefineStatus::EmptyWindow));
    }
    let pred = match sample_points(pred_roads, params.pred_stride_px) {
        Ok(p) => p,
        Err(IcpError::EmptyMask) => return Ok(unrefined(RefineStatus::EmptyMask)),
        Err(err) => return Err(err),
    };
    let off_x = (window_px as f64 - pred_roads.width as f64) / 2.0;
    let off_y = (window_px as f64 - pred_roads.height as f64) / 2.0;
    let pred = pred.translated(off_x, off_y);
    let index = NearestIndex::new(&reference, DEFAULT_STRIDE_PX as f64);
    let result = icp_with_index(&pred, &index, (0.0, 0.0), params.max_iter, params.tol_px)?;
    let (tx, ty) = result.translation;
    if tx.abs() > off_x.max(0.0) || ty.abs() > off_y.max(0.0) {
        let mut out = unrefined(RefineStatus::OutOfWindow);
        out.alignment = Some(result);
        return Ok(out);
    }
    let shift_m = (tx * meters_per_pixel, -ty * meters_per_pixel);
    let q = LocalXY::new(e.x + shift_m.0, e.y + shift_m.1);
    let estimate = LocationEstimate {
        position: local_to_latlon(q, frame),
        pixel: local_to_locmap(q, frame),
        source: EstimateSource::Refined,
        component_size: est.component_size,
    };
    Ok(RefineOutcome {
        estimate,
        status: RefineStatus::Refined,
        shift_m,
        alignment: Some(result),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;
    use proptest::prelude::*;

    type Seg = ((f64, f64), (f64, f64));

    /// Draws `n` random segments into a `size` square mask with the given
    /// half width and returns the segments with it.
    fn random_roads_with_segments(
        rng: &mut XorShift64Star,
        size: usize,
        n: usize,
        half: f64,
    ) -> (Mask, Vec<Seg>) {
        let mut thick = Mask::zeros(size, size);
        let s = size as f64;
        let mut segs = Vec::new();
        for _ in 0..n {
            let a = (rng.uniform(0.0, s), rng.uniform(0.0, s));
            let b = (rng.uniform(0.0, s), rng.uniform(0.0, s));
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len2 = dx * dx + dy * dy;
            for r in 0..size {
                for c in 0..size {
                    let p = (c as f64, r as f64);
                    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
                    if d2(p, (a.0 + t * dx, a.1 + t * dy)) <= half * half {
                        thick.values[r * size + c] = 1;
                    }
                }
            }
            segs.push((a, b));
        }
        (thick, segs)
    }

    fn dense_segments(segs: &[Seg], spacing: f64) -> PointSet {
        let mut points = Vec::new();
        for &(a, b) in segs {
            let k = ((b.0 - a.0).hypot(b.1 - a.1) / spacing).ceil() as usize;
            for i in 0..=k {
                let u = i as f64 / k as f64;
                points.push((a.0 + u * (b.0 - a.0), a.1 + u * (b.1 - a.1)));
            }
        }
        PointSet { points }
    }

    fn random_roads(rng: &mut XorShift64Star, size: usize, n: usize) -> Mask {
        random_roads_with_segments(rng, size, n, 2.5).0
    }

    #[test]
    fn lattice_sampling() {
        let mut m = Mask::zeros(20, 20);
        m.values.iter_mut().for_each(|v| *v = 1);
        let p = sample_points(&m, 10).unwrap();
        assert_eq!(p.points, vec![(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)]);
        assert_eq!(sample_points(&m, 1).unwrap().len(), 400);
        assert!(matches!(sample_points(&Mask::zeros(5, 5), 1), Err(IcpError::EmptyMask)));
        assert!(matches!(sample_points(&m, 0), Err(IcpError::InvalidStride)));
        let mut rng = XorShift64Star::new(3);
        for _ in 0..50 {
            let m = random_roads(&mut rng, 64, 3);
            let stride = 1 + rng.below(12);
            let brute = (0..64 * 64)
                .filter(|&i| m.values[i] != 0 && (i / 64) % stride == 0 && (i % 64) % stride == 0)
                .count();
            match sample_points(&m, stride) {
                Ok(p) => assert_eq!(p.len(), brute),
                Err(_) => assert_eq!(brute, 0),
            }
        }
    }

    #[test]
    fn grid_index_matches_brute_force() {
        let mut rng = XorShift64Star::new(17);
        for _ in 0..20 {
            let n = 2000 + rng.below(3000);
            let pts = PointSet {
                points: (0..n)
                    .map(|_| (rng.below(300) as f64, rng.below(300) as f64))
                    .collect(),
            };
            let cell = [1.0, 4.0, 10.0, 37.0][rng.below(4)];
            let grid = NearestIndex::new(&pts, cell);
            assert!(grid.grid.is_some());
            let brute = NearestIndex::brute_force(&pts);
            for _ in 0..300 {
                let q = (rng.uniform(-80.0, 380.0), rng.uniform(-80.0, 380.0));
                assert_eq!(grid.nearest(q), brute.nearest(q));
            }
            // integer queries produce exact distance ties
            for _ in 0..300 {
                let q = (rng.below(300) as f64 + 0.5, rng.below(300) as f64);
                assert_eq!(grid.nearest(q), brute.nearest(q));
            }
        }
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let mut rng = XorShift64Star::new(4);
        let m = random_roads(&mut rng, 128, 5);
        let p = sample_points(&m, 1).unwrap();
        let r = icp_translate(&p, &p, 100, 0.05).unwrap();
        assert_eq!(r.translation, (0.0, 0.0));
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.final_mean_nn_dist, 0.0);
    }

    #[test]
    fn recovers_shift_against_centerlines() {
        let mut rng = XorShift64Star::new(21);
        for _ in 0..20 {
            let (thick, segs) = random_roads_with_segments(&mut rng, 200, 10, 2.5);
            let reference = dense_segments(&segs, 0.1);
            let pred = sample_points(&thick, 2).unwrap().translated(-7.0, 3.0);
            let r = icp_translate(&pred, &reference, 100, 0.05).unwrap();
            assert!(r.converged);
            let err = (r.translation.0 - 7.0).hypot(r.translation.1 + 3.0);
            assert!(err < 0.5, "{:?}", r.translation);
        }
    }

    #[test]
    fn recovers_shift_of_identical_sets() {
        let mut rng = XorShift64Star::new(5);
        let m = random_roads(&mut rng, 160, 5);
        let pred = sample_points(&m, 10).unwrap();
        let r = icp_translate(&pred, &pred.translated(7.0, -3.0), 100, 0.05).unwrap();
        assert!((r.translation.0 - 7.0).abs() < 0.5 && (r.translation.1 + 3.0).abs() < 0.5);
    }

    #[test]
    fn periodic_pattern_locks_to_wrong_period() {
        // vertical lines every 20 px: a full-period shift is invisible
        let mut m = Mask::zeros(200, 100);
        for r in 0..100 {
            for c in (0..200).filter(|c| c % 20 < 3) {
                m.set(r, c, true);
            }
        }
        let reference = sample_points(&m, 1).unwrap();
        let mut inner = Mask::zeros(200, 100);
        for r in 0..100 {
            for c in 40..160 {
                inner.set(r, c, m.get(r, c));
            }
        }
        let pred = sample_points(&inner, 10).unwrap().translated(-20.0, 0.0);
        let r = icp_translate(&pred, &reference, 100, 0.05).unwrap();
        assert!(r.converged);
        assert_eq!(r.final_mean_nn_dist, 0.0);
        assert!((r.translation.0 - 20.0).abs() > 10.0, "{:?}", r.translation);
    }

    #[test]
    fn distances_never_increase() {
        let mut rng = XorShift64Star::new(99);
        for _ in 0..30 {
            let m = random_roads(&mut rng, 160, 6);
            let reference = sample_points(&m, 1).unwrap();
            let shift = (rng.uniform(-30.0, 30.0), rng.uniform(-30.0, 30.0));
            let pred = sample_points(&m, 10).unwrap().translated(shift.0, shift.1);
            let r = icp_translate(&pred, &reference, 100, 0.05).unwrap();
            assert!(r.iterations <= 100);
            for w in r.mean_sq_history.windows(2) {
                assert!(w[1] <= w[0], "{:?}", r.mean_sq_history);
            }
            for w in r.mean_nn_history.windows(2) {
                assert!(w[1] <= w[0], "{:?}", r.mean_nn_history);
            }
        }
    }

    fn city() -> RoadNetwork {
        use crate::synth::{generate_city, CityParams};
        generate_city(&CityParams { seed: 3, ..CityParams::default() }, &crate::RegionFrame::default())
            .unwrap()
    }

    fn estimate_at(net: &RoadNetwork, q: LocalXY) -> LocationEstimate {
        let f = net.frame();
        LocationEstimate {
            position: local_to_latlon(q, f),
            pixel: local_to_locmap(q, f),
            source: EstimateSource::Segmentation,
            component_size: 1,
        }
    }

    #[test]
    fn centerline_samples_lie_on_roads_in_window() {
        let net = city();
        let c = latlon_to_local(net.intersections()[40], net.frame());
        let pts = centerline_points(&net, c, 200, 1.0, 0.5);
        assert!(!pts.is_empty());
        let m = crate::raster::rasterize_roads(&net, c, 200, 1.0, 2.0).unwrap().mask;
        for &(x, y) in &pts.points {
            assert!((-0.5..=199.5).contains(&x) && (-0.5..=199.5).contains(&y));
            let (r, col) = (y.round().clamp(0.0, 199.0) as usize, x.round().clamp(0.0, 199.0) as usize);
            assert!(m.get(r, col), "({x}, {y})");
        }
    }

    #[test]
    fn refinement_cases() {
        use crate::raster::rasterize_roads;
        let net = city();
        let f = *net.frame();
        let truth = latlon_to_local(net.intersections()[100], &f);
        let truth = LocalXY::new(truth.x + 13.0, truth.y - 21.0);
        let pred = rasterize_roads(&net, truth, 512, 1.0, 5.0).unwrap().mask;
        let params = IcpParams::default();

        let exact = refine_location(&estimate_at(&net, truth), &pred, &net, 712, 1.0, &params).unwrap();
        assert!(exact.refined());
        assert_eq!(exact.estimate.source, EstimateSource::Refined);
        assert!(latlon_to_local(exact.estimate.position, &f).distance(&truth) < 0.5);

        let off = LocalXY::new(truth.x + 30.0, truth.y - 27.03);
        assert!((off.distance(&truth) - 40.38).abs() < 0.01);
        let moved = refine_location(&estimate_at(&net, off), &pred, &net, 712, 1.0, &params).unwrap();
        assert!(moved.refined());
        assert!(latlon_to_local(moved.estimate.position, &f).distance(&truth) < 1.0);

        let far = LocalXY::new(truth.x + 400.0, truth.y);
        let lost = refine_location(&estimate_at(&net, far), &pred, &net, 712, 1.0, &params).unwrap();
        assert!(!lost.refined() || latlon_to_local(lost.estimate.position, &f).distance(&truth) > 100.0);

        let corner = LocalXY::new(50.0, 50.0);
        let empty = refine_location(&estimate_at(&net, corner), &pred, &net, 712, 1.0, &params).unwrap();
        assert_eq!(empty.status, RefineStatus::EmptyWindow);
        assert_eq!(empty.estimate, estimate_at(&net, corner));

        let blank = refine_location(&estimate_at(&net, truth), &Mask::zeros(512, 512), &net, 712, 1.0, &params).unwrap();
        assert_eq!(blank.status, RefineStatus::EmptyMask);
    }

    #[test]
    fn empty_inputs() {
        let p = PointSet { points: vec![(0.0, 0.0)] };
        let empty = PointSet::default();
        assert!(matches!(icp_translate(&empty, &p, 10, 0.05), Err(IcpError::EmptyPointSet)));
        assert!(matches!(icp_translate(&p, &empty, 10, 0.05), Err(IcpError::EmptyPointSet)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn translation_equivariance(seed in any::<u64>(), a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let mut rng = XorShift64Star::new(seed);
            let (m, segs) = random_roads_with_segments(&mut rng, 96, 4, 2.5);
            let reference = dense_segments(&segs, 0.37);
            let pred = sample_points(&m, 3).unwrap().translated(rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0));
            let base = icp_translate(&pred, &reference, 100, 0.05).unwrap();
            let moved = NearestIndex::new(&reference.translated(a, b), 10.0);
            let shifted = icp_with_index(&pred, &moved, (a, b), 100, 0.05).unwrap();
            prop_assert!((shifted.translation.0 - base.translation.0 - a).abs() < 1e-7);
            prop_assert!((shifted.translation.1 - base.translation.1 - b).abs() < 1e-7);
            prop_assert_eq!(shifted.iterations, base.iterations);
        }
    }
}
