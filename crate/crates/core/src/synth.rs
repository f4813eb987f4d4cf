//! Seeded synthetic cities, crop sampling and a noisy localization oracle.
//!
//! Every generator consumes the [`crate::rng`] stream in a fixed order, so
//! outputs are a pure function of parameters and seed. Per-sample streams
//! come from [`derive_seed`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    latlon_to_local, latlon_to_regression, local_to_latlon, local_to_locmap, GeoError, GeoPoint,
    LocalXY, RegionFrame,
};
use crate::locmap::{decode_locmap, DEFAULT_THRESHOLD};
use crate::raster::{render_dot_at, Mask, Polyline, ProbMap, RasterError, RoadNetwork};
use crate::rng::{derive_seed, XorShift64Star};

/// Fraction of crops assigned to the test split.
pub const TEST_FRACTION: f64 = 0.1;
pub const DEFAULT_JITTER_BOX_M: f64 = 100.0;

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("degenerate parameters: {0}")]
    DegenerateParams(String),
    #[error("generated network has no roads")]
    EmptyNetwork,
    #[error("network has no intersections to sample around")]
    NoIntersections,
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CityParams {
    pub seed: u64,
    pub blocks_x: usize,
    pub blocks_y: usize,
    pub block_m: f64,
    pub jitter_m: f64,
    pub drop_prob: f64,
    pub diag_prob: f64,
}

impl Default for CityParams {
    fn default() -> Self {
        // 28 x 28 blocks of 300 m cover about 70 km2
        Self {
            seed: 0,
            blocks_x: 28,
            blocks_y: 28,
            block_m: 300.0,
            jitter_m: 40.0,
            drop_prob: 0.1,
            diag_prob: 0.15,
        }
    }
}

impl CityParams {
    pub fn validate(&self, f: &RegionFrame) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::DegenerateParams(m));
        if self.blocks_x == 0 || self.blocks_y == 0 {
            return bad("at least one block per axis".into());
        }
        if !(self.block_m.is_finite() && self.jitter_m >= 0.0 && self.block_m > 2.0 * self.jitter_m)
        {
            return bad(format!(
                "block_m {} must exceed twice jitter_m {}",
                self.block_m, self.jitter_m
            ));
        }
        for (name, p) in [("drop_prob", self.drop_prob), ("diag_prob", self.diag_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let w = self.blocks_x as f64 * self.block_m + 2.0 * self.jitter_m;
        let h = self.blocks_y as f64 * self.block_m + 2.0 * self.jitter_m;
        if w > f.width_m || h > f.height_m {
            return bad(format!(
                "city {w} x {h} m does not fit the {} x {} m frame",
                f.width_m, f.height_m
            ));
        }
        Ok(())
    }

    /// Area spanned by the street grid in km^2.
    pub fn area_km2(&self) -> f64 {
        self.blocks_x as f64 * self.blocks_y as f64 * self.block_m * self.block_m / 1e6
    }
}

/// Splits a line of vertices into polylines at dropped edges.
fn runs(vertices: &[LocalXY], keep: &[bool], out: &mut Vec<Vec<LocalXY>>) {
    let mut current: Vec<LocalXY> = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            if current.is_empty() {
                current.push(vertices[i]);
            }
            current.push(vertices[i + 1]);
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
}

/// Jittered street grid with edge dropout and diagonal avenues, centered in
/// the frame.
///
/// Stream order: vertex jitter (row-major, x then y), horizontal edge
/// dropout (row-major), vertical edge dropout (column-major), one inclusion
/// draw per diagonal from the lowest offset up, then dropout for the edges
/// of each included diagonal.
pub fn generate_city(p: &CityParams, f: &RegionFrame) -> Result<RoadNetwork, SynthError> {
    f.validate()?;
    p.validate(f)?;
    let mut rng = XorShift64Star::new(p.seed);
    let (nx, ny) = (p.blocks_x + 1, p.blocks_y + 1);
    let x0 = (f.width_m - p.blocks_x as f64 * p.block_m) / 2.0;
    let y0 = (f.height_m - p.blocks_y as f64 * p.block_m) / 2.0;
    let mut v = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let dx = rng.uniform(-p.jitter_m, p.jitter_m);
            let dy = rng.uniform(-p.jitter_m, p.jitter_m);
            v.push(LocalXY::new(
                x0 + i as f64 * p.block_m + dx,
                y0 + j as f64 * p.block_m + dy,
            ));
        }
    }
    let at = |i: usize, j: usize| v[j * nx + i];
    let mut lines: Vec<Vec<LocalXY>> = Vec::new();
    let mut keep_h = Vec::with_capacity(ny);
    for _ in 0..ny {
        keep_h.push((0..p.blocks_x).map(|_| !rng.bernoulli(p.drop_prob)).collect::<Vec<_>>());
    }
    let mut keep_v = Vec::with_capacity(nx);
    for _ in 0..nx {
        keep_v.push((0..p.blocks_y).map(|_| !rng.bernoulli(p.drop_prob)).collect::<Vec<_>>());
    }
    for (j, keep) in keep_h.iter().enumerate() {
        let row: Vec<LocalXY> = (0..nx).map(|i| at(i, j)).collect();
        runs(&row, keep, &mut lines);
    }
    for (i, keep) in keep_v.iter().enumerate() {
        let col: Vec<LocalXY> = (0..ny).map(|j| at(i, j)).collect();
        runs(&col, keep, &mut lines);
    }
    // diagonal k runs through vertices (i, i - k)
    let (bx, by) = (p.blocks_x as i64, p.blocks_y as i64);
    let diagonals: Vec<i64> = (-(by - 1)..bx).filter(|_| rng.bernoulli(p.diag_prob)).collect();
    for k in diagonals {
        let verts: Vec<LocalXY> = (0..nx as i64)
            .filter(|&i| (0..ny as i64).contains(&(i - k)))
            .map(|i| at(i as usize, (i - k) as usize))
            .collect();
        let keep: Vec<bool> = (1..verts.len()).map(|_| !rng.bernoulli(p.drop_prob)).collect();
        runs(&verts, &keep, &mut lines);
    }
    if lines.is_empty() {
        return Err(SynthError::EmptyNetwork);
    }
    let roads = lines
        .into_iter()
        .map(|l| Polyline::new(l.into_iter().map(|q| local_to_latlon(q, f)).collect()))
        .collect();
    Ok(RoadNetwork::new(*f, roads)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSample {
    pub id: usize,
    /// Center of the crop in local meters; the crop depicts this location.
    pub window_center: LocalXY,
    pub true_location: GeoPoint,
    pub split: Split,
}

/// Crop centers drawn uniformly in a `jitter_box_m` square around uniformly
/// chosen intersections, with an exact 90/10 train/test split.
///
/// The crop size is validated but does not affect the draw: crops are
/// rendered on demand. Per sample the stream yields the intersection index
/// and then the x and y offsets; a Fisher-Yates shuffle of the sample ids
/// follows, and the first tenth of the shuffled order forms the test split.
pub fn sample_crops(
    net: &RoadNetwork,
    n: usize,
    crop_px: usize,
    jitter_box_m: f64,
    seed: u64,
) -> Result<Vec<CropSample>, SynthError> {
    if crop_px == 0 || !(jitter_box_m >= 0.0 && jitter_box_m.is_finite()) {
        return Err(SynthError::DegenerateParams(
            "crop size must be positive and the jitter box nonnegative".into(),
        ));
    }
    let inter = net.intersections();
    if inter.is_empty() {
        return Err(SynthError::NoIntersections);
    }
    let f = net.frame();
    let mut rng = XorShift64Star::new(seed);
    let half = jitter_box_m / 2.0;
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let base = latlon_to_local(inter[rng.below(inter.len())], f);
        let dx = rng.uniform(-half, half);
        let dy = rng.uniform(-half, half);
        let c = LocalXY::new(
            (base.x + dx).clamp(0.0, f.width_m),
            (base.y + dy).clamp(0.0, f.height_m),
        );
        samples.push(CropSample {
            id,
            window_center: c,
            true_location: local_to_latlon(c, f),
            split: Split::Train,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    for &i in &order[..n_test] {
        samples[i].split = Split::Test;
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    pub sigma_m: f64,
    pub blank_prob: f64,
    pub reg_sigma: f64,
    pub dot_radius_px: f64,
    pub seed: u64,
}

/// Empty-map rate observed on the real test set.
pub const DEFAULT_BLANK_PROB: f64 = 0.073;
/// Target mean error of the decoded oracle maps before alignment.
pub const TARGET_PRE_ALIGN_MEAN_M: f64 = 9.3;
pub const DEFAULT_DOT_RADIUS_PX: f64 = 4.0;
/// Dot noise calibrated with [`calibrate_sigma_m`] against
/// [`TARGET_PRE_ALIGN_MEAN_M`] on the default frame and dot radius.
pub const DEFAULT_SIGMA_M: f64 = 2.36;
pub const DEFAULT_REG_SIGMA: f64 = 0.7;

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            sigma_m: DEFAULT_SIGMA_M,
            blank_prob: DEFAULT_BLANK_PROB,
            reg_sigma: DEFAULT_REG_SIGMA,
            dot_radius_px: DEFAULT_DOT_RADIUS_PX,
            seed: 0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma_m >= 0.0 && self.sigma_m.is_finite())
            || !(0.0..=1.0).contains(&self.blank_prob)
            || !(self.reg_sigma >= 0.0 && self.reg_sigma.is_finite())
            || !(self.dot_radius_px > 0.0 && self.dot_radius_px.is_finite())
        {
            return Err(SynthError::DegenerateParams(format!("oracle parameters {self:?}")));
        }
        Ok(())
    }

    /// Copy of these parameters seeded for sample `id`.
    pub fn for_sample(&self, id: u64) -> OracleParams {
        OracleParams { seed: derive_seed(self.seed, id), ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    pub map: ProbMap,
    pub regression: (f64, f64),
    pub blank: bool,
}

/// Simulated stage-two network output for an image taken at `true_loc`.
///
/// Stream order: one uniform for the blank decision, one Gaussian pair for
/// the dot displacement (east, north), one Gaussian pair for the regression
/// noise. All four draws happen whether or not the map is blank.
pub fn noisy_locmap_oracle(
    true_loc: GeoPoint,
    f: &RegionFrame,
    p: &OracleParams,
) -> Result<OracleOutput, SynthError> {
    p.validate()?;
    let reg = latlon_to_regression(true_loc, f)?;
    let mut rng = XorShift64Star::new(p.seed);
    let blank = rng.next_f64() < p.blank_prob;
    let (ge, gn) = rng.gaussian_pair();
    let (gx, gy) = rng.gaussian_pair();
    let regression = (
        (reg.0 + p.reg_sigma * gx).clamp(0.0, 100.0),
        (reg.1 + p.reg_sigma * gy).clamp(0.0, 100.0),
    );
    let map = if blank {
        ProbMap::locmap(f)
    } else {
        let t = latlon_to_local(true_loc, f);
        let q = LocalXY::new(
            (t.x + p.sigma_m * ge).clamp(0.0, f.width_m),
            (t.y + p.sigma_m * gn).clamp(0.0, f.height_m),
        );
        render_dot_at(local_to_locmap(q, f), f, p.dot_radius_px)
    };
    let blank = map.values.iter().all(|&v| v < DEFAULT_THRESHOLD);
    Ok(OracleOutput { map, regression, blank })
}

/// Mean decoded error in meters of the (never blank) oracle over `n`
/// locations drawn uniformly inside the frame, excluding a border of
/// `margin_m`.
pub fn oracle_mean_error_m(
    f: &RegionFrame,
    p: &OracleParams,
    n: usize,
    margin_m: f64,
    seed: u64,
) -> Result<f64, SynthError> {
    let p = OracleParams { blank_prob: 0.0, ..*p };
    let mut rng = XorShift64Star::new(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let t = LocalXY::new(
            rng.uniform(margin_m, f.width_m - margin_m),
            rng.uniform(margin_m, f.height_m - margin_m),
        );
        let g = local_to_latlon(t, f);
        let out = noisy_locmap_oracle(g, f, &p.for_sample(i as u64))?;
        if let Ok(Some(est)) = decode_locmap(&out.map, f, DEFAULT_THRESHOLD) {
            total += latlon_to_local(est.position, f).distance(&t);
            count += 1;
        }
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Bisection on `sigma_m` so that [`oracle_mean_error_m`] hits `target_m`.
/// Common random numbers make the objective monotone in practice.
pub fn calibrate_sigma_m(
    f: &RegionFrame,
    base: &OracleParams,
    target_m: f64,
    n: usize,
    seed: u64,
) -> Result<f64, SynthError> {
    let eval = |s: f64| oracle_mean_error_m(f, &OracleParams { sigma_m: s, ..*base }, n, 200.0, seed);
    let (mut lo, mut hi) = (0.0, 4.0 * target_m);
    if eval(lo)? >= target_m {
        return Ok(0.0);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? < target_m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Nearest-neighbor rotation (counterclockwise, degrees) and scaling about
/// the mask center. Rotations beyond 10 degrees and scales outside
/// [0.9, 1.1] are rejected. The seed is carried for interface symmetry with
/// the other generators; the transform itself is deterministic, and
/// [`random_perturbation`] draws parameters from a seed.
pub fn perturb_mask(m: &Mask, rot_deg: f64, scale: f64, _seed: u64) -> Result<Mask, SynthError> {
    if !(rot_deg.abs() <= 10.0) || !(0.9..=1.1).contains(&scale) {
        return Err(SynthError::DegenerateParams(format!(
            "rotation {rot_deg} deg / scale {scale} outside |rot| <= 10, scale in [0.9, 1.1]"
        )));
    }
    Ok(resample(m, rot_deg, scale))
}

/// Rotation and scale drawn uniformly in `[-max_rot, max_rot]` and
/// `[1 - max_scale, 1 + max_scale]`, in that order.
pub fn random_perturbation(seed: u64, max_rot_deg: f64, max_scale: f64) -> (f64, f64) {
    let mut rng = XorShift64Star::new(seed);
    let rot = rng.uniform(-max_rot_deg, max_rot_deg);
    let scale = rng.uniform(1.0 - max_scale, 1.0 + max_scale);
    (rot, scale)
}

pub(crate) fn resample(m: &Mask, rot_deg: f64, scale: f64) -> Mask {
    let (w, h) = (m.width, m.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (s, c) = (-rot_deg).to_radians().sin_cos();
    let mut out = Mask { values: vec![0; w * h], ..m.clone() };
    for r in 0..h {
        for col in 0..w {
            let x = col as f64 - cx;
            let y = cy - r as f64;
            let xs = (x * c - y * s) / scale;
            let ys = (x * s + y * c) / scale;
            let sc = (cx + xs).round();
            let sr = (cy - ys).round();
            if sc >= 0.0 && sr >= 0.0 && (sc as usize) < w && (sr as usize) < h {
                out.values[r * w + col] = m.values[sr as usize * w + sc as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize_roads;
    use proptest::prelude::*;

    fn grid_params(n: usize) -> CityParams {
        CityParams {
            seed: 1,
            blocks_x: n,
            blocks_y: n,
            block_m: 400.0,
            jitter_m: 0.0,
            drop_prob: 0.0,
            diag_prob: 0.0,
        }
    }

    #[test]
    fn exact_grid_intersections() {
        let f = RegionFrame::default();
        let net = generate_city(&grid_params(4), &f).unwrap();
        assert_eq!(net.intersections().len(), 25);
        assert_eq!(net.roads().len(), 10);
    }

    #[test]
    fn deterministic_json() {
        let f = RegionFrame::default();
        let p = CityParams { seed: 42, ..CityParams::default() };
        let a = generate_city(&p, &f).unwrap().to_json();
        let b = generate_city(&p, &f).unwrap().to_json();
        assert_eq!(a, b);
        let c = generate_city(&CityParams { seed: 43, ..p }, &f).unwrap().to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_params() {
        let f = RegionFrame::default();
        let all_dropped = CityParams { drop_prob: 1.0, ..CityParams::default() };
        assert!(matches!(generate_city(&all_dropped, &f), Err(SynthError::EmptyNetwork)));
        let jitter = CityParams { jitter_m: 200.0, block_m: 300.0, ..CityParams::default() };
        assert!(matches!(generate_city(&jitter, &f), Err(SynthError::DegenerateParams(_))));
        let huge = CityParams { blocks_x: 100, ..CityParams::default() };
        assert!(matches!(generate_city(&huge, &f), Err(SynthError::DegenerateParams(_))));
    }

    #[test]
    fn default_city_scale() {
        let p = CityParams::default();
        assert!((p.area_km2() - 70.0).abs() < 1.0);
    }

    #[test]
    fn nonempty_rasterization_over_seeds() {
        let f = RegionFrame::default();
        for seed in 0..100 {
            let net = generate_city(&CityParams { seed, ..CityParams::default() }, &f).unwrap();
            let crops = sample_crops(&net, 1, 512, 100.0, seed).unwrap();
            let r = rasterize_roads(&net, crops[0].window_center, 512, 1.0, 5.0).unwrap();
            assert!(!r.empty_window);
        }
    }

    #[test]
    fn crops_zero_box_hit_intersections() {
        let f = RegionFrame::default();
        let net = generate_city(&CityParams::default(), &f).unwrap();
        let pts: Vec<LocalXY> = net.intersections().iter().map(|&g| latlon_to_local(g, &f)).collect();
        for s in sample_crops(&net, 200, 512, 0.0, 5).unwrap() {
            assert!(pts.iter().any(|q| q.distance(&s.window_center) < 1e-6));
        }
        for s in sample_crops(&net, 500, 512, 100.0, 6).unwrap() {
            let d = pts.iter().map(|q| q.distance(&s.window_center)).fold(f64::INFINITY, f64::min);
            assert!(d <= 50.0 * 2f64.sqrt() + 1e-6);
        }
    }

    #[test]
    fn crop_split_fraction() {
        let f = RegionFrame::default();
        let net = generate_city(&CityParams::default(), &f).unwrap();
        let s = sample_crops(&net, 1000, 512, 100.0, 9).unwrap();
        let test = s.iter().filter(|c| c.split == Split::Test).count();
        assert!((99..=101).contains(&test));
        assert_eq!(s, sample_crops(&net, 1000, 512, 100.0, 9).unwrap());
    }

    #[test]
    fn no_intersections_error() {
        let f = RegionFrame::default();
        let p = CityParams { blocks_y: 1, blocks_x: 1, drop_prob: 0.0, ..grid_params(1) };
        let net = generate_city(&p, &f).unwrap();
        assert!(!net.intersections().is_empty());
        // a single straight road crosses nothing
        let lone = RoadNetwork::new(f, vec![net.roads()[0].clone()]).unwrap();
        assert!(matches!(sample_crops(&lone, 5, 512, 100.0, 1), Err(SynthError::NoIntersections)));
    }

    #[test]
    fn noiseless_oracle_round_trip() {
        let f = RegionFrame::default();
        let p = OracleParams { sigma_m: 0.0, blank_prob: 0.0, ..OracleParams::default() };
        let mut rng = XorShift64Star::new(12);
        let margin = p.dot_radius_px * f.locmap_pixel_m();
        for i in 0..300 {
            let t = LocalXY::new(
                rng.uniform(margin, f.width_m - margin),
                rng.uniform(margin, f.height_m - margin),
            );
            let out = noisy_locmap_oracle(local_to_latlon(t, &f), &f, &p.for_sample(i)).unwrap();
            assert!(!out.blank);
            let est = decode_locmap(&out.map, &f, 0.5).unwrap().unwrap();
            let want = local_to_locmap(t, &f);
            let err = ((est.pixel.row - want.row).powi(2) + (est.pixel.col - want.col).powi(2)).sqrt();
            assert!(err < 0.5, "{err}");
        }
    }

    #[test]
    fn border_dots_are_clipped() {
        let f = RegionFrame::default();
        let p = OracleParams { sigma_m: 0.0, blank_prob: 0.0, ..OracleParams::default() };
        let out = noisy_locmap_oracle(f.origin(), &f, &p).unwrap();
        let est = decode_locmap(&out.map, &f, 0.5).unwrap().unwrap();
        let want = local_to_locmap(LocalXY::new(0.0, 0.0), &f);
        assert!((est.pixel.row - want.row).hypot(est.pixel.col - want.col) > 1.0);
    }

    #[test]
    fn always_blank_oracle() {
        let f = RegionFrame::default();
        let p = OracleParams { blank_prob: 1.0, ..OracleParams::default() };
        for i in 0..50 {
            let out = noisy_locmap_oracle(f.origin(), &f, &p.for_sample(i)).unwrap();
            assert!(out.blank);
            assert!(out.map.values.iter().all(|&v| v == 0.0));
        }
        let outside = GeoPoint::new(f.origin_lat - 1.0, f.origin_lon);
        assert!(noisy_locmap_oracle(outside, &f, &p).is_err());
    }

    #[test]
    fn blank_rate_matches_probability() {
        let f = RegionFrame::default();
        let p = OracleParams::default();
        let c = f.center_local();
        let g = local_to_latlon(c, &f);
        let n = 20_000;
        let blanks = (0..n)
            .filter(|&i| noisy_locmap_oracle(g, &f, &p.for_sample(i)).unwrap().blank)
            .count();
        let rate = blanks as f64 / n as f64;
        assert!((rate - DEFAULT_BLANK_PROB).abs() < 0.006, "{rate}");
    }

    #[test]
    fn default_sigma_hits_target() {
        let f = RegionFrame::default();
        let mean = oracle_mean_error_m(&f, &OracleParams::default(), 3000, 200.0, 2024).unwrap();
        assert!((mean - TARGET_PRE_ALIGN_MEAN_M).abs() < 0.15 * TARGET_PRE_ALIGN_MEAN_M, "{mean}");
    }

    fn l_pattern() -> Mask {
        let mut m = Mask::zeros(16, 16);
        for r in 2..12 {
            m.set(r, 3, true);
        }
        for c in 3..9 {
            m.set(11, c, true);
        }
        m.set(2, 4, true);
        m
    }

    #[test]
    fn identity_perturbation_is_exact() {
        let m = l_pattern();
        assert_eq!(perturb_mask(&m, 0.0, 1.0, 3).unwrap(), m);
        assert!(perturb_mask(&m, 15.0, 1.0, 3).is_err());
        assert!(perturb_mask(&m, 0.0, 1.2, 3).is_err());
    }

    #[test]
    fn quarter_turn_matches_pointwise_oracle() {
        let m = l_pattern();
        let r = resample(&m, 90.0, 1.0);
        let n = 16;
        for row in 0..n {
            for col in 0..n {
                // counterclockwise: the top-left corner moves to the bottom-left
                assert_eq!(r.get(row, col), m.get(col, n - 1 - row));
            }
        }
    }

    fn dilate3(m: &Mask) -> Mask {
        let mut out = m.clone();
        for r in 0..m.height {
            for c in 0..m.width {
                let hit = (r.saturating_sub(1)..=(r + 1).min(m.height - 1)).any(|rr| {
                    (c.saturating_sub(1)..=(c + 1).min(m.width - 1)).any(|cc| m.get(rr, cc))
                });
                out.set(r, c, hit);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn scale_then_inverse_stays_in_dilation(s in 0.91f64..1.09, seed in any::<u64>()) {
            let mut rng = XorShift64Star::new(seed);
            let mut m = Mask::zeros(40, 40);
            for i in 0..m.values.len() {
                m.values[i] = rng.bernoulli(0.2) as u8;
            }
            let back = perturb_mask(&perturb_mask(&m, 0.0, s, 0).unwrap(), 0.0, 1.0 / s, 0).unwrap();
            let d = dilate3(&m);
            for i in 0..m.values.len() {
                prop_assert!(back.values[i] <= d.values[i]);
            }
        }

        #[test]
        fn crops_determined_by_seed(seed in any::<u64>()) {
            let f = RegionFrame::default();
            let net = generate_city(&grid_params(4), &f).unwrap();
            let a = sample_crops(&net, 20, 512, 100.0, seed).unwrap();
            prop_assert_eq!(a, sample_crops(&net, 20, 512, 100.0, seed).unwrap());
        }
    }
}
