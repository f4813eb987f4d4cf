//! End-to-end batch: road mask, localization map and regression oracle,
//! combination, ICP refinement and error reporting.
//!
//! Random streams: crop centers use `derive_seed(seed, 0)`; the stage-two
//! oracle of sample `i` uses `derive_seed(derive_seed(seed, 1) ^ oracle.seed, i)`;
//! mask perturbations use `derive_seed(derive_seed(seed, 2), i)`. Samples are
//! processed in parallel and reported in id order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{planar_distance_m, GeoPoint, RegionFrame};
use crate::icp::{
    refine_location, IcpParams, RefineStatus, DEFAULT_MAX_ITER, DEFAULT_PRED_STRIDE_PX,
    DEFAULT_REF_SPACING_PX, DEFAULT_TOL_PX,
};
use crate::locmap::{combine, decode_locmap_min_size, EstimateSource, LocationEstimate};
use crate::metrics::{localization_errors_with, LocStats, MetricsError, DEFAULT_RHO, THRESHOLDS_M};
use crate::net::{NetError, Network, Tensor3};
use crate::raster::{rasterize_roads, Mask, ProbMap, RasterError, RoadNetwork};
use crate::rng::derive_seed;
use crate::synth::{
    generate_city, noisy_locmap_oracle, perturb_mask, random_perturbation, sample_crops,
    CityParams, CropSample, OracleParams, Split, SynthError, DEFAULT_JITTER_BOX_M,
};

pub const DEFAULT_SAMPLES: usize = 3000;
pub const DEFAULT_CROP_PX: usize = 512;
pub const DEFAULT_WINDOW_PX: usize = 712;
pub const DEFAULT_ROAD_WIDTH_M: f64 = 5.0;
pub const THREADS_ENV: &str = "AEROLOCUS_THREADS";

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source of the predicted road masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stage1 {
    /// Rasterized ground-truth roads, optionally rotated and scaled by
    /// uniform draws within the given bounds.
    Oracle {
        #[serde(default)]
        max_rot_deg: f64,
        #[serde(default)]
        max_scale: f64,
    },
    /// Segmentation network applied to the rasterized roads.
    Net { weights: PathBuf },
}

impl Default for Stage1 {
    fn default() -> Self {
        Stage1::Oracle {
            max_rot_deg: 0.0,
            max_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    /// Lattice stride of prediction samples.
    pub stride_px: usize,
    pub ref_spacing_px: f64,
    pub tol_px: f64,
    pub max_iter: usize,
    pub window_px: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            stride_px: DEFAULT_PRED_STRIDE_PX,
            ref_spacing_px: DEFAULT_REF_SPACING_PX,
            tol_px: DEFAULT_TOL_PX,
            max_iter: DEFAULT_MAX_ITER,
            window_px: DEFAULT_WINDOW_PX,
        }
    }
}

impl IcpConfig {
    pub fn params(&self) -> IcpParams {
        IcpParams {
            pred_stride_px: self.stride_px,
            ref_spacing_px: self.ref_spacing_px,
            max_iter: self.max_iter,
            tol_px: self.tol_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub rho: u32,
    pub thresholds: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            thresholds: THRESHOLDS_M.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub frame: RegionFrame,
    /// Road network JSON; a city is generated from `city` when absent.
    pub roads_path: Option<PathBuf>,
    pub city: CityParams,
    pub samples: usize,
    pub crop_px: usize,
    pub jitter_box_m: f64,
    pub meters_per_pixel: f64,
    pub road_width_m: f64,
    pub stage1: Stage1,
    pub oracle: OracleParams,
    pub icp: IcpConfig,
    pub metrics: MetricsConfig,
    pub locmap_threshold: f64,
    /// Largest components smaller than this count as blank maps.
    pub min_component_size: usize,
    /// Whether `run` exits with status 2 when a sample is flagged.
    pub flagged_exit: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame: RegionFrame::default(),
            roads_path: None,
            city: CityParams::default(),
            samples: DEFAULT_SAMPLES,
            crop_px: DEFAULT_CROP_PX,
            jitter_box_m: DEFAULT_JITTER_BOX_M,
            meters_per_pixel: 1.0,
            road_width_m: DEFAULT_ROAD_WIDTH_M,
            stage1: Stage1::default(),
            oracle: OracleParams::default(),
            icp: IcpConfig::default(),
            metrics: MetricsConfig::default(),
            locmap_threshold: crate::locmap::DEFAULT_THRESHOLD,
            min_component_size: 1,
            flagged_exit: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.frame
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.oracle.validate()?;
        if self.samples == 0 {
            return bad("samples must be positive");
        }
        if self.crop_px == 0 || self.icp.window_px < self.crop_px {
            return bad("crop must be positive and no larger than the ICP window");
        }
        if !(self.meters_per_pixel > 0.0 && self.meters_per_pixel.is_finite()) {
            return bad("meters_per_pixel must be positive");
        }
        if !(self.road_width_m > 0.0 && self.road_width_m.is_finite()) {
            return bad("road_width_m must be positive");
        }
        if !(self.jitter_box_m >= 0.0 && self.jitter_box_m.is_finite()) {
            return bad("jitter_box_m must be nonnegative");
        }
        if !(self.locmap_threshold > 0.0 && self.locmap_threshold < 1.0) {
            return bad("locmap_threshold must lie in (0, 1)");
        }
        if self.icp.stride_px == 0 || self.icp.max_iter == 0 {
            return bad("ICP stride and iteration cap must be positive");
        }
        if !(self.icp.tol_px >= 0.0 && self.icp.ref_spacing_px > 0.0) {
            return bad("ICP tolerance must be nonnegative and spacing positive");
        }
        if self.metrics.thresholds.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("thresholds must be positive");
        }
        if let Stage1::Oracle {
            max_rot_deg,
            max_scale,
        } = self.stage1
        {
            if !(0.0..=10.0).contains(&max_rot_deg) || !(0.0..=0.1).contains(&max_scale) {
                return bad("perturbation bounds must satisfy rot <= 10 deg, scale <= 0.1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleResult {
    pub id: usize,
    pub split: Split,
    pub true_loc: GeoPoint,
    /// The stage-two oracle emitted an empty map.
    pub oracle_blank: bool,
    pub est_pre: Option<LocationEstimate>,
    pub est_post: Option<LocationEstimate>,
    pub err_pre_m: Option<f64>,
    pub err_post_m: Option<f64>,
    pub status: Option<RefineStatus>,
    pub shift_m: (f64, f64),
    pub icp_iterations: usize,
    pub error: Option<String>,
}

impl SampleResult {
    /// Pre-alignment source (segmentation or fallback).
    pub fn source(&self) -> Option<EstimateSource> {
        self.est_pre.map(|e| e.source)
    }

    /// Not refined, for whatever reason.
    pub fn flagged(&self) -> bool {
        self.status != Some(RefineStatus::Refined)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsPair {
    pub pre: Option<LocStats>,
    pub post: Option<LocStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub samples: usize,
    pub flagged: usize,
    pub blank: usize,
    pub pre: Option<LocStats>,
    pub post: Option<LocStats>,
    /// Keyed by pre-alignment source name.
    pub by_source: BTreeMap<String, StatsPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub results: Vec<SampleResult>,
    pub stats: BatchStats,
}

/// Thread count from `AEROLOCUS_THREADS`; 0, unset or unparsable means auto.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    net: &'a RoadNetwork,
    seg_net: Option<Network>,
    oracle_base: u64,
    perturb_base: u64,
}

impl Context<'_> {
    fn road_mask(&self, sample: &CropSample) -> Result<Mask, PipelineError> {
        let cfg = self.cfg;
        let mask = rasterize_roads(
            self.net,
            sample.window_center,
            cfg.crop_px,
            cfg.meters_per_pixel,
            cfg.road_width_m,
        )?
        .mask;
        match (&cfg.stage1, &self.seg_net) {
            (_, Some(net)) => {
                let x = Tensor3::from_gray(&ProbMap::from_mask(&mask), 3);
                let p = net.forward_seg(&x)?;
                let mut out = mask.clone();
                for (o, v) in out.values.iter_mut().zip(&p.values) {
                    *o = (*v >= 0.5) as u8;
                }
                Ok(out)
            }
            (
                Stage1::Oracle {
                    max_rot_deg,
                    max_scale,
                },
                None,
            ) if *max_rot_deg > 0.0 || *max_scale > 0.0 => {
                let s = derive_seed(self.perturb_base, sample.id as u64);
                let (rot, scale) = random_perturbation(s, *max_rot_deg, *max_scale);
                Ok(perturb_mask(&mask, rot, scale, s)?)
            }
            _ => Ok(mask),
        }
    }

    fn process(&self, sample: &CropSample) -> SampleResult {
        let mut r = SampleResult {
            id: sample.id,
            split: sample.split,
            true_loc: sample.true_location,
            oracle_blank: false,
            est_pre: None,
            est_post: None,
            err_pre_m: None,
            err_post_m: None,
            status: None,
            shift_m: (0.0, 0.0),
            icp_iterations: 0,
            error: None,
        };
        if let Err(e) = self.fill(sample, &mut r) {
            r.error = Some(e);
        }
        r
    }

    fn fill(&self, sample: &CropSample, r: &mut SampleResult) -> Result<(), String> {
        let cfg = self.cfg;
        let frame = self.net.frame();
        let oracle = OracleParams {
            seed: self.oracle_base,
            ..cfg.oracle
        }
        .for_sample(sample.id as u64);
        let out = noisy_locmap_oracle(sample.true_location, frame, &oracle).map_err(|e| e.to_string())?;
        r.oracle_blank = out.blank;
        let seg = decode_locmap_min_size(&out.map, frame, cfg.locmap_threshold, cfg.min_component_size)
            .map_err(|e| e.to_string())?;
        let pre = combine(seg, out.regression, frame).map_err(|e| e.to_string())?;
        r.est_pre = Some(pre);
        r.err_pre_m = Some(planar_distance_m(pre.position, sample.true_location, frame));
        let mask = self.road_mask(sample).map_err(|e| e.to_string())?;
        let refined = refine_location(
            &pre,
            &mask,
            self.net,
            cfg.icp.window_px,
            cfg.meters_per_pixel,
            &cfg.icp.params(),
        )
        .map_err(|e| e.to_string())?;
        r.status = Some(refined.status);
        r.shift_m = refined.shift_m;
        r.icp_iterations = refined.alignment.as_ref().map_or(0, |a| a.iterations);
        r.est_post = Some(refined.estimate);
        r.err_post_m = Some(planar_distance_m(
            refined.estimate.position,
            sample.true_location,
            frame,
        ));
        Ok(())
    }
}

fn stats_of(errors: &[f64], thresholds: &[f64]) -> Result<Option<LocStats>, PipelineError> {
    if errors.is_empty() {
        return Ok(None);
    }
    Ok(Some(localization_errors_with(errors, thresholds)?))
}

pub fn summarize(results: &[SampleResult], thresholds: &[f64]) -> Result<BatchStats, PipelineError> {
    let errs = |keep: &dyn Fn(&SampleResult) -> bool, post: bool| -> Vec<f64> {
        results
            .iter()
            .filter(|r| keep(r))
            .filter_map(|r| if post { r.err_post_m } else { r.err_pre_m })
            .collect()
    };
    let all = |_: &SampleResult| true;
    let mut by_source = BTreeMap::new();
    for src in [EstimateSource::Segmentation, EstimateSource::Fallback] {
        let keep = |r: &SampleResult| r.source() == Some(src);
        if results.iter().any(keep) {
            by_source.insert(
                src.as_str().to_string(),
                StatsPair {
                    pre: stats_of(&errs(&keep, false), thresholds)?,
                    post: stats_of(&errs(&keep, true), thresholds)?,
                },
            );
        }
    }
    Ok(BatchStats {
        samples: results.len(),
        flagged: results.iter().filter(|r| r.flagged()).count(),
        blank: results.iter().filter(|r| r.oracle_blank).count(),
        pre: stats_of(&errs(&all, false), thresholds)?,
        post: stats_of(&errs(&all, true), thresholds)?,
        by_source,
    })
}

pub fn load_network(cfg: &PipelineConfig) -> Result<RoadNetwork, PipelineError> {
    match &cfg.roads_path {
        Some(p) => Ok(RoadNetwork::load(p)?),
        None => Ok(generate_city(&cfg.city, &cfg.frame)?),
    }
}

/// Runs every sample of the batch against `net`.
pub fn run_batch_with(cfg: &PipelineConfig, net: &RoadNetwork) -> Result<BatchReport, PipelineError> {
    cfg.validate()?;
    let seg_net = match &cfg.stage1 {
        Stage1::Net { weights } => Some(Network::load(weights)?),
        Stage1::Oracle { .. } => None,
    };
    let samples = sample_crops(net, cfg.samples, cfg.crop_px, cfg.jitter_box_m, derive_seed(cfg.seed, 0))?;
    let ctx = Context {
        cfg,
        net,
        seg_net,
        oracle_base: derive_seed(cfg.seed, 1) ^ cfg.oracle.seed,
        perturb_base: derive_seed(cfg.seed, 2),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads_from_env())
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let results: Vec<SampleResult> =
        pool.install(|| samples.par_iter().map(|s| ctx.process(s)).collect());
    let stats = summarize(&results, &cfg.metrics.thresholds)?;
    Ok(BatchReport { results, stats })
}

pub fn run_batch(cfg: &PipelineConfig) -> Result<BatchReport, PipelineError> {
    cfg.validate()?;
    let net = load_network(cfg)?;
    run_batch_with(cfg, &net)
}

pub const RESULTS_HEADER: [&str; 17] = [
    "id",
    "split",
    "true_lat",
    "true_lon",
    "source",
    "oracle_blank",
    "pre_lat",
    "pre_lon",
    "err_pre_m",
    "status",
    "post_lat",
    "post_lon",
    "err_post_m",
    "shift_e_m",
    "shift_n_m",
    "icp_iterations",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(results: &[SampleResult]) -> Result<String, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record([
            r.id.to_string(),
            r.split.as_str().to_string(),
            r.true_loc.lat.to_string(),
            r.true_loc.lon.to_string(),
            opt(r.source().map(|s| s.as_str())),
            r.oracle_blank.to_string(),
            opt(r.est_pre.map(|e| e.position.lat)),
            opt(r.est_pre.map(|e| e.position.lon)),
            opt(r.err_pre_m),
            opt(r.status.map(|s| s.as_str())),
            opt(r.est_post.map(|e| e.position.lat)),
            opt(r.est_post.map(|e| e.position.lon)),
            opt(r.err_post_m),
            r.shift_m.0.to_string(),
            r.shift_m.1.to_string(),
            r.icp_iterations.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Error column of a results CSV, optionally restricted to one source.
/// Rows with an empty value in the column are skipped.
pub fn errors_from_results_csv(
    text: &str,
    column: &str,
    source: Option<&str>,
) -> Result<Vec<f64>, PipelineError> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let headers = rd.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PipelineError::Config(format!("no column {name:?}")))
    };
    let col = find(column)?;
    let src_col = find("source")?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if source.is_some_and(|s| rec.get(src_col) != Some(s)) {
            continue;
        }
        let v = rec.get(col).unwrap_or("");
        if v.is_empty() {
            continue;
        }
        out.push(
            v.parse()
                .map_err(|_| PipelineError::Config(format!("bad number {v:?} in {column}")))?,
        );
    }
    Ok(out)
}

/// Side-by-side pre and post histograms in 2.5 m bins.
pub fn histogram_csv(stats: &BatchStats) -> String {
    let empty = Vec::new();
    let pre = stats.pre.as_ref().map_or(&empty, |s| &s.histogram);
    let post = stats.post.as_ref().map_or(&empty, |s| &s.histogram);
    let bin = stats
        .pre
        .as_ref()
        .or(stats.post.as_ref())
        .map_or(crate::metrics::BIN_M, |s| s.bin_m);
    let mut out = String::from("bin_start_m,bin_end_m,pre,post\n");
    for i in 0..pre.len().max(post.len()) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            i as f64 * bin,
            (i + 1) as f64 * bin,
            pre.get(i).copied().unwrap_or(0),
            post.get(i).copied().unwrap_or(0)
        );
    }
    out
}

pub fn stats_json(stats: &BatchStats) -> Result<String, PipelineError> {
    Ok(serde_json::to_string_pretty(stats)? + "\n")
}

/// Writes `results.csv`, `stats.json` and `histogram.csv` into `dir`.
pub fn write_report(report: &BatchReport, dir: &Path) -> Result<(), PipelineError> {
    if report.results.is_empty() {
        return Err(PipelineError::Config("no results to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), results_csv(&report.results)?)?;
    std::fs::write(dir.join("stats.json"), stats_json(&report.stats)?)?;
    std::fs::write(dir.join("histogram.csv"), histogram_csv(&report.stats))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::localization_errors;

    fn small_config(samples: usize) -> PipelineConfig {
        PipelineConfig {
            samples,
            city: CityParams {
                blocks_x: 8,
                blocks_y: 8,
                ..CityParams::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        let partial = PipelineConfig::from_json(r#"{"samples": 7, "stage1": {"kind": "oracle", "max_rot_deg": 2}}"#)
            .unwrap();
        assert_eq!(partial.samples, 7);
        assert!(PipelineConfig::from_json(r#"{"sampels": 7}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"samples": 0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"icp": {"window_px": 100}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"oracle": {"blank_prob": 2.0}}"#).is_err());
    }

    #[test]
    fn noiseless_run_aligns_exactly() {
        let cfg = PipelineConfig {
            oracle: OracleParams {
                sigma_m: 0.0,
                blank_prob: 0.0,
                ..OracleParams::default()
            },
            ..small_config(300)
        };
        let rep = run_batch(&cfg).unwrap();
        assert_eq!(rep.results.len(), 300);
        let post = rep.stats.post.as_ref().unwrap();
        assert!(post.mean_m < 0.5, "post mean {}", post.mean_m);
        assert!(rep.results.iter().all(|r| r.source() == Some(EstimateSource::Segmentation)));
    }

    #[test]
    fn all_blank_falls_back() {
        let cfg = PipelineConfig {
            oracle: OracleParams {
                blank_prob: 1.0,
                ..OracleParams::default()
            },
            ..small_config(40)
        };
        let rep = run_batch(&cfg).unwrap();
        for r in &rep.results {
            assert_eq!(r.source(), Some(EstimateSource::Fallback));
            assert!(r.oracle_blank);
            assert!(r.err_post_m.unwrap().is_finite());
        }
    }

    #[test]
    fn alignment_never_materially_worse() {
        let rep = run_batch(&small_config(200)).unwrap();
        for r in &rep.results {
            let (Some(pre), Some(post)) = (r.err_pre_m, r.err_post_m) else {
                continue;
            };
            if r.status == Some(RefineStatus::Refined) && pre < 100.0 {
                assert!(post <= pre + 0.5, "sample {}: {pre} -> {post}", r.id);
            }
        }
    }

    #[test]
    fn report_files_are_consistent() {
        let rep = run_batch(&small_config(120)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&rep, dir.path()).unwrap();
        let csv_text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv_text.lines().count(), 121);
        let stats: BatchStats =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.json")).unwrap())
                .unwrap();
        assert_eq!(stats, rep.stats);
        let post = errors_from_results_csv(&csv_text, "err_post_m", None).unwrap();
        assert_eq!(Some(localization_errors(&post).unwrap()), stats.post);
        let seg = errors_from_results_csv(&csv_text, "err_pre_m", Some("segmentation")).unwrap();
        assert_eq!(
            Some(localization_errors(&seg).unwrap()),
            stats.by_source["segmentation"].pre
        );
        let hist = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
        let (mut pre_sum, mut post_sum) = (0, 0);
        for line in hist.lines().skip(1) {
            let f: Vec<usize> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            pre_sum += f[0];
            post_sum += f[1];
        }
        assert_eq!((pre_sum, post_sum), (120, 120));
    }

    #[test]
    fn batch_is_deterministic_across_thread_counts() {
        let cfg = small_config(60);
        let a = results_csv(&run_batch(&cfg).unwrap().results).unwrap();
        let b = results_csv(&run_batch(&cfg).unwrap().results).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbed_masks_still_run() {
        let cfg = PipelineConfig {
            stage1: Stage1::Oracle {
                max_rot_deg: 2.0,
                max_scale: 0.02,
            },
            ..small_config(20)
        };
        let rep = run_batch(&cfg).unwrap();
        assert!(rep.results.iter().all(|r| r.error.is_none()));
    }
}
