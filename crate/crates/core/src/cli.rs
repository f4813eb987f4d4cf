//! Command-line front end.
//!
//! Machine-readable results go to standard output, diagnostics to standard
//! error. Exit codes: 0 success, 1 usage or invalid input, 2 flagged
//! samples or failed checks, 3 I/O failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::geo::{latlon_to_local, latlon_to_regression, GeoPoint, LocalXY};
use crate::icp::{refine_location, IcpParams};
use crate::locmap::{combine, decode_locmap_min_size, regression_estimate, EstimateSource};
use crate::losses::run_gradient_checks;
use crate::metrics::{iou_accuracy, localization_errors_with, relaxed_scores_norm, Norm, THRESHOLDS_M};
use crate::net::{
    format_shape_table, shape_table, uniencoder_forward, Init, NetConfig, Network, Tensor3,
};
use crate::nnmatch::{evaluate_nn_localization, l2_normalize, DescriptorIndex};
use crate::pipeline::{
    errors_from_results_csv, histogram_csv, results_csv, run_batch_with, stats_json, IcpConfig,
    PipelineConfig,
};
use crate::raster::{rasterize_roads, render_locmap_dot, Mask, ProbMap, RoadNetwork};
use crate::synth::{
    generate_city, noisy_locmap_oracle, sample_crops, CityParams, OracleParams, Split,
    DEFAULT_BLANK_PROB, DEFAULT_DOT_RADIUS_PX, DEFAULT_JITTER_BOX_M, DEFAULT_REG_SIGMA,
    DEFAULT_SIGMA_M,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FLAGGED: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "aerolocus", version, about = "Aerial geolocalization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic road network (JSON).
    SynthCity(SynthCityArgs),
    /// Sample crop centers around intersections (CSV manifest).
    SynthCrops(SynthCropsArgs),
    /// Simulate a localization map and regression output for one location.
    SynthOracle(SynthOracleArgs),
    /// Rasterize roads around a location, or a localization dot.
    Render(RenderArgs),
    /// Decode a localization map, falling back to regression when blank.
    Localize(LocalizeArgs),
    /// Refine a location estimate by aligning a road mask to the map.
    Align(AlignArgs),
    /// Relaxed precision/recall/F1 and IoU of a predicted road mask.
    Evaluate(EvaluateArgs),
    /// Localization statistics of an error column in a results CSV.
    LocStats(LocStatsArgs),
    /// Finite-difference check of every loss gradient.
    LossCheck(LossCheckArgs),
    /// Layer-by-layer output shapes and parameter counts.
    NetShapes(NetShapesArgs),
    /// Segmentation forward pass on a grayscale image.
    NetForward(NetForwardArgs),
    /// Build a descriptor index from the crops of a manifest.
    NnBuild(NnBuildArgs),
    /// Match crops of a manifest against a descriptor index.
    NnQuery(NnQueryArgs),
    /// Run the full batch pipeline and write its report.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct SynthCityArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CityParams::default().blocks_x)]
    pub blocks_x: usize,
    #[arg(long, default_value_t = CityParams::default().blocks_y)]
    pub blocks_y: usize,
    #[arg(long, default_value_t = CityParams::default().block_m)]
    pub block_m: f64,
    #[arg(long, default_value_t = CityParams::default().jitter_m)]
    pub jitter_m: f64,
    #[arg(long, default_value_t = CityParams::default().drop_prob)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = CityParams::default().diag_prob)]
    pub diag_prob: f64,
}

#[derive(Args, Debug)]
pub struct SynthCropsArgs {
    #[arg(long)]
    pub roads: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub crop_px: usize,
    #[arg(long, default_value_t = DEFAULT_JITTER_BOX_M)]
    pub box_m: f64,
    /// Manifest path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthOracleArgs {
    #[arg(long)]
    pub roads: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub lon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_M)]
    pub sigma_m: f64,
    #[arg(long, default_value_t = DEFAULT_BLANK_PROB)]
    pub blank_prob: f64,
    #[arg(long, default_value_t = DEFAULT_REG_SIGMA)]
    pub reg_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_DOT_RADIUS_PX)]
    pub dot_radius_px: f64,
    /// Localization map output (PGM).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub roads: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub lon: f64,
    #[arg(long, default_value_t = 512)]
    pub size_px: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mpp: f64,
    #[arg(long, default_value_t = 5.0)]
    pub thickness_m: f64,
    /// Render the frame's localization grid with a dot instead of roads.
    #[arg(long)]
    pub locmap: bool,
    #[arg(long, default_value_t = DEFAULT_DOT_RADIUS_PX)]
    pub radius_px: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    /// Road network whose frame defines the localization grid.
    #[arg(long)]
    pub roads: PathBuf,
    #[arg(long)]
    pub map: PathBuf,
    /// Regression output in [0, 100]; used when the map is blank.
    #[arg(long, allow_hyphen_values = true)]
    pub rx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub ry: Option<f64>,
    #[arg(long, default_value_t = crate::locmap::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub min_component_size: usize,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub roads: PathBuf,
    /// North-up road mask centered on the true location (PGM).
    #[arg(long)]
    pub mask: PathBuf,
    /// Estimate to refine.
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub lon: f64,
    #[arg(long, default_value_t = IcpConfig::default().window_px)]
    pub window_px: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mpp: f64,
    #[arg(long, default_value_t = IcpConfig::default().stride_px)]
    pub stride_px: usize,
    #[arg(long, default_value_t = IcpConfig::default().max_iter)]
    pub max_iter: usize,
    #[arg(long, default_value_t = IcpConfig::default().tol_px)]
    pub tol_px: f64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_RHO)]
    pub rho: u32,
    /// euclidean or chebyshev
    #[arg(long, default_value = "euclidean")]
    pub norm: String,
}

#[derive(Args, Debug)]
pub struct LocStatsArgs {
    /// Results CSV written by `run`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "err_post_m")]
    pub column: String,
    /// Restrict to one pre-alignment source (segmentation or fallback).
    #[arg(long)]
    pub source: Option<String>,
    /// Comma-separated thresholds in meters.
    #[arg(long, value_delimiter = ',', default_values_t = THRESHOLDS_M.to_vec())]
    pub thresholds: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct LossCheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct NetShapesArgs {
    #[arg(long, default_value_t = 512)]
    pub input_size: usize,
    #[arg(long, default_value_t = crate::net::DEFAULT_BASE_WIDTH)]
    pub base_width: usize,
}

#[derive(Args, Debug)]
pub struct NetSource {
    /// Weights sidecar; a seeded initialization is used when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Base width of the seeded network.
    #[arg(long, default_value_t = crate::net::DEFAULT_BASE_WIDTH)]
    pub base_width: usize,
}

#[derive(Args, Debug)]
pub struct NetForwardArgs {
    #[command(flatten)]
    pub net: NetSource,
    #[arg(long)]
    pub input: PathBuf,
    /// Probability map output (PGM).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NnBuildArgs {
    #[command(flatten)]
    pub net: NetSource,
    #[arg(long)]
    pub roads: PathBuf,
    #[arg(long)]
    pub crops: PathBuf,
    /// train, test or all
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, default_value_t = 64)]
    pub crop_px: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mpp: f64,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct NnQueryArgs {
    #[command(flatten)]
    pub net: NetSource,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub roads: PathBuf,
    #[arg(long)]
    pub crops: PathBuf,
    /// train, test or all
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 64)]
    pub crop_px: usize,
    #[arg(long, default_value_t = 1.0)]
    pub mpp: f64,
    #[arg(long)]
    pub normalize: bool,
    /// Statistics output (JSON).
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Pipeline configuration (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Flagged(String),
    Io(String),
}

type Res = Result<i32, Failure>;

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

fn read_bytes(p: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
}

fn read_text(p: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
}

fn write_bytes(p: &Path, data: &[u8]) -> Result<(), Failure> {
    std::fs::write(p, data).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
}

fn load_roads(p: &Path) -> Result<RoadNetwork, Failure> {
    RoadNetwork::from_json(&read_text(p)?).map_err(usage)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Io(format!("standard output: {e}")))
}

fn emit_json(out: &mut dyn Write, v: &serde_json::Value) -> Result<(), Failure> {
    emit(out, &(serde_json::to_string_pretty(v).map_err(usage)? + "\n"))
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit output streams.
pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Flagged(m) => (EXIT_FLAGGED, m),
                Failure::Io(m) => (EXIT_IO, m),
            };
            let _ = writeln!(err, "error: {msg}");
            code
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Res {
    match cmd {
        Command::SynthCity(a) => synth_city(a),
        Command::SynthCrops(a) => synth_crops(a, out),
        Command::SynthOracle(a) => synth_oracle(a, out),
        Command::Render(a) => render(a, err),
        Command::Localize(a) => localize(a, out),
        Command::Align(a) => align(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::LocStats(a) => loc_stats(a, out),
        Command::LossCheck(a) => loss_check(a, out),
        Command::NetShapes(a) => net_shapes(a, out),
        Command::NetForward(a) => net_forward(a),
        Command::NnBuild(a) => nn_build(a, err),
        Command::NnQuery(a) => nn_query(a, out),
        Command::Run(a) => run(a, out, err),
    }
}

fn synth_city(a: SynthCityArgs) -> Res {
    let p = CityParams {
        seed: a.seed,
        blocks_x: a.blocks_x,
        blocks_y: a.blocks_y,
        block_m: a.block_m,
        jitter_m: a.jitter_m,
        drop_prob: a.drop_prob,
        diag_prob: a.diag_prob,
    };
    let net = generate_city(&p, &Default::default()).map_err(usage)?;
    write_bytes(&a.out, net.to_json().as_bytes())?;
    Ok(EXIT_OK)
}

pub const MANIFEST_HEADER: [&str; 6] = ["id", "lat", "lon", "split", "x_m", "y_m"];

fn synth_crops(a: SynthCropsArgs, out: &mut dyn Write) -> Res {
    let net = load_roads(&a.roads)?;
    let crops = sample_crops(&net, a.n, a.crop_px, a.box_m, a.seed).map_err(usage)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).map_err(usage)?;
    for c in &crops {
        w.write_record([
            c.id.to_string(),
            c.true_location.lat.to_string(),
            c.true_location.lon.to_string(),
            c.split.as_str().to_string(),
            c.window_center.x.to_string(),
            c.window_center.y.to_string(),
        ])
        .map_err(usage)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
    match a.out {
        Some(p) => write_bytes(&p, &bytes)?,
        None => emit(out, &String::from_utf8_lossy(&bytes))?,
    }
    Ok(EXIT_OK)
}

struct ManifestRow {
    id: usize,
    location: GeoPoint,
    split: Split,
    center: LocalXY,
}

fn read_manifest(p: &Path, split: &str) -> Result<Vec<ManifestRow>, Failure> {
    let keep = match split {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "all" => None,
        other => return Err(usage(format!("unknown split {other:?}"))),
    };
    let text = read_text(p)?;
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(usage)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64, Failure> {
            field(i)
                .parse()
                .map_err(|_| usage(format!("bad manifest value {:?}", field(i))))
        };
        let split = match field(3) {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(usage(format!("bad split {other:?}"))),
        };
        if keep.is_some_and(|k| k != split) {
            continue;
        }
        rows.push(ManifestRow {
            id: field(0).parse().map_err(usage)?,
            location: GeoPoint::new(num(1)?, num(2)?),
            split,
            center: LocalXY::new(num(4)?, num(5)?),
        });
    }
    Ok(rows)
}

fn synth_oracle(a: SynthOracleArgs, out: &mut dyn Write) -> Res {
    let net = load_roads(&a.roads)?;
    let p = OracleParams {
        sigma_m: a.sigma_m,
        blank_prob: a.blank_prob,
        reg_sigma: a.reg_sigma,
        dot_radius_px: a.dot_radius_px,
        seed: a.seed,
    };
    let o = noisy_locmap_oracle(GeoPoint::new(a.lat, a.lon), net.frame(), &p).map_err(usage)?;
    write_bytes(&a.out, &o.map.to_pgm())?;
    emit_json(out, &json!({ "rx": o.regression.0, "ry": o.regression.1, "blank": o.blank }))?;
    Ok(EXIT_OK)
}

fn render(a: RenderArgs, err: &mut dyn Write) -> Res {
    let net = load_roads(&a.roads)?;
    let p = GeoPoint::new(a.lat, a.lon);
    let bytes = if a.locmap {
        render_locmap_dot(p, net.frame(), a.radius_px)
            .map_err(usage)?
            .to_pgm()
    } else {
        let r = rasterize_roads(
            &net,
            latlon_to_local(p, net.frame()),
            a.size_px,
            a.mpp,
            a.thickness_m,
        )
        .map_err(usage)?;
        if r.empty_window {
            let _ = writeln!(err, "warning: no road touches the window");
        }
        r.mask.to_pgm()
    };
    write_bytes(&a.out, &bytes)?;
    Ok(EXIT_OK)
}

fn localize(a: LocalizeArgs, out: &mut dyn Write) -> Res {
    let net = load_roads(&a.roads)?;
    let f = net.frame();
    let map = ProbMap::from_pgm(&read_bytes(&a.map)?).map_err(usage)?;
    let seg = decode_locmap_min_size(&map, f, a.threshold, a.min_component_size).map_err(usage)?;
    let est = match (seg, a.rx, a.ry) {
        (seg, Some(rx), Some(ry)) => combine(seg, (rx, ry), f).map_err(usage)?,
        (Some(s), None, None) => s,
        (None, None, None) => {
            emit_json(out, &json!({ "blank": true }))?;
            return Err(Failure::Flagged("blank map and no regression output".into()));
        }
        _ => return Err(usage("--rx and --ry must be given together")),
    };
    emit_json(out, &serde_json::to_value(est).map_err(usage)?)?;
    Ok(EXIT_OK)
}

fn align(a: AlignArgs, out: &mut dyn Write) -> Res {
    let net = load_roads(&a.roads)?;
    let f = net.frame();
    let mask = Mask::from_pgm(&read_bytes(&a.mask)?).map_err(usage)?;
    let reg = latlon_to_regression(GeoPoint::new(a.lat, a.lon), f).map_err(usage)?;
    let est = regression_estimate(reg, f, EstimateSource::Regression).map_err(usage)?;
    let params = IcpParams {
        pred_stride_px: a.stride_px,
        max_iter: a.max_iter,
        tol_px: a.tol_px,
        ..IcpParams::default()
    };
    let r = refine_location(&est, &mask, &net, a.window_px, a.mpp, &params).map_err(usage)?;
    emit_json(
        out,
        &json!({
            "status": r.status.as_str(),
            "lat": r.estimate.position.lat,
            "lon": r.estimate.position.lon,
            "shift_e_m": r.shift_m.0,
            "shift_n_m": r.shift_m.1,
            "alignment": r.alignment,
        }),
    )?;
    if r.refined() {
        Ok(EXIT_OK)
    } else {
        Err(Failure::Flagged(format!("not refined: {}", r.status.as_str())))
    }
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Res {
    let pred = Mask::from_pgm(&read_bytes(&a.pred)?).map_err(usage)?;
    let gt = Mask::from_pgm(&read_bytes(&a.gt)?).map_err(usage)?;
    let norm: Norm = a.norm.parse().map_err(usage)?;
    let s = relaxed_scores_norm(&pred, &gt, a.rho, norm).map_err(usage)?;
    let (iou, acc) = iou_accuracy(&pred, &gt).map_err(usage)?;
    emit_json(
        out,
        &json!({
            "precision": s.precision,
            "recall": s.recall,
            "f1": s.f1,
            "rho": s.rho,
            "iou": iou,
            "accuracy": acc,
        }),
    )?;
    Ok(EXIT_OK)
}

fn loc_stats(a: LocStatsArgs, out: &mut dyn Write) -> Res {
    let text = read_text(&a.input)?;
    let errs = errors_from_results_csv(&text, &a.column, a.source.as_deref()).map_err(usage)?;
    let s = localization_errors_with(&errs, &a.thresholds).map_err(usage)?;
    emit_json(out, &serde_json::to_value(s).map_err(usage)?)?;
    Ok(EXIT_OK)
}

fn loss_check(a: LossCheckArgs, out: &mut dyn Write) -> Res {
    let rows = run_gradient_checks(a.instances, a.seed);
    let mut text = format!("{:<14} {:>9} {:>14} {:>10} result\n", "loss", "instances", "max_rel_error", "tolerance");
    for r in &rows {
        text.push_str(&format!(
            "{:<14} {:>9} {:>14.3e} {:>10.0e} {}\n",
            r.loss,
            r.instances,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    emit(out, &text)?;
    if rows.iter().all(|r| r.passed()) {
        Ok(EXIT_OK)
    } else {
        Err(Failure::Flagged("gradient check failed".into()))
    }
}

fn net_shapes(a: NetShapesArgs, out: &mut dyn Write) -> Res {
    let reg_side = if a.input_size % 64 == 0 { a.input_size } else { 64 };
    let cfg = NetConfig {
        base_width: a.base_width,
        input_size: reg_side,
    };
    let rows = shape_table(&cfg, a.input_size).map_err(usage)?;
    emit(out, &format_shape_table(&rows))?;
    Ok(EXIT_OK)
}

fn load_net(s: &NetSource, input_size: usize) -> Result<Network, Failure> {
    match &s.weights {
        Some(p) => Network::from_bytes(&read_bytes(p)?).map_err(usage),
        None => {
            let side = (input_size.div_ceil(64) * 64).max(64);
            let cfg = NetConfig {
                base_width: s.base_width,
                input_size: side,
            };
            Network::new(cfg, Init::Uniform { seed: s.seed }).map_err(usage)
        }
    }
}

fn net_forward(a: NetForwardArgs) -> Res {
    let img = ProbMap::from_pgm(&read_bytes(&a.input)?).map_err(usage)?;
    let net = load_net(&a.net, img.width.max(img.height))?;
    let p = net
        .forward_seg(&Tensor3::from_gray(&img, 3))
        .map_err(usage)?;
    write_bytes(&a.out, &p.to_pgm())?;
    Ok(EXIT_OK)
}

fn crop_descriptor(
    net: &Network,
    roads: &RoadNetwork,
    center: LocalXY,
    crop_px: usize,
    mpp: f64,
    normalize: bool,
) -> Result<Vec<f64>, Failure> {
    let mask = rasterize_roads(roads, center, crop_px, mpp, 5.0)
        .map_err(usage)?
        .mask;
    let x = Tensor3::from_gray(&ProbMap::from_mask(&mask), 3);
    let enc = uniencoder_forward(&x, &net.encoder).map_err(usage)?;
    let mut d = enc.final_map.global_average_pool();
    if normalize {
        l2_normalize(&mut d);
    }
    Ok(d)
}

fn nn_build(a: NnBuildArgs, err: &mut dyn Write) -> Res {
    let roads = load_roads(&a.roads)?;
    let rows = read_manifest(&a.crops, &a.split)?;
    let net = load_net(&a.net, a.crop_px)?;
    let mut idx = DescriptorIndex::new(net.config.context_width());
    for r in &rows {
        let d = crop_descriptor(&net, &roads, r.center, a.crop_px, a.mpp, a.normalize)?;
        idx.push(&d, r.location).map_err(usage)?;
    }
    write_bytes(&a.out, &idx.to_bytes())?;
    let _ = writeln!(err, "indexed {} crops, dimension {}", idx.len(), idx.dim());
    Ok(EXIT_OK)
}

fn nn_query(a: NnQueryArgs, out: &mut dyn Write) -> Res {
    let roads = load_roads(&a.roads)?;
    let idx = DescriptorIndex::from_bytes(&read_bytes(&a.index)?).map_err(usage)?;
    let rows = read_manifest(&a.crops, &a.split)?;
    let net = load_net(&a.net, a.crop_px)?;
    let mut queries = Vec::with_capacity(rows.len());
    for r in &rows {
        queries.push((
            crop_descriptor(&net, &roads, r.center, a.crop_px, a.mpp, a.normalize)?,
            r.location,
        ));
    }
    let (errors, stats) = evaluate_nn_localization(&idx, &queries, roads.frame()).map_err(usage)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "split", "match_index", "match_lat", "match_lon", "distance", "error_m"])
        .map_err(usage)?;
    for ((r, (q, _)), e) in rows.iter().zip(&queries).zip(&errors) {
        let m = idx.query_1nn(q).map_err(usage)?;
        w.write_record([
            r.id.to_string(),
            r.split.as_str().to_string(),
            m.index.to_string(),
            m.location.lat.to_string(),
            m.location.lon.to_string(),
            m.distance.to_string(),
            e.to_string(),
        ])
        .map_err(usage)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Io(e.to_string()))?;
    emit(out, &String::from_utf8_lossy(&bytes))?;
    if let Some(p) = a.stats {
        let text = serde_json::to_string_pretty(&stats).map_err(usage)? + "\n";
        write_bytes(&p, text.as_bytes())?;
    }
    Ok(EXIT_OK)
}

fn run(a: RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Res {
    let cfg = match &a.config {
        Some(p) => PipelineConfig::from_json(&read_text(p)?).map_err(usage)?,
        None => PipelineConfig::default(),
    };
    let net = match &cfg.roads_path {
        Some(p) => load_roads(p)?,
        None => generate_city(&cfg.city, &cfg.frame).map_err(usage)?,
    };
    if let crate::pipeline::Stage1::Net { weights } = &cfg.stage1 {
        read_bytes(weights)?;
    }
    let rep = run_batch_with(&cfg, &net).map_err(usage)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Io(format!("{}: {e}", a.out.display())))?;
    write_bytes(&a.out.join("results.csv"), results_csv(&rep.results).map_err(usage)?.as_bytes())?;
    let stats = stats_json(&rep.stats).map_err(usage)?;
    write_bytes(&a.out.join("stats.json"), stats.as_bytes())?;
    write_bytes(&a.out.join("histogram.csv"), histogram_csv(&rep.stats).as_bytes())?;
    emit(out, &stats)?;
    if rep.stats.flagged > 0 {
        let _ = writeln!(err, "{} of {} samples flagged", rep.stats.flagged, rep.stats.samples);
        if cfg.flagged_exit {
            return Ok(EXIT_FLAGGED);
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let mut argv = vec!["aerolocus"];
        argv.extend_from_slice(args);
        let code = dispatch_to(argv, &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn help_lists_every_flag() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands() {
            let help = sub.clone().render_long_help().to_string();
            for arg in sub.get_arguments() {
                if let Some(long) = arg.get_long() {
                    assert!(help.contains(&format!("--{long}")), "{} --{long}", sub.get_name());
                }
            }
        }
    }

    #[test]
    fn unknown_subcommand_and_flag_are_usage_errors() {
        let (code, _, err) = call(&["frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"));
        assert_eq!(call(&["loss-check", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(call(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn loss_check_passes() {
        let (code, out, _) = call(&["loss-check"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.matches("PASS").count(), 4);
        assert!(!out.contains("FAIL"));
    }

    #[test]
    fn net_shapes_lists_dilated_rows() {
        let (code, out, _) = call(&["net-shapes", "--input-size", "512"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.matches("64x64x512").count(), 6);
    }

    #[test]
    fn missing_file_is_io_failure() {
        let (code, _, err) = call(&["loc-stats", "--input", "/nonexistent/results.csv"]);
        assert_eq!(code, EXIT_IO);
        assert!(err.contains("error"));
    }
}
