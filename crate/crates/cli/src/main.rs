//! `dyntrack` command-line harness.
//!
//! Every subcommand is a pure function of its flags, input files and seed.
//! Failures print one JSON object on stderr and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use dyntrack::baselines::{self, BenchmarkInit, BenchmarkSpec, EstimatorMethod};
use dyntrack::error::Error;
use dyntrack::frame::{FrameSequence, Location, TemplateGeometry};
use dyntrack::io;
use dyntrack::lds::{identify, LdsModel, StateSequence};
use dyntrack::metrics::{compute_metrics, median};
use dyntrack::recognition::{
    self, ConfusionMatrix, RecognitionConfig, Strategy, TrainingModel, TrainingSet,
};
use dyntrack::synth::{composite_sequence, read_ground_truth_csv, ScenarioSpec};
use dyntrack::tracker::{read_track_csv, FeatureMode, Tracker, TrackerConfig};

#[derive(Parser)]
#[command(name = "dyntrack", version, about = "Dynamic template tracking and recognition")]
struct Cli {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scenario (config: scenario spec).
    Synth,
    /// Identify an LDS from a sequence of patches.
    Identify(IdentifyArgs),
    /// Track a dynamic template through a frame sequence (config: tracker).
    Track(TrackArgs),
    /// Fixed-location state estimation benchmark (config: benchmark spec).
    Estimate(EstimateArgs),
    /// Pairwise Martin distances between models.
    Martin(MartinArgs),
    /// Recognise test sequences from a manifest (config: manifest).
    Recognize(RecognizeArgs),
    /// Pixel-error metrics of a track against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Feature {
    Hist,
    Identity,
}

impl From<Feature> for FeatureMode {
    fn from(f: Feature) -> Self {
        match f {
            Feature::Hist => FeatureMode::Histogram,
            Feature::Identity => FeatureMode::Identity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    DkSsd,
    Ekf,
    Pf,
}

impl From<Method> for EstimatorMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::DkSsd => EstimatorMethod::DkSsd,
            Method::Ekf => EstimatorMethod::Ekf,
            Method::Pf => EstimatorMethod::Pf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Pinv,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    #[value(name = "tr-r")]
    TrR,
    #[value(name = "t+r")]
    TPlusR,
    #[value(name = "tr-c")]
    TrC,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::TrR => Strategy::TrackReconstruct,
            StrategyArg::TPlusR => Strategy::TrackThenClassify,
            StrategyArg::TrC => Strategy::ClassifierCost,
        }
    }
}

#[derive(Args)]
struct IdentifyArgs {
    /// Directory of `frame_NNNNN.pgm` files.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 5)]
    order: usize,
    /// Track CSV (or ground-truth CSV) giving patch centres in full frames.
    #[arg(long)]
    centers: Option<PathBuf>,
    /// Window size `ROWSxCOLS` used with `--centers`.
    #[arg(long)]
    window: Option<String>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    /// Initial centre `X,Y` in frame 0.
    #[arg(long, conflicts_with = "truth")]
    start: Option<String>,
    /// Ground-truth CSV whose first row gives the initial centre.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    feature: Option<Feature>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, value_enum, default_value = "dk-ssd")]
    method: Method,
    #[arg(long, value_enum, default_value = "pinv")]
    init: Init,
    #[arg(long, value_enum)]
    feature: Option<Feature>,
}

#[derive(Args)]
struct MartinArgs {
    /// Model JSON files.
    #[arg(required = true)]
    models: Vec<PathBuf>,
}

#[derive(Args)]
struct RecognizeArgs {
    #[arg(long, value_enum, default_value = "tr-c")]
    strategy: StrategyArg,
    #[arg(long, value_enum)]
    feature: Option<Feature>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

/// Recognition manifest. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    training: Vec<ManifestModel>,
    tests: Vec<ManifestTest>,
    #[serde(default)]
    settings: RecognitionConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestModel {
    id: String,
    label: String,
    model: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestTest {
    id: String,
    #[serde(default)]
    label: Option<String>,
    frames: PathBuf,
    start: [f64; 2],
    /// `[rows, cols]` of the tracking window.
    window: [usize; 2],
}

#[derive(Serialize)]
struct DistanceRow {
    model_i: String,
    model_j: String,
    distance: f64,
}

#[derive(Serialize)]
struct PixelErrorRow {
    frame: usize,
    err: f64,
}

#[derive(Serialize)]
struct EstimateSummary {
    method: &'static str,
    systems: usize,
    worst_median_over_band2: f64,
    final_median_error: f64,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn out_dir(cli: &Cli) -> CliResult<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::Run(Error::Io { path: dir.clone(), source: e }))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn tracker_config(cli: &Cli, feature: Option<Feature>) -> CliResult<TrackerConfig> {
    let mut cfg: TrackerConfig = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => TrackerConfig::default(),
    };
    if let Some(f) = feature {
        cfg.feature = f.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_pair(text: &str) -> CliResult<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    match parts.as_slice() {
        [a, b] => match (a.trim().parse(), b.trim().parse()) {
            (Ok(x), Ok(y)) => Ok((x, y)),
            _ => usage(format!("expected X,Y but got `{text}`")),
        },
        _ => usage(format!("expected X,Y but got `{text}`")),
    }
}

fn parse_window(text: &str) -> CliResult<TemplateGeometry> {
    let Some((r, c)) = text.split_once('x') else {
        return usage(format!("expected ROWSxCOLS but got `{text}`"));
    };
    match (r.parse(), c.parse()) {
        (Ok(rows), Ok(cols)) => Ok(TemplateGeometry::new(rows, cols)?),
        _ => usage(format!("expected ROWSxCOLS but got `{text}`")),
    }
}

/// Centres from either a track CSV or a ground-truth CSV.
fn read_centers(path: &Path) -> CliResult<Vec<Location>> {
    let header = fs::read_to_string(path)
        .map_err(|e| Failure::Run(Error::Io { path: path.to_path_buf(), source: e }))?
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();
    if header.split(',').any(|h| h == "loc_x") {
        Ok(read_track_csv(path)?.iter().map(|r| Location::new(r.loc_x, r.loc_y)).collect())
    } else {
        Ok(read_ground_truth_csv(path)?.iter().map(|r| Location::new(r.cx, r.cy)).collect())
    }
}

fn cmd_synth(cli: &Cli) -> CliResult {
    let mut spec: ScenarioSpec = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => ScenarioSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let (frames, truth) = composite_sequence(&spec)?;
    let out = out_dir(cli)?;
    io::write_sequence(out.join("frames"), &frames)?;
    truth.write_csv(out.join("ground_truth.csv"))?;
    write_text(&out.join("states.json"), &truth.states.to_json())?;
    truth.model.save(out.join("model.json"))?;
    io::write_json(out.join("scenario.json"), &spec)?;
    println!("{}", serde_json::json!({ "frames": frames.len(), "out": out }));
    Ok(())
}

fn cmd_identify(cli: &Cli, args: &IdentifyArgs) -> CliResult {
    let frames = io::read_sequence(&args.frames)?;
    let id = match (&args.centers, &args.window) {
        (Some(c), Some(w)) => {
            let geometry = parse_window(w)?;
            let centers = read_centers(c)?;
            if centers.len() != frames.len() {
                return Err(Error::Dimension {
                    context: "centres",
                    expected: frames.len(),
                    actual: centers.len(),
                }
                .into());
            }
            identify(&frames.extract_patches(&centers, geometry)?, geometry, args.order)?
        }
        (None, None) => {
            let geometry = TemplateGeometry::new(frames.height(), frames.width())?;
            let patches: Vec<DVector<f64>> = frames
                .iter()
                .map(|f| DVector::from_column_slice(&column_major(f.data(), f.width(), f.height())))
                .collect();
            identify(&patches, geometry, args.order)?
        }
        _ => return usage("--centers and --window must be given together"),
    };
    let out = out_dir(cli)?;
    id.model.save(out.join("model.json"))?;
    println!(
        "{}",
        serde_json::json!({ "order": id.model.order(), "requested_order": id.requested_order, "rank": id.rank })
    );
    Ok(())
}

/// Row-major frame data to the column-major patch layout of `TemplateGeometry`.
fn column_major(data: &[f64], width: usize, height: usize) -> Vec<f64> {
    let g = TemplateGeometry::new(height, width).expect("non-empty frame");
    (0..g.len())
        .map(|i| {
            let (row, col) = g.position(i);
            data[row * width + col]
        })
        .collect()
}

fn cmd_track(cli: &Cli, args: &TrackArgs) -> CliResult {
    let model = LdsModel::load(&args.model)?;
    let cfg = tracker_config(cli, args.feature)?;
    let frames = io::read_sequence(&args.frames)?;
    let start = match (&args.start, &args.truth) {
        (Some(s), _) => {
            let (x, y) = parse_pair(s)?;
            Location::new(x, y)
        }
        (None, Some(t)) => {
            let rows = read_ground_truth_csv(t)?;
            let Some(r) = rows.first() else {
                return usage("ground-truth CSV has no rows");
            };
            Location::new(r.cx, r.cy)
        }
        (None, None) => return usage("one of --start or --truth is required"),
    };
    let result = Tracker::new(&model, &cfg)?.track(&frames, &start)?;
    let out = out_dir(cli)?;
    result.write_csv(out.join("tracks.csv"))?;
    let states = StateSequence::new(result.states.iter().map(|s| s.state.clone()).collect(), model.order())?;
    write_text(&out.join("states.json"), &states.to_json())?;
    println!(
        "{}",
        serde_json::json!({ "frames": result.states.len(), "mean_objective": result.mean_objective, "clamped": result.any_clamped() })
    );
    Ok(())
}

fn cmd_estimate(cli: &Cli, args: &EstimateArgs) -> CliResult {
    let mut spec: BenchmarkSpec = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(f) = args.feature {
        spec.tracker.feature = f.into();
    }
    spec.tracker.validate()?;
    let method: EstimatorMethod = args.method.into();
    let init = match args.init {
        Init::Pinv => BenchmarkInit::Pinv,
        Init::Random => BenchmarkInit::Random,
    };
    let seed = cli.seed.unwrap_or(0);
    let runs = baselines::run_benchmark(&spec, method, init, seed)?;
    let mut rows = Vec::new();
    for run in &runs {
        rows.extend(run.estimate.error_rows(method, run.model_seed));
    }
    let out = out_dir(cli)?;
    io::write_csv(out.join("errors.csv"), &rows)?;

    let errors: Vec<&Vec<f64>> = runs.iter().filter_map(|r| r.estimate.errors.as_ref()).collect();
    let mut worst = 0.0_f64;
    let mut last = f64::NAN;
    if !errors.is_empty() {
        for t in 1..spec.frames {
            let normalised: Vec<f64> = runs
                .iter()
                .zip(&errors)
                .map(|(r, e)| e[t] / r.estimate.bands[1])
                .collect();
            worst = worst.max(median(&normalised)?);
        }
        last = median(&errors.iter().map(|e| e[spec.frames - 1]).collect::<Vec<_>>())?;
    }
    let summary = EstimateSummary {
        method: method.name(),
        systems: runs.len(),
        worst_median_over_band2: worst,
        final_median_error: last,
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_martin(cli: &Cli, args: &MartinArgs) -> CliResult {
    let models = args
        .models
        .iter()
        .map(LdsModel::load)
        .collect::<Result<Vec<_>, _>>()?;
    let d = recognition::martin_matrix(&models)?;
    let names: Vec<String> = args.models.iter().map(|p| p.display().to_string()).collect();
    let mut rows = Vec::new();
    for i in 0..models.len() {
        for j in 0..models.len() {
            rows.push(DistanceRow {
                model_i: names[i].clone(),
                model_j: names[j].clone(),
                distance: d[(i, j)],
            });
        }
    }
    let out = out_dir(cli)?;
    io::write_csv(out.join("distances.csv"), &rows)?;
    for i in 0..models.len() {
        let line: Vec<String> = (0..models.len()).map(|j| format!("{:.6}", d[(i, j)])).collect();
        println!("{}", line.join(" "));
    }
    Ok(())
}

fn cmd_recognize(cli: &Cli, args: &RecognizeArgs) -> CliResult {
    let Some(path) = &cli.config else {
        return usage("recognize needs --config <manifest.json>");
    };
    let manifest: Manifest = io::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut settings = manifest.settings.clone();
    if let Some(f) = args.feature {
        settings.tracker.feature = f.into();
    }
    settings.tracker.validate()?;
    let training = TrainingSet::new(
        manifest
            .training
            .iter()
            .map(|m| {
                Ok(TrainingModel {
                    id: m.id.clone(),
                    label: m.label.clone(),
                    model: LdsModel::load(base.join(&m.model))?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?,
    )?;
    let strategy: Strategy = args.strategy.into();
    let out = out_dir(cli)?;
    let tracks_dir = out.join("tracks");
    let mut report = Vec::new();
    let mut confusion = ConfusionMatrix::new(training.labels());
    for test in &manifest.tests {
        let frames: FrameSequence = io::read_sequence(base.join(&test.frames))?;
        let window = TemplateGeometry::new(test.window[0], test.window[1])?;
        let start = Location::new(test.start[0], test.start[1]);
        let result = recognition::recognize(&frames, &start, window, &training, strategy, &settings)?;
        report.extend(result.report_rows(&test.id, &training));
        result.tracks.write_csv(tracks_dir.join(format!("{}.csv", test.id)))?;
        if let Some(label) = &test.label {
            confusion.record(label, &result.label);
        }
        println!(
            "{}",
            serde_json::json!({ "test_id": test.id, "label": result.label, "winner": training.models()[result.winner].id })
        );
    }
    io::write_csv(out.join("report.csv"), &report)?;
    confusion.write_csv(out.join("confusion.csv"))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> CliResult {
    let tracks: Vec<Location> = read_track_csv(&args.tracks)?
        .iter()
        .map(|r| Location::new(r.loc_x, r.loc_y))
        .collect();
    let truth: Vec<Location> = read_ground_truth_csv(&args.truth)?
        .iter()
        .map(|r| Location::new(r.cx, r.cy))
        .collect();
    let report = compute_metrics(&tracks, &truth)?;
    let out = out_dir(cli)?;
    let rows: Vec<PixelErrorRow> = report
        .errors
        .iter()
        .enumerate()
        .map(|(frame, err)| PixelErrorRow { frame, err: *err })
        .collect();
    io::write_csv(out.join("pixel_errors.csv"), &rows)?;
    io::write_json(out.join("metrics.json"), &report)?;
    println!(
        "{}",
        serde_json::json!({ "frames": report.frames, "median": report.median, "rse": report.rse, "mean": report.mean, "std": report.std })
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth => cmd_synth(cli),
        Command::Identify(a) => cmd_identify(cli, a),
        Command::Track(a) => cmd_track(cli, a),
        Command::Estimate(a) => cmd_estimate(cli, a),
        Command::Martin(a) => cmd_martin(cli, a),
        Command::Recognize(a) => cmd_recognize(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
    }
}

fn report(kind: &str, message: &str, path: Option<&Path>, offset: Option<u64>) {
    let line = serde_json::json!({
        "error": kind,
        "message": message,
        "path": path.map(|p| p.display().to_string()),
        "offset": offset,
    });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("off")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report("usage", first.trim_start_matches("error: "), None, None);
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            report("usage", &m, None, None);
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            report(e.kind(), &e.to_string(), e.path(), e.offset());
            ExitCode::from(1)
        }
    }
}
