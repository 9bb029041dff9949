//! Command line front end: scenario generation, training, evaluation,
//! the preset ablation table, the online warning pipeline, and a
//! finite-difference gradient check.
//!
//! Every flag can also come from a JSON config file (`--config`) holding
//! one section per subcommand, keyed by the flag name; explicit flags win
//! over file values. Exit codes: 0 success, 2 usage error, 3 data or
//! configuration error, 4 numeric error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::data::{list_dataset_dirs, load_dataset_dir, read_manifest};
use crate::egomotion::EgoPredictorKind;
use crate::error::{Error, Result};
use crate::flow::FlowSource;
use crate::metrics::{evaluate_windows, write_eval_report, DEFAULT_TTC_THRESHOLD_S};
use crate::model::checkpoint::{load_model, save_model};
use crate::model::gradcheck::{gradient_check, GRADCHECK_TOLERANCE};
use crate::model::net::{init_params, ALL_PRESETS};
use crate::model::train::{train, write_loss_history, TrainConfig};
use crate::model::windows::{prepare_windows, WindowOptions};
use crate::model::{ModelConfig, Precision, PreparedWindow, Preset, StreamSet};
use crate::perception::{load_detector, Detector, DEFAULT_RISK_THRESHOLD};
use crate::pipeline::{self, PipelineConfig, RunSummary};
use crate::synth::render::generate;
use crate::synth::{make_suite_with, SuiteName, CORRIDOR_HALF_WIDTH_M};

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "firtraj", version, about = "Thermal deer forecasting and collision warnings")]
struct Cli {
    /// JSON file with one section per subcommand; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scenario suite into dataset directories.
    Synth(SynthArgs),
    /// Train one stream preset and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint over a dataset and write a report row.
    Eval(EvalArgs),
    /// Train and score all five presets, one report row each.
    Ablate(AblateArgs),
    /// Run the detect-track-forecast-warn loop and write the event stream.
    Run(RunArgs),
    /// Compare training gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Distinguishes bad invocations (exit 2) from library failures, whose
/// exit code depends on the error kind.
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct SynthArgs {
    /// Scenario family: stationary|crossing|jump|occluded_jump|curve_ego.
    #[arg(long, value_name = "NAME")]
    suite: Option<String>,
    /// Scenarios to generate.
    #[arg(long, value_name = "N")]
    count: Option<usize>,
    /// Suite seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Directory receiving one dataset subdirectory per scenario.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Frames per scenario.
    #[arg(long, value_name = "FRAMES")]
    duration: Option<usize>,
    /// Also write dense ground-truth flow files (large).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    write_flow: Option<bool>,
}

/// Optimizer settings shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct OptimArgs {
    /// Training epochs.
    #[arg(long, value_name = "E")]
    epochs: Option<usize>,
    /// SGD learning rate.
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    /// SGD momentum in [0, 1).
    #[arg(long, value_name = "F")]
    momentum: Option<f64>,
    /// Windows per SGD step.
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
}

/// Model shape overrides; defaults come from the checkpoint-free model
/// configuration.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct ShapeArgs {
    /// Observed frames per window.
    #[arg(long, value_name = "N")]
    tau: Option<usize>,
    /// Future frames to decode.
    #[arg(long, value_name = "N")]
    horizon: Option<usize>,
    /// Decoder samples per forecast.
    #[arg(long, value_name = "S")]
    samples: Option<usize>,
    /// Samples entering the variety loss.
    #[arg(long, value_name = "K")]
    best_of: Option<usize>,
    /// Decoder noise width.
    #[arg(long, value_name = "N")]
    noise_dim: Option<usize>,
    /// Trajectory encoder state width.
    #[arg(long, value_name = "N")]
    traj_hidden: Option<usize>,
    /// Channels of the flow and context encoders.
    #[arg(long, value_name = "N")]
    convlstm_channels: Option<usize>,
    /// Odd kernel size of the recurrent convolutions.
    #[arg(long, value_name = "N")]
    convlstm_kernel: Option<usize>,
    /// Fusion layer widths, comma separated.
    #[arg(long, value_name = "W,W")]
    fusion: Option<String>,
    /// Decoder state width.
    #[arg(long, value_name = "N")]
    decoder_hidden: Option<usize>,
    /// Scene context width in pixels.
    #[arg(long, value_name = "PX")]
    context_width: Option<usize>,
    /// Scene context height in pixels.
    #[arg(long, value_name = "PX")]
    context_height: Option<usize>,
    /// Pooled-flow grid side.
    #[arg(long, value_name = "G")]
    roi_grid: Option<usize>,
    /// Arithmetic precision: f32|f64.
    #[arg(long, value_name = "P")]
    precision: Option<String>,
}

/// Window assembly settings shared by `train`, `eval`, and `ablate`.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct WindowArgs {
    /// Frames between window anchors of one track.
    #[arg(long, value_name = "N")]
    stride: Option<usize>,
    /// Optical flow source: gt|block.
    #[arg(long, value_name = "SRC")]
    flow: Option<String>,
    /// Ego forecaster: cv|ctr.
    #[arg(long, value_name = "KIND")]
    ego: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct TrainArgs {
    /// Suite root or single dataset directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Stream preset: baseline|lcv|lmv|lmc|lmcv.
    #[arg(long, value_name = "PRESET")]
    preset: Option<String>,
    /// Seed for parameter init, shuffling, and decoder noise.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Checkpoint file to write.
    #[arg(long, value_name = "CKPT")]
    out: Option<PathBuf>,
    /// Also write the per-epoch loss history CSV here.
    #[arg(long, value_name = "CSV")]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    #[serde(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    windows: WindowArgs,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct EvalArgs {
    /// Suite root or single dataset directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Checkpoint to score.
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<PathBuf>,
    /// Forecast horizon to score, in seconds; defaults to the trained one.
    #[arg(long, value_name = "SEC")]
    horizon_s: Option<f64>,
    /// Report CSV to write.
    #[arg(long, value_name = "CSV")]
    report: Option<PathBuf>,
    /// Seed of the evaluation noise stream.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    windows: WindowArgs,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct AblateArgs {
    /// Suite root or single dataset directory to train on.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Report CSV to write, one row per preset.
    #[arg(long, value_name = "CSV")]
    out: Option<PathBuf>,
    /// Seed shared by every preset.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Held-out data to score; defaults to the training data.
    #[arg(long, value_name = "DIR")]
    eval_data: Option<PathBuf>,
    /// Directory receiving one checkpoint per preset.
    #[arg(long, value_name = "DIR")]
    save_ckpts: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    #[serde(flatten)]
    shape: ShapeArgs,
    #[command(flatten)]
    #[serde(flatten)]
    windows: WindowArgs,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct RunArgs {
    /// Suite root or single dataset directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Forecaster checkpoint.
    #[arg(long, value_name = "CKPT")]
    ckpt: Option<PathBuf>,
    /// Warn when the predicted time to collision is at most this many
    /// seconds.
    #[arg(long, value_name = "SEC")]
    ttc_threshold: Option<f64>,
    /// Event stream file to write (JSON lines).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Frames between repeated forecasts of one track.
    #[arg(long, value_name = "N")]
    predict_stride: Option<usize>,
    /// Detector: oracle|heatmap.
    #[arg(long, value_name = "KIND")]
    detector: Option<String>,
    /// Heatmap detector checkpoint, with --detector heatmap.
    #[arg(long, value_name = "CKPT")]
    detector_ckpt: Option<PathBuf>,
    /// Ego forecaster: cv|ctr.
    #[arg(long, value_name = "KIND")]
    ego: Option<String>,
    /// Optical flow source: gt|block.
    #[arg(long, value_name = "SRC")]
    flow: Option<String>,
    /// Risk scores at or above this are high risk.
    #[arg(long, value_name = "F")]
    risk_threshold: Option<f64>,
    /// Minimum IoU for a track to claim a detection.
    #[arg(long, value_name = "F")]
    association_iou: Option<f64>,
    /// Unmatched frames a track survives.
    #[arg(long, value_name = "N")]
    max_misses: Option<usize>,
    /// Half width of the warned corridor, meters.
    #[arg(long, value_name = "M")]
    corridor_half_width: Option<f64>,
    /// Seed of the decoder noise stream.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct GradcheckArgs {
    /// Seed of the checked window and parameters.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

/// File counterpart of the flag surface: one optional section per
/// subcommand, each mirroring that subcommand's flags by name.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
struct ConfigFile {
    synth: SynthArgs,
    train: TrainArgs,
    eval: EvalArgs,
    ablate: AblateArgs,
    run: RunArgs,
    gradcheck: GradcheckArgs,
}

macro_rules! merge_fields {
    ($cli:ident, $file:ident; $($f:ident),* $(,)?) => {{
        let mut merged = $cli;
        $( if merged.$f.is_none() { merged.$f = $file.$f; } )*
        merged
    }};
}

impl SynthArgs {
    fn merged(self, file: Self) -> Self {
        let (a, b) = (self, file);
        merge_fields!(a, b; suite, count, seed, out, duration, write_flow)
    }
}

impl OptimArgs {
    fn merged(self, file: Self) -> Self {
        let (a, b) = (self, file);
        merge_fields!(a, b; epochs, lr, momentum, batch_size)
    }
}

impl ShapeArgs {
    fn merged(self, file: Self) -> Self {
        let (a, b) = (self, file);
        merge_fields!(a, b; tau, horizon, samples, best_of, noise_dim, traj_hidden,
            convlstm_channels, convlstm_kernel, fusion, decoder_hidden,
            context_width, context_height, roi_grid, precision)
    }
}

impl WindowArgs {
    fn merged(self, file: Self) -> Self {
        let (a, b) = (self, file);
        merge_fields!(a, b; stride, flow, ego)
    }
}

impl TrainArgs {
    fn merged(self, file: Self) -> Self {
        let (mut a, b) = (self, file);
        a.optim = a.optim.merged(b.optim);
        a.shape = a.shape.merged(b.shape);
        a.windows = a.windows.merged(b.windows);
        merge_fields!(a, b; data, preset, seed, out, loss_csv)
    }
}

impl EvalArgs {
    fn merged(self, file: Self) -> Self {
        let (mut a, b) = (self, file);
        a.windows = a.windows.merged(b.windows);
        merge_fields!(a, b; data, ckpt, horizon_s, report, seed)
    }
}

impl AblateArgs {
    fn merged(self, file: Self) -> Self {
        let (mut a, b) = (self, file);
        a.optim = a.optim.merged(b.optim);
        a.shape = a.shape.merged(b.shape);
        a.windows = a.windows.merged(b.windows);
        merge_fields!(a, b; data, out, seed, eval_data, save_ckpts)
    }
}

impl RunArgs {
    fn merged(self, file: Self) -> Self {
        let (a, b) = (self, file);
        merge_fields!(a, b; data, ckpt, ttc_threshold, out, predict_stride, detector,
            detector_ckpt, ego, flow, risk_threshold, association_iou, max_misses,
            corridor_half_width, seed)
    }
}

impl GradcheckArgs {
    fn merged(self, file: Self) -> Self {
        let (a, b) = (self, file);
        merge_fields!(a, b; seed)
    }
}

fn dispatch(cli: Cli) -> CmdResult<()> {
    let file = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a.merged(file.synth)),
        Command::Train(a) => cmd_train(a.merged(file.train)),
        Command::Eval(a) => cmd_eval(a.merged(file.eval)),
        Command::Ablate(a) => cmd_ablate(a.merged(file.ablate)),
        Command::Run(a) => cmd_run(a.merged(file.run)),
        Command::Gradcheck(a) => cmd_gradcheck(a.merged(file.gradcheck)),
    }
}

fn load_config_file(path: &Path) -> CmdResult<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::json(path, e))?)
}

fn required<T>(value: Option<T>, flag: &str) -> CmdResult<T> {
    value.ok_or_else(|| Failure::Usage(format!("missing required flag {flag}")))
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_suite(value: &str) -> CmdResult<SuiteName> {
    value.parse().map_err(|e: Error| usage(e.to_string()))
}

fn parse_preset(value: Option<&str>) -> CmdResult<Preset> {
    match value {
        None => Ok(Preset::Lmcv),
        Some("baseline") => Ok(Preset::Baseline),
        Some("lcv") => Ok(Preset::Lcv),
        Some("lmv") => Ok(Preset::Lmv),
        Some("lmc") => Ok(Preset::Lmc),
        Some("lmcv") => Ok(Preset::Lmcv),
        Some(other) => Err(usage(format!(
            "unknown preset `{other}` (expected baseline|lcv|lmv|lmc|lmcv)"
        ))),
    }
}

fn parse_flow(value: Option<&str>) -> CmdResult<FlowSource> {
    match value {
        None | Some("gt") => Ok(FlowSource::GroundTruth),
        Some("block") => Ok(FlowSource::BlockMatching),
        Some(other) => Err(usage(format!("unknown flow source `{other}` (expected gt|block)"))),
    }
}

fn parse_ego(value: Option<&str>) -> CmdResult<EgoPredictorKind> {
    match value {
        None | Some("cv") => Ok(EgoPredictorKind::ConstantVelocity),
        Some("ctr") => Ok(EgoPredictorKind::ConstantTurnRate),
        Some(other) => Err(usage(format!("unknown ego forecaster `{other}` (expected cv|ctr)"))),
    }
}

fn parse_precision(value: &str) -> CmdResult<Precision> {
    match value {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(usage(format!("unknown precision `{other}` (expected f32|f64)"))),
    }
}

fn parse_fusion(value: &str) -> CmdResult<Vec<usize>> {
    let widths: std::result::Result<Vec<usize>, _> =
        value.split(',').map(|w| w.trim().parse::<usize>()).collect();
    match widths {
        Ok(w) if !w.is_empty() => Ok(w),
        _ => Err(usage(format!("--fusion wants comma-separated widths, got `{value}`"))),
    }
}

fn preset_label(preset: Preset) -> &'static str {
    match preset {
        Preset::Baseline => "baseline",
        Preset::Lcv => "lcv",
        Preset::Lmv => "lmv",
        Preset::Lmc => "lmc",
        Preset::Lmcv => "lmcv",
    }
}

fn label_for_streams(streams: &StreamSet) -> String {
    ALL_PRESETS
        .iter()
        .find(|p| p.streams() == *streams)
        .map(|p| preset_label(*p).to_string())
        .unwrap_or_else(|| "custom".to_string())
}

fn resolve_model_config(shape: &ShapeArgs, preset: Preset) -> CmdResult<ModelConfig> {
    let mut cfg = ModelConfig::with_preset(preset);
    if let Some(v) = shape.tau {
        cfg.tau = v;
    }
    if let Some(v) = shape.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = shape.samples {
        cfg.samples = v;
    }
    if let Some(v) = shape.best_of {
        cfg.best_of = v;
    }
    if let Some(v) = shape.noise_dim {
        cfg.noise_dim = v;
    }
    if let Some(v) = shape.traj_hidden {
        cfg.traj_hidden = v;
    }
    if let Some(v) = shape.convlstm_channels {
        cfg.convlstm_channels = v;
    }
    if let Some(v) = shape.convlstm_kernel {
        cfg.convlstm_kernel = v;
    }
    if let Some(s) = &shape.fusion {
        cfg.fusion_widths = parse_fusion(s)?;
    }
    if let Some(v) = shape.decoder_hidden {
        cfg.decoder_hidden = v;
    }
    if let Some(v) = shape.context_width {
        cfg.context_width = v;
    }
    if let Some(v) = shape.context_height {
        cfg.context_height = v;
    }
    if let Some(v) = shape.roi_grid {
        cfg.roi_grid = v;
    }
    if let Some(s) = &shape.precision {
        cfg.precision = parse_precision(s)?;
    }
    Ok(cfg)
}

fn resolve_window_options(w: &WindowArgs, require_future: bool) -> CmdResult<WindowOptions> {
    Ok(WindowOptions {
        stride: w.stride.unwrap_or(1),
        flow_source: parse_flow(w.flow.as_deref())?,
        ego: parse_ego(w.ego.as_deref())?,
        require_future,
    })
}

fn resolve_train_config(optim: &OptimArgs, seed: u64) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: optim.epochs.unwrap_or(d.epochs),
        batch_size: optim.batch_size.unwrap_or(d.batch_size),
        learning_rate: optim.lr.unwrap_or(d.learning_rate),
        momentum: optim.momentum.unwrap_or(d.momentum),
        seed,
    }
}

/// A suite root lists its dataset subdirectories; a directory that is
/// itself a dataset (has `manifest.json`) counts as a one-element suite.
fn dataset_roots(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("manifest.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    list_dataset_dirs(root)
}

fn suite_frame_rate(dirs: &[PathBuf]) -> Result<f64> {
    let manifest = read_manifest(&dirs[0].join("manifest.json"))?;
    Ok(manifest.frame_rate_hz)
}

/// May return an empty vector; callers decide whether that is an error.
fn windows_under(
    roots: &[PathBuf],
    cfg: &ModelConfig,
    opts: &WindowOptions,
) -> Result<Vec<PreparedWindow>> {
    let mut windows = Vec::new();
    for dir in roots {
        let data = load_dataset_dir(dir)?;
        windows.extend(prepare_windows(&data, cfg, opts)?);
    }
    Ok(windows)
}

fn collect_windows(
    root: &Path,
    cfg: &ModelConfig,
    opts: &WindowOptions,
) -> Result<Vec<PreparedWindow>> {
    let windows = windows_under(&dataset_roots(root)?, cfg, opts)?;
    if windows.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no usable windows (tracks shorter than tau + horizon?)",
            root.display()
        )));
    }
    Ok(windows)
}

fn cmd_synth(a: SynthArgs) -> CmdResult<()> {
    let suite = parse_suite(&required(a.suite, "--suite")?)?;
    let out = required(a.out, "--out")?;
    let count = a.count.unwrap_or(10);
    let seed = a.seed.unwrap_or(0);
    let with_flow = a.write_flow.unwrap_or(false);
    let scenarios = make_suite_with(suite, count, seed, a.duration)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for scenario in &scenarios {
        let dir = out.join(&scenario.name);
        let summary = generate(scenario, &dir, with_flow)?;
        for w in &summary.warnings {
            eprintln!("warning: {}: {w}", scenario.name);
        }
        println!(
            "{}: {} frames, {} boxes",
            dir.display(),
            summary.frames,
            summary.boxes
        );
    }
    println!("wrote {} scenarios under {}", scenarios.len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult<()> {
    let data = required(a.data, "--data")?;
    let out = required(a.out, "--out")?;
    let preset = parse_preset(a.preset.as_deref())?;
    let seed = a.seed.unwrap_or(0);
    let cfg = resolve_model_config(&a.shape, preset)?;
    let opts = resolve_window_options(&a.windows, true)?;
    let tc = resolve_train_config(&a.optim, seed);
    let windows = collect_windows(&data, &cfg, &opts)?;
    let mut params = init_params(&cfg, seed)?;
    let report = train(&mut params, &cfg, &windows, &tc)?;
    save_model(&out, &cfg, &params)?;
    if let Some(path) = &a.loss_csv {
        write_loss_history(path, &report)?;
    }
    let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} on {} windows for {} epochs: loss {first:.6} -> {last:.6}",
        preset_label(preset),
        windows.len(),
        tc.epochs
    );
    println!("checkpoint {}", out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult<()> {
    let data = required(a.data, "--data")?;
    let ckpt = required(a.ckpt, "--ckpt")?;
    let report_path = required(a.report, "--report")?;
    let (mut cfg, params) = load_model(&ckpt)?;
    let dirs = dataset_roots(&data)?;
    let frame_rate = suite_frame_rate(&dirs)?;
    if let Some(h) = a.horizon_s {
        if !(h > 0.0 && h.is_finite()) {
            return Err(usage(format!("--horizon-s must be a positive number, got {h}")));
        }
        cfg.horizon = (h * frame_rate).round() as usize;
        if cfg.horizon == 0 {
            return Err(usage(format!(
                "--horizon-s {h} rounds to zero frames at {frame_rate} Hz"
            )));
        }
    }
    let opts = resolve_window_options(&a.windows, true)?;
    let windows = collect_windows(&data, &cfg, &opts)?;
    let row = evaluate_windows(
        &params,
        &cfg,
        &windows,
        frame_rate,
        a.seed.unwrap_or(0),
        &label_for_streams(&cfg.streams),
    )?;
    write_eval_report(&report_path, std::slice::from_ref(&row))?;
    println!(
        "{} at {} s over {} windows: ade {:.4} fde {:.4} min_ade {:.4} min_fde {:.4}",
        row.preset, row.horizon_s, row.n_windows, row.ade, row.fde, row.min_ade, row.min_fde
    );
    println!("report {}", report_path.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult<()> {
    let data = required(a.data, "--data")?;
    let out = required(a.out, "--out")?;
    let seed = a.seed.unwrap_or(0);
    let opts = resolve_window_options(&a.windows, true)?;
    let tc = resolve_train_config(&a.optim, seed);

    // Windows are prepared once with every stream populated; presets that
    // ignore a stream simply never read it. Without --eval-data, every
    // fifth dataset directory (sorted) is held out for scoring; suites too
    // small to split are scored on their training windows.
    let full_cfg = resolve_model_config(&a.shape, Preset::Lmcv)?;
    let roots = dataset_roots(&data)?;
    let (train_roots, eval_roots) = match &a.eval_data {
        Some(held_out) => (roots, dataset_roots(held_out)?),
        None => {
            let (eval, train): (Vec<_>, Vec<_>) = roots
                .iter()
                .cloned()
                .enumerate()
                .partition(|(i, _)| i % 5 == 0);
            let strip = |v: Vec<(usize, PathBuf)>| v.into_iter().map(|(_, p)| p).collect::<Vec<_>>();
            if train.is_empty() {
                (roots.clone(), roots)
            } else {
                (strip(train), strip(eval))
            }
        }
    };
    let frame_rate = suite_frame_rate(&eval_roots)?;
    let train_windows = windows_under(&train_roots, &full_cfg, &opts)?;
    let eval_windows = windows_under(&eval_roots, &full_cfg, &opts)?;
    if train_windows.is_empty() || eval_windows.is_empty() {
        return Err(Failure::Lib(Error::invalid(format!(
            "{}: no usable windows (tracks shorter than tau + horizon?)",
            data.display()
        ))));
    }

    if let Some(dir) = &a.save_ckpts {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::with_capacity(ALL_PRESETS.len());
    for preset in ALL_PRESETS {
        let cfg = resolve_model_config(&a.shape, preset)?;
        let mut params = init_params(&cfg, seed)?;
        let report = train(&mut params, &cfg, &train_windows, &tc)?;
        let row = evaluate_windows(
            &params,
            &cfg,
            &eval_windows,
            frame_rate,
            seed,
            preset_label(preset),
        )?;
        eprintln!(
            "{}: final loss {:.6}, min_ade {:.4}",
            row.preset,
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            row.min_ade
        );
        if let Some(dir) = &a.save_ckpts {
            save_model(&dir.join(format!("{}.ckpt", preset_label(preset))), &cfg, &params)?;
        }
        rows.push(row);
    }
    write_eval_report(&out, &rows)?;
    println!("wrote {} preset rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_run(a: RunArgs) -> CmdResult<()> {
    let data = required(a.data, "--data")?;
    let ckpt = required(a.ckpt, "--ckpt")?;
    let out = required(a.out, "--out")?;
    // Flag problems surface before any file is touched.
    let detector_ckpt = match a.detector.as_deref() {
        None | Some("oracle") => None,
        Some("heatmap") => Some(required(a.detector_ckpt, "--detector-ckpt")?),
        Some(other) => {
            return Err(usage(format!(
                "unknown detector `{other}` (expected oracle|heatmap)"
            )))
        }
    };
    let (cfg, params) = load_model(&ckpt)?;
    let detector = match detector_ckpt {
        None => Detector::Oracle,
        Some(path) => Detector::Heatmap(Box::new(load_detector(&path)?)),
    };
    let pc = PipelineConfig {
        ego: parse_ego(a.ego.as_deref())?,
        flow_source: parse_flow(a.flow.as_deref())?,
        ttc_threshold_s: a.ttc_threshold.unwrap_or(DEFAULT_TTC_THRESHOLD_S),
        association_iou: a.association_iou.unwrap_or(pipeline::DEFAULT_ASSOCIATION_IOU),
        max_misses: a.max_misses.unwrap_or(pipeline::DEFAULT_MAX_MISSES),
        predict_stride: a.predict_stride.unwrap_or(1),
        risk_threshold: a.risk_threshold.unwrap_or(DEFAULT_RISK_THRESHOLD),
        corridor_half_width_m: a.corridor_half_width.unwrap_or(CORRIDOR_HALF_WIDTH_M),
        seed: a.seed.unwrap_or(0),
    };
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut total = RunSummary::default();
    for dir in dataset_roots(&data)? {
        let dataset = load_dataset_dir(&dir)?;
        let s = pipeline::run(&dataset, &detector, &cfg, &params, &pc, &mut writer)?;
        println!(
            "{}: {} frames, {} detections, {} tracks, {} forecasts, {} warnings",
            dataset.manifest.set_id, s.frames, s.detections, s.tracks_opened, s.forecasts,
            s.warnings
        );
        total.frames += s.frames;
        total.detections += s.detections;
        total.tracks_opened += s.tracks_opened;
        total.forecasts += s.forecasts;
        total.decisions += s.decisions;
        total.warnings += s.warnings;
    }
    writer.flush().map_err(|e| Error::io(&out, e))?;
    println!(
        "total: {} frames, {} forecasts, {} decisions, {} warnings; events {}",
        total.frames,
        total.forecasts,
        total.decisions,
        total.warnings,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult<()> {
    let report = gradient_check(a.seed.unwrap_or(0))?;
    for (name, err) in &report.per_group {
        println!("{name:>24}  {err:.3e}");
    }
    println!(
        "max relative error {:.3e} over {} parameters (tolerance {:.0e})",
        report.max_rel_err, report.checked, GRADCHECK_TOLERANCE
    );
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Lib(Error::Numeric {
            step: 0,
            msg: format!(
                "gradcheck failed: max relative error {:.3e} is not below {GRADCHECK_TOLERANCE:e}",
                report.max_rel_err
            ),
        }))
    }
}
