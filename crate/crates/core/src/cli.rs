//! Command-line front end.
//!
//! Every subcommand reads and writes Lane JSON and tensor files. Machine
//! output goes to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 2 input error, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use crate::decoder::{decode, to_scene, AssociationMode, DecoderConfig};
use crate::domain::{GridSpec, Scene};
use crate::encoder::{encode, EncoderConfig, Targets};
use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, FitInit};
use crate::losses::LossConfig;
use crate::metrics::{culane_counts, tusimple_counts, CulaneConfig, EvalCounts, TusimpleConfig};
use crate::synth::{corrupt, generate, Corruption, CurveFamily, SceneSpec};
use crate::tensor::{file_name, read_decoder_inputs, write_targets, TensorFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "keylane",
    version,
    about = "Keypoint lane encoding, decoding, losses and metrics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus: one directory per scene with
    /// lanes.json and the target tensors.
    Synth(SynthArgs),
    /// Encode a Lane JSON file into target tensors.
    Encode(EncodeArgs),
    /// Decode confidence, quant and offset tensors into Lane JSON.
    Decode(DecodeArgs),
    /// Score predicted lanes against ground truth.
    Eval(EvalArgs),
    /// Fit raw prediction maps to a scene by gradient descent.
    Fit(FitArgs),
    /// Decoder throughput on a synthetic corpus.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EncoderArgs {
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// Gaussian spread in map cells.
    #[arg(long, default_value_t = EncoderConfig::default().sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub points_per_lane: usize,
}

impl EncoderArgs {
    fn config(&self) -> EncoderConfig {
        EncoderConfig {
            sigma: self.sigma,
            points_per_lane: self.points_per_lane,
            stride: self.stride,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecoderArgs {
    #[arg(long, default_value_t = 0.4)]
    pub keypoint_threshold: f64,
    #[arg(long, default_value_t = 4.0)]
    pub theta_dis: f64,
    #[arg(long, default_value_t = 3)]
    pub nms_width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub start_norm_limit: f64,
    /// Associate keypoints one by one instead of in parallel.
    #[arg(long)]
    pub sequential: bool,
}

impl DecoderArgs {
    fn config(&self) -> DecoderConfig {
        DecoderConfig {
            keypoint_threshold: self.keypoint_threshold,
            theta_dis: self.theta_dis,
            nms_width: self.nms_width,
            start_norm_limit: self.start_norm_limit,
        }
    }

    fn mode(&self) -> AssociationMode {
        if self.sequential {
            AssociationMode::Sequential
        } else {
            AssociationMode::Parallel
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CorruptionArgs {
    #[arg(long, default_value_t = 0.0)]
    pub confidence_noise: f64,
    /// Offset noise std in map cells.
    #[arg(long, default_value_t = 0.0)]
    pub offset_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    pub false_peak_rate: f64,
}

impl CorruptionArgs {
    fn config(&self) -> Corruption {
        Corruption {
            confidence_noise: self.confidence_noise,
            offset_noise: self.offset_noise,
            dropout: self.dropout,
            false_peak_rate: self.false_peak_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Straight,
    Quadratic,
    Clothoid,
}

impl From<FamilyArg> for CurveFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Straight => CurveFamily::Straight,
            FamilyArg::Quadratic => CurveFamily::Quadratic,
            FamilyArg::Clothoid => CurveFamily::Clothoid,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 4)]
    pub lanes: usize,
    #[arg(long, value_enum, default_value_t = FamilyArg::Quadratic)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 800)]
    pub width: usize,
    #[arg(long, default_value_t = 320)]
    pub height: usize,
}

impl SceneArgs {
    /// Scene spec for corpus entry `index` (seed + index).
    fn spec(&self, index: usize, points_per_lane: usize) -> SceneSpec {
        let mut spec = SceneSpec::standard(self.lanes, self.seed.wrapping_add(index as u64));
        spec.family = self.family.into();
        spec.points_per_lane = points_per_lane;
        if (self.width, self.height) != (spec.width, spec.height) {
            let (sx, sy) = (
                self.width as f64 / spec.width as f64,
                self.height as f64 / spec.height as f64,
            );
            spec.start_x_range = (spec.start_x_range.0 * sx, spec.start_x_range.1 * sx);
            spec.bottom_range = (
                (spec.bottom_range.0 as f64 * sy) as usize,
                ((spec.bottom_range.1 as f64 * sy) as usize).min(self.height - 1),
            );
            spec.top_range = (
                (spec.top_range.0 as f64 * sy) as usize,
                (spec.top_range.1 as f64 * sy) as usize,
            );
            spec.min_start_separation *= sx;
            spec.min_row_gap *= sy;
            spec.width = self.width;
            spec.height = self.height;
        }
        spec
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub corruption: CorruptionArgs,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub lanes: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Directory holding confidence.klt, quant.klt and offsets.klt.
    pub dir: PathBuf,
    /// Write Lane JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decoder: DecoderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Culane,
    Tusimple,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction Lane JSON file, or a directory of them.
    pub pred: PathBuf,
    /// Ground-truth Lane JSON file, or a directory with the same layout.
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 30)]
    pub lane_width: usize,
    #[arg(long, default_value_t = 20.0)]
    pub pixel_tolerance: f64,
    #[arg(long, default_value_t = 0.85)]
    pub lane_accuracy_threshold: f64,
    /// Spacing of the row-wise evaluation rows, in pixels.
    #[arg(long, default_value_t = 10)]
    pub row_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Default,
    Targets,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub lanes: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    #[arg(long, default_value_t = 0.9)]
    pub decay_power: f64,
    #[arg(long, default_value_t = 9)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Default)]
    pub init: InitArg,
    #[arg(long, default_value_t = 2.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_point: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_quant: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_offset: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_aux: f64,
    #[arg(long, default_value_t = 1.0)]
    pub smooth_l1_beta: f64,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub decoder: DecoderArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Decoding passes over the corpus.
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub decoder: DecoderArgs,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli.command, err) {
        Ok(text) => {
            if out.write_all(text.as_bytes()).is_err() {
                return EXIT_INPUT;
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

fn execute(cmd: &Command, err: &mut dyn Write) -> Result<String> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fit(a) => cmd_fit(a, err),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn read_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Scene::from_json(&text)
}

fn grid_for(scene: &Scene, enc: &EncoderConfig) -> Result<GridSpec> {
    GridSpec::new(scene.width, scene.height, enc.stride)
}

fn encode_scene(scene: &Scene, enc: &EncoderConfig) -> Result<Targets> {
    let spec = grid_for(scene, enc)?;
    encode(&scene.lanes, &spec, enc)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let enc = a.encoder.config();
    enc.validate()?;
    let corruption = a.corruption.config();
    corruption.validate()?;
    std::fs::create_dir_all(&a.out_dir)?;
    let names: Vec<String> = (0..a.scenes)
        .into_par_iter()
        .map(|i| -> Result<String> {
            let spec = a.scene.spec(i, enc.points_per_lane);
            let mut scene = generate(&spec)?;
            scene.tag = Some(format!("seed={}", spec.seed));
            let targets = corrupt(&encode_scene(&scene, &enc)?, &corruption, spec.seed)?;
            let name = format!("scene_{i:04}");
            let dir = a.out_dir.join(&name);
            write_targets(&dir, &targets, enc.sigma, enc.points_per_lane)?;
            std::fs::write(dir.join("lanes.json"), scene.to_json())?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    Ok(json!({ "out_dir": a.out_dir, "scenes": names }).to_string() + "\n")
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<String> {
    let enc = a.encoder.config();
    let scene = read_scene(&a.lanes)?;
    let targets = encode_scene(&scene, &enc)?;
    write_targets(&a.out_dir, &targets, enc.sigma, enc.points_per_lane)?;
    Ok(json!({
        "out_dir": a.out_dir,
        "grid": [targets.spec.height_out, targets.spec.width_out],
        "keypoints": targets.adjacency.len(),
        "masked_cells": targets.masked_cells(),
    })
    .to_string()
        + "\n")
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<String> {
    let (conf, quant, offsets) = read_decoder_inputs(&a.dir)?;
    let decoded = decode(&conf, &quant, &offsets, &a.decoder.config(), a.decoder.mode())?;
    let text = to_scene(&decoded, conf.spec()).to_json();
    match &a.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

/// Lane JSON files under `dir`, as sorted paths relative to it.
fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(root.join(rel))? {
            let entry = entry?;
            let rel = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                walk(root, &rel, out)?;
            } else if rel.extension().is_some_and(|e| e == "json") {
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, Path::new(""), &mut out)?;
    out.sort();
    Ok(out)
}

fn scene_pairs(pred: &Path, gt: &Path) -> Result<Vec<(Scene, Scene)>> {
    match (pred.is_dir(), gt.is_dir()) {
        (false, false) => Ok(vec![(read_scene(pred)?, read_scene(gt)?)]),
        (true, true) => {
            let files = json_files(gt)?;
            if files.is_empty() {
                return Err(Error::Config(format!("no .json files under {}", gt.display())));
            }
            files
                .iter()
                .map(|rel| Ok((read_scene(&pred.join(rel))?, read_scene(&gt.join(rel))?)))
                .collect()
        }
        _ => Err(Error::Config(
            "pred and gt must both be files or both be directories".into(),
        )),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let pairs = scene_pairs(&a.pred, &a.gt)?;
    let mut total = EvalCounts::default();
    let report = match a.metric {
        Metric::Culane => {
            let cfg = CulaneConfig {
                iou_threshold: a.iou_threshold,
                lane_width: a.lane_width,
            };
            for (p, g) in &pairs {
                total += culane_counts(p, g, &cfg)?;
            }
            total.report(false)
        }
        Metric::Tusimple => {
            for (p, g) in &pairs {
                let mut cfg = TusimpleConfig::for_height(g.height, a.row_step);
                cfg.pixel_tolerance = a.pixel_tolerance;
                cfg.lane_accuracy_threshold = a.lane_accuracy_threshold;
                total += tusimple_counts(p, g, &cfg)?;
            }
            total.report(true)
        }
    };
    Ok(serde_json::to_string(&report)? + "\n")
}

pub fn cmd_fit(a: &FitArgs, err: &mut dyn Write) -> Result<String> {
    let enc = a.encoder.config();
    let scene = read_scene(&a.lanes)?;
    let targets = encode_scene(&scene, &enc)?;
    let cfg = FitConfig {
        lr: a.lr,
        iterations: a.iterations,
        loss: LossConfig {
            alpha: a.alpha,
            beta: a.beta,
            lambda_point: a.lambda_point,
            lambda_quant: a.lambda_quant,
            lambda_offset: a.lambda_offset,
            lambda_aux: a.lambda_aux,
            smooth_l1_beta: a.smooth_l1_beta,
        },
        log_every: a.log_every.max(1),
        samples: a.samples,
        decay_power: a.decay_power,
        init: match a.init {
            InitArg::Default => FitInit::Default,
            InitArg::Targets => FitInit::Targets,
        },
    };
    let started = Instant::now();
    let out = fit(&targets, &cfg, &a.decoder.config())?;
    let elapsed = started.elapsed().as_secs_f64();

    std::fs::create_dir_all(&a.out_dir)?;
    TensorFile::from_grid("confidence", "probability", &out.confidence)
        .with_meta("parameterization", "sigmoid")
        .write(&a.out_dir.join(file_name("confidence")))?;
    TensorFile::from_grid("quant", "map_cells", &out.quant).write(&a.out_dir.join(file_name("quant")))?;
    TensorFile::from_grid("offsets", "map_cells", &out.offsets).write(&a.out_dir.join(file_name("offsets")))?;
    std::fs::write(a.out_dir.join("loss.csv"), out.loss_csv(cfg.log_every))?;
    std::fs::write(
        a.out_dir.join("lanes.json"),
        to_scene(&out.decoded, &targets.spec).to_json(),
    )?;

    let first = out.history.first().map_or(f64::NAN, |r| r.total);
    let last = out.history.last().map_or(f64::NAN, |r| r.total);
    let _ = writeln!(
        err,
        "fit: {} iterations in {elapsed:.2}s, loss {first:.6e} -> {last:.6e}",
        cfg.iterations
    );
    Ok(json!({
        "out_dir": a.out_dir,
        "iterations": cfg.iterations,
        "initial_loss": first,
        "final_loss": last,
        "final_grad_norm": out.history.last().map(|r| r.grad_norm),
        "lanes": out.decoded.len(),
        "seconds": elapsed,
    })
    .to_string()
        + "\n")
}

pub fn cmd_bench(a: &BenchArgs) -> Result<String> {
    let enc = a.encoder.config();
    let dec = a.decoder.config();
    dec.validate()?;
    let corpus: Vec<Targets> = (0..a.scenes)
        .map(|i| encode_scene(&generate(&a.scene.spec(i, enc.points_per_lane))?, &enc))
        .collect::<Result<_>>()?;
    let keypoints: usize = corpus.iter().map(|t| t.adjacency.len()).sum();
    let repeat = a.repeat.max(1);
    let started = Instant::now();
    let mut lanes = 0;
    for _ in 0..repeat {
        for t in &corpus {
            lanes += decode(&t.confidence, &t.quant, &t.offsets, &dec, a.decoder.mode())?.len();
        }
    }
    let seconds = started.elapsed().as_secs_f64().max(1e-12);
    let passes = repeat as f64;
    Ok(json!({
        "scenes": a.scenes,
        "repeat": repeat,
        "keypoints": keypoints,
        "decoded_lanes": lanes / repeat,
        "seconds": seconds,
        "keypoints_per_sec": keypoints as f64 * passes / seconds,
        "scenes_per_sec": a.scenes as f64 * passes / seconds,
    })
    .to_string()
        + "\n")
}
