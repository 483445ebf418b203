//! Command-line entry points: synthetic data generation, training,
//! evaluation and reprojection inspection.
//!
//! Every command echoes its fully resolved configuration into the
//! output directory and writes a manifest of produced files; re-running
//! with the echoed configuration reproduces the outputs. Exit codes:
//! 0 success, 1 I/O error, 2 configuration error, 3 numeric abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;

use crate::data::{generate_synthetic, read_dataset, write_dataset, SampleRecord, SynthConfig};
use crate::eval::{evaluate, EvalError, InputSource};
use crate::losses::normalize_confidence_batch;
use crate::nets::{flatten_pose2d_batch, unflatten_pose2d, unflatten_pose3d};
use crate::skeleton::{denormalize_2d, KinematicTree, Pose2D, NUM_BONES, NUM_JOINTS};
use crate::train::{
    load_model_params, Heads, ModelParams, TrainConfig, TrainError, TrainLogger, TrainState,
    Trainer,
};

/// Stable process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Io = 1,
    Config = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

type CliResult<T> = Result<T, CliError>;

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: ExitCode::Io,
        message: e.to_string(),
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: ExitCode::Config,
        message: e.to_string(),
    }
}

fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::NumericAbort { .. } => CliError {
            code: ExitCode::Numeric,
            message: e.to_string(),
        },
        TrainError::Config(_) | TrainError::Checkpoint(_) => config_err(e),
        TrainError::Io(_) => io_err(e),
        TrainError::Data(d) => data_err_ref(d),
        _ => io_err(e),
    }
}

fn data_err(e: crate::data::DataError) -> CliError {
    data_err_ref(&e)
}

fn data_err_ref(e: &crate::data::DataError) -> CliError {
    use crate::data::DataError::*;
    match e {
        Io(_) => io_err(e),
        ParseError { .. } | InvariantViolation { .. } | ConfigError(_) | EmptyDataset => {
            config_err(e)
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "poselift",
    about = "Weakly-supervised monocular 3D human pose lifting",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic paired and 2D-only datasets.
    Synth(SynthArgs),
    /// Run the staged training procedure.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a paired dataset.
    Eval(EvalArgs),
    /// Dump per-sample reprojection traces (and optional SVG plots).
    Project(ProjectArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Upper bound on worker threads (the current implementation is
    /// single-threaded; values above 1 are accepted but unused).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Verbose progress output.
    #[arg(short, long)]
    pub verbose: bool,
}

impl CommonArgs {
    fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of paired samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Weak (2D-only) records as a fraction of the paired count.
    #[arg(long, default_value_t = 0.5)]
    pub weak_fraction: f64,
    /// Draw weak records from the wider out-of-distribution angle band
    /// (disable to sample them from the paired band).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub ood_weak: bool,
    /// Generator configuration file (JSON mirroring SynthConfig).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training configuration file (JSON mirroring TrainConfig).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Paired dataset (JSONL).
    #[arg(long)]
    pub paired: PathBuf,
    /// 2D-only dataset (JSONL). Optional when the weak ratio is zero.
    #[arg(long)]
    pub weak: Option<PathBuf>,
    /// Stages to run: all, 1, 2, 3, or comma-separated (e.g. 2,3).
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Resume from a checkpoint file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed override (otherwise from the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub model: PathBuf,
    /// Paired dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Run the refinement network in front of the lifter.
    #[arg(long)]
    pub use_refine: bool,
    /// Corrupt inputs with this sigma (normalized units) before the
    /// pipeline; confidences are simulated to match.
    #[arg(long)]
    pub corrupt_sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub corrupt_seed: u64,
    /// Where to write the report (defaults next to the model).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset (paired or 2D-only).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write simple SVG skeleton plots.
    #[arg(long)]
    pub plots: bool,
    /// How many samples to plot.
    #[arg(long, default_value_t = 8)]
    pub plot_count: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    files: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err)
}

fn write_manifest(dir: &Path, command: &str, files: &[PathBuf]) -> CliResult<()> {
    let manifest = Manifest {
        command,
        files: files
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn ensure_out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_err)
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Project(args) => cmd_project(args),
    }
}

pub fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    args.common.validate()?;
    if !(0.0..=10.0).contains(&args.weak_fraction) {
        return Err(config_err("--weak-fraction must lie in [0, 10]"));
    }
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err)?;
            serde_json::from_str(&text).map_err(config_err)?
        }
        None => SynthConfig::default(),
    };
    // Explicit flags override the config file.
    if let Some(n) = args.n {
        cfg.n_paired = n;
        cfg.n_weak = ((n as f64) * args.weak_fraction).round() as usize;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if !args.ood_weak {
        cfg.weak_angle = cfg.paired_angle;
    }
    cfg.validate().map_err(data_err)?;

    ensure_out_dir(&args.out)?;
    let (paired, weak) = generate_synthetic(&cfg).map_err(data_err)?;
    let paired_path = args.out.join("paired.jsonl");
    let weak_path = args.out.join("weak.jsonl");
    write_dataset(&paired, &paired_path).map_err(data_err)?;
    write_dataset(&weak, &weak_path).map_err(data_err)?;
    let cfg_path = args.out.join("effective_synth_config.json");
    write_json(&cfg_path, &cfg)?;
    write_manifest(
        &args.out,
        "synth",
        &[paired_path.clone(), weak_path.clone(), cfg_path],
    )?;

    let tree = KinematicTree::new();
    let mean_bone: f64 = paired
        .iter()
        .filter_map(|r| r.pose3d())
        .map(|p| {
            crate::skeleton::bone_lengths(p.coords().view(), &tree)
                .iter()
                .sum::<f64>()
                / NUM_BONES as f64
        })
        .sum::<f64>()
        / paired.len().max(1) as f64;
    println!(
        "wrote {} paired and {} weak records to {}",
        paired.len(),
        weak.len(),
        args.out.display()
    );
    println!(
        "mean bone length: {mean_bone:.1} mm, noise sigma: {}",
        cfg.noise_sigma
    );
    Ok(())
}

fn parse_stages(spec: &str) -> CliResult<Vec<u8>> {
    if spec == "all" {
        return Ok(vec![1, 2, 3]);
    }
    let mut stages = Vec::new();
    for part in spec.split(',') {
        match part.trim() {
            "1" => stages.push(1),
            "2" => stages.push(2),
            "3" => stages.push(3),
            other => {
                return Err(config_err(format!(
                    "invalid --stage '{other}' (expected all, 1, 2, 3 or a comma list)"
                )))
            }
        }
    }
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("--stage list must be strictly increasing"));
    }
    Ok(stages)
}

pub fn cmd_train(args: TrainArgs) -> CliResult<()> {
    args.common.validate()?;
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err)?;
            serde_json::from_str(&text).map_err(config_err)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(train_err)?;
    let stages = parse_stages(&args.stage)?;

    let paired = read_dataset(&args.paired).map_err(data_err)?;
    let weak = match &args.weak {
        Some(path) => read_dataset(path).map_err(data_err)?,
        None => Vec::new(),
    };
    if weak.is_empty() && cfg.paired_weak_ratio.1 > 0 && stages.contains(&3) {
        return Err(config_err(
            "stage 3 with a non-zero weak ratio needs --weak data (or set the ratio to 0)",
        ));
    }

    ensure_out_dir(&args.out)?;
    let cfg_path = args.out.join("effective_config.json");
    write_json(&cfg_path, &cfg)?;

    let mut state = match &args.resume {
        Some(path) => TrainState::load(&cfg, path).map_err(train_err)?,
        None => TrainState::new(&cfg),
    };
    let log_path = args.out.join("train_log.jsonl");
    let mut logger = TrainLogger::new(Some(&log_path)).map_err(train_err)?;
    let mut trainer = Trainer::new(&cfg, &paired, &weak, Some(&args.out)).map_err(train_err)?;
    if args.common.verbose {
        println!(
            "training stages {stages:?} on {} paired / {} weak records",
            paired.len(),
            weak.len()
        );
    }
    trainer
        .run(&mut state, &stages, &mut logger)
        .map_err(train_err)?;

    let mut files = vec![cfg_path, log_path, args.out.join("last.ckpt")];
    if args.out.join("best.ckpt").exists() {
        files.push(args.out.join("best.ckpt"));
    }
    write_manifest(&args.out, "train", &files)?;
    println!(
        "finished stages {stages:?}; {} steps total; checkpoints in {}",
        state.step,
        args.out.display()
    );
    Ok(())
}

/// Load a checkpoint along with the architecture recorded in its config
/// echo. Accepts both full and model-only checkpoints.
pub fn load_model(path: &Path) -> CliResult<(TrainConfig, Heads, ModelParams)> {
    let (cfg, params) = load_model_params(path).map_err(train_err)?;
    let heads = Heads::new(&cfg.arch);
    Ok((cfg, heads, params))
}

pub fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    args.common.validate()?;
    let (_, heads, state) = load_model(&args.model)?;
    let records = read_dataset(&args.data).map_err(data_err)?;
    if let Some(r) = records.iter().find(|r| !r.is_paired()) {
        return Err(config_err(format!(
            "eval requires paired data: record '{}' has no 3D ground truth",
            r.id
        )));
    }
    let input_source = match args.corrupt_sigma {
        Some(sigma) if sigma > 0.0 => InputSource::Corrupted {
            sigma,
            seed: args.corrupt_seed,
        },
        _ => InputSource::Clean,
    };
    let report = evaluate(
        &heads.refine,
        &state.refine,
        &heads.lifter,
        &state.lifter,
        &records,
        args.use_refine,
        input_source,
        &args.data.display().to_string(),
        &args.model.display().to_string(),
    )
    .map_err(|e| match e {
        EvalError::MissingGroundTruth(_) => config_err(format!("eval requires paired data: {e}")),
        EvalError::EmptyDataset => config_err(e),
        other => io_err(other),
    })?;

    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| args.model.with_extension("eval.json"));
    write_json(&out_path, &report)?;
    print!("{}", report.summary_table());
    println!("report        : {}", out_path.display());
    Ok(())
}

/// One line of the reprojection dump. Base fields follow the dataset
/// record schema (so the dump re-reads through the dataset parser); the
/// pipeline trace rides in the extra fields.
fn projection_record(
    record: &SampleRecord,
    refined_px: &Array2<f64>,
    pred3d: &Array2<f64>,
    cam: (crate::geometry::CameraIntrinsics, crate::geometry::Offset3D),
    reproj_px: &Array2<f64>,
    i: usize,
) -> SampleRecord {
    let joints2d_px: Vec<[f64; 2]> = (0..NUM_JOINTS)
        .map(|j| [reproj_px[[j, 0]], reproj_px[[j, 1]]])
        .collect();
    let pred = unflatten_pose3d(pred3d, i);
    let joints3d: Vec<[f64; 3]> = (0..NUM_JOINTS)
        .map(|j| {
            let c = pred.coords();
            [c[[j, 0]], c[[j, 1]], c[[j, 2]]]
        })
        .collect();
    let mut extra = serde_json::Map::new();
    extra.insert(
        "input2d_px".into(),
        serde_json::to_value(&record.joints2d_px).expect("serializable"),
    );
    let refined: Vec<[f64; 2]> = (0..NUM_JOINTS)
        .map(|j| [refined_px[[j, 0]], refined_px[[j, 1]]])
        .collect();
    extra.insert(
        "refined2d_px".into(),
        serde_json::to_value(&refined).expect("serializable"),
    );
    SampleRecord {
        id: format!("proj-{}", record.id),
        joints2d_px,
        conf: record.conf.clone(),
        image_wh: record.image_wh,
        joints3d_mm: Some(joints3d),
        camera: Some(crate::data::CameraRecord {
            f_x: cam.0.f_x,
            f_y: cam.0.f_y,
            c_x: cam.0.c_x,
            c_y: cam.0.c_y,
            t_x: cam.1.t_x,
            t_y: cam.1.t_y,
            t_z: cam.1.t_z,
        }),
        source_tag: "reprojection-dump".into(),
        extra,
    }
}

fn skeleton_svg(input: &Pose2D, reprojected: &Pose2D) -> String {
    let tree = KinematicTree::new();
    let size = 500.0;
    let map = |p: [f64; 2]| ((p[0] + 1.0) * size / 2.0, (p[1] + 1.0) * size / 2.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (pose, color) in [(input, "#9aa0a6"), (reprojected, "#d93025")] {
        for k in 0..NUM_BONES {
            let (parent, child) = tree.bone(k);
            let (x1, y1) = map(pose.joint(parent));
            let (x2, y2) = map(pose.joint(child));
            svg.push_str(&format!(
                "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n"
            ));
        }
        for j in crate::skeleton::JointId::ALL {
            let (x, y) = map(pose.joint(j));
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn cmd_project(args: ProjectArgs) -> CliResult<()> {
    args.common.validate()?;
    let (_, heads, state) = load_model(&args.model)?;
    let records = read_dataset(&args.data).map_err(data_err)?;
    if records.is_empty() {
        return Err(config_err("dataset is empty"));
    }
    ensure_out_dir(&args.out)?;

    // Full pipeline: refine -> lift -> camera -> reproject.
    let poses2d: Vec<_> = records.iter().map(|r| r.pose2d_normalized()).collect();
    let coords = flatten_pose2d_batch(&poses2d);
    let mut conf = Array2::zeros((records.len(), NUM_JOINTS));
    for (i, r) in records.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            conf[[i, j]] = r.conf[j];
        }
    }
    let (conf_norm, _) = normalize_confidence_batch(&conf);
    let refined = heads
        .refine
        .apply(&state.refine, &coords, &conf_norm)
        .map_err(io_err)?;
    let pred3d = heads
        .lifter
        .apply(&state.lifter, &refined)
        .map_err(io_err)?;
    let cams = heads.camera.infer(&state.camera, &refined).map_err(io_err)?;

    let mut dump = Vec::with_capacity(records.len());
    let mut plot_files = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let pred = unflatten_pose3d(&pred3d, i);
        let (k, t) = cams[i];
        let reproj = crate::geometry::project(&pred, &k, &t).map_err(|e| CliError {
            code: ExitCode::Numeric,
            message: format!("sample '{}': {e}", record.id),
        })?;
        let reproj_px =
            denormalize_2d(&reproj, record.image_wh.0, record.image_wh.1).map_err(io_err)?;
        let refined_pose = unflatten_pose2d(&refined, i);
        let refined_px =
            denormalize_2d(&refined_pose, record.image_wh.0, record.image_wh.1).map_err(io_err)?;
        dump.push(projection_record(
            record,
            &refined_px,
            &pred3d,
            (k, t),
            &reproj_px,
            i,
        ));
        if args.plots && i < args.plot_count {
            let svg = skeleton_svg(&poses2d[i], &reproj);
            let path = args.out.join(format!("plot_{}.svg", record.id));
            std::fs::write(&path, svg).map_err(io_err)?;
            plot_files.push(path);
        }
    }
    let dump_path = args.out.join("reprojection.jsonl");
    write_dataset(&dump, &dump_path).map_err(data_err)?;

    let mut files = vec![dump_path.clone()];
    files.extend(plot_files);
    write_manifest(&args.out, "project", &files)?;
    println!(
        "wrote {} reprojection traces to {}",
        dump.len(),
        dump_path.display()
    );
    Ok(())
}
