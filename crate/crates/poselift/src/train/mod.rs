//! The three-stage training procedure.
//!
//! Stage 1 pretrains the refinement network on synthetically corrupted
//! 2D keypoints. Stage 2 warms up the lifter (3D loss on paired batches)
//! and the GAN (generator + discriminators over paired and augmented
//! pools). Stage 3 trains end-to-end; each iteration runs, in order:
//! (a) a generator+discriminator step, (b) a lifter+camera+refinement
//! step on the paired batch joined with its augmentations, and (c) a
//! camera(+lifter+refinement) step on a 2D-only batch. 2D-only batches
//! never contribute camera or 3D loss terms.
//!
//! All randomness flows from the config seed through named ChaCha
//! streams; identical runs produce identical logs and checkpoints, and
//! resuming from a checkpoint is continuation-exact.

pub mod checkpoint;

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_batch_graph, AugmentError};
use crate::autograd::{clip_grad_norm, AdamHyperparams, AdamState, AutogradError, Graph, ParamSet};
use crate::data::{make_batches, Batch, BatchSchedule, DataError, SampleRecord};
use crate::eval::EvalError;
use crate::geometry::project;
use crate::losses::{
    camera_gt_columns, camera_loss, lsgan_losses, normalize_confidence_batch, paired_total_var,
    pose3d_loss, refinement_loss, reprojection_loss, split_uv, weak_total_var, BatchLossReport,
    DatasetKind, LossComponents, LossError, LossWeights,
};
use crate::nets::{
    flatten_pose2d_batch, flatten_pose3d_batch, pose_components, CameraBranch, CameraVars,
    Discriminator, Generator, Lifter, RefineNet, ResidualBlockSpec, MM_PER_UNIT,
};
use crate::skeleton::{KinematicTree, NUM_JOINTS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] AutogradError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(
        "non-finite loss at stage {stage} epoch {epoch} step {step}; last good checkpoint: {last_good:?}"
    )]
    NumericAbort {
        stage: u8,
        epoch: usize,
        step: u64,
        last_good: Option<PathBuf>,
    },
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

/// One stage's schedule: learning rate decays by 10x after each listed
/// epoch (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
}

impl StageConfig {
    fn validate(&self, name: &str) -> TrainResult<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config(format!("{name}: epochs must be > 0")));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("{name}: lr must be > 0")));
        }
        for d in &self.decay_epochs {
            if *d == 0 || *d >= self.epochs {
                return Err(TrainError::Config(format!(
                    "{name}: decay epoch {d} must lie strictly inside 1..{}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Effective learning rate during `epoch` (1-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|d| epoch > **d).count();
        self.lr * 0.1f64.powi(decays as i32)
    }
}

/// Network widths, exposed so small configurations stay cheap to
/// checkpoint in tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub trunk_width: usize,
    pub disc_width: usize,
    pub gen_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            trunk_width: 512,
            disc_width: 128,
            gen_hidden: 256,
        }
    }
}

/// Full training configuration. The defaults carry the reference
/// schedule: 100 refinement epochs at 1e-4 decaying at 30/60/90, a
/// 10-epoch warm-up at 1e-4, and 75 end-to-end epochs at 5e-4 decaying
/// at 30/60.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    /// Paired : weak batch interleaving in stage 3.
    pub paired_weak_ratio: (usize, usize),
    pub seed: u64,
    /// Corruption applied to refinement inputs (stage 1 and the 2D-only
    /// pipeline), in normalized units.
    pub corrupt_sigma: f64,
    /// Gradient-norm clip applied to GAN updates only.
    pub gan_grad_clip: f64,
    /// Discriminator updates per generator update.
    pub gan_disc_steps: usize,
    pub val_fraction: f64,
    /// Write `last.ckpt` every this many epochs (0 = stage ends only).
    pub checkpoint_every: usize,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig {
                epochs: 100,
                lr: 1e-4,
                decay_epochs: vec![30, 60, 90],
            },
            stage2: StageConfig {
                epochs: 10,
                lr: 1e-4,
                decay_epochs: vec![],
            },
            stage3: StageConfig {
                epochs: 75,
                lr: 5e-4,
                decay_epochs: vec![30, 60],
            },
            weights: LossWeights::default(),
            batch_size: 64,
            paired_weak_ratio: (2, 1),
            seed: 0,
            corrupt_sigma: 0.02,
            gan_grad_clip: 10.0,
            gan_disc_steps: 1,
            val_fraction: 0.2,
            checkpoint_every: 0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.stage3.validate("stage3")?;
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be > 0".into()));
        }
        if self.paired_weak_ratio.0 == 0 {
            return Err(TrainError::Config(
                "paired_weak_ratio must include at least one paired batch".into(),
            ));
        }
        if self.corrupt_sigma < 0.0 {
            return Err(TrainError::Config("corrupt_sigma must be >= 0".into()));
        }
        if self.gan_disc_steps == 0 {
            return Err(TrainError::Config("gan_disc_steps must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The deterministic train/validation split used by the trainer.
pub fn validation_split(
    cfg: &TrainConfig,
    paired: &[SampleRecord],
) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    crate::data::split_dataset(paired, cfg.val_fraction, cfg.seed ^ TAG_SPLIT)
}

/// The five heads instantiated from an [`ArchConfig`].
pub struct Heads {
    pub refine: RefineNet,
    pub lifter: Lifter,
    pub camera: CameraBranch,
    pub generator: Generator,
    pub disc: Discriminator,
}

impl Heads {
    pub fn new(arch: &ArchConfig) -> Self {
        let trunk = ResidualBlockSpec {
            width: arch.trunk_width,
        };
        Heads {
            refine: RefineNet { block: trunk },
            lifter: Lifter { block: trunk },
            camera: CameraBranch { block: trunk },
            generator: Generator {
                hidden: arch.gen_hidden,
            },
            disc: Discriminator {
                block: ResidualBlockSpec {
                    width: arch.disc_width,
                },
            },
        }
    }
}

// Seed tags for independent deterministic streams.
const TAG_REFINE: u64 = 0x01;
const TAG_LIFTER: u64 = 0x02;
const TAG_CAMERA: u64 = 0x03;
const TAG_GENERATOR: u64 = 0x04;
const TAG_DISC2D: u64 = 0x05;
const TAG_DISC3D: u64 = 0x06;
const TAG_DATA: u64 = 0x11;
const TAG_CORRUPT: u64 = 0x12;
const TAG_NOISE: u64 = 0x13;
const TAG_SPLIT: u64 = 0x21;
const TAG_VAL_CORRUPT: u64 = 0x22;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Named RNG streams whose positions are checkpointed.
#[derive(Clone)]
pub struct RngSet {
    pub data: ChaCha8Rng,
    pub corrupt: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl RngSet {
    fn new(seed: u64) -> Self {
        RngSet {
            data: stream(seed, TAG_DATA),
            corrupt: stream(seed, TAG_CORRUPT),
            noise: stream(seed, TAG_NOISE),
        }
    }

    fn positions(&self) -> [(&'static str, u128); 3] {
        [
            ("data", self.data.get_word_pos()),
            ("corrupt", self.corrupt.get_word_pos()),
            ("noise", self.noise.get_word_pos()),
        ]
    }

    fn restore(seed: u64, positions: &IndexMap<String, u128>) -> Self {
        let mut set = RngSet::new(seed);
        if let Some(p) = positions.get("data") {
            set.data.set_word_pos(*p);
        }
        if let Some(p) = positions.get("corrupt") {
            set.corrupt.set_word_pos(*p);
        }
        if let Some(p) = positions.get("noise") {
            set.noise.set_word_pos(*p);
        }
        set
    }
}

/// Complete resumable training state.
#[derive(Clone)]
pub struct TrainState {
    /// Stage currently in progress (1-3).
    pub stage: u8,
    /// Epochs completed within the current stage.
    pub epoch: usize,
    pub step: u64,
    pub refine: ParamSet,
    pub lifter: ParamSet,
    pub camera: ParamSet,
    pub generator: ParamSet,
    pub disc2d: ParamSet,
    pub disc3d: ParamSet,
    pub adam_refine: AdamState,
    pub adam_lifter: AdamState,
    pub adam_camera: AdamState,
    pub adam_generator: AdamState,
    pub adam_disc2d: AdamState,
    pub adam_disc3d: AdamState,
    pub rngs: RngSet,
    pub best_val_mpjpe: Option<f64>,
    pub best_refine_val: Option<f64>,
    /// Best refinement weights seen during stage 1 (restored at its end).
    pub best_refine: Option<ParamSet>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let heads = Heads::new(&cfg.arch);
        let hp = |lr: f64| AdamHyperparams::with_lr(lr);
        TrainState {
            stage: 1,
            epoch: 0,
            step: 0,
            refine: heads.refine.init(&mut stream(cfg.seed, TAG_REFINE)),
            lifter: heads.lifter.init(&mut stream(cfg.seed, TAG_LIFTER)),
            camera: heads.camera.init(&mut stream(cfg.seed, TAG_CAMERA)),
            generator: heads.generator.init(&mut stream(cfg.seed, TAG_GENERATOR)),
            disc2d: heads.disc.init(&mut stream(cfg.seed, TAG_DISC2D)),
            disc3d: heads.disc.init(&mut stream(cfg.seed, TAG_DISC3D)),
            adam_refine: AdamState::new(hp(cfg.stage1.lr)),
            adam_lifter: AdamState::new(hp(cfg.stage2.lr)),
            adam_camera: AdamState::new(hp(cfg.stage3.lr)),
            adam_generator: AdamState::new(hp(cfg.stage2.lr)),
            adam_disc2d: AdamState::new(hp(cfg.stage2.lr)),
            adam_disc3d: AdamState::new(hp(cfg.stage2.lr)),
            rngs: RngSet::new(cfg.seed),
            best_val_mpjpe: None,
            best_refine_val: None,
            best_refine: None,
        }
    }

    fn heads_mut(&mut self) -> [(&'static str, &mut ParamSet, &mut AdamState); 6] {
        [
            ("refine", &mut self.refine, &mut self.adam_refine),
            ("lifter", &mut self.lifter, &mut self.adam_lifter),
            ("camera", &mut self.camera, &mut self.adam_camera),
            ("generator", &mut self.generator, &mut self.adam_generator),
            ("disc2d", &mut self.disc2d, &mut self.adam_disc2d),
            ("disc3d", &mut self.disc3d, &mut self.adam_disc3d),
        ]
    }

    /// Serialize the full state.
    pub fn save(&mut self, cfg: &TrainConfig, path: &Path) -> TrainResult<()> {
        let mut meta = IndexMap::new();
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert(
            "best_val_mpjpe".into(),
            checkpoint::format_opt_f64(self.best_val_mpjpe),
        );
        meta.insert(
            "best_refine_val".into(),
            checkpoint::format_opt_f64(self.best_refine_val),
        );
        for (name, pos) in self.rngs.positions() {
            meta.insert(format!("rng.{name}.pos"), pos.to_string());
        }

        let mut sections = Vec::new();
        let best_refine = self.best_refine.clone();
        for (name, params, adam) in self.heads_mut() {
            sections.push((
                format!("params.{name}"),
                params
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.clone()))
                    .collect::<Vec<_>>(),
            ));
            let mut adam_arrays: Vec<(String, Array2<f64>)> = adam
                .moments()
                .map(|(k, v)| (k, v.clone()))
                .collect();
            // Optimizer scalars ride along as 1x1 arrays.
            adam_arrays.push((
                "opt.step".into(),
                Array2::from_elem((1, 1), adam.step_count() as f64),
            ));
            adam_arrays.push(("opt.lr".into(), Array2::from_elem((1, 1), adam.lr())));
            sections.push((format!("adam.{name}"), adam_arrays));
        }
        if let Some(best) = &best_refine {
            sections.push((
                "params.best_refine".into(),
                best.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            ));
        }
        let config_json = serde_json::to_string(cfg).expect("config serializes");
        checkpoint::write_checkpoint(path, &meta, &config_json, &sections)
    }

    /// Write a model-only checkpoint: head parameters and the config
    /// echo, without optimizer moments or RNG state. Suitable for
    /// evaluation and inference, not for `--resume`.
    pub fn save_model_only(&mut self, cfg: &TrainConfig, path: &Path) -> TrainResult<()> {
        let mut meta = IndexMap::new();
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert(
            "best_val_mpjpe".into(),
            checkpoint::format_opt_f64(self.best_val_mpjpe),
        );
        let mut sections = Vec::new();
        for (name, params, _) in self.heads_mut() {
            sections.push((
                format!("params.{name}"),
                params
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.clone()))
                    .collect::<Vec<_>>(),
            ));
        }
        let config_json = serde_json::to_string(cfg).expect("config serializes");
        checkpoint::write_checkpoint(path, &meta, &config_json, &sections)
    }

    /// Restore a state saved by [`TrainState::save`]. The checkpoint's
    /// embedded config must match `cfg`.
    pub fn load(cfg: &TrainConfig, path: &Path) -> TrainResult<Self> {
        let file = checkpoint::read_checkpoint(path)?;
        let saved_cfg: TrainConfig = serde_json::from_str(&file.config_json)
            .map_err(|e| TrainError::Checkpoint(format!("bad config echo: {e}")))?;
        if &saved_cfg != cfg {
            return Err(TrainError::Checkpoint(
                "checkpoint was produced by a different configuration".into(),
            ));
        }

        let mut positions = IndexMap::new();
        for name in ["data", "corrupt", "noise"] {
            let key = format!("rng.{name}.pos");
            let pos: u128 = file
                .meta
                .get(&key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| TrainError::Checkpoint(format!("missing meta '{key}'")))?;
            positions.insert(name.to_string(), pos);
        }

        let mut state = TrainState::new(cfg);
        state.stage = file.meta_u64("stage")? as u8;
        state.epoch = file.meta_u64("epoch")? as usize;
        state.step = file.meta_u64("step")?;
        state.best_val_mpjpe = file.meta_opt_f64("best_val_mpjpe")?;
        state.best_refine_val = file.meta_opt_f64("best_refine_val")?;
        state.rngs = RngSet::restore(cfg.seed, &positions);

        state.refine = file.param_set("params.refine")?;
        state.lifter = file.param_set("params.lifter")?;
        state.camera = file.param_set("params.camera")?;
        state.generator = file.param_set("params.generator")?;
        state.disc2d = file.param_set("params.disc2d")?;
        state.disc3d = file.param_set("params.disc3d")?;
        if file.sections.contains_key("params.best_refine") {
            state.best_refine = Some(file.param_set("params.best_refine")?);
        }

        for (name, _, adam) in state.heads_mut() {
            let section = file.section(&format!("adam.{name}"))?;
            let mut step = 0u64;
            let mut lr = None;
            *adam = AdamState::new(AdamHyperparams::with_lr(1.0));
            for (key, arr) in section {
                match key.as_str() {
                    "opt.step" => step = arr[[0, 0]] as u64,
                    "opt.lr" => lr = Some(arr[[0, 0]]),
                    _ => adam
                        .restore_moment(key, arr.clone())
                        .map_err(|e| TrainError::Checkpoint(e.to_string()))?,
                }
            }
            adam.set_step_count(step);
            adam.set_lr(lr.ok_or_else(|| {
                TrainError::Checkpoint(format!("adam.{name} is missing opt.lr"))
            })?);
        }
        Ok(state)
    }
}

// ---------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------

struct PairedBatchData {
    /// Pipeline input: the record's (noisy) 2D keypoints.
    input2d: Array2<f64>,
    conf_norm: Array2<f64>,
    /// Exact projections of the ground-truth 3D through the true camera:
    /// the refinement and reprojection targets.
    clean_u: Array2<f64>,
    clean_v: Array2<f64>,
    clean_flat: Array2<f64>,
    gt3d_comps: [Array2<f64>; 3],
    gt3d_flat: Array2<f64>,
    cams: Vec<(crate::geometry::CameraIntrinsics, crate::geometry::Offset3D)>,
}

fn comps_of_flat3d(flat: &Array2<f64>) -> [Array2<f64>; 3] {
    let mut g = Graph::new();
    let x = g.leaf(flat.clone());
    let comps = pose_components(&mut g, x, 3).expect("selector shapes");
    [
        g.value(comps[0]).clone(),
        g.value(comps[1]).clone(),
        g.value(comps[2]).clone(),
    ]
}

fn build_paired_batch(records: &[SampleRecord], indices: &[usize]) -> TrainResult<PairedBatchData> {
    let picked: Vec<&SampleRecord> = indices.iter().map(|i| &records[*i]).collect();
    let poses2d: Vec<_> = picked.iter().map(|r| r.pose2d_normalized()).collect();
    let input2d = flatten_pose2d_batch(&poses2d);
    let mut conf = Array2::zeros((picked.len(), NUM_JOINTS));
    for (i, r) in picked.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            conf[[i, j]] = r.conf[j];
        }
    }
    let (conf_norm, _) = normalize_confidence_batch(&conf);

    let mut cams = Vec::with_capacity(picked.len());
    let mut clean = Vec::with_capacity(picked.len());
    let mut poses3d = Vec::with_capacity(picked.len());
    for r in &picked {
        let pose3d = r.pose3d().expect("paired record");
        let (k, t) = r.camera_params().expect("paired record");
        let projected = project(&pose3d, &k, &t).map_err(|e| {
            TrainError::Config(format!("paired record '{}' does not project: {e}", r.id))
        })?;
        cams.push((k, t));
        clean.push(projected);
        poses3d.push(pose3d);
    }
    let clean_flat = flatten_pose2d_batch(&clean);
    let (clean_u, clean_v) = split_uv(&clean_flat);
    let gt3d_flat = flatten_pose3d_batch(&poses3d);
    let gt3d_comps = comps_of_flat3d(&gt3d_flat);
    Ok(PairedBatchData {
        input2d,
        conf_norm,
        clean_u,
        clean_v,
        clean_flat,
        gt3d_comps,
        gt3d_flat,
        cams,
    })
}

struct WeakBatchData {
    /// Pipeline input: corrupted annotations plus simulated confidences.
    input2d: Array2<f64>,
    conf_norm: Array2<f64>,
    /// The stored annotations: refinement and reprojection targets.
    target_flat: Array2<f64>,
    target_u: Array2<f64>,
    target_v: Array2<f64>,
}

/// Builds the 2D-only view of a batch. Reads nothing but the 2D
/// keypoints, so any 3D labels present on the records cannot influence
/// the result.
fn build_weak_batch(
    records: &[SampleRecord],
    indices: &[usize],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> WeakBatchData {
    let picked: Vec<&SampleRecord> = indices.iter().map(|i| &records[*i]).collect();
    let poses2d: Vec<_> = picked.iter().map(|r| r.pose2d_normalized()).collect();
    let target_flat = flatten_pose2d_batch(&poses2d);
    let mut input2d = target_flat.clone();
    let mut conf = Array2::from_elem((picked.len(), NUM_JOINTS), 1.0);
    if sigma > 0.0 {
        for i in 0..input2d.nrows() {
            for j in 0..NUM_JOINTS {
                let n = [
                    sigma * rng.sample::<f64, _>(StandardNormal),
                    sigma * rng.sample::<f64, _>(StandardNormal),
                ];
                input2d[[i, 2 * j]] += n[0];
                input2d[[i, 2 * j + 1]] += n[1];
                let mag = (n[0] * n[0] + n[1] * n[1]).sqrt();
                conf[[i, j]] = (1.0 - mag / (3.0 * sigma)).clamp(0.05, 1.0);
            }
        }
    }
    let (conf_norm, _) = normalize_confidence_batch(&conf);
    let (target_u, target_v) = split_uv(&target_flat);
    WeakBatchData {
        input2d,
        conf_norm,
        target_flat,
        target_u,
        target_v,
    }
}

// ---------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------

/// One training-log line (JSON per line in the log file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogLine {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub phase: String,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<BatchLossReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gan: Option<GanLossLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanLossLine {
    pub dis_2d: f64,
    pub dis_3d: f64,
    pub gen: f64,
}

/// Collects log lines and mirrors them to a file when given one.
pub struct TrainLogger {
    file: Option<std::io::BufWriter<std::fs::File>>,
    pub lines: Vec<LogLine>,
}

impl TrainLogger {
    pub fn new(path: Option<&Path>) -> TrainResult<Self> {
        let file = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(TrainLogger {
            file,
            lines: Vec::new(),
        })
    }

    fn push(&mut self, line: LogLine) -> TrainResult<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(&line).expect("log line"))?;
        }
        self.lines.push(line);
        Ok(())
    }

    fn flush(&mut self) -> TrainResult<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn check_finite(values: &[f64], ctx: (u8, usize, u64), last_good: &Option<PathBuf>) -> TrainResult<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::NumericAbort {
            stage: ctx.0,
            epoch: ctx.1,
            step: ctx.2,
            last_good: last_good.clone(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------

/// Drives the staged procedure over fixed datasets.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub heads: Heads,
    paired_train: Vec<SampleRecord>,
    paired_val: Vec<SampleRecord>,
    weak: Vec<SampleRecord>,
    out_dir: Option<PathBuf>,
    last_good: Option<PathBuf>,
    /// Count of weak batches consumed per stage, for stage contracts.
    pub weak_batches_consumed: [usize; 3],
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a TrainConfig,
        paired: &[SampleRecord],
        weak: &[SampleRecord],
        out_dir: Option<&Path>,
    ) -> TrainResult<Self> {
        cfg.validate()?;
        if paired.is_empty() {
            return Err(TrainError::Data(DataError::EmptyDataset));
        }
        for r in paired {
            if !r.is_paired() {
                return Err(TrainError::Config(format!(
                    "record '{}' in the paired dataset lacks 3D or camera labels",
                    r.id
                )));
            }
        }
        let (train, val) = validation_split(cfg, paired);
        Ok(Trainer {
            cfg,
            heads: Heads::new(&cfg.arch),
            paired_train: train,
            paired_val: val,
            weak: weak.to_vec(),
            out_dir: out_dir.map(|p| p.to_path_buf()),
            last_good: None,
            weak_batches_consumed: [0; 3],
        })
    }

    pub fn paired_val(&self) -> &[SampleRecord] {
        &self.paired_val
    }

    fn ckpt_path(&self, name: &str) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(name))
    }

    fn write_last(&mut self, state: &mut TrainState) -> TrainResult<()> {
        if let Some(path) = self.ckpt_path("last.ckpt") {
            state.save(self.cfg, &path)?;
            self.last_good = Some(path);
        }
        Ok(())
    }

    fn maybe_checkpoint_epoch(&mut self, state: &mut TrainState) -> TrainResult<()> {
        if self.cfg.checkpoint_every > 0 && state.epoch % self.cfg.checkpoint_every == 0 {
            self.write_last(state)?;
        }
        Ok(())
    }

    /// Run the requested stages (subset of {1, 2, 3}, in order).
    pub fn run(
        &mut self,
        state: &mut TrainState,
        stages: &[u8],
        logger: &mut TrainLogger,
    ) -> TrainResult<()> {
        for stage in stages {
            match stage {
                1 => self.run_stage1(state, logger)?,
                2 => self.run_stage2(state, logger)?,
                3 => self.run_stage3(state, logger)?,
                other => {
                    return Err(TrainError::Config(format!("unknown stage {other}")));
                }
            }
        }
        logger.flush()?;
        Ok(())
    }

    /// Held-out refinement loss with a fixed validation corruption.
    fn stage1_val_loss(&self, state: &TrainState) -> TrainResult<f64> {
        let mut rng = stream(self.cfg.seed, TAG_VAL_CORRUPT);
        let indices: Vec<usize> = (0..self.paired_val.len()).collect();
        let batch = build_weak_batch(
            &self.paired_val,
            &indices,
            self.cfg.corrupt_sigma,
            &mut rng,
        );
        let mut g = Graph::new();
        let bound = state.refine.bind(&mut g);
        let input = g.leaf(batch.input2d.clone());
        let conf = g.leaf(batch.conf_norm.clone());
        let refined = self.heads.refine.forward(&mut g, &bound, input, conf)?;
        let target = g.leaf(batch.target_flat.clone());
        let loss = refinement_loss(&mut g, refined, target, &batch.conf_norm)?;
        Ok(g.scalar_value(loss))
    }

    fn run_stage1(&mut self, state: &mut TrainState, logger: &mut TrainLogger) -> TrainResult<()> {
        if state.stage > 1 {
            return Ok(());
        }
        // Stage 1 trains on every available 2D observation.
        let mut pool: Vec<SampleRecord> = self.paired_train.clone();
        pool.extend(self.weak.iter().cloned());

        let start_epoch = state.epoch;
        for epoch in (start_epoch + 1)..=self.cfg.stage1.epochs {
            let lr = self.cfg.stage1.lr_at_epoch(epoch);
            state.adam_refine.set_lr(lr);
            let batches = make_batches(
                pool.len(),
                0,
                self.cfg.batch_size,
                BatchSchedule::PairedOnly,
                &mut state.rngs.data,
            )?;
            for batch in &batches {
                let data = build_weak_batch(
                    &pool,
                    &batch.indices,
                    self.cfg.corrupt_sigma,
                    &mut state.rngs.corrupt,
                );
                let mut g = Graph::new();
                let bound = state.refine.bind(&mut g);
                let input = g.leaf(data.input2d.clone());
                let conf = g.leaf(data.conf_norm.clone());
                let refined = self.heads.refine.forward(&mut g, &bound, input, conf)?;
                let target = g.leaf(data.target_flat.clone());
                let loss = refinement_loss(&mut g, refined, target, &data.conf_norm)?;
                let loss_value = g.scalar_value(loss);
                check_finite(&[loss_value], (1, epoch, state.step), &self.last_good)?;
                g.backward(loss)?;
                let grads = bound.grads(&g);
                state.adam_refine.step(&mut state.refine, &grads)?;
                state.step += 1;
                logger.push(LogLine {
                    stage: 1,
                    epoch,
                    step: state.step,
                    phase: "refine".into(),
                    lr,
                    losses: Some(BatchLossReport {
                        kind: DatasetKind::Paired,
                        batch_size: batch.indices.len(),
                        refine: Some(loss_value),
                        camera: None,
                        reproj2d: None,
                        pose3d: None,
                        total: loss_value,
                    }),
                    gan: None,
                    val_metric: None,
                })?;
            }
            // Held-out refinement loss drives best-epoch selection.
            let val = self.stage1_val_loss(state)?;
            check_finite(&[val], (1, epoch, state.step), &self.last_good)?;
            if state.best_refine_val.map_or(true, |b| val < b) {
                state.best_refine_val = Some(val);
                state.best_refine = Some(state.refine.clone());
            }
            logger.push(LogLine {
                stage: 1,
                epoch,
                step: state.step,
                phase: "val".into(),
                lr,
                losses: None,
                gan: None,
                val_metric: Some(val),
            })?;
            state.epoch = epoch;
            self.maybe_checkpoint_epoch(state)?;
        }
        // Restore the best-epoch weights.
        if let Some(best) = state.best_refine.clone() {
            state.refine = best;
        }
        state.stage = 2;
        state.epoch = 0;
        self.write_last(state)?;
        Ok(())
    }

    /// One GAN sub-step shared by stages 2 and 3. Returns the augmented
    /// batch values for reuse, plus the reported losses.
    #[allow(clippy::too_many_arguments)]
    fn gan_step(
        &mut self,
        state: &mut TrainState,
        paired: &PairedBatchData,
        weak: Option<&WeakBatchData>,
        lr: f64,
        stage: u8,
        epoch: usize,
        logger: &mut TrainLogger,
    ) -> TrainResult<AugmentedValues> {
        let tree = KinematicTree::new();
        let n = paired.input2d.nrows();
        let mut g = Graph::new();
        let gen_bound = state.generator.bind(&mut g);
        let d2_bound = state.disc2d.bind(&mut g);
        let d3_bound = state.disc3d.bind(&mut g);
        let refine_bound = state.refine.bind(&mut g);
        let lifter_bound = state.lifter.bind(&mut g);
        let camera_bound = state.camera.bind(&mut g);

        // Generator forward + differentiable augmentation.
        let src_flat = g.leaf(paired.gt3d_flat.clone());
        let noise_arr =
            Array2::from_shape_fn((n, Generator::NOISE_DIM), |_| {
                state.rngs.noise.sample::<f64, _>(StandardNormal)
            });
        let noise = g.leaf(noise_arr);
        let gen_vars = self
            .heads
            .generator
            .forward(&mut g, &gen_bound, src_flat, noise)?;
        let src_comps = pose_components(&mut g, src_flat, 3)?;
        let src_comps = [src_comps[0], src_comps[1], src_comps[2]];
        let aug = augment_batch_graph(&mut g, &src_comps, &gen_vars, &tree)?;

        // Augmented 2D through the source intrinsics and the generator's
        // rigid translation.
        let intr = camera_gt_columns(&paired.cams);
        let aug_cam = CameraVars {
            f_x: g.leaf(intr[0].clone()),
            f_y: g.leaf(intr[1].clone()),
            c_x: g.leaf(intr[2].clone()),
            c_y: g.leaf(intr[3].clone()),
            t_x: aug.offset[0],
            t_y: aug.offset[1],
            t_z: aug.offset[2],
        };
        let (aug_u, aug_v) =
            crate::losses::project_components(&mut g, &aug.comps, &aug_cam)?;

        // Discriminator scores. Real 2D: the dataset keypoints; real 3D:
        // the dataset poses. Fake 3D: augmented. Fake 2D: augmented
        // projections plus (stage 3) reprojected 2D-only predictions.
        let (real_u, real_v) = split_uv(&paired.input2d);
        let real_u = g.leaf(real_u);
        let real_v = g.leaf(real_v);
        let s_real2d = self
            .heads
            .disc
            .forward_components(&mut g, &d2_bound, &[real_u, real_v], 1.0)?;
        let s_real3d = self.heads.disc.forward_components(
            &mut g,
            &d3_bound,
            &src_comps,
            1.0 / MM_PER_UNIT,
        )?;
        let s_fake3d = self.heads.disc.forward_components(
            &mut g,
            &d3_bound,
            &aug.comps,
            1.0 / MM_PER_UNIT,
        )?;
        let s_fake2d_aug = self
            .heads
            .disc
            .forward_components(&mut g, &d2_bound, &[aug_u, aug_v], 1.0)?;
        let s_fake2d = match weak {
            None => s_fake2d_aug,
            Some(wb) => {
                // Reprojections of the 2D-only pipeline join the fake pool.
                let input = g.leaf(wb.input2d.clone());
                let conf = g.leaf(wb.conf_norm.clone());
                let refined = self
                    .heads
                    .refine
                    .forward(&mut g, &refine_bound, input, conf)?;
                let lift = self
                    .heads
                    .lifter
                    .forward_components(&mut g, &lifter_bound, refined)?;
                let cam = self.heads.camera.forward(&mut g, &camera_bound, refined)?;
                let (u, v) = crate::losses::project_components(&mut g, &lift, &cam)?;
                let s_weak = self
                    .heads
                    .disc
                    .forward_components(&mut g, &d2_bound, &[u, v], 1.0)?;
                g.concat_rows(&[s_fake2d_aug, s_weak])?
            }
        };

        let gan = lsgan_losses(&mut g, s_real2d, s_fake2d, s_real3d, s_fake3d)?;
        let dis_total = g.add(gan.dis_2d, gan.dis_3d)?;
        let report = GanLossLine {
            dis_2d: g.scalar_value(gan.dis_2d),
            dis_3d: g.scalar_value(gan.dis_3d),
            gen: g.scalar_value(gan.gen),
        };
        check_finite(
            &[report.dis_2d, report.dis_3d, report.gen],
            (stage, epoch, state.step),
            &self.last_good,
        )?;

        // Discriminator update(s); gradients flowing into other heads are
        // simply not applied.
        for _ in 0..self.cfg.gan_disc_steps {
            g.zero_grads();
            g.backward(dis_total)?;
            let mut d2_grads = d2_bound.grads(&g);
            clip_grad_norm(&mut d2_grads, self.cfg.gan_grad_clip);
            state.adam_disc2d.set_lr(lr);
            state.adam_disc2d.step(&mut state.disc2d, &d2_grads)?;
            let mut d3_grads = d3_bound.grads(&g);
            clip_grad_norm(&mut d3_grads, self.cfg.gan_grad_clip);
            state.adam_disc3d.set_lr(lr);
            state.adam_disc3d.step(&mut state.disc3d, &d3_grads)?;
        }

        // Generator update.
        g.zero_grads();
        g.backward(gan.gen)?;
        let mut gen_grads = gen_bound.grads(&g);
        clip_grad_norm(&mut gen_grads, self.cfg.gan_grad_clip);
        state.adam_generator.set_lr(lr);
        state.adam_generator.step(&mut state.generator, &gen_grads)?;

        state.step += 1;
        logger.push(LogLine {
            stage,
            epoch,
            step: state.step,
            phase: "gan".into(),
            lr,
            losses: None,
            gan: Some(report),
            val_metric: None,
        })?;

        // Extract augmented values for the paired sub-step.
        let mut aug_2d_flat = Array2::zeros((n, 2 * NUM_JOINTS));
        let u = g.value(aug_u);
        let v = g.value(aug_v);
        for i in 0..n {
            for j in 0..NUM_JOINTS {
                aug_2d_flat[[i, 2 * j]] = u[[i, j]];
                aug_2d_flat[[i, 2 * j + 1]] = v[[i, j]];
            }
        }
        let aug_u_val = u.clone();
        let aug_v_val = v.clone();
        let comps = [
            g.value(aug.comps[0]).clone(),
            g.value(aug.comps[1]).clone(),
            g.value(aug.comps[2]).clone(),
        ];
        let mut cams = Vec::with_capacity(n);
        for (i, (k, _)) in paired.cams.iter().enumerate() {
            cams.push((
                *k,
                crate::geometry::Offset3D::new(
                    g.value(aug.offset[0])[[i, 0]],
                    g.value(aug.offset[1])[[i, 0]],
                    g.value(aug.offset[2])[[i, 0]],
                ),
            ));
        }
        Ok(AugmentedValues {
            flat2d: aug_2d_flat,
            u: aug_u_val,
            v: aug_v_val,
            comps,
            cams,
        })
    }

    fn run_stage2(&mut self, state: &mut TrainState, logger: &mut TrainLogger) -> TrainResult<()> {
        if state.stage > 2 {
            return Ok(());
        }
        let start_epoch = state.epoch;
        for epoch in (start_epoch + 1)..=self.cfg.stage2.epochs {
            let lr = self.cfg.stage2.lr_at_epoch(epoch);
            let batches = make_batches(
                self.paired_train.len(),
                0,
                self.cfg.batch_size,
                BatchSchedule::PairedOnly,
                &mut state.rngs.data,
            )?;
            for batch in &batches {
                let paired = build_paired_batch(&self.paired_train, &batch.indices)?;
                // (a) GAN warm-up on paired + augmented pools.
                self.gan_step(state, &paired, None, lr, 2, epoch, logger)?;

                // (b) Lifter on the 3D loss over the paired batch. The
                // refinement network stays frozen and bypassed here.
                let mut g = Graph::new();
                let lifter_bound = state.lifter.bind(&mut g);
                let input = g.leaf(paired.input2d.clone());
                let lift = self
                    .heads
                    .lifter
                    .forward_components(&mut g, &lifter_bound, input)?;
                let loss = pose3d_loss(&mut g, &lift, &paired.gt3d_comps)?;
                let loss_value = g.scalar_value(loss);
                check_finite(&[loss_value], (2, epoch, state.step), &self.last_good)?;
                g.backward(loss)?;
                let grads = lifter_bound.grads(&g);
                state.adam_lifter.set_lr(lr);
                state.adam_lifter.step(&mut state.lifter, &grads)?;
                state.step += 1;
                logger.push(LogLine {
                    stage: 2,
                    epoch,
                    step: state.step,
                    phase: "paired".into(),
                    lr,
                    losses: Some(BatchLossReport {
                        kind: DatasetKind::Paired,
                        batch_size: batch.indices.len(),
                        refine: None,
                        camera: None,
                        reproj2d: None,
                        pose3d: Some(loss_value),
                        total: loss_value,
                    }),
                    gan: None,
                    val_metric: None,
                })?;
            }
            let val = self.val_mpjpe(state, false)?;
            logger.push(LogLine {
                stage: 2,
                epoch,
                step: state.step,
                phase: "val".into(),
                lr,
                losses: None,
                gan: None,
                val_metric: Some(val),
            })?;
            state.epoch = epoch;
            self.maybe_checkpoint_epoch(state)?;
        }
        state.stage = 3;
        state.epoch = 0;
        self.write_last(state)?;
        Ok(())
    }

    /// Validation MPJPE on the held-out paired split. Computed directly
    /// (no Procrustes) so near-degenerate early predictions cannot abort
    /// training.
    fn val_mpjpe(&self, state: &TrainState, use_refine: bool) -> TrainResult<f64> {
        let poses2d: Vec<_> = self
            .paired_val
            .iter()
            .map(|r| r.pose2d_normalized())
            .collect();
        let coords = flatten_pose2d_batch(&poses2d);
        let mut conf = Array2::zeros((self.paired_val.len(), NUM_JOINTS));
        for (i, r) in self.paired_val.iter().enumerate() {
            for j in 0..NUM_JOINTS {
                conf[[i, j]] = r.conf[j];
            }
        }
        let (conf_norm, _) = normalize_confidence_batch(&conf);
        let input = if use_refine {
            self.heads.refine.apply(&state.refine, &coords, &conf_norm)?
        } else {
            coords
        };
        let pred = self.heads.lifter.apply(&state.lifter, &input)?;
        let mut total = 0.0;
        for (i, r) in self.paired_val.iter().enumerate() {
            let gt = r.pose3d().expect("paired val record");
            let p = crate::nets::unflatten_pose3d(&pred, i);
            total += crate::eval::mpjpe(&p, &gt);
        }
        Ok(total / self.paired_val.len() as f64)
    }

    fn run_stage3(&mut self, state: &mut TrainState, logger: &mut TrainLogger) -> TrainResult<()> {
        let weak_enabled = self.cfg.paired_weak_ratio.1 > 0 && !self.weak.is_empty();
        let start_epoch = state.epoch;
        for epoch in (start_epoch + 1)..=self.cfg.stage3.epochs {
            let lr = self.cfg.stage3.lr_at_epoch(epoch);
            let schedule = if weak_enabled {
                BatchSchedule::Mixed {
                    paired: self.cfg.paired_weak_ratio.0,
                    weak: self.cfg.paired_weak_ratio.1,
                }
            } else {
                BatchSchedule::PairedOnly
            };
            let batches = make_batches(
                self.paired_train.len(),
                self.weak.len(),
                self.cfg.batch_size,
                schedule,
                &mut state.rngs.data,
            )?;
            // Group the stream into iterations: each paired batch starts
            // one; weak batches attach to the most recent iteration.
            let mut iterations: Vec<(Batch, Vec<Batch>)> = Vec::new();
            for b in batches {
                match b.kind {
                    DatasetKind::Paired => iterations.push((b, Vec::new())),
                    DatasetKind::Weak => {
                        if let Some(last) = iterations.last_mut() {
                            last.1.push(b);
                        }
                    }
                    DatasetKind::Augmented => unreachable!("batcher emits paired/weak only"),
                }
            }

            for (paired_batch, weak_batches) in &iterations {
                let paired = build_paired_batch(&self.paired_train, &paired_batch.indices)?;
                let weak_data: Vec<WeakBatchData> = weak_batches
                    .iter()
                    .map(|wb| {
                        build_weak_batch(
                            &self.weak,
                            &wb.indices,
                            self.cfg.corrupt_sigma,
                            &mut state.rngs.corrupt,
                        )
                    })
                    .collect();

                // (a) Generator + discriminators.
                let aug = self.gan_step(
                    state,
                    &paired,
                    weak_data.first(),
                    lr,
                    3,
                    epoch,
                    logger,
                )?;

                // (b) Refinement + lifter + camera on paired ∪ augmented.
                self.paired_step(state, &paired, &aug, lr, epoch, logger)?;

                // (c) 2D-only tuning of camera (+lifter +refinement).
                for wd in &weak_data {
                    self.weak_step(state, wd, lr, epoch, logger)?;
                    self.weak_batches_consumed[2] += 1;
                }
            }
            let val = self.val_mpjpe(state, true)?;
            check_finite(&[val], (3, epoch, state.step), &self.last_good)?;
            if state.best_val_mpjpe.map_or(true, |b| val < b) {
                state.best_val_mpjpe = Some(val);
                if let Some(path) = self.ckpt_path("best.ckpt") {
                    state.save_model_only(self.cfg, &path)?;
                }
            }
            logger.push(LogLine {
                stage: 3,
                epoch,
                step: state.step,
                phase: "val".into(),
                lr,
                losses: None,
                gan: None,
                val_metric: Some(val),
            })?;
            state.epoch = epoch;
            self.maybe_checkpoint_epoch(state)?;
        }
        self.write_last(state)?;
        Ok(())
    }

    /// Sub-step (b): minimize the fully annotated objective over the
    /// paired batch joined with its augmented twin.
    fn paired_step(
        &mut self,
        state: &mut TrainState,
        paired: &PairedBatchData,
        aug: &AugmentedValues,
        lr: f64,
        epoch: usize,
        logger: &mut TrainLogger,
    ) -> TrainResult<()> {
        let n = paired.input2d.nrows();
        let m = aug.flat2d.nrows();
        let stack = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("same widths")
        };
        let input2d = stack(&paired.input2d, &aug.flat2d);
        // Augmented keypoints are exact projections: full confidence.
        let aug_conf = Array2::from_elem((m, NUM_JOINTS), 1.0 / NUM_JOINTS as f64);
        let conf_norm = stack(&paired.conf_norm, &aug_conf);
        let target2d_flat = stack(&paired.clean_flat, &aug.flat2d);
        let target_u = stack(&paired.clean_u, &aug.u);
        let target_v = stack(&paired.clean_v, &aug.v);
        let gt3d = [
            stack(&paired.gt3d_comps[0], &aug.comps[0]),
            stack(&paired.gt3d_comps[1], &aug.comps[1]),
            stack(&paired.gt3d_comps[2], &aug.comps[2]),
        ];
        let mut cams = paired.cams.clone();
        cams.extend(aug.cams.iter().copied());
        let cam_cols = camera_gt_columns(&cams);

        let mut g = Graph::new();
        let refine_bound = state.refine.bind(&mut g);
        let lifter_bound = state.lifter.bind(&mut g);
        let camera_bound = state.camera.bind(&mut g);
        let input = g.leaf(input2d);
        let conf = g.leaf(conf_norm.clone());
        let refined = self
            .heads
            .refine
            .forward(&mut g, &refine_bound, input, conf)?;
        let target2d = g.leaf(target2d_flat);
        let l_ref = refinement_loss(&mut g, refined, target2d, &conf_norm)?;
        let lift = self
            .heads
            .lifter
            .forward_components(&mut g, &lifter_bound, refined)?;
        let cam = self.heads.camera.forward(&mut g, &camera_bound, refined)?;
        let l_2d = reprojection_loss(&mut g, &lift, &cam, &target_u, &target_v)?;
        let l_cam = camera_loss(&mut g, &cam, &cam_cols)?;
        let l_3d = pose3d_loss(&mut g, &lift, &gt3d)?;
        let total = paired_total_var(&mut g, &self.cfg.weights, l_ref, l_cam, l_2d, l_3d)?;

        let components = LossComponents {
            refine: Some(g.scalar_value(l_ref)),
            camera: Some(g.scalar_value(l_cam)),
            reproj2d: Some(g.scalar_value(l_2d)),
            pose3d: Some(g.scalar_value(l_3d)),
        };
        let total_value = g.scalar_value(total);
        check_finite(&[total_value], (3, epoch, state.step), &self.last_good)?;

        g.backward(total)?;
        state.adam_refine.set_lr(lr);
        state
            .adam_refine
            .step(&mut state.refine, &refine_bound.grads(&g))?;
        state.adam_lifter.set_lr(lr);
        state
            .adam_lifter
            .step(&mut state.lifter, &lifter_bound.grads(&g))?;
        state.adam_camera.set_lr(lr);
        state
            .adam_camera
            .step(&mut state.camera, &camera_bound.grads(&g))?;

        state.step += 1;
        logger.push(LogLine {
            stage: 3,
            epoch,
            step: state.step,
            phase: "paired".into(),
            lr,
            losses: Some(BatchLossReport::paired(n + m, components, &self.cfg.weights)?),
            gan: None,
            val_metric: None,
        })?;
        Ok(())
    }

    /// Sub-step (c): the 2D-only objective. No camera or 3D term exists
    /// in this graph, so 2D-only data cannot move those losses.
    fn weak_step(
        &mut self,
        state: &mut TrainState,
        weak: &WeakBatchData,
        lr: f64,
        epoch: usize,
        logger: &mut TrainLogger,
    ) -> TrainResult<()> {
        let mut g = Graph::new();
        let refine_bound = state.refine.bind(&mut g);
        let lifter_bound = state.lifter.bind(&mut g);
        let camera_bound = state.camera.bind(&mut g);
        let input = g.leaf(weak.input2d.clone());
        let conf = g.leaf(weak.conf_norm.clone());
        let refined = self
            .heads
            .refine
            .forward(&mut g, &refine_bound, input, conf)?;
        let target = g.leaf(weak.target_flat.clone());
        let l_ref = refinement_loss(&mut g, refined, target, &weak.conf_norm)?;
        let lift = self
            .heads
            .lifter
            .forward_components(&mut g, &lifter_bound, refined)?;
        let cam = self.heads.camera.forward(&mut g, &camera_bound, refined)?;
        let l_2d = reprojection_loss(&mut g, &lift, &cam, &weak.target_u, &weak.target_v)?;
        let total = weak_total_var(&mut g, &self.cfg.weights, l_ref, l_2d)?;

        let components = LossComponents {
            refine: Some(g.scalar_value(l_ref)),
            camera: None,
            reproj2d: Some(g.scalar_value(l_2d)),
            pose3d: None,
        };
        let total_value = g.scalar_value(total);
        check_finite(&[total_value], (3, epoch, state.step), &self.last_good)?;

        g.backward(total)?;
        state.adam_refine.set_lr(lr);
        state
            .adam_refine
            .step(&mut state.refine, &refine_bound.grads(&g))?;
        state.adam_lifter.set_lr(lr);
        state
            .adam_lifter
            .step(&mut state.lifter, &lifter_bound.grads(&g))?;
        state.adam_camera.set_lr(lr);
        state
            .adam_camera
            .step(&mut state.camera, &camera_bound.grads(&g))?;

        state.step += 1;
        logger.push(LogLine {
            stage: 3,
            epoch,
            step: state.step,
            phase: "weak".into(),
            lr,
            losses: Some(BatchLossReport::weak(
                weak.input2d.nrows(),
                components,
                &self.cfg.weights,
            )?),
            gan: None,
            val_metric: None,
        })?;
        Ok(())
    }
}

/// Head parameters loaded from any checkpoint (full or model-only).
pub struct ModelParams {
    pub refine: ParamSet,
    pub lifter: ParamSet,
    pub camera: ParamSet,
    pub generator: ParamSet,
    pub disc2d: ParamSet,
    pub disc3d: ParamSet,
}

/// Read the config echo and the six head parameter sets from a
/// checkpoint, ignoring optimizer and RNG sections if present.
pub fn load_model_params(path: &Path) -> TrainResult<(TrainConfig, ModelParams)> {
    let file = checkpoint::read_checkpoint(path)?;
    let cfg: TrainConfig = serde_json::from_str(&file.config_json)
        .map_err(|e| TrainError::Checkpoint(format!("bad config echo: {e}")))?;
    let params = ModelParams {
        refine: file.param_set("params.refine")?,
        lifter: file.param_set("params.lifter")?,
        camera: file.param_set("params.camera")?,
        generator: file.param_set("params.generator")?,
        disc2d: file.param_set("params.disc2d")?,
        disc3d: file.param_set("params.disc3d")?,
    };
    Ok((cfg, params))
}

/// Values extracted from the in-graph augmentation for reuse as
/// constants in the paired sub-step.
pub struct AugmentedValues {
    pub flat2d: Array2<f64>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub comps: [Array2<f64>; 3],
    pub cams: Vec<(crate::geometry::CameraIntrinsics, crate::geometry::Offset3D)>,
}
