//! Dataset file format, paired/weak containers, deterministic batching
//! and the synthetic data generator.
//!
//! Records are line-delimited JSON, one sample per line, UTF-8. Paired
//! records carry root-relative 3D joints and a camera; 2D-only records
//! carry neither. Unknown fields round-trip untouched.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_bone_angle, AugmentedPair};
use crate::geometry::{project, rotation_from_axis_angle, CameraIntrinsics, Offset3D};
use crate::losses::DatasetKind;
use crate::skeleton::{
    denormalize_2d, normalize_2d, KinematicTree, Pose2D, Pose3D, NUM_BONES, NUM_JOINTS,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("record '{id}' violates invariants: {message}")]
    InvariantViolation { id: String, message: String },
    #[error("invalid configuration: {0}")]
    ConfigError(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Serialized camera parameters of a paired record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub f_x: f64,
    pub f_y: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub t_z: f64,
}

/// One dataset sample. 2D keypoints are stored in pixels together with
/// the image size; 3D joints are root-relative millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub joints2d_px: Vec<[f64; 2]>,
    pub conf: Vec<f64>,
    pub image_wh: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints3d_mm: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraRecord>,
    pub source_tag: String,
    /// Unknown fields are preserved across read/write.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SampleRecord {
    pub fn is_paired(&self) -> bool {
        self.joints3d_mm.is_some() && self.camera.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| {
            Err(DataError::InvariantViolation {
                id: self.id.clone(),
                message,
            })
        };
        if self.joints2d_px.len() != NUM_JOINTS {
            return fail(format!(
                "expected {NUM_JOINTS} 2D joints, got {}",
                self.joints2d_px.len()
            ));
        }
        if self.conf.len() != NUM_JOINTS {
            return fail(format!(
                "expected {NUM_JOINTS} confidences, got {}",
                self.conf.len()
            ));
        }
        if self.conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("confidences must lie in [0, 1]".into());
        }
        if !(self.image_wh.0 > 0.0 && self.image_wh.1 > 0.0) {
            return fail(format!("image_wh must be positive, got {:?}", self.image_wh));
        }
        match (&self.joints3d_mm, &self.camera) {
            (Some(j), Some(_)) => {
                if j.len() != NUM_JOINTS {
                    return fail(format!("expected {NUM_JOINTS} 3D joints, got {}", j.len()));
                }
            }
            (None, None) => {}
            (Some(_), None) => return fail("paired record is missing its camera".into()),
            (None, Some(_)) => return fail("paired record is missing its 3D joints".into()),
        }
        Ok(())
    }

    /// 2D keypoints in normalized (-1, 1) coordinates.
    pub fn pose2d_normalized(&self) -> Pose2D {
        let mut px = Array2::zeros((NUM_JOINTS, 2));
        for (j, p) in self.joints2d_px.iter().enumerate() {
            px[[j, 0]] = p[0];
            px[[j, 1]] = p[1];
        }
        normalize_2d(px.view(), self.image_wh.0, self.image_wh.1)
            .expect("validated image dimensions")
    }

    pub fn pose3d(&self) -> Option<Pose3D> {
        self.joints3d_mm.as_ref().map(|joints| {
            let mut c = Array2::zeros((NUM_JOINTS, 3));
            for (j, p) in joints.iter().enumerate() {
                for k in 0..3 {
                    c[[j, k]] = p[k];
                }
            }
            Pose3D::new(c).expect("validated 3D joints")
        })
    }

    pub fn camera_params(&self) -> Option<(CameraIntrinsics, Offset3D)> {
        self.camera.map(|c| {
            (
                CameraIntrinsics::new(c.f_x, c.f_y, c.c_x, c.c_y).expect("validated camera"),
                Offset3D::new(c.t_x, c.t_y, c.t_z),
            )
        })
    }
}

/// Read a line-delimited dataset file ([`SampleRecord`] per line).
pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| DataError::ParseError {
                line: i + 1,
                message: e.to_string(),
            })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as line-delimited JSON. Round-tripping through
/// [`read_dataset`] is value-identical.
pub fn write_dataset(records: &[SampleRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Convert an augmented pair into the standard record format. The
/// augmented 2D pose is exact, so confidences are all one.
pub fn record_from_augmented(pair: &AugmentedPair, image_wh: (f64, f64)) -> SampleRecord {
    let px = denormalize_2d(&pair.pose2d, image_wh.0, image_wh.1).expect("positive image size");
    let joints2d_px = (0..NUM_JOINTS).map(|j| [px[[j, 0]], px[[j, 1]]]).collect();
    let joints3d_mm = (0..NUM_JOINTS)
        .map(|j| {
            let c = pair.pose3d.coords();
            [c[[j, 0]], c[[j, 1]], c[[j, 2]]]
        })
        .collect();
    SampleRecord {
        id: format!(
            "aug-{}-{}",
            pair.provenance.source_id, pair.provenance.noise_seed
        ),
        joints2d_px,
        conf: vec![1.0; NUM_JOINTS],
        image_wh,
        joints3d_mm: Some(joints3d_mm),
        camera: Some(CameraRecord {
            f_x: pair.intrinsics.f_x,
            f_y: pair.intrinsics.f_y,
            c_x: pair.intrinsics.c_x,
            c_y: pair.intrinsics.c_y,
            t_x: pair.offset.t_x,
            t_y: pair.offset.t_y,
            t_z: pair.offset.t_z,
        }),
        source_tag: "augmented".into(),
        extra: serde_json::Map::new(),
    }
}

// ---------------------------------------------------------------------
// Synthetic data generation
// ---------------------------------------------------------------------

/// Value ranges for synthetic cameras (normalized-coordinate convention
/// for intrinsics, millimeters for offsets).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRanges {
    pub focal: (f64, f64),
    pub center: (f64, f64),
    pub t_xy: (f64, f64),
    pub t_z: (f64, f64),
}

impl Default for CameraRanges {
    fn default() -> Self {
        CameraRanges {
            focal: (0.9, 1.8),
            center: (-0.1, 0.1),
            t_xy: (-300.0, 300.0),
            t_z: (2500.0, 6500.0),
        }
    }
}

/// Configuration of the synthetic generator. Pose diversity is driven by
/// per-bone axis-angle perturbations of a randomized skeleton template;
/// 2D-only records may draw from a wider angle band than paired ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_paired: usize,
    pub n_weak: usize,
    pub seed: u64,
    /// Per-bone template length ranges (mm); left/right pairs are
    /// sampled symmetrically per subject.
    pub bone_length_ranges: Vec<(f64, f64)>,
    /// Paired pose-angle band (radians, per bone).
    pub paired_angle: (f64, f64),
    /// 2D-only pose-angle band; defaults beyond the paired band so the
    /// weak set covers otherwise unseen poses.
    pub weak_angle: (f64, f64),
    pub camera: CameraRanges,
    pub image_wh: (f64, f64),
    /// 2D noise standard deviation in normalized units.
    pub noise_sigma: f64,
    /// Lower clamp of the simulated confidences.
    pub conf_floor: f64,
    /// Scale inside the confidence model `1 - |n|/(3 sigma scale)`.
    pub conf_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_paired: 512,
            n_weak: 256,
            seed: 0,
            bone_length_ranges: default_bone_length_ranges(),
            paired_angle: (0.0, 0.35),
            weak_angle: (0.5, 1.0),
            camera: CameraRanges::default(),
            image_wh: (1000.0, 1000.0),
            noise_sigma: 0.01,
            conf_floor: 0.05,
            conf_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bone_length_ranges.len() != NUM_BONES {
            return Err(DataError::ConfigError(format!(
                "expected {NUM_BONES} bone length ranges, got {}",
                self.bone_length_ranges.len()
            )));
        }
        for (i, (lo, hi)) in self.bone_length_ranges.iter().enumerate() {
            if !(0.0 < *lo && lo <= hi) {
                return Err(DataError::ConfigError(format!(
                    "bone {i} length range ({lo}, {hi}) is empty or non-positive"
                )));
            }
        }
        for (name, (lo, hi)) in [
            ("paired_angle", self.paired_angle),
            ("weak_angle", self.weak_angle),
        ] {
            if !(0.0 <= lo && lo <= hi) {
                return Err(DataError::ConfigError(format!(
                    "{name} band ({lo}, {hi}) is invalid"
                )));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::ConfigError("noise_sigma must be >= 0".into()));
        }
        if !(self.image_wh.0 > 0.0 && self.image_wh.1 > 0.0) {
            return Err(DataError::ConfigError("image_wh must be positive".into()));
        }
        if self.camera.t_z.0 <= 1500.0 {
            return Err(DataError::ConfigError(
                "camera t_z range must stay above 1500 mm to keep poses in front of the camera"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Template length ranges (mm) by bone index; left/right entries repeat.
pub fn default_bone_length_ranges() -> Vec<(f64, f64)> {
    vec![
        (90.0, 130.0),  // Pelvis -> RHip
        (380.0, 460.0), // RHip -> RKnee
        (360.0, 440.0), // RKnee -> RAnkle
        (90.0, 130.0),  // Pelvis -> LHip
        (380.0, 460.0), // LHip -> LKnee
        (360.0, 440.0), // LKnee -> LAnkle
        (200.0, 260.0), // Pelvis -> Spine
        (200.0, 260.0), // Spine -> Neck
        (150.0, 210.0), // Neck -> Head
        (140.0, 180.0), // Neck -> LShoulder
        (250.0, 310.0), // LShoulder -> LElbow
        (230.0, 280.0), // LElbow -> LWrist
        (140.0, 180.0), // Neck -> RShoulder
        (250.0, 310.0), // RShoulder -> RElbow
        (230.0, 280.0), // RElbow -> RWrist
    ]
}

/// Left/right bone pairs sampled with identical lengths per subject.
const SYMMETRIC_BONES: [(usize, usize); 6] = [(0, 3), (1, 4), (2, 5), (9, 12), (10, 13), (11, 14)];

/// Rest-pose unit directions per bone (standing, arms down, -y up).
fn rest_directions() -> [[f64; 3]; NUM_BONES] {
    [
        [-1.0, 0.0, 0.0], // Pelvis -> RHip
        [0.0, 1.0, 0.0],  // RHip -> RKnee
        [0.0, 1.0, 0.0],  // RKnee -> RAnkle
        [1.0, 0.0, 0.0],  // Pelvis -> LHip
        [0.0, 1.0, 0.0],  // LHip -> LKnee
        [0.0, 1.0, 0.0],  // LKnee -> LAnkle
        [0.0, -1.0, 0.0], // Pelvis -> Spine
        [0.0, -1.0, 0.0], // Spine -> Neck
        [0.0, -1.0, 0.0], // Neck -> Head
        [1.0, 0.0, 0.0],  // Neck -> LShoulder
        [0.0, 1.0, 0.0],  // LShoulder -> LElbow
        [0.0, 1.0, 0.0],  // LElbow -> LWrist
        [-1.0, 0.0, 0.0], // Neck -> RShoulder
        [0.0, 1.0, 0.0],  // RShoulder -> RElbow
        [0.0, 1.0, 0.0],  // RElbow -> RWrist
    ]
}

fn rest_pose(lengths: &[f64; NUM_BONES], tree: &KinematicTree) -> Pose3D {
    let dirs = rest_directions();
    let mut coords = Array2::zeros((NUM_JOINTS, 3));
    for k in 0..NUM_BONES {
        let (parent, child) = tree.bone(k);
        for c in 0..3 {
            coords[[child.code(), c]] = coords[[parent.code(), c]] + dirs[k][c] * lengths[k];
        }
    }
    Pose3D::new(coords).expect("rest pose is finite")
}

fn sample_template(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> [f64; NUM_BONES] {
    let mut lengths = [0.0; NUM_BONES];
    for (k, slot) in lengths.iter_mut().enumerate() {
        let (lo, hi) = cfg.bone_length_ranges[k];
        *slot = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    }
    for (l, r) in SYMMETRIC_BONES {
        lengths[r] = lengths[l];
    }
    lengths
}

fn sample_unit_axis(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// A random pose: per-bone axis-angle perturbation of the rest pose
/// within the given angle band, plus a full random yaw.
fn sample_pose(
    cfg: &SynthConfig,
    angle_band: (f64, f64),
    rng: &mut ChaCha8Rng,
    tree: &KinematicTree,
) -> Pose3D {
    let lengths = sample_template(cfg, rng);
    let rest = rest_pose(&lengths, tree);
    let mut gamma = Array2::zeros((NUM_BONES, 3));
    for k in 0..NUM_BONES {
        let axis = sample_unit_axis(rng);
        let (lo, hi) = angle_band;
        let magnitude = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        for c in 0..3 {
            gamma[[k, c]] = axis[c] * magnitude;
        }
    }
    let posed = apply_bone_angle(&rest, &gamma, tree).expect("template bones are non-degenerate");
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    let rot = rotation_from_axis_angle(&[0.0, yaw, 0.0]);
    Pose3D::new(posed.coords().dot(&rot.t())).expect("finite rotation")
}

fn sample_camera(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (CameraIntrinsics, Offset3D) {
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    };
    let k = CameraIntrinsics::new(
        draw(rng, cfg.camera.focal),
        draw(rng, cfg.camera.focal),
        draw(rng, cfg.camera.center),
        draw(rng, cfg.camera.center),
    )
    .expect("positive focal range");
    let t = Offset3D::new(
        draw(rng, cfg.camera.t_xy),
        draw(rng, cfg.camera.t_xy),
        draw(rng, cfg.camera.t_z),
    );
    (k, t)
}

/// Simulated per-joint confidence tied to the injected noise magnitude.
fn confidence_for_noise(noise: [f64; 2], sigma: f64, floor: f64, scale: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    let n = (noise[0] * noise[0] + noise[1] * noise[1]).sqrt();
    (1.0 - n / (3.0 * sigma * scale)).clamp(floor, 1.0)
}

fn make_record(
    cfg: &SynthConfig,
    id: String,
    source_tag: &str,
    angle_band: (f64, f64),
    keep_labels: bool,
    rng: &mut ChaCha8Rng,
    tree: &KinematicTree,
) -> SampleRecord {
    // Resample camera and pose if a joint lands behind the camera (rare
    // with the default depth range).
    let (pose, intrinsics, offset, projected) = loop {
        let pose = sample_pose(cfg, angle_band, rng, tree);
        let (k, t) = sample_camera(cfg, rng);
        match project(&pose, &k, &t) {
            Ok(p) => break (pose, k, t, p),
            Err(_) => continue,
        }
    };
    let mut conf = vec![1.0; NUM_JOINTS];
    let mut noisy = projected.coords().clone();
    if cfg.noise_sigma > 0.0 {
        for j in 0..NUM_JOINTS {
            let n = [
                cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal),
                cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal),
            ];
            noisy[[j, 0]] += n[0];
            noisy[[j, 1]] += n[1];
            conf[j] = confidence_for_noise(n, cfg.noise_sigma, cfg.conf_floor, cfg.conf_scale);
        }
    }
    let noisy_pose = Pose2D::new(noisy).expect("finite noisy pose");
    let px = denormalize_2d(&noisy_pose, cfg.image_wh.0, cfg.image_wh.1).expect("positive size");
    let joints2d_px = (0..NUM_JOINTS).map(|j| [px[[j, 0]], px[[j, 1]]]).collect();

    let (joints3d_mm, camera) = if keep_labels {
        let joints = (0..NUM_JOINTS)
            .map(|j| {
                let c = pose.coords();
                [c[[j, 0]], c[[j, 1]], c[[j, 2]]]
            })
            .collect();
        (
            Some(joints),
            Some(CameraRecord {
                f_x: intrinsics.f_x,
                f_y: intrinsics.f_y,
                c_x: intrinsics.c_x,
                c_y: intrinsics.c_y,
                t_x: offset.t_x,
                t_y: offset.t_y,
                t_z: offset.t_z,
            }),
        )
    } else {
        (None, None)
    };

    SampleRecord {
        id,
        joints2d_px,
        conf,
        image_wh: cfg.image_wh,
        joints3d_mm,
        camera,
        source_tag: source_tag.into(),
        extra: serde_json::Map::new(),
    }
}

/// Generate paired and 2D-only record sets. Weak records pass a
/// completeness filter trivially (all 16 joints are synthesized) and
/// keep only 2D observations.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    cfg.validate()?;
    let tree = KinematicTree::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let paired = (0..cfg.n_paired)
        .map(|i| {
            make_record(
                cfg,
                format!("paired-{i:06}"),
                "synthetic-paired",
                cfg.paired_angle,
                true,
                &mut rng,
                &tree,
            )
        })
        .collect();
    let weak = (0..cfg.n_weak)
        .map(|i| {
            make_record(
                cfg,
                format!("weak-{i:06}"),
                "synthetic-weak",
                cfg.weak_angle,
                false,
                &mut rng,
                &tree,
            )
        })
        .collect();
    Ok((paired, weak))
}

/// Deterministic train/validation split by shuffled indices.
pub fn split_dataset(
    records: &[SampleRecord],
    val_fraction: f64,
    seed: u64,
) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((records.len() as f64) * val_fraction).round() as usize;
    let (val_idx, train_idx) = idx.split_at(n_val.min(records.len()));
    let pick = |ids: &[usize]| {
        let mut sorted: Vec<usize> = ids.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|i| records[*i].clone()).collect()
    };
    (pick(train_idx), pick(val_idx))
}

// ---------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------

/// One batch of dataset indices, homogeneous in kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub kind: DatasetKind,
    pub indices: Vec<usize>,
}

/// How the batch stream interleaves the two datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSchedule {
    PairedOnly,
    WeakOnly,
    /// `paired : weak` pattern, repeated; e.g. 3:1 emits P P P W ...
    /// The counts are exact, not stochastic.
    Mixed { paired: usize, weak: usize },
}

/// Deterministic per-epoch batch stream: a seeded shuffle of each
/// dataset chunked into batches, interleaved per the schedule. Every
/// batch is homogeneous in kind.
pub fn make_batches(
    n_paired: usize,
    n_weak: usize,
    batch_size: usize,
    schedule: BatchSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DataError::ConfigError("batch_size must be positive".into()));
    }
    let shuffled_chunks = |n: usize, kind: DatasetKind, rng: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size)
            .map(|c| Batch {
                kind,
                indices: c.to_vec(),
            })
            .collect::<Vec<_>>()
    };
    match schedule {
        BatchSchedule::PairedOnly => {
            if n_paired == 0 {
                return Err(DataError::EmptyDataset);
            }
            Ok(shuffled_chunks(n_paired, DatasetKind::Paired, rng))
        }
        BatchSchedule::WeakOnly => {
            if n_weak == 0 {
                return Err(DataError::EmptyDataset);
            }
            Ok(shuffled_chunks(n_weak, DatasetKind::Weak, rng))
        }
        BatchSchedule::Mixed { paired, weak } => {
            if n_paired == 0 || (weak > 0 && n_weak == 0) {
                return Err(DataError::EmptyDataset);
            }
            let mut p = shuffled_chunks(n_paired, DatasetKind::Paired, rng).into_iter();
            let mut w = shuffled_chunks(n_weak, DatasetKind::Weak, rng).into_iter();
            let mut out = Vec::new();
            loop {
                let mut emitted = false;
                for _ in 0..paired {
                    if let Some(b) = p.next() {
                        out.push(b);
                        emitted = true;
                    }
                }
                for _ in 0..weak {
                    if let Some(b) = w.next() {
                        out.push(b);
                        emitted = true;
                    }
                }
                if !emitted {
                    break;
                }
            }
            Ok(out)
        }
    }
}
