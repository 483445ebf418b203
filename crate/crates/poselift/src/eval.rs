//! MPJPE / PA-MPJPE metrics and the evaluation harness.
//!
//! The pelvis is excluded from the joint mean: it sits at the origin of
//! every root-relative pose and would only dilute the metric.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::ParamSet;
use crate::data::SampleRecord;
use crate::geometry::{procrustes_align, GeometryError};
use crate::losses::normalize_confidence_batch;
use crate::nets::{flatten_pose2d_batch, unflatten_pose3d, Lifter, RefineNet};
use crate::skeleton::{Pose3D, NUM_JOINTS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] crate::autograd::AutogradError),
    #[error("evaluation requires paired data: record '{0}' has no 3D ground truth")]
    MissingGroundTruth(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mean per-joint position error in millimeters, pelvis excluded.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> f64 {
    let p = pred.coords();
    let g = gt.coords();
    let mut sum = 0.0;
    for j in 1..NUM_JOINTS {
        let d: f64 = (0..3).map(|c| (p[[j, c]] - g[[j, c]]).powi(2)).sum();
        sum += d.sqrt();
    }
    sum / (NUM_JOINTS - 1) as f64
}

/// Per-joint errors (mm) for joints 1..16 (pelvis excluded).
pub fn per_joint_errors(pred: &Pose3D, gt: &Pose3D) -> Vec<f64> {
    let p = pred.coords();
    let g = gt.coords();
    (1..NUM_JOINTS)
        .map(|j| {
            (0..3)
                .map(|c| (p[[j, c]] - g[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// MPJPE after Procrustes alignment of the prediction onto the ground
/// truth.
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let (aligned, _) = procrustes_align(pred, gt)?;
    Ok(mpjpe(&aligned, gt))
}

/// What 2D input the evaluation feeds the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// The record's stored 2D keypoints as-is.
    Clean,
    /// The record's keypoints plus fresh Gaussian corruption with
    /// matching simulated confidences.
    Corrupted { sigma: f64, seed: u64 },
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub checkpoint_id: String,
    pub use_refine: bool,
    pub input_source: InputSource,
    pub n_samples: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    /// Mean error (mm) per joint, joints 1..16 in code order.
    pub per_joint_mm: Vec<f64>,
    pub per_sample_mpjpe_mm: Vec<f64>,
    pub per_sample_pa_mpjpe_mm: Vec<f64>,
}

/// Run the 2D pipeline (optional refinement, then lifting) over a paired
/// dataset and compute both metrics. Deterministic for a fixed input
/// source.
pub fn evaluate(
    refine: &RefineNet,
    refine_params: &ParamSet,
    lifter: &Lifter,
    lifter_params: &ParamSet,
    records: &[SampleRecord],
    use_refine: bool,
    input_source: InputSource,
    dataset_tag: &str,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let poses2d: Vec<_> = records.iter().map(|r| r.pose2d_normalized()).collect();
    let mut coords = flatten_pose2d_batch(&poses2d);
    let mut conf_raw = Array2::zeros((records.len(), NUM_JOINTS));
    for (i, r) in records.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            conf_raw[[i, j]] = r.conf[j];
        }
    }

    if let InputSource::Corrupted { sigma, seed } = input_source {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..coords.nrows() {
            for j in 0..NUM_JOINTS {
                let n = [
                    sigma * rng.sample::<f64, _>(StandardNormal),
                    sigma * rng.sample::<f64, _>(StandardNormal),
                ];
                coords[[i, 2 * j]] += n[0];
                coords[[i, 2 * j + 1]] += n[1];
                let mag = (n[0] * n[0] + n[1] * n[1]).sqrt();
                conf_raw[[i, j]] = if sigma > 0.0 {
                    (1.0 - mag / (3.0 * sigma)).clamp(0.05, 1.0)
                } else {
                    1.0
                };
            }
        }
    }

    let (conf_norm, _) = normalize_confidence_batch(&conf_raw);
    let lifted_input = if use_refine {
        refine.apply(refine_params, &coords, &conf_norm)?
    } else {
        coords
    };
    let pred_flat = lifter.apply(lifter_params, &lifted_input)?;

    let mut per_sample_mpjpe = Vec::with_capacity(records.len());
    let mut per_sample_pa = Vec::with_capacity(records.len());
    let mut per_joint_sums = vec![0.0; NUM_JOINTS - 1];
    for (i, r) in records.iter().enumerate() {
        let gt = r
            .pose3d()
            .ok_or_else(|| EvalError::MissingGroundTruth(r.id.clone()))?;
        let pred = unflatten_pose3d(&pred_flat, i);
        per_sample_mpjpe.push(mpjpe(&pred, &gt));
        per_sample_pa.push(pa_mpjpe(&pred, &gt)?);
        for (j, e) in per_joint_errors(&pred, &gt).into_iter().enumerate() {
            per_joint_sums[j] += e;
        }
    }

    let n = records.len() as f64;
    let report = EvalReport {
        dataset_tag: dataset_tag.to_string(),
        checkpoint_id: checkpoint_id.to_string(),
        use_refine,
        input_source,
        n_samples: records.len(),
        mpjpe_mm: per_sample_mpjpe.iter().sum::<f64>() / n,
        pa_mpjpe_mm: per_sample_pa.iter().sum::<f64>() / n,
        per_joint_mm: per_joint_sums.iter().map(|s| s / n).collect(),
        per_sample_mpjpe_mm: per_sample_mpjpe,
        per_sample_pa_mpjpe_mm: per_sample_pa,
    };
    Ok(report)
}

impl EvalReport {
    /// A short human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "dataset       : {} ({} samples)\n",
            self.dataset_tag, self.n_samples
        ));
        out.push_str(&format!("checkpoint    : {}\n", self.checkpoint_id));
        out.push_str(&format!(
            "refinement    : {}\n",
            if self.use_refine { "on" } else { "off" }
        ));
        out.push_str(&format!("MPJPE (mm)    : {:.3}\n", self.mpjpe_mm));
        out.push_str(&format!("PA-MPJPE (mm) : {:.3}\n", self.pa_mpjpe_mm));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_from_axis_angle;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn random_pose(r: &mut ChaCha8Rng) -> Pose3D {
        let mut c = Array2::zeros((NUM_JOINTS, 3));
        for v in c.iter_mut() {
            *v = r.gen_range(-400.0..400.0);
        }
        Pose3D::new(c).unwrap()
    }

    #[test]
    fn mpjpe_zero_and_uniform_offset() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pose(&mut r);
        assert_eq!(mpjpe(&gt, &gt), 0.0);
        // (3, 0, 4) on every joint: each distance is exactly 5 mm.
        let mut off = gt.coords().clone();
        for mut row in off.rows_mut() {
            row[0] += 3.0;
            row[2] += 4.0;
        }
        let pred = Pose3D::new(off).unwrap();
        assert_abs_diff_eq!(mpjpe(&pred, &gt), 5.0, epsilon = 1e-12);
        // Symmetry.
        assert_abs_diff_eq!(mpjpe(&pred, &gt), mpjpe(&gt, &pred), epsilon = 1e-12);
    }

    #[test]
    fn mpjpe_invariant_under_shared_rigid_motion() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let gt = random_pose(&mut r);
        let pred = random_pose(&mut r);
        let base = mpjpe(&pred, &gt);
        let rot = rotation_from_axis_angle(&[0.3, -0.5, 0.8]);
        let move_pose = |p: &Pose3D| {
            let mut c = p.coords().dot(&rot.t());
            for mut row in c.rows_mut() {
                row[0] += 100.0;
                row[1] -= 40.0;
            }
            Pose3D::new(c).unwrap()
        };
        let moved = mpjpe(&move_pose(&pred), &move_pose(&gt));
        assert_abs_diff_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn pa_mpjpe_removes_similarity_transforms() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pose(&mut r);
        let rot = rotation_from_axis_angle(&[1.0, 0.2, -0.4]);
        let mut c = gt.coords().dot(&rot.t()) * 1.7;
        for mut row in c.rows_mut() {
            row[1] += 250.0;
        }
        let pred = Pose3D::new(c).unwrap();
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-6);
    }

    #[test]
    fn pa_mpjpe_never_exceeds_mpjpe() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let gt = random_pose(&mut r);
            let pred = random_pose(&mut r);
            let raw = mpjpe(&pred, &gt);
            let pa = pa_mpjpe(&pred, &gt).unwrap();
            assert!(pa <= raw + 1e-9, "pa {pa} > raw {raw}");
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_internally_consistent() {
        let cfg = crate::data::SynthConfig {
            n_paired: 12,
            n_weak: 0,
            seed: 5,
            ..Default::default()
        };
        let (records, _) = crate::data::generate_synthetic(&cfg).unwrap();
        let refine = RefineNet::default();
        let lifter = Lifter::default();
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let rp = refine.init(&mut r);
        let mut lp = lifter.init(&mut r);
        // The lifter exit starts zeroed (origin pose); Procrustes needs a
        // non-degenerate prediction, so emulate a trained head.
        for v in lp.get_mut("exit.w").unwrap().iter_mut() {
            *v = r.gen_range(-0.05..0.05);
        }
        let run = || {
            evaluate(
                &refine,
                &rp,
                &lifter,
                &lp,
                &records,
                true,
                InputSource::Corrupted {
                    sigma: 0.02,
                    seed: 9,
                },
                "synthetic",
                "test-ckpt",
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // Means recompute exactly from per-sample values.
        let mean: f64 =
            a.per_sample_mpjpe_mm.iter().sum::<f64>() / a.per_sample_mpjpe_mm.len() as f64;
        assert_abs_diff_eq!(a.mpjpe_mm, mean, epsilon = 1e-12);
        // Per-joint breakdown averages back to the reported mean.
        let joint_mean: f64 = a.per_joint_mm.iter().sum::<f64>() / a.per_joint_mm.len() as f64;
        assert_abs_diff_eq!(a.mpjpe_mm, joint_mean, epsilon = 1e-9);
        // PA <= raw for every sample.
        for (pa, raw) in a
            .per_sample_pa_mpjpe_mm
            .iter()
            .zip(a.per_sample_mpjpe_mm.iter())
        {
            assert!(pa <= raw);
        }
    }

    #[test]
    fn evaluate_requires_ground_truth() {
        let cfg = crate::data::SynthConfig {
            n_paired: 2,
            n_weak: 2,
            seed: 7,
            ..Default::default()
        };
        let (_, weak) = crate::data::generate_synthetic(&cfg).unwrap();
        let refine = RefineNet::default();
        let lifter = Lifter::default();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let rp = refine.init(&mut r);
        let lp = lifter.init(&mut r);
        let err = evaluate(
            &refine,
            &rp,
            &lifter,
            &lp,
            &weak,
            false,
            InputSource::Clean,
            "weak",
            "ckpt",
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::MissingGroundTruth(_)));
    }
}
