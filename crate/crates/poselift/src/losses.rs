//! Training objectives: confidence normalization and the refinement,
//! reprojection, camera, 3D and LS-GAN losses, plus their weighted
//! combinations for paired and 2D-only batches.
//!
//! The differentiable forms build onto a [`Graph`]; scalar helpers with
//! the same formulas back the per-step [`BatchLossReport`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, Var};
use crate::geometry::{CameraIntrinsics, Offset3D, EPS_DEPTH_MM};
use crate::nets::CameraVars;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Graph(#[from] AutogradError),
    #[error("sample {sample} has a joint behind the camera (depth {depth} mm)")]
    BehindCamera { sample: usize, depth: f64 },
    #[error("camera ground truth required for the camera loss is missing")]
    MissingCameraGroundTruth,
    #[error("{component} loss supplied for a {kind} batch")]
    ComponentKindMismatch {
        kind: &'static str,
        component: &'static str,
    },
    #[error("empty {pool} pose pool")]
    EmptyPool { pool: &'static str },
    #[error("loss weights must be non-negative, got {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Loss weighting, defaults matching the training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cam: f64,
    pub lambda_2d_paired: f64,
    pub lambda_2d_weak: f64,
    pub lambda_3d: f64,
    pub lambda_ref_paired: f64,
    pub lambda_ref_weak: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cam: 0.01,
            lambda_2d_paired: 0.5,
            lambda_2d_weak: 0.2,
            lambda_3d: 1.0,
            lambda_ref_paired: 1.0,
            lambda_ref_weak: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lambda_cam", self.lambda_cam),
            ("lambda_2d_paired", self.lambda_2d_paired),
            ("lambda_2d_weak", self.lambda_2d_weak),
            ("lambda_3d", self.lambda_3d),
            ("lambda_ref_paired", self.lambda_ref_paired),
            ("lambda_ref_weak", self.lambda_ref_weak),
        ];
        for (name, value) in checks {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Which dataset a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Paired,
    Weak,
    Augmented,
}

/// Per-step loss summary, one line of the training log. Components that
/// do not apply to the batch kind are `None`, never zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub kind: DatasetKind,
    pub batch_size: usize,
    pub refine: Option<f64>,
    pub camera: Option<f64>,
    pub reproj2d: Option<f64>,
    pub pose3d: Option<f64>,
    pub total: f64,
}

/// Scalar loss components prior to weighting.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub refine: Option<f64>,
    pub camera: Option<f64>,
    pub reproj2d: Option<f64>,
    pub pose3d: Option<f64>,
}

/// Weighted total for a fully annotated batch:
/// `λ_ref L_ref + λ_cam L_cam + λ_2D,φ L_2D + λ_3D L_3D`.
pub fn paired_total(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let refine = c.refine.ok_or(LossError::ComponentKindMismatch {
        kind: "paired",
        component: "missing refinement",
    })?;
    let camera = c.camera.ok_or(LossError::ComponentKindMismatch {
        kind: "paired",
        component: "missing camera",
    })?;
    let reproj = c.reproj2d.ok_or(LossError::ComponentKindMismatch {
        kind: "paired",
        component: "missing reprojection",
    })?;
    let pose3d = c.pose3d.ok_or(LossError::ComponentKindMismatch {
        kind: "paired",
        component: "missing 3D",
    })?;
    Ok(w.lambda_ref_paired * refine
        + w.lambda_cam * camera
        + w.lambda_2d_paired * reproj
        + w.lambda_3d * pose3d)
}

/// Weighted total for a 2D-only batch: `λ_ref L_ref + λ_2D,φ' L_2D`.
/// Camera and 3D terms must not be supplied.
pub fn weak_total(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if c.camera.is_some() {
        return Err(LossError::ComponentKindMismatch {
            kind: "weak",
            component: "camera",
        });
    }
    if c.pose3d.is_some() {
        return Err(LossError::ComponentKindMismatch {
            kind: "weak",
            component: "3D",
        });
    }
    let refine = c.refine.ok_or(LossError::ComponentKindMismatch {
        kind: "weak",
        component: "missing refinement",
    })?;
    let reproj = c.reproj2d.ok_or(LossError::ComponentKindMismatch {
        kind: "weak",
        component: "missing reprojection",
    })?;
    Ok(w.lambda_ref_weak * refine + w.lambda_2d_weak * reproj)
}

impl BatchLossReport {
    pub fn paired(batch_size: usize, c: LossComponents, w: &LossWeights) -> Result<Self> {
        Ok(BatchLossReport {
            kind: DatasetKind::Paired,
            batch_size,
            refine: c.refine,
            camera: c.camera,
            reproj2d: c.reproj2d,
            pose3d: c.pose3d,
            total: paired_total(&c, w)?,
        })
    }

    pub fn weak(batch_size: usize, c: LossComponents, w: &LossWeights) -> Result<Self> {
        Ok(BatchLossReport {
            kind: DatasetKind::Weak,
            batch_size,
            refine: c.refine,
            camera: None,
            reproj2d: c.reproj2d,
            pose3d: None,
            total: weak_total(&c, w)?,
        })
    }
}

// ---------------------------------------------------------------------
// Confidence normalization
// ---------------------------------------------------------------------

/// Per-sample L1 normalization of raw confidence scores; the output sums
/// to one. All-zero input falls back to uniform weights and sets the
/// returned flag.
pub fn normalize_confidence(conf: &[f64]) -> (Vec<f64>, bool) {
    let sum: f64 = conf.iter().sum();
    if sum <= 0.0 {
        let n = conf.len() as f64;
        return (vec![1.0 / n; conf.len()], true);
    }
    (conf.iter().map(|c| c / sum).collect(), false)
}

/// Row-wise [`normalize_confidence`] over a batch matrix.
pub fn normalize_confidence_batch(conf: &Array2<f64>) -> (Array2<f64>, bool) {
    let mut out = conf.clone();
    let mut any_fallback = false;
    for mut row in out.rows_mut() {
        let raw: Vec<f64> = row.iter().copied().collect();
        let (normed, fallback) = normalize_confidence(&raw);
        any_fallback |= fallback;
        for (v, n) in row.iter_mut().zip(normed) {
            *v = n;
        }
    }
    (out, any_fallback)
}

/// Duplicate per-joint weights onto both coordinate columns
/// (`n x J` -> `n x 2J`).
pub fn expand_conf_to_coords(conf: &Array2<f64>) -> Array2<f64> {
    let (n, j) = conf.dim();
    let mut out = Array2::zeros((n, 2 * j));
    for i in 0..n {
        for k in 0..j {
            out[[i, 2 * k]] = conf[[i, k]];
            out[[i, 2 * k + 1]] = conf[[i, k]];
        }
    }
    out
}

/// Split a flat joint-major 2D batch (`n x 2J`) into (u, v) matrices.
pub fn split_uv(flat: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n, cols) = flat.dim();
    let j = cols / 2;
    let mut u = Array2::zeros((n, j));
    let mut v = Array2::zeros((n, j));
    for i in 0..n {
        for k in 0..j {
            u[[i, k]] = flat[[i, 2 * k]];
            v[[i, k]] = flat[[i, 2 * k + 1]];
        }
    }
    (u, v)
}

// ---------------------------------------------------------------------
// Differentiable losses
// ---------------------------------------------------------------------

/// Confidence-weighted refinement loss:
/// `(1/(N_S N_J)) Σ_i Σ_j c'_ij ||x_ij - x̂_ij||²`.
///
/// `pred`/`gt` are flat `n x 2J` batches; `conf_norm` is the `n x J`
/// output of [`normalize_confidence_batch`].
pub fn refinement_loss(g: &mut Graph, pred: Var, gt: Var, conf_norm: &Array2<f64>) -> Result<Var> {
    let (n, j) = conf_norm.dim();
    let weights = g.leaf(expand_conf_to_coords(conf_norm));
    let diff = g.sub(pred, gt)?;
    let sq = g.square(diff);
    let weighted = g.mul(sq, weights)?;
    let total = g.sum(weighted);
    Ok(g.scalar_mul(total, 1.0 / (n as f64 * j as f64)))
}

/// Differentiable pinhole projection of per-component joint matrices
/// through per-sample camera columns. Returns (u, v), each `n x J`.
///
/// Depths are guarded by `EPS_DEPTH_MM`; a violating sample is reported
/// as [`LossError::BehindCamera`].
pub fn project_components(g: &mut Graph, comps: &[Var; 3], cam: &CameraVars) -> Result<(Var, Var)> {
    let z_shift = g.add(comps[2], cam.t_z)?;
    // Values are known during construction; enforce the precondition.
    {
        let depths = g.value(z_shift);
        for (i, row) in depths.rows().into_iter().enumerate() {
            for d in row {
                if !(*d > EPS_DEPTH_MM) {
                    return Err(LossError::BehindCamera {
                        sample: i,
                        depth: *d,
                    });
                }
            }
        }
    }
    let inv_depth = g.recip(z_shift, EPS_DEPTH_MM);

    let x_shift = g.add(comps[0], cam.t_x)?;
    let x_over_z = g.mul(x_shift, inv_depth)?;
    let fx_scaled = g.mul(x_over_z, cam.f_x)?;
    let u = g.add(fx_scaled, cam.c_x)?;

    let y_shift = g.add(comps[1], cam.t_y)?;
    let y_over_z = g.mul(y_shift, inv_depth)?;
    let fy_scaled = g.mul(y_over_z, cam.f_y)?;
    let v = g.add(fy_scaled, cam.c_y)?;
    Ok((u, v))
}

/// Mean squared 2D reprojection error over samples and joints:
/// projects `comps` through `cam` and compares with ground-truth (u, v).
pub fn reprojection_loss(
    g: &mut Graph,
    comps: &[Var; 3],
    cam: &CameraVars,
    gt_u: &Array2<f64>,
    gt_v: &Array2<f64>,
) -> Result<Var> {
    let (n, j) = gt_u.dim();
    let (u, v) = project_components(g, comps, cam)?;
    let gu = g.leaf(gt_u.clone());
    let gv = g.leaf(gt_v.clone());
    let du = g.sub(u, gu)?;
    let dv = g.sub(v, gv)?;
    let su = g.square(du);
    let sv = g.square(dv);
    let tu = g.sum(su);
    let tv = g.sum(sv);
    let total = g.add(tu, tv)?;
    Ok(g.scalar_mul(total, 1.0 / (n as f64 * j as f64)))
}

/// Ground-truth camera parameters as `n x 1` column arrays, in the
/// order f_x, f_y, c_x, c_y, t_x, t_y, t_z.
pub fn camera_gt_columns(cams: &[(CameraIntrinsics, Offset3D)]) -> [Array2<f64>; 7] {
    let n = cams.len();
    let col = |f: &dyn Fn(&(CameraIntrinsics, Offset3D)) -> f64| {
        Array2::from_shape_fn((n, 1), |(i, _)| f(&cams[i]))
    };
    [
        col(&|c| c.0.f_x),
        col(&|c| c.0.f_y),
        col(&|c| c.0.c_x),
        col(&|c| c.0.c_y),
        col(&|c| c.1.t_x),
        col(&|c| c.1.t_y),
        col(&|c| c.1.t_z),
    ]
}

/// Mean (over samples) of the squared error over the 4 intrinsic scalars
/// plus the 3 offset scalars.
pub fn camera_loss(g: &mut Graph, cam: &CameraVars, gt: &[Array2<f64>; 7]) -> Result<Var> {
    if gt[0].nrows() == 0 {
        return Err(LossError::MissingCameraGroundTruth);
    }
    let n = gt[0].nrows() as f64;
    let preds = [cam.f_x, cam.f_y, cam.c_x, cam.c_y, cam.t_x, cam.t_y, cam.t_z];
    let mut acc: Option<Var> = None;
    for (pred, gt_col) in preds.iter().zip(gt.iter()) {
        let target = g.leaf(gt_col.clone());
        let d = g.sub(*pred, target)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(g.scalar_mul(acc.expect("seven camera scalars"), 1.0 / n))
}

/// Mean squared 3D error over samples and joints:
/// `(1/(N_S N_J)) Σ Σ ||X - X̂||²` from per-component matrices.
pub fn pose3d_loss(
    g: &mut Graph,
    pred_comps: &[Var; 3],
    gt_comps: &[Array2<f64>; 3],
) -> Result<Var> {
    let (n, j) = gt_comps[0].dim();
    let mut acc: Option<Var> = None;
    for (pred, gt) in pred_comps.iter().zip(gt_comps.iter()) {
        let target = g.leaf(gt.clone());
        let d = g.sub(*pred, target)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(g.scalar_mul(acc.expect("three components"), 1.0 / (n as f64 * j as f64)))
}

/// The three LS-GAN objectives given discriminator scores.
#[derive(Debug, Clone, Copy)]
pub struct LsGanLosses {
    pub dis_2d: Var,
    pub dis_3d: Var,
    pub gen: Var,
}

fn half_mean_sq_minus(g: &mut Graph, scores: Var, target: f64) -> Result<Var> {
    let shifted = g.add_scalar(scores, -target);
    let sq = g.square(shifted);
    let m = g.mean(sq);
    Ok(g.scalar_mul(m, 0.5))
}

/// LS-GAN losses from already-computed scores. Discriminators push real
/// scores to 1 and fake scores to 0; the generator side pushes fake
/// scores to 1. The fake-2D pool mixes augmented poses with camera-branch
/// reprojections of 2D-only samples when available.
pub fn lsgan_losses(
    g: &mut Graph,
    real_2d: Var,
    fake_2d: Var,
    real_3d: Var,
    fake_3d: Var,
) -> Result<LsGanLosses> {
    for (scores, pool) in [
        (real_2d, "real 2D"),
        (fake_2d, "fake 2D"),
        (real_3d, "real 3D"),
        (fake_3d, "fake 3D"),
    ] {
        if g.shape(scores).0 == 0 {
            return Err(LossError::EmptyPool { pool });
        }
    }
    let real2_term = half_mean_sq_minus(g, real_2d, 1.0)?;
    let fake2_term = half_mean_sq_minus(g, fake_2d, 0.0)?;
    let dis_2d = g.add(real2_term, fake2_term)?;

    let real3_term = half_mean_sq_minus(g, real_3d, 1.0)?;
    let fake3_term = half_mean_sq_minus(g, fake_3d, 0.0)?;
    let dis_3d = g.add(real3_term, fake3_term)?;

    let gen2 = half_mean_sq_minus(g, fake_2d, 1.0)?;
    let gen3 = half_mean_sq_minus(g, fake_3d, 1.0)?;
    let gen = g.add(gen2, gen3)?;

    Ok(LsGanLosses { dis_2d, dis_3d, gen })
}

/// Graph-side paired total mirroring [`paired_total`].
pub fn paired_total_var(
    g: &mut Graph,
    w: &LossWeights,
    l_ref: Var,
    l_cam: Var,
    l_2d: Var,
    l_3d: Var,
) -> Result<Var> {
    let a = g.scalar_mul(l_ref, w.lambda_ref_paired);
    let b = g.scalar_mul(l_cam, w.lambda_cam);
    let c = g.scalar_mul(l_2d, w.lambda_2d_paired);
    let d = g.scalar_mul(l_3d, w.lambda_3d);
    let ab = g.add(a, b)?;
    let abc = g.add(ab, c)?;
    Ok(g.add(abc, d)?)
}

/// Graph-side weak total mirroring [`weak_total`].
pub fn weak_total_var(g: &mut Graph, w: &LossWeights, l_ref: Var, l_2d: Var) -> Result<Var> {
    let a = g.scalar_mul(l_ref, w.lambda_ref_weak);
    let b = g.scalar_mul(l_2d, w.lambda_2d_weak);
    Ok(g.add(a, b)?)
}
