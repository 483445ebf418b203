//! The five network heads: 2D refinement, 3D lifting, camera parameter
//! branch, pose generator, and the two KCS discriminators.
//!
//! Every head is a pure function of (parameters, input): forward passes
//! build onto a [`Graph`] so the same code path serves inference and
//! training. Batches are row-major matrices; 2D poses flatten to
//! `n x 32` and 3D poses to `n x 48`, joint-major
//! (`j0x j0y [j0z] j1x ...`).

use std::sync::OnceLock;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BoundParams, Graph, ParamSet, Result, Var};
use crate::geometry::{CameraIntrinsics, Offset3D};
use crate::skeleton::{BodyPart, KinematicTree, Pose2D, Pose3D, NUM_BONES, NUM_JOINTS};

/// Cap on the per-bone axis-angle norm emitted by the generator (rad).
pub const MAX_BONE_ANGLE_RAD: f64 = 0.5;
/// Bound on per-bone log length scale (|γ| ≤ ln 1.3).
pub const MAX_LOG_SCALE: f64 = 0.262364264467491; // ln(1.3)
/// Generator rigid-rotation per-component bound (radians).
pub const RIGID_ROT_MAX_RAD: f64 = std::f64::consts::PI;
/// Generator rigid x/y translation bound (mm).
pub const RIGID_T_XY_MAX_MM: f64 = 1000.0;
/// Generator rigid depth range (mm).
pub const RIGID_T_Z_RANGE_MM: (f64, f64) = (2000.0, 8000.0);
/// Camera-branch depth range (mm).
pub const CAMERA_T_Z_RANGE_MM: (f64, f64) = (500.0, 20000.0);
/// Softplus floor keeping focal lengths strictly positive.
pub const FOCAL_FLOOR: f64 = 1e-3;
/// The lifter and camera-branch translation heads predict in meters and
/// are scaled to millimeters at the output.
pub const MM_PER_UNIT: f64 = 1000.0;

/// A width-preserving residual block: `x + W2 relu(W1 x + b1) + b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlockSpec {
    pub width: usize,
}

impl Default for ResidualBlockSpec {
    fn default() -> Self {
        ResidualBlockSpec { width: 512 }
    }
}

impl ResidualBlockSpec {
    fn init_into(&self, set: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        let w = self.width;
        set.insert(&format!("{prefix}.fc1.w"), kaiming_uniform(w, w, rng))?;
        set.insert(&format!("{prefix}.fc1.b"), Array2::zeros((1, w)))?;
        set.insert(&format!("{prefix}.fc2.w"), xavier_uniform(w, w, rng))?;
        set.insert(&format!("{prefix}.fc2.b"), Array2::zeros((1, w)))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let h = linear(g, bound, &format!("{prefix}.fc1"), x)?;
        let h = g.relu(h);
        let h = linear(g, bound, &format!("{prefix}.fc2"), h)?;
        g.add(x, h)
    }

    fn num_scalars(&self) -> usize {
        2 * (self.width * self.width + self.width)
    }
}

/// `x W + b` with `W` stored as (in x out) and `b` as a broadcast row.
fn linear(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.w"))?;
    let b = bound.var(&format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

/// Kaiming-uniform init for weights feeding a relu: U(±sqrt(6/fan_in)).
pub fn kaiming_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

/// Xavier-uniform init: U(±sqrt(6/(fan_in+fan_out))).
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

// ---------------------------------------------------------------------
// Batch layout helpers
// ---------------------------------------------------------------------

/// Flatten 2D poses into an `n x 32` joint-major batch matrix.
pub fn flatten_pose2d_batch(poses: &[Pose2D]) -> Array2<f64> {
    let mut out = Array2::zeros((poses.len(), 2 * NUM_JOINTS));
    for (i, p) in poses.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            out[[i, 2 * j]] = p.coords()[[j, 0]];
            out[[i, 2 * j + 1]] = p.coords()[[j, 1]];
        }
    }
    out
}

/// Flatten 3D poses into an `n x 48` joint-major batch matrix (mm).
pub fn flatten_pose3d_batch(poses: &[Pose3D]) -> Array2<f64> {
    let mut out = Array2::zeros((poses.len(), 3 * NUM_JOINTS));
    for (i, p) in poses.iter().enumerate() {
        for j in 0..NUM_JOINTS {
            for c in 0..3 {
                out[[i, 3 * j + c]] = p.coords()[[j, c]];
            }
        }
    }
    out
}

/// Row `i` of a flat batch back into a 2D pose.
pub fn unflatten_pose2d(flat: &Array2<f64>, i: usize) -> Pose2D {
    let mut c = Array2::zeros((NUM_JOINTS, 2));
    for j in 0..NUM_JOINTS {
        c[[j, 0]] = flat[[i, 2 * j]];
        c[[j, 1]] = flat[[i, 2 * j + 1]];
    }
    Pose2D::new(c).expect("finite batch row")
}

/// Row `i` of a flat batch back into a 3D pose.
pub fn unflatten_pose3d(flat: &Array2<f64>, i: usize) -> Pose3D {
    let mut c = Array2::zeros((NUM_JOINTS, 3));
    for j in 0..NUM_JOINTS {
        for k in 0..3 {
            c[[j, k]] = flat[[i, 3 * j + k]];
        }
    }
    Pose3D::new(c).expect("finite batch row")
}

fn comp_selectors(dims: usize) -> &'static Vec<Array2<f64>> {
    static SEL2: OnceLock<Vec<Array2<f64>>> = OnceLock::new();
    static SEL3: OnceLock<Vec<Array2<f64>>> = OnceLock::new();
    let build = move |dims: usize| {
        (0..dims)
            .map(|c| {
                let mut m = Array2::zeros((dims * NUM_JOINTS, NUM_JOINTS));
                for j in 0..NUM_JOINTS {
                    m[[dims * j + c, j]] = 1.0;
                }
                m
            })
            .collect()
    };
    match dims {
        2 => SEL2.get_or_init(|| build(2)),
        3 => SEL3.get_or_init(|| build(3)),
        _ => panic!("component selectors exist for 2 and 3 dims only"),
    }
}

/// Split a flat pose batch into per-component `n x 16` matrices.
pub fn pose_components(g: &mut Graph, flat: Var, dims: usize) -> Result<Vec<Var>> {
    comp_selectors(dims)
        .iter()
        .map(|sel| {
            let s = g.leaf(sel.clone());
            g.matmul(flat, s)
        })
        .collect()
}

/// Recombine per-component `n x 16` matrices into a flat batch.
pub fn components_to_flat(g: &mut Graph, comps: &[Var]) -> Result<Var> {
    let dims = comps.len();
    let sels = comp_selectors(dims);
    let mut acc: Option<Var> = None;
    for (c, comp) in comps.iter().enumerate() {
        let back = g.leaf(sels[c].t().to_owned());
        let part = g.matmul(*comp, back)?;
        acc = Some(match acc {
            None => part,
            Some(a) => g.add(a, part)?,
        });
    }
    Ok(acc.expect("at least one component"))
}

fn bone_selector() -> &'static Array2<f64> {
    static M: OnceLock<Array2<f64>> = OnceLock::new();
    M.get_or_init(|| {
        let tree = KinematicTree::new();
        let mut s = Array2::zeros((NUM_JOINTS, NUM_BONES));
        for k in 0..NUM_BONES {
            let (parent, child) = tree.bone(k);
            s[[child.code(), k]] = 1.0;
            s[[parent.code(), k]] = -1.0;
        }
        s
    })
}

/// Per-component bone matrices (`n x 15`) from per-component joints.
pub fn bone_components(g: &mut Graph, comps: &[Var]) -> Result<Vec<Var>> {
    comps
        .iter()
        .map(|c| {
            let s = g.leaf(bone_selector().clone());
            g.matmul(*c, s)
        })
        .collect()
}

/// Ordered (bone_i, bone_j) pairs of the part-aware KCS feature vector,
/// part blocks in `BodyPart::ALL` order, row-major within a block.
pub fn kcs_pair_order(tree: &KinematicTree) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(65);
    for part in BodyPart::ALL {
        let bones = tree.part_bones(part);
        for &i in &bones {
            for &j in &bones {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Column ranges of each part block inside the KCS feature vector.
pub fn part_feature_ranges(tree: &KinematicTree) -> Vec<(usize, usize)> {
    let mut ranges = Vec::with_capacity(5);
    let mut start = 0;
    for part in BodyPart::ALL {
        let n = tree.part_bones(part).len();
        ranges.push((start, start + n * n));
        start += n * n;
    }
    ranges
}

/// Flattened part-aware KCS blocks of a pose batch (`n x 65`), built
/// from per-component joint matrices so gradients flow back to them.
pub fn kcs_part_features(g: &mut Graph, comps: &[Var], tree: &KinematicTree) -> Result<Var> {
    let bones = bone_components(g, comps)?;
    let mut cols: Vec<Vec<Var>> = Vec::with_capacity(bones.len());
    for b in &bones {
        let mut per_bone = Vec::with_capacity(NUM_BONES);
        for k in 0..NUM_BONES {
            per_bone.push(g.slice_cols(*b, k, k + 1)?);
        }
        cols.push(per_bone);
    }
    let mut feats = Vec::with_capacity(65);
    for (i, j) in kcs_pair_order(tree) {
        let mut acc: Option<Var> = None;
        for comp_cols in &cols {
            let prod = g.mul(comp_cols[i], comp_cols[j])?;
            acc = Some(match acc {
                None => prod,
                Some(a) => g.add(a, prod)?,
            });
        }
        feats.push(acc.expect("component product"));
    }
    g.concat_cols(&feats)
}

// ---------------------------------------------------------------------
// RefineNet
// ---------------------------------------------------------------------

/// Confidence-guided 2D keypoint refinement. Predicts per-joint deltas
/// added to the input coordinates; the exit layer starts zeroed so a
/// fresh network is exactly the identity.
#[derive(Debug, Clone, Copy)]
pub struct RefineNet {
    pub block: ResidualBlockSpec,
}

impl Default for RefineNet {
    fn default() -> Self {
        RefineNet {
            block: ResidualBlockSpec::default(),
        }
    }
}

impl RefineNet {
    pub const IN: usize = 2 * NUM_JOINTS + NUM_JOINTS; // coords + confidences
    pub const OUT: usize = 2 * NUM_JOINTS;

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut set = ParamSet::new();
        let w = self.block.width;
        set.insert("entry.w", kaiming_uniform(Self::IN, w, rng)).unwrap();
        set.insert("entry.b", Array2::zeros((1, w))).unwrap();
        self.block.init_into(&mut set, "block1", rng).unwrap();
        set.insert("exit.w", Array2::zeros((w, Self::OUT))).unwrap();
        set.insert("exit.b", Array2::zeros((1, Self::OUT))).unwrap();
        set
    }

    /// `coords`: n x 32 normalized 2D batch; `conf`: n x 16 normalized
    /// confidences. Returns refined n x 32 coordinates.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        coords: Var,
        conf: Var,
    ) -> Result<Var> {
        let input = g.concat_cols(&[coords, conf])?;
        let h = linear(g, bound, "entry", input)?;
        let h = g.relu(h);
        let h = self.block.forward(g, bound, "block1", h)?;
        let delta = linear(g, bound, "exit", h)?;
        g.add(coords, delta)
    }

    /// Plain batch inference.
    pub fn apply(
        &self,
        params: &ParamSet,
        coords: &Array2<f64>,
        conf: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let c = g.leaf(coords.clone());
        let cf = g.leaf(conf.clone());
        let out = self.forward(&mut g, &bound, c, cf)?;
        Ok(g.value(out).clone())
    }

    pub fn num_scalars(&self) -> usize {
        let w = self.block.width;
        (Self::IN * w + w) + self.block.num_scalars() + (w * Self::OUT + Self::OUT)
    }
}

// ---------------------------------------------------------------------
// Lifter
// ---------------------------------------------------------------------

/// 2D-to-3D lifting network. Predicts the 15 non-root joints in meters
/// and scales to millimeters; the pelvis row is zero by construction.
#[derive(Debug, Clone, Copy)]
pub struct Lifter {
    pub block: ResidualBlockSpec,
}

impl Default for Lifter {
    fn default() -> Self {
        Lifter {
            block: ResidualBlockSpec::default(),
        }
    }
}

impl Lifter {
    pub const IN: usize = 2 * NUM_JOINTS;
    pub const OUT: usize = 3 * (NUM_JOINTS - 1);

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut set = ParamSet::new();
        let w = self.block.width;
        set.insert("entry.w", kaiming_uniform(Self::IN, w, rng)).unwrap();
        set.insert("entry.b", Array2::zeros((1, w))).unwrap();
        self.block.init_into(&mut set, "block1", rng).unwrap();
        self.block.init_into(&mut set, "block2", rng).unwrap();
        // Zero exit: the untrained lifter emits the origin pose, which
        // keeps early reprojections in front of any admissible camera.
        set.insert("exit.w", Array2::zeros((w, Self::OUT))).unwrap();
        set.insert("exit.b", Array2::zeros((1, Self::OUT))).unwrap();
        set
    }

    /// Raw head output: n x 45 millimeter coordinates of joints 1..15.
    pub fn forward_raw(&self, g: &mut Graph, bound: &BoundParams, coords: Var) -> Result<Var> {
        let h = linear(g, bound, "entry", coords)?;
        let h = g.relu(h);
        let h = self.block.forward(g, bound, "block1", h)?;
        let h = self.block.forward(g, bound, "block2", h)?;
        let out = linear(g, bound, "exit", h)?;
        Ok(g.scalar_mul(out, MM_PER_UNIT))
    }

    /// Per-component `n x 16` joint matrices with the pelvis column
    /// prepended as exact zeros.
    pub fn forward_components(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        coords: Var,
    ) -> Result<[Var; 3]> {
        let raw = self.forward_raw(g, bound, coords)?;
        let n = g.shape(raw).0;
        let zero = g.leaf(Array2::zeros((n, 1)));
        let mut comps = Vec::with_capacity(3);
        for c in 0..3 {
            // Selector picking component c of each predicted joint.
            let mut sel = Array2::zeros((Self::OUT, NUM_JOINTS - 1));
            for j in 0..(NUM_JOINTS - 1) {
                sel[[3 * j + c, j]] = 1.0;
            }
            let s = g.leaf(sel);
            let picked = g.matmul(raw, s)?;
            comps.push(g.concat_cols(&[zero, picked])?);
        }
        Ok([comps[0], comps[1], comps[2]])
    }

    /// Plain batch inference: n x 48 root-relative millimeter output.
    pub fn apply(&self, params: &ParamSet, coords: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(coords.clone());
        let comps = self.forward_components(&mut g, &bound, x)?;
        let flat = components_to_flat(&mut g, &comps)?;
        Ok(g.value(flat).clone())
    }

    pub fn num_scalars(&self) -> usize {
        let w = self.block.width;
        (Self::IN * w + w) + 2 * self.block.num_scalars() + (w * Self::OUT + Self::OUT)
    }
}

// ---------------------------------------------------------------------
// Camera branch
// ---------------------------------------------------------------------

/// Per-sample camera parameters as graph columns (`n x 1` each).
#[derive(Debug, Clone, Copy)]
pub struct CameraVars {
    pub f_x: Var,
    pub f_y: Var,
    pub c_x: Var,
    pub c_y: Var,
    pub t_x: Var,
    pub t_y: Var,
    pub t_z: Var,
}

/// Predicts pinhole intrinsics and a 3D root offset from a 2D pose.
/// Focal lengths go through softplus plus a floor; the depth through a
/// scaled sigmoid onto `CAMERA_T_Z_RANGE_MM`.
#[derive(Debug, Clone, Copy)]
pub struct CameraBranch {
    pub block: ResidualBlockSpec,
}

impl Default for CameraBranch {
    fn default() -> Self {
        CameraBranch {
            block: ResidualBlockSpec::default(),
        }
    }
}

impl CameraBranch {
    pub const IN: usize = 2 * NUM_JOINTS;
    pub const OUT: usize = 7;

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut set = ParamSet::new();
        let w = self.block.width;
        set.insert("entry.w", kaiming_uniform(Self::IN, w, rng)).unwrap();
        set.insert("entry.b", Array2::zeros((1, w))).unwrap();
        self.block.init_into(&mut set, "block1", rng).unwrap();
        self.block.init_into(&mut set, "block2", rng).unwrap();
        // Zero exit: the untrained branch emits one canonical camera
        // (f = softplus(0) + floor, centered, mid-range depth).
        set.insert("exit.w", Array2::zeros((w, Self::OUT))).unwrap();
        set.insert("exit.b", Array2::zeros((1, Self::OUT))).unwrap();
        set
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, coords: Var) -> Result<CameraVars> {
        let h = linear(g, bound, "entry", coords)?;
        let h = g.relu(h);
        let h = self.block.forward(g, bound, "block1", h)?;
        let h = self.block.forward(g, bound, "block2", h)?;
        let raw = linear(g, bound, "exit", h)?;

        let raw_fx = g.slice_cols(raw, 0, 1)?;
        let raw_fy = g.slice_cols(raw, 1, 2)?;
        let c_x = g.slice_cols(raw, 2, 3)?;
        let c_y = g.slice_cols(raw, 3, 4)?;
        let raw_tx = g.slice_cols(raw, 4, 5)?;
        let raw_ty = g.slice_cols(raw, 5, 6)?;
        let raw_tz = g.slice_cols(raw, 6, 7)?;

        let sp_fx = g.softplus(raw_fx);
        let f_x = g.add_scalar(sp_fx, FOCAL_FLOOR);
        let sp_fy = g.softplus(raw_fy);
        let f_y = g.add_scalar(sp_fy, FOCAL_FLOOR);
        let t_x = g.scalar_mul(raw_tx, MM_PER_UNIT);
        let t_y = g.scalar_mul(raw_ty, MM_PER_UNIT);
        let (lo, hi) = CAMERA_T_Z_RANGE_MM;
        let sig = g.sigmoid(raw_tz);
        let scaled = g.scalar_mul(sig, hi - lo);
        let t_z = g.add_scalar(scaled, lo);

        Ok(CameraVars {
            f_x,
            f_y,
            c_x,
            c_y,
            t_x,
            t_y,
            t_z,
        })
    }

    /// Plain inference returning one camera per batch row.
    pub fn infer(
        &self,
        params: &ParamSet,
        coords: &Array2<f64>,
    ) -> Result<Vec<(CameraIntrinsics, Offset3D)>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(coords.clone());
        let cam = self.forward(&mut g, &bound, x)?;
        let n = coords.nrows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let k = CameraIntrinsics::new(
                g.value(cam.f_x)[[i, 0]],
                g.value(cam.f_y)[[i, 0]],
                g.value(cam.c_x)[[i, 0]],
                g.value(cam.c_y)[[i, 0]],
            )
            .expect("constraint layers keep intrinsics valid");
            let t = Offset3D::new(
                g.value(cam.t_x)[[i, 0]],
                g.value(cam.t_y)[[i, 0]],
                g.value(cam.t_z)[[i, 0]],
            );
            out.push((k, t));
        }
        Ok(out)
    }

    pub fn num_scalars(&self) -> usize {
        let w = self.block.width;
        (Self::IN * w + w) + 2 * self.block.num_scalars() + (w * Self::OUT + Self::OUT)
    }
}

// ---------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------

/// Bounded augmentation parameters produced per sample (graph columns).
#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    /// n x 45 per-bone axis-angle (radians, bone-major).
    pub bone_angle: Var,
    /// n x 15 per-bone log length scales.
    pub log_scale: Var,
    /// n x 3 rigid-rotation axis-angle.
    pub rigid_rot: Var,
    /// n x 1 each (mm).
    pub t_x: Var,
    pub t_y: Var,
    pub t_z: Var,
}

/// Plain (non-graph) generator output for one sample.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// 15 x 3 per-bone axis-angle (radians).
    pub bone_angle: Array2<f64>,
    /// Per-bone log length scales.
    pub log_scale: [f64; NUM_BONES],
    /// Rigid-rotation axis-angle.
    pub rigid_rot: [f64; 3],
    /// Rigid translation, becomes the augmented sample's root offset (mm).
    pub translation: [f64; 3],
}

impl GeneratorOutput {
    /// Augmentation that reproduces the source sample exactly: zero
    /// rotations/scales and the sample's own root offset.
    pub fn identity(offset: Offset3D) -> Self {
        GeneratorOutput {
            bone_angle: Array2::zeros((NUM_BONES, 3)),
            log_scale: [0.0; NUM_BONES],
            rigid_rot: [0.0; 3],
            translation: [offset.t_x, offset.t_y, offset.t_z],
        }
    }
}

/// Three small MLPs, one per augmentation operation, conditioned on the
/// source 3D pose and a 16-dim noise vector. Final layers start zeroed,
/// so a fresh generator emits zero rotations/scales and a mid-range
/// depth.
#[derive(Debug, Clone, Copy)]
pub struct Generator {
    pub hidden: usize,
}

impl Default for Generator {
    fn default() -> Self {
        Generator { hidden: 256 }
    }
}

impl Generator {
    pub const NOISE_DIM: usize = 16;
    pub const IN: usize = 3 * NUM_JOINTS + Self::NOISE_DIM;

    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut set = ParamSet::new();
        let h = self.hidden;
        for (head, out) in [("ba", 3 * NUM_BONES), ("bl", NUM_BONES), ("rt", 6)] {
            set.insert(&format!("{head}.fc1.w"), kaiming_uniform(Self::IN, h, rng))
                .unwrap();
            set.insert(&format!("{head}.fc1.b"), Array2::zeros((1, h))).unwrap();
            set.insert(&format!("{head}.out.w"), Array2::zeros((h, out))).unwrap();
            set.insert(&format!("{head}.out.b"), Array2::zeros((1, out))).unwrap();
        }
        set
    }

    /// `pose_flat`: n x 48 source poses (mm); `noise`: n x 16.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        pose_flat: Var,
        noise: Var,
    ) -> Result<GeneratorVars> {
        let pose_m = g.scalar_mul(pose_flat, 1.0 / MM_PER_UNIT);
        let input = g.concat_cols(&[pose_m, noise])?;

        let head = |g: &mut Graph, name: &str| -> Result<Var> {
            let h = linear(g, bound, &format!("{name}.fc1"), input)?;
            let h = g.relu(h);
            linear(g, bound, &format!("{name}.out"), h)
        };

        let ba_raw = head(g, "ba")?;
        let ba_t = g.tanh(ba_raw);
        // Component bound 0.5/sqrt(3) keeps the per-bone axis-angle norm
        // at or below MAX_BONE_ANGLE_RAD.
        let bone_angle = g.scalar_mul(ba_t, MAX_BONE_ANGLE_RAD / 3f64.sqrt());

        let bl_raw = head(g, "bl")?;
        let bl_t = g.tanh(bl_raw);
        let log_scale = g.scalar_mul(bl_t, MAX_LOG_SCALE);

        let rt_raw = head(g, "rt")?;
        let rot_raw = g.slice_cols(rt_raw, 0, 3)?;
        let rot_t = g.tanh(rot_raw);
        let rigid_rot = g.scalar_mul(rot_t, RIGID_ROT_MAX_RAD);
        let tx_raw = g.slice_cols(rt_raw, 3, 4)?;
        let tx_t = g.tanh(tx_raw);
        let t_x = g.scalar_mul(tx_t, RIGID_T_XY_MAX_MM);
        let ty_raw = g.slice_cols(rt_raw, 4, 5)?;
        let ty_t = g.tanh(ty_raw);
        let t_y = g.scalar_mul(ty_t, RIGID_T_XY_MAX_MM);
        let (lo, hi) = RIGID_T_Z_RANGE_MM;
        let tz_raw = g.slice_cols(rt_raw, 5, 6)?;
        let tz_s = g.sigmoid(tz_raw);
        let tz_scaled = g.scalar_mul(tz_s, hi - lo);
        let t_z = g.add_scalar(tz_scaled, lo);

        Ok(GeneratorVars {
            bone_angle,
            log_scale,
            rigid_rot,
            t_x,
            t_y,
            t_z,
        })
    }

    /// Plain per-sample outputs for dataset dumps and tests.
    pub fn infer(
        &self,
        params: &ParamSet,
        pose_flat: &Array2<f64>,
        noise: &Array2<f64>,
    ) -> Result<Vec<GeneratorOutput>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let p = g.leaf(pose_flat.clone());
        let z = g.leaf(noise.clone());
        let vars = self.forward(&mut g, &bound, p, z)?;
        let n = pose_flat.nrows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut ba = Array2::zeros((NUM_BONES, 3));
            for k in 0..NUM_BONES {
                for c in 0..3 {
                    ba[[k, c]] = g.value(vars.bone_angle)[[i, 3 * k + c]];
                }
            }
            let mut bl = [0.0; NUM_BONES];
            for (k, slot) in bl.iter_mut().enumerate() {
                *slot = g.value(vars.log_scale)[[i, k]];
            }
            out.push(GeneratorOutput {
                bone_angle: ba,
                log_scale: bl,
                rigid_rot: [
                    g.value(vars.rigid_rot)[[i, 0]],
                    g.value(vars.rigid_rot)[[i, 1]],
                    g.value(vars.rigid_rot)[[i, 2]],
                ],
                translation: [
                    g.value(vars.t_x)[[i, 0]],
                    g.value(vars.t_y)[[i, 0]],
                    g.value(vars.t_z)[[i, 0]],
                ],
            });
        }
        Ok(out)
    }

    pub fn num_scalars(&self) -> usize {
        let h = self.hidden;
        [3 * NUM_BONES, NUM_BONES, 6]
            .iter()
            .map(|out| (Self::IN * h + h) + (h * out + out))
            .sum()
    }
}

// ---------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------

/// KCS-based pose discriminator: a per-part residual trunk over the
/// flattened part-aware KCS blocks, fused into one unbounded LS-GAN
/// score. The same architecture serves 2D and 3D poses (their KCS
/// matrices share dimensions); 3D inputs are scaled to meters first.
#[derive(Debug, Clone, Copy)]
pub struct Discriminator {
    pub block: ResidualBlockSpec,
}

impl Default for Discriminator {
    fn default() -> Self {
        // Desk-scale trunk width; the part blocks are at most 49 wide.
        Discriminator {
            block: ResidualBlockSpec { width: 128 },
        }
    }
}

impl Discriminator {
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let tree = KinematicTree::new();
        let mut set = ParamSet::new();
        let w = self.block.width;
        for (p, (start, end)) in part_feature_ranges(&tree).iter().enumerate() {
            let in_dim = end - start;
            set.insert(&format!("part{p}.entry.w"), kaiming_uniform(in_dim, w, rng))
                .unwrap();
            set.insert(&format!("part{p}.entry.b"), Array2::zeros((1, w))).unwrap();
            self.block
                .init_into(&mut set, &format!("part{p}.block"), rng)
                .unwrap();
        }
        set.insert("head.w", xavier_uniform(5 * w, 1, rng)).unwrap();
        set.insert("head.b", Array2::zeros((1, 1))).unwrap();
        set
    }

    /// Score from precomputed KCS part features (`n x 65`).
    pub fn forward_features(&self, g: &mut Graph, bound: &BoundParams, feats: Var) -> Result<Var> {
        let tree = KinematicTree::new();
        let mut fused = Vec::with_capacity(5);
        for (p, (start, end)) in part_feature_ranges(&tree).iter().enumerate() {
            let block = g.slice_cols(feats, *start, *end)?;
            let h = linear(g, bound, &format!("part{p}.entry"), block)?;
            let h = g.relu(h);
            let h = self.block.forward(g, bound, &format!("part{p}.block"), h)?;
            fused.push(h);
        }
        let cat = g.concat_cols(&fused)?;
        linear(g, bound, "head", cat)
    }

    /// Score a batch given per-component joint matrices. For 3D poses
    /// pass `scale = 1/MM_PER_UNIT` so KCS entries are in meters squared.
    pub fn forward_components(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        comps: &[Var],
        scale: f64,
    ) -> Result<Var> {
        let tree = KinematicTree::new();
        let scaled: Vec<Var> = comps.iter().map(|c| g.scalar_mul(*c, scale)).collect();
        let feats = kcs_part_features(g, &scaled, &tree)?;
        self.forward_features(g, bound, feats)
    }

    /// Plain scalar score of a single 2D pose.
    pub fn score_pose2d(&self, params: &ParamSet, pose: &Pose2D) -> Result<f64> {
        let flat = flatten_pose2d_batch(std::slice::from_ref(pose));
        self.score_flat(params, &flat, 2, 1.0)
    }

    /// Plain scalar score of a single 3D pose (mm input).
    pub fn score_pose3d(&self, params: &ParamSet, pose: &Pose3D) -> Result<f64> {
        let flat = flatten_pose3d_batch(std::slice::from_ref(pose));
        self.score_flat(params, &flat, 3, 1.0 / MM_PER_UNIT)
    }

    /// Mean score over a flat pose batch.
    pub fn score_flat(
        &self,
        params: &ParamSet,
        flat: &Array2<f64>,
        dims: usize,
        scale: f64,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.leaf(flat.clone());
        let comps = pose_components(&mut g, x, dims)?;
        let score = self.forward_components(&mut g, &bound, &comps, scale)?;
        let mean = g.mean(score);
        Ok(g.scalar_value(mean))
    }

    pub fn num_scalars(&self) -> usize {
        let tree = KinematicTree::new();
        let w = self.block.width;
        let parts: usize = part_feature_ranges(&tree)
            .iter()
            .map(|(s, e)| ((e - s) * w + w) + self.block.num_scalars())
            .sum();
        parts + (5 * w + 1)
    }
}
