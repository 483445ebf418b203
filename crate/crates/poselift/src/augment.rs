//! Pose augmentation: applies generator output to a paired sample by
//! changing bone angles, bone lengths and the rigid placement, in that
//! fixed order, then reprojects through the sample's intrinsics.
//!
//! Two equivalent paths exist: plain functions over poses (used by the
//! synthetic data generator, dataset dumps and tests) and a graph
//! construction (used in GAN training so gradients reach the generator).
//! A consistency test pins them together.

use ndarray::Array2;
use thiserror::Error;

use crate::autograd::{AutogradError, Graph, Var};
use crate::geometry::{
    project, rotation_from_axis_angle, CameraIntrinsics, GeometryError, Offset3D,
};
use crate::nets::{bone_components, GeneratorOutput, GeneratorVars};
use crate::skeleton::{bone_vectors, KinematicTree, Pose2D, Pose3D, NUM_BONES, NUM_JOINTS};

/// Source bones shorter than this cannot be augmented meaningfully.
pub const MIN_SOURCE_BONE_MM: f64 = 1e-6;
/// Augmented skeletons must keep every bone longer than this.
pub const MIN_AUGMENTED_BONE_MM: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("bone {bone} of the source pose is degenerate ({length} mm)")]
    DegenerateBone { bone: usize, length: f64 },
    #[error("augmented pose fell behind the camera: {0}")]
    BehindCamera(GeometryError),
    #[error("augmented pose violates skeleton validity: {0}")]
    InvalidSkeleton(String),
    #[error(transparent)]
    Graph(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// An augmented 2D-3D pair with its provenance.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    /// Root-relative augmented 3D pose (mm).
    pub pose3d: Pose3D,
    /// Exact projection of `pose3d` through (`intrinsics`, `offset`).
    pub pose2d: Pose2D,
    /// Intrinsics inherited from the source sample.
    pub intrinsics: CameraIntrinsics,
    /// Rigid translation of the augmentation, serving as the pair's
    /// ground-truth root offset.
    pub offset: Offset3D,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_id: String,
    pub noise_seed: u64,
}

fn check_source_bones(pose: &Pose3D, tree: &KinematicTree) -> Result<()> {
    let lengths = crate::skeleton::bone_lengths(pose.coords().view(), tree);
    for (k, len) in lengths.iter().enumerate() {
        if *len < MIN_SOURCE_BONE_MM {
            return Err(AugmentError::DegenerateBone {
                bone: k,
                length: *len,
            });
        }
    }
    Ok(())
}

/// Rebuild joints from the root outward given per-bone vectors. The root
/// keeps the source pose's root position.
fn rebuild_from_bones(root: [f64; 3], bones: &Array2<f64>, tree: &KinematicTree) -> Pose3D {
    let mut coords = Array2::zeros((NUM_JOINTS, 3));
    for c in 0..3 {
        coords[[0, c]] = root[c];
    }
    for k in 0..NUM_BONES {
        let (parent, child) = tree.bone(k);
        for c in 0..3 {
            coords[[child.code(), c]] = coords[[parent.code(), c]] + bones[[k, c]];
        }
    }
    Pose3D::new(coords).expect("finite bones rebuild to a finite pose")
}

/// Rotate each bone by its own axis-angle and rebuild from the root.
/// Bone lengths are preserved exactly; descendants translate rigidly
/// with their ancestors.
pub fn apply_bone_angle(
    pose: &Pose3D,
    gamma_ba: &Array2<f64>,
    tree: &KinematicTree,
) -> Result<Pose3D> {
    check_source_bones(pose, tree)?;
    let bones = bone_vectors(pose.coords().view(), tree);
    let mut rotated = Array2::zeros((NUM_BONES, 3));
    for k in 0..NUM_BONES {
        let aa = [gamma_ba[[k, 0]], gamma_ba[[k, 1]], gamma_ba[[k, 2]]];
        let r = rotation_from_axis_angle(&aa);
        for c in 0..3 {
            rotated[[k, c]] = (0..3).map(|d| r[[c, d]] * bones[[k, d]]).sum();
        }
    }
    let root = pose.joint(crate::skeleton::JointId::Pelvis);
    Ok(rebuild_from_bones(root, &rotated, tree))
}

/// Multiply each bone's length by `exp(gamma_bl[k])`, keeping directions,
/// and rebuild from the root.
pub fn apply_bone_length(
    pose: &Pose3D,
    gamma_bl: &[f64; NUM_BONES],
    tree: &KinematicTree,
) -> Result<Pose3D> {
    check_source_bones(pose, tree)?;
    let bones = bone_vectors(pose.coords().view(), tree);
    let mut scaled = Array2::zeros((NUM_BONES, 3));
    for k in 0..NUM_BONES {
        let s = gamma_bl[k].exp();
        for c in 0..3 {
            scaled[[k, c]] = bones[[k, c]] * s;
        }
    }
    let root = pose.joint(crate::skeleton::JointId::Pelvis);
    Ok(rebuild_from_bones(root, &scaled, tree))
}

/// Full augmentation of one root-relative paired sample: bone angles,
/// then bone lengths, then the rigid transform. The rigid rotation is
/// applied about the root (so the result stays root-relative) and the
/// rigid translation becomes the pair's root offset; intrinsics are
/// inherited from the source.
pub fn augment_pair(
    source: &Pose3D,
    intrinsics: &CameraIntrinsics,
    source_id: &str,
    noise_seed: u64,
    out: &GeneratorOutput,
    tree: &KinematicTree,
) -> Result<AugmentedPair> {
    let angled = apply_bone_angle(source, &out.bone_angle, tree)?;
    let lengthened = apply_bone_length(&angled, &out.log_scale, tree)?;
    let rot = rotation_from_axis_angle(&out.rigid_rot);
    let rotated =
        Pose3D::new(lengthened.coords().dot(&rot.t())).expect("rotation of a finite pose is finite");
    let offset = Offset3D::new(out.translation[0], out.translation[1], out.translation[2]);

    // Skeleton validity: finite (by construction) and non-degenerate.
    let lengths = crate::skeleton::bone_lengths(rotated.coords().view(), tree);
    for (k, len) in lengths.iter().enumerate() {
        if *len <= MIN_AUGMENTED_BONE_MM {
            return Err(AugmentError::InvalidSkeleton(format!(
                "bone {k} is {len} mm after augmentation"
            )));
        }
    }

    let pose2d = project(&rotated, intrinsics, &offset).map_err(AugmentError::BehindCamera)?;
    Ok(AugmentedPair {
        pose3d: rotated,
        pose2d,
        intrinsics: *intrinsics,
        offset,
        provenance: Provenance {
            source_id: source_id.to_string(),
            noise_seed,
        },
    })
}

// ---------------------------------------------------------------------
// Graph path
// ---------------------------------------------------------------------

/// Augmented batch inside a graph: root-relative 3D components plus the
/// rigid translation columns that act as the per-sample root offset.
pub struct AugmentGraph {
    /// X* per component, `n x 16`, millimeters, pelvis column zero.
    pub comps: [Var; 3],
    /// Rigid translation columns (`n x 1` each): t_x, t_y, t_z.
    pub offset: [Var; 3],
}

/// Rodrigues rotation inside the graph. `aa` holds per-sample axis-angle
/// columns (`n x 1`); `v` holds the vectors to rotate, one matrix of
/// width `k` per component (the per-sample angle broadcasts across
/// columns). A tiny bias inside the square root keeps the angle strictly
/// positive, so the zero axis-angle maps to the identity smoothly.
fn rodrigues_graph(
    g: &mut Graph,
    aa: &[Var; 3],
    v: &[Var; 3],
) -> std::result::Result<[Var; 3], AutogradError> {
    let ax2 = g.square(aa[0]);
    let ay2 = g.square(aa[1]);
    let az2 = g.square(aa[2]);
    let s01 = g.add(ax2, ay2)?;
    let theta2 = g.add(s01, az2)?;
    let theta2_safe = g.add_scalar(theta2, 1e-24);
    let theta = g.sqrt(theta2_safe)?;
    let inv_theta = g.recip(theta, 1e-300);
    let k: Vec<Var> = aa
        .iter()
        .map(|a| g.mul(*a, inv_theta))
        .collect::<std::result::Result<_, _>>()?;
    let cos_t = g.cos(theta);
    let sin_t = g.sin(theta);
    let neg_cos = g.scalar_mul(cos_t, -1.0);
    let one_minus_cos = g.add_scalar(neg_cos, 1.0);

    // k x v (k's n x 1 columns broadcast across v's width).
    let kyvz = g.mul(v[2], k[1])?;
    let kzvy = g.mul(v[1], k[2])?;
    let cross_x = g.sub(kyvz, kzvy)?;
    let kzvx = g.mul(v[0], k[2])?;
    let kxvz = g.mul(v[2], k[0])?;
    let cross_y = g.sub(kzvx, kxvz)?;
    let kxvy = g.mul(v[1], k[0])?;
    let kyvx = g.mul(v[0], k[1])?;
    let cross_z = g.sub(kxvy, kyvx)?;
    let cross = [cross_x, cross_y, cross_z];

    // k . v
    let dx = g.mul(v[0], k[0])?;
    let dy = g.mul(v[1], k[1])?;
    let dz = g.mul(v[2], k[2])?;
    let dxy = g.add(dx, dy)?;
    let dot = g.add(dxy, dz)?;

    let mut out = Vec::with_capacity(3);
    for c in 0..3 {
        let vcos = g.mul(v[c], cos_t)?;
        let csin = g.mul(cross[c], sin_t)?;
        let kdot = g.mul(dot, k[c])?;
        let kterm = g.mul(kdot, one_minus_cos)?;
        let ab = g.add(vcos, csin)?;
        out.push(g.add(ab, kterm)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Differentiable augmentation of a batch: the same angle -> length ->
/// rigid order as [`augment_pair`], built from generator output columns
/// so gradients reach the generator parameters.
///
/// `source_comps` are the per-component `n x 16` source joints (constant
/// leaves). Source poses must be root-relative with non-degenerate
/// bones.
pub fn augment_batch_graph(
    g: &mut Graph,
    source_comps: &[Var; 3],
    gen: &GeneratorVars,
    tree: &KinematicTree,
) -> Result<AugmentGraph> {
    // Degeneracy check on the source values.
    {
        let n = g.shape(source_comps[0]).0;
        for i in 0..n {
            for k in 0..NUM_BONES {
                let (parent, child) = tree.bone(k);
                let mut len2 = 0.0;
                for comp in source_comps {
                    let m = g.value(*comp);
                    let d = m[[i, child.code()]] - m[[i, parent.code()]];
                    len2 += d * d;
                }
                if len2.sqrt() < MIN_SOURCE_BONE_MM {
                    return Err(AugmentError::DegenerateBone {
                        bone: k,
                        length: len2.sqrt(),
                    });
                }
            }
        }
    }

    let bones = bone_components(g, source_comps)?;

    // Per-bone rotation and length scale.
    let mut new_bones: Vec<[Var; 3]> = Vec::with_capacity(NUM_BONES);
    for k in 0..NUM_BONES {
        let v = [
            g.slice_cols(bones[0], k, k + 1)?,
            g.slice_cols(bones[1], k, k + 1)?,
            g.slice_cols(bones[2], k, k + 1)?,
        ];
        let aa = [
            g.slice_cols(gen.bone_angle, 3 * k, 3 * k + 1)?,
            g.slice_cols(gen.bone_angle, 3 * k + 1, 3 * k + 2)?,
            g.slice_cols(gen.bone_angle, 3 * k + 2, 3 * k + 3)?,
        ];
        let rotated = rodrigues_graph(g, &aa, &v)?;
        let ls = g.slice_cols(gen.log_scale, k, k + 1)?;
        let scale = g.exp(ls);
        let scaled = [
            g.mul(rotated[0], scale)?,
            g.mul(rotated[1], scale)?,
            g.mul(rotated[2], scale)?,
        ];
        new_bones.push(scaled);
    }

    // Forward kinematics from the root (origin for root-relative input).
    let n = g.shape(source_comps[0]).0;
    let zero = g.leaf(Array2::zeros((n, 1)));
    let mut joints: Vec<[Var; 3]> = vec![[zero, zero, zero]; NUM_JOINTS];
    for k in 0..NUM_BONES {
        let (parent, child) = tree.bone(k);
        let p = joints[parent.code()];
        let mut j = [zero, zero, zero];
        for (c, slot) in j.iter_mut().enumerate() {
            *slot = g.add(p[c], new_bones[k][c])?;
        }
        joints[child.code()] = j;
    }

    // Rigid rotation about the root, one axis-angle per sample.
    let aa = [
        g.slice_cols(gen.rigid_rot, 0, 1)?,
        g.slice_cols(gen.rigid_rot, 1, 2)?,
        g.slice_cols(gen.rigid_rot, 2, 3)?,
    ];
    let mut comp_cols: Vec<Vec<Var>> = vec![Vec::with_capacity(NUM_JOINTS); 3];
    for joint in &joints {
        let rotated = rodrigues_graph(g, &aa, joint)?;
        for c in 0..3 {
            comp_cols[c].push(rotated[c]);
        }
    }
    let comps = [
        g.concat_cols(&comp_cols[0])?,
        g.concat_cols(&comp_cols[1])?,
        g.concat_cols(&comp_cols[2])?,
    ];
    Ok(AugmentGraph {
        comps,
        offset: [gen.t_x, gen.t_y, gen.t_z],
    })
}
