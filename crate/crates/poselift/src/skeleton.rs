//! Canonical 16-joint human skeleton, kinematic tree, joint-format
//! conversion, coordinate normalization and the Kinematic Chain Space
//! (KCS) representation.
//!
//! Joint names and integer codes are part of the serialized dataset
//! format and must never be reordered across versions.

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

/// Number of joints in the canonical skeleton.
pub const NUM_JOINTS: usize = 16;
/// Number of bones (every non-root joint has exactly one parent).
pub const NUM_BONES: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("missing required joints: {0:?}")]
    MissingRequiredJoints(Vec<&'static str>),
    #[error("invalid image dimensions {width}x{height}")]
    InvalidImageDims { width: f64, height: f64 },
    #[error("pose shape must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    BadShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("pose contains non-finite coordinates at joint {0}")]
    NonFinite(usize),
    #[error("unknown source scheme '{0}'")]
    UnknownScheme(String),
}

/// The 16 joints, pelvis-rooted. Codes 0..15 are stable and serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum JointId {
    Pelvis = 0,
    RHip = 1,
    RKnee = 2,
    RAnkle = 3,
    LHip = 4,
    LKnee = 5,
    LAnkle = 6,
    Spine = 7,
    Neck = 8,
    Head = 9,
    LShoulder = 10,
    LElbow = 11,
    LWrist = 12,
    RShoulder = 13,
    RElbow = 14,
    RWrist = 15,
}

impl JointId {
    pub const ALL: [JointId; NUM_JOINTS] = [
        JointId::Pelvis,
        JointId::RHip,
        JointId::RKnee,
        JointId::RAnkle,
        JointId::LHip,
        JointId::LKnee,
        JointId::LAnkle,
        JointId::Spine,
        JointId::Neck,
        JointId::Head,
        JointId::LShoulder,
        JointId::LElbow,
        JointId::LWrist,
        JointId::RShoulder,
        JointId::RElbow,
        JointId::RWrist,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<JointId> {
        JointId::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::Pelvis => "pelvis",
            JointId::RHip => "r_hip",
            JointId::RKnee => "r_knee",
            JointId::RAnkle => "r_ankle",
            JointId::LHip => "l_hip",
            JointId::LKnee => "l_knee",
            JointId::LAnkle => "l_ankle",
            JointId::Spine => "spine",
            JointId::Neck => "neck",
            JointId::Head => "head",
            JointId::LShoulder => "l_shoulder",
            JointId::LElbow => "l_elbow",
            JointId::LWrist => "l_wrist",
            JointId::RShoulder => "r_shoulder",
            JointId::RElbow => "r_elbow",
            JointId::RWrist => "r_wrist",
        }
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Body-part groups for the part-aware KCS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BodyPart {
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [
        BodyPart::Torso,
        BodyPart::RightLeg,
        BodyPart::LeftLeg,
        BodyPart::LeftArm,
        BodyPart::RightArm,
    ];
}

/// The kinematic tree: a parent per non-root joint, bones indexed 0..14
/// in child-joint-code order (bone k has child joint code k+1), and one
/// part label per bone.
#[derive(Debug, Clone)]
pub struct KinematicTree {
    parent: [JointId; NUM_BONES],
    part: [BodyPart; NUM_BONES],
}

impl Default for KinematicTree {
    fn default() -> Self {
        Self::new()
    }
}

impl KinematicTree {
    pub fn new() -> Self {
        use JointId::*;
        // parent[k] is the parent of the joint with code k+1.
        let parent = [
            Pelvis,    // RHip
            RHip,      // RKnee
            RKnee,     // RAnkle
            Pelvis,    // LHip
            LHip,      // LKnee
            LKnee,     // LAnkle
            Pelvis,    // Spine
            Spine,     // Neck
            Neck,      // Head
            Neck,      // LShoulder
            LShoulder, // LElbow
            LElbow,    // LWrist
            Neck,      // RShoulder
            RShoulder, // RElbow
            RElbow,    // RWrist
        ];
        use BodyPart::*;
        let part = [
            Torso,    // Pelvis->RHip
            RightLeg, // RHip->RKnee
            RightLeg, // RKnee->RAnkle
            Torso,    // Pelvis->LHip
            LeftLeg,  // LHip->LKnee
            LeftLeg,  // LKnee->LAnkle
            Torso,    // Pelvis->Spine
            Torso,    // Spine->Neck
            Torso,    // Neck->Head
            Torso,    // Neck->LShoulder
            LeftArm,  // LShoulder->LElbow
            LeftArm,  // LElbow->LWrist
            Torso,    // Neck->RShoulder
            RightArm, // RShoulder->RElbow
            RightArm, // RElbow->RWrist
        ];
        KinematicTree { parent, part }
    }

    /// Parent joint of `joint`; `None` for the pelvis root.
    pub fn parent(&self, joint: JointId) -> Option<JointId> {
        if joint == JointId::Pelvis {
            None
        } else {
            Some(self.parent[joint.code() - 1])
        }
    }

    /// Bone `k` as (parent, child). Bones are ordered so that a parent's
    /// bone always precedes its children's bones.
    pub fn bone(&self, k: usize) -> (JointId, JointId) {
        (self.parent[k], JointId::ALL[k + 1])
    }

    pub fn bone_part(&self, k: usize) -> BodyPart {
        self.part[k]
    }

    /// Bone indices belonging to `part`, in bone order.
    pub fn part_bones(&self, part: BodyPart) -> Vec<usize> {
        (0..NUM_BONES).filter(|&k| self.part[k] == part).collect()
    }
}

fn validate_coords(coords: &Array2<f64>, cols: usize) -> Result<(), SkeletonError> {
    if coords.nrows() != NUM_JOINTS || coords.ncols() != cols {
        return Err(SkeletonError::BadShape {
            expected_rows: NUM_JOINTS,
            expected_cols: cols,
            rows: coords.nrows(),
            cols: coords.ncols(),
        });
    }
    for (j, row) in coords.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SkeletonError::NonFinite(j));
        }
    }
    Ok(())
}

/// 16x2 keypoints in normalized image coordinates, nominally in (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    coords: Array2<f64>,
}

impl Pose2D {
    pub fn new(coords: Array2<f64>) -> Result<Self, SkeletonError> {
        validate_coords(&coords, 2)?;
        Ok(Pose2D { coords })
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn joint(&self, j: JointId) -> [f64; 2] {
        let r = self.coords.row(j.code());
        [r[0], r[1]]
    }
}

/// 16x3 joints in millimeters, camera coordinate system. Root-relative
/// poses keep the pelvis row at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    coords: Array2<f64>,
}

impl Pose3D {
    pub fn new(coords: Array2<f64>) -> Result<Self, SkeletonError> {
        validate_coords(&coords, 3)?;
        Ok(Pose3D { coords })
    }

    pub fn coords(&self) -> &Array2<f64> {
        &self.coords
    }

    pub fn joint(&self, j: JointId) -> [f64; 3] {
        let r = self.coords.row(j.code());
        [r[0], r[1], r[2]]
    }

    /// Subtract the pelvis row from every joint.
    pub fn to_root_relative(&self) -> Pose3D {
        let root = self.coords.row(0).to_owned();
        let mut c = self.coords.clone();
        for mut row in c.rows_mut() {
            row -= &root;
        }
        Pose3D { coords: c }
    }

    pub fn is_root_relative(&self, tol: f64) -> bool {
        self.coords.row(0).iter().all(|v| v.abs() <= tol)
    }
}

/// Bone matrix: row `k` is child minus parent coordinates for bone `k`.
/// Works for 2D and 3D poses alike, hence the raw-view signature.
pub fn bone_vectors(coords: ArrayView2<'_, f64>, tree: &KinematicTree) -> Array2<f64> {
    let d = coords.ncols();
    let mut bones = Array2::zeros((NUM_BONES, d));
    for k in 0..NUM_BONES {
        let (parent, child) = tree.bone(k);
        for c in 0..d {
            bones[[k, c]] = coords[[child.code(), c]] - coords[[parent.code(), c]];
        }
    }
    bones
}

/// Per-bone Euclidean lengths.
pub fn bone_lengths(coords: ArrayView2<'_, f64>, tree: &KinematicTree) -> Vec<f64> {
    bone_vectors(coords, tree)
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Gram matrix of bone vectors (15x15). The diagonal holds squared bone
/// lengths; off-diagonal entries encode inter-bone angles. Invariant
/// under global rotation and translation of the pose.
#[derive(Debug, Clone)]
pub struct KcsMatrix {
    full: Array2<f64>,
}

impl KcsMatrix {
    pub fn full(&self) -> &Array2<f64> {
        &self.full
    }

    /// Square sub-matrix over the bones of `part`, in bone order.
    pub fn part_block(&self, part: BodyPart, tree: &KinematicTree) -> Array2<f64> {
        let idx = tree.part_bones(part);
        let mut block = Array2::zeros((idx.len(), idx.len()));
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                block[[a, b]] = self.full[[i, j]];
            }
        }
        block
    }

    /// All five part blocks flattened row-major and concatenated in
    /// `BodyPart::ALL` order (49 + 4 + 4 + 4 + 4 = 65 values).
    pub fn part_features(&self, tree: &KinematicTree) -> Vec<f64> {
        let mut out = Vec::with_capacity(65);
        for part in BodyPart::ALL {
            out.extend(self.part_block(part, tree).iter().copied());
        }
        out
    }

    /// Largest relative asymmetry |K - K^T| / max|K|.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.full.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for i in 0..NUM_BONES {
            for j in 0..NUM_BONES {
                worst = worst.max((self.full[[i, j]] - self.full[[j, i]]).abs());
            }
        }
        worst / scale
    }

    /// Eigenvalues of the symmetrized matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut m = nalgebra::DMatrix::zeros(NUM_BONES, NUM_BONES);
        for i in 0..NUM_BONES {
            for j in 0..NUM_BONES {
                m[(i, j)] = 0.5 * (self.full[[i, j]] + self.full[[j, i]]);
            }
        }
        let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eig
    }
}

/// KCS of a pose: `B B^T` with bones as rows of `B`.
pub fn kcs(coords: ArrayView2<'_, f64>, tree: &KinematicTree) -> KcsMatrix {
    let bones = bone_vectors(coords, tree);
    let full = bones.dot(&bones.t());
    KcsMatrix { full }
}

/// Source joint-labeling schemes understood by [`convert_external_joints`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceScheme {
    /// Already in the canonical 16-joint format (names as `JointId::name`).
    Canonical16,
    /// 17-keypoint COCO labeling (`left_hip`, `right_shoulder`, ...).
    Coco17,
}

impl SourceScheme {
    pub fn parse(tag: &str) -> Result<SourceScheme, SkeletonError> {
        match tag {
            "canonical16" => Ok(SourceScheme::Canonical16),
            "coco17" => Ok(SourceScheme::Coco17),
            other => Err(SkeletonError::UnknownScheme(other.to_string())),
        }
    }
}

/// Converted pose plus a per-joint validity mask. Masked-out joints hold
/// (0, 0) and must not be consumed downstream.
#[derive(Debug, Clone)]
pub struct ConvertedPose {
    pub pose: Pose2D,
    pub valid: [bool; NUM_JOINTS],
}

/// Map a named 2D keypoint set from a source labeling scheme into the
/// canonical skeleton.
///
/// Interpolation table (applied only when the target joint is absent
/// from the source):
/// - pelvis  = midpoint(l_hip, r_hip)
/// - neck    = midpoint(l_shoulder, r_shoulder)
/// - spine   = midpoint(pelvis, neck)
///
/// Joints that are absent and not interpolable are masked invalid.
/// Extra source joints are discarded. Both hips and both shoulders are
/// required.
pub fn convert_external_joints(
    joints: &HashMap<String, [f64; 2]>,
    scheme: SourceScheme,
) -> Result<ConvertedPose, SkeletonError> {
    // Resolve source names to canonical names first.
    let canonical: HashMap<&'static str, [f64; 2]> = match scheme {
        SourceScheme::Canonical16 => JointId::ALL
            .iter()
            .filter_map(|j| joints.get(j.name()).map(|p| (j.name(), *p)))
            .collect(),
        SourceScheme::Coco17 => {
            const TABLE: [(&str, &str); 12] = [
                ("left_hip", "l_hip"),
                ("right_hip", "r_hip"),
                ("left_knee", "l_knee"),
                ("right_knee", "r_knee"),
                ("left_ankle", "l_ankle"),
                ("right_ankle", "r_ankle"),
                ("left_shoulder", "l_shoulder"),
                ("right_shoulder", "r_shoulder"),
                ("left_elbow", "l_elbow"),
                ("right_elbow", "r_elbow"),
                ("left_wrist", "l_wrist"),
                ("right_wrist", "r_wrist"),
            ];
            TABLE
                .iter()
                .filter_map(|(src, dst)| joints.get(*src).map(|p| (*dst, *p)))
                .collect()
        }
    };

    let mut missing = Vec::new();
    for required in ["l_hip", "r_hip", "l_shoulder", "r_shoulder"] {
        if !canonical.contains_key(required) {
            missing.push(required);
        }
    }
    if !missing.is_empty() {
        return Err(SkeletonError::MissingRequiredJoints(missing));
    }

    let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];

    let mut coords = Array2::zeros((NUM_JOINTS, 2));
    let mut valid = [false; NUM_JOINTS];
    let set = |coords: &mut Array2<f64>, valid: &mut [bool; NUM_JOINTS], j: JointId, p: [f64; 2]| {
        coords[[j.code(), 0]] = p[0];
        coords[[j.code(), 1]] = p[1];
        valid[j.code()] = true;
    };

    for j in JointId::ALL {
        if let Some(&p) = canonical.get(j.name()) {
            set(&mut coords, &mut valid, j, p);
        }
    }
    if !valid[JointId::Pelvis.code()] {
        let p = mid(canonical["l_hip"], canonical["r_hip"]);
        set(&mut coords, &mut valid, JointId::Pelvis, p);
    }
    if !valid[JointId::Neck.code()] {
        let p = mid(canonical["l_shoulder"], canonical["r_shoulder"]);
        set(&mut coords, &mut valid, JointId::Neck, p);
    }
    if !valid[JointId::Spine.code()] {
        let pelvis = [
            coords[[JointId::Pelvis.code(), 0]],
            coords[[JointId::Pelvis.code(), 1]],
        ];
        let neck = [
            coords[[JointId::Neck.code(), 0]],
            coords[[JointId::Neck.code(), 1]],
        ];
        set(&mut coords, &mut valid, JointId::Spine, mid(pelvis, neck));
    }

    Ok(ConvertedPose {
        pose: Pose2D::new(coords)?,
        valid,
    })
}

/// Map pixel coordinates into (-1, 1): `u' = 2u/width - 1`.
pub fn normalize_2d(
    pixels: ArrayView2<'_, f64>,
    width: f64,
    height: f64,
) -> Result<Pose2D, SkeletonError> {
    if !(width > 0.0) || !(height > 0.0) {
        return Err(SkeletonError::InvalidImageDims { width, height });
    }
    let mut coords = Array2::zeros((NUM_JOINTS, 2));
    for j in 0..NUM_JOINTS {
        coords[[j, 0]] = 2.0 * pixels[[j, 0]] / width - 1.0;
        coords[[j, 1]] = 2.0 * pixels[[j, 1]] / height - 1.0;
    }
    Pose2D::new(coords)
}

/// Inverse of [`normalize_2d`].
pub fn denormalize_2d(
    pose: &Pose2D,
    width: f64,
    height: f64,
) -> Result<Array2<f64>, SkeletonError> {
    if !(width > 0.0) || !(height > 0.0) {
        return Err(SkeletonError::InvalidImageDims { width, height });
    }
    let c = pose.coords();
    let mut px = Array2::zeros((NUM_JOINTS, 2));
    for j in 0..NUM_JOINTS {
        px[[j, 0]] = (c[[j, 0]] + 1.0) * width / 2.0;
        px[[j, 1]] = (c[[j, 1]] + 1.0) * height / 2.0;
    }
    Ok(px)
}
