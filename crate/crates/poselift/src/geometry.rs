//! Pinhole camera model, perspective projection, rigid transforms and
//! Procrustes alignment.
//!
//! All functions here are pure; the differentiable projection used by
//! training losses lives in [`crate::losses`] and is cross-checked
//! against [`project`] in tests.

use ndarray::{array, Array2};
use thiserror::Error;

use crate::skeleton::{Pose2D, Pose3D, NUM_JOINTS};

/// Minimum admissible joint depth (z + t_z), in millimeters.
pub const EPS_DEPTH_MM: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("joint {joint} is behind the camera (depth {depth} mm <= {EPS_DEPTH_MM} mm)")]
    BehindCamera { joint: usize, depth: f64 },
    #[error("invalid camera intrinsics: focal lengths must be positive and finite")]
    InvalidIntrinsics,
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("degenerate joint configuration: {0}")]
    DegenerateConfiguration(String),
}

/// Pinhole intrinsics. In the normalized-coordinate convention the focal
/// lengths are unitless scales; in the pixel convention they are pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub f_x: f64,
    pub f_y: f64,
    pub c_x: f64,
    pub c_y: f64,
}

impl CameraIntrinsics {
    pub fn new(f_x: f64, f_y: f64, c_x: f64, c_y: f64) -> Result<Self, GeometryError> {
        let k = CameraIntrinsics { f_x, f_y, c_x, c_y };
        if !(f_x > 0.0 && f_y > 0.0)
            || ![f_x, f_y, c_x, c_y].iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(k)
    }
}

/// 3D root offset placing a root-relative pose into camera space (mm).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Offset3D {
    pub t_x: f64,
    pub t_y: f64,
    pub t_z: f64,
}

impl Offset3D {
    pub fn new(t_x: f64, t_y: f64, t_z: f64) -> Self {
        Offset3D { t_x, t_y, t_z }
    }
}

/// Rotation + translation. The rotation must be a proper orthonormal
/// matrix (R^T R = I, det R = +1, both within 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    rotation: Array2<f64>,
    translation: [f64; 3],
}

impl RigidTransform {
    pub fn new(rotation: Array2<f64>, translation: [f64; 3]) -> Result<Self, GeometryError> {
        if rotation.nrows() != 3 || rotation.ncols() != 3 {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation must be 3x3, got {}x{}",
                rotation.nrows(),
                rotation.ncols()
            )));
        }
        let rtr = rotation.t().dot(&rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr[[i, j]] - expect).abs() > 1e-9 {
                    return Err(GeometryError::InvalidTransform(
                        "R^T R deviates from identity beyond 1e-9".into(),
                    ));
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidTransform(format!(
                "det(R) = {det}, expected +1"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Array2::eye(3),
            translation: [0.0; 3],
        }
    }

    pub fn from_axis_angle(axis_angle: &[f64; 3], translation: [f64; 3]) -> Self {
        RigidTransform {
            rotation: rotation_from_axis_angle(axis_angle),
            translation,
        }
    }

    pub fn rotation(&self) -> &Array2<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }
}

fn det3(m: &Array2<f64>) -> f64 {
    m[[0, 0]] * (m[[1, 1]] * m[[2, 2]] - m[[1, 2]] * m[[2, 1]])
        - m[[0, 1]] * (m[[1, 0]] * m[[2, 2]] - m[[1, 2]] * m[[2, 0]])
        + m[[0, 2]] * (m[[1, 0]] * m[[2, 1]] - m[[1, 1]] * m[[2, 0]])
}

/// Rodrigues' formula. The zero vector maps to the identity.
pub fn rotation_from_axis_angle(axis_angle: &[f64; 3]) -> Array2<f64> {
    let theta = (axis_angle[0] * axis_angle[0]
        + axis_angle[1] * axis_angle[1]
        + axis_angle[2] * axis_angle[2])
        .sqrt();
    if theta < 1e-300 {
        return Array2::eye(3);
    }
    let (kx, ky, kz) = (
        axis_angle[0] / theta,
        axis_angle[1] / theta,
        axis_angle[2] / theta,
    );
    let cross = array![[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]];
    let eye: Array2<f64> = Array2::eye(3);
    &eye + &(&cross * theta.sin()) + &cross.dot(&cross) * (1.0 - theta.cos())
}

/// Full pinhole projection with perspective division:
/// `u = f_x (x + t_x) / (z + t_z) + c_x`, likewise for `v`.
///
/// Every joint must satisfy `z + t_z > EPS_DEPTH_MM`.
pub fn project(
    pose: &Pose3D,
    intrinsics: &CameraIntrinsics,
    offset: &Offset3D,
) -> Result<Pose2D, GeometryError> {
    let c = pose.coords();
    let mut out = Array2::zeros((NUM_JOINTS, 2));
    for j in 0..NUM_JOINTS {
        let depth = c[[j, 2]] + offset.t_z;
        if !(depth > EPS_DEPTH_MM) {
            return Err(GeometryError::BehindCamera { joint: j, depth });
        }
        out[[j, 0]] = intrinsics.f_x * (c[[j, 0]] + offset.t_x) / depth + intrinsics.c_x;
        out[[j, 1]] = intrinsics.f_y * (c[[j, 1]] + offset.t_y) / depth + intrinsics.c_y;
    }
    Pose2D::new(out).map_err(|_| GeometryError::DegenerateConfiguration("projection produced non-finite coordinates".into()))
}

/// `coords' = R coords + t` per joint. No re-rooting is applied.
pub fn apply_rigid(pose: &Pose3D, transform: &RigidTransform) -> Pose3D {
    let rotated = pose.coords().dot(&transform.rotation.t());
    let mut out = rotated;
    let t = transform.translation;
    for mut row in out.rows_mut() {
        row[0] += t[0];
        row[1] += t[1];
        row[2] += t[2];
    }
    Pose3D::new(out).expect("rigid transform of a finite pose is finite")
}

/// Similarity parameters found by [`procrustes_align`].
#[derive(Debug, Clone)]
pub struct SimilarityParams {
    pub scale: f64,
    pub rotation: Array2<f64>,
    pub translation: [f64; 3],
}

/// Least-squares alignment of `pred` onto `gt` over scale, rotation and
/// translation (Umeyama). Returns the aligned pose and the similarity
/// parameters minimizing `sum_j ||s R pred_j + t - gt_j||^2`.
pub fn procrustes_align(
    pred: &Pose3D,
    gt: &Pose3D,
) -> Result<(Pose3D, SimilarityParams), GeometryError> {
    let p = pred.coords();
    let g = gt.coords();
    let n = NUM_JOINTS as f64;

    let mu_p: Vec<f64> = (0..3).map(|c| p.column(c).sum() / n).collect();
    let mu_g: Vec<f64> = (0..3).map(|c| g.column(c).sum() / n).collect();

    let mut var_p = 0.0;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for j in 0..NUM_JOINTS {
        let dp = [p[[j, 0]] - mu_p[0], p[[j, 1]] - mu_p[1], p[[j, 2]] - mu_p[2]];
        let dg = [g[[j, 0]] - mu_g[0], g[[j, 1]] - mu_g[1], g[[j, 2]] - mu_g[2]];
        var_p += dp.iter().map(|v| v * v).sum::<f64>();
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += dg[r] * dp[c];
            }
        }
    }
    var_p /= n;
    cov /= n;

    if var_p < 1e-12 {
        return Err(GeometryError::DegenerateConfiguration(
            "prediction joints are coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| {
        GeometryError::DegenerateConfiguration("SVD failed on cross-covariance".into())
    })?;
    let v_t = svd.v_t.ok_or_else(|| {
        GeometryError::DegenerateConfiguration("SVD failed on cross-covariance".into())
    })?;
    let sing = svd.singular_values;
    if sing[1] <= 1e-12 * sing[0].max(1e-300) {
        return Err(GeometryError::DegenerateConfiguration(
            "cross-covariance rank < 2 (collinear or coincident joints)".into(),
        ));
    }

    // Reflection correction: flip the smallest singular direction if needed.
    let mut d = nalgebra::Matrix3::<f64>::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r_na = u * d * v_t;
    let scale = (sing[0] * d[(0, 0)] + sing[1] * d[(1, 1)] + sing[2] * d[(2, 2)]) / var_p;

    let mut rotation = Array2::zeros((3, 3));
    for r in 0..3 {
        for c in 0..3 {
            rotation[[r, c]] = r_na[(r, c)];
        }
    }
    let translation = [
        mu_g[0] - scale * (rotation[[0, 0]] * mu_p[0] + rotation[[0, 1]] * mu_p[1] + rotation[[0, 2]] * mu_p[2]),
        mu_g[1] - scale * (rotation[[1, 0]] * mu_p[0] + rotation[[1, 1]] * mu_p[1] + rotation[[1, 2]] * mu_p[2]),
        mu_g[2] - scale * (rotation[[2, 0]] * mu_p[0] + rotation[[2, 1]] * mu_p[1] + rotation[[2, 2]] * mu_p[2]),
    ];

    let mut aligned = p.dot(&rotation.t()) * scale;
    for mut row in aligned.rows_mut() {
        row[0] += translation[0];
        row[1] += translation[1];
        row[2] += translation[2];
    }
    Ok((
        Pose3D::new(aligned).expect("aligned pose is finite"),
        SimilarityParams {
            scale,
            rotation,
            translation,
        },
    ))
}

/// Sum of squared per-joint distances between two poses.
pub fn squared_residual(a: &Pose3D, b: &Pose3D) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}
