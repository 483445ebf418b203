//! Weakly-supervised monocular 3D human pose lifting.
//!
//! The pipeline turns noisy 2D keypoints into root-relative 3D joint
//! positions. It can train from paired 2D-3D data and, through a
//! per-sample camera parameter branch with a differentiable reprojection
//! loss, from 2D-only annotations as well. A GAN-based pose augmentor
//! (bone-angle, bone-length and rigid-transform perturbations, judged by
//! kinematic-chain-space discriminators) widens the training pose
//! distribution.
//!
//! Module map:
//! - [`skeleton`] — canonical 16-joint skeleton, kinematic tree, KCS.
//! - [`geometry`] — pinhole projection, rigid transforms, Procrustes.
//! - [`autograd`] — reverse-mode AD over dense `f64` arrays + Adam.
//! - [`nets`] — the five network heads as differentiable functions.
//! - [`losses`] — refinement, reprojection, camera, 3D and LS-GAN losses.
//! - [`augment`] — applies generator output to synthesize augmented pairs.
//! - [`data`] — dataset file format, synthetic generator, batching.
//! - [`train`] — the three-stage training procedure.
//! - [`eval`] — MPJPE / PA-MPJPE metrics and the evaluation harness.
//! - [`cli`] — command-line entry points.

pub mod augment;
pub mod autograd;
pub mod cli;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod skeleton;
pub mod train;

pub use skeleton::{JointId, KinematicTree, Pose2D, Pose3D, NUM_BONES, NUM_JOINTS};
