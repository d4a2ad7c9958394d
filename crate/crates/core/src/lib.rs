//! Gesture imitation engine.
//!
//! Skeleton frames are normalized against the spine shoulder and spine
//! length, encoded as points on a product of spheres (bone directions) or a
//! Euclidean space (relative positions), and modelled with a Gaussian mixture
//! over `time × pose`. The mixture generates a reference gesture by Gaussian
//! mixture regression and scores imitation attempts by their log-likelihood.
//! [`session`] runs the staged game protocol on top.

// Negated comparisons below are NaN guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod gmm;
pub mod ingestion;
pub mod manifold;
pub mod scoring;
pub mod session;
pub mod skeleton;
pub mod synthetic;

pub use gmm::{
    fit_em, fit_em_traced, generate_trajectory, gmr_condition, GmmError, GmmModel, GmrResult, PoseSequence, TimedPose, TrainingConfig,
    TrajectoryPoint,
};
pub use ingestion::{decode_frame_line, encode_frame, prepare_sequence, CoverageReport, IngestError};
pub use manifold::{Manifold, ManifoldError, ManifoldSpec, Point, Tangent};
pub use scoring::{calibrate, score_sequence, Calibration, ScoreError, ScoreReport, Verdict};
pub use skeleton::{encode_pose, normalize_frame, Body14Frame, BodyPart, Dimension, Keypoint, NormalizedPose, PoseEncoding, PoseError};
