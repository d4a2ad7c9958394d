//! The 14-part body model, pose normalization and pose encodings.
//!
//! 2D input uses image coordinates as emitted by pose estimators (y grows
//! downwards); nothing here flips the axis.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{Manifold, ManifoldSpec, Point};

/// Confidence at or above which a present keypoint counts as detected.
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.1;

/// Relative size (against the frame's extent) below which the spine or a
/// bone is considered degenerate.
const DEGENERATE_RATIO: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("required keypoint {0:?} is not detected")]
    MissingKeypoint(BodyPart),
    #[error("spine length is degenerate")]
    DegenerateSpine,
    #[error("bone {0:?}->{1:?} has zero length")]
    DegenerateBone(BodyPart, BodyPart),
    #[error("dimension mismatch: pose is {found}D, encoding expects {expected}D")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Head,
    SpineShoulder,
    RShoulder,
    RElbow,
    RWrist,
    LShoulder,
    LElbow,
    LWrist,
    RHip,
    RKnee,
    RAnkle,
    LHip,
    LKnee,
    LAnkle,
}

impl BodyPart {
    pub const COUNT: usize = 14;

    pub const ALL: [BodyPart; 14] = [
        BodyPart::Head,
        BodyPart::SpineShoulder,
        BodyPart::RShoulder,
        BodyPart::RElbow,
        BodyPart::RWrist,
        BodyPart::LShoulder,
        BodyPart::LElbow,
        BodyPart::LWrist,
        BodyPart::RHip,
        BodyPart::RKnee,
        BodyPart::RAnkle,
        BodyPart::LHip,
        BodyPart::LKnee,
        BodyPart::LAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Parent→child edges of the skeleton tree, rooted at the spine shoulder.
/// The order here is the factor order of the direction encoding.
pub const BONES: [(BodyPart, BodyPart); 13] = {
    use BodyPart::*;
    [
        (SpineShoulder, Head),
        (SpineShoulder, RShoulder),
        (SpineShoulder, LShoulder),
        (SpineShoulder, RHip),
        (SpineShoulder, LHip),
        (RShoulder, RElbow),
        (RElbow, RWrist),
        (LShoulder, LElbow),
        (LElbow, LWrist),
        (RHip, RKnee),
        (RKnee, RAnkle),
        (LHip, LKnee),
        (LKnee, LAnkle),
    ]
};

pub fn parent(part: BodyPart) -> Option<BodyPart> {
    BONES.iter().find(|(_, c)| *c == part).map(|(p, _)| *p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dimension {
    Two,
    Three,
}

impl Dimension {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            Dimension::Two => 2,
            Dimension::Three => 3,
        }
    }
}

impl TryFrom<u8> for Dimension {
    type Error = String;

    fn try_from(d: u8) -> Result<Self, Self::Error> {
        match d {
            2 => Ok(Dimension::Two),
            3 => Ok(Dimension::Three),
            other => Err(format!("unsupported keypoint dimension {other}")),
        }
    }
}

impl From<Dimension> for u8 {
    fn from(d: Dimension) -> u8 {
        d.len() as u8
    }
}

/// One estimated joint. In 2D frames the third coordinate is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: [f64; 3],
    pub confidence: f64,
}

impl Keypoint {
    pub fn new2(x: f64, y: f64, confidence: f64) -> Self {
        Self {
            position: [x, y, 0.0],
            confidence,
        }
    }

    pub fn new3(x: f64, y: f64, z: f64, confidence: f64) -> Self {
        Self {
            position: [x, y, z],
            confidence,
        }
    }
}

/// A timestamped skeleton observation indexed by [`BodyPart`] ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct Body14Frame {
    pub timestamp: f64,
    pub dimension: Dimension,
    pub keypoints: [Option<Keypoint>; 14],
}

impl Body14Frame {
    pub fn empty(timestamp: f64, dimension: Dimension) -> Self {
        Self {
            timestamp,
            dimension,
            keypoints: [None; 14],
        }
    }

    pub fn get(&self, part: BodyPart) -> Option<&Keypoint> {
        self.keypoints[part.index()].as_ref()
    }

    pub fn set(&mut self, part: BodyPart, keypoint: Option<Keypoint>) {
        self.keypoints[part.index()] = keypoint;
    }

    pub fn is_detected(&self, part: BodyPart, threshold: f64) -> bool {
        self.get(part).is_some_and(|k| k.confidence >= threshold)
    }

    pub fn detected_count(&self, threshold: f64) -> usize {
        BodyPart::ALL.iter().filter(|p| self.is_detected(**p, threshold)).count()
    }
}

/// A pose expressed relative to the spine shoulder and scaled by the spine
/// length. Vectors are stored flat, `dimension.len()` entries each.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPose {
    pub timestamp: f64,
    pub dimension: Dimension,
    pub spine_length: f64,
    /// One vector per body part except the spine shoulder, in ordinal order.
    pub relative_positions: Vec<f64>,
    /// One unit vector per entry of [`BONES`].
    pub bone_directions: Vec<f64>,
}

impl NormalizedPose {
    /// Relative position of `part`; the spine shoulder is the origin.
    pub fn relative_position(&self, part: BodyPart) -> Vec<f64> {
        let d = self.dimension.len();
        match part {
            BodyPart::SpineShoulder => vec![0.0; d],
            _ => {
                let slot = if part.index() > BodyPart::SpineShoulder.index() {
                    part.index() - 1
                } else {
                    part.index()
                };
                self.relative_positions[slot * d..(slot + 1) * d].to_vec()
            }
        }
    }

    pub fn bone_direction(&self, bone: usize) -> &[f64] {
        let d = self.dimension.len();
        &self.bone_directions[bone * d..(bone + 1) * d]
    }
}

pub fn normalize_frame(frame: &Body14Frame) -> Result<NormalizedPose, PoseError> {
    normalize_frame_with_threshold(frame, DEFAULT_DETECTION_THRESHOLD)
}

pub fn normalize_frame_with_threshold(frame: &Body14Frame, threshold: f64) -> Result<NormalizedPose, PoseError> {
    use BodyPart::*;
    let d = frame.dimension.len();
    let required = [SpineShoulder, RHip, LHip].into_iter().chain(BodyPart::ALL);
    for part in required {
        if !frame.is_detected(part, threshold) {
            return Err(PoseError::MissingKeypoint(part));
        }
    }
    let pos = |p: BodyPart| -> [f64; 3] { frame.keypoints[p.index()].expect("checked above").position };

    let mut scale = 0.0f64;
    for axis in 0..d {
        let (lo, hi) = BodyPart::ALL.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let x = pos(*p)[axis];
            (lo.min(x), hi.max(x))
        });
        scale = scale.max(hi - lo);
    }

    let origin = pos(SpineShoulder);
    let (rh, lh) = (pos(RHip), pos(LHip));
    let spine_length = (0..d).map(|i| (origin[i] - 0.5 * (rh[i] + lh[i])).powi(2)).sum::<f64>().sqrt();
    if !(spine_length > DEGENERATE_RATIO * scale) || !spine_length.is_finite() {
        return Err(PoseError::DegenerateSpine);
    }

    let mut relative_positions = Vec::with_capacity(13 * d);
    for part in BodyPart::ALL.into_iter().filter(|p| *p != SpineShoulder) {
        let p = pos(part);
        relative_positions.extend((0..d).map(|i| (p[i] - origin[i]) / spine_length));
    }

    let mut bone_directions = Vec::with_capacity(13 * d);
    for (parent, child) in BONES {
        let (a, b) = (pos(parent), pos(child));
        let delta: Vec<f64> = (0..d).map(|i| b[i] - a[i]).collect();
        let len = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(len > DEGENERATE_RATIO * scale) {
            return Err(PoseError::DegenerateBone(parent, child));
        }
        bone_directions.extend(delta.iter().map(|x| x / len));
    }

    Ok(NormalizedPose {
        timestamp: frame.timestamp,
        dimension: frame.dimension,
        spine_length,
        relative_positions,
        bone_directions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// Bone directions on a product of unit spheres.
    Directions,
    /// Relative positions as a Euclidean vector.
    Positions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoseEncoding {
    pub kind: EncodingKind,
    pub dimension: Dimension,
}

impl PoseEncoding {
    pub fn directions(dimension: Dimension) -> Self {
        Self {
            kind: EncodingKind::Directions,
            dimension,
        }
    }

    pub fn positions(dimension: Dimension) -> Self {
        Self {
            kind: EncodingKind::Positions,
            dimension,
        }
    }

    pub fn manifold_spec(&self) -> ManifoldSpec {
        let d = self.dimension.len();
        match self.kind {
            EncodingKind::Directions => ManifoldSpec::sphere_product(d - 1, BONES.len()),
            EncodingKind::Positions => ManifoldSpec::Euclidean(13 * d),
        }
    }

    pub fn manifold(&self) -> Manifold {
        Manifold::new(self.manifold_spec()).expect("encoding specs are valid")
    }
}

impl Default for PoseEncoding {
    fn default() -> Self {
        Self::directions(Dimension::Two)
    }
}

pub fn encode_pose(pose: &NormalizedPose, encoding: &PoseEncoding) -> Result<Point, PoseError> {
    if pose.dimension != encoding.dimension {
        return Err(PoseError::DimensionMismatch {
            expected: encoding.dimension.len(),
            found: pose.dimension.len(),
        });
    }
    let coords = match encoding.kind {
        EncodingKind::Directions => &pose.bone_directions,
        EncodingKind::Positions => &pose.relative_positions,
    };
    Ok(DVector::from_column_slice(coords))
}
