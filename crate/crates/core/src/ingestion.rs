//! Pose-estimator output parsing, COCO-18 → Body14 mapping, detection
//! coverage, resampling, and the line-oriented frame wire protocol.
//!
//! Wire protocol v1 is one JSON object per `\n`-terminated line:
//!
//! ```text
//! {"v":1,"t":0.033,"kp":[[12.0,34.0,0.9],null,...]}
//! ```
//!
//! with exactly 14 keypoint entries in [`BodyPart`] order, `null` for a
//! missing keypoint. 3D frames carry `"d":3` and `[x,y,z,c]` entries.
//! Numbers are written in shortest round-trip form, so `decode(encode(f))`
//! reproduces `f` bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{PoseSequence, TimedPose};
use crate::skeleton::{
    encode_pose, normalize_frame_with_threshold, Body14Frame, BodyPart, Dimension, Keypoint, PoseEncoding, DEFAULT_DETECTION_THRESHOLD,
};

pub const WIRE_VERSION: u32 = 1;
/// Longest accepted wire line, terminator excluded.
pub const MAX_LINE_BYTES: usize = 64 * 1024;
/// Frame rate assumed for estimator documents without timestamps.
pub const DEFAULT_FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DocPosition {
    LineColumn { line: usize, column: usize },
    Frame(usize),
}

impl fmt::Display for DocPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DocPosition::LineColumn { line, column } => write!(f, "line {line}, column {column}"),
            DocPosition::Frame(i) => write!(f, "frame {i}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("malformed estimator document at {position}: {reason}")]
    MalformedDocument { position: DocPosition, reason: String },
    #[error("malformed frame line: {0}")]
    MalformedLine(String),
    #[error("expected 14 keypoint entries, found {0}")]
    WrongKeypointArity(usize),
    #[error("negative timestamp")]
    NegativeTimestamp,
    #[error("sequence needs at least 2 frames")]
    TooShort,
    #[error("timestamps must be strictly increasing")]
    NonMonotoneTimestamps,
    #[error("{labels} labels given for {frames} frames")]
    LabelArityMismatch { frames: usize, labels: usize },
    #[error("line {line}: {error}")]
    AtLine { line: usize, error: Box<IngestError> },
}

/// COCO-18 keypoint order as emitted by OpenPose-style estimators.
pub const COCO18_NAMES: [&str; 18] = [
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
];

/// Body14 target of each COCO-18 slot; eyes and ears have none.
const COCO18_TO_BODY14: [Option<BodyPart>; 18] = {
    use BodyPart::*;
    [
        Some(Head),
        Some(SpineShoulder),
        Some(RShoulder),
        Some(RElbow),
        Some(RWrist),
        Some(LShoulder),
        Some(LElbow),
        Some(LWrist),
        Some(RHip),
        Some(RKnee),
        Some(RAnkle),
        Some(LHip),
        Some(LKnee),
        Some(LAnkle),
        None,
        None,
        None,
        None,
    ]
};

/// One estimator skeleton: `(x, y, confidence)` per slot, `None` when missing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coco18Frame {
    pub keypoints: [Option<[f64; 3]>; 18],
}

impl Coco18Frame {
    pub fn detected_count(&self) -> usize {
        self.keypoints.iter().flatten().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorFrame {
    pub timestamp: f64,
    pub skeleton: Coco18Frame,
}

#[derive(Deserialize)]
struct DocFrame {
    #[serde(default)]
    people: Vec<DocPerson>,
    t: Option<f64>,
}

#[derive(Deserialize)]
struct DocPerson {
    pose_keypoints_2d: Vec<f64>,
}

pub fn parse_estimator_doc(document: &str) -> Result<Vec<EstimatorFrame>, IngestError> {
    parse_estimator_doc_with_threshold(document, DEFAULT_DETECTION_THRESHOLD)
}

/// Parses an estimator JSON export. Triplets below `threshold` confidence
/// become missing. With several people in a frame the one with the most
/// detected keypoints is kept (first on ties).
pub fn parse_estimator_doc_with_threshold(document: &str, threshold: f64) -> Result<Vec<EstimatorFrame>, IngestError> {
    let frames: Vec<DocFrame> = serde_json::from_str(document).map_err(|e| IngestError::MalformedDocument {
        position: DocPosition::LineColumn {
            line: e.line(),
            column: e.column(),
        },
        reason: e.to_string(),
    })?;
    let mut out = Vec::with_capacity(frames.len());
    for (i, frame) in frames.into_iter().enumerate() {
        let mut best: Option<Coco18Frame> = None;
        for person in &frame.people {
            let flat = &person.pose_keypoints_2d;
            if flat.len() != 54 {
                return Err(IngestError::MalformedDocument {
                    position: DocPosition::Frame(i),
                    reason: format!("pose_keypoints_2d has {} values, expected 54", flat.len()),
                });
            }
            let mut skeleton = Coco18Frame::default();
            for (slot, t) in flat.chunks_exact(3).enumerate() {
                if t[2] >= threshold {
                    skeleton.keypoints[slot] = Some([t[0], t[1], t[2]]);
                }
            }
            if best.is_none_or(|b| skeleton.detected_count() > b.detected_count()) {
                best = Some(skeleton);
            }
        }
        let timestamp = match frame.t {
            Some(t) if t.is_finite() && t >= 0.0 => t,
            Some(_) => {
                return Err(IngestError::MalformedDocument {
                    position: DocPosition::Frame(i),
                    reason: "timestamp must be finite and non-negative".into(),
                })
            }
            None => i as f64 / DEFAULT_FRAME_RATE,
        };
        out.push(EstimatorFrame {
            timestamp,
            skeleton: best.unwrap_or_default(),
        });
    }
    Ok(out)
}

pub fn map_coco18_to_body14(frame: &Coco18Frame, timestamp: f64) -> Body14Frame {
    let mut out = Body14Frame::empty(timestamp, Dimension::Two);
    for (slot, target) in COCO18_TO_BODY14.iter().enumerate() {
        if let (Some(part), Some([x, y, c])) = (target, frame.keypoints[slot]) {
            out.set(*part, Some(Keypoint::new2(x, y, c)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub label: String,
    pub detected: usize,
    pub percent: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

/// `100 · detected / 14`, rounded half away from zero, in integer arithmetic.
pub fn coverage_percent(detected: usize) -> u32 {
    let total = BodyPart::COUNT;
    ((200 * detected + total) / (2 * total)) as u32
}

pub fn coverage_row(frame: &Body14Frame, label: String) -> CoverageRow {
    let detected = frame.detected_count(DEFAULT_DETECTION_THRESHOLD);
    CoverageRow {
        label,
        detected,
        percent: coverage_percent(detected),
    }
}

/// One row per frame. Without labels, rows are labelled by frame index.
pub fn coverage(frames: &[Body14Frame], labels: Option<&[String]>) -> Result<CoverageReport, IngestError> {
    if let Some(l) = labels {
        if l.len() != frames.len() {
            return Err(IngestError::LabelArityMismatch {
                frames: frames.len(),
                labels: l.len(),
            });
        }
    }
    let rows = frames
        .iter()
        .enumerate()
        .map(|(i, f)| coverage_row(f, labels.map_or_else(|| i.to_string(), |l| l[i].clone())))
        .collect();
    Ok(CoverageReport { rows })
}

impl CoverageReport {
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>8}  {:>7}\n", "label", "detected", "percent");
        for r in &self.rows {
            s.push_str(&format!("{:<width$}  {:>5}/14  {:>6}%\n", r.label, r.detected, r.percent));
        }
        s
    }
}

/// Linearly resamples a sequence at `target_count` evenly spaced timestamps
/// spanning the original range. A keypoint is interpolated only when both
/// bracketing frames have it.
pub fn resample_uniform(sequence: &[Body14Frame], target_count: usize) -> Result<Vec<Body14Frame>, IngestError> {
    if sequence.len() < 2 || target_count < 2 {
        return Err(IngestError::TooShort);
    }
    if sequence.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
        return Err(IngestError::NonMonotoneTimestamps);
    }
    const SNAP: f64 = 1e-12;
    let first = &sequence[0];
    let last = &sequence[sequence.len() - 1];
    let span = last.timestamp - first.timestamp;
    let mut out = Vec::with_capacity(target_count);
    out.push(first.clone());
    let mut seg = 0;
    for j in 1..target_count - 1 {
        let tau = first.timestamp + span * j as f64 / (target_count - 1) as f64;
        while seg + 2 < sequence.len() && sequence[seg + 1].timestamp <= tau {
            seg += 1;
        }
        let (a, b) = (&sequence[seg], &sequence[seg + 1]);
        let alpha = ((tau - a.timestamp) / (b.timestamp - a.timestamp)).clamp(0.0, 1.0);
        let mut frame = Body14Frame::empty(tau, first.dimension);
        for i in 0..BodyPart::COUNT {
            frame.keypoints[i] = if alpha <= SNAP {
                a.keypoints[i]
            } else if alpha >= 1.0 - SNAP {
                b.keypoints[i]
            } else {
                match (a.keypoints[i], b.keypoints[i]) {
                    (Some(ka), Some(kb)) => {
                        let lerp = |x: f64, y: f64| x + alpha * (y - x);
                        Some(Keypoint {
                            position: std::array::from_fn(|k| lerp(ka.position[k], kb.position[k])),
                            confidence: lerp(ka.confidence, kb.confidence),
                        })
                    }
                    _ => None,
                }
            };
        }
        out.push(frame);
    }
    out.push(last.clone());
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct WireFrame {
    v: Option<u32>,
    t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<u8>,
    kp: Vec<Option<Vec<f64>>>,
}

impl From<&Body14Frame> for WireFrame {
    fn from(f: &Body14Frame) -> Self {
        let n = f.dimension.len();
        WireFrame {
            v: Some(WIRE_VERSION),
            t: f.timestamp,
            d: (f.dimension == Dimension::Three).then_some(3),
            kp: f
                .keypoints
                .iter()
                .map(|k| {
                    k.map(|k| {
                        let mut e = k.position[..n].to_vec();
                        e.push(k.confidence);
                        e
                    })
                })
                .collect(),
        }
    }
}

impl TryFrom<WireFrame> for Body14Frame {
    type Error = IngestError;

    fn try_from(w: WireFrame) -> Result<Self, IngestError> {
        if let Some(v) = w.v {
            if v != WIRE_VERSION {
                return Err(IngestError::MalformedLine(format!("unsupported protocol version {v}")));
            }
        }
        if w.kp.len() != BodyPart::COUNT {
            return Err(IngestError::WrongKeypointArity(w.kp.len()));
        }
        if !w.t.is_finite() {
            return Err(IngestError::MalformedLine("non-finite timestamp".into()));
        }
        if w.t < 0.0 {
            return Err(IngestError::NegativeTimestamp);
        }
        let dimension = match w.d {
            Some(d) => Dimension::try_from(d).map_err(IngestError::MalformedLine)?,
            None => match w.kp.iter().flatten().next().map(Vec::len) {
                Some(4) => Dimension::Three,
                _ => Dimension::Two,
            },
        };
        let n = dimension.len();
        let mut frame = Body14Frame::empty(w.t, dimension);
        for (i, entry) in w.kp.into_iter().enumerate() {
            let Some(e) = entry else { continue };
            if e.len() != n + 1 {
                return Err(IngestError::MalformedLine(format!(
                    "keypoint {i} has {} values, expected {}",
                    e.len(),
                    n + 1
                )));
            }
            let c = e[n];
            if !(0.0..=1.0).contains(&c) {
                return Err(IngestError::MalformedLine(format!("keypoint {i} confidence {c} outside [0, 1]")));
            }
            let mut position = [0.0; 3];
            position[..n].copy_from_slice(&e[..n]);
            frame.keypoints[i] = Some(Keypoint { position, confidence: c });
        }
        Ok(frame)
    }
}

impl Serialize for Body14Frame {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WireFrame::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Body14Frame {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Body14Frame::try_from(WireFrame::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Encodes one frame as a wire line, without the trailing newline.
pub fn encode_frame(frame: &Body14Frame) -> String {
    serde_json::to_string(&WireFrame::from(frame)).expect("wire frame serializes")
}

/// Decodes one wire line (a trailing `\n` or `\r\n` is ignored).
pub fn decode_frame_line(line: &str) -> Result<Body14Frame, IngestError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.len() > MAX_LINE_BYTES {
        return Err(IngestError::MalformedLine(format!("line exceeds {MAX_LINE_BYTES} bytes")));
    }
    let wire: WireFrame = serde_json::from_str(line).map_err(|e| IngestError::MalformedLine(e.to_string()))?;
    Body14Frame::try_from(wire)
}

/// Reads a recorded NDJSON frame sequence; blank lines are skipped.
pub fn read_frames_ndjson(text: &str) -> Result<Vec<Body14Frame>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            decode_frame_line(l).map_err(|e| IngestError::AtLine {
                line: i + 1,
                error: Box::new(e),
            })
        })
        .collect()
}

pub fn write_frames_ndjson(frames: &[Body14Frame]) -> String {
    let mut s = String::new();
    for f in frames {
        s.push_str(&encode_frame(f));
        s.push('\n');
    }
    s
}

/// Frames turned into model input, with the number of frames dropped
/// because a required keypoint was missing or a bone was degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSequence {
    pub sequence: PoseSequence,
    pub dropped: usize,
}

/// Normalizes and encodes every usable frame; no imputation.
pub fn prepare_sequence(frames: &[Body14Frame], encoding: &PoseEncoding) -> PreparedSequence {
    let mut sequence = Vec::with_capacity(frames.len());
    let mut dropped = 0;
    for f in frames {
        let encoded = normalize_frame_with_threshold(f, DEFAULT_DETECTION_THRESHOLD).and_then(|p| encode_pose(&p, encoding));
        match encoded {
            Ok(pose) => sequence.push(TimedPose { time: f.timestamp, pose }),
            Err(_) => dropped += 1,
        }
    }
    PreparedSequence { sequence, dropped }
}
