//! Sequence log-likelihood under a learned gesture model, and the pass/fail
//! threshold derived from demonstrations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::gmm::{fit_em, joint_point, phase_normalize, GmmError, GmmModel, PoseSequence};
use crate::manifold::Point;

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MARGIN: f64 = 2.0;
/// Subtracted from the threshold so that a demo scoring exactly the mean passes.
pub const THRESHOLD_EPSILON: f64 = 1e-6;
pub const MIN_CALIBRATION_DEMOS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("sequence is empty")]
    EmptySequence,
    #[error("calibration needs at least {MIN_CALIBRATION_DEMOS} demos, got {0}")]
    TooFewDemos(usize),
    #[error("demo {0} has a non-finite score")]
    NonFiniteDemoScore(usize),
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error(transparent)]
    Model(#[from] GmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Log-likelihood of a sequence under a model. Frames with zero density
/// appear as `-∞` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(with = "lenient_f64")]
    pub total_log_likelihood: f64,
    #[serde(with = "lenient_f64_vec")]
    pub per_frame: Vec<f64>,
    #[serde(with = "lenient_f64")]
    pub normalized_score: f64,
    pub frame_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub format_version: u32,
    pub threshold: f64,
    pub demo_scores: Vec<f64>,
    pub margin_multiplier: f64,
}

impl Calibration {
    /// Builds a calibration from demo scores: `mean − c·stddev − ε`, using
    /// the sample (n − 1) standard deviation.
    pub fn from_scores(demo_scores: Vec<f64>, margin_multiplier: f64) -> Result<Self, ScoreError> {
        if demo_scores.len() < MIN_CALIBRATION_DEMOS {
            return Err(ScoreError::TooFewDemos(demo_scores.len()));
        }
        if let Some(i) = demo_scores.iter().position(|s| !s.is_finite()) {
            return Err(ScoreError::NonFiniteDemoScore(i));
        }
        if !margin_multiplier.is_finite() || margin_multiplier < 0.0 {
            return Err(ScoreError::InvalidCalibration("margin multiplier must be finite and non-negative".into()));
        }
        let n = demo_scores.len() as f64;
        let mean = demo_scores.iter().sum::<f64>() / n;
        let var = demo_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            format_version: CALIBRATION_FORMAT_VERSION,
            threshold: mean - margin_multiplier * var.sqrt() - THRESHOLD_EPSILON,
            demo_scores,
            margin_multiplier,
        })
    }

    pub fn verdict(&self, normalized_score: f64) -> Verdict {
        if normalized_score >= self.threshold {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ScoreError> {
        let cal: Calibration = serde_json::from_str(text).map_err(|e| ScoreError::InvalidCalibration(e.to_string()))?;
        if cal.format_version != CALIBRATION_FORMAT_VERSION {
            return Err(ScoreError::InvalidCalibration(format!(
                "unsupported format_version {}",
                cal.format_version
            )));
        }
        if !cal.threshold.is_finite() {
            return Err(ScoreError::InvalidCalibration("threshold must be finite".into()));
        }
        Ok(cal)
    }
}

/// Scores joint `(phase, pose)` points directly: the sum over frames of
/// `ln Σ_k φ_k N(x_t | μ_k, Σ_k)`.
pub fn score_points(points: &[Point], model: &GmmModel) -> Result<ScoreReport, ScoreError> {
    if points.is_empty() {
        return Err(ScoreError::EmptySequence);
    }
    let per_frame = points
        .iter()
        .map(|x| model.frame_log_likelihood(x))
        .collect::<Result<Vec<f64>, GmmError>>()?;
    let total: f64 = per_frame.iter().sum();
    Ok(ScoreReport {
        total_log_likelihood: total,
        normalized_score: total / per_frame.len() as f64,
        frame_count: per_frame.len(),
        per_frame,
        verdict: None,
    })
}

/// Scores a timestamped pose sequence. Timestamps are mapped onto `[0, 1]`
/// before evaluation.
pub fn score_sequence(sequence: &PoseSequence, model: &GmmModel, calibration: Option<&Calibration>) -> Result<ScoreReport, ScoreError> {
    if sequence.is_empty() {
        return Err(ScoreError::EmptySequence);
    }
    let times: Vec<f64> = sequence.iter().map(|p| p.time).collect();
    let phases = phase_normalize(&times)?;
    let points: Vec<Point> = phases.iter().zip(sequence).map(|(t, p)| joint_point(*t, &p.pose)).collect();
    let mut report = score_points(&points, model)?;
    report.verdict = calibration.map(|c| c.verdict(report.normalized_score));
    Ok(report)
}

/// Derives the pass threshold from leave-one-out scores: demo `i` is scored
/// against a mixture refitted on the other demos with the settings recorded
/// in `model`. Scoring the demos against `model` itself would rate them
/// against a fit that has already seen them.
pub fn calibrate(model: &GmmModel, demos: &[PoseSequence], margin_multiplier: f64) -> Result<Calibration, ScoreError> {
    if demos.len() < MIN_CALIBRATION_DEMOS {
        return Err(ScoreError::TooFewDemos(demos.len()));
    }
    let spec = model.pose_manifold().spec().clone();
    let config = model.meta().config;
    let scores = (0..demos.len())
        .into_par_iter()
        .map(|i| {
            let rest: Vec<PoseSequence> = demos.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| d.clone()).collect();
            let fold = fit_em(&rest, &spec, &config)?;
            score_sequence(&demos[i], &fold, None).map(|r| r.normalized_score)
        })
        .collect::<Result<Vec<f64>, ScoreError>>()?;
    Calibration::from_scores(scores, margin_multiplier)
}

/// JSON has no infinities; non-finite values are written as `null` and read
/// back as `-∞`.
pub(crate) mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

pub(crate) mod lenient_f64_vec {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for x in xs {
            seq.serialize_element(&x.is_finite().then_some(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}
