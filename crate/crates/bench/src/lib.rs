//! Shared inputs for the criterion benches: synthetic demos run through the
//! same preparation path as real recordings.

use gesture_core::synthetic::{synthetic_demos, DemoOptions, SyntheticGesture};
use gesture_core::{fit_em, prepare_sequence, Body14Frame, GmmModel, Point, PoseEncoding, PoseSequence, TrainingConfig};

pub struct Workload {
    pub encoding: PoseEncoding,
    pub frames: Vec<Vec<Body14Frame>>,
    pub demos: Vec<PoseSequence>,
}

impl Workload {
    /// `count` wave demos of `frame_count` frames each, encoded as bone directions.
    pub fn wave(count: usize, frame_count: usize) -> Self {
        let encoding = PoseEncoding::default();
        let options = DemoOptions {
            frame_count,
            ..DemoOptions::default()
        };
        let frames = synthetic_demos(SyntheticGesture::Wave, 200, count, &options);
        let demos = frames.iter().map(|f| prepare_sequence(f, &encoding).sequence).collect();
        Self { encoding, frames, demos }
    }

    pub fn poses(&self) -> Vec<Point> {
        self.demos.iter().flatten().map(|p| p.pose.clone()).collect()
    }

    pub fn fit(&self, components: usize) -> GmmModel {
        let config = TrainingConfig {
            components,
            ..TrainingConfig::default()
        };
        fit_em(&self.demos, &self.encoding.manifold_spec(), &config)
            .and_then(|m| m.with_encoding(self.encoding))
            .expect("synthetic demos fit")
    }
}
