//! Seeded synthetic gesture recordings in image coordinates (y down).
//!
//! Each demo varies the performer's position, size, timing and amplitude and
//! adds per-keypoint jitter, so several demos of one gesture look like
//! several real recordings of it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::skeleton::{Body14Frame, BodyPart, Dimension, Keypoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticGesture {
    /// Right arm swings from hanging down to pointing straight up.
    ArmRaise,
    /// Right upper arm held out, forearm swinging side to side twice.
    Wave,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoOptions {
    pub frame_count: usize,
    pub frame_rate: f64,
    /// Standard deviation of keypoint jitter, in units of the spine length.
    pub jitter: f64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            frame_count: 45,
            frame_rate: 30.0,
            jitter: 0.01,
        }
    }
}

/// Skeleton offsets for a spine length of 1, before the arm motion.
fn rest_pose() -> [(f64, f64); 14] {
    [
        (0.0, -0.4),   // head
        (0.0, 0.0),    // spine shoulder
        (-0.35, 0.05), // r shoulder
        (-0.38, 0.55), // r elbow
        (-0.40, 1.02), // r wrist
        (0.35, 0.05),  // l shoulder
        (0.38, 0.55),  // l elbow
        (0.40, 1.02),  // l wrist
        (-0.2, 1.0),   // r hip
        (-0.22, 1.6),  // r knee
        (-0.22, 2.2),  // r ankle
        (0.2, 1.0),    // l hip
        (0.22, 1.6),   // l knee
        (0.22, 2.2),   // l ankle
    ]
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// One recording of `gesture`; `seed` fully determines it.
pub fn synthetic_demo(gesture: SyntheticGesture, seed: u64, options: &DemoOptions) -> Vec<Body14Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(80.0..120.0);
    let origin = (rng.random_range(250.0..390.0), rng.random_range(150.0..230.0));
    let warp = rng.random_range(0.85..1.15);
    let amplitude = rng.random_range(0.9..1.0);
    let jitter = Normal::new(0.0, options.jitter.max(0.0) * scale).expect("finite jitter");
    let t0 = rng.random_range(0.0..10.0);

    let n = options.frame_count.max(2);
    (0..n)
        .map(|i| {
            let phase = (i as f64 / (n - 1) as f64).powf(warp);
            let mut joints = rest_pose();
            let (upper, fore) = (0.5, 0.47);
            let shoulder = joints[BodyPart::RShoulder.index()];
            let (upper_angle, fore_angle) = match gesture {
                SyntheticGesture::ArmRaise => {
                    let a = amplitude * PI * smoothstep(phase);
                    (a, a + 0.1 * (PI * phase).sin())
                }
                SyntheticGesture::Wave => {
                    let base = amplitude * 0.5 * PI;
                    (base, base + PI / 2.0 + 0.6 * (4.0 * PI * phase).sin())
                }
            };
            // Angle 0 points down the image; positive rotates towards the performer's right (image left).
            let dir = |a: f64| (-a.sin(), a.cos());
            let (ux, uy) = dir(upper_angle);
            let elbow = (shoulder.0 + upper * ux, shoulder.1 + upper * uy);
            let (fx, fy) = dir(fore_angle);
            let wrist = (elbow.0 + fore * fx, elbow.1 + fore * fy);
            joints[BodyPart::RElbow.index()] = elbow;
            joints[BodyPart::RWrist.index()] = wrist;

            let mut frame = Body14Frame::empty(t0 + i as f64 / options.frame_rate, Dimension::Two);
            for part in BodyPart::ALL {
                let (x, y) = joints[part.index()];
                let kp = Keypoint::new2(
                    origin.0 + scale * x + jitter.sample(&mut rng),
                    origin.1 + scale * y + jitter.sample(&mut rng),
                    rng.random_range(0.6..1.0),
                );
                frame.set(part, Some(kp));
            }
            frame
        })
        .collect()
}

/// `count` demos with seeds `base_seed, base_seed + 1, ...`.
pub fn synthetic_demos(gesture: SyntheticGesture, base_seed: u64, count: usize, options: &DemoOptions) -> Vec<Vec<Body14Frame>> {
    (0..count as u64).map(|i| synthetic_demo(gesture, base_seed + i, options)).collect()
}

/// Renders frames as an 18-keypoint estimator export with one person per
/// frame and explicit `t` fields. Eyes and ears are placed around the head;
/// missing parts become zero triplets.
pub fn to_estimator_doc(frames: &[Body14Frame]) -> String {
    use crate::ingestion::COCO18_NAMES;
    let docs: Vec<serde_json::Value> = frames
        .iter()
        .map(|f| {
            let mut flat = vec![0.0; 3 * COCO18_NAMES.len()];
            let mut put = |slot: usize, kp: Option<&Keypoint>, dx: f64, dy: f64| {
                if let Some(k) = kp {
                    flat[3 * slot] = k.position[0] + dx;
                    flat[3 * slot + 1] = k.position[1] + dy;
                    flat[3 * slot + 2] = k.confidence;
                }
            };
            for (slot, part) in BodyPart::ALL.iter().enumerate() {
                put(slot, f.get(*part), 0.0, 0.0);
            }
            let head = f.get(BodyPart::Head);
            for (slot, dx, dy) in [(14, -4.0, -3.0), (15, 4.0, -3.0), (16, -8.0, 0.0), (17, 8.0, 0.0)] {
                put(slot, head, dx, dy);
            }
            serde_json::json!({ "t": f.timestamp, "people": [{ "pose_keypoints_2d": flat }] })
        })
        .collect();
    serde_json::to_string(&docs).expect("estimator doc serializes")
}

/// The same recording played backwards: poses reversed, timestamps kept.
pub fn time_reversed(frames: &[Body14Frame]) -> Vec<Body14Frame> {
    frames
        .iter()
        .zip(frames.iter().rev())
        .map(|(slot, src)| Body14Frame {
            timestamp: slot.timestamp,
            ..src.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::normalize_frame;

    #[test]
    fn demos_are_seeded_and_usable() {
        let opts = DemoOptions::default();
        let a = synthetic_demo(SyntheticGesture::ArmRaise, 7, &opts);
        assert_eq!(a, synthetic_demo(SyntheticGesture::ArmRaise, 7, &opts));
        assert_ne!(a, synthetic_demo(SyntheticGesture::ArmRaise, 8, &opts));
        assert_eq!(a.len(), 45);
        assert!(a.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
        for f in &a {
            normalize_frame(f).unwrap();
        }
        // The wrist ends above the head.
        let last = a.last().unwrap();
        assert!(last.get(BodyPart::RWrist).unwrap().position[1] < last.get(BodyPart::Head).unwrap().position[1]);
    }

    #[test]
    fn estimator_doc_maps_back() {
        let a = synthetic_demo(SyntheticGesture::Wave, 3, &DemoOptions::default());
        let parsed = crate::ingestion::parse_estimator_doc(&to_estimator_doc(&a)).unwrap();
        assert_eq!(parsed.len(), a.len());
        for (p, f) in parsed.iter().zip(&a) {
            assert_eq!(crate::ingestion::map_coco18_to_body14(&p.skeleton, p.timestamp), *f);
        }
    }

    #[test]
    fn reversal_keeps_timestamps() {
        let a = synthetic_demo(SyntheticGesture::Wave, 1, &DemoOptions::default());
        let r = time_reversed(&a);
        assert_eq!(r[0].timestamp, a[0].timestamp);
        assert_eq!(r[0].keypoints, a[a.len() - 1].keypoints);
    }
}
