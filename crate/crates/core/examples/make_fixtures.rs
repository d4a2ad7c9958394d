//! Writes the recorded-keypoint fixtures used by tests and the README.
//!
//! Usage: `cargo run -p gesture-core --example make_fixtures [out_dir]`
//! (default: `fixtures/` at the workspace root).

use std::fs;
use std::path::PathBuf;

use gesture_core::ingestion::write_frames_ndjson;
use gesture_core::synthetic::{synthetic_demos, time_reversed, to_estimator_doc, DemoOptions, SyntheticGesture};
use gesture_core::{Body14Frame, BodyPart, Dimension, Keypoint};

/// Detected-part counts of the six rows of the detection experiment.
const TABLE1_DETECTED: [usize; 6] = [14, 14, 10, 11, 9, 13];

fn table1_frames() -> Vec<Body14Frame> {
    // Parts dropped first when fewer are detected: legs, then left arm.
    let drop_order = [BodyPart::LAnkle, BodyPart::RAnkle, BodyPart::LKnee, BodyPart::RKnee, BodyPart::LWrist];
    TABLE1_DETECTED
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut f = Body14Frame::empty(i as f64, Dimension::Two);
            for part in BodyPart::ALL {
                let p = part.index() as f64;
                f.set(part, Some(Keypoint::new2(100.0 + 7.0 * p, 50.0 + 11.0 * p, 0.8)));
            }
            for part in &drop_order[..14 - n] {
                f.set(*part, None);
            }
            f
        })
        .collect()
}

fn main() -> std::io::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("table1.ndjson"), write_frames_ndjson(&table1_frames()))?;

    let opts = DemoOptions::default();
    for (name, gesture, seed) in [("arm_raise", SyntheticGesture::ArmRaise, 100), ("wave", SyntheticGesture::Wave, 200)] {
        let demo_dir = out.join("demos").join(name);
        let est_dir = out.join("estimator").join(name);
        fs::create_dir_all(&demo_dir)?;
        fs::create_dir_all(&est_dir)?;
        let demos = synthetic_demos(gesture, seed, 5, &opts);
        for (i, d) in demos.iter().enumerate() {
            fs::write(demo_dir.join(format!("demo{}.ndjson", i + 1)), write_frames_ndjson(d))?;
            fs::write(est_dir.join(format!("demo{}.json", i + 1)), to_estimator_doc(d))?;
        }
        let attempts = out.join("attempts");
        fs::create_dir_all(&attempts)?;
        let fresh = &synthetic_demos(gesture, seed + 50, 1, &opts)[0];
        fs::write(attempts.join(format!("{name}_fresh.ndjson")), write_frames_ndjson(fresh))?;
        fs::write(
            attempts.join(format!("{name}_reversed.ndjson")),
            write_frames_ndjson(&time_reversed(&demos[0])),
        )?;
    }
    eprintln!("fixtures written to {}", out.display());
    Ok(())
}
