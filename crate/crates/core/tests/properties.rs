use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gesture_core::gmm::{gaussian_density, TrainingMeta};
use gesture_core::ingestion::{coverage_percent, decode_frame_line, resample_uniform, MAX_LINE_BYTES};
use gesture_core::session::{
    EventPayload, GestureEntry, GestureLibrary, SessionCommand, SessionConfig, SessionError, SessionInput, SessionMachine, SessionStage, SessionState,
};
use gesture_core::skeleton::BONES;
use gesture_core::synthetic::{synthetic_demo, synthetic_demos, DemoOptions, SyntheticGesture};
use gesture_core::{
    calibrate, encode_pose, fit_em, generate_trajectory, gmr_condition, normalize_frame, prepare_sequence, score_sequence, Body14Frame, BodyPart,
    Dimension, GmmModel, Keypoint, Manifold, ManifoldSpec, Point, PoseEncoding, PoseSequence, TrainingConfig,
};

fn frame_from(dim: Dimension, coords: &[f64]) -> Body14Frame {
    let d = dim.len();
    let mut f = Body14Frame::empty(0.5, dim);
    for part in BodyPart::ALL {
        let c = &coords[part.index() * d..][..d];
        let kp = match dim {
            Dimension::Two => Keypoint::new2(c[0], c[1], 0.9),
            Dimension::Three => Keypoint::new3(c[0], c[1], c[2], 0.9),
        };
        f.set(part, Some(kp));
    }
    f
}

fn similar(f: &Body14Frame, scale: f64, shift: [f64; 3]) -> Body14Frame {
    let mut g = f.clone();
    let d = f.dimension.len();
    for kp in g.keypoints.iter_mut().flatten() {
        for (x, s) in kp.position.iter_mut().zip(shift).take(d) {
            *x = scale * *x + s;
        }
    }
    g
}

#[test]
fn normalization_is_similarity_invariant_on_random_frames() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 10_000 {
        let dim = if r.random_bool(0.5) { Dimension::Two } else { Dimension::Three };
        let coords: Vec<f64> = (0..14 * dim.len()).map(|_| r.random_range(-500.0..500.0)).collect();
        let f = frame_from(dim, &coords);
        let Ok(a) = normalize_frame(&f) else { continue };
        if a.spine_length < 10.0 {
            continue;
        }
        let g = similar(
            &f,
            r.random_range(0.1..10.0),
            [r.random_range(-1e3..1e3), r.random_range(-1e3..1e3), r.random_range(-1e3..1e3)],
        );
        let b = normalize_frame(&g).unwrap();
        for (x, y) in a.relative_positions.iter().zip(&b.relative_positions) {
            assert!((x - y).abs() <= 1e-9, "relative position {x} vs {y}");
        }
        for (x, y) in a.bone_directions.iter().zip(&b.bone_directions) {
            assert!((x - y).abs() <= 1e-9, "bone direction {x} vs {y}");
        }
        for bone in 0..BONES.len() {
            let n = a.bone_direction(bone).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        assert_eq!(normalize_frame(&f).unwrap(), a);
        let point = encode_pose(&a, &PoseEncoding::directions(dim)).unwrap();
        PoseEncoding::directions(dim).manifold().check_point(&point).unwrap();
        checked += 1;
    }
}

#[test]
fn coverage_percent_matches_float_rounding() {
    for detected in 0..=14 {
        let exact = 100.0 * detected as f64 / 14.0;
        assert_eq!(coverage_percent(detected), exact.round() as u32, "{detected}");
    }
}

#[test]
fn overlong_wire_line_is_rejected() {
    let line = format!("{{\"v\":1,\"t\":0.0,\"pad\":\"{}\",\"kp\":[]}}", "x".repeat(MAX_LINE_BYTES));
    assert!(decode_frame_line(&line).is_err());
}

#[test]
fn resampling_to_own_length_is_identity() {
    let demo = synthetic_demo(SyntheticGesture::Wave, 4, &DemoOptions::default());
    let back = resample_uniform(&demo, demo.len()).unwrap();
    for (a, b) in demo.iter().zip(&back) {
        assert!((a.timestamp - b.timestamp).abs() <= 1e-12);
        for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
            let (ka, kb) = (ka.unwrap(), kb.unwrap());
            for i in 0..3 {
                assert!((ka.position[i] - kb.position[i]).abs() <= 1e-12);
            }
        }
    }
}

fn sphere_product() -> Manifold {
    Manifold::new(ManifoldSpec::Product(vec![
        ManifoldSpec::Euclidean(2),
        ManifoldSpec::Sphere(2),
        ManifoldSpec::Sphere(1),
    ]))
    .unwrap()
}

fn point_on(m: &Manifold, raw: &[f64]) -> Point {
    m.project_point(&DVector::from_column_slice(&raw[..m.ambient_dim()])).unwrap()
}

fn tangent_of(m: &Manifold, raw: &[f64], max_norm: f64) -> DVector<f64> {
    let v = DVector::from_column_slice(&raw[..m.tangent_dim()]);
    let n = v.norm();
    if n > max_norm {
        v * (max_norm / n)
    } else {
        v
    }
}

fn raw() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 8).prop_filter("non-zero sphere factors", |v| {
        v[2..5].iter().map(|x| x * x).sum::<f64>() > 1e-3 && v[5..7].iter().map(|x| x * x).sum::<f64>() > 1e-3
    })
}

proptest! {
    #[test]
    fn triangle_inequality(a in raw(), b in raw(), c in raw()) {
        let m = sphere_product();
        let (a, b, c) = (point_on(&m, &a), point_on(&m, &b), point_on(&m, &c));
        if let (Ok(ac), Ok(ab), Ok(bc)) = (m.distance(&a, &c), m.distance(&a, &b), m.distance(&b, &c)) {
            prop_assert!(ac <= ab + bc + 1e-9);
        }
    }

    #[test]
    fn transport_preserves_norm_and_is_identity_in_place(p in raw(), v in raw(), w in raw()) {
        let m = sphere_product();
        let p = point_on(&m, &p);
        let v = tangent_of(&m, &v, 10.0);
        let q = m.exp(&p, &tangent_of(&m, &w, PI - 0.1)).unwrap();
        let moved = m.transport(&v, &p, &q).unwrap();
        prop_assert!((moved.norm() - v.norm()).abs() <= 1e-9);
        prop_assert!((m.transport(&v, &p, &p).unwrap() - &v).amax() <= 1e-12);
    }

    #[test]
    fn product_ops_are_factor_wise(p in raw(), v in raw()) {
        let m = sphere_product();
        let p = point_on(&m, &p);
        let v = tangent_of(&m, &v, PI - 0.1);
        let whole = m.exp(&p, &v).unwrap();
        let (e, s2, s1) = (Manifold::euclidean(2), Manifold::sphere(2), Manifold::sphere(1));
        let pe = e.exp(&p.rows(0, 2).into_owned(), &v.rows(0, 2).into_owned()).unwrap();
        let ps2 = s2.exp(&p.rows(2, 3).into_owned(), &v.rows(2, 2).into_owned()).unwrap();
        let ps1 = s1.exp(&p.rows(5, 2).into_owned(), &v.rows(4, 1).into_owned()).unwrap();
        prop_assert_eq!(whole.rows(0, 2).into_owned(), pe);
        prop_assert_eq!(whole.rows(2, 3).into_owned(), ps2);
        prop_assert_eq!(whole.rows(5, 2).into_owned(), ps1);
    }

    #[test]
    fn frechet_mean_ignores_order_and_weight_scale(
        center in raw(),
        offsets in prop::collection::vec(raw(), 2..8),
        weights in prop::collection::vec(0.05..1.0f64, 8),
        scale in 0.01..100.0f64,
        rotate in 0usize..8,
    ) {
        let m = sphere_product();
        let c = point_on(&m, &center);
        let pts: Vec<Point> = offsets.iter().map(|o| m.exp(&c, &tangent_of(&m, o, 1.0)).unwrap()).collect();
        let w = &weights[..pts.len()];
        let mean = m.frechet_mean(&pts, w).unwrap();

        let k = rotate % pts.len();
        let mut pts2 = pts.clone();
        let mut w2 = w.to_vec();
        pts2.rotate_left(k);
        w2.rotate_left(k);
        pts2.reverse();
        w2.reverse();
        prop_assert!(m.distance(&mean, &m.frechet_mean(&pts2, &w2).unwrap()).unwrap() <= 1e-9);
        let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
        prop_assert!(m.distance(&mean, &m.frechet_mean(&pts, &scaled).unwrap()).unwrap() <= 1e-9);
    }

    #[test]
    fn gaussian_density_matches_textbook_pdf(
        x in prop::collection::vec(-2.0..2.0f64, 3),
        mu in prop::collection::vec(-2.0..2.0f64, 3),
        a in prop::collection::vec(-1.0..1.0f64, 9),
    ) {
        let a = DMatrix::from_row_slice(3, 3, &a);
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.2;
        let (x, mu) = (DVector::from_vec(x), DVector::from_vec(mu));
        let diff = &x - &mu;
        let q = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let oracle = (2.0 * PI).powf(-1.5) * cov.determinant().powf(-0.5) * (-0.5 * q).exp();
        let got = gaussian_density(&Manifold::euclidean(3), &x, &mu, &cov).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-9 * oracle.max(1e-300));
    }

    #[test]
    fn responsibilities_match_density_ratio(
        x in prop::collection::vec(-2.0..2.0f64, 2),
        means in prop::collection::vec(-2.0..2.0f64, 6),
        raw_w in prop::collection::vec(0.1..1.0f64, 3),
        vars in prop::collection::vec(0.2..2.0f64, 6),
    ) {
        let total: f64 = raw_w.iter().sum();
        let weights: Vec<f64> = raw_w.iter().map(|w| w / total).collect();
        let mus: Vec<DVector<f64>> = means.chunks(2).map(DVector::from_column_slice).collect();
        let covs: Vec<DMatrix<f64>> = vars.chunks(2).map(|v| DMatrix::from_diagonal(&DVector::from_column_slice(v))).collect();
        let model = GmmModel::new(ManifoldSpec::Euclidean(1), weights.clone(), mus.clone(), covs.clone(), meta()).unwrap();
        let x = DVector::from_vec(x);
        let dens: Vec<f64> = (0..3).map(|k| {
            let d = &x - &mus[k];
            let q: f64 = (0..2).map(|i| d[i] * d[i] / covs[k][(i, i)]).sum();
            weights[k] * (-0.5 * q).exp() / (2.0 * PI * (covs[k][(0, 0)] * covs[k][(1, 1)]).sqrt())
        }).collect();
        let sum: f64 = dens.iter().sum();
        let r = model.responsibilities(&x).unwrap();
        for k in 0..3 {
            prop_assert!((r[k] - dens[k] / sum).abs() <= 1e-9);
        }
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

fn meta() -> TrainingMeta {
    TrainingMeta {
        demo_count: 0,
        iterations: 0,
        final_log_likelihood: 0.0,
        converged: true,
        config: TrainingConfig::default(),
    }
}

fn encode(demos: &[Vec<Body14Frame>]) -> Vec<PoseSequence> {
    demos.iter().map(|d| prepare_sequence(d, &PoseEncoding::default()).sequence).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fitted_models_satisfy_invariants(seed in 0u64..10_000, k in 1usize..6, wave in any::<bool>()) {
        let gesture = if wave { SyntheticGesture::Wave } else { SyntheticGesture::ArmRaise };
        let seqs = encode(&synthetic_demos(gesture, seed, 3, &DemoOptions::default()));
        let cfg = TrainingConfig { components: k, seed, ..Default::default() };
        let spec = PoseEncoding::default().manifold_spec();
        let model = fit_em(&seqs, &spec, &cfg).unwrap();
        prop_assert!((model.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(model.weights().iter().all(|w| *w >= 0.0));
        for cov in model.covariances() {
            prop_assert!((cov - cov.transpose()).amax() <= 1e-12);
            prop_assert!(SymmetricEigen::new(cov.clone()).eigenvalues.min() >= 1e-8 * (1.0 - 1e-9));
        }
        let again = fit_em(&seqs, &spec, &cfg).unwrap();
        prop_assert_eq!(model.to_json(), again.to_json());
    }
}

#[test]
fn gmr_picks_the_active_component() {
    let pose = ManifoldSpec::Euclidean(2);
    let mean = |t: f64, y: [f64; 2]| DVector::from_column_slice(&[t, y[0], y[1]]);
    let cov = DMatrix::from_row_slice(3, 3, &[1e-4, 2e-4, 0.0, 2e-4, 0.5, 0.1, 0.0, 0.1, 0.4]);
    let model = GmmModel::new(
        pose,
        vec![0.5, 0.5],
        vec![mean(0.2, [1.0, -1.0]), mean(0.8, [-3.0, 2.0])],
        vec![cov.clone(), cov.clone()],
        meta(),
    )
    .unwrap();
    let single = GmmModel::new(ManifoldSpec::Euclidean(2), vec![1.0], vec![mean(0.2, [1.0, -1.0])], vec![cov], meta()).unwrap();
    let r = gmr_condition(&model, 0.2).unwrap();
    assert!(r.activations[0] > 0.999);
    let oracle = gmr_condition(&single, 0.2).unwrap();
    assert!((r.mean - oracle.mean).norm() <= 1e-3);
}

fn max_step(m: &Manifold, poses: &[Point]) -> f64 {
    poses.windows(2).map(|w| m.distance(&w[0], &w[1]).unwrap()).fold(0.0, f64::max)
}

#[test]
fn generated_trajectory_is_as_smooth_as_the_demos() {
    let seqs = encode(&synthetic_demos(SyntheticGesture::ArmRaise, 21, 5, &DemoOptions::default()));
    let enc = PoseEncoding::default();
    let model = fit_em(&seqs, &enc.manifold_spec(), &TrainingConfig::default()).unwrap();
    let m = enc.manifold();
    let demo_step = seqs
        .iter()
        .map(|s| max_step(&m, &s.iter().map(|p| p.pose.clone()).collect::<Vec<_>>()))
        .fold(0.0, f64::max);
    let traj = generate_trajectory(&model, 50).unwrap();
    assert_eq!(traj.len(), 50);
    assert!(traj.windows(2).all(|w| w[1].time > w[0].time));
    let step = max_step(&m, &traj.iter().map(|p| p.pose.clone()).collect::<Vec<_>>());
    assert!(step <= 3.0 * demo_step, "trajectory step {step} vs demo step {demo_step}");
}

#[test]
fn score_is_stable_under_resampling() {
    let enc = PoseEncoding::default();
    let seqs = encode(&synthetic_demos(SyntheticGesture::Wave, 31, 5, &DemoOptions::default()));
    let model = fit_em(&seqs, &enc.manifold_spec(), &TrainingConfig::default()).unwrap();
    let opts = DemoOptions {
        frame_count: 30,
        jitter: 0.0,
        ..Default::default()
    };
    for seed in 40..45 {
        // Same seed, same duration: the same motion sampled twice as densely.
        let coarse = synthetic_demo(SyntheticGesture::Wave, seed, &opts);
        let fine = synthetic_demo(
            SyntheticGesture::Wave,
            seed,
            &DemoOptions {
                frame_count: 60,
                frame_rate: 59.0 / 29.0 * opts.frame_rate,
                ..opts
            },
        );
        let a = score_sequence(&prepare_sequence(&coarse, &enc).sequence, &model, None).unwrap();
        let b = score_sequence(&prepare_sequence(&fine, &enc).sequence, &model, None).unwrap();
        assert_eq!(b.frame_count, 60);
        assert!(
            (a.normalized_score - b.normalized_score).abs() <= 0.05,
            "seed {seed}: {} vs {}",
            a.normalized_score,
            b.normalized_score
        );
    }
}

#[test]
fn scoring_does_not_depend_on_thread_count() {
    let enc = PoseEncoding::default();
    let seqs = encode(&synthetic_demos(SyntheticGesture::ArmRaise, 51, 4, &DemoOptions::default()));
    let model = fit_em(&seqs, &enc.manifold_spec(), &TrainingConfig::default()).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (m1, c1) = single.install(|| {
        let m = fit_em(&seqs, &enc.manifold_spec(), &TrainingConfig::default()).unwrap();
        let c = calibrate(&m, &seqs, 2.0).unwrap();
        (m, c)
    });
    assert_eq!(m1.to_json(), model.to_json());
    assert_eq!(c1, calibrate(&model, &seqs, 2.0).unwrap());
}

// ---------------------------------------------------------------------------

fn small_library() -> std::sync::Arc<GestureLibrary> {
    let enc = PoseEncoding::default();
    let seqs = encode(&synthetic_demos(SyntheticGesture::Wave, 61, 3, &DemoOptions::default()));
    let model = fit_em(
        &seqs,
        &enc.manifold_spec(),
        &TrainingConfig {
            components: 3,
            ..Default::default()
        },
    )
    .unwrap()
    .with_encoding(enc)
    .unwrap();
    let cal = calibrate(&model, &seqs, 2.0).unwrap();
    let mut lib = GestureLibrary::new();
    lib.insert(GestureEntry::new("wave", "Wave", false, model, cal, 5).unwrap()).unwrap();
    std::sync::Arc::new(lib)
}

fn input() -> impl Strategy<Value = SessionInput> {
    let command = prop_oneof![
        Just(SessionCommand::Start),
        Just(SessionCommand::Advance),
        Just(SessionCommand::SelectGesture { gesture_id: "wave".into() }),
        Just(SessionCommand::SelectGesture { gesture_id: "jump".into() }),
        Just(SessionCommand::Prompt),
        Just(SessionCommand::StopCapture),
        Just(SessionCommand::End),
    ];
    prop_oneof![
        3 => command.prop_map(|command| SessionInput::Command { command }),
        5 => (0usize..45, any::<bool>()).prop_map(|(i, hips)| SessionInput::Frame { frame: {
            let mut f = synthetic_demo(SyntheticGesture::Wave, 70, &DemoOptions::default())[i].clone();
            if !hips { f.set(BodyPart::LHip, None); }
            f
        } }),
        1 => (0.0..20.0f64).prop_map(|time| SessionInput::Tick { time }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn session_inputs_keep_machine_consistent(inputs in prop::collection::vec(input(), 0..60)) {
        let machine = SessionMachine::new(small_library(), SessionConfig::default());
        let mut state = SessionState::default();
        let mut clock = 0.0;
        let mut expected_seq = 1;
        for mut input in inputs {
            // Keep stream time moving forward like a live source.
            match &mut input {
                SessionInput::Frame { frame } => { clock += 1.0 / 30.0; frame.timestamp = clock; }
                SessionInput::Tick { time } => { clock += *time; *time = clock; }
                SessionInput::Command { .. } => {}
            }
            let before = state.clone();
            match machine.apply(&mut state, &input) {
                Ok(events) => {
                    for e in &events {
                        prop_assert_eq!(e.sequence_number, expected_seq);
                        expected_seq += 1;
                        if let EventPayload::StateChanged { stage, previous, .. } = &e.payload {
                            prop_assert!(stage == previous || SessionStage::is_legal_transition(*previous, *stage));
                        }
                    }
                }
                Err(e) => {
                    let known = matches!(
                        e,
                        SessionError::IllegalTransition { .. } | SessionError::UnknownGesture(_) | SessionError::NoGestureSelected
                    );
                    prop_assert!(known, "unexpected error {:?}", e);
                    prop_assert_eq!(&state, &before);
                }
            }
            prop_assert_eq!(state.next_sequence, expected_seq);
        }
    }
}
