use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use gesture_core::ingestion::{coverage, map_coco18_to_body14, parse_estimator_doc, read_frames_ndjson, write_frames_ndjson};
use gesture_core::scoring::Calibration;
use gesture_core::session::SessionConfig;
use gesture_core::{
    calibrate, encode_frame, fit_em, generate_trajectory, prepare_sequence, score_sequence, Body14Frame, GmmModel, PoseEncoding, PoseSequence,
    ScoreReport, TrainingConfig,
};
use serde::Serialize;

use crate::{Cli, Command, EncodingArg, Format};

pub fn dispatch(cli: Cli) -> Result<()> {
    let format = cli.format;
    match cli.command {
        Command::Train {
            demos,
            encoding,
            components,
            seed,
            out,
        } => {
            require_dir(&demos)?;
            require_parent(&out)?;
            train(&demos, encoding, components, seed, &out, format)
        }
        Command::Calibrate { model, demos, margin, out } => {
            require_file(&model)?;
            require_dir(&demos)?;
            require_parent(&out)?;
            calibrate_cmd(&model, &demos, margin, &out, format)
        }
        Command::Score { model, calibration, input } => {
            require_file(&model)?;
            if let Some(c) = &calibration {
                require_file(c)?;
            }
            require_file(&input)?;
            score(&model, calibration.as_deref(), &input, format)
        }
        Command::Generate { model, frames, out } => {
            require_file(&model)?;
            require_parent(&out)?;
            generate(&model, frames, &out, format)
        }
        Command::Coverage { input } => {
            require_file(&input)?;
            coverage_cmd(&input, format)
        }
        Command::Convert { input, out } => {
            require_file(&input)?;
            require_parent(&out)?;
            convert(&input, &out, format)
        }
        Command::Replay {
            input,
            connect,
            session,
            rate,
        } => {
            require_file(&input)?;
            if !(rate >= 0.0 && rate.is_finite()) {
                bail!("--rate must be a non-negative number");
            }
            replay(&input, &connect, &session, rate, format)
        }
        Command::Serve {
            http,
            ingest,
            gestures,
            log_dir,
            capture_timeout,
        } => {
            require_dir(&gestures)?;
            if let Some(d) = &log_dir {
                require_dir(d)?;
            }
            if !(capture_timeout > 0.0 && capture_timeout.is_finite()) {
                bail!("--capture-timeout must be positive");
            }
            let config = SessionConfig {
                capture_timeout,
                ..SessionConfig::default()
            };
            let library = crate::library::load_library(&gestures, config.reference_frames)?;
            eprintln!("loaded {} gestures from {}", library.len(), gestures.display());
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::server::run(http, ingest, library, config, log_dir))
        }
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("path not found: {}", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        bail!("directory not found: {}", path.display());
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => bail!("output directory not found: {}", p.display()),
        _ => Ok(()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit<T: Serialize>(value: &T, format: Format, table: impl FnOnce() -> String) -> Result<()> {
    let text = match format {
        Format::Json => serde_json::to_string(value)? + "\n",
        Format::Table => table(),
    };
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<GmmModel> {
    GmmModel::from_json(&read(path)?).with_context(|| format!("loading model {}", path.display()))
}

fn model_encoding(model: &GmmModel, path: &Path) -> Result<PoseEncoding> {
    model
        .encoding()
        .with_context(|| format!("model {} does not record a pose encoding", path.display()))
}

/// Reads frames from NDJSON or, when the text is a JSON array, an estimator export.
fn read_any_frames(path: &Path) -> Result<Vec<Body14Frame>> {
    let text = read(path)?;
    let frames = if text.trim_start().starts_with('[') {
        parse_estimator_doc(&text)?
            .iter()
            .map(|f| map_coco18_to_body14(&f.skeleton, f.timestamp))
            .collect()
    } else {
        read_frames_ndjson(&text)?
    };
    Ok(frames)
}

/// Demo recordings in a directory: `*.ndjson` and `*.json` files, by name.
fn demo_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("ndjson" | "json")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .ndjson or .json recordings in {}", dir.display());
    }
    Ok(files)
}

struct Demos {
    sequences: Vec<PoseSequence>,
    frames: usize,
    dropped: usize,
}

fn load_demos(dir: &Path, encoding: Option<PoseEncoding>, kind: EncodingArg) -> Result<(Demos, PoseEncoding)> {
    let files = demo_files(dir)?;
    let mut recordings = Vec::with_capacity(files.len());
    for f in &files {
        let frames = read_any_frames(f)?;
        if frames.is_empty() {
            bail!("{} contains no frames", f.display());
        }
        recordings.push(frames);
    }
    let encoding = encoding.unwrap_or_else(|| {
        let dim = recordings[0][0].dimension;
        match kind {
            EncodingArg::Directions => PoseEncoding::directions(dim),
            EncodingArg::Positions => PoseEncoding::positions(dim),
        }
    });
    let mut demos = Demos {
        sequences: Vec::new(),
        frames: 0,
        dropped: 0,
    };
    for (f, frames) in files.iter().zip(&recordings) {
        if frames.iter().any(|fr| fr.dimension != encoding.dimension) {
            bail!("{} does not match the {:?} encoding dimension", f.display(), encoding.dimension);
        }
        let prepared = prepare_sequence(frames, &encoding);
        if prepared.sequence.is_empty() {
            bail!("{}: every frame lacks a required body part", f.display());
        }
        demos.frames += frames.len();
        demos.dropped += prepared.dropped;
        demos.sequences.push(prepared.sequence);
    }
    Ok((demos, encoding))
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    encoding: PoseEncoding,
    components: usize,
    demos: usize,
    frames: usize,
    dropped_frames: usize,
    iterations: usize,
    final_log_likelihood: f64,
    converged: bool,
}

fn train(dir: &Path, kind: EncodingArg, components: usize, seed: u64, out: &Path, format: Format) -> Result<()> {
    let (demos, encoding) = load_demos(dir, None, kind)?;
    eprintln!(
        "read {} demos ({} frames, {} dropped)",
        demos.sequences.len(),
        demos.frames,
        demos.dropped
    );
    let config = TrainingConfig {
        components,
        seed,
        ..TrainingConfig::default()
    };
    let model = fit_em(&demos.sequences, &encoding.manifold_spec(), &config)?.with_encoding(encoding)?;
    let meta = model.meta();
    eprintln!("fitted {components} components in {} iterations", meta.iterations);
    write(out, &model.to_json())?;
    let summary = TrainSummary {
        model: out.display().to_string(),
        encoding,
        components,
        demos: demos.sequences.len(),
        frames: demos.frames,
        dropped_frames: demos.dropped,
        iterations: meta.iterations,
        final_log_likelihood: meta.final_log_likelihood,
        converged: meta.converged,
    };
    emit(&summary, format, || {
        format!(
            "model        {}\ncomponents   {}\ndemos        {}\nframes       {} ({} dropped)\niterations   {}\nlog-lik      {:.6}\nconverged    {}\n",
            summary.model,
            summary.components,
            summary.demos,
            summary.frames,
            summary.dropped_frames,
            summary.iterations,
            summary.final_log_likelihood,
            summary.converged
        )
    })
}

#[derive(Serialize)]
struct CalibrateSummary<'a> {
    calibration: String,
    #[serde(flatten)]
    values: &'a Calibration,
}

fn calibrate_cmd(model_path: &Path, dir: &Path, margin: f64, out: &Path, format: Format) -> Result<()> {
    let model = load_model(model_path)?;
    let encoding = model_encoding(&model, model_path)?;
    let (demos, _) = load_demos(dir, Some(encoding), EncodingArg::Directions)?;
    eprintln!("calibrating on {} demos (leave-one-out)", demos.sequences.len());
    let cal = calibrate(&model, &demos.sequences, margin)?;
    write(out, &cal.to_json())?;
    let summary = CalibrateSummary {
        calibration: out.display().to_string(),
        values: &cal,
    };
    emit(&summary, format, || {
        let mut s = format!("threshold  {:.6}\nmargin     {}\n", cal.threshold, cal.margin_multiplier);
        for (i, v) in cal.demo_scores.iter().enumerate() {
            s.push_str(&format!("demo {i:<5} {v:.6}\n"));
        }
        s
    })
}

#[derive(Serialize)]
struct ScoreOutput {
    #[serde(flatten)]
    report: ScoreReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    dropped_frames: usize,
}

fn score(model_path: &Path, cal_path: Option<&Path>, input: &Path, format: Format) -> Result<()> {
    let model = load_model(model_path)?;
    let encoding = model_encoding(&model, model_path)?;
    let calibration = cal_path
        .map(|p| Calibration::from_json(&read(p)?).with_context(|| format!("loading calibration {}", p.display())))
        .transpose()?;
    let frames = read_any_frames(input)?;
    let prepared = prepare_sequence(&frames, &encoding);
    if prepared.dropped > 0 {
        eprintln!("dropped {} of {} frames with missing body parts", prepared.dropped, frames.len());
    }
    let report = score_sequence(&prepared.sequence, &model, calibration.as_ref())?;
    let output = ScoreOutput {
        report,
        threshold: calibration.as_ref().map(|c| c.threshold),
        dropped_frames: prepared.dropped,
    };
    emit(&output, format, || {
        let r = &output.report;
        let mut s = format!(
            "frames      {} ({} dropped)\ntotal       {:.6}\nnormalized  {:.6}\n",
            r.frame_count, output.dropped_frames, r.total_log_likelihood, r.normalized_score
        );
        if let (Some(t), Some(v)) = (output.threshold, r.verdict) {
            s.push_str(&format!(
                "threshold   {t:.6}\nverdict     {}\n",
                serde_json::to_value(v).unwrap_or_default().as_str().unwrap_or("")
            ));
        }
        s
    })
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    t: f64,
    pose: &'a [f64],
    /// Row-major tangent covariance at `pose`.
    covariance: &'a [f64],
}

#[derive(Serialize)]
struct GenerateSummary {
    trajectory: String,
    frames: usize,
    encoding: PoseEncoding,
}

fn generate(model_path: &Path, frames: usize, out: &Path, format: Format) -> Result<()> {
    let model = load_model(model_path)?;
    let encoding = model_encoding(&model, model_path)?;
    let trajectory = generate_trajectory(&model, frames)?;
    let mut text = String::new();
    for p in &trajectory {
        let cov = p.covariance.transpose();
        let line = TrajectoryLine {
            t: p.time,
            pose: p.pose.as_slice(),
            covariance: cov.as_slice(),
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    write(out, &text)?;
    let summary = GenerateSummary {
        trajectory: out.display().to_string(),
        frames: trajectory.len(),
        encoding,
    };
    emit(&summary, format, || format!("wrote {} poses to {}\n", summary.frames, summary.trajectory))
}

fn coverage_cmd(input: &Path, format: Format) -> Result<()> {
    let frames = read_any_frames(input)?;
    let report = coverage(&frames, None)?;
    emit(&report, format, || report.to_table())
}

#[derive(Serialize)]
struct ConvertSummary {
    output: String,
    frames: usize,
}

fn convert(input: &Path, out: &Path, format: Format) -> Result<()> {
    let doc = parse_estimator_doc(&read(input)?)?;
    let frames: Vec<Body14Frame> = doc.iter().map(|f| map_coco18_to_body14(&f.skeleton, f.timestamp)).collect();
    write(out, &write_frames_ndjson(&frames))?;
    let summary = ConvertSummary {
        output: out.display().to_string(),
        frames: frames.len(),
    };
    emit(&summary, format, || {
        format!("converted {} frames to {}\n", summary.frames, summary.output)
    })
}

#[derive(Serialize)]
struct ReplaySummary {
    session: String,
    frames_sent: usize,
}

fn replay(input: &Path, addr: &str, session: &str, rate: f64, format: Format) -> Result<()> {
    let frames = read_frames_ndjson(&read(input)?)?;
    let stream = TcpStream::connect(addr).with_context(|| format!("connecting to {addr}"))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = std::io::BufWriter::new(stream);
    writeln!(writer, "{}", serde_json::json!({ "session": session }))?;
    writer.flush()?;
    let mut ack = String::new();
    reader.read_line(&mut ack)?;
    let ack: serde_json::Value = serde_json::from_str(ack.trim()).context("reading ingest acknowledgement")?;
    if let Some(err) = ack.get("error").and_then(|e| e.as_str()) {
        bail!("ingest refused the session: {err}");
    }
    eprintln!("streaming {} frames to {addr}", frames.len());
    let period = if rate > 0.0 { Some(Duration::from_secs_f64(1.0 / rate)) } else { None };
    let start = Instant::now();
    for (i, f) in frames.iter().enumerate() {
        if let Some(p) = period {
            let due = start + p * i as u32;
            let now = Instant::now();
            if due > now {
                writer.flush()?;
                std::thread::sleep(due - now);
            }
        }
        writer.write_all(encode_frame(f).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    let summary = ReplaySummary {
        session: session.to_owned(),
        frames_sent: frames.len(),
    };
    emit(&summary, format, || {
        format!("sent {} frames to session {}\n", summary.frames_sent, summary.session)
    })
}
