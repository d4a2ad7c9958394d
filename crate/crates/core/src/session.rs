//! The staged game protocol as a deterministic state machine.
//!
//! Inputs are facilitator commands, skeleton frames and clock ticks. Time is
//! stream time (frame timestamps and tick values), never the wall clock, so
//! replaying the same inputs reproduces the same state and events.
//!
//! Stage order: `Idle → Greeting → Pairing → InducedImitation →
//! SpontaneousImitation → Closing`, with `End` jumping to `Closing` from any
//! other stage.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{generate_trajectory, GmmError, GmmModel, TrajectoryPoint};
use crate::ingestion::{coverage_row, prepare_sequence, CoverageRow};
use crate::scoring::{score_sequence, Calibration, ScoreReport, Verdict};
use crate::skeleton::{Body14Frame, PoseEncoding};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("command {command} is not allowed in stage {stage:?}")]
    IllegalTransition { stage: SessionStage, command: &'static str },
    #[error("unknown gesture {0:?}")]
    UnknownGesture(String),
    #[error("no gesture selected")]
    NoGestureSelected,
    #[error("gesture id {0:?} is already in the library")]
    DuplicateGesture(String),
    #[error("gesture {id:?}: {reason}")]
    InvalidGesture { id: String, reason: String },
    #[error("corrupt log record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStage {
    Idle,
    Greeting,
    Pairing,
    InducedImitation,
    SpontaneousImitation,
    Closing,
}

impl SessionStage {
    pub const ALL: [SessionStage; 6] = [
        SessionStage::Idle,
        SessionStage::Greeting,
        SessionStage::Pairing,
        SessionStage::InducedImitation,
        SessionStage::SpontaneousImitation,
        SessionStage::Closing,
    ];

    /// Successor under `Advance`. `Idle` leaves only through `Start`.
    pub fn advanced(self) -> Option<SessionStage> {
        use SessionStage::*;
        match self {
            Greeting => Some(Pairing),
            Pairing => Some(InducedImitation),
            InducedImitation => Some(SpontaneousImitation),
            SpontaneousImitation => Some(Closing),
            Idle | Closing => None,
        }
    }

    pub fn is_imitation(self) -> bool {
        matches!(self, SessionStage::InducedImitation | SessionStage::SpontaneousImitation)
    }

    /// Whether `from → to` is a legal stage change.
    pub fn is_legal_transition(from: SessionStage, to: SessionStage) -> bool {
        (from == SessionStage::Idle && to == SessionStage::Greeting)
            || from.advanced() == Some(to)
            || (to == SessionStage::Closing && from != SessionStage::Closing)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionCommand {
    Start,
    Advance,
    SelectGesture { gesture_id: String },
    Prompt,
    StopCapture,
    End,
}

impl SessionCommand {
    pub fn name(&self) -> &'static str {
        match self {
            SessionCommand::Start => "start",
            SessionCommand::Advance => "advance",
            SessionCommand::SelectGesture { .. } => "select_gesture",
            SessionCommand::Prompt => "prompt",
            SessionCommand::StopCapture => "stop_capture",
            SessionCommand::End => "end",
        }
    }
}

/// A learned gesture available to the game.
#[derive(Debug, Clone)]
pub struct GestureEntry {
    pub id: String,
    pub display_name: String,
    /// Metadata only: whether the gesture involves an object.
    pub uses_object: bool,
    pub model: Arc<GmmModel>,
    pub calibration: Arc<Calibration>,
    reference: Arc<Vec<TrajectoryPoint>>,
}

impl GestureEntry {
    /// Builds an entry and precomputes its reference trajectory with
    /// `reference_frames` poses.
    pub fn new(
        id: impl Into<String>,
        display_name: impl Into<String>,
        uses_object: bool,
        model: GmmModel,
        calibration: Calibration,
        reference_frames: usize,
    ) -> Result<Self, SessionError> {
        let id = id.into();
        if model.encoding().is_none() {
            return Err(SessionError::InvalidGesture {
                id,
                reason: "model has no pose encoding".into(),
            });
        }
        let reference = generate_trajectory(&model, reference_frames).map_err(|e: GmmError| SessionError::InvalidGesture {
            id: id.clone(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            id,
            display_name: display_name.into(),
            uses_object,
            model: Arc::new(model),
            calibration: Arc::new(calibration),
            reference: Arc::new(reference),
        })
    }

    pub fn encoding(&self) -> PoseEncoding {
        self.model.encoding().expect("checked at construction")
    }

    pub fn reference(&self) -> &[TrajectoryPoint] {
        &self.reference
    }
}

#[derive(Debug, Clone, Default)]
pub struct GestureLibrary {
    entries: Vec<GestureEntry>,
}

impl GestureLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: GestureEntry) -> Result<(), SessionError> {
        if self.get(&entry.id).is_some() {
            return Err(SessionError::DuplicateGesture(entry.id));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&GestureEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GestureEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Seconds of stream time after which an open capture window closes.
    pub capture_timeout: f64,
    /// Minimum stream-time gap between two coverage events.
    pub coverage_interval: f64,
    pub reference_frames: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            capture_timeout: 5.0,
            coverage_interval: 0.2,
            reference_frames: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "gesture_id", rename_all = "snake_case")]
pub enum CaptureTarget {
    /// Prompted attempt at one gesture.
    Gesture(String),
    /// Unprompted attempt, matched against the whole library.
    Library,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureWindow {
    pub target: CaptureTarget,
    pub started_at: Option<f64>,
    pub frames: Vec<Body14Frame>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCounters {
    pub frames_received: u64,
    pub frames_discarded_idle: u64,
    pub frames_captured: u64,
    pub attempts_scored: u64,
    pub attempts_failed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub stage: SessionStage,
    pub selected_gesture: Option<String>,
    pub capture: Option<CaptureWindow>,
    /// Latest stream time seen.
    pub clock: Option<f64>,
    pub last_coverage_at: Option<f64>,
    /// Sequence number the next event will carry.
    pub next_sequence: u64,
    pub counters: SessionCounters,
}

impl Default for SessionState {
    fn default() -> Self {
        Self {
            stage: SessionStage::Idle,
            selected_gesture: None,
            capture: None,
            clock: None,
            last_coverage_at: None,
            next_sequence: 1,
            counters: SessionCounters::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptMode {
    Induced,
    Spontaneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub gesture_id: String,
    #[serde(with = "crate::scoring::lenient_f64")]
    pub normalized_score: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptResult {
    /// The prompted gesture, or the best-scoring one for library attempts.
    pub gesture_id: String,
    pub mode: AttemptMode,
    pub threshold: f64,
    pub report: ScoreReport,
    pub dropped_frames: usize,
    /// Every gesture scored, in library order (library attempts only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    StateChanged {
        stage: SessionStage,
        previous: SessionStage,
        selected_gesture: Option<String>,
    },
    FrameCoverage(CoverageRow),
    ReferencePose {
        gesture_id: String,
        index: usize,
        total: usize,
        time: f64,
        pose: Vec<f64>,
    },
    AttemptScored(AttemptResult),
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub sequence_number: u64,
    /// Stream time at emission.
    pub timestamp: f64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

/// One input to the state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum SessionInput {
    Command { command: SessionCommand },
    Frame { frame: Body14Frame },
    Tick { time: f64 },
}

/// Transition logic bound to a gesture library.
#[derive(Debug, Clone)]
pub struct SessionMachine {
    library: Arc<GestureLibrary>,
    config: SessionConfig,
}

impl SessionMachine {
    pub fn new(library: Arc<GestureLibrary>, config: SessionConfig) -> Self {
        Self { library, config }
    }

    pub fn library(&self) -> &GestureLibrary {
        &self.library
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Applies a facilitator command. On error `state` is left untouched and
    /// no event is emitted.
    pub fn handle_command(&self, state: &mut SessionState, command: &SessionCommand) -> Result<Vec<SessionEvent>, SessionError> {
        use SessionStage::*;
        let illegal = || SessionError::IllegalTransition {
            stage: state.stage,
            command: command.name(),
        };
        let mut events = Vec::new();
        match command {
            SessionCommand::Start => {
                if state.stage != Idle {
                    return Err(illegal());
                }
                self.change_stage(state, Greeting, &mut events);
            }
            SessionCommand::Advance => {
                let next = state.stage.advanced().ok_or_else(illegal)?;
                self.change_stage(state, next, &mut events);
            }
            SessionCommand::End => {
                if state.stage == Closing {
                    return Err(illegal());
                }
                self.change_stage(state, Closing, &mut events);
            }
            SessionCommand::SelectGesture { gesture_id } => {
                if !state.stage.is_imitation() {
                    return Err(illegal());
                }
                if self.library.get(gesture_id).is_none() {
                    return Err(SessionError::UnknownGesture(gesture_id.clone()));
                }
                state.selected_gesture = Some(gesture_id.clone());
                let payload = EventPayload::StateChanged {
                    stage: state.stage,
                    previous: state.stage,
                    selected_gesture: state.selected_gesture.clone(),
                };
                emit(state, payload, &mut events);
            }
            SessionCommand::Prompt => {
                if !state.stage.is_imitation() {
                    return Err(illegal());
                }
                let id = state.selected_gesture.clone().ok_or(SessionError::NoGestureSelected)?;
                let entry = self.library.get(&id).ok_or_else(|| SessionError::UnknownGesture(id.clone()))?;
                let total = entry.reference().len();
                for (index, p) in entry.reference().iter().enumerate() {
                    let payload = EventPayload::ReferencePose {
                        gesture_id: id.clone(),
                        index,
                        total,
                        time: p.time,
                        pose: p.pose.iter().copied().collect(),
                    };
                    emit(state, payload, &mut events);
                }
                state.capture = Some(CaptureWindow {
                    target: CaptureTarget::Gesture(id),
                    started_at: state.clock,
                    frames: Vec::new(),
                });
            }
            SessionCommand::StopCapture => {
                let window = state.capture.take().ok_or_else(illegal)?;
                self.close_window(state, window, &mut events);
                self.reopen_library_window(state, None);
            }
        }
        Ok(events)
    }

    /// Feeds one skeleton frame. Frames before `Start` are counted and dropped.
    pub fn on_frame(&self, state: &mut SessionState, frame: &Body14Frame) -> Vec<SessionEvent> {
        let mut events = Vec::new();
        state.counters.frames_received += 1;
        if state.stage == SessionStage::Idle {
            state.counters.frames_discarded_idle += 1;
            return events;
        }
        let t = frame.timestamp;
        state.clock = Some(t);
        let due = match state.last_coverage_at {
            None => true,
            Some(last) => t - last >= self.config.coverage_interval || t < last,
        };
        if due {
            state.last_coverage_at = Some(t);
            emit(state, EventPayload::FrameCoverage(coverage_row(frame, format!("t={t}"))), &mut events);
        }
        self.expire_window(state, t, &mut events);
        if let Some(window) = state.capture.as_mut() {
            window.started_at.get_or_insert(t);
            window.frames.push(frame.clone());
            state.counters.frames_captured += 1;
        }
        events
    }

    /// Advances stream time without a frame, closing an expired window.
    pub fn on_tick(&self, state: &mut SessionState, time: f64) -> Vec<SessionEvent> {
        let mut events = Vec::new();
        if state.stage == SessionStage::Idle || !time.is_finite() {
            return events;
        }
        state.clock = Some(state.clock.map_or(time, |c| c.max(time)));
        self.expire_window(state, time, &mut events);
        events
    }

    pub fn apply(&self, state: &mut SessionState, input: &SessionInput) -> Result<Vec<SessionEvent>, SessionError> {
        match input {
            SessionInput::Command { command } => self.handle_command(state, command),
            SessionInput::Frame { frame } => Ok(self.on_frame(state, frame)),
            SessionInput::Tick { time } => Ok(self.on_tick(state, *time)),
        }
    }

    fn expire_window(&self, state: &mut SessionState, now: f64, events: &mut Vec<SessionEvent>) {
        let expired = state
            .capture
            .as_ref()
            .and_then(|w| w.started_at)
            .is_some_and(|s| now - s >= self.config.capture_timeout);
        if expired {
            let window = state.capture.take().expect("checked above");
            self.close_window(state, window, events);
            self.reopen_library_window(state, Some(now));
        }
    }

    fn reopen_library_window(&self, state: &mut SessionState, started_at: Option<f64>) {
        if state.stage == SessionStage::SpontaneousImitation && state.capture.is_none() && !self.library.is_empty() {
            state.capture = Some(CaptureWindow {
                target: CaptureTarget::Library,
                started_at,
                frames: Vec::new(),
            });
        }
    }

    fn change_stage(&self, state: &mut SessionState, to: SessionStage, events: &mut Vec<SessionEvent>) {
        let previous = state.stage;
        state.stage = to;
        state.capture = None;
        let payload = EventPayload::StateChanged {
            stage: to,
            previous,
            selected_gesture: state.selected_gesture.clone(),
        };
        emit(state, payload, events);
        self.reopen_library_window(state, None);
    }

    fn close_window(&self, state: &mut SessionState, window: CaptureWindow, events: &mut Vec<SessionEvent>) {
        let result = match &window.target {
            CaptureTarget::Gesture(id) => match self.library.get(id) {
                Some(entry) => score_attempt(entry, &window.frames).map(|(report, dropped)| AttemptResult {
                    gesture_id: id.clone(),
                    mode: AttemptMode::Induced,
                    threshold: entry.calibration.threshold,
                    report,
                    dropped_frames: dropped,
                    candidates: Vec::new(),
                }),
                None => Err(format!("unknown gesture {id:?}")),
            },
            CaptureTarget::Library => self.score_against_library(&window.frames),
        };
        let payload = match result {
            Ok(r) => {
                state.counters.attempts_scored += 1;
                EventPayload::AttemptScored(r)
            }
            Err(message) => {
                state.counters.attempts_failed += 1;
                EventPayload::Error { message }
            }
        };
        emit(state, payload, events);
    }

    /// Scores against every gesture; the best normalized score wins, first
    /// in library order on ties.
    fn score_against_library(&self, frames: &[Body14Frame]) -> Result<AttemptResult, String> {
        let mut best: Option<(usize, ScoreReport, usize)> = None;
        let mut candidates = Vec::new();
        let mut last_error = String::from("no gestures in library");
        for (i, entry) in self.library.iter().enumerate() {
            match score_attempt(entry, frames) {
                Ok((report, dropped)) => {
                    candidates.push(CandidateScore {
                        gesture_id: entry.id.clone(),
                        normalized_score: report.normalized_score,
                        verdict: report.verdict.unwrap_or(Verdict::Fail),
                    });
                    if best.as_ref().is_none_or(|(_, b, _)| report.normalized_score > b.normalized_score) {
                        best = Some((i, report, dropped));
                    }
                }
                Err(e) => last_error = e,
            }
        }
        let (i, report, dropped) = best.ok_or(last_error)?;
        let entry = self.library.iter().nth(i).expect("index from iteration");
        Ok(AttemptResult {
            gesture_id: entry.id.clone(),
            mode: AttemptMode::Spontaneous,
            threshold: entry.calibration.threshold,
            report,
            dropped_frames: dropped,
            candidates,
        })
    }
}

fn emit(state: &mut SessionState, payload: EventPayload, events: &mut Vec<SessionEvent>) {
    events.push(SessionEvent {
        sequence_number: state.next_sequence,
        timestamp: state.clock.unwrap_or(0.0),
        payload,
    });
    state.next_sequence += 1;
}

fn score_attempt(entry: &GestureEntry, frames: &[Body14Frame]) -> Result<(ScoreReport, usize), String> {
    if frames.is_empty() {
        return Err("no frames captured".into());
    }
    let prepared = prepare_sequence(frames, &entry.encoding());
    if prepared.sequence.is_empty() {
        return Err("frames dropped: all".into());
    }
    let report = score_sequence(&prepared.sequence, &entry.model, Some(&entry.calibration)).map_err(|e| e.to_string())?;
    Ok((report, prepared.dropped))
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub n: u64,
    #[serde(flatten)]
    pub entry: LogEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum LogEntry {
    Input { input: SessionInput },
    Event { event: SessionEvent },
}

/// A state machine, its state, and an append-only NDJSON log of every input
/// and emitted event.
pub struct Session<W: Write> {
    machine: SessionMachine,
    state: SessionState,
    log: W,
    next_record: u64,
}

impl<W: Write> Session<W> {
    pub fn new(machine: SessionMachine, log: W) -> Self {
        Self {
            machine,
            state: SessionState::default(),
            log,
            next_record: 1,
        }
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn machine(&self) -> &SessionMachine {
        &self.machine
    }

    pub fn log(&self) -> &W {
        &self.log
    }

    pub fn into_log(self) -> W {
        self.log
    }

    /// Applies `input`, logging it and its events. Logging failures are
    /// returned after the state has changed.
    pub fn apply(&mut self, input: SessionInput) -> std::io::Result<Result<Vec<SessionEvent>, SessionError>> {
        let outcome = self.machine.apply(&mut self.state, &input);
        self.write(LogEntry::Input { input })?;
        if let Ok(events) = &outcome {
            for event in events {
                self.write(LogEntry::Event { event: event.clone() })?;
            }
        }
        self.log.flush()?;
        Ok(outcome)
    }

    fn write(&mut self, entry: LogEntry) -> std::io::Result<()> {
        let record = LogRecord { n: self.next_record, entry };
        self.next_record += 1;
        serde_json::to_writer(&mut self.log, &record)?;
        self.log.write_all(b"\n")
    }
}

/// Parses an NDJSON session log. Blank lines are ignored; record numbers
/// must increase strictly.
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>, SessionError> {
    let mut records: Vec<LogRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(line).map_err(|e| SessionError::CorruptRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if records.last().is_some_and(|prev| record.n <= prev.n) {
            return Err(SessionError::CorruptRecord {
                line: i + 1,
                reason: format!("record number {} out of order", record.n),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Re-applies every logged input from the initial state. Logged events are
/// outputs and are skipped; commands that failed live fail identically here
/// and leave the state unchanged.
pub fn replay_log(machine: &SessionMachine, records: &[LogRecord]) -> Result<SessionState, SessionError> {
    if let Some(w) = records.windows(2).position(|w| w[1].n <= w[0].n) {
        return Err(SessionError::CorruptRecord {
            line: w + 2,
            reason: "record numbers out of order".into(),
        });
    }
    let mut state = SessionState::default();
    for record in records {
        if let LogEntry::Input { input } = &record.entry {
            let _ = machine.apply(&mut state, input);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine() -> SessionMachine {
        SessionMachine::new(Arc::new(GestureLibrary::new()), SessionConfig::default())
    }

    #[test]
    fn stage_order() {
        let m = machine();
        let mut s = SessionState::default();
        let ev = m.handle_command(&mut s, &SessionCommand::Start).unwrap();
        assert_eq!(s.stage, SessionStage::Greeting);
        assert_eq!(ev.len(), 1);
        assert!(matches!(
            ev[0].payload,
            EventPayload::StateChanged {
                stage: SessionStage::Greeting,
                previous: SessionStage::Idle,
                ..
            }
        ));
        m.handle_command(&mut s, &SessionCommand::Advance).unwrap();
        assert_eq!(s.stage, SessionStage::Pairing);
        m.handle_command(&mut s, &SessionCommand::Advance).unwrap();
        assert_eq!(s.stage, SessionStage::InducedImitation);
        m.handle_command(&mut s, &SessionCommand::Advance).unwrap();
        assert_eq!(s.stage, SessionStage::SpontaneousImitation);
        m.handle_command(&mut s, &SessionCommand::Advance).unwrap();
        assert_eq!(s.stage, SessionStage::Closing);
        assert_eq!(s.next_sequence, 6);
    }

    #[test]
    fn illegal_commands_leave_state_untouched() {
        let m = machine();
        let mut s = SessionState::default();
        let before = s.clone();
        let err = m
            .handle_command(&mut s, &SessionCommand::SelectGesture { gesture_id: "wave".into() })
            .unwrap_err();
        assert_eq!(
            err,
            SessionError::IllegalTransition {
                stage: SessionStage::Idle,
                command: "select_gesture"
            }
        );
        assert_eq!(s, before);
        assert!(m.handle_command(&mut s, &SessionCommand::Advance).is_err());
        assert!(m.handle_command(&mut s, &SessionCommand::StopCapture).is_err());
        m.handle_command(&mut s, &SessionCommand::End).unwrap();
        assert_eq!(s.stage, SessionStage::Closing);
        assert!(m.handle_command(&mut s, &SessionCommand::End).is_err());
    }

    #[test]
    fn frames_before_start_are_counted_and_dropped() {
        let m = machine();
        let mut s = SessionState::default();
        let f = Body14Frame::empty(0.0, crate::skeleton::Dimension::Two);
        assert!(m.on_frame(&mut s, &f).is_empty());
        assert_eq!(s.counters.frames_discarded_idle, 1);
        assert_eq!(s.clock, None);
    }

    #[test]
    fn coverage_is_throttled() {
        let m = machine();
        let mut s = SessionState::default();
        m.handle_command(&mut s, &SessionCommand::Start).unwrap();
        let mut coverage = 0;
        for i in 0..30 {
            let f = Body14Frame::empty(i as f64 / 30.0, crate::skeleton::Dimension::Two);
            let ev = m.on_frame(&mut s, &f);
            coverage += ev.iter().filter(|e| matches!(e.payload, EventPayload::FrameCoverage(_))).count();
        }
        assert!(coverage <= 5, "{coverage}");
        assert!(coverage >= 4);
    }

    #[test]
    fn log_rejects_truncated_and_out_of_order_lines() {
        let mut session = Session::new(machine(), Vec::new());
        session
            .apply(SessionInput::Command {
                command: SessionCommand::Start,
            })
            .unwrap()
            .unwrap();
        session.apply(SessionInput::Tick { time: 1.0 }).unwrap().unwrap();
        let text = String::from_utf8(session.into_log()).unwrap();
        let records = parse_log(&text).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(replay_log(&machine(), &records).unwrap().stage, SessionStage::Greeting);

        let truncated = &text[..text.len() - 5];
        assert!(matches!(parse_log(truncated), Err(SessionError::CorruptRecord { line: 3, .. })));
        let mut swapped: Vec<&str> = text.lines().collect();
        swapped.swap(0, 1);
        assert!(matches!(parse_log(&swapped.join("\n")), Err(SessionError::CorruptRecord { line: 2, .. })));
        assert_eq!(replay_log(&machine(), &[]).unwrap(), SessionState::default());
    }

    #[test]
    fn command_json_shape() {
        let c: SessionCommand = serde_json::from_str(r#"{"kind":"select_gesture","gesture_id":"wave"}"#).unwrap();
        assert_eq!(c, SessionCommand::SelectGesture { gesture_id: "wave".into() });
        let c: SessionCommand = serde_json::from_str(r#"{"kind":"stop_capture"}"#).unwrap();
        assert_eq!(c, SessionCommand::StopCapture);
    }
}
