//! Preference collection: sessions walk a worker through one task batch,
//! enforce the 4-second answer lockout from server-side serve times, append
//! every answer to a CSV log, and accept or reject the batch from its hidden
//! control questions.
//!
//! [`Collector`] holds the state machine; [`http`] exposes it over HTTP.

pub mod http;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, validate_hit, Choice, ControlKey, DatasetError, Demographics, HitBatch, HitVerdict, Response};

/// Minimum time between serving a task and accepting its answer.
pub const LOCKOUT_MS: u64 = 4000;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("no task batches remaining")]
    NoBatches,
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} is already finished")]
    SessionClosed(String),
    #[error("pair {got:?} is not the current task (expected {expected:?})")]
    OutOfOrder { expected: String, got: String },
    #[error("invalid choice {0:?} (expected A or B)")]
    BadChoice(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt state file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServerError + '_ {
    move |source| ServerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Source of wall-clock milliseconds.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// A clock that only moves when told to; clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Task batches plus the ids of the intentionally ugly shapes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchFile {
    pub ugly_shapes: Vec<String>,
    pub batches: Vec<HitBatch>,
}

impl BatchFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ServerError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ServerError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("batch file serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn control_key(&self) -> ControlKey {
        ControlKey::new(self.ugly_shapes.iter().cloned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Active,
    /// All tasks answered and every control correct.
    Completed,
    /// All tasks answered but a control was missed.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub worker_id: String,
    /// Index into the batch list.
    pub batch: usize,
    /// Next task to answer.
    pub cursor: usize,
    /// Serve time of each task served so far.
    pub served_at_ms: Vec<u64>,
    pub state: SessionState,
    pub demographics: Option<Demographics>,
}

/// What the client sees of a task; control status is never exposed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub pair_id: String,
    /// Zero-based position within the batch.
    pub index: usize,
    pub total: usize,
    pub shape_a: String,
    pub shape_b: String,
    pub lockout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnswerOutcome {
    /// Too early: nothing recorded, same task still current.
    Retry { retry_after_ms: u64 },
    Next(TaskView),
    Finished(SessionState),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusView {
    pub state: SessionState,
    /// Answered tasks.
    pub progress: usize,
    pub total: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SessionFile {
    next_session: u64,
    sessions: Vec<Session>,
}

#[derive(Default)]
struct State {
    next_session: u64,
    sessions: BTreeMap<String, Session>,
    responses: Vec<Response>,
}

/// Collection state machine. All mutations go through one lock, so each
/// session's transitions and the log's row order are serialized.
pub struct Collector {
    batches: Vec<HitBatch>,
    key: ControlKey,
    clock: Arc<dyn Clock>,
    log_path: Option<PathBuf>,
    state: Mutex<State>,
}

impl Collector {
    /// An in-memory collector (nothing written to disk).
    pub fn new(batches: BatchFile, clock: Arc<dyn Clock>) -> Self {
        Collector {
            key: batches.control_key(),
            batches: batches.batches,
            clock,
            log_path: None,
            state: Mutex::new(State::default()),
        }
    }

    /// A collector backed by an append-only response log at `log_path` and a
    /// session snapshot next to it; existing files are resumed.
    pub fn open(batches: BatchFile, clock: Arc<dyn Clock>, log_path: impl Into<PathBuf>) -> Result<Self, ServerError> {
        let log_path = log_path.into();
        let mut state = State::default();
        if log_path.exists() {
            let file = File::open(&log_path).map_err(io_err(&log_path))?;
            state.responses = dataset::read_responses(file)?;
        } else {
            let file = File::create(&log_path).map_err(io_err(&log_path))?;
            dataset::write_responses(&[], file)?;
        }
        let sessions_path = Self::sessions_path_for(&log_path);
        if sessions_path.exists() {
            let text = fs::read_to_string(&sessions_path).map_err(io_err(&sessions_path))?;
            let file: SessionFile = serde_json::from_str(&text).map_err(|e| ServerError::Corrupt {
                path: sessions_path.clone(),
                message: e.to_string(),
            })?;
            state.next_session = file.next_session;
            state.sessions = file.sessions.into_iter().map(|s| (s.session_id.clone(), s)).collect();
        }
        Ok(Collector {
            key: batches.control_key(),
            batches: batches.batches,
            clock,
            log_path: Some(log_path),
            state: Mutex::new(state),
        })
    }

    /// `<log>.sessions.json`.
    pub fn sessions_path_for(log_path: &Path) -> PathBuf {
        let mut name = log_path.as_os_str().to_owned();
        name.push(".sessions.json");
        PathBuf::from(name)
    }

    pub fn batches(&self) -> &[HitBatch] {
        &self.batches
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist_sessions(&self, state: &State) -> Result<(), ServerError> {
        let Some(log) = &self.log_path else { return Ok(()) };
        let path = Self::sessions_path_for(log);
        let file = SessionFile {
            next_session: state.next_session,
            sessions: state.sessions.values().cloned().collect(),
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&file).expect("sessions serialize")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn append_log(&self, response: &Response) -> Result<(), ServerError> {
        let Some(path) = &self.log_path else { return Ok(()) };
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        let mut buf = Vec::new();
        dataset::write_responses(std::slice::from_ref(response), &mut buf)?;
        // Drop the header line the writer emits.
        let row = buf.splitn(2, |&b| b == b'\n').nth(1).unwrap_or_default();
        let mut w = BufWriter::new(file);
        w.write_all(row).and_then(|_| w.flush()).map_err(io_err(path))
    }

    fn view(&self, session: &Session) -> TaskView {
        let batch = &self.batches[session.batch];
        let task = &batch.tasks[session.cursor];
        TaskView {
            pair_id: task.pair_id.clone(),
            index: session.cursor,
            total: batch.tasks.len(),
            shape_a: task.shape_a.clone(),
            shape_b: task.shape_b.clone(),
            lockout_ms: LOCKOUT_MS,
        }
    }

    /// Assigns the next unused batch to a new session and serves its first task.
    pub fn start_session(
        &self,
        worker_id: &str,
        demographics: Option<Demographics>,
    ) -> Result<(String, TaskView), ServerError> {
        let mut state = self.lock();
        let batch = state.sessions.len();
        if batch >= self.batches.len() {
            return Err(ServerError::NoBatches);
        }
        state.next_session += 1;
        let session_id = format!("sess-{:04}", state.next_session);
        let session = Session {
            session_id: session_id.clone(),
            worker_id: worker_id.to_string(),
            batch,
            cursor: 0,
            served_at_ms: vec![self.clock.now_ms()],
            state: SessionState::Active,
            demographics,
        };
        let view = self.view(&session);
        state.sessions.insert(session_id.clone(), session);
        self.persist_sessions(&state)?;
        Ok((session_id, view))
    }

    /// Records an answer to the current task if its lockout has expired.
    pub fn submit(&self, session_id: &str, pair_id: &str, choice: &str) -> Result<AnswerOutcome, ServerError> {
        let mut state = self.lock();
        let now = self.clock.now_ms();
        let session = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServerError::UnknownSession(session_id.to_string()))?;
        if session.state != SessionState::Active {
            return Err(ServerError::SessionClosed(session_id.to_string()));
        }
        let batch = &self.batches[session.batch];
        let task = &batch.tasks[session.cursor];
        if task.pair_id != pair_id {
            return Err(ServerError::OutOfOrder {
                expected: task.pair_id.clone(),
                got: pair_id.to_string(),
            });
        }
        let choice: Choice = choice.parse().map_err(|_| ServerError::BadChoice(choice.to_string()))?;
        let elapsed = now.saturating_sub(session.served_at_ms[session.cursor]);
        if elapsed < LOCKOUT_MS {
            return Ok(AnswerOutcome::Retry {
                retry_after_ms: LOCKOUT_MS - elapsed,
            });
        }
        let response = Response {
            hit_id: batch.hit_id.clone(),
            pair: task.clone(),
            worker_id: session.worker_id.clone(),
            choice,
            elapsed_ms: elapsed,
            timestamp_ms: now,
        };
        self.append_log(&response)?;
        state.responses.push(response);

        let state = &mut *state;
        let session = state.sessions.get_mut(session_id).expect("session exists");
        session.cursor += 1;
        let outcome = if session.cursor == batch.tasks.len() {
            let mine: Vec<Response> = state.responses.iter().filter(|r| r.hit_id == batch.hit_id).cloned().collect();
            session.state = match validate_hit(batch, &mine, &self.key)? {
                HitVerdict::Accepted => SessionState::Completed,
                HitVerdict::Rejected => SessionState::Rejected,
            };
            AnswerOutcome::Finished(session.state)
        } else {
            session.served_at_ms.push(now);
            AnswerOutcome::Next(self.view(session))
        };
        self.persist_sessions(state)?;
        Ok(outcome)
    }

    pub fn status(&self, session_id: &str) -> Result<StatusView, ServerError> {
        let state = self.lock();
        let s = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServerError::UnknownSession(session_id.to_string()))?;
        Ok(StatusView {
            state: s.state,
            progress: s.cursor,
            total: self.batches[s.batch].tasks.len(),
        })
    }

    /// The task awaiting an answer, if the session is still active.
    pub fn current_task(&self, session_id: &str) -> Result<Option<TaskView>, ServerError> {
        let state = self.lock();
        let s = state
            .sessions
            .get(session_id)
            .ok_or_else(|| ServerError::UnknownSession(session_id.to_string()))?;
        Ok((s.state == SessionState::Active).then(|| self.view(s)))
    }

    pub fn sessions(&self) -> Vec<Session> {
        self.lock().sessions.values().cloned().collect()
    }

    /// Demographics by worker, as submitted (later sessions win).
    pub fn demographics(&self) -> BTreeMap<String, Demographics> {
        let state = self.lock();
        state
            .sessions
            .values()
            .filter_map(|s| s.demographics.clone().map(|d| (s.worker_id.clone(), d)))
            .collect()
    }

    /// Recorded responses in log order, optionally only from accepted sessions.
    pub fn responses(&self, accepted_only: bool) -> Vec<Response> {
        let state = self.lock();
        if !accepted_only {
            return state.responses.clone();
        }
        let accepted: Vec<&str> = state
            .sessions
            .values()
            .filter(|s| s.state == SessionState::Completed)
            .map(|s| self.batches[s.batch].hit_id.as_str())
            .collect();
        state.responses.iter().filter(|r| accepted.contains(&r.hit_id.as_str())).cloned().collect()
    }

    /// The response log as CSV.
    pub fn export_csv(&self, accepted_only: bool) -> Result<String, ServerError> {
        let mut buf = Vec::new();
        dataset::write_responses(&self.responses(accepted_only), &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_hits;

    fn shapes(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn batch_file(n: usize) -> BatchFile {
        let uglies = shapes("ugly", 2);
        BatchFile {
            batches: make_hits(&shapes("s", 10), &uglies, n, 7).unwrap(),
            ugly_shapes: uglies,
        }
    }

    fn collector(n: usize) -> (Collector, ManualClock) {
        let clock = ManualClock::new(1_000_000);
        (Collector::new(batch_file(n), Arc::new(clock.clone())), clock)
    }

    /// Answers every remaining task after waiting `wait` ms, flipping the
    /// first `wrong` control answers.
    fn run_session(c: &Collector, clock: &ManualClock, id: &str, first: TaskView, wrong: usize) -> SessionState {
        let key = ControlKey::new(shapes("ugly", 2));
        let mut task = first;
        let mut wrong_left = wrong;
        loop {
            clock.advance(LOCKOUT_MS + 100);
            let mut choice = if key.ugly_shapes.contains(&task.shape_a) { Choice::B } else { Choice::A };
            let is_control = key.ugly_shapes.contains(&task.shape_a) || key.ugly_shapes.contains(&task.shape_b);
            if is_control && wrong_left > 0 {
                choice = choice.other();
                wrong_left -= 1;
            }
            match c.submit(id, &task.pair_id, &choice.to_string()).unwrap() {
                AnswerOutcome::Next(t) => task = t,
                AnswerOutcome::Finished(s) => return s,
                AnswerOutcome::Retry { .. } => panic!("unexpected retry"),
            }
        }
    }

    #[test]
    fn capacity_and_distinct_batches() {
        let (c, _) = collector(3);
        let ids: Vec<String> = (0..3).map(|_| c.start_session("same", None).unwrap().0).collect();
        assert!(matches!(c.start_session("w", None), Err(ServerError::NoBatches)));
        let batches: Vec<usize> = c.sessions().iter().map(|s| s.batch).collect();
        assert_eq!(batches, [0, 1, 2]);
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn lockout_and_errors() {
        let (c, clock) = collector(1);
        let (id, task) = c.start_session("w", None).unwrap();
        clock.advance(2000);
        assert_eq!(
            c.submit(&id, &task.pair_id, "A").unwrap(),
            AnswerOutcome::Retry { retry_after_ms: 2000 }
        );
        assert_eq!(c.status(&id).unwrap().progress, 0);
        assert!(matches!(c.submit("nope", &task.pair_id, "A"), Err(ServerError::UnknownSession(_))));
        assert!(matches!(c.submit(&id, "other", "A"), Err(ServerError::OutOfOrder { .. })));
        assert!(matches!(c.submit(&id, &task.pair_id, "C"), Err(ServerError::BadChoice(_))));
        clock.advance(2100);
        match c.submit(&id, &task.pair_id, "A").unwrap() {
            AnswerOutcome::Next(t) => assert_eq!(t.index, 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(c.responses(false)[0].elapsed_ms, 4100);
    }

    #[test]
    fn acceptance_follows_controls() {
        let (c, clock) = collector(2);
        let (good, t) = c.start_session("w1", None).unwrap();
        assert_eq!(run_session(&c, &clock, &good, t, 0), SessionState::Completed);
        let (bad, t) = c.start_session("w2", None).unwrap();
        assert_eq!(run_session(&c, &clock, &bad, t, 1), SessionState::Rejected);
        assert!(matches!(c.submit(&bad, "x", "A"), Err(ServerError::SessionClosed(_))));
        assert_eq!(c.responses(false).len(), 60);
        let accepted = c.responses(true);
        assert_eq!(accepted.len(), 30);
        assert!(accepted.iter().all(|r| r.worker_id == "w1"));
        assert!(c.responses(false).iter().all(|r| r.elapsed_ms >= LOCKOUT_MS));
    }

    #[test]
    fn empty_export_is_header_only() {
        let (c, _) = collector(1);
        assert_eq!(c.export_csv(false).unwrap(), dataset::LOG_HEADER.join(",") + "\n");
    }

    #[test]
    fn restart_resumes_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.csv");
        let clock = ManualClock::new(0);
        let c = Collector::open(batch_file(2), Arc::new(clock.clone()), &log).unwrap();
        let demo = Demographics {
            gender: None,
            age_group: Some("21-30".into()),
            region: Some("Europe".into()),
        };
        let (id, task) = c.start_session("w", Some(demo.clone())).unwrap();
        clock.advance(5000);
        c.submit(&id, &task.pair_id, "B").unwrap();
        let before = c.export_csv(false).unwrap();
        drop(c);

        let c = Collector::open(batch_file(2), Arc::new(clock.clone()), &log).unwrap();
        assert_eq!(c.export_csv(false).unwrap(), before);
        assert_eq!(fs::read_to_string(&log).unwrap(), before);
        assert_eq!(c.status(&id).unwrap().progress, 1);
        assert_eq!(c.demographics()["w"], demo);
        // The second task was served before the restart; its lockout still counts.
        let next = c.current_task(&id).unwrap().unwrap();
        assert!(matches!(c.submit(&id, &next.pair_id, "A").unwrap(), AnswerOutcome::Retry { .. }));
        let (id2, _) = c.start_session("w2", None).unwrap();
        assert_ne!(id, id2);
    }
}
