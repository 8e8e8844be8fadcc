//! Sessions persisted as JSON-lines event logs under a data directory.
//!
//! Each session lives in `<data-dir>/<id>/`: `events.jsonl` holds the log and
//! `labels.json` the held-out labels. A session not in memory is rebuilt by
//! replaying its log, so a restarted service continues where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use irda_core::alignment::advance;
use irda_core::reward::{build_baseline_context, evaluate, Evaluation, LabeledItem, Metric, RewardModelContext};
use irda_core::session::{read_log, Event, JsonlSink, Phase, Pools, Prompt, Session, Step};
use irda_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::Backends;
use crate::manifest::{ExperimentManifest, Population};

/// An API failure with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(422, "validation", message)
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(404, "not_found", format!("no session {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Phase(_) => ApiError::new(409, "phase_conflict", message),
            Error::Backend(_) => ApiError::new(502, "backend", message),
            e if e.is_validation() => ApiError::validation(message),
            _ => ApiError::new(500, "internal", message),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::new(500, "internal", e.to_string())
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// A label given either as a boolean or as one of the session's label words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Aligned(bool),
    Word(String),
}

impl LabelValue {
    fn resolve(&self, session: &Session) -> ApiResult<bool> {
        match self {
            LabelValue::Aligned(b) => Ok(*b),
            LabelValue::Word(w) => session.labels.polarity(w).ok_or_else(|| {
                ApiError::validation(format!(
                    "label: expected true, false, {:?} or {:?}, got {w:?}",
                    session.labels.aligned, session.labels.misaligned
                ))
            }),
        }
    }
}

/// A critique or explanation (`label` + `explanation`) or an answer to a
/// hypothesis (`response` + `stable`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackBody {
    pub label: Option<LabelValue>,
    pub explanation: Option<String>,
    pub response: Option<String>,
    pub stable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestLabel {
    pub stimulus_id: String,
    pub label: LabelValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsBody {
    pub labels: Vec<TestLabel>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateBody {
    pub metric: Option<Metric>,
}

/// The next thing the human should do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NextPrompt {
    Session(Prompt),
    Label(LabelPrompt),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrompt {
    /// Always `"label"`.
    pub kind: String,
    pub stimulus_id: String,
    pub encoded: String,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextView {
    pub id: String,
    pub phase: Phase,
    pub prompt: NextPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: Session,
    pub test_labels: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsView {
    pub labeled: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationView {
    pub metric: Metric,
    pub labeled: usize,
    pub irda: Evaluation,
    pub l_b: Evaluation,
}

struct Entry {
    session: Session,
    pools: Pools,
    labels: BTreeMap<String, bool>,
    dir: PathBuf,
}

impl Entry {
    fn sink(&self) -> ApiResult<JsonlSink<File>> {
        let file = OpenOptions::new().create(true).append(true).open(self.dir.join(LOG))?;
        Ok(JsonlSink::new(file))
    }

    fn advance(&mut self, backends: &Backends) -> ApiResult<()> {
        let backend = backends.for_env(self.session.config.env);
        let mut sink = self.sink()?;
        advance(&mut self.session, &self.pools, backend, &mut sink)?;
        Ok(())
    }

    fn commit(&mut self, event: Event) -> ApiResult<()> {
        let mut sink = self.sink()?;
        self.session.commit(event, &mut sink)?;
        Ok(())
    }

    fn next_view(&self) -> ApiResult<NextView> {
        let prompt = match self.session.prompt(&self.pools)? {
            Some(Prompt::Done) => {
                let unlabeled: Vec<_> = self
                    .pools
                    .test
                    .iter()
                    .filter(|s| !self.labels.contains_key(s.id()))
                    .collect();
                match unlabeled.first() {
                    Some(s) => NextPrompt::Label(LabelPrompt {
                        kind: "label".into(),
                        stimulus_id: s.id().to_string(),
                        encoded: s.encode(),
                        remaining: unlabeled.len(),
                    }),
                    None => NextPrompt::Session(Prompt::Done),
                }
            }
            Some(p) => NextPrompt::Session(p),
            None => {
                return Err(ApiError::new(
                    503,
                    "pending",
                    "the backend has not finished its step; retry",
                ))
            }
        };
        Ok(NextView {
            id: self.session.id().to_string(),
            phase: self.session.phase,
            prompt,
        })
    }

    fn save_labels(&self) -> ApiResult<()> {
        let tmp = self.dir.join("labels.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.labels).map_err(Error::from)?)?;
        fs::rename(tmp, self.dir.join(LABELS))?;
        Ok(())
    }
}

const LOG: &str = "events.jsonl";
const LABELS: &str = "labels.json";

/// All sessions of one service, each behind its own lock.
pub struct Store {
    data_dir: PathBuf,
    backends: Backends,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Store {
    pub fn new(data_dir: impl Into<PathBuf>, backends: Backends) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir)?;
        Ok(Store {
            data_dir,
            backends,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Start an interactive session; the server's backend is used whatever
    /// the manifest names.
    pub fn create(&self, manifest: &ExperimentManifest) -> ApiResult<NextView> {
        manifest.validate().map_err(|e| ApiError::validation(e.0))?;
        if manifest.population != Population::Interactive {
            return Err(ApiError::validation(
                "population: sessions created over the API must be \"interactive\"",
            ));
        }
        let id = uuid::Uuid::new_v4().to_string();
        let config = manifest.session_config(&id);
        let pools = Pools::generate(&config)?;
        let dir = self.data_dir.join(&id);
        fs::create_dir_all(&dir)?;
        let mut sink = JsonlSink::new(File::create(dir.join(LOG))?);
        let session = Session::start(&config, &pools, &mut sink)?;
        let mut entry = Entry {
            session,
            pools,
            labels: BTreeMap::new(),
            dir,
        };
        entry.advance(&self.backends)?;
        let view = entry.next_view()?;
        self.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(entry)));
        Ok(view)
    }

    fn entry(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        if !valid_id(id) {
            return Err(ApiError::not_found(id));
        }
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(e) = sessions.get(id) {
            return Ok(e.clone());
        }
        let dir = self.data_dir.join(id);
        let log = dir.join(LOG);
        if !log.is_file() {
            return Err(ApiError::not_found(id));
        }
        let records = read_log(BufReader::new(File::open(&log)?))?;
        let session = Session::replay(&records)?;
        let pools = Pools::generate(&session.config)?;
        let labels = match fs::read(dir.join(LABELS)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(Error::from)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let entry = Arc::new(Mutex::new(Entry {
            session,
            pools,
            labels,
            dir,
        }));
        sessions.insert(id.to_string(), entry.clone());
        Ok(entry)
    }

    fn with<T>(&self, id: &str, f: impl FnOnce(&mut Entry, &Backends) -> ApiResult<T>) -> ApiResult<T> {
        let entry = self.entry(id)?;
        let mut guard = entry.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard, &self.backends)
    }

    /// Forget in-memory state so the next access replays the log from disk.
    pub fn evict(&self, id: &str) {
        self.sessions.lock().unwrap().remove(id);
    }

    pub fn state(&self, id: &str) -> ApiResult<SessionView> {
        self.with(id, |e, _| {
            Ok(SessionView {
                session: e.session.clone(),
                test_labels: e.labels.clone(),
            })
        })
    }

    pub fn next(&self, id: &str) -> ApiResult<NextView> {
        self.with(id, |e, backends| {
            e.advance(backends)?;
            e.next_view()
        })
    }

    pub fn feedback(&self, id: &str, body: &FeedbackBody) -> ApiResult<NextView> {
        self.with(id, |e, backends| {
            e.advance(backends)?;
            let event = match e.session.step() {
                Step::Critique { .. } | Step::Explain { .. } => {
                    let label = body
                        .label
                        .as_ref()
                        .ok_or_else(|| ApiError::validation("label: required for a critique or explanation"))?
                        .resolve(&e.session)?;
                    let explanation = body
                        .explanation
                        .as_deref()
                        .ok_or_else(|| ApiError::validation("explanation: required for a critique or explanation"))?;
                    Event::Feedback {
                        item: e.session.feedback_for(&e.pools, label, explanation)?,
                    }
                }
                Step::Respond { .. } => {
                    let text = body
                        .response
                        .as_deref()
                        .filter(|t| !t.trim().is_empty())
                        .ok_or_else(|| ApiError::validation("response: required when answering a hypothesis"))?;
                    Event::Response {
                        text: text.to_string(),
                        stable: body.stable.unwrap_or(false),
                    }
                }
                Step::Done => return Err(ApiError::new(409, "phase_conflict", "session is done")),
                step => {
                    return Err(ApiError::new(
                        409,
                        "phase_conflict",
                        format!("session is busy ({step:?})"),
                    ))
                }
            };
            e.commit(event)?;
            e.advance(backends)?;
            e.next_view()
        })
    }

    pub fn labels(&self, id: &str, body: &LabelsBody) -> ApiResult<LabelsView> {
        self.with(id, |e, _| {
            let mut updated = e.labels.clone();
            for (i, l) in body.labels.iter().enumerate() {
                if !e.pools.test.iter().any(|s| s.id() == l.stimulus_id) {
                    return Err(ApiError::validation(format!(
                        "labels[{i}].stimulus_id: {} is not in the test set",
                        l.stimulus_id
                    )));
                }
                let label = l
                    .label
                    .resolve(&e.session)
                    .map_err(|err| ApiError::validation(format!("labels[{i}].{}", err.message)))?;
                updated.insert(l.stimulus_id.clone(), label);
            }
            e.labels = updated;
            e.save_labels()?;
            Ok(LabelsView {
                labeled: e.labels.len(),
                remaining: e.pools.test.len() - e.labels.len(),
            })
        })
    }

    pub fn evaluate(&self, id: &str, body: &EvaluateBody) -> ApiResult<EvaluationView> {
        self.with(id, |e, backends| {
            let irda_ctx = RewardModelContext::from_session(&e.session)?;
            let baseline_ctx = build_baseline_context(&e.session)?;
            let test: Vec<LabeledItem> = e
                .pools
                .test
                .iter()
                .filter_map(|s| {
                    e.labels.get(s.id()).map(|&label| LabeledItem {
                        stimulus_id: s.id().to_string(),
                        encoded: s.encode(),
                        label,
                    })
                })
                .collect();
            if test.is_empty() {
                return Err(ApiError::validation("labels: no test labels submitted yet"));
            }
            let metric = body
                .metric
                .unwrap_or_else(|| irda_core::study::default_metric(e.session.config.env));
            let backend = backends.for_env(e.session.config.env);
            Ok(EvaluationView {
                metric,
                labeled: test.len(),
                irda: evaluate(&irda_ctx, &test, metric, backend)?,
                l_b: evaluate(&baseline_ctx, &test, metric, backend)?,
            })
        })
    }
}

/// Parse a JSON request body, mapping failures to a 400.
pub fn parse_body<T: serde::de::DeserializeOwned>(bytes: &[u8], empty_ok: bool) -> ApiResult<T> {
    let value: Value = if bytes.iter().all(u8::is_ascii_whitespace) && empty_ok {
        Value::Object(Default::default())
    } else {
        serde_json::from_slice(bytes).map_err(|e| ApiError::new(400, "bad_request", format!("malformed JSON: {e}")))?
    };
    serde_json::from_value(value).map_err(|e| ApiError::validation(e.to_string()))
}
