//! Persistent alignment sessions: an append-only event log and the state it
//! folds into.
//!
//! Every state change is an [`Event`]. [`Session::apply`] is the only way to
//! mutate a session, so replaying a log reproduces the recorded state
//! exactly. Turn timestamps are the sequence number of the event that
//! created them, which keeps replays byte-identical.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::min_max_normalize;
use crate::llm::{Conversation, FeedbackItem, Hypothesis, LabelPair, Speaker, TurnKind};
use crate::sampling::kmeans;
use crate::stimulus::{read_jsonl, EnvKind, Stimulus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub id: String,
    pub env: EnvKind,
    /// Number of diversity samples shown per construction loop.
    pub k: usize,
    /// ε: the uncertainty loop stops once max U falls below it.
    pub epsilon: f64,
    /// Maximum number of uncertainty queries.
    pub budget: usize,
    pub pool_seed: u64,
    pub cluster_seed: u64,
    /// |T_D|
    pub design_size: usize,
    /// |T_U|
    pub uncertainty_size: usize,
    pub test_size: usize,
    /// Hard cap on construction loops when the user never feels stable.
    pub max_construction_loops: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig::new("session", EnvKind::AppleFarm)
    }
}

impl SessionConfig {
    pub fn new(id: impl Into<String>, env: EnvKind) -> Self {
        SessionConfig {
            id: id.into(),
            env,
            k: env.default_k(),
            epsilon: 0.5,
            budget: 2,
            pool_seed: 0,
            cluster_seed: 0,
            design_size: 60,
            uncertainty_size: 30,
            test_size: 50,
            max_construction_loops: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return field("id", "must be non-empty and use only ASCII letters, digits, '-' or '_'");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return field("epsilon", "must lie in [0, 1]");
        }
        if self.k == 0 || self.k > self.design_size {
            return field("k", "must lie in 1..=design_size");
        }
        if self.uncertainty_size == 0 {
            return field("uncertainty_size", "must be at least 1");
        }
        if self.test_size == 0 {
            return field("test_size", "must be at least 1");
        }
        if self.max_construction_loops == 0 {
            return field("max_construction_loops", "must be at least 1");
        }
        Ok(())
    }
}

/// The stimuli a session draws from: T_D, T_U and a held-out test set.
#[derive(Debug, Clone)]
pub struct Pools {
    pub design: Vec<Stimulus>,
    pub uncertainty: Vec<Stimulus>,
    pub test: Vec<Stimulus>,
    index: BTreeMap<String, (u8, usize)>,
}

impl Pools {
    /// One generated pool split in order into design, uncertainty and test.
    pub fn generate(config: &SessionConfig) -> Result<Pools> {
        config.validate()?;
        let total = config.design_size + config.uncertainty_size + config.test_size;
        let mut all = config.env.generate(config.pool_seed, total)?;
        let test = all.split_off(config.design_size + config.uncertainty_size);
        let uncertainty = all.split_off(config.design_size);
        Ok(Pools::new(all, uncertainty, test))
    }

    pub fn new(design: Vec<Stimulus>, uncertainty: Vec<Stimulus>, test: Vec<Stimulus>) -> Pools {
        let mut index = BTreeMap::new();
        for (tag, pool) in [(0u8, &design), (1, &uncertainty), (2, &test)] {
            for (i, s) in pool.iter().enumerate() {
                index.insert(s.id().to_string(), (tag, i));
            }
        }
        Pools {
            design,
            uncertainty,
            test,
            index,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Stimulus> {
        let &(tag, i) = self.index.get(id)?;
        Some(match tag {
            0 => &self.design[i],
            1 => &self.uncertainty[i],
            _ => &self.test[i],
        })
    }

    pub fn require(&self, id: &str) -> Result<&Stimulus> {
        self.get(id)
            .ok_or_else(|| Error::Validation(format!("unknown stimulus {id}")))
    }

    /// τ_i^cent: the member nearest each k-means centroid over min-max
    /// normalized catalog features of T_D.
    pub fn representatives(&self, k: usize, seed: u64) -> Result<Vec<String>> {
        let rows: Vec<Vec<f64>> = self.design.iter().map(|s| s.features().values).collect();
        let points = min_max_normalize(&rows);
        let clustering = kmeans(&points, k, seed)?;
        let ids: Vec<&str> = self.design.iter().map(Stimulus::id).collect();
        let reps = clustering.representatives(&points, &ids)?;
        Ok(reps.into_iter().map(|i| ids[i].to_string()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Constructing,
    Reducing,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Constructing => "constructing",
            Phase::Reducing => "reducing",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStimulus {
    pub stimulus_id: String,
    pub p_aligned: f64,
    pub p_misaligned: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub stimulus_id: String,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        config: SessionConfig,
        value_concept: String,
        labels: LabelPair,
        system_text: String,
        representatives: Vec<String>,
        uncertainty_pool: Vec<String>,
    },
    Feedback {
        item: FeedbackItem,
    },
    Hypothesis {
        hypothesis: Hypothesis,
    },
    Response {
        text: String,
        stable: bool,
    },
    UncertaintyScores {
        scores: Vec<ScoredStimulus>,
    },
    Selection {
        selection: Selection,
    },
    PhaseChange {
        from: Phase,
        to: Phase,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::Created { .. } => "created",
            Event::Feedback { .. } => "feedback",
            Event::Hypothesis { .. } => "hypothesis",
            Event::Response { .. } => "response",
            Event::UncertaintyScores { .. } => "uncertainty_scores",
            Event::Selection { .. } => "selection",
            Event::PhaseChange { .. } => "phase_change",
        }
    }
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seq: u64,
    pub event: Event,
}

pub trait EventSink {
    fn record(&mut self, record: &Record) -> Result<()>;
}

impl EventSink for Vec<Record> {
    fn record(&mut self, record: &Record) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards events.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _record: &Record) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line and flushes after each.
pub struct JsonlSink<W: Write> {
    writer: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(writer: W) -> Self {
        JsonlSink { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> EventSink for JsonlSink<W> {
    fn record(&mut self, record: &Record) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_log<R: BufRead>(reader: R) -> Result<Vec<Record>> {
    read_jsonl(reader)
}

/// What the session needs next.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    /// The user must label and explain this representative.
    Critique {
        stimulus_id: String,
    },
    /// The user must answer the posed hypothesis.
    Respond {
        hypothesis: Hypothesis,
    },
    /// The user must explain τ*.
    Explain {
        stimulus_id: String,
        uncertainty: f64,
    },
    /// The backend must generate a hypothesis from D_fb.
    Hypothesize,
    /// The construction loop ended; decide between re-entry and reduction.
    CloseLoop,
    /// The backend must score T_U.
    Score,
    Done,
}

impl Step {
    pub fn needs_user(&self) -> bool {
        matches!(
            self,
            Step::Critique { .. } | Step::Respond { .. } | Step::Explain { .. }
        )
    }
}

/// A question for the human, with the stimulus text attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    Critique {
        stimulus_id: String,
        encoded: String,
    },
    Hypothesis {
        hypothesis: Hypothesis,
        text: String,
    },
    Explain {
        stimulus_id: String,
        encoded: String,
        uncertainty: f64,
    },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub config: SessionConfig,
    pub value_concept: String,
    pub labels: LabelPair,
    /// τ_i^cent ids, in cluster order.
    pub representatives: Vec<String>,
    /// Remaining T_U ids, ascending.
    pub uncertainty_pool: Vec<String>,
    /// D_fb
    pub feedback: Vec<FeedbackItem>,
    /// C
    pub conversation: Conversation,
    pub phase: Phase,
    /// Construction loops entered so far.
    pub construction_loops: usize,
    pub uncertainty_iterations: usize,
    pub hypotheses: Vec<Hypothesis>,
    /// Next representative to critique in the current construction loop.
    pub cursor: usize,
    pub awaiting_response: bool,
    pub last_stable: Option<bool>,
    pub selected: Option<Selection>,
    /// Latest scores not yet followed by a selection or a stop.
    pub pending_scores: Option<Vec<ScoredStimulus>>,
    /// Number of events applied.
    pub events: u64,
}

pub fn system_text(env: EnvKind, labels: &LabelPair) -> String {
    format!(
        "You are learning one person's notion of {}. Each example is followed by their label \
         (`{}` or `{}`) and explanation.",
        env.value_concept(),
        labels.aligned,
        labels.misaligned
    )
}

fn phase_error(msg: impl Into<String>) -> Error {
    Error::Phase(msg.into())
}

impl Session {
    /// The creation event for a new session over `pools`.
    pub fn created_event(config: &SessionConfig, pools: &Pools) -> Result<Event> {
        config.validate()?;
        let labels = config.env.label_pair();
        let mut uncertainty_pool: Vec<String> = pools.uncertainty.iter().map(|s| s.id().to_string()).collect();
        uncertainty_pool.sort();
        Ok(Event::Created {
            config: config.clone(),
            value_concept: config.env.value_concept().to_string(),
            system_text: system_text(config.env, &labels),
            labels,
            representatives: pools.representatives(config.k, config.cluster_seed)?,
            uncertainty_pool,
        })
    }

    /// Create a session and record its creation event.
    pub fn start(config: &SessionConfig, pools: &Pools, sink: &mut dyn EventSink) -> Result<Session> {
        let event = Session::created_event(config, pools)?;
        let session = Session::from_created(&event)?;
        sink.record(&Record { seq: 0, event })?;
        Ok(session)
    }

    fn from_created(event: &Event) -> Result<Session> {
        let Event::Created {
            config,
            value_concept,
            labels,
            system_text,
            representatives,
            uncertainty_pool,
        } = event
        else {
            return Err(Error::Validation(
                "a session log must begin with a created event".into(),
            ));
        };
        config.validate()?;
        labels.validate()?;
        if representatives.is_empty() {
            return Err(Error::Validation("a session needs at least one representative".into()));
        }
        Ok(Session {
            config: config.clone(),
            value_concept: value_concept.clone(),
            labels: labels.clone(),
            representatives: representatives.clone(),
            uncertainty_pool: uncertainty_pool.clone(),
            feedback: Vec::new(),
            conversation: Conversation::new(system_text.clone(), 0),
            phase: Phase::Constructing,
            construction_loops: 1,
            uncertainty_iterations: 0,
            hypotheses: Vec::new(),
            cursor: 0,
            awaiting_response: false,
            last_stable: None,
            selected: None,
            pending_scores: None,
            events: 1,
        })
    }

    /// Fold a complete log into the session it describes.
    pub fn replay(records: &[Record]) -> Result<Session> {
        let (first, rest) = records
            .split_first()
            .ok_or_else(|| Error::Validation("empty session log".into()))?;
        if first.seq != 0 {
            return Err(Error::Validation("session log must start at seq 0".into()));
        }
        let mut session = Session::from_created(&first.event)?;
        for record in rest {
            if record.seq != session.events {
                return Err(Error::Validation(format!(
                    "session log out of order: expected seq {}, found {}",
                    session.events, record.seq
                )));
            }
            session.apply(&record.event)?;
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn step(&self) -> Step {
        match self.phase {
            Phase::Constructing => {
                if self.awaiting_response {
                    Step::Respond {
                        hypothesis: self.hypotheses.last().cloned().expect("posed hypothesis"),
                    }
                } else if self.cursor < self.representatives.len() {
                    Step::Critique {
                        stimulus_id: self.representatives[self.cursor].clone(),
                    }
                } else if self.last_stable.is_none() {
                    Step::Hypothesize
                } else {
                    Step::CloseLoop
                }
            }
            Phase::Reducing => match &self.selected {
                Some(sel) => Step::Explain {
                    stimulus_id: sel.stimulus_id.clone(),
                    uncertainty: sel.uncertainty,
                },
                None => Step::Score,
            },
            Phase::Done => Step::Done,
        }
    }

    /// The human-facing prompt, or `None` while the backend has work to do.
    pub fn prompt(&self, pools: &Pools) -> Result<Option<Prompt>> {
        Ok(match self.step() {
            Step::Critique { stimulus_id } => Some(Prompt::Critique {
                encoded: pools.require(&stimulus_id)?.encode(),
                stimulus_id,
            }),
            Step::Respond { hypothesis } => Some(Prompt::Hypothesis {
                text: hypothesis.render(),
                hypothesis,
            }),
            Step::Explain {
                stimulus_id,
                uncertainty,
            } => Some(Prompt::Explain {
                encoded: pools.require(&stimulus_id)?.encode(),
                stimulus_id,
                uncertainty,
            }),
            Step::Done => Some(Prompt::Done),
            Step::Hypothesize | Step::CloseLoop | Step::Score => None,
        })
    }

    /// Validate and apply one event.
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        let ts = self.events;
        match event {
            Event::Created { .. } => return Err(phase_error("session already created")),
            Event::Feedback { item } => {
                item.validate()?;
                match self.step() {
                    Step::Critique { stimulus_id } if stimulus_id == item.stimulus_id => {
                        match self.feedback.iter_mut().find(|f| f.stimulus_id == item.stimulus_id) {
                            Some(existing) => *existing = item.clone(),
                            None => self.feedback.push(item.clone()),
                        }
                        self.cursor += 1;
                    }
                    Step::Explain { stimulus_id, .. } if stimulus_id == item.stimulus_id => {
                        self.feedback.push(item.clone());
                        self.uncertainty_pool.retain(|id| *id != item.stimulus_id);
                        self.uncertainty_iterations += 1;
                        self.selected = None;
                    }
                    step => {
                        return Err(phase_error(format!(
                            "feedback on {} is not expected now ({})",
                            item.stimulus_id,
                            describe(&step)
                        )))
                    }
                }
                self.conversation.push_example(&item.stimulus_id, &item.encoded, ts);
                self.conversation.push_feedback(&self.labels, item, ts);
            }
            Event::Hypothesis { hypothesis } => {
                if self.step() != Step::Hypothesize {
                    return Err(phase_error("no hypothesis is due"));
                }
                hypothesis.validate()?;
                self.conversation
                    .push(Speaker::Assistant, TurnKind::Hypothesis, hypothesis.render(), ts);
                self.hypotheses.push(hypothesis.clone());
                self.awaiting_response = true;
            }
            Event::Response { text, stable } => {
                if !self.awaiting_response {
                    return Err(phase_error("no hypothesis awaits a response"));
                }
                if text.trim().is_empty() {
                    return Err(Error::Validation("response text must be non-empty".into()));
                }
                self.conversation
                    .push(Speaker::User, TurnKind::Response, text.clone(), ts);
                self.awaiting_response = false;
                self.last_stable = Some(*stable);
            }
            Event::UncertaintyScores { scores } => {
                if self.step() != Step::Score || self.pending_scores.is_some() {
                    return Err(phase_error("no uncertainty scoring is due"));
                }
                let ids: Vec<&str> = scores.iter().map(|s| s.stimulus_id.as_str()).collect();
                let expected: Vec<&str> = self.uncertainty_pool.iter().map(String::as_str).collect();
                if ids != expected {
                    return Err(Error::Validation(
                        "uncertainty scores must cover the remaining pool in id order".into(),
                    ));
                }
                self.pending_scores = Some(scores.clone());
            }
            Event::Selection { selection } => {
                if self.step() != Step::Score {
                    return Err(phase_error("no selection is due"));
                }
                if !self.uncertainty_pool.contains(&selection.stimulus_id) {
                    return Err(Error::Validation(format!(
                        "{} is not in the remaining uncertainty pool",
                        selection.stimulus_id
                    )));
                }
                self.selected = Some(selection.clone());
                self.pending_scores = None;
            }
            Event::PhaseChange { from, to } => {
                if *from != self.phase {
                    return Err(phase_error(format!(
                        "phase change from {} but session is {}",
                        from.name(),
                        self.phase.name()
                    )));
                }
                match (self.step(), to) {
                    (Step::CloseLoop, Phase::Constructing) => {
                        self.construction_loops += 1;
                        self.cursor = 0;
                        self.last_stable = None;
                    }
                    (Step::CloseLoop, Phase::Reducing) => {
                        self.phase = Phase::Reducing;
                        self.last_stable = None;
                    }
                    (Step::Score, Phase::Done) => {
                        self.phase = Phase::Done;
                        self.pending_scores = None;
                    }
                    (step, to) => {
                        return Err(phase_error(format!(
                            "cannot move to {} now ({})",
                            to.name(),
                            describe(&step)
                        )))
                    }
                }
            }
        }
        self.events += 1;
        Ok(())
    }

    /// Apply `event` and record it; on failure neither happens.
    pub fn commit(&mut self, event: Event, sink: &mut dyn EventSink) -> Result<()> {
        let mut next = self.clone();
        next.apply(&event)?;
        sink.record(&Record {
            seq: self.events,
            event,
        })?;
        *self = next;
        Ok(())
    }

    /// Build the feedback item answering the current critique or explain
    /// prompt.
    pub fn feedback_for(&self, pools: &Pools, label: bool, explanation: &str) -> Result<FeedbackItem> {
        let id = match self.step() {
            Step::Critique { stimulus_id } | Step::Explain { stimulus_id, .. } => stimulus_id,
            step => return Err(phase_error(format!("no example awaits feedback ({})", describe(&step)))),
        };
        let item = FeedbackItem {
            encoded: pools.require(&id)?.encode(),
            stimulus_id: id,
            label,
            explanation: explanation.to_string(),
        };
        item.validate()?;
        Ok(item)
    }
}

fn describe(step: &Step) -> String {
    match step {
        Step::Critique { stimulus_id } => format!("awaiting critique of {stimulus_id}"),
        Step::Respond { .. } => "awaiting a hypothesis response".into(),
        Step::Explain { stimulus_id, .. } => format!("awaiting an explanation of {stimulus_id}"),
        Step::Hypothesize => "awaiting a generated hypothesis".into(),
        Step::CloseLoop => "closing the construction loop".into(),
        Step::Score => "awaiting uncertainty scores".into(),
        Step::Done => "session is done".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SessionConfig {
        SessionConfig {
            design_size: 20,
            uncertainty_size: 6,
            test_size: 5,
            ..SessionConfig::new("s1", EnvKind::AppleFarm)
        }
    }

    #[test]
    fn creation_and_first_prompt() {
        let config = small_config();
        let pools = Pools::generate(&config).unwrap();
        let mut log = Vec::new();
        let s = Session::start(&config, &pools, &mut log).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(s.representatives.len(), 4);
        assert!(matches!(s.step(), Step::Critique { .. }));
        assert_eq!(Session::replay(&log).unwrap(), s);
    }

    #[test]
    fn out_of_order_feedback_rejected() {
        let config = small_config();
        let pools = Pools::generate(&config).unwrap();
        let mut s = Session::start(&config, &pools, &mut NullSink).unwrap();
        let wrong = &pools.design.iter().find(|d| d.id() != s.representatives[0]).unwrap();
        let item = FeedbackItem {
            stimulus_id: wrong.id().to_string(),
            encoded: wrong.encode(),
            label: true,
            explanation: "fine".into(),
        };
        let before = s.clone();
        let err = s.commit(Event::Feedback { item }, &mut NullSink).unwrap_err();
        assert!(matches!(err, Error::Phase(_)));
        assert_eq!(s, before);
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = small_config();
        c.epsilon = 1.5;
        assert!(c.validate().unwrap_err().to_string().contains("epsilon"));
        c = small_config();
        c.id = "../x".into();
        assert!(c.validate().is_err());
    }
}
