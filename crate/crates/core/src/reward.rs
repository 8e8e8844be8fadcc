//! The verbal reward model R(τ), the non-reflective baseline L_B, and batch
//! evaluation against held-out labels.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::FeatureCatalog;
use crate::llm::{
    format_feedback, parse_feedback, Conversation, FeedbackItem, LabelPair, LabelProbabilities, LlmBackend, Speaker,
    TurnKind,
};
use crate::session::{Phase, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "irda")]
    Irda,
    /// Same examples and explanations, no reflective dialogue.
    #[serde(rename = "l_b")]
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelContext {
    pub env_desc: String,
    pub conversation: Conversation,
    pub feedback: Vec<FeedbackItem>,
    pub labels: LabelPair,
    pub variant: Variant,
}

fn is_reflection(kind: TurnKind) -> bool {
    matches!(kind, TurnKind::Hypothesis | TurnKind::Response)
}

impl RewardModelContext {
    /// The full-context reward model of a completed session.
    pub fn from_session(session: &Session) -> Result<Self> {
        require_done(session)?;
        Ok(RewardModelContext {
            env_desc: session.config.env.env_description(),
            conversation: session.conversation.clone(),
            feedback: session.feedback.clone(),
            labels: session.labels.clone(),
            variant: Variant::Irda,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.labels.validate()?;
        let has_reflection = self.conversation.turns().iter().any(|t| is_reflection(t.kind));
        if self.variant == Variant::Baseline && has_reflection {
            return Err(Error::Validation(
                "a baseline context must not contain hypothesis or response turns".into(),
            ));
        }
        Ok(())
    }

    pub fn probabilities(&self, encoded: &str, backend: &dyn LlmBackend) -> Result<LabelProbabilities> {
        backend.query_label_probs(&self.env_desc, &self.conversation, encoded, &self.labels)
    }
}

fn require_done(session: &Session) -> Result<()> {
    if session.phase != Phase::Done {
        return Err(Error::Phase(format!(
            "session {} is {}, not done",
            session.id(),
            session.phase.name()
        )));
    }
    Ok(())
}

/// R(τ) from the label probabilities: aligned iff p(aligned) > p(misaligned).
/// An exact tie is misaligned.
pub fn reward_from_probs(p: &LabelProbabilities) -> bool {
    p.p_aligned > p.p_misaligned
}

pub fn reward(ctx: &RewardModelContext, encoded: &str, backend: &dyn LlmBackend) -> Result<bool> {
    Ok(reward_from_probs(&ctx.probabilities(encoded, backend)?))
}

/// Catalog features the user first stated a labeled rule about in a
/// hypothesis response rather than in an explanation.
pub fn reflection_disclosed_features(session: &Session) -> BTreeSet<usize> {
    let catalog = FeatureCatalog::for_env(session.config.env);
    let labels = &session.labels;
    let mut explained = BTreeSet::new();
    let mut disclosed = BTreeSet::new();
    for turn in session.conversation.turns() {
        match turn.kind {
            TurnKind::Feedback => {
                if let Some((_, explanation)) = parse_feedback(labels, &turn.text) {
                    explained.extend(catalog.mentioned_features(&explanation));
                }
            }
            TurnKind::Response => {
                for sentence in rule_sentences(&turn.text, labels) {
                    for (pred, _, _) in catalog.find_phrases(sentence) {
                        let f = catalog.predicates[pred].feature;
                        if !explained.contains(&f) {
                            disclosed.insert(f);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    disclosed
}

fn sentences(text: &str) -> Vec<&str> {
    text.split_inclusive(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Sentences that name exactly one label word.
fn rule_sentences<'a>(text: &'a str, labels: &LabelPair) -> Vec<&'a str> {
    sentences(text)
        .into_iter()
        .filter(|s| {
            s.split(|c: char| !(c.is_alphanumeric() || c == '-'))
                .filter(|w| labels.polarity(w).is_some())
                .count()
                == 1
        })
        .collect()
}

pub const BASELINE_EMPTY_EXPLANATION: &str = "No further explanation.";

/// L_B: the session's examples, labels and explanations without the
/// hypothesis/response turns, and with explanation sentences about
/// reflection-disclosed features removed.
pub fn build_baseline_context(session: &Session) -> Result<RewardModelContext> {
    require_done(session)?;
    let catalog = FeatureCatalog::for_env(session.config.env);
    let disclosed = reflection_disclosed_features(session);
    let labels = &session.labels;
    let strip = |explanation: &str| -> String {
        let kept: Vec<&str> = sentences(explanation)
            .into_iter()
            .filter(|s| catalog.mentioned_features(s).iter().all(|f| !disclosed.contains(f)))
            .collect();
        if kept.is_empty() {
            BASELINE_EMPTY_EXPLANATION.to_string()
        } else {
            kept.join(" ")
        }
    };
    let conversation = session
        .conversation
        .filtered(|t| !is_reflection(t.kind))
        .map_turns(|t| {
            let mut t = t.clone();
            if t.kind == TurnKind::Feedback && t.role == Speaker::User {
                if let Some((label, explanation)) = parse_feedback(labels, &t.text) {
                    t.text = format_feedback(labels, label, &strip(&explanation));
                }
            }
            t
        });
    let feedback = session
        .feedback
        .iter()
        .map(|f| FeedbackItem {
            explanation: strip(&f.explanation),
            ..f.clone()
        })
        .collect();
    let ctx = RewardModelContext {
        env_desc: session.config.env.env_description(),
        conversation,
        feedback,
        labels: labels.clone(),
        variant: Variant::Baseline,
    };
    ctx.validate()?;
    Ok(ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    BalancedAccuracy,
}

impl Metric {
    pub fn parse(name: &str) -> Result<Metric> {
        match name {
            "accuracy" => Ok(Metric::Accuracy),
            "balanced_accuracy" => Ok(Metric::BalancedAccuracy),
            other => Err(Error::Config(format!(
                "unknown metric {other:?}, expected accuracy or balanced_accuracy"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (truth, predicted) in pairs {
            match (truth, predicted) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// (TPR + TNR) / 2, or the present class's recall when only one class
    /// occurs (second value `true`).
    pub fn balanced_accuracy(&self) -> (f64, bool) {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        match (pos, neg) {
            (0, 0) => (f64::NAN, true),
            (0, _) => (self.tn as f64 / neg as f64, true),
            (_, 0) => (self.tp as f64 / pos as f64, true),
            _ => ((self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64) / 2.0, false),
        }
    }

    /// Metric value and whether the single-class rule was used.
    pub fn metric(&self, metric: Metric) -> (f64, bool) {
        match metric {
            Metric::Accuracy => (self.accuracy(), false),
            Metric::BalancedAccuracy => self.balanced_accuracy(),
        }
    }
}

/// A held-out stimulus with the user's label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub stimulus_id: String,
    pub encoded: String,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub stimulus_id: String,
    pub label: bool,
    pub predicted: bool,
    pub p_aligned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub variant: Variant,
    pub metric: Metric,
    pub value: f64,
    /// The test set held one class only, so balanced accuracy is that
    /// class's recall.
    pub single_class: bool,
    pub confusion: Confusion,
    pub predictions: Vec<Prediction>,
}

/// Score R over a labeled test set.
pub fn evaluate(
    ctx: &RewardModelContext,
    test_set: &[LabeledItem],
    metric: Metric,
    backend: &dyn LlmBackend,
) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::Validation("test set must be non-empty".into()));
    }
    ctx.validate()?;
    let predictions: Vec<Prediction> = test_set
        .par_iter()
        .map(|item| {
            let p = ctx.probabilities(&item.encoded, backend)?;
            Ok(Prediction {
                stimulus_id: item.stimulus_id.clone(),
                label: item.label,
                predicted: reward_from_probs(&p),
                p_aligned: p.p_aligned,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation::from_predictions(ctx.variant, metric, predictions))
}

impl Evaluation {
    pub fn from_predictions(variant: Variant, metric: Metric, predictions: Vec<Prediction>) -> Self {
        let confusion = Confusion::from_pairs(predictions.iter().map(|p| (p.label, p.predicted)));
        let (value, single_class) = confusion.metric(metric);
        Evaluation {
            variant,
            metric,
            value,
            single_class,
            confusion,
            predictions,
        }
    }

    /// Per-item predictions as CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["stimulus_id", "label", "predicted", "p_aligned"])?;
        for p in &self.predictions {
            w.write_record([
                p.stimulus_id.as_str(),
                &u8::from(p.label).to_string(),
                &u8::from(p.predicted).to_string(),
                &p.p_aligned.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
