//! The language-model interface f_LLM: label-token probabilities and
//! hypothesis generation over a running conversation.

mod http;
mod scripted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::{parse_hypothesis, Endpoint, FixtureTransport, HttpBackend, HttpConfig, Transport, UreqTransport};
pub use scripted::ScriptedBackend;

/// The two label words read off the model's first output token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    pub aligned: String,
    pub misaligned: String,
}

impl LabelPair {
    pub fn new(aligned: impl Into<String>, misaligned: impl Into<String>) -> Self {
        LabelPair {
            aligned: aligned.into(),
            misaligned: misaligned.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aligned.trim().is_empty() || self.misaligned.trim().is_empty() {
            return Err(Error::Validation("labels must be non-empty".into()));
        }
        if self.aligned.eq_ignore_ascii_case(&self.misaligned) {
            return Err(Error::Validation("labels must be distinct".into()));
        }
        Ok(())
    }

    pub fn word(&self, aligned: bool) -> &str {
        if aligned {
            &self.aligned
        } else {
            &self.misaligned
        }
    }

    /// Map a label word back to its polarity (case-insensitive).
    pub fn polarity(&self, word: &str) -> Option<bool> {
        let w = word.trim();
        if w.eq_ignore_ascii_case(&self.aligned) {
            Some(true)
        } else if w.eq_ignore_ascii_case(&self.misaligned) {
            Some(false)
        } else {
            None
        }
    }
}

/// p_θ(1|τ) and p_θ(0|τ) after renormalizing the two matched masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProbabilities {
    pub p_aligned: f64,
    pub p_misaligned: f64,
    /// Raw token log-probabilities as returned by the backend, if any.
    #[serde(default)]
    pub raw: BTreeMap<String, f64>,
}

impl LabelProbabilities {
    pub fn from_masses(aligned: f64, misaligned: f64) -> Result<Self> {
        if !aligned.is_finite() || !misaligned.is_finite() || aligned < 0.0 || misaligned < 0.0 {
            return Err(Error::Backend(format!("invalid label masses {aligned} / {misaligned}")));
        }
        let total = aligned + misaligned;
        if total <= 0.0 {
            return Err(Error::Backend("both label masses are zero".into()));
        }
        Ok(LabelProbabilities {
            p_aligned: aligned / total,
            p_misaligned: misaligned / total,
            raw: BTreeMap::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if !ok(self.p_aligned) || !ok(self.p_misaligned) {
            return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
        }
        if (self.p_aligned + self.p_misaligned - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("probabilities must sum to 1".into()));
        }
        Ok(())
    }
}

/// G(D_fb): features the user seems to use and alternatives to consider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub features_hypothesized: Vec<String>,
    pub alternatives: Vec<String>,
    pub prose: String,
}

impl Hypothesis {
    pub fn validate(&self) -> Result<()> {
        if self.features_hypothesized.is_empty() || self.alternatives.is_empty() {
            return Err(Error::Validation(
                "hypothesis needs at least one feature and one alternative".into(),
            ));
        }
        Ok(())
    }

    /// The assistant turn posed to the user.
    pub fn render(&self) -> String {
        format!(
            "{}\nFEATURES:\n{}\nALTERNATIVES:\n{}",
            self.prose,
            bullet(&self.features_hypothesized),
            bullet(&self.alternatives)
        )
    }
}

fn bullet(items: &[String]) -> String {
    items.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
}

/// One element of D_fb: an encoded stimulus, its label and the explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub stimulus_id: String,
    pub encoded: String,
    /// `true` for the aligned label.
    pub label: bool,
    pub explanation: String,
}

impl FeedbackItem {
    pub fn validate(&self) -> Result<()> {
        if self.explanation.trim().is_empty() {
            return Err(Error::Validation(format!(
                "feedback on {} has an empty explanation",
                self.stimulus_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    System,
    /// A stimulus shown to the user.
    Example,
    /// The user's label and explanation for the preceding example.
    Feedback,
    Hypothesis,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Speaker,
    pub kind: TurnKind,
    pub text: String,
    pub timestamp: u64,
}

/// The full context C, append-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    turns: Vec<Turn>,
}

const EXAMPLE_PREFIX: &str = "Example ";

impl Conversation {
    pub fn new(system_text: impl Into<String>, timestamp: u64) -> Self {
        Conversation {
            turns: vec![Turn {
                role: Speaker::System,
                kind: TurnKind::System,
                text: system_text.into(),
                timestamp,
            }],
        }
    }

    /// Rebuild from stored turns; the first must be the system turn.
    pub fn from_turns(turns: Vec<Turn>) -> Result<Self> {
        match turns.first() {
            Some(t) if t.kind == TurnKind::System => Ok(Conversation { turns }),
            _ => Err(Error::Validation("conversation must start with the system turn".into())),
        }
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push(&mut self, role: Speaker, kind: TurnKind, text: impl Into<String>, timestamp: u64) {
        self.turns.push(Turn {
            role,
            kind,
            text: text.into(),
            timestamp,
        });
    }

    pub fn push_example(&mut self, id: &str, encoded: &str, timestamp: u64) {
        self.push(
            Speaker::Assistant,
            TurnKind::Example,
            format!("{EXAMPLE_PREFIX}{id}:\n{encoded}"),
            timestamp,
        );
    }

    pub fn push_feedback(&mut self, labels: &LabelPair, item: &FeedbackItem, timestamp: u64) {
        self.push(
            Speaker::User,
            TurnKind::Feedback,
            format_feedback(labels, item.label, &item.explanation),
            timestamp,
        );
    }

    /// Rough size in tokens (four characters per token).
    pub fn token_estimate(&self) -> usize {
        self.turns.iter().map(|t| t.text.chars().count().div_ceil(4)).sum()
    }

    /// View that fits `budget` tokens by eliding the oldest example blocks.
    /// System, feedback, hypothesis and response turns are always kept.
    pub fn truncated(&self, budget: usize) -> Conversation {
        let mut view = self.clone();
        let mut i = 0;
        while view.token_estimate() > budget && i < view.turns.len() {
            let turn = &mut view.turns[i];
            if turn.kind == TurnKind::Example {
                if let Some((id, _)) = parse_example_turn(&turn.text) {
                    turn.text = format!("{EXAMPLE_PREFIX}{id}: [omitted]");
                }
            }
            i += 1;
        }
        view
    }

    /// Conversation with every turn that `keep` rejects removed.
    pub fn filtered(&self, mut keep: impl FnMut(&Turn) -> bool) -> Conversation {
        Conversation {
            turns: self
                .turns
                .iter()
                .filter(|t| t.kind == TurnKind::System || keep(t))
                .cloned()
                .collect(),
        }
    }

    pub fn map_turns(&self, mut f: impl FnMut(&Turn) -> Turn) -> Conversation {
        Conversation {
            turns: self.turns.iter().map(&mut f).collect(),
        }
    }

    /// `(example id, encoded, feedback text)` for every example turn directly
    /// followed by a feedback turn.
    pub fn labeled_examples(&self) -> Vec<(String, String, &str)> {
        self.turns
            .windows(2)
            .filter(|w| w[0].kind == TurnKind::Example && w[1].kind == TurnKind::Feedback)
            .filter_map(|w| {
                parse_example_turn(&w[0].text).map(|(id, enc)| (id.to_string(), enc.to_string(), w[1].text.as_str()))
            })
            .collect()
    }
}

/// Split an example turn into `(id, encoded)`.
pub fn parse_example_turn(text: &str) -> Option<(&str, &str)> {
    let rest = text.strip_prefix(EXAMPLE_PREFIX)?;
    let (id, encoded) = rest.split_once(":\n")?;
    Some((id, encoded))
}

pub fn format_feedback(labels: &LabelPair, label: bool, explanation: &str) -> String {
    format!("Label: {}\nExplanation: {explanation}", labels.word(label))
}

/// Inverse of [`format_feedback`]: `(label, explanation)`.
pub fn parse_feedback(labels: &LabelPair, text: &str) -> Option<(bool, String)> {
    let (first, rest) = text.split_once('\n')?;
    let label = labels.polarity(first.strip_prefix("Label:")?)?;
    let explanation = rest.strip_prefix("Explanation: ")?.to_string();
    Some((label, explanation))
}

/// The pluggable f_LLM.
pub trait LlmBackend: Send + Sync {
    fn query_label_probs(
        &self,
        env_desc: &str,
        conversation: &Conversation,
        encoded: &str,
        labels: &LabelPair,
    ) -> Result<LabelProbabilities>;

    fn generate_hypothesis(&self, env_desc: &str, feedback: &[FeedbackItem]) -> Result<Hypothesis>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn query_label_probs(
        &self,
        env_desc: &str,
        conversation: &Conversation,
        encoded: &str,
        labels: &LabelPair,
    ) -> Result<LabelProbabilities> {
        (**self).query_label_probs(env_desc, conversation, encoded, labels)
    }

    fn generate_hypothesis(&self, env_desc: &str, feedback: &[FeedbackItem]) -> Result<Hypothesis> {
        (**self).generate_hypothesis(env_desc, feedback)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renormalizes_masses() {
        let p = LabelProbabilities::from_masses(0.06, 0.02).unwrap();
        assert!((p.p_aligned - 0.75).abs() < 1e-12);
        assert!((p.p_misaligned - 0.25).abs() < 1e-12);
        assert!(LabelProbabilities::from_masses(0.0, 0.0).is_err());
    }

    #[test]
    fn truncation_keeps_explanations() {
        let labels = LabelPair::new("respectful", "disrespectful");
        let mut c = Conversation::new("sys", 0);
        for i in 0..5 {
            c.push_example(&format!("t{i}"), &"x".repeat(400), i);
            let item = FeedbackItem {
                stimulus_id: format!("t{i}"),
                encoded: String::new(),
                label: true,
                explanation: format!("reason {i}"),
            };
            c.push_feedback(&labels, &item, i);
        }
        let full = c.token_estimate();
        let view = c.truncated(full / 2);
        assert!(view.token_estimate() <= full / 2);
        assert_eq!(view.len(), c.len());
        for (a, b) in c.turns().iter().zip(view.turns()) {
            if a.kind != TurnKind::Example {
                assert_eq!(a, b);
            }
        }
        assert!(view.turns()[1].text.ends_with("[omitted]"));
        assert_eq!(view.turns()[9], c.turns()[9]);
    }

    #[test]
    fn feedback_text_round_trips() {
        let labels = LabelPair::new("swerve", "stay");
        let text = format_feedback(&labels, false, "It is fine.");
        assert_eq!(parse_feedback(&labels, &text), Some((false, "It is fine.".into())));
    }
}
