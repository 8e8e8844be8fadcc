//! Deterministic stand-in for a language model.
//!
//! Label rule: every user sentence that contains a catalog phrase and exactly
//! one label word states a predicate polarity (a holds-phrase with label `y`
//! means "predicate ⇒ y"; a fails-phrase with label `y` means "predicate ⇒ ¬y").
//! Later statements override earlier ones. A query's signature is the set of
//! stated predicates that hold on it. Votes come from, in order of preference:
//! labeled examples with the same signature; the polarities of the holding
//! predicates; the negated polarities of all stated predicates. A re-labeled
//! example counts once, with its latest label. The aligned
//! probability is `0.5 + 0.4 (a - m) / (a + m)`, or 0.5 with no votes.
//!
//! Hypothesis rule: H is every catalog feature named or paraphrased in the
//! explanations (the first catalog feature if none). A is the two absent
//! features that best separate differently-labeled examples which H cannot
//! tell apart, ties broken by catalog order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::featurize::FeatureCatalog;
use crate::stimulus::{EnvKind, Stimulus};

use super::{
    parse_feedback, Conversation, FeedbackItem, Hypothesis, LabelPair, LabelProbabilities, LlmBackend, Speaker,
    TurnKind,
};

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    env: EnvKind,
    catalog: FeatureCatalog,
}

fn words(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    text.split(['.', '!', '?', '\n', ';'])
}

impl ScriptedBackend {
    pub fn new(env: EnvKind) -> Self {
        ScriptedBackend {
            env,
            catalog: FeatureCatalog::for_env(env),
        }
    }

    pub fn env(&self) -> EnvKind {
        self.env
    }

    /// Predicate index → implied label polarity, from the user's sentences.
    pub fn stated_rules(&self, text: &str, labels: &LabelPair) -> BTreeMap<usize, bool> {
        let mut rules = BTreeMap::new();
        self.collect_rules(text, labels, &mut rules);
        rules
    }

    fn collect_rules(&self, text: &str, labels: &LabelPair, rules: &mut BTreeMap<usize, bool>) {
        let (aligned, misaligned) = (labels.aligned.to_lowercase(), labels.misaligned.to_lowercase());
        for sentence in sentences(text) {
            let mut label = None;
            let mut count = 0;
            for w in words(sentence) {
                if w == aligned {
                    label = Some(true);
                    count += 1;
                } else if w == misaligned {
                    label = Some(false);
                    count += 1;
                }
            }
            let Some(label) = label.filter(|_| count == 1) else {
                continue;
            };
            for (pred, holds, _) in self.catalog.find_phrases(sentence) {
                rules.insert(pred, if holds { label } else { !label });
            }
        }
    }

    fn features_of(&self, id: &str, encoded: &str) -> Option<Vec<f64>> {
        Stimulus::parse(self.env, encoded, id).ok().map(|s| s.features().values)
    }

    /// p_θ(1|τ) under the declared rule for a featurized query.
    pub fn aligned_probability(&self, conversation: &Conversation, labels: &LabelPair, query: &[f64]) -> f64 {
        let mut rules = BTreeMap::new();
        for turn in conversation.turns() {
            if turn.role == Speaker::User && matches!(turn.kind, TurnKind::Feedback | TurnKind::Response) {
                self.collect_rules(&turn.text, labels, &mut rules);
            }
        }
        // a re-labeled example keeps only its latest label
        let mut latest: BTreeMap<String, (String, bool)> = BTreeMap::new();
        for (id, encoded, feedback) in conversation.labeled_examples() {
            if let Some((label, _)) = parse_feedback(labels, feedback) {
                latest.insert(id, (encoded, label));
            }
        }
        let exemplars: Vec<(Vec<f64>, bool)> = latest
            .into_iter()
            .filter_map(|(id, (encoded, label))| Some((self.features_of(&id, &encoded)?, label)))
            .collect();

        let preds = self.catalog.predicates;
        let signature = |v: &[f64]| -> Vec<usize> { rules.keys().copied().filter(|&p| preds[p].eval(v)).collect() };
        let sig = signature(query);
        // votes[1] counts aligned, votes[0] misaligned
        let mut votes = [0u32; 2];
        for (values, label) in &exemplars {
            if signature(values) == sig {
                votes[usize::from(*label)] += 1;
            }
        }
        if votes == [0, 0] {
            for p in &sig {
                votes[usize::from(rules[p])] += 1;
            }
        }
        if votes == [0, 0] {
            for polarity in rules.values() {
                votes[usize::from(!polarity)] += 1;
            }
        }
        let [m, a] = votes.map(f64::from);
        if a + m == 0.0 {
            0.5
        } else {
            0.5 + 0.4 * (a - m) / (a + m)
        }
    }
}

impl LlmBackend for ScriptedBackend {
    fn query_label_probs(
        &self,
        _env_desc: &str,
        conversation: &Conversation,
        encoded: &str,
        labels: &LabelPair,
    ) -> Result<LabelProbabilities> {
        labels.validate()?;
        let query = self
            .features_of("query", encoded)
            .ok_or_else(|| Error::Backend("scripted backend cannot parse the query stimulus".into()))?;
        let p = self.aligned_probability(conversation, labels, &query);
        LabelProbabilities::from_masses(p, 1.0 - p)
    }

    fn generate_hypothesis(&self, _env_desc: &str, feedback: &[FeedbackItem]) -> Result<Hypothesis> {
        if feedback.is_empty() {
            return Err(Error::Validation("hypothesis generation needs feedback".into()));
        }
        let explanations: Vec<&str> = feedback.iter().map(|f| f.explanation.as_str()).collect();
        let mut hypothesized = self.catalog.mentioned_features(&explanations.join("\n"));
        if hypothesized.is_empty() {
            hypothesized.push(0);
        }

        let items: Vec<(Vec<f64>, bool)> = feedback
            .iter()
            .filter_map(|f| Some((self.features_of(&f.stimulus_id, &f.encoded)?, f.label)))
            .collect();
        let preds = self.catalog.predicates;
        let profile = |values: &[f64], features: &[usize]| -> Vec<bool> {
            features
                .iter()
                .flat_map(|&f| self.catalog.predicates_of(f).map(|p| preds[p].eval(values)))
                .collect()
        };
        let mut absent: Vec<(usize, usize)> = (0..self.catalog.dim())
            .filter(|f| !hypothesized.contains(f))
            .map(|f| {
                let mut score = 0;
                for (i, (vi, li)) in items.iter().enumerate() {
                    for (vj, lj) in &items[i + 1..] {
                        if li != lj
                            && profile(vi, &hypothesized) == profile(vj, &hypothesized)
                            && profile(vi, &[f]) != profile(vj, &[f])
                        {
                            score += 1;
                        }
                    }
                }
                (f, score)
            })
            .collect();
        absent.sort_by_key(|&(f, score)| (std::cmp::Reverse(score), f));
        let alternatives: Vec<usize> = absent.into_iter().take(2).map(|(f, _)| f).collect();

        let name = |f: &usize| self.catalog.names[*f].to_string();
        let features_hypothesized: Vec<String> = hypothesized.iter().map(name).collect();
        let alternatives: Vec<String> = alternatives.iter().map(name).collect();
        let prose = format!(
            "From your explanations it looks like your judgement rests on: {}. \
             You might also consider: {}.",
            features_hypothesized.join(", "),
            alternatives.join(", ")
        );
        let h = Hypothesis {
            features_hypothesized,
            alternatives,
            prose,
        };
        h.validate()?;
        Ok(h)
    }
}
