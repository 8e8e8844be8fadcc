//! Simulated participants: rule-based mental models that label stimuli,
//! explain themselves, and answer hypothesis probes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::FeatureCatalog;
use crate::llm::{FeedbackItem, Hypothesis, LabelPair};
use crate::stimulus::{EnvKind, Stimulus};

/// "If predicate holds, the label is `label`" (`true` = aligned).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub predicate: usize,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disclosure {
    Volunteered,
    /// Applied but only mentioned once a hypothesis probe names it.
    Latent,
}

/// M_u: an ordered decision list over catalog predicates with a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub id: String,
    pub env: EnvKind,
    pub clauses: Vec<Clause>,
    pub default_label: bool,
    /// Disclosure state per catalog feature index used by the rule.
    pub disclosure: BTreeMap<usize, Disclosure>,
    /// Clause prepended after the first hypothesis exchange.
    pub revision: Option<Clause>,
    /// Number of hypothesis exchanges after which the user feels stable.
    pub stability_after: usize,
    pub exchanges: usize,
}

/// One spoken clause in the environment's sentence template.
pub fn clause_sentence(env: EnvKind, phrase: &str, label_word: &str) -> String {
    match env {
        EnvKind::AppleFarm => format!("It {phrase}, which is {label_word}."),
        EnvKind::MoralMachine => {
            let mut chars = phrase.chars();
            let first = chars.next().map(|c| c.to_uppercase().to_string()).unwrap_or_default();
            format!("{first}{}, so the car should {label_word}.", chars.as_str())
        }
    }
}

impl UserModel {
    fn catalog(&self) -> FeatureCatalog {
        FeatureCatalog::for_env(self.env)
    }

    pub fn validate(&self) -> Result<()> {
        let catalog = self.catalog();
        for c in self.clauses.iter().chain(&self.revision) {
            if c.predicate >= catalog.predicates.len() {
                return Err(Error::Validation(format!(
                    "user {}: predicate {} out of range",
                    self.id, c.predicate
                )));
            }
        }
        for f in self.rule_features() {
            if !self.disclosure.contains_key(&f) {
                return Err(Error::Validation(format!(
                    "user {}: no disclosure state for feature {f}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    fn feature_of(&self, c: &Clause) -> usize {
        self.catalog().predicates[c.predicate].feature
    }

    /// Index of the first clause that fires on `values`.
    pub fn deciding_clause(&self, values: &[f64]) -> Option<usize> {
        let preds = self.catalog().predicates;
        self.clauses.iter().position(|c| preds[c.predicate].eval(values))
    }

    pub fn label(&self, values: &[f64]) -> bool {
        self.deciding_clause(values)
            .map_or(self.default_label, |i| self.clauses[i].label)
    }

    pub fn label_stimulus(&self, s: &Stimulus) -> bool {
        self.label(&s.features().values)
    }

    /// Catalog features the current rule depends on.
    pub fn rule_features(&self) -> BTreeSet<usize> {
        self.clauses.iter().map(|c| self.feature_of(c)).collect()
    }

    pub fn rule_feature_names(&self) -> BTreeSet<String> {
        let names = self.catalog().names;
        self.rule_features().into_iter().map(|f| names[f].to_string()).collect()
    }

    pub fn latent_features(&self) -> BTreeSet<usize> {
        self.rule_features()
            .into_iter()
            .filter(|f| self.disclosure.get(f) == Some(&Disclosure::Latent))
            .collect()
    }

    fn volunteered(&self, c: &Clause) -> bool {
        self.disclosure.get(&self.feature_of(c)) == Some(&Disclosure::Volunteered)
    }

    fn sentence(&self, c: &Clause, holds: bool, labels: &LabelPair) -> String {
        let p = &self.catalog().predicates[c.predicate];
        let label = if holds { c.label } else { !c.label };
        clause_sentence(self.env, p.phrase(holds), labels.word(label))
    }

    /// Label a stimulus and explain the label with the volunteered clauses
    /// that support it.
    pub fn critique(&self, s: &Stimulus, labels: &LabelPair) -> FeedbackItem {
        let values = s.features().values;
        let preds = self.catalog().predicates;
        let label = self.label(&values);
        let decided_by_default = self.deciding_clause(&values).is_none();
        let sentences: Vec<String> = self
            .clauses
            .iter()
            .filter(|c| self.volunteered(c))
            .filter_map(|c| {
                let fires = preds[c.predicate].eval(&values);
                if fires && c.label == label {
                    Some(self.sentence(c, true, labels))
                } else if decided_by_default && !fires && c.label != label {
                    Some(self.sentence(c, false, labels))
                } else {
                    None
                }
            })
            .collect();
        let explanation = if sentences.is_empty() {
            format!(
                "Nothing in particular stood out; overall it seems {} to me.",
                labels.word(label)
            )
        } else {
            sentences.join(" ")
        };
        FeedbackItem {
            stimulus_id: s.id().to_string(),
            encoded: s.encode(),
            label,
            explanation,
        }
    }

    fn resolve_feature(&self, name: &str) -> Option<usize> {
        let catalog = self.catalog();
        catalog
            .feature_index(name.trim())
            .or_else(|| catalog.mentioned_features(name).first().copied())
    }

    /// Confirm or deny each hypothesized feature, disclose latent features
    /// named among the alternatives, and apply the pending revision on the
    /// first exchange.
    pub fn respond_to_hypothesis(&self, h: &Hypothesis, labels: &LabelPair) -> (String, UserModel, bool) {
        let names = self.catalog().names;
        let mut next = self.clone();
        next.exchanges += 1;
        let in_rule = self.rule_features();
        let mut lines = Vec::new();
        let mut answered = BTreeSet::new();
        for name in &h.features_hypothesized {
            match self.resolve_feature(name) {
                Some(f) if answered.insert(f) => {
                    if in_rule.contains(&f) {
                        lines.push(format!("Yes, {} matters to me.", names[f]));
                    } else {
                        lines.push(format!("No, {} does not matter to me.", names[f]));
                    }
                }
                Some(_) => {}
                None => lines.push(format!("I am not sure what you mean by \"{name}\".")),
            }
        }
        for name in &h.alternatives {
            let Some(f) = self.resolve_feature(name) else {
                continue;
            };
            if !answered.insert(f) {
                continue;
            }
            if next.disclosure.get(&f) == Some(&Disclosure::Latent) {
                next.disclosure.insert(f, Disclosure::Volunteered);
                lines.push(format!("Now that you mention it, {} does matter to me.", names[f]));
                for c in self.clauses.iter().filter(|c| self.feature_of(c) == f) {
                    lines.push(self.sentence(c, true, labels));
                }
            } else if in_rule.contains(&f) {
                lines.push(format!("Yes, {} matters to me.", names[f]));
            } else {
                lines.push(format!("No, {} does not matter to me.", names[f]));
            }
        }
        if next.exchanges == 1 {
            if let Some(rev) = next.revision.take() {
                let preds = self.catalog().predicates;
                let f = preds[rev.predicate].feature;
                next.clauses.retain(|c| preds[c.predicate].feature != f);
                next.clauses.insert(0, rev);
                next.disclosure.insert(f, Disclosure::Volunteered);
                lines.push(format!(
                    "Thinking about it more, I have changed my mind. {}",
                    next.sentence(&rev, true, labels)
                ));
            }
        }
        let stable = next.exchanges >= next.stability_after;
        lines.push(if stable {
            "I think my view is stable now.".to_string()
        } else {
            "I am still working out what I think.".to_string()
        });
        (lines.join(" "), next, stable)
    }
}

/// Parameters of a simulated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub env: EnvKind,
    pub n: usize,
    /// 0 gives every user the consensus rule; 1 gives near-disjoint rules.
    pub heterogeneity: f64,
    pub rule_size: usize,
    pub latent_per_user: usize,
    /// Share of users whose rule changes after the first hypothesis exchange.
    pub revision_fraction: f64,
}

impl PopulationSpec {
    pub fn new(env: EnvKind, n: usize, heterogeneity: f64) -> Self {
        PopulationSpec {
            env,
            n,
            heterogeneity,
            rule_size: 3,
            latent_per_user: 1,
            revision_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = FeatureCatalog::for_env(self.env).dim();
        if self.n < 2 {
            return Err(Error::Config("population needs at least two users".into()));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::Config("heterogeneity must lie in [0, 1]".into()));
        }
        if self.rule_size == 0 || self.rule_size > dim {
            return Err(Error::Config(format!("rule_size must lie in 1..={dim}")));
        }
        if self.latent_per_user >= self.rule_size {
            return Err(Error::Config(
                "latent_per_user must leave at least one volunteered feature".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.revision_fraction) {
            return Err(Error::Config("revision_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The shared starting rule that heterogeneity perturbs.
pub fn consensus_clauses(env: EnvKind) -> Vec<Clause> {
    let c = |predicate, label| Clause { predicate, label };
    match env {
        // leaving home, taking others' apples, crowding others: disrespectful
        EnvKind::AppleFarm => vec![c(0, false), c(2, false), c(8, false)],
        // staying kills more: swerve; only animals ahead: stay; more children ahead: swerve
        EnvKind::MoralMachine => vec![c(0, true), c(4, false), c(6, true)],
    }
}

/// Per-slot replacement probability for a heterogeneity level.
pub fn replacement_probability(heterogeneity: f64) -> f64 {
    heterogeneity.clamp(0.0, 1.0).powf(1.4)
}

/// Deterministic population of rule-based users.
pub fn make_population(seed: u64, spec: &PopulationSpec) -> Result<Vec<UserModel>> {
    spec.validate()?;
    let catalog = FeatureCatalog::for_env(spec.env);
    let dim = catalog.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consensus = consensus_clauses(spec.env);
    let q = replacement_probability(spec.heterogeneity);

    let mut deck: Vec<usize> = Vec::new();
    let mut draw_fresh = |rng: &mut ChaCha8Rng, used: &BTreeSet<usize>| -> usize {
        loop {
            if deck.is_empty() {
                deck = (0..dim).collect();
                deck.shuffle(rng);
            }
            let f = deck.pop().unwrap();
            if !used.contains(&f) {
                return f;
            }
        }
    };
    let random_clause = |rng: &mut ChaCha8Rng, feature: usize| {
        let options: Vec<usize> = catalog.predicates_of(feature).collect();
        Clause {
            predicate: options[rng.random_range(0..options.len())],
            label: rng.random_bool(0.5),
        }
    };

    let revisers = (spec.n as f64 * spec.revision_fraction).round() as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let revising: BTreeSet<usize> = order.into_iter().take(revisers).collect();

    let mut users = Vec::with_capacity(spec.n);
    for u in 0..spec.n {
        let mut clauses: Vec<Clause> = Vec::with_capacity(spec.rule_size);
        let mut used = BTreeSet::new();
        for slot in 0..spec.rule_size {
            let keep = slot < consensus.len() && !rng.random_bool(q);
            let clause = if keep {
                consensus[slot]
            } else {
                let f = draw_fresh(&mut rng, &used);
                random_clause(&mut rng, f)
            };
            let f = catalog.predicates[clause.predicate].feature;
            if used.insert(f) {
                clauses.push(clause);
            } else {
                let f = draw_fresh(&mut rng, &used);
                used.insert(f);
                clauses.push(random_clause(&mut rng, f));
            }
        }
        let aligned_votes = clauses.iter().filter(|c| c.label).count();
        let default_label = match (2 * aligned_votes).cmp(&clauses.len()) {
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Equal => !clauses[0].label,
        };
        let mut disclosure: BTreeMap<usize, Disclosure> = used.iter().map(|&f| (f, Disclosure::Volunteered)).collect();
        for f in used.iter().take(spec.latent_per_user) {
            disclosure.insert(*f, Disclosure::Latent);
        }
        let revision = revising.contains(&u).then(|| {
            let f = draw_fresh(&mut rng, &used);
            random_clause(&mut rng, f)
        });
        users.push(UserModel {
            id: format!("user-{u:02}"),
            env: spec.env,
            clauses,
            default_label,
            disclosure,
            stability_after: if revision.is_some() { 2 } else { 1 },
            revision,
            exchanges: 0,
        });
    }
    Ok(users)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_pairwise_jaccard;

    fn quadrant_user() -> UserModel {
        UserModel {
            id: "u".into(),
            env: EnvKind::AppleFarm,
            clauses: vec![Clause {
                predicate: 0,
                label: false,
            }],
            default_label: true,
            disclosure: [(0, Disclosure::Volunteered)].into_iter().collect(),
            revision: None,
            stability_after: 1,
            exchanges: 0,
        }
    }

    #[test]
    fn quadrant_rule_critique() {
        let labels = EnvKind::AppleFarm.label_pair();
        let pool = EnvKind::AppleFarm.generate(11, 100).unwrap();
        let user = quadrant_user();
        let home = pool.iter().find(|s| s.features().values[0] == 0.0).unwrap();
        let away = pool.iter().find(|s| s.features().values[0] > 0.0).unwrap();
        let fb = user.critique(home, &labels);
        assert!(fb.label);
        assert!(fb.explanation.contains("stayed inside its own quadrant"));
        let fb = user.critique(away, &labels);
        assert!(!fb.label);
        assert!(fb.explanation.contains("left its own quadrant"));
    }

    #[test]
    fn latent_feature_disclosed_on_probe() {
        let labels = EnvKind::AppleFarm.label_pair();
        let mut user = quadrant_user();
        user.clauses.push(Clause {
            predicate: 3,
            label: false,
        });
        user.disclosure.insert(3, Disclosure::Latent);
        let pool = EnvKind::AppleFarm.generate(2, 300).unwrap();
        let dirty = pool
            .iter()
            .find(|s| {
                let v = s.features().values;
                v[0] == 0.0 && v[3] > 0.0
            })
            .expect("a home-staying collector");
        assert!(!user.critique(dirty, &labels).explanation.contains("garbage"));
        let h = Hypothesis {
            features_hypothesized: vec!["steps-outside-own-quadrant".into()],
            alternatives: vec!["garbage-collected".into(), "apples-picked-own".into()],
            prose: String::new(),
        };
        let (text, next, stable) = user.respond_to_hypothesis(&h, &labels);
        assert!(stable);
        assert!(text.contains("cleaned up garbage, which is disrespectful"));
        assert!(next.latent_features().is_empty());
        assert!(next.critique(dirty, &labels).explanation.contains("cleaned up garbage"));
    }

    #[test]
    fn population_extremes() {
        let ids = |users: &[UserModel]| users.iter().map(|u| u.rule_features()).collect::<Vec<_>>();
        let same = make_population(4, &PopulationSpec::new(EnvKind::AppleFarm, 10, 0.0)).unwrap();
        assert_eq!(mean_pairwise_jaccard(&ids(&same)).unwrap(), 1.0);
        let diverse = make_population(4, &PopulationSpec::new(EnvKind::AppleFarm, 10, 1.0)).unwrap();
        assert!(mean_pairwise_jaccard(&ids(&diverse)).unwrap() < 0.2);
        assert!(matches!(
            make_population(4, &PopulationSpec::new(EnvKind::AppleFarm, 1, 0.0)),
            Err(Error::Config(_))
        ));
        for u in same.iter().chain(&diverse) {
            u.validate().unwrap();
        }
    }

    #[test]
    fn mid_heterogeneity_brackets_target_overlap() {
        for seed in 0..20 {
            let users = make_population(seed, &PopulationSpec::new(EnvKind::AppleFarm, 21, 0.5)).unwrap();
            let sets: Vec<_> = users.iter().map(|u| u.rule_features()).collect();
            let j = mean_pairwise_jaccard(&sets).unwrap();
            assert!(j > 0.2 && j < 0.6, "seed {seed}: {j}");
        }
    }
}
