//! Behavioural feature catalogs and the featurizers φ for both environments.
//!
//! Each catalog also carries a list of boolean predicates over its features,
//! each with a pair of plain-English phrases (predicate holds / fails). The
//! simulated users speak these phrases and the scripted backend reads them
//! back, so the phrases must be unambiguous after longest-first matching.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::applefarm::{EventKind, Trajectory, MAIN_ORCHARD};
use crate::error::{Error, Result};
use crate::moralmachine::{Legality, Role, Scenario};
use crate::stimulus::EnvKind;

pub const CATALOG_VERSION: &str = "catalog-v1";

pub const APPLEFARM_FEATURES: [&str; 12] = [
    "steps-outside-own-quadrant",
    "apples-picked-own",
    "apples-picked-others",
    "garbage-collected",
    "garbage-before-apples",
    "min-distance-to-other-agents",
    "entered-occupied-quadrant",
    "entered-unoccupied-quadrant",
    "blocked-other-agent",
    "picked-from-moving-agent-quadrant",
    "idle-steps",
    "finished-own-before-leaving",
];

pub const MORALMACHINE_FEATURES: [&str; 9] = [
    "casualty-difference",
    "traffic-rule-compliance",
    "humans-vs-animals",
    "children-present-difference",
    "elderly-difference",
    "passengers-vs-pedestrians",
    "social-status-difference",
    "intervention-required",
    "group-size-equal",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    Gt,
    Lt,
}

/// A boolean test `value(feature) <op> threshold` with its spoken forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predicate {
    pub feature: usize,
    pub cmp: Cmp,
    pub threshold: f64,
    pub holds: &'static str,
    pub fails: &'static str,
}

impl Predicate {
    pub fn eval(&self, values: &[f64]) -> bool {
        let v = values[self.feature];
        match self.cmp {
            Cmp::Gt => v > self.threshold,
            Cmp::Lt => v < self.threshold,
        }
    }

    pub fn phrase(&self, holds: bool) -> &'static str {
        if holds {
            self.holds
        } else {
            self.fails
        }
    }
}

const fn pred(feature: usize, cmp: Cmp, threshold: f64, holds: &'static str, fails: &'static str) -> Predicate {
    Predicate {
        feature,
        cmp,
        threshold,
        holds,
        fails,
    }
}

pub const APPLEFARM_PREDICATES: [Predicate; 12] = [
    pred(
        0,
        Cmp::Gt,
        0.0,
        "left its own quadrant",
        "stayed inside its own quadrant",
    ),
    pred(
        1,
        Cmp::Gt,
        0.0,
        "harvested apples in its own orchard",
        "harvested nothing in its own orchard",
    ),
    pred(
        2,
        Cmp::Gt,
        0.0,
        "took apples from another agent's orchard",
        "left other agents' apples alone",
    ),
    pred(3, Cmp::Gt, 0.0, "cleaned up garbage", "ignored the garbage"),
    pred(
        4,
        Cmp::Gt,
        0.0,
        "dealt with garbage before apples",
        "went for apples before garbage",
    ),
    pred(
        5,
        Cmp::Lt,
        2.0,
        "came right next to another agent",
        "kept its distance from other agents",
    ),
    pred(
        6,
        Cmp::Gt,
        0.0,
        "walked into an orchard while its owner was there",
        "avoided orchards whose owners were present",
    ),
    pred(
        7,
        Cmp::Gt,
        0.0,
        "walked into an orchard while its owner was away",
        "avoided orchards whose owners were away",
    ),
    pred(
        8,
        Cmp::Gt,
        0.0,
        "crowded another agent inside that agent's orchard",
        "gave other agents room in their orchards",
    ),
    pred(
        9,
        Cmp::Gt,
        0.0,
        "took apples from the wandering agent's orchard",
        "left the wandering agent's apples alone",
    ),
    pred(10, Cmp::Gt, 2.0, "wasted several steps idling", "kept busy"),
    pred(
        11,
        Cmp::Gt,
        0.0,
        "finished its own apples before leaving",
        "did not finish its own apples before leaving",
    ),
];

pub const MORALMACHINE_PREDICATES: [Predicate; 15] = [
    pred(
        0,
        Cmp::Gt,
        0.0,
        "keeping course kills more characters",
        "keeping course kills no more characters",
    ),
    pred(
        0,
        Cmp::Lt,
        0.0,
        "keeping course kills fewer characters",
        "keeping course kills no fewer characters",
    ),
    pred(
        1,
        Cmp::Gt,
        0.0,
        "the other lane has jaywalkers",
        "the other lane has no jaywalkers",
    ),
    pred(
        1,
        Cmp::Lt,
        0.0,
        "the people ahead are jaywalking",
        "the people ahead are not jaywalking",
    ),
    pred(2, Cmp::Gt, 0.0, "only animals are ahead", "not only animals are ahead"),
    pred(
        2,
        Cmp::Lt,
        0.0,
        "only animals are in the other lane",
        "not only animals are in the other lane",
    ),
    pred(3, Cmp::Gt, 0.0, "more children are ahead", "no more children are ahead"),
    pred(
        3,
        Cmp::Lt,
        0.0,
        "more children are in the other lane",
        "no more children are in the other lane",
    ),
    pred(
        4,
        Cmp::Gt,
        0.0,
        "more elderly people are ahead",
        "no more elderly people are ahead",
    ),
    pred(
        4,
        Cmp::Lt,
        0.0,
        "more elderly people are in the other lane",
        "no more elderly people are in the other lane",
    ),
    pred(
        5,
        Cmp::Gt,
        0.0,
        "swerving would kill the passengers",
        "swerving would spare the passengers",
    ),
    pred(
        6,
        Cmp::Gt,
        0.0,
        "higher-status people are ahead",
        "no higher-status people are ahead",
    ),
    pred(
        6,
        Cmp::Lt,
        0.0,
        "higher-status people are in the other lane",
        "no higher-status people are in the other lane",
    ),
    pred(
        7,
        Cmp::Gt,
        0.0,
        "only intervening saves more humans",
        "intervening saves no more humans",
    ),
    pred(
        8,
        Cmp::Gt,
        0.0,
        "both groups are the same size",
        "the groups differ in size",
    ),
];

/// Feature names and predicates for one environment.
#[derive(Debug, Clone, Copy)]
pub struct FeatureCatalog {
    pub env: EnvKind,
    pub names: &'static [&'static str],
    pub predicates: &'static [Predicate],
}

impl FeatureCatalog {
    pub fn for_env(env: EnvKind) -> Self {
        match env {
            EnvKind::AppleFarm => FeatureCatalog {
                env,
                names: &APPLEFARM_FEATURES,
                predicates: &APPLEFARM_PREDICATES,
            },
            EnvKind::MoralMachine => FeatureCatalog {
                env,
                names: &MORALMACHINE_FEATURES,
                predicates: &MORALMACHINE_PREDICATES,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    /// Predicate indices that test `feature`.
    pub fn predicates_of(&self, feature: usize) -> impl Iterator<Item = usize> + '_ {
        self.predicates
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.feature == feature)
            .map(|(i, _)| i)
    }

    /// Every predicate phrase found in `text`, longest phrases first with
    /// matched spans masked, returned in order of appearance as
    /// `(predicate index, holds, byte offset)`.
    pub fn find_phrases(&self, text: &str) -> Vec<(usize, bool, usize)> {
        let lower = text.to_lowercase();
        let mut candidates: Vec<(usize, bool, &str)> = self
            .predicates
            .iter()
            .enumerate()
            .flat_map(|(i, p)| [(i, true, p.holds), (i, false, p.fails)])
            .collect();
        candidates.sort_by_key(|(i, holds, phrase)| (std::cmp::Reverse(phrase.len()), *i, !*holds));
        let mut masked = vec![false; lower.len()];
        let mut found = Vec::new();
        for (i, holds, phrase) in candidates {
            let mut from = 0;
            while let Some(pos) = lower[from..].find(phrase) {
                let start = from + pos;
                let end = start + phrase.len();
                if !masked[start..end].iter().any(|m| *m) {
                    masked[start..end].iter_mut().for_each(|m| *m = true);
                    found.push((i, holds, start));
                }
                from = end;
            }
        }
        found.sort_by_key(|f| f.2);
        found
    }

    /// Features whose name or any predicate phrase occurs in `text`.
    pub fn mentioned_features(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let mut out: Vec<usize> = self
            .find_phrases(text)
            .into_iter()
            .map(|(p, _, _)| self.predicates[p].feature)
            .chain((0..self.dim()).filter(|&f| lower.contains(self.names[f])))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// φ(τ): values paired with their catalog names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

impl FeatureVector {
    fn from_catalog(env: EnvKind, values: Vec<f64>) -> Self {
        let names = FeatureCatalog::for_env(env)
            .names
            .iter()
            .map(|s| s.to_string())
            .collect();
        FeatureVector { values, names }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }
}

/// Study-1 featurizer; counts are exact tallies over the trajectory.
pub fn featurize_applefarm(t: &Trajectory) -> FeatureVector {
    let frames = &t.frames;
    let mover_orchard = t.mover + 1;
    let picks = || t.events.iter().filter(|e| e.kind == EventKind::ApplePick);
    let collects = || t.events.iter().filter(|e| e.kind == EventKind::GarbageCollect);

    let steps_outside = frames[1..]
        .iter()
        .filter(|f| f.main_agent.orchard() != MAIN_ORCHARD)
        .count();
    let picked_own = picks().filter(|e| e.cell.orchard() == MAIN_ORCHARD).count();
    let picked_others = picks().filter(|e| e.cell.orchard() != MAIN_ORCHARD).count();
    let collected = collects().count();
    let first_pick = picks().map(|e| e.step).min();
    let first_collect = collects().map(|e| e.step).min();
    let garbage_first = match (first_collect, first_pick) {
        (Some(c), Some(p)) => c < p,
        (Some(_), None) => true,
        _ => false,
    };
    let min_distance = frames
        .iter()
        .flat_map(|f| f.background_agents.iter().map(move |b| f.main_agent.manhattan(*b)))
        .min()
        .unwrap_or(0);

    let mut entered_occupied = 0;
    let mut entered_unoccupied = 0;
    let mut crowded = 0;
    let mut idle = 0;
    let mut finished_before_leaving = false;
    let mut left_yet = false;
    for (step, pair) in frames.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        let (from, to) = (prev.main_agent.orchard(), next.main_agent.orchard());
        if to != from && to != MAIN_ORCHARD {
            if next.owner_present(to) {
                entered_occupied += 1;
            } else {
                entered_unoccupied += 1;
            }
        }
        if !left_yet && to != MAIN_ORCHARD {
            left_yet = true;
            finished_before_leaving = !prev.apples.iter().any(|c| c.orchard() == MAIN_ORCHARD);
        }
        if prev.main_agent == next.main_agent && !t.events.iter().any(|e| e.step == step) {
            idle += 1;
        }
    }
    for f in &frames[1..] {
        let crowding =
            f.background_agents.iter().enumerate().any(|(j, b)| {
                b.orchard() == j + 1 && f.main_agent.orchard() == j + 1 && f.main_agent.manhattan(*b) == 1
            });
        if crowding {
            crowded += 1;
        }
    }
    let picked_from_mover = picks().filter(|e| e.cell.orchard() == mover_orchard).count();

    let values = vec![
        steps_outside as f64,
        picked_own as f64,
        picked_others as f64,
        collected as f64,
        f64::from(u8::from(garbage_first)),
        min_distance as f64,
        entered_occupied as f64,
        entered_unoccupied as f64,
        crowded as f64,
        picked_from_mover as f64,
        idle as f64,
        f64::from(u8::from(finished_before_leaving)),
    ];
    FeatureVector::from_catalog(EnvKind::AppleFarm, values)
}

fn sign_flag(a: bool, b: bool) -> f64 {
    match (a, b) {
        (true, false) => 1.0,
        (false, true) => -1.0,
        _ => 0.0,
    }
}

/// Study-2 featurizer; differences are always stay-group minus swerve-group.
pub fn featurize_moralmachine(s: &Scenario) -> FeatureVector {
    let (stay, swerve) = (&s.stay_outcome, &s.swerve_outcome);
    let only_animals = |g: &crate::moralmachine::OutcomeGroup| g.humans() == 0 && g.animals() > 0;
    let compliance = match s.legality {
        Legality::PedestriansLawful => 1.0,
        Legality::PedestriansJaywalking => -1.0,
        Legality::NotApplicable => 0.0,
    };
    let values = vec![
        stay.total() as f64 - swerve.total() as f64,
        compliance,
        sign_flag(only_animals(stay), only_animals(swerve)),
        stay.children() as f64 - swerve.children() as f64,
        stay.elderly() as f64 - swerve.elderly() as f64,
        f64::from(u8::from(swerve.role == Role::Passengers)),
        f64::from(stay.status_score() - swerve.status_score()),
        f64::from(u8::from(stay.humans() > swerve.humans())),
        f64::from(u8::from(stay.total() == swerve.total())),
    ];
    FeatureVector::from_catalog(EnvKind::MoralMachine, values)
}

/// Per-column min-max scaling into [0, 1]; constant columns map to 0.
pub fn min_max_normalize(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let dim = first.len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in rows {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    rows.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let span = hi[j] - lo[j];
                    if span > 0.0 {
                        (v - lo[j]) / span
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Write a feature matrix as CSV with an `id` column followed by feature names.
pub fn write_feature_csv<W: Write>(writer: W, names: &[&str], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id"];
    header.extend_from_slice(names);
    w.write_record(&header)?;
    for (id, values) in rows {
        if values.len() != names.len() {
            return Err(Error::Validation(format!(
                "row {id} has {} values for {} features",
                values.len(),
                names.len()
            )));
        }
        let mut record = vec![id.clone()];
        record.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::applefarm::{Action, Cell, GridState};
    use crate::moralmachine::{BarrierSide, Character, OutcomeGroup};
    use std::collections::BTreeSet;

    #[test]
    fn phrases_are_unique_and_parse_back() {
        for env in [EnvKind::AppleFarm, EnvKind::MoralMachine] {
            let cat = FeatureCatalog::for_env(env);
            let mut all = BTreeSet::new();
            for (i, p) in cat.predicates.iter().enumerate() {
                for holds in [true, false] {
                    let phrase = p.phrase(holds);
                    assert!(all.insert(phrase), "duplicate phrase {phrase}");
                    let found = cat.find_phrases(&format!("Well, {phrase}, really."));
                    assert_eq!(found, vec![(i, holds, 6)], "{phrase}");
                }
            }
        }
    }

    #[test]
    fn staying_home_is_zero_outside() {
        let state = GridState {
            apples: [Cell(0, 1), Cell(1, 1), Cell(2, 2)].into_iter().collect(),
            garbage: BTreeSet::new(),
            main_agent: Cell(0, 0),
            background_agents: [Cell(0, 4), Cell(4, 0), Cell(4, 4)],
        };
        let t = Trajectory::replay(
            "t",
            state,
            vec![
                Action::Right,
                Action::Pick,
                Action::Down,
                Action::Pick,
                Action::Right,
                Action::Down,
                Action::Pick,
            ],
            0,
            vec![
                Action::Down,
                Action::Stay,
                Action::Stay,
                Action::Stay,
                Action::Stay,
                Action::Stay,
                Action::Stay,
            ],
        )
        .unwrap();
        let f = featurize_applefarm(&t);
        assert_eq!(f.get("steps-outside-own-quadrant"), Some(0.0));
        assert_eq!(f.get("apples-picked-own"), Some(3.0));
        assert_eq!(f.get("apples-picked-others"), Some(0.0));
        assert_eq!(f.values.len(), 12);
    }

    #[test]
    fn moral_features() {
        let s = Scenario {
            id: "s".into(),
            stay_outcome: OutcomeGroup::new(Role::Pedestrians, &[(Character::Man, 3)]),
            swerve_outcome: OutcomeGroup::new(Role::Pedestrians, &[(Character::Woman, 1)]),
            legality: Legality::PedestriansLawful,
            barrier_side: BarrierSide::None,
        };
        let f = featurize_moralmachine(&s);
        assert_eq!(f.get("casualty-difference"), Some(2.0));
        assert_eq!(f.get("group-size-equal"), Some(0.0));
        let mut eq = s.clone();
        eq.swerve_outcome = OutcomeGroup::new(Role::Pedestrians, &[(Character::Dog, 3)]);
        let f = featurize_moralmachine(&eq);
        assert_eq!(f.get("casualty-difference"), Some(0.0));
        assert_eq!(f.get("group-size-equal"), Some(1.0));
        assert_eq!(f.get("humans-vs-animals"), Some(-1.0));
    }

    #[test]
    fn normalization_bounds() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![2.0, 5.0]];
        assert_eq!(
            min_max_normalize(&rows),
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.0]]
        );
    }
}
