//! Autonomous-vehicle dilemmas: keep course or swerve.
//!
//! The `stay` outcome is always the group of pedestrians ahead of the car.
//! The `swerve` outcome is either pedestrians in the other lane or the car's
//! own passengers (the car then hits a barrier).
//!
//! Vector layout (26 entries):
//!
//! | index  | meaning                                              |
//! |--------|------------------------------------------------------|
//! | 0..13  | stay-group counts in [`CHARACTERS`] order            |
//! | 13..24 | swerve-group counts for the first 11 characters      |
//! | 24     | swerve-group animals (dog + cat)                     |
//! | 25     | legality code: 0 lawful, 1 jaywalking, 2 not applicable |

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VECTOR_DIM: usize = 26;
pub const MAX_GROUP: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Character {
    Man,
    Woman,
    Boy,
    Girl,
    ElderlyMan,
    ElderlyWoman,
    PregnantWoman,
    Doctor,
    Executive,
    Criminal,
    Homeless,
    Dog,
    Cat,
}

/// Canonical character order used by counts and vectors.
pub const CHARACTERS: [Character; 13] = [
    Character::Man,
    Character::Woman,
    Character::Boy,
    Character::Girl,
    Character::ElderlyMan,
    Character::ElderlyWoman,
    Character::PregnantWoman,
    Character::Doctor,
    Character::Executive,
    Character::Criminal,
    Character::Homeless,
    Character::Dog,
    Character::Cat,
];

impl Character {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_animal(self) -> bool {
        matches!(self, Character::Dog | Character::Cat)
    }

    pub fn is_child(self) -> bool {
        matches!(self, Character::Boy | Character::Girl)
    }

    pub fn is_elderly(self) -> bool {
        matches!(self, Character::ElderlyMan | Character::ElderlyWoman)
    }

    /// +1 for high status, -1 for low status, 0 otherwise.
    pub fn status(self) -> i32 {
        match self {
            Character::Doctor | Character::Executive => 1,
            Character::Criminal | Character::Homeless => -1,
            _ => 0,
        }
    }

    fn noun(self, count: u32) -> &'static str {
        let (one, many) = match self {
            Character::Man => ("man", "men"),
            Character::Woman => ("woman", "women"),
            Character::Boy => ("boy", "boys"),
            Character::Girl => ("girl", "girls"),
            Character::ElderlyMan => ("elderly man", "elderly men"),
            Character::ElderlyWoman => ("elderly woman", "elderly women"),
            Character::PregnantWoman => ("pregnant woman", "pregnant women"),
            Character::Doctor => ("doctor", "doctors"),
            Character::Executive => ("executive", "executives"),
            Character::Criminal => ("criminal", "criminals"),
            Character::Homeless => ("homeless person", "homeless people"),
            Character::Dog => ("dog", "dogs"),
            Character::Cat => ("cat", "cats"),
        };
        if count == 1 {
            one
        } else {
            many
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pedestrians,
    Passengers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Legality {
    /// The pedestrians ahead cross lawfully; any pedestrians in the other lane jaywalk.
    PedestriansLawful,
    /// The pedestrians ahead jaywalk; any pedestrians in the other lane cross lawfully.
    PedestriansJaywalking,
    NotApplicable,
}

impl Legality {
    pub fn code(self) -> u32 {
        match self {
            Legality::PedestriansLawful => 0,
            Legality::PedestriansJaywalking => 1,
            Legality::NotApplicable => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierSide {
    Stay,
    Swerve,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OutcomeGroup {
    pub role: Role,
    /// Counts in [`CHARACTERS`] order.
    pub counts: [u32; 13],
}

impl OutcomeGroup {
    pub fn new(role: Role, members: &[(Character, u32)]) -> Self {
        let mut counts = [0; 13];
        for &(c, n) in members {
            counts[c.index()] += n;
        }
        OutcomeGroup { role, counts }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    fn count_where(&self, pred: impl Fn(Character) -> bool) -> u32 {
        CHARACTERS
            .iter()
            .filter(|&&c| pred(c))
            .map(|c| self.counts[c.index()])
            .sum()
    }

    pub fn humans(&self) -> u32 {
        self.count_where(|c| !c.is_animal())
    }

    pub fn animals(&self) -> u32 {
        self.count_where(Character::is_animal)
    }

    pub fn children(&self) -> u32 {
        self.count_where(Character::is_child)
    }

    pub fn elderly(&self) -> u32 {
        self.count_where(Character::is_elderly)
    }

    pub fn status_score(&self) -> i32 {
        CHARACTERS
            .iter()
            .map(|c| c.status() * self.counts[c.index()] as i32)
            .sum()
    }

    /// "2 men and 1 dog" style listing in canonical order.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = CHARACTERS
            .iter()
            .filter(|c| self.counts[c.index()] > 0)
            .map(|&c| {
                let n = self.counts[c.index()];
                format!("{n} {}", c.noun(n))
            })
            .collect();
        match parts.len() {
            0 => "nobody".into(),
            1 => parts[0].clone(),
            n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub stay_outcome: OutcomeGroup,
    pub swerve_outcome: OutcomeGroup,
    pub legality: Legality,
    pub barrier_side: BarrierSide,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("stay", &self.stay_outcome), ("swerve", &self.swerve_outcome)] {
            let total = g.total();
            if !(1..=MAX_GROUP).contains(&total) {
                return Err(Error::Validation(format!(
                    "scenario {}: {name} group has {total} characters, expected 1..=5",
                    self.id
                )));
            }
        }
        if self.stay_outcome == self.swerve_outcome {
            return Err(Error::Validation(format!(
                "scenario {}: both outcomes are identical",
                self.id
            )));
        }
        if self.stay_outcome.role != Role::Pedestrians {
            return Err(Error::Validation(format!(
                "scenario {}: the stay group must be the pedestrians ahead",
                self.id
            )));
        }
        let passengers = self.swerve_outcome.role == Role::Passengers;
        let barrier_ok = match self.barrier_side {
            BarrierSide::Swerve => passengers,
            BarrierSide::None => !passengers,
            BarrierSide::Stay => false,
        };
        if !barrier_ok {
            return Err(Error::Validation(format!(
                "scenario {}: barrier side does not match the swerve group role",
                self.id
            )));
        }
        Ok(())
    }
}

/// Frozen 26-entry vector encoding (see module docs).
pub fn encode_vector(s: &Scenario) -> Result<[f64; VECTOR_DIM]> {
    s.validate()?;
    let mut v = [0.0; VECTOR_DIM];
    for (slot, &count) in v[..13].iter_mut().zip(&s.stay_outcome.counts[..13]) {
        *slot = count as f64;
    }
    for (slot, &count) in v[13..24].iter_mut().zip(&s.swerve_outcome.counts[..11]) {
        *slot = count as f64;
    }
    v[24] = s.swerve_outcome.animals() as f64;
    v[25] = s.legality.code() as f64;
    Ok(v)
}

fn crossing_clause(ahead: bool, legality: Legality) -> &'static str {
    match (legality, ahead) {
        (Legality::NotApplicable, _) => "crossing",
        (Legality::PedestriansLawful, true) | (Legality::PedestriansJaywalking, false) => {
            "crossing legally on a green signal"
        }
        _ => "jaywalking against a red signal",
    }
}

/// Deterministic three-line text rendering.
pub fn encode_text(s: &Scenario) -> String {
    let stay = format!(
        "If the car stays on course, it kills {} {} ahead.",
        s.stay_outcome.describe(),
        crossing_clause(true, s.legality)
    );
    let swerve = match s.swerve_outcome.role {
        Role::Passengers => format!(
            "If the car swerves, it hits a barrier and kills its passengers: {}.",
            s.swerve_outcome.describe()
        ),
        Role::Pedestrians => format!(
            "If the car swerves, it kills {} {} in the other lane.",
            s.swerve_outcome.describe(),
            crossing_clause(false, s.legality)
        ),
    };
    format!("Scenario {}\n{stay}\n{swerve}\n", s.id)
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn parse_group(text: &str, role: Role) -> Result<OutcomeGroup> {
    let mut counts = [0u32; 13];
    let normalized = text.replace(" and ", ", ");
    for part in normalized.split(", ") {
        let (n, noun) = part
            .split_once(' ')
            .ok_or_else(|| parse_err(format!("bad group member {part:?}")))?;
        let n: u32 = n.parse().map_err(|_| parse_err(format!("bad count in {part:?}")))?;
        let c = CHARACTERS
            .iter()
            .find(|c| c.noun(n) == noun)
            .ok_or_else(|| parse_err(format!("unknown character {noun:?}")))?;
        counts[c.index()] += n;
    }
    Ok(OutcomeGroup { role, counts })
}

/// Inverse of [`encode_text`].
pub fn parse_text(text: &str) -> Result<Scenario> {
    let mut lines = text.lines();
    let id = lines
        .next()
        .and_then(|l| l.strip_prefix("Scenario "))
        .ok_or_else(|| parse_err("missing scenario header"))?
        .to_string();
    let stay_line = lines.next().ok_or_else(|| parse_err("missing stay line"))?;
    let swerve_line = lines.next().ok_or_else(|| parse_err("missing swerve line"))?;

    let stay_body = stay_line
        .strip_prefix("If the car stays on course, it kills ")
        .and_then(|r| r.strip_suffix(" ahead."))
        .ok_or_else(|| parse_err("bad stay line"))?;
    let clauses = [
        ("crossing legally on a green signal", Legality::PedestriansLawful),
        ("jaywalking against a red signal", Legality::PedestriansJaywalking),
        ("crossing", Legality::NotApplicable),
    ];
    let (stay_group, legality) = clauses
        .iter()
        .find_map(|(clause, leg)| {
            stay_body
                .strip_suffix(clause)
                .and_then(|g| g.strip_suffix(' '))
                .map(|g| (g, *leg))
        })
        .ok_or_else(|| parse_err("bad stay legality clause"))?;
    let stay_outcome = parse_group(stay_group, Role::Pedestrians)?;

    let (swerve_outcome, barrier_side) = if let Some(rest) =
        swerve_line.strip_prefix("If the car swerves, it hits a barrier and kills its passengers: ")
    {
        let group = rest.strip_suffix('.').ok_or_else(|| parse_err("bad swerve line"))?;
        (parse_group(group, Role::Passengers)?, BarrierSide::Swerve)
    } else {
        let body = swerve_line
            .strip_prefix("If the car swerves, it kills ")
            .and_then(|r| r.strip_suffix(" in the other lane."))
            .ok_or_else(|| parse_err("bad swerve line"))?;
        let clause = crossing_clause(false, legality);
        let group = body
            .strip_suffix(clause)
            .and_then(|g| g.strip_suffix(' '))
            .ok_or_else(|| parse_err("swerve legality clause disagrees with stay line"))?;
        (parse_group(group, Role::Pedestrians)?, BarrierSide::None)
    };
    let s = Scenario {
        id,
        stay_outcome,
        swerve_outcome,
        legality,
        barrier_side,
    };
    s.validate()?;
    Ok(s)
}

const ADULTS: [Character; 3] = [Character::Man, Character::Woman, Character::PregnantWoman];
const HUMANS: [Character; 11] = [
    Character::Man,
    Character::Woman,
    Character::Boy,
    Character::Girl,
    Character::ElderlyMan,
    Character::ElderlyWoman,
    Character::PregnantWoman,
    Character::Doctor,
    Character::Executive,
    Character::Criminal,
    Character::Homeless,
];

fn fill(rng: &mut impl Rng, pool: &[Character], size: u32) -> [u32; 13] {
    let mut counts = [0; 13];
    for _ in 0..size {
        counts[pool.choose(rng).unwrap().index()] += 1;
    }
    counts
}

/// One contrast template per draw: species, age, status, group size, or random.
fn draw_groups(rng: &mut impl Rng) -> ([u32; 13], [u32; 13]) {
    let template = rng.random_range(0..5);
    let a_size = rng.random_range(1..=MAX_GROUP);
    let b_size = rng.random_range(1..=MAX_GROUP);
    let (a, b) = match template {
        0 => (
            fill(rng, &HUMANS, a_size),
            fill(rng, &[Character::Dog, Character::Cat], b_size),
        ),
        1 => (
            fill(rng, &[Character::Boy, Character::Girl], a_size),
            fill(rng, &[Character::ElderlyMan, Character::ElderlyWoman], b_size),
        ),
        2 => (
            fill(rng, &[Character::Doctor, Character::Executive], a_size),
            fill(rng, &[Character::Criminal, Character::Homeless], b_size),
        ),
        3 => {
            let c = *ADULTS.choose(rng).unwrap();
            let mut a = [0; 13];
            let mut b = [0; 13];
            a[c.index()] = a_size;
            b[c.index()] = b_size;
            (a, b)
        }
        _ => (fill(rng, &CHARACTERS, a_size), fill(rng, &CHARACTERS, b_size)),
    };
    if rng.random_bool(0.5) {
        (a, b)
    } else {
        (b, a)
    }
}

fn draw_scenario(id: String, rng: &mut ChaCha8Rng) -> Scenario {
    let (stay_counts, swerve_counts) = draw_groups(rng);
    let passengers = rng.random_bool(0.25);
    let (role, legality, barrier_side) = if passengers {
        (Role::Passengers, Legality::NotApplicable, BarrierSide::Swerve)
    } else if rng.random_bool(0.5) {
        (Role::Pedestrians, Legality::PedestriansLawful, BarrierSide::None)
    } else {
        (Role::Pedestrians, Legality::PedestriansJaywalking, BarrierSide::None)
    };
    Scenario {
        id,
        stay_outcome: OutcomeGroup {
            role: Role::Pedestrians,
            counts: stay_counts,
        },
        swerve_outcome: OutcomeGroup {
            role,
            counts: swerve_counts,
        },
        legality,
        barrier_side,
    }
}

/// Generate `count` valid scenarios with pairwise-distinct vector encodings.
pub fn generate_scenarios(seed: u64, count: usize) -> Result<Vec<Scenario>> {
    if count < 1 {
        return Err(Error::Config("scenario count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: BTreeSet<[u64; VECTOR_DIM]> = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let max_draws = count.saturating_mul(200).max(10_000);
    for _ in 0..max_draws {
        if out.len() == count {
            break;
        }
        let s = draw_scenario(format!("mm-{seed}-{:05}", out.len()), &mut rng);
        if s.validate().is_err() {
            continue;
        }
        let key = encode_vector(&s)?.map(|x| x as u64);
        if seen.insert(key) {
            out.push(s);
        }
    }
    if out.len() < count {
        return Err(Error::Config(format!(
            "could only generate {} distinct scenarios",
            out.len()
        )));
    }
    Ok(out)
}
