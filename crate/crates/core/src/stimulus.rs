//! Environment-agnostic view of trajectories and scenarios.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::applefarm::{self, Trajectory, GRID_SIZE};
use crate::error::{Error, Result};
use crate::featurize::{featurize_applefarm, featurize_moralmachine, FeatureVector};
use crate::llm::LabelPair;
use crate::moralmachine::{self, Scenario};

/// Number of frames kept in the flattened Study-1 network input.
pub const MLP_FRAMES: usize = 10;
/// Per-cell one-hot channels: main agent, background agent, apple, garbage.
pub const MLP_CHANNELS: usize = 4;
pub const APPLEFARM_MLP_DIM: usize = MLP_FRAMES * GRID_SIZE * GRID_SIZE * MLP_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "applefarm")]
    AppleFarm,
    #[serde(rename = "moralmachine")]
    MoralMachine,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::AppleFarm => "applefarm",
            EnvKind::MoralMachine => "moralmachine",
        }
    }

    pub fn parse(name: &str) -> Result<EnvKind> {
        match name {
            "applefarm" => Ok(EnvKind::AppleFarm),
            "moralmachine" => Ok(EnvKind::MoralMachine),
            other => Err(Error::Config(format!(
                "unknown env {other:?}, expected applefarm or moralmachine"
            ))),
        }
    }

    pub fn env_description(self) -> String {
        match self {
            EnvKind::AppleFarm => applefarm::env_description(),
            EnvKind::MoralMachine => moralmachine_description(),
        }
    }

    pub fn label_pair(self) -> LabelPair {
        match self {
            EnvKind::AppleFarm => LabelPair::new("respectful", "disrespectful"),
            EnvKind::MoralMachine => LabelPair::new("swerve", "stay"),
        }
    }

    pub fn value_concept(self) -> &'static str {
        match self {
            EnvKind::AppleFarm => "respectfulness",
            EnvKind::MoralMachine => "the right choice for the car",
        }
    }

    /// Number of diversity samples shown in the construction loop.
    pub fn default_k(self) -> usize {
        match self {
            EnvKind::AppleFarm => 4,
            EnvKind::MoralMachine => 6,
        }
    }

    pub fn mlp_dim(self) -> usize {
        match self {
            EnvKind::AppleFarm => APPLEFARM_MLP_DIM,
            EnvKind::MoralMachine => moralmachine::VECTOR_DIM,
        }
    }

    pub fn feature_dim(self) -> usize {
        crate::featurize::FeatureCatalog::for_env(self).dim()
    }

    /// Deterministic stimulus pool for this environment.
    pub fn generate(self, seed: u64, count: usize) -> Result<Vec<Stimulus>> {
        Ok(match self {
            EnvKind::AppleFarm => applefarm::generate_pool(seed, count, &applefarm::BehaviorMix::uniform())?
                .into_iter()
                .map(Stimulus::Trajectory)
                .collect(),
            EnvKind::MoralMachine => moralmachine::generate_scenarios(seed, count)?
                .into_iter()
                .map(Stimulus::Scenario)
                .collect(),
        })
    }
}

pub const MORALMACHINE_DESCRIPTION_VERSION: &str = "moralmachine-envdesc-v1";

fn moralmachine_description() -> String {
    format!(
        "Environment: autonomous-vehicle dilemmas ({MORALMACHINE_DESCRIPTION_VERSION}).\n\
A self-driving car with sudden brake failure must either stay on course or swerve into the other lane.\n\
Staying on course kills the pedestrians ahead. Swerving kills either the pedestrians in the other \
lane or, when a barrier blocks the other lane, the passengers inside the car.\n\
Characters: men, women, boys, girls, elderly men, elderly women, pregnant women, doctors, \
executives, criminals, homeless people, dogs and cats.\n\
Pedestrians may be crossing legally on a green signal or jaywalking against a red signal.\n\
Each scenario is described in three lines: its id, the outcome of staying on course, and \
the outcome of swerving. The decision is either `swerve` or `stay`.\n"
    )
}

/// A trajectory or a dilemma scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stimulus {
    Trajectory(Trajectory),
    Scenario(Scenario),
}

impl Stimulus {
    pub fn id(&self) -> &str {
        match self {
            Stimulus::Trajectory(t) => &t.id,
            Stimulus::Scenario(s) => &s.id,
        }
    }

    pub fn env(&self) -> EnvKind {
        match self {
            Stimulus::Trajectory(_) => EnvKind::AppleFarm,
            Stimulus::Scenario(_) => EnvKind::MoralMachine,
        }
    }

    /// α(τ): the text shown to both the user and the language model.
    pub fn encode(&self) -> String {
        match self {
            Stimulus::Trajectory(t) => applefarm::encode_ascii(t),
            Stimulus::Scenario(s) => moralmachine::encode_text(s),
        }
    }

    pub fn features(&self) -> FeatureVector {
        match self {
            Stimulus::Trajectory(t) => featurize_applefarm(t),
            Stimulus::Scenario(s) => featurize_moralmachine(s),
        }
    }

    /// Flattened network input: occupancy tensor for trajectories, the
    /// 26-entry vector for scenarios.
    pub fn mlp_input(&self) -> Vec<f64> {
        match self {
            Stimulus::Trajectory(t) => trajectory_tensor(t),
            Stimulus::Scenario(s) => encode_vector_unchecked(s),
        }
    }

    /// Recover a stimulus from its encoding. Trajectory text carries no id,
    /// so `id` is used for it; scenarios carry their own.
    pub fn parse(env: EnvKind, encoded: &str, id: &str) -> Result<Stimulus> {
        match env {
            EnvKind::AppleFarm => applefarm::parse_ascii(encoded, id).map(Stimulus::Trajectory),
            EnvKind::MoralMachine => moralmachine::parse_text(encoded).map(Stimulus::Scenario),
        }
    }
}

fn encode_vector_unchecked(s: &Scenario) -> Vec<f64> {
    moralmachine::encode_vector(s)
        .map(|v| v.to_vec())
        .unwrap_or_else(|_| vec![0.0; moralmachine::VECTOR_DIM])
}

/// Frame-major, cell-major, channel-minor one-hot tensor of the first
/// [`MLP_FRAMES`] frames; shorter trajectories are zero-padded.
pub fn trajectory_tensor(t: &Trajectory) -> Vec<f64> {
    let cells = GRID_SIZE * GRID_SIZE;
    let mut out = vec![0.0; APPLEFARM_MLP_DIM];
    for (k, frame) in t.frames.iter().take(MLP_FRAMES).enumerate() {
        let base = k * cells * MLP_CHANNELS;
        let at = |c: applefarm::Cell, ch: usize| base + (c.row() * GRID_SIZE + c.col()) * MLP_CHANNELS + ch;
        out[at(frame.main_agent, 0)] = 1.0;
        for &b in &frame.background_agents {
            out[at(b, 1)] = 1.0;
        }
        for &a in &frame.apples {
            out[at(a, 2)] = 1.0;
        }
        for &g in &frame.garbage {
            out[at(g, 3)] = 1.0;
        }
    }
    out
}

/// Write one JSON document per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Read one JSON document per non-empty line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}
