//! Experiment manifests: one TOML or JSON file describing a simulated study
//! or an interactive session.

use std::fmt;
use std::path::Path;

use irda_core::mlp::CurveConfig;
use irda_core::oracle::PopulationSpec;
use irda_core::reward::Metric;
use irda_core::session::SessionConfig;
use irda_core::stimulus::EnvKind;
use irda_core::study::{default_metric, StudyConfig};
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A manifest that failed to parse or validate, with the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestError(pub String);

impl fmt::Display for ManifestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid manifest: {}", self.0)
    }
}

impl std::error::Error for ManifestError {}

fn invalid(field: &str, msg: impl fmt::Display) -> ManifestError {
    ManifestError(format!("{field}: {msg}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSection {
    pub n: usize,
    pub heterogeneity: f64,
    pub rule_size: usize,
    pub latent_per_user: usize,
    pub revision_fraction: f64,
}

impl Default for PopulationSection {
    fn default() -> Self {
        let spec = PopulationSpec::new(EnvKind::AppleFarm, 21, 0.5);
        PopulationSection {
            n: spec.n,
            heterogeneity: spec.heterogeneity,
            rule_size: spec.rule_size,
            latent_per_user: spec.latent_per_user,
            revision_fraction: spec.revision_fraction,
        }
    }
}

/// Simulated users, or `"interactive"` for a session driven by a person.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Population {
    #[default]
    Interactive,
    Simulated(PopulationSection),
}

impl Serialize for Population {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Population::Interactive => serializer.serialize_str("interactive"),
            Population::Simulated(section) => section.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Population {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PopulationVisitor;

        impl<'de> Visitor<'de> for PopulationVisitor {
            type Value = Population;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"interactive\" or a population table")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Population, E> {
                match v {
                    "interactive" => Ok(Population::Interactive),
                    other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
                }
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<Population, A::Error> {
                PopulationSection::deserialize(de::value::MapAccessDeserializer::new(map)).map(Population::Simulated)
            }
        }

        deserializer.deserialize_any(PopulationVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendSpec {
    /// The deterministic rule-reading backend.
    #[default]
    Scripted,
    /// An OpenAI-compatible endpoint; unset fields come from `IRDA_LLM_*`.
    Http {
        url: Option<String>,
        model: Option<String>,
        top_logprobs: Option<u32>,
        max_attempts: Option<u32>,
        min_interval_ms: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveSection {
    pub max_count: usize,
    pub epochs: usize,
}

impl Default for CurveSection {
    fn default() -> Self {
        let c = CurveConfig::new(Metric::Accuracy, 0);
        CurveSection {
            max_count: c.max_count,
            epochs: c.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub env: EnvKind,
    #[serde(default)]
    pub population: Population,
    #[serde(default)]
    pub seed: u64,
    pub k: Option<usize>,
    pub epsilon: Option<f64>,
    pub budget: Option<usize>,
    #[serde(default)]
    pub backend: BackendSpec,
    /// Defaults to `seed`.
    pub pool_seed: Option<u64>,
    /// Defaults to `seed`.
    pub cluster_seed: Option<u64>,
    pub design_size: Option<usize>,
    pub uncertainty_size: Option<usize>,
    pub test_size: Option<usize>,
    pub max_construction_loops: Option<usize>,
    pub metric: Option<Metric>,
    #[serde(default)]
    pub curves: CurveSection,
    pub bootstrap_resamples: Option<usize>,
}

impl ExperimentManifest {
    pub fn minimal(env: EnvKind) -> Self {
        ExperimentManifest {
            env,
            population: Population::Interactive,
            seed: 0,
            k: None,
            epsilon: None,
            budget: None,
            backend: BackendSpec::Scripted,
            pool_seed: None,
            cluster_seed: None,
            design_size: None,
            uncertainty_size: None,
            test_size: None,
            max_construction_loops: None,
            metric: None,
            curves: CurveSection::default(),
            bootstrap_resamples: None,
        }
    }

    /// Parse JSON when the text starts with `{`, TOML otherwise, then
    /// validate.
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let manifest: ExperimentManifest = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| ManifestError(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ManifestError(toml_message(text, &e)))?
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read manifest {}: {e}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or_else(|| default_metric(self.env))
    }

    pub fn session_config(&self, id: &str) -> SessionConfig {
        let d = SessionConfig::new(id, self.env);
        SessionConfig {
            id: id.to_string(),
            env: self.env,
            k: self.k.unwrap_or(d.k),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            budget: self.budget.unwrap_or(d.budget),
            pool_seed: self.pool_seed.unwrap_or(self.seed),
            cluster_seed: self.cluster_seed.unwrap_or(self.seed),
            design_size: self.design_size.unwrap_or(d.design_size),
            uncertainty_size: self.uncertainty_size.unwrap_or(d.uncertainty_size),
            test_size: self.test_size.unwrap_or(d.test_size),
            max_construction_loops: self.max_construction_loops.unwrap_or(d.max_construction_loops),
        }
    }

    /// The full simulated study; errors for interactive manifests.
    pub fn study_config(&self) -> Result<StudyConfig, ManifestError> {
        let Population::Simulated(p) = &self.population else {
            return Err(invalid(
                "population",
                "a simulated study needs a population table, not \"interactive\"",
            ));
        };
        let mut config = StudyConfig::new(self.env, p.n, p.heterogeneity, self.seed);
        config.population.rule_size = p.rule_size;
        config.population.latent_per_user = p.latent_per_user;
        config.population.revision_fraction = p.revision_fraction;
        config.session = self.session_config("study");
        config.metric = self.metric();
        config.curves = CurveConfig {
            max_count: self.curves.max_count,
            epochs: self.curves.epochs,
            metric: config.metric,
            seed: self.seed,
        };
        if let Some(r) = self.bootstrap_resamples {
            config.bootstrap_resamples = r;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if let Population::Simulated(p) = &self.population {
            let spec = PopulationSpec {
                env: self.env,
                n: p.n,
                heterogeneity: p.heterogeneity,
                rule_size: p.rule_size,
                latent_per_user: p.latent_per_user,
                revision_fraction: p.revision_fraction,
            };
            spec.validate().map_err(|e| invalid("population", core_message(e)))?;
        }
        self.session_config("manifest")
            .validate()
            .map_err(|e| ManifestError(core_message(e)))?;
        if self.curves.max_count == 0 {
            return Err(invalid("curves.max_count", "must be at least 1"));
        }
        if self.curves.epochs == 0 {
            return Err(invalid("curves.epochs", "must be at least 1"));
        }
        if self.bootstrap_resamples == Some(0) {
            return Err(invalid("bootstrap_resamples", "must be at least 1"));
        }
        if let BackendSpec::Http {
            top_logprobs: Some(t), ..
        } = self.backend
        {
            if !(1..=20).contains(&t) {
                return Err(invalid("backend.top_logprobs", "must lie in 1..=20"));
            }
        }
        if let Ok(study) = self.study_config() {
            study.validate().map_err(|e| ManifestError(core_message(e)))?;
        }
        Ok(())
    }
}

/// The error message prefixed with the offending line.
fn toml_message(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = text[start..].lines().next().unwrap_or_default().trim();
            let number = text[..span.start].matches('\n').count() + 1;
            format!("line {number} `{line}`: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

/// The message of a core error without its category prefix.
fn core_message(e: irda_core::Error) -> String {
    match e {
        irda_core::Error::Config(m) | irda_core::Error::Validation(m) => m,
        other => other.to_string(),
    }
}
