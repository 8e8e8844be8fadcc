//! Headless subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use irda_core::featurize::min_max_normalize;
use irda_core::reward::Metric;
use irda_core::sampling::{kmeans, ClusteringSummary};
use irda_core::stats::{
    bootstrap_ci, fleiss_kappa, mean_pairwise_jaccard, mean_pairwise_kappa, paired_comparison, pairwise_jaccard,
    LabelMatrix,
};
use irda_core::stimulus::{read_jsonl, write_jsonl, EnvKind, Stimulus};
use irda_core::study::{run_study, Delta, StudyReport};
use serde::{Deserialize, Serialize};

use crate::backend::Backends;
use crate::store::{ApiError, EvaluateBody, EvaluationView, Store};

/// Bad input, reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

/// Exit code for an error: 2 for bad input, 1 for runtime failure.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let invalid = e.chain().any(|cause| {
        cause.is::<Invalid>()
            || cause.is::<crate::manifest::ManifestError>()
            || cause
                .downcast_ref::<irda_core::Error>()
                .is_some_and(irda_core::Error::is_validation)
            || cause
                .downcast_ref::<ApiError>()
                .is_some_and(|a| (400..500).contains(&a.status))
    });
    if invalid {
        2
    } else {
        1
    }
}

/// Write pretty JSON followed by a newline to `out`, or to stdout.
pub fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn gen_pool(env: EnvKind, count: usize, seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let pool = env.generate(seed, count)?;
    match out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
            write_jsonl(std::io::BufWriter::new(file), &pool)?;
        }
        None => write_jsonl(std::io::stdout().lock(), &pool)?,
    }
    Ok(())
}

/// k-means++ over min-max normalized catalog features of a pool read from
/// `pool` or generated from `seed`.
pub fn cluster(
    env: EnvKind,
    pool: Option<&Path>,
    count: usize,
    k: usize,
    seed: u64,
) -> anyhow::Result<ClusteringSummary> {
    let stimuli: Vec<Stimulus> = match pool {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
            read_jsonl(BufReader::new(file))?
        }
        None => env.generate(seed, count)?,
    };
    if let Some(s) = stimuli.iter().find(|s| s.env() != env) {
        return Err(Invalid(format!("pool: stimulus {} is not a {} stimulus", s.id(), env.name())).into());
    }
    let rows: Vec<Vec<f64>> = stimuli.iter().map(|s| s.features().values).collect();
    let points = min_max_normalize(&rows);
    let ids: Vec<&str> = stimuli.iter().map(Stimulus::id).collect();
    Ok(kmeans(&points, k, seed)?.summary(&points, &ids)?)
}

pub fn run(manifest: &Path, seed: Option<u64>) -> anyhow::Result<StudyReport> {
    let mut manifest = crate::manifest::ExperimentManifest::load(manifest)?;
    if let Some(seed) = seed {
        manifest.seed = seed;
    }
    let config = manifest.study_config()?;
    let backends = Backends::from_spec(&manifest.backend)?;
    Ok(run_study(&config, backends.for_env(manifest.env))?)
}

/// Evaluate a finished session directory (`events.jsonl` + `labels.json`).
pub fn evaluate(session_dir: &Path, backends: Backends, metric: Option<Metric>) -> anyhow::Result<EvaluationView> {
    let dir = session_dir
        .canonicalize()
        .with_context(|| format!("cannot open session directory {}", session_dir.display()))?;
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Invalid(format!("session: {} has no usable name", dir.display())))?
        .to_string();
    let parent: PathBuf = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    let store = Store::new(parent, backends)?;
    Ok(store.evaluate(&id, &EvaluateBody { metric })?)
}

/// Agreement and paired-comparison input for `stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsInput {
    /// One row of test-set labels per rater.
    pub labels: Vec<Vec<bool>>,
    /// Features each rater relies on.
    #[serde(default)]
    pub feature_sets: Vec<BTreeSet<String>>,
    /// Per-rater metric of each method, in rater order.
    #[serde(default)]
    pub methods: BTreeMap<String, Vec<f64>>,
    /// The method every other one is compared against.
    #[serde(default = "default_primary")]
    pub primary: String,
}

fn default_primary() -> String {
    "irda".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub kappa: f64,
    pub mean_pairwise_kappa: f64,
    pub jaccard_mean: Option<f64>,
    pub jaccard_ci: Option<(f64, f64)>,
    pub deltas: Vec<Delta>,
    /// The primary method against the first other one.
    pub wilcoxon_p: Option<f64>,
}

pub fn stats(input: &StatsInput, resamples: usize, seed: u64) -> anyhow::Result<StatsReport> {
    let matrix = LabelMatrix::from_raters(&input.labels).map_err(|e| Invalid(format!("labels: {e}")))?;
    let (jaccard_mean, jaccard_ci) = if input.feature_sets.is_empty() {
        (None, None)
    } else {
        let mean = mean_pairwise_jaccard(&input.feature_sets).map_err(|e| Invalid(format!("feature_sets: {e}")))?;
        let ci = bootstrap_ci(&pairwise_jaccard(&input.feature_sets), resamples, 0.95, seed)?;
        (Some(mean), Some((ci.low, ci.high)))
    };
    let mut deltas = Vec::new();
    if !input.methods.is_empty() {
        let primary = input
            .methods
            .get(&input.primary)
            .ok_or_else(|| Invalid(format!("primary: no method named {:?}", input.primary)))?;
        for (i, (name, values)) in input.methods.iter().filter(|(n, _)| **n != input.primary).enumerate() {
            let c = paired_comparison(primary, values, resamples, seed.wrapping_add(1 + i as u64))
                .map_err(|e| Invalid(format!("methods.{name}: {e}")))?;
            deltas.push(Delta {
                method: input.primary.clone(),
                versus: name.clone(),
                mean_delta: c.mean_delta,
                ci_low: c.ci.low,
                ci_high: c.ci.high,
                wilcoxon_p: c.wilcoxon.map(|w| w.p_value),
            });
        }
    }
    Ok(StatsReport {
        kappa: fleiss_kappa(&matrix),
        mean_pairwise_kappa: mean_pairwise_kappa(&matrix),
        jaccard_mean,
        jaccard_ci,
        wilcoxon_p: deltas.first().and_then(|d| d.wilcoxon_p),
        deltas,
    })
}
