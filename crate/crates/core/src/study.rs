//! Simulated studies: simulated populations run through the full pipeline
//! and compared with the non-reflective and supervised baselines.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{run_session, SimulatedParticipant};
use crate::error::{Error, Result};
use crate::llm::LlmBackend;
use crate::mlp::{build_curves, CurveConfig, CurvePoint, TrainingCurve};
use crate::oracle::{make_population, PopulationSpec, UserModel};
use crate::reward::{build_baseline_context, evaluate, Evaluation, LabeledItem, Metric, RewardModelContext};
use crate::session::{EventSink, NullSink, Pools, Record, Session, SessionConfig};
use crate::stats::{
    bootstrap_ci, fleiss_kappa, mean_pairwise_jaccard, mean_pairwise_kappa, pairwise_jaccard, wilcoxon_signed_rank,
    BootstrapCi, LabelMatrix,
};
use crate::stimulus::{EnvKind, Stimulus};

pub fn default_metric(env: EnvKind) -> Metric {
    match env {
        EnvKind::AppleFarm => Metric::BalancedAccuracy,
        EnvKind::MoralMachine => Metric::Accuracy,
    }
}

/// A user's labels for a test pool.
pub fn labeled_items(user: &UserModel, pool: &[Stimulus]) -> Vec<LabeledItem> {
    pool.iter()
        .map(|s| LabeledItem {
            stimulus_id: s.id().to_string(),
            encoded: s.encode(),
            label: user.label_stimulus(s),
        })
        .collect()
}

/// Items × raters matrix of the users' labels over `pool`.
pub fn label_matrix(users: &[UserModel], pool: &[Stimulus]) -> Result<LabelMatrix> {
    LabelMatrix::new(
        pool.iter()
            .map(|s| users.iter().map(|u| u.label_stimulus(s)).collect())
            .collect(),
    )
}

/// The outcome of one simulated participant's session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user_id: String,
    pub construction_loops: usize,
    pub hypothesis_exchanges: usize,
    pub uncertainty_queries: usize,
    pub irda: Evaluation,
    pub baseline: Evaluation,
    pub final_model: UserModel,
}

/// Run one simulated user end to end and score both verbal reward models
/// on the user's (post-reflection) labels of the test pool.
pub fn simulate_user(
    user: &UserModel,
    config: &SessionConfig,
    pools: &Pools,
    metric: Metric,
    backend: &dyn LlmBackend,
    sink: &mut dyn EventSink,
) -> Result<(Session, UserOutcome)> {
    let config = SessionConfig {
        id: user.id.clone(),
        env: user.env,
        ..config.clone()
    };
    let mut session = Session::start(&config, pools, sink)?;
    let mut participant = SimulatedParticipant::new(user.clone());
    run_session(&mut session, pools, &mut participant, backend, sink)?;
    let test = labeled_items(&participant.model, &pools.test);
    let irda = evaluate(&RewardModelContext::from_session(&session)?, &test, metric, backend)?;
    let baseline = evaluate(&build_baseline_context(&session)?, &test, metric, backend)?;
    let outcome = UserOutcome {
        user_id: user.id.clone(),
        construction_loops: session.construction_loops,
        hypothesis_exchanges: session.hypotheses.len(),
        uncertainty_queries: session.uncertainty_iterations,
        irda,
        baseline,
        final_model: participant.model,
    };
    Ok((session, outcome))
}

/// Every user of `population` through their own session over shared pools.
pub fn simulate_population(
    population: &[UserModel],
    config: &SessionConfig,
    metric: Metric,
    backend: &dyn LlmBackend,
) -> Result<Vec<UserOutcome>> {
    let pools = Pools::generate(config)?;
    population
        .par_iter()
        .map(|u| simulate_user(u, config, &pools, metric, backend, &mut NullSink).map(|(_, o)| o))
        .collect()
}

/// Session logs for every user, for replay checks.
pub fn record_population(
    population: &[UserModel],
    config: &SessionConfig,
    backend: &dyn LlmBackend,
) -> Result<Vec<(Session, Vec<Record>)>> {
    let pools = Pools::generate(config)?;
    population
        .iter()
        .map(|u| {
            let mut log = Vec::new();
            let (session, _) = simulate_user(u, config, &pools, default_metric(u.env), backend, &mut log)?;
            Ok((session, log))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementPoint {
    pub heterogeneity: f64,
    pub fleiss_kappa: f64,
    pub mean_pairwise_kappa: f64,
    pub jaccard_mean: f64,
}

/// Label agreement and rule overlap of populations at each heterogeneity
/// level, all labeling the same pool.
pub fn agreement_gradient(
    env: EnvKind,
    seed: u64,
    n: usize,
    levels: &[f64],
    items: usize,
) -> Result<Vec<AgreementPoint>> {
    let pool = env.generate(seed, items)?;
    levels
        .iter()
        .map(|&h| {
            let users = make_population(seed, &PopulationSpec::new(env, n, h))?;
            let m = label_matrix(&users, &pool)?;
            let sets: Vec<_> = users.iter().map(UserModel::rule_features).collect();
            Ok(AgreementPoint {
                heterogeneity: h,
                fleiss_kappa: fleiss_kappa(&m),
                mean_pairwise_kappa: mean_pairwise_kappa(&m),
                jaccard_mean: mean_pairwise_jaccard(&sets)?,
            })
        })
        .collect()
}

/// Everything a full simulated study needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub population: PopulationSpec,
    pub session: SessionConfig,
    pub metric: Metric,
    pub curves: CurveConfig,
    pub bootstrap_resamples: usize,
}

impl StudyConfig {
    pub fn new(env: EnvKind, n: usize, heterogeneity: f64, seed: u64) -> Self {
        let metric = default_metric(env);
        StudyConfig {
            seed,
            population: PopulationSpec::new(env, n, heterogeneity),
            session: SessionConfig {
                pool_seed: seed,
                cluster_seed: seed,
                ..SessionConfig::new("study", env)
            },
            metric,
            curves: CurveConfig::new(metric, seed),
            bootstrap_resamples: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.session.validate()?;
        if self.population.env != self.session.env {
            return Err(Error::Config("population and session envs differ".into()));
        }
        if self.session.design_size < self.curves.max_count {
            return Err(Error::Config(format!(
                "design_size must be at least the MLP sample count {}",
                self.curves.max_count
            )));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_user: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub method: String,
    pub versus: String,
    pub mean_delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `None` when every paired difference is zero.
    pub wilcoxon_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub env: EnvKind,
    pub seed: u64,
    pub users: Vec<String>,
    pub metric: Metric,
    pub kappa: f64,
    pub mean_pairwise_kappa: f64,
    pub jaccard_mean: f64,
    pub jaccard_ci: (f64, f64),
    pub methods: BTreeMap<String, MethodSummary>,
    pub deltas: Vec<Delta>,
    /// IRDA vs L_B.
    pub wilcoxon_p: Option<f64>,
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    pub outcomes: Vec<UserOutcome>,
}

fn summarize(values: Vec<f64>, resamples: usize, seed: u64) -> Result<MethodSummary> {
    let BootstrapCi { low, high, mean } = bootstrap_ci(&values, resamples, 0.95, seed)?;
    Ok(MethodSummary {
        mean,
        ci_low: low,
        ci_high: high,
        per_user: values,
    })
}

fn delta(name: &str, versus: &str, a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<Delta> {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let ci = bootstrap_ci(&diffs, resamples, 0.95, seed)?;
    let pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    let wilcoxon_p = match wilcoxon_signed_rank(&pairs) {
        Ok(w) => Some(w.p_value),
        Err(Error::NoSignal) => None,
        Err(e) => return Err(e),
    };
    Ok(Delta {
        method: name.to_string(),
        versus: versus.to_string(),
        mean_delta: ci.mean,
        ci_low: ci.low,
        ci_high: ci.high,
        wilcoxon_p,
    })
}

/// Individual curve value of each user at the last count, and the collective
/// one, in population order.
fn final_mlp_metrics(population: &[UserModel], curve: &TrainingCurve) -> Vec<f64> {
    population
        .iter()
        .map(|u| *curve.metric_by_count[&u.id].last().expect("non-empty curve"))
        .collect()
}

/// Population × {IRDA, L_B, individual MLP, collective MLP} with agreement
/// statistics and paired comparisons.
pub fn run_study(config: &StudyConfig, backend: &dyn LlmBackend) -> Result<StudyReport> {
    config.validate()?;
    let env = config.population.env;
    let population = make_population(config.seed, &config.population)?;
    let session = SessionConfig {
        env,
        ..config.session.clone()
    };
    let pools = Pools::generate(&session)?;
    let outcomes: Vec<UserOutcome> = population
        .par_iter()
        .map(|u| simulate_user(u, &session, &pools, config.metric, backend, &mut NullSink).map(|(_, o)| o))
        .collect::<Result<_>>()?;
    let finals: Vec<UserModel> = outcomes.iter().map(|o| o.final_model.clone()).collect();

    let matrix = label_matrix(&finals, &pools.test)?;
    let sets: Vec<_> = finals.iter().map(UserModel::rule_features).collect();
    let jaccards = pairwise_jaccard(&sets);
    let r = config.bootstrap_resamples;
    let jaccard_ci = bootstrap_ci(&jaccards, r, 0.95, config.seed)?;

    let (individual, collective) = build_curves(&finals, &pools.design, &pools.test, &config.curves)?;
    let mut per_method: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    per_method.insert("irda".into(), outcomes.iter().map(|o| o.irda.value).collect());
    per_method.insert("l_b".into(), outcomes.iter().map(|o| o.baseline.value).collect());
    per_method.insert("mlp_individual".into(), final_mlp_metrics(&finals, &individual));
    per_method.insert("mlp_collective".into(), final_mlp_metrics(&finals, &collective));

    let mut deltas = Vec::new();
    for (i, versus) in ["l_b", "mlp_individual", "mlp_collective"].into_iter().enumerate() {
        deltas.push(delta(
            "irda",
            versus,
            &per_method["irda"],
            &per_method[versus],
            r,
            config.seed.wrapping_add(1 + i as u64),
        )?);
    }
    let wilcoxon_p = deltas[0].wilcoxon_p;
    let methods = per_method
        .into_iter()
        .map(|(name, values)| Ok((name, summarize(values, r, config.seed)?)))
        .collect::<Result<_>>()?;
    let curves = [&individual, &collective]
        .into_iter()
        .map(|c| Ok((c.variant.name().to_string(), c.bands(r, config.seed)?)))
        .collect::<Result<_>>()?;

    Ok(StudyReport {
        env,
        seed: config.seed,
        users: population.iter().map(|u| u.id.clone()).collect(),
        metric: config.metric,
        kappa: fleiss_kappa(&matrix),
        mean_pairwise_kappa: mean_pairwise_kappa(&matrix),
        jaccard_mean: mean_pairwise_jaccard(&sets)?,
        jaccard_ci: (jaccard_ci.low, jaccard_ci.high),
        methods,
        deltas,
        wilcoxon_p,
        curves,
        outcomes,
    })
}
