//! Supervised baselines: a one-hidden-layer perceptron trained with Adam on
//! binary cross-entropy, and individual-vs-collective learning curves.
//!
//! Parameters live in one flat vector laid out as `w1` (input-major,
//! `input_dim × HIDDEN`), `b1`, `w2`, `b2`. Inputs are stored sparsely since
//! the trajectory tensor is mostly zeros.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::UserModel;
use crate::reward::{Confusion, Metric};
use crate::stats::{bootstrap_ci, BootstrapCi};
use crate::stimulus::Stimulus;

pub const HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SparseRow {
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRow {
    fn from_dense(x: &[f64]) -> Self {
        let (idx, val) = x
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        SparseRow { idx, val }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub params: Vec<f64>,
    pub adam: Adam,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// −[y ln σ(z) + (1−y) ln(1−σ(z))] without overflow.
fn bce_with_logit(z: f64, y: bool) -> f64 {
    z.max(0.0) - if y { z } else { 0.0 } + (-z.abs()).exp().ln_1p()
}

impl Mlp {
    /// He-uniform hidden weights, uniform output weights, zero biases.
    pub fn new(input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::param_count(input_dim);
        let mut params = vec![0.0; n];
        let a1 = (6.0 / input_dim as f64).sqrt();
        let a2 = (6.0 / HIDDEN as f64).sqrt();
        let w2 = Self::w2_offset(input_dim);
        for p in &mut params[..HIDDEN * input_dim] {
            *p = rng.random_range(-a1..a1);
        }
        for p in &mut params[w2..w2 + HIDDEN] {
            *p = rng.random_range(-a2..a2);
        }
        Ok(Mlp {
            input_dim,
            params,
            adam: Adam::default(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
    }

    pub fn param_count(input_dim: usize) -> usize {
        HIDDEN * input_dim + HIDDEN + HIDDEN + 1
    }

    fn b1_offset(d: usize) -> usize {
        HIDDEN * d
    }

    fn w2_offset(d: usize) -> usize {
        HIDDEN * d + HIDDEN
    }

    fn b2_offset(d: usize) -> usize {
        HIDDEN * d + 2 * HIDDEN
    }

    fn check(&self, data: &[(Vec<f64>, bool)]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Validation("training data must be non-empty".into()));
        }
        if let Some((x, _)) = data.iter().find(|(x, _)| x.len() != self.input_dim) {
            return Err(Error::Validation(format!(
                "input has {} dimensions, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Hidden activations and output logit.
    fn forward(&self, x: &SparseRow, hidden: &mut [f64; HIDDEN]) -> f64 {
        let d = self.input_dim;
        let (b1, w2, b2) = (Self::b1_offset(d), Self::w2_offset(d), Self::b2_offset(d));
        hidden.copy_from_slice(&self.params[b1..b1 + HIDDEN]);
        for (&i, &v) in x.idx.iter().zip(&x.val) {
            let w = &self.params[i * HIDDEN..(i + 1) * HIDDEN];
            for (z, wi) in hidden.iter_mut().zip(w) {
                *z += wi * v;
            }
        }
        let mut logit = self.params[b2];
        for (a, w) in hidden.iter_mut().zip(&self.params[w2..w2 + HIDDEN]) {
            *a = a.max(0.0);
            logit += w * *a;
        }
        logit
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let mut hidden = [0.0; HIDDEN];
        sigmoid(self.forward(&SparseRow::from_dense(x), &mut hidden))
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.predict_proba(x) > 0.5
    }

    fn loss_sparse(&self, batch: &Batch) -> f64 {
        let mut hidden = [0.0; HIDDEN];
        batch
            .rows
            .iter()
            .map(|r| {
                let z = self.forward(&r.x, &mut hidden);
                r.pos * bce_with_logit(z, true) + r.neg * bce_with_logit(z, false)
            })
            .sum::<f64>()
            / batch.total
    }

    /// Mean binary cross-entropy.
    pub fn loss(&self, data: &[(Vec<f64>, bool)]) -> Result<f64> {
        self.check(data)?;
        Ok(self.loss_sparse(&sparse(data)))
    }

    /// Fills `grad` and returns the mean loss at the current parameters.
    fn gradient_sparse(&self, batch: &Batch, grad: &mut [f64]) -> f64 {
        let d = self.input_dim;
        let (b1, w2, b2) = (Self::b1_offset(d), Self::w2_offset(d), Self::b2_offset(d));
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hidden = [0.0; HIDDEN];
        let mut dh = [0.0; HIDDEN];
        let mut loss = 0.0;
        for r in &batch.rows {
            let logit = self.forward(&r.x, &mut hidden);
            loss += r.pos * bce_with_logit(logit, true) + r.neg * bce_with_logit(logit, false);
            let delta = (sigmoid(logit) * (r.pos + r.neg) - r.pos) / batch.total;
            grad[b2] += delta;
            for h in 0..HIDDEN {
                grad[w2 + h] += delta * hidden[h];
                dh[h] = if hidden[h] > 0.0 {
                    delta * self.params[w2 + h]
                } else {
                    0.0
                };
                grad[b1 + h] += dh[h];
            }
            for (&i, &v) in r.x.idx.iter().zip(&r.x.val) {
                for (g, d) in grad[i * HIDDEN..(i + 1) * HIDDEN].iter_mut().zip(&dh) {
                    *g += d * v;
                }
            }
        }
        loss / batch.total
    }

    /// ∂loss/∂params, in the flat parameter layout.
    pub fn gradient(&self, data: &[(Vec<f64>, bool)]) -> Result<Vec<f64>> {
        self.check(data)?;
        let mut grad = vec![0.0; self.params.len()];
        self.gradient_sparse(&sparse(data), &mut grad);
        Ok(grad)
    }

    fn adam_step(&mut self, grad: &[f64]) {
        self.t += 1;
        let Adam { lr, beta1, beta2, eps } = self.adam;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, m), v), g) in self.params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }

    /// Full-batch Adam for `epochs` steps. Returns the loss before each step
    /// followed by the final loss.
    pub fn train(&mut self, data: &[(Vec<f64>, bool)], epochs: usize) -> Result<Vec<f64>> {
        self.check(data)?;
        let rows = sparse(data);
        let mut grad = vec![0.0; self.params.len()];
        let mut history = Vec::with_capacity(epochs + 1);
        for _ in 0..epochs {
            history.push(self.gradient_sparse(&rows, &mut grad));
            self.adam_step(&grad);
        }
        history.push(self.loss_sparse(&rows));
        Ok(history)
    }

    pub fn accuracy(&self, data: &[(Vec<f64>, bool)]) -> f64 {
        data.iter().filter(|(x, y)| self.predict(x) == *y).count() as f64 / data.len() as f64
    }
}

/// Distinct inputs with the number of positive and negative labels each
/// carries, so pooled duplicates cost one forward pass.
struct Batch {
    rows: Vec<WeightedRow>,
    total: f64,
}

struct WeightedRow {
    x: SparseRow,
    pos: f64,
    neg: f64,
}

fn sparse(data: &[(Vec<f64>, bool)]) -> Batch {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows: Vec<WeightedRow> = Vec::new();
    for (x, y) in data {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        let i = *index.entry(key).or_insert_with(|| {
            rows.push(WeightedRow {
                x: SparseRow::from_dense(x),
                pos: 0.0,
                neg: 0.0,
            });
            rows.len() - 1
        });
        if *y {
            rows[i].pos += 1.0;
        } else {
            rows[i].neg += 1.0;
        }
    }
    Batch {
        rows,
        total: data.len() as f64,
    }
}

/// Train a fresh model; deterministic given `seed`.
pub fn train(input_dim: usize, data: &[(Vec<f64>, bool)], epochs: usize, seed: u64) -> Result<Mlp> {
    let mut model = Mlp::new(input_dim, seed)?;
    model.train(data, epochs)?;
    Ok(model)
}

/// Largest relative error between analytic and central-difference
/// gradients, `|a − n| / max(|a| + |n|, 1e-12)`.
pub fn gradient_check(model: &Mlp, data: &[(Vec<f64>, bool)], h: f64) -> Result<f64> {
    let analytic = model.gradient(data)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = probe.params[i];
        probe.params[i] = original + h;
        let up = probe.loss(data)?;
        probe.params[i] = original - h;
        let down = probe.loss(data)?;
        probe.params[i] = original;
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveVariant {
    Individual,
    Collective,
}

impl CurveVariant {
    pub fn name(self) -> &'static str {
        match self {
            CurveVariant::Individual => "individual",
            CurveVariant::Collective => "collective",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub variant: CurveVariant,
    pub sample_counts: Vec<usize>,
    /// Participant id → metric at each sample count.
    pub metric_by_count: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub count: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl TrainingCurve {
    /// Per-participant metrics at the `i`-th sample count.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.metric_by_count.values().map(|v| v[i]).collect()
    }

    pub fn mean_at(&self, count: usize) -> Option<f64> {
        let i = self.sample_counts.iter().position(|&c| c == count)?;
        let col = self.column(i);
        Some(col.iter().sum::<f64>() / col.len() as f64)
    }

    /// Mean over participants with a bootstrap interval at every count.
    pub fn bands(&self, resamples: usize, seed: u64) -> Result<Vec<CurvePoint>> {
        self.sample_counts
            .iter()
            .enumerate()
            .map(|(i, &count)| {
                let BootstrapCi { low, high, mean } =
                    bootstrap_ci(&self.column(i), resamples, 0.95, seed.wrapping_add(count as u64))?;
                Ok(CurvePoint {
                    count,
                    mean,
                    ci_low: low,
                    ci_high: high,
                })
            })
            .collect()
    }
}

/// `count,mean,ci_low,ci_high,variant` rows for every curve.
pub fn write_curves_csv<W: Write>(writer: W, curves: &[&TrainingCurve], resamples: usize, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["count", "mean", "ci_low", "ci_high", "variant"])?;
    for curve in curves {
        for p in curve.bands(resamples, seed)? {
            w.write_record([
                p.count.to_string(),
                p.mean.to_string(),
                p.ci_low.to_string(),
                p.ci_high.to_string(),
                curve.variant.name().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub max_count: usize,
    pub epochs: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl CurveConfig {
    pub fn new(metric: Metric, seed: u64) -> Self {
        CurveConfig {
            max_count: 30,
            epochs: 200,
            metric,
            seed,
        }
    }
}

fn metric_of(model: &Mlp, test: &[(Vec<f64>, bool)], metric: Metric) -> f64 {
    Confusion::from_pairs(test.iter().map(|(x, y)| (*y, model.predict(x))))
        .metric(metric)
        .0
}

/// Individual and collective curves. Every user labels `train_pool` and
/// `test_pool` with their own rule. Each model is trained incrementally: at
/// count n it continues from its state at n − 1 for `epochs` more full-batch
/// steps over the first n samples (pooled over all users for the collective
/// model). All models start from the same initialization.
pub fn build_curves(
    population: &[UserModel],
    train_pool: &[Stimulus],
    test_pool: &[Stimulus],
    config: &CurveConfig,
) -> Result<(TrainingCurve, TrainingCurve)> {
    if population.is_empty() {
        return Err(Error::Config("population must be non-empty".into()));
    }
    if train_pool.len() < config.max_count || test_pool.is_empty() || config.max_count == 0 {
        return Err(Error::Config(format!(
            "need at least {} training stimuli and a non-empty test pool, got {} and {}",
            config.max_count,
            train_pool.len(),
            test_pool.len()
        )));
    }
    let dim = train_pool[0].env().mlp_dim();
    let train_x: Vec<Vec<f64>> = train_pool[..config.max_count].iter().map(Stimulus::mlp_input).collect();
    let test_x: Vec<Vec<f64>> = test_pool.iter().map(Stimulus::mlp_input).collect();
    let labelled = |u: &UserModel, pool: &[Stimulus], xs: &[Vec<f64>]| -> Vec<(Vec<f64>, bool)> {
        xs.iter()
            .cloned()
            .zip(pool.iter().map(|s| u.label_stimulus(s)))
            .collect()
    };
    let train: Vec<Vec<(Vec<f64>, bool)>> = population.iter().map(|u| labelled(u, train_pool, &train_x)).collect();
    let test: Vec<Vec<(Vec<f64>, bool)>> = population.iter().map(|u| labelled(u, test_pool, &test_x)).collect();
    let counts: Vec<usize> = (1..=config.max_count).collect();

    // task u < len trains user u's model; task len trains the collective one
    let results: Vec<Vec<Vec<f64>>> = (0..=population.len())
        .into_par_iter()
        .map(|task| {
            let mut model = Mlp::new(dim, config.seed)?;
            counts
                .iter()
                .map(|&n| {
                    let data: Vec<(Vec<f64>, bool)> = match train.get(task) {
                        Some(t) => t[..n].to_vec(),
                        None => train.iter().flat_map(|t| t[..n].iter().cloned()).collect(),
                    };
                    model.train(&data, config.epochs)?;
                    Ok(match test.get(task) {
                        Some(t) => vec![metric_of(&model, t, config.metric)],
                        None => test.iter().map(|t| metric_of(&model, t, config.metric)).collect(),
                    })
                })
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .collect::<Result<_>>()?;

    let curve = |variant| TrainingCurve {
        variant,
        sample_counts: counts.clone(),
        metric_by_count: BTreeMap::new(),
    };
    let mut individual = curve(CurveVariant::Individual);
    let mut collective = curve(CurveVariant::Collective);
    for (u, user) in population.iter().enumerate() {
        individual
            .metric_by_count
            .insert(user.id.clone(), results[u].iter().map(|v| v[0]).collect());
        collective.metric_by_count.insert(
            user.id.clone(),
            results[population.len()].iter().map(|v| v[u]).collect(),
        );
    }
    Ok((individual, collective))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_leave_weights() {
        let data = vec![(vec![1.0, 0.0], true), (vec![0.0, 1.0], false)];
        let before = Mlp::new(2, 3).unwrap();
        let mut after = before.clone();
        after.train(&data, 0).unwrap();
        assert_eq!(before.params, after.params);
    }

    #[test]
    fn dimension_mismatch() {
        let mut m = Mlp::new(3, 0).unwrap();
        assert!(matches!(m.train(&[(vec![1.0], true)], 1), Err(Error::Validation(_))));
        assert!(matches!(m.train(&[], 1), Err(Error::Validation(_))));
    }

    #[test]
    fn stable_loss() {
        assert!((bce_with_logit(0.0, true) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(1000.0, false).is_finite());
        assert!(bce_with_logit(-1000.0, true).is_finite());
    }
}
