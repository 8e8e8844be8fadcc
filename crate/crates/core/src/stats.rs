//! Agreement, overlap and paired-comparison statistics.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Binary labels, one row per item and one column per rater. Complete by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    rows: Vec<Vec<bool>>,
}

impl LabelMatrix {
    pub fn new(rows: Vec<Vec<bool>>) -> Result<Self> {
        let raters = rows.first().map_or(0, Vec::len);
        if rows.is_empty() {
            return Err(Error::Validation("label matrix needs at least one item".into()));
        }
        if raters < 2 {
            return Err(Error::Validation("label matrix needs at least two raters".into()));
        }
        if rows.iter().any(|r| r.len() != raters) {
            return Err(Error::Validation("label matrix rows differ in length".into()));
        }
        Ok(LabelMatrix { rows })
    }

    /// Build from per-rater label vectors (all of equal length).
    pub fn from_raters(raters: &[Vec<bool>]) -> Result<Self> {
        let items = raters.first().map_or(0, Vec::len);
        if raters.iter().any(|r| r.len() != items) {
            return Err(Error::Validation("raters labeled different item counts".into()));
        }
        Self::new((0..items).map(|i| raters.iter().map(|r| r[i]).collect()).collect())
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn raters(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    fn column(&self, rater: usize) -> Vec<bool> {
        self.rows.iter().map(|r| r[rater]).collect()
    }
}

/// Fleiss' kappa for two categories. When chance agreement is 1 (every label
/// identical) observed agreement is also 1 and the result is defined as 1.
pub fn fleiss_kappa(m: &LabelMatrix) -> f64 {
    let n = m.raters() as f64;
    let items = m.items() as f64;
    let mut positives_total = 0.0;
    let mut p_bar = 0.0;
    for row in m.rows() {
        let pos = row.iter().filter(|&&b| b).count() as f64;
        let neg = n - pos;
        positives_total += pos;
        p_bar += (pos * pos + neg * neg - n) / (n * (n - 1.0));
    }
    p_bar /= items;
    let p1 = positives_total / (items * n);
    let p_e = p1 * p1 + (1.0 - p1) * (1.0 - p1);
    if (1.0 - p_e).abs() < 1e-15 {
        return 1.0;
    }
    (p_bar - p_e) / (1.0 - p_e)
}

/// Mean of two-rater Fleiss' kappa over all unordered rater pairs.
pub fn mean_pairwise_kappa(m: &LabelMatrix) -> f64 {
    let r = m.raters();
    let columns: Vec<Vec<bool>> = (0..r).map(|j| m.column(j)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..r {
        for b in a + 1..r {
            let pair =
                LabelMatrix::from_raters(&[columns[a].clone(), columns[b].clone()]).expect("two equal-length raters");
            total += fleiss_kappa(&pair);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// |a ∩ b| / |a ∪ b|; two empty sets are defined as identical (1.0).
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Mean Jaccard over all unordered pairs of `sets`.
pub fn mean_pairwise_jaccard<T: Ord>(sets: &[BTreeSet<T>]) -> Result<f64> {
    if sets.len() < 2 {
        return Err(Error::Validation(
            "mean pairwise Jaccard needs at least two sets".into(),
        ));
    }
    let values = pairwise_jaccard(sets);
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Jaccard coefficient of every unordered pair, in `(i, j)` lexicographic order.
pub fn pairwise_jaccard<T: Ord>(sets: &[BTreeSet<T>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            out.push(jaccard(&sets[i], &sets[j]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub mean: f64,
}

const BOOTSTRAP_CHUNK: usize = 1000;

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean. Resamples are drawn in chunks
/// of 1000, each from its own stream of the seeded generator, so the result
/// is fixed by `seed` regardless of thread scheduling.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if values.is_empty() {
        return Err(Error::Validation("bootstrap needs at least one value".into()));
    }
    if resamples == 0 || !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(Error::Validation(
            "bootstrap needs resamples > 0 and level in (0, 1)".into(),
        ));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if values.iter().all(|&v| v == values[0]) {
        return Ok(BootstrapCi {
            low: values[0],
            high: values[0],
            mean: values[0],
        });
    }
    let chunks = resamples.div_ceil(BOOTSTRAP_CHUNK);
    let mut means: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let take = BOOTSTRAP_CHUNK.min(resamples - c * BOOTSTRAP_CHUNK);
            (0..take)
                .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        low: quantile(&means, alpha),
        high: quantile(&means, 1.0 - alpha),
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// min(W+, W-).
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Largest number of non-zero differences handled by the exact path.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Non-zero differences and their mid-ranks by absolute value.
fn signed_ranks(diffs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::NoSignal);
    }
    if nonzero.iter().any(|d| !d.is_finite()) {
        return Err(Error::Validation("differences must be finite".into()));
    }
    let mut order: Vec<usize> = (0..nonzero.len()).collect();
    order.sort_by(|&a, &b| nonzero[a].abs().total_cmp(&nonzero[b].abs()));
    let mut ranks = vec![0.0; nonzero.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && nonzero[order[j + 1]].abs() == nonzero[order[i]].abs() {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    Ok((nonzero, ranks))
}

fn summarize(nonzero: &[f64], ranks: &[f64], p_value: f64, method: WilcoxonMethod) -> Wilcoxon {
    let w_plus: f64 = nonzero
        .iter()
        .zip(ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w_minus: f64 = nonzero
        .iter()
        .zip(ranks)
        .filter(|(d, _)| **d < 0.0)
        .map(|(_, r)| r)
        .sum();
    Wilcoxon {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n: nonzero.len(),
        p_value: p_value.clamp(0.0, 1.0),
        method,
    }
}

/// Exact two-sided p: the share of the 2^n equally likely sign patterns whose
/// W+ lies at least as far from its mean as the observed one. Patterns are
/// counted by dynamic programming over doubled (integer) mid-ranks.
pub fn wilcoxon_exact(diffs: &[f64]) -> Result<Wilcoxon> {
    let (nonzero, ranks) = signed_ranks(diffs)?;
    if nonzero.len() > 60 {
        return Err(Error::Validation("exact Wilcoxon limited to 60 differences".into()));
    }
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed: usize = nonzero
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    // compare |2·W+ − total| in doubled units to stay in integers
    let dev = |s: usize| (2 * s).abs_diff(total);
    let threshold = dev(observed);
    let extreme: f64 = (0..=total).filter(|&s| dev(s) >= threshold).map(|s| counts[s]).sum();
    let p = extreme / 2f64.powi(nonzero.len() as i32);
    Ok(summarize(&nonzero, &ranks, p, WilcoxonMethod::Exact))
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_normal(diffs: &[f64]) -> Result<Wilcoxon> {
    let (nonzero, ranks) = signed_ranks(diffs)?;
    let n = nonzero.len() as f64;
    let w = summarize(&nonzero, &ranks, 1.0, WilcoxonMethod::Normal);
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w.w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(Wilcoxon {
        p_value: p.clamp(0.0, 1.0),
        ..w
    })
}

/// Two-sided Wilcoxon signed-rank test on `a - b`. Zero differences are
/// dropped; exact for up to [`WILCOXON_EXACT_MAX`] non-zero differences.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<Wilcoxon> {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let nonzero = diffs.iter().filter(|d| **d != 0.0).count();
    if nonzero == 0 {
        return Err(Error::NoSignal);
    }
    if nonzero <= WILCOXON_EXACT_MAX {
        wilcoxon_exact(&diffs)
    } else {
        wilcoxon_normal(&diffs)
    }
}

/// Mean paired difference `a - b` with its bootstrap interval and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub mean_delta: f64,
    pub ci: BootstrapCi,
    /// `None` when every difference is zero.
    pub wilcoxon: Option<Wilcoxon>,
}

pub fn paired_comparison(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<PairedComparison> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Validation(
            "paired samples must be non-empty and equal length".into(),
        ));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let ci = bootstrap_ci(&deltas, resamples, 0.95, seed)?;
    let pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    let wilcoxon = match wilcoxon_signed_rank(&pairs) {
        Ok(w) => Some(w),
        Err(Error::NoSignal) => None,
        Err(e) => return Err(e),
    };
    Ok(PairedComparison {
        mean_delta: ci.mean,
        ci,
        wilcoxon,
    })
}
