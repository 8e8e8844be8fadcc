//! Diversity sampling: k-means over feature vectors and medoid-style
//! representatives.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    /// Cluster index of each input point.
    pub assignments: Vec<usize>,
    /// μ_i: the mean of each cluster's members.
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration (non-increasing).
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    sums
}

/// Within-cluster sum of squared distances to the given centres.
pub fn inertia(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn validate(points: &[Vec<f64>], k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Config("k-means needs at least one point".into()));
    }
    let dim = points[0].len();
    if points
        .iter()
        .any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Validation("points must be finite and of equal dimension".into()));
    }
    let distinct: BTreeSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    if k == 0 || k > distinct.len() {
        return Err(Error::Config(format!(
            "k = {k} must be between 1 and the number of distinct points ({})",
            distinct.len()
        )));
    }
    Ok(())
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick].clone());
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Give every empty cluster the point lying farthest from its own cluster
/// mean. That point's cluster keeps at least one other member.
fn repair_empty(points: &[Vec<f64>], assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let centres = means(points, assignments, k);
        let (far, dist) = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, squared_distance(p, &centres[assignments[i]])))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        debug_assert!(dist > 0.0, "k <= distinct points guarantees a movable point");
        assignments[far] = empty;
    }
}

/// Lloyd's algorithm from a k-means++ start; stops at an assignment fixpoint
/// or after [`MAX_ITERATIONS`]. Deterministic for fixed inputs and seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    validate(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut next: Vec<usize> = points.par_iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, k);
        centroids = means(points, &next, k);
        history.push(inertia(points, &next, &centroids));
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }
    Ok(Clustering {
        k,
        inertia: *history.last().unwrap(),
        assignments,
        centroids,
        inertia_history: history,
        iterations,
    })
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }

    /// Per cluster, the index of the member closest to the centroid; ties go
    /// to the lexicographically smallest id.
    pub fn representatives(&self, points: &[Vec<f64>], ids: &[&str]) -> Result<Vec<usize>> {
        if points.len() != self.assignments.len() || ids.len() != points.len() {
            return Err(Error::Validation("points and ids must match the clustering".into()));
        }
        Ok((0..self.k)
            .map(|c| {
                self.members(c)
                    .into_iter()
                    .min_by(|&a, &b| {
                        let da = squared_distance(&points[a], &self.centroids[c]);
                        let db = squared_distance(&points[b], &self.centroids[c]);
                        da.total_cmp(&db).then_with(|| ids[a].cmp(ids[b]))
                    })
                    .expect("clusters are never empty")
            })
            .collect())
    }

    /// JSON-friendly view keyed by stimulus id.
    pub fn summary(&self, points: &[Vec<f64>], ids: &[&str]) -> Result<ClusteringSummary> {
        let reps = self.representatives(points, ids)?;
        Ok(ClusteringSummary {
            k: self.k,
            assignments: ids
                .iter()
                .zip(&self.assignments)
                .map(|(id, &a)| (id.to_string(), a))
                .collect(),
            centroids: self.centroids.clone(),
            representatives: reps.iter().map(|&i| ids[i].to_string()).collect(),
            inertia: self.inertia,
            inertia_history: self.inertia_history.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub representatives: Vec<String>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 10.0], vec![10.0, 11.0]];
        let c = kmeans(&pts, 2, 1).unwrap();
        assert_eq!(c.assignments[0], c.assignments[1]);
        assert_eq!(c.assignments[2], c.assignments[3]);
        assert_ne!(c.assignments[0], c.assignments[2]);
        let mut cents = c.centroids.clone();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cents, vec![vec![0.0, 0.5], vec![10.0, 10.5]]);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]];
        let c = kmeans(&pts, 1, 4).unwrap();
        assert_eq!(c.centroids, vec![vec![3.0, 3.0]]);
    }

    #[test]
    fn too_many_clusters() {
        let pts = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert!(matches!(kmeans(&pts, 3, 0), Err(Error::Config(_))));
        assert!(kmeans(&pts, 2, 0).is_ok());
    }

    #[test]
    fn representative_tie_break() {
        let pts = vec![vec![0.0, 2.0], vec![0.0, 0.0]];
        let c = kmeans(&pts, 1, 0).unwrap();
        assert_eq!(c.centroids[0], vec![0.0, 1.0]);
        assert_eq!(c.representatives(&pts, &["b", "a"]).unwrap(), vec![1]);
    }
}
