//! Lloyd's K-means with k-means++ seeding, used to turn relation-augmented
//! individual features into social groups.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RelationError;

pub const DEFAULT_MAX_ITERS: usize = 100;

/// Group id per individual, dense in `1..=num_groups`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    labels: Vec<usize>,
    num_groups: usize,
}

impl GroupAssignment {
    /// Relabels arbitrary ids to `1..=k` in order of first occurrence.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map: Vec<(usize, usize)> = Vec::new();
        let labels = raw
            .iter()
            .map(|&r| match map.iter().find(|(k, _)| *k == r) {
                Some(&(_, v)) => v,
                None => {
                    map.push((r, map.len() + 1));
                    map.len()
                }
            })
            .collect();
        Self {
            labels,
            num_groups: map.len(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Member indices per group, group `k` at position `k - 1`.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l - 1].push(i);
        }
        out
    }

    /// Binary co-membership matrix, reflexive.
    pub fn relation_matrix(&self) -> Vec<f64> {
        let n = self.labels.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if self.labels[i] == self.labels[j] {
                    m[i * n + j] = 1.0;
                }
            }
        }
        m
    }

    /// Assignment for individuals reordered so that new row `k` is old row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let raw: Vec<usize> = order.iter().map(|&i| self.labels[i]).collect();
        Self::from_labels(&raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: GroupAssignment,
    pub sse: f64,
    /// SSE of the k-means++ seeding before any Lloyd iteration.
    pub initial_sse: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within-cluster sum of squared distances to cluster means.
pub fn sse(points: &[f64], dim: usize, labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let centroids = centroids(points, dim, labels, k);
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(&points[i * dim..(i + 1) * dim], &centroids[l]))
        .sum()
}

fn centroids(points: &[f64], dim: usize, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len() / dim;
    let row = |i: usize| points[i * dim..(i + 1) * dim].to_vec();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut centers = vec![row(chosen[0])];
    while centers.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| nearest(&points[i * dim..(i + 1) * dim], &centers).1)
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(w) => w.sample(rng),
            // Every remaining point coincides with a center.
            Err(_) => (0..n).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        centers.push(row(next));
    }
    centers
}

/// Clusters the rows of `points` (`n x dim`, row-major) into `k` groups.
pub fn kmeans_groups(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult, RelationError> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(RelationError::Shape(format!(
            "{} values do not form rows of width {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(RelationError::TooManyGroups {
            groups: k,
            individuals: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(points, dim, k, &mut rng);
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut labels: Vec<usize> = (0..n).map(|i| nearest(pt(i), &centers).0).collect();
    let initial_sse: f64 = (0..n).map(|i| sq_dist(pt(i), &centers[labels[i]])).sum();
    let mut iterations = 0;
    loop {
        iterations += 1;
        repair_empty(points, dim, k, &mut labels, &centers);
        centers = centroids(points, dim, &labels, k);
        let next: Vec<usize> = (0..n).map(|i| nearest(pt(i), &centers).0).collect();
        if next == labels || iterations >= max_iters {
            break;
        }
        labels = next;
    }
    repair_empty(points, dim, k, &mut labels, &centers);
    let sse_final = sse(points, dim, &labels);
    Ok(KMeansResult {
        assignment: GroupAssignment::from_labels(&labels),
        sse: sse_final,
        initial_sse,
        iterations,
    })
}

/// Gives each empty cluster the point farthest from its own center, taken
/// from clusters with more than one member; ties go to the lowest index.
fn repair_empty(points: &[f64], dim: usize, k: usize, labels: &mut [usize], centers: &[Vec<f64>]) {
    for c in 0..k {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] < 2 {
                continue;
            }
            let d = sq_dist(&points[i * dim..(i + 1) * dim], &centers[l]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            labels[i] = c;
        }
    }
}

/// Runs [`kmeans_groups`] once per seed and keeps the lowest SSE (first on ties).
pub fn kmeans_best_of(
    points: &[f64],
    dim: usize,
    k: usize,
    seeds: impl IntoIterator<Item = u64>,
    max_iters: usize,
) -> Result<KMeansResult, RelationError> {
    let mut best: Option<KMeansResult> = None;
    for seed in seeds {
        let r = kmeans_groups(points, dim, k, seed, max_iters)?;
        if best.as_ref().is_none_or(|b| r.sse < b.sse) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| RelationError::Shape("no seeds given".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relabels_by_first_occurrence() {
        let g = GroupAssignment::from_labels(&[7, 3, 7, 9]);
        assert_eq!(g.labels(), &[1, 2, 1, 3]);
        assert_eq!(g.num_groups(), 3);
        assert_eq!(g.groups(), vec![vec![0, 2], vec![1], vec![3]]);
    }

    #[test]
    fn one_dimensional_pairs() {
        let pts = [0.0, 0.1, 10.0, 10.1];
        for seed in 0..20 {
            let r = kmeans_groups(&pts, 1, 2, seed, DEFAULT_MAX_ITERS).unwrap();
            assert_eq!(r.assignment.labels(), &[1, 1, 2, 2]);
        }
    }

    #[test]
    fn k_equals_n_gives_singletons_even_with_duplicates() {
        let pts = [1.0, 1.0, 1.0, 1.0, 5.0, 5.0];
        let r = kmeans_groups(&pts, 2, 3, 4, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.assignment.num_groups(), 3);
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn single_cluster() {
        let pts = [0.3, -2.0, 4.0, 0.0];
        let r = kmeans_groups(&pts, 1, 1, 0, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(r.assignment.labels(), &[1, 1, 1, 1]);
    }

    #[test]
    fn too_many_groups_is_an_error() {
        assert!(matches!(
            kmeans_groups(&[0.0, 1.0], 1, 3, 0, 10),
            Err(RelationError::TooManyGroups { .. })
        ));
    }

    #[test]
    fn deterministic_and_monotone() {
        let pts: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64).sin() * 3.0).collect();
        let a = kmeans_groups(&pts, 2, 4, 9, DEFAULT_MAX_ITERS).unwrap();
        let b = kmeans_groups(&pts, 2, 4, 9, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(a, b);
        assert!(a.sse <= a.initial_sse + 1e-12);
    }
}
