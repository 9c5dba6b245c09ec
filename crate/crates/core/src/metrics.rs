//! Clustering and geometry metrics: k-means, adjusted Rand index, silhouette,
//! Davies–Bouldin and the class separability statistic.
//!
//! Within-class spread is the population form throughout: `σᵢ² = (1/|Cᵢ|) Σ
//! ‖x − μᵢ‖²` and `σᵢ` is its square root.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::seed;

/// Centroids closer than this are treated as coincident.
pub const CENTROID_FLOOR: f64 = 1e-9;

/// Why a metric is undefined on its input.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Degenerate {
    #[error("fewer than two clusters")]
    SingleCluster,
    #[error("coincident centroids")]
    CoincidentCentroids,
    #[error("zero within-class spread")]
    ZeroSpread,
    #[error("empty class")]
    EmptyClass,
    #[error("label and point counts differ")]
    LengthMismatch,
}

/// Cluster assignments with ids canonicalized to `0..k` in order of first
/// appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    assignments: Vec<usize>,
}

impl Labeling {
    pub fn new<T: Copy + Eq + std::hash::Hash>(raw: &[T]) -> Self {
        let mut ids: HashMap<T, usize> = HashMap::new();
        let assignments = raw
            .iter()
            .map(|x| {
                let next = ids.len();
                *ids.entry(*x).or_insert(next)
            })
            .collect();
        Self { assignments }
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.assignments.iter().max().map_or(0, |m| m + 1)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            max_iters: 100,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Labeling,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Cluster ids (pre-canonicalization) that ended with no points.
    pub empty_clusters: Vec<usize>,
}

/// k-means++ seeding and Lloyd iterations; the best of `restarts` runs by
/// inertia.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.len();
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::Clustering(format!("need n >= k >= 1 (n = {n}, k = {})", cfg.k)));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Clustering("points have differing dimensions".into()));
    }
    (0..cfg.restarts.max(1))
        .map(|run| lloyd(points, cfg, run as u64))
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia))
        .ok_or_else(|| Error::Clustering("no restarts".into()))
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // Every point coincides with a center already.
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let nearest: Vec<(usize, f64)> = points
        .par_iter()
        .map(|p| {
            centers
                .iter()
                .enumerate()
                .map(|(c, center)| (c, sq_dist(p, center)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        })
        .collect();
    let inertia = nearest.iter().map(|x| x.1).sum();
    (nearest.into_iter().map(|x| x.0).collect(), inertia)
}

fn lloyd(points: &[Vec<f64>], cfg: &KMeansConfig, run: u64) -> KMeansResult {
    let mut rng = seed::rng(cfg.seed, &[seed::stream::KMEANS, run]);
    let dim = points[0].len();
    let mut centers = plus_plus(points, cfg.k, &mut rng);
    let (mut labels, mut inertia) = assign(points, &centers);
    let mut empty = Vec::new();
    for _ in 0..cfg.max_iters {
        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        empty.clear();
        for c in 0..cfg.k {
            if counts[c] == 0 {
                empty.push(c);
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let (new_labels, new_inertia) = assign(points, &centers);
        assert!(
            new_inertia <= inertia * (1.0 + 1e-12) + 1e-12,
            "k-means inertia increased: {inertia} -> {new_inertia}"
        );
        let change = (inertia - new_inertia) / inertia.max(f64::MIN_POSITIVE);
        labels = new_labels;
        inertia = new_inertia;
        if change < cfg.tol {
            break;
        }
    }
    let mut counts = vec![0usize; cfg.k];
    labels.iter().for_each(|&l| counts[l] += 1);
    empty = (0..cfg.k).filter(|&c| counts[c] == 0).collect();
    KMeansResult {
        labels: Labeling::new(&labels),
        centers,
        inertia,
        empty_clusters: empty,
    }
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index via the contingency table.
pub fn ari(a: &Labeling, b: &Labeling) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LabelLength(a.len(), b.len()));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows = vec![0u64; a.n_clusters()];
    let mut cols = vec![0u64; b.n_clusters()];
    for (&x, &y) in a.assignments().iter().zip(b.assignments()) {
        *table.entry((x, y)).or_default() += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        // Both partitions trivial in the same way (all-one or all-singleton).
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

fn groups(labels: &Labeling) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); labels.n_clusters()];
    for (i, &l) in labels.assignments().iter().enumerate() {
        out[l].push(i);
    }
    out
}

/// Mean silhouette with Euclidean distances; points in singleton clusters
/// score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &Labeling) -> Result<f64, Degenerate> {
    if points.len() != labels.len() {
        return Err(Degenerate::LengthMismatch);
    }
    let groups = groups(labels);
    if groups.len() < 2 {
        return Err(Degenerate::SingleCluster);
    }
    let lab = labels.assignments();
    let per_point: Vec<f64> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = lab[i];
            if groups[own].len() == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; groups.len()];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sums[lab[j]] += dist(&points[i], p);
                }
            }
            let a = sums[own] / (groups[own].len() - 1) as f64;
            let b = (0..groups.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / groups[c].len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / points.len() as f64)
}

/// Centroid and population variance (mean squared distance to centroid) of a
/// set of points.
pub fn centroid_and_variance(points: &[Vec<f64>], members: &[usize]) -> (Vec<f64>, f64) {
    let dim = points[members[0]].len();
    let mut mu = vec![0.0; dim];
    for &i in members {
        mu.iter_mut().zip(&points[i]).for_each(|(m, x)| *m += x);
    }
    mu.iter_mut().for_each(|m| *m /= members.len() as f64);
    let var = members.iter().map(|&i| sq_dist(&points[i], &mu)).sum::<f64>() / members.len() as f64;
    (mu, var)
}

/// `DB = (1/K) Σᵢ max_{j≠i} (σᵢ + σⱼ)/‖μᵢ − μⱼ‖` with `σ` the RMS distance to
/// the centroid.
pub fn davies_bouldin(points: &[Vec<f64>], labels: &Labeling) -> Result<f64, Degenerate> {
    if points.len() != labels.len() {
        return Err(Degenerate::LengthMismatch);
    }
    let groups = groups(labels);
    if groups.len() < 2 {
        return Err(Degenerate::SingleCluster);
    }
    let stats: Vec<(Vec<f64>, f64)> = groups
        .iter()
        .map(|g| {
            let (mu, var) = centroid_and_variance(points, g);
            (mu, var.sqrt())
        })
        .collect();
    let mut total = 0.0;
    for (i, (mu_i, s_i)) in stats.iter().enumerate() {
        let mut worst = f64::NEG_INFINITY;
        for (j, (mu_j, s_j)) in stats.iter().enumerate() {
            if i == j {
                continue;
            }
            let sep = dist(mu_i, mu_j);
            if sep < CENTROID_FLOOR {
                return Err(Degenerate::CoincidentCentroids);
            }
            worst = worst.max((s_i + s_j) / sep);
        }
        total += worst;
    }
    Ok(total / stats.len() as f64)
}

/// `Δᵢⱼ = ‖μᵢ − μⱼ‖ / √(σᵢ² + σⱼ²)` between classes `i` and `j` of `labels`
/// (raw label values, not canonical ids).
pub fn separability<L: Copy + Eq>(points: &[Vec<f64>], labels: &[L], i: L, j: L) -> Result<f64, Degenerate> {
    if points.len() != labels.len() {
        return Err(Degenerate::LengthMismatch);
    }
    let members = |c: L| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(k, _)| k)
            .collect()
    };
    let (ci, cj) = (members(i), members(j));
    if ci.is_empty() || cj.is_empty() {
        return Err(Degenerate::EmptyClass);
    }
    let (mu_i, var_i) = centroid_and_variance(points, &ci);
    let (mu_j, var_j) = centroid_and_variance(points, &cj);
    let spread = (var_i + var_j).sqrt();
    if spread == 0.0 {
        return Err(Degenerate::ZeroSpread);
    }
    Ok(dist(&mu_i, &mu_j) / spread)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut out = vec![0.0; v.len()];
        let mut start = 0;
        while start < idx.len() {
            let mut end = start + 1;
            while end < idx.len() && v[idx[end]] == v[idx[start]] {
                end += 1;
            }
            let avg = (start + end - 1) as f64 / 2.0;
            for &k in &idx[start..end] {
                out[k] = avg;
            }
            start = end;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ari: f64,
    pub silhouette: Option<f64>,
    pub davies_bouldin: Option<f64>,
    /// `Δᵢⱼ` between true classes on the embedding, keyed `"i-j"`; `None`
    /// where undefined.
    pub separability: BTreeMap<String, Option<f64>>,
    pub k: usize,
    pub n: usize,
}

/// Clusters `points` into `k` groups and scores the result against
/// `truth`. Silhouette and Davies–Bouldin are computed on the predicted
/// clustering.
pub fn evaluate(points: &[Vec<f64>], truth: &[u32], k: usize, restarts: usize, seed: u64) -> Result<MetricReport> {
    let mut cfg = KMeansConfig::new(k, seed);
    cfg.restarts = restarts;
    let km = kmeans(points, &cfg)?;
    let truth_labels = Labeling::new(truth);
    let mut classes: Vec<u32> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut separability_map = BTreeMap::new();
    for (a, &ci) in classes.iter().enumerate() {
        for &cj in &classes[a + 1..] {
            separability_map.insert(format!("{ci}-{cj}"), separability(points, truth, ci, cj).ok());
        }
    }
    Ok(MetricReport {
        ari: ari(&truth_labels, &km.labels)?,
        silhouette: silhouette(points, &km.labels).ok(),
        davies_bouldin: davies_bouldin(points, &km.labels).ok(),
        separability: separability_map,
        k,
        n: points.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn labeling_canonicalizes() {
        let l = Labeling::new(&[7, 7, 3, 9, 3]);
        assert_eq!(l.assignments(), &[0, 0, 1, 2, 1]);
        assert_eq!(l.n_clusters(), 3);
    }

    #[test]
    fn kmeans_splits_separated_pairs() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]]);
        let r = kmeans(&p, &KMeansConfig::new(2, 1)).unwrap();
        let a = r.labels.assignments();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]]);
        let r = kmeans(&p, &KMeansConfig::new(3, 2)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.labels.n_clusters(), 3);
        assert!(kmeans(&p, &KMeansConfig::new(4, 2)).is_err());
    }

    #[test]
    fn kmeans_flags_empty_clusters_on_duplicates() {
        let p = pts(&[[1.0, 1.0]; 5]);
        let r = kmeans(&p, &KMeansConfig::new(2, 0)).unwrap();
        assert_eq!(r.empty_clusters.len(), 1);
        assert_eq!(r.labels.n_clusters(), 1);
    }

    #[test]
    fn ari_basic_cases() {
        let a = Labeling::new(&[0, 0, 1, 1, 2]);
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
        let constant = Labeling::new(&[0, 0, 0, 0, 0]);
        assert_eq!(ari(&constant, &a).unwrap(), 0.0);
        assert!(ari(&a, &Labeling::new(&[0, 1])).is_err());
    }

    #[test]
    fn silhouette_hand_example() {
        // Clusters {0, 1} at x = 0, 1 and {2, 3} at x = 4, 6.
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [6.0, 0.0]]);
        let l = Labeling::new(&[0, 0, 1, 1]);
        let s0 = (5.0 - 1.0) / 5.0; // a=1, b=(4+6)/2
        let s1 = (4.0 - 1.0) / 4.0; // a=1, b=(3+5)/2
        let s2 = (3.5 - 2.0) / 3.5; // a=2, b=(4+3)/2
        let s3 = (5.5 - 2.0) / 5.5; // a=2, b=(6+5)/2
        let expected = (s0 + s1 + s2 + s3) / 4.0;
        assert!((silhouette(&p, &l).unwrap() - expected).abs() < 1e-12);
        assert_eq!(silhouette(&p, &Labeling::new(&[0; 4])), Err(Degenerate::SingleCluster));
    }

    #[test]
    fn silhouette_near_one_for_far_tight_clusters() {
        let p = pts(&[[0.0, 0.0], [1e-6, 0.0], [1.0, 0.0], [1.0 + 1e-6, 0.0]]);
        let s = silhouette(&p, &Labeling::new(&[0, 0, 1, 1])).unwrap();
        assert!((s - 1.0).abs() < 1e-5);
    }

    #[test]
    fn davies_bouldin_examples() {
        let p = pts(&[[0.0, 0.0], [3.0, 4.0]]);
        assert_eq!(davies_bouldin(&p, &Labeling::new(&[0, 1])).unwrap(), 0.0);
        // Centroids at x = 0 and x = 2, each cluster ±0.5 around it: σ = 0.5.
        let p = pts(&[[-0.5, 0.0], [0.5, 0.0], [1.5, 0.0], [2.5, 0.0]]);
        let l = Labeling::new(&[0, 0, 1, 1]);
        assert!((davies_bouldin(&p, &l).unwrap() - 0.5).abs() < 1e-15);
        let scaled: Vec<Vec<f64>> = p.iter().map(|v| v.iter().map(|x| x * 3.7).collect()).collect();
        assert!((davies_bouldin(&scaled, &l).unwrap() - 0.5).abs() < 1e-12);
        let same = pts(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [0.5, -0.5]]);
        assert_eq!(
            davies_bouldin(&same, &Labeling::new(&[0, 0, 1, 1])),
            Err(Degenerate::CoincidentCentroids)
        );
    }

    #[test]
    fn separability_examples() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(separability(&p, &[0, 0, 1, 1], 0, 1).unwrap(), 0.0);
        let masses = pts(&[[0.0, 0.0], [1.0, 0.0]]);
        assert_eq!(separability(&masses, &[0, 1], 0, 1), Err(Degenerate::ZeroSpread));
        assert_eq!(separability(&masses, &[0, 1], 0, 5), Err(Degenerate::EmptyClass));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }
}
