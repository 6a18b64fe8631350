//! Zero-shot evaluation: Recall@K retrieval, k-means, NMI and pairwise F1.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcamlError, Result};
use crate::sampling::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub queries: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub nmi: f64,
    pub f1: f64,
    pub clusters: usize,
}

/// `M[i][j] = ‖x_i − x_j‖²` via `‖a‖² + ‖b‖² − 2aᵀb`, clamped at zero, with
/// an exact zero diagonal and mirrored upper triangle.
pub fn pairwise_sq_distances(embeddings: ArrayView2<f64>) -> Array2<f64> {
    let n = embeddings.nrows();
    let gram = embeddings.dot(&embeddings.t());
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = (gram[[i, i]] + gram[[j, j]] - 2.0 * gram[[i, j]]).max(0.0);
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

fn check_labels(n: usize, labels: &[Label]) -> Result<()> {
    if labels.len() != n {
        return Err(EcamlError::Shape(format!("{n} embeddings but {} labels", labels.len())));
    }
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(EcamlError::Precondition(format!(
            "class {l} has a single member; Recall@K needs at least two per class"
        )));
    }
    Ok(())
}

/// Rank (0-based) of the first same-label neighbour of every query, with
/// ties in distance broken by lower row index.
fn first_hit_ranks(dist: &Array2<f64>, labels: &[Label]) -> Vec<usize> {
    let n = labels.len();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    (0..n)
        .map(|q| {
            order.clear();
            order.extend((0..n).filter(|&j| j != q));
            order.sort_by(|&a, &b| {
                dist[[q, a]]
                    .total_cmp(&dist[[q, b]])
                    .then_with(|| a.cmp(&b))
            });
            order
                .iter()
                .position(|&j| labels[j] == labels[q])
                .unwrap_or(usize::MAX)
        })
        .collect()
}

/// Fraction of queries with a same-class item among their `K` nearest
/// neighbours (self excluded), for every requested `K`.
pub fn recall_at_k(embeddings: ArrayView2<f64>, labels: &[Label], ks: &[usize]) -> Result<RetrievalReport> {
    let n = embeddings.nrows();
    check_labels(n, labels)?;
    if let Some(&bad) = ks.iter().find(|&&k| k == 0) {
        return Err(EcamlError::Precondition(format!("Recall@K needs K >= 1, got {bad}")));
    }
    let dist = pairwise_sq_distances(embeddings);
    let ranks = first_hit_ranks(&dist, labels);
    let recall_at = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    Ok(RetrievalReport { recall_at, queries: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        KMeansConfig {
            clusters,
            seed,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

fn sq_dist_rows(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every point (ties to the lower centroid index) and
/// the squared distance to it.
fn assign(points: &ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, cen) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist_rows(p, cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_plus_plus(points: &ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let mut chosen = vec![rng.random_range(0..n)];
    centroids.row_mut(0).assign(&points.row(chosen[0]));
    let mut nearest: Vec<f64> = points.rows().into_iter().map(|p| sq_dist_rows(p, points.row(chosen[0]))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while nearest[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a centroid; take an unused row
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
        centroids.row_mut(c).assign(&points.row(next));
        for (i, p) in points.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist_rows(p, points.row(next)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are reseeded to
/// the point farthest from its centroid.
pub fn kmeans(points: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let (n, d) = points.dim();
    let k = cfg.clusters;
    if k == 0 || k > n {
        return Err(EcamlError::Precondition(format!(
            "k-means needs 1 <= K <= N, got K = {k}, N = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);
    let (mut assignments, mut dists) = assign(&points, &centroids);
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
        }
        let mut taken = BTreeSet::new();
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then_with(|| b.cmp(&a)))
                    .expect("K <= N leaves a candidate");
                taken.insert(far);
                sums.row_mut(c).assign(&points.row(far));
                counts[c] = 1;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = &sums.row(c) / counts[c] as f64;
            shift = shift.max(sq_dist_rows(new.view(), centroids.row(c)).sqrt());
            centroids.row_mut(c).assign(&new);
        }
        let (a, ds) = assign(&points, &centroids);
        assignments = a;
        dists = ds;
        if shift < cfg.tol {
            break;
        }
    }
    let inertia = dists.iter().sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

fn contingency<A: Ord + Copy, B: Ord + Copy>(
    a: &[A],
    b: &[B],
) -> (BTreeMap<(A, B), usize>, BTreeMap<A, usize>, BTreeMap<B, usize>) {
    let mut joint = BTreeMap::new();
    let mut ma = BTreeMap::new();
    let mut mb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
    }
    (joint, ma, mb)
}

fn entropy<K>(counts: &BTreeMap<K, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// `2·I(Ω; C) / (H(Ω) + H(C))` in nats; 0 when both entropies vanish.
pub fn nmi<A: Ord + Copy, B: Ord + Copy>(assignments: &[A], labels: &[B]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(EcamlError::Shape(format!(
            "{} assignments but {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.is_empty() {
        return Err(EcamlError::Precondition("NMI of an empty clustering".into()));
    }
    let n = assignments.len() as f64;
    let (joint, ca, cb) = contingency(assignments, labels);
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let denom = entropy(&ca, n) + entropy(&cb, n);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * mi / denom).clamp(0.0, 1.0))
}

fn pairs(count: usize) -> f64 {
    (count * count.saturating_sub(1) / 2) as f64
}

/// Pair-counting F1 of a clustering against ground-truth classes.
pub fn pairwise_f1<A: Ord + Copy, B: Ord + Copy>(assignments: &[A], labels: &[B]) -> Result<f64> {
    if assignments.len() != labels.len() {
        return Err(EcamlError::Shape(format!(
            "{} assignments but {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    if assignments.len() < 2 {
        return Err(EcamlError::Precondition("pairwise F1 needs at least two samples".into()));
    }
    let (joint, ca, cb) = contingency(assignments, labels);
    let tp: f64 = joint.values().map(|&c| pairs(c)).sum();
    if tp == 0.0 {
        return Ok(0.0);
    }
    let same_cluster: f64 = ca.values().map(|&c| pairs(c)).sum();
    let same_class: f64 = cb.values().map(|&c| pairs(c)).sum();
    let precision = tp / same_cluster;
    let recall = tp / same_class;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// k-means with one cluster per ground-truth class, scored by NMI and F1.
pub fn evaluate_clustering(embeddings: ArrayView2<f64>, labels: &[Label], seed: u64) -> Result<ClusteringReport> {
    if labels.len() != embeddings.nrows() {
        return Err(EcamlError::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let clusters = labels.iter().collect::<BTreeSet<_>>().len();
    let km = kmeans(embeddings, &KMeansConfig::new(clusters, seed))?;
    Ok(ClusteringReport {
        nmi: nmi(&km.assignments, labels)?,
        f1: pairwise_f1(&km.assignments, labels)?,
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::StandardNormal;

    #[test]
    fn distances_of_orthonormal_rows() {
        let m = pairwise_sq_distances(Array2::<f64>::eye(3).view());
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 2.0 };
                assert!((m[[i, j]] - expected).abs() < 1e-15);
                assert_eq!(m[[i, j]].to_bits(), m[[j, i]].to_bits());
            }
        }
    }

    #[test]
    fn distances_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_simple_fn((15, 6), || rng.sample::<f64, _>(StandardNormal));
        let m = pairwise_sq_distances(x.view());
        for i in 0..15 {
            for j in 0..15 {
                let naive: f64 = (0..6).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum();
                assert!((m[[i, j]] - naive).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn recall_twins() {
        let x = array![[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.0]];
        let r = recall_at_k(x.view(), &[0, 0, 1, 1], &[1]).unwrap();
        assert_eq!(r.recall(1), Some(1.0));
    }

    #[test]
    fn recall_adversarial_labels() {
        // nearest neighbours pair up (0,1) and (2,3); labels cross them
        let x = array![[0.0], [0.1], [10.0], [10.1]];
        let r = recall_at_k(x.view(), &[0, 1, 0, 1], &[1, 3]).unwrap();
        assert_eq!(r.recall(1), Some(0.0));
        assert_eq!(r.recall(3), Some(1.0));
    }

    #[test]
    fn recall_preconditions() {
        let x = array![[0.0], [1.0], [2.0]];
        assert!(matches!(recall_at_k(x.view(), &[0, 0, 1], &[1]), Err(EcamlError::Precondition(_))));
        assert!(recall_at_k(x.view(), &[0, 0, 0], &[0]).is_err());
    }

    #[test]
    fn recall_tie_breaks_to_lower_index() {
        // query 1 is equidistant from rows 0 and 2; row 0 wins the tie
        let x = array![[0.0], [1.0], [2.0], [10.0]];
        let r = recall_at_k(x.view(), &[5, 5, 6, 6], &[1]).unwrap();
        // q0→1 hit, q1→0 hit, q2→1 miss, q3→2 hit
        assert_eq!(r.recall(1), Some(0.75));
    }

    #[test]
    fn kmeans_k_equals_n() {
        let x = array![[0.0, 1.0], [2.0, 3.0], [-1.0, 4.0], [7.0, 7.0]];
        let km = kmeans(x.view(), &KMeansConfig::new(4, 0)).unwrap();
        let mut a = km.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert_eq!(km.inertia, 0.0);
        assert!(kmeans(x.view(), &KMeansConfig::new(5, 0)).is_err());
    }

    #[test]
    fn kmeans_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sigma = 0.1;
        let x = Array2::from_shape_fn((40, 2), |(i, _)| {
            let centre = if i < 20 { 0.0 } else { 5.0 };
            centre + sigma * rng.sample::<f64, _>(StandardNormal)
        });
        let truth: Vec<u32> = (0..40).map(|i| (i >= 20) as u32).collect();
        let km = kmeans(x.view(), &KMeansConfig::new(2, 3)).unwrap();
        let first = km.assignments[0];
        for (i, &a) in km.assignments.iter().enumerate() {
            assert_eq!(a == first, truth[i] == 0);
        }
        assert_eq!(km, kmeans(x.view(), &KMeansConfig::new(2, 3)).unwrap());
    }

    #[test]
    fn nmi_extremes() {
        let labels = [0u32, 0, 1, 1, 2, 2];
        assert!((nmi(&labels, &labels).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0usize; 4], &[0u32, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0usize; 4], &[0u32; 4]).unwrap(), 0.0);
        assert!(nmi(&[0usize; 3], &[0u32; 4]).is_err());
    }

    #[test]
    fn f1_extremes() {
        let labels = [0u32, 0, 1, 1, 2, 2];
        assert_eq!(pairwise_f1(&labels, &labels).unwrap(), 1.0);
        let singletons: Vec<usize> = (0..6).collect();
        assert_eq!(pairwise_f1(&singletons, &labels).unwrap(), 0.0);
        assert!(pairwise_f1(&[0usize], &[0u32]).is_err());
    }

    #[test]
    fn relabeling_invariance() {
        let a = [0usize, 0, 1, 2, 2, 1, 0];
        let b = [3u32, 3, 3, 4, 4, 5, 5];
        let perm = [2usize, 2, 0, 1, 1, 0, 2];
        assert!((nmi(&a, &b).unwrap() - nmi(&perm, &b).unwrap()).abs() < 1e-15);
        assert!((pairwise_f1(&a, &b).unwrap() - pairwise_f1(&perm, &b).unwrap()).abs() < 1e-15);
    }
}
