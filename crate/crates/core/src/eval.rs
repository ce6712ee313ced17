//! Clustering the learned representation and scoring it against ground
//! truth: Lloyd's k-means with plus-plus seeding and restarts, matched
//! accuracy via linear assignment, normalized mutual information, adjusted
//! Rand index, and pairwise F-score.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scores of one evaluation, plus the run coordinates they belong to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub epoch: usize,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub fscore: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "variant,eta,lambda,seed,epoch,acc,nmi,ari,fscore";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.eta,
            self.lambda,
            self.seed,
            self.epoch,
            self.acc,
            self.nmi,
            self.ari,
            self.fscore
        )
    }
}

/// Lloyd's algorithm with plus-plus seeding, best of `restarts` runs by
/// inertia. Iterations stop when every centroid moves less than `1e-6` or
/// after 300 rounds; an emptied cluster is reseeded at the point farthest
/// from its assigned centroid. Deterministic for a fixed seed.
pub fn kmeans<T: Scalar>(
    x: &Array2<T>,
    c: usize,
    seed: u64,
    restarts: usize,
) -> Result<Vec<usize>> {
    let n = x.nrows();
    if c == 0 || n < c {
        return Err(Error::InvalidParam(format!(
            "cannot form {c} clusters from {n} points"
        )));
    }
    if restarts == 0 {
        return Err(Error::InvalidParam(
            "kmeans needs at least one restart".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let (labels, inertia) = kmeans_once(x, c, &mut rng);
        if best.as_ref().is_none_or(|(bi, _)| inertia < *bi) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_once<T: Scalar>(x: &Array2<T>, c: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = x.nrows();
    let d = x.ncols();
    let xf: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect();

    // Plus-plus seeding: next centroid drawn proportional to squared
    // distance from the chosen set.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(c);
    centroids.push(xf[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = xf.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(xf[idx].clone());
        for (i, p) in xf.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..300 {
        // Assignment step; ties break toward the lower cluster index.
        for (i, p) in xf.iter().enumerate() {
            let mut best_k = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (k, cent) in centroids.iter().enumerate().skip(1) {
                let dist = sq_dist(p, cent);
                if dist < best_d {
                    best_d = dist;
                    best_k = k;
                }
            }
            labels[i] = best_k;
        }

        // Update step.
        let mut sums = vec![vec![0.0f64; d]; c];
        let mut counts = vec![0usize; c];
        for (i, p) in xf.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut new_centroids = centroids.clone();
        for k in 0..c {
            if counts[k] > 0 {
                for (j, s) in sums[k].iter().enumerate() {
                    new_centroids[k][j] = s / counts[k] as f64;
                }
            } else {
                // Reseed an emptied cluster at the farthest point from its
                // current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&xf[a], &centroids[labels[a]]);
                        let db = sq_dist(&xf[b], &centroids[labels[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                new_centroids[k] = xf[far].clone();
            }
        }

        let shift = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = new_centroids;
        if shift < 1e-6 {
            break;
        }
    }

    // Final assignment and inertia under the converged centroids.
    let mut inertia = 0.0;
    for (i, p) in xf.iter().enumerate() {
        let mut best_k = 0;
        let mut best_d = sq_dist(p, &centroids[0]);
        for (k, cent) in centroids.iter().enumerate().skip(1) {
            let dist = sq_dist(p, cent);
            if dist < best_d {
                best_d = dist;
                best_k = k;
            }
        }
        labels[i] = best_k;
        inertia += best_d;
    }
    (labels, inertia)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Contingency counts plus compacted label marginals.
struct Contingency {
    counts: Vec<Vec<usize>>,
    pred_sizes: Vec<usize>,
    truth_sizes: Vec<usize>,
    n: usize,
}

fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidParam("empty partitions".into()));
    }
    let compact = |labels: &[usize]| -> (Vec<usize>, usize) {
        let mut seen: Vec<usize> = labels.to_vec();
        seen.sort_unstable();
        seen.dedup();
        let ids: Vec<usize> = labels
            .iter()
            .map(|l| seen.binary_search(l).unwrap())
            .collect();
        (ids, seen.len())
    };
    let (pi, pc) = compact(pred);
    let (ti, tc) = compact(truth);
    let mut counts = vec![vec![0usize; tc]; pc];
    let mut pred_sizes = vec![0usize; pc];
    let mut truth_sizes = vec![0usize; tc];
    for (&a, &b) in pi.iter().zip(&ti) {
        counts[a][b] += 1;
        pred_sizes[a] += 1;
        truth_sizes[b] += 1;
    }
    Ok(Contingency {
        counts,
        pred_sizes,
        truth_sizes,
        n: pred.len(),
    })
}

/// Clustering accuracy: the best label bijection between predicted and true
/// clusters, solved as a linear assignment on the contingency matrix.
pub fn accuracy_hungarian(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    let rows = ct.counts.len();
    let cols = ct.counts[0].len();
    let size = rows.max(cols);
    // Maximize matched counts = minimize negated counts on a square padding.
    let mut cost = vec![vec![0.0f64; size]; size];
    for (i, row) in ct.counts.iter().enumerate() {
        for (j, &cnt) in row.iter().enumerate() {
            cost[i][j] = -(cnt as f64);
        }
    }
    let assignment = hungarian_min(&cost);
    let mut matched = 0usize;
    for (i, j) in assignment.into_iter().enumerate() {
        if i < rows && j < cols {
            matched += ct.counts[i][j];
        }
    }
    Ok(matched as f64 / ct.n as f64)
}

/// O(n^3) Hungarian algorithm (potentials formulation) for square cost
/// matrices; returns the column assigned to each row.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row matched to each column, 1-based
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Normalized mutual information with natural logarithms, normalized by the
/// geometric mean of the two entropies; zero when either partition has zero
/// entropy.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    let n = ct.n as f64;
    let entropy = |sizes: &[usize]| -> f64 {
        sizes
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let hp = entropy(&ct.pred_sizes);
    let ht = entropy(&ct.truth_sizes);
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in ct.counts.iter().enumerate() {
        for (j, &cnt) in row.iter().enumerate() {
            if cnt == 0 {
                continue;
            }
            let pij = cnt as f64 / n;
            let pi = ct.pred_sizes[i] as f64 / n;
            let qj = ct.truth_sizes[j] as f64 / n;
            mi += pij * (pij / (pi * qj)).ln();
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

fn choose2(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index via pair counts from the contingency table.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    let index: f64 = ct.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = ct.pred_sizes.iter().map(|&c| choose2(c)).sum();
    let b: f64 = ct.truth_sizes.iter().map(|&c| choose2(c)).sum();
    let total = choose2(ct.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max_index = (a + b) / 2.0;
    if (max_index - expected).abs() < f64::EPSILON {
        // Both partitions are trivially structured; identical by convention.
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Pairwise F-score: precision and recall over unordered sample pairs, where
/// a positive is a pair sharing a cluster. Zero when there are no true
/// positive pairs.
pub fn pairwise_fscore(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = contingency(pred, truth)?;
    let tp: f64 = ct.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let same_pred: f64 = ct.pred_sizes.iter().map(|&c| choose2(c)).sum();
    let same_truth: f64 = ct.truth_sizes.iter().map(|&c| choose2(c)).sum();
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / same_pred;
    let recall = tp / same_truth;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean scores over several k-means seeds on one representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanScores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub fscore: f64,
}

/// Cluster `x` once per seed and average the four metrics.
pub fn evaluate<T: Scalar>(
    x: &Array2<T>,
    labels: Option<&[usize]>,
    c: usize,
    seeds: &[u64],
    restarts: usize,
) -> Result<MeanScores> {
    let truth = labels.ok_or(Error::MissingLabels)?;
    if seeds.is_empty() {
        return Err(Error::InvalidParam(
            "evaluation needs at least one seed".into(),
        ));
    }
    let mut acc = 0.0;
    let mut nmi_sum = 0.0;
    let mut ari_sum = 0.0;
    let mut f_sum = 0.0;
    for &seed in seeds {
        let pred = kmeans(x, c, seed, restarts)?;
        acc += accuracy_hungarian(&pred, truth)?;
        nmi_sum += nmi(&pred, truth)?;
        ari_sum += ari(&pred, truth)?;
        f_sum += pairwise_fscore(&pred, truth)?;
    }
    let k = seeds.len() as f64;
    Ok(MeanScores {
        acc: acc / k,
        nmi: nmi_sum / k,
        ari: ari_sum / k,
        fscore: f_sum / k,
    })
}
