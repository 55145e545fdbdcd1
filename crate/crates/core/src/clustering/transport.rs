//! Entropic optimal transport between points and centroids, and the balanced
//! K-means built on it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorcore::Tensor;

use crate::error::{contract, Error, Result};
use crate::seed;

/// Balanced coupling between `N` points and `K` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `[N, K]`, nonnegative.
    pub plan: Tensor<f64>,
    pub iterations: usize,
    /// Largest absolute deviation of any row or column sum from its target.
    pub residual: f64,
    pub converged: bool,
}

impl TransportPlan {
    /// Column of the largest entry in each row, lowest index on ties.
    pub fn hard_assignments(&self) -> Vec<usize> {
        let k = self.plan.shape()[1];
        self.plan
            .data()
            .chunks(k)
            .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
            .collect()
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with uniform marginals `1/N` and `1/K`.
///
/// Potentials are kept in units of `eps`, so the plan is
/// `exp(α_i + β_j − C_ij/eps)`. Not reaching `tol` within `max_iters` is not
/// an error: the last plan is returned with `converged == false`.
pub fn sinkhorn(cost: &Tensor<f64>, eps: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    let &[n, k] = cost.shape() else {
        return Err(contract(format!("cost must be [N, K], got {:?}", cost.shape())));
    };
    if n == 0 || k == 0 {
        return Err(contract("empty cost matrix"));
    }
    if !(eps > 0.0) {
        return Err(contract(format!("eps must be positive, got {eps}")));
    }
    if !cost.all_finite() {
        return Err(Error::Numeric("cost matrix has non-finite entries".into()));
    }
    let scaled: Vec<f64> = cost.data().iter().map(|c| c / eps).collect();
    let (log_a, log_b) = (-(n as f64).ln(), -(k as f64).ln());
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; k];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            let row = &scaled[i * k..(i + 1) * k];
            alpha[i] = log_a - logsumexp(beta.iter().zip(row).map(|(b, c)| b - c));
        }
        for j in 0..k {
            beta[j] = log_b - logsumexp((0..n).map(|i| alpha[i] - scaled[i * k + j]));
        }
        // Columns are exact after the β update; only rows can be off.
        residual = (0..n)
            .map(|i| {
                let s: f64 = (0..k).map(|j| (alpha[i] + beta[j] - scaled[i * k + j]).exp()).sum();
                (s - 1.0 / n as f64).abs()
            })
            .fold(0.0, f64::max);
        if residual <= tol {
            break;
        }
    }
    let plan = Tensor::from_fn(vec![n, k], |idx| (alpha[idx / k] + beta[idx % k] - scaled[idx]).exp());
    let col_residual = (0..k)
        .map(|j| ((0..n).map(|i| plan.data()[i * k + j]).sum::<f64>() - 1.0 / k as f64).abs())
        .fold(0.0, f64::max);
    let residual = residual.max(col_residual);
    let converged = residual <= tol;
    if !converged {
        log::warn!("sinkhorn stopped after {iterations} iterations with marginal residual {residual:.3e}");
    }
    Ok(TransportPlan { plan, iterations, residual, converged })
}

/// Centroids in embedding space plus the entropic regularization used to fit them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `[K, o]`.
    pub centroids: Tensor<f64>,
    pub sinkhorn_eps: f64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// Index of the nearest centroid (Euclidean), lowest index on ties.
    pub fn nearest(&self, embedding: &[f64]) -> usize {
        nearest(&self.centroids, embedding).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub eps: f64,
    pub max_rounds: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { eps: 0.01, max_rounds: 100, sinkhorn_iters: 500, sinkhorn_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Zero-based cluster per input row.
    pub assignments: Vec<usize>,
    pub rounds: usize,
}

impl KMeansFit {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.model.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Tensor<f64>, x: &[f64]) -> (usize, f64) {
    let o = centroids.shape()[1];
    centroids
        .data()
        .chunks(o)
        .enumerate()
        .map(|(j, c)| (j, sq_dist(c, x)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// K-means whose assignment step is the row argmax of a balanced Sinkhorn
/// plan over Euclidean point-to-centroid costs.
///
/// Costs are divided by their maximum before each Sinkhorn solve so `eps`
/// is relative to the data scale. Initialization is greedy farthest-point
/// from a seeded first pick; a cluster left empty is re-seeded with the
/// point farthest from its assigned centroid.
pub fn sinkhorn_kmeans(embeddings: &Tensor<f64>, k: usize, cfg: &KMeansConfig, seed_value: u64) -> Result<KMeansFit> {
    let &[n, o] = embeddings.shape() else {
        return Err(contract(format!("embeddings must be [N, o], got {:?}", embeddings.shape())));
    };
    if k == 0 || k > n {
        return Err(contract(format!("need 1 <= K <= N, got K={k}, N={n}")));
    }
    if !embeddings.all_finite() {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    let rows: Vec<&[f64]> = embeddings.data().chunks(o).collect();

    let mut rng = seed::rng(seed_value, &[seed::tag("kmeans-init")]);
    let mut centroids = Vec::with_capacity(k * o);
    centroids.extend_from_slice(rows[rng.random_range(0..n)]);
    let mut min_d: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[..o])).collect();
    for _ in 1..k {
        let far = argmax(&min_d);
        let c = rows[far].to_vec();
        for (d, r) in min_d.iter_mut().zip(&rows) {
            *d = d.min(sq_dist(r, &c));
        }
        centroids.extend_from_slice(&c);
    }
    let mut centroids = Tensor::new(vec![k, o], centroids)?;

    let mut assignments = vec![usize::MAX; n];
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let mut cost = Tensor::from_fn(vec![n, k], |idx| sq_dist(rows[idx / k], &centroids.data()[(idx % k) * o..(idx % k + 1) * o]).sqrt());
        let max = cost.max_abs();
        if max > 0.0 {
            cost = cost.map(|c| c / max);
        }
        let plan = sinkhorn(&cost, cfg.eps, cfg.sinkhorn_iters, cfg.sinkhorn_tol)?;
        let mut next = plan.hard_assignments();
        reseed_empty(&mut next, &rows, &centroids, k);
        let changed = next != assignments;
        assignments = next;
        centroids = means(&rows, &assignments, k, o);
        if !changed {
            break;
        }
    }
    Ok(KMeansFit { model: ClusterModel { centroids, sinkhorn_eps: cfg.eps }, assignments, rounds })
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn reseed_empty(assign: &mut [usize], rows: &[&[f64]], centroids: &Tensor<f64>, k: usize) {
    let o = centroids.shape()[1];
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        // Farthest point among those whose cluster can spare one.
        let dist: Vec<f64> = assign
            .iter()
            .zip(rows)
            .map(|(&a, r)| if sizes[a] > 1 { sq_dist(r, &centroids.data()[a * o..(a + 1) * o]) } else { f64::NEG_INFINITY })
            .collect();
        assign[argmax(&dist)] = empty;
    }
}

fn means(rows: &[&[f64]], assign: &[usize], k: usize, o: usize) -> Tensor<f64> {
    let mut sums = vec![0.0; k * o];
    let mut counts = vec![0usize; k];
    for (r, &a) in rows.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a * o..(a + 1) * o].iter_mut().zip(r.iter()) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        for s in &mut sums[j * o..(j + 1) * o] {
            *s /= c.max(1) as f64;
        }
    }
    Tensor::new(vec![k, o], sums).expect("sizes agree")
}
