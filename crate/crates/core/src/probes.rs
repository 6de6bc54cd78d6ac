//! Monte Carlo probes of the mini-batch behaviour of center updates.
//!
//! - [`coverage_probe`]: how many clusters receive at least one positive
//!   instance in a batch of `b` instances drawn from `K` balanced clusters.
//! - [`variance_ratio_probe`]: spread of positives around their own cluster
//!   mean versus spread of negatives around the mean of the other clusters.
//! - [`drift_probe`]: center trajectories under the full cross-entropy
//!   gradient and under the stable gradient that ignores negatives.
//!
//! Trial `t` of a probe seeded with `s` draws from `rng::trial(s, t)`, so
//! trials are independent of how many run and in what order.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::discrimination::{grad_w_ce, grad_w_secu, Temperature};
use crate::error::{Result, SecuError};
use crate::metrics::size_stats;
use crate::numerics::{argmax, axpy_unchecked, dot, norm, normalize_in_place, rng, Mat};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub k: usize,
    pub batch_size: usize,
    /// Covered clusters in each trial.
    pub covered: Vec<usize>,
    /// `(covered, number of trials)`, ascending.
    pub histogram: Vec<(usize, usize)>,
    pub max_covered: usize,
    pub mean_covered: f64,
}

impl CoverageReport {
    /// Mean fraction of clusters without a positive instance.
    pub fn mean_uncovered_fraction(&self) -> f64 {
        1.0 - self.mean_covered / self.k as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["covered", "count"])?;
        for (c, n) in &self.histogram {
            w.write_record([c.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `K(1 − (1 − 1/K)^b)`: expected number of covered clusters.
pub fn expected_coverage(k: usize, b: usize) -> f64 {
    let k = k as f64;
    k * (1.0 - (1.0 - 1.0 / k).powf(b as f64))
}

/// Draws `trials` batches of `b` cluster memberships, uniform over `K`.
pub fn coverage_probe(k: usize, b: usize, trials: usize, seed: u64) -> Result<CoverageReport> {
    if b == 0 || k < b {
        return Err(SecuError::InvalidArgument(format!(
            "coverage probe needs K >= b >= 1 (got K = {k}, b = {b})"
        )));
    }
    if trials == 0 {
        return Err(SecuError::InvalidArgument(
            "coverage probe needs at least one trial".into(),
        ));
    }
    let mut covered = Vec::with_capacity(trials);
    let mut seen = vec![u64::MAX; k];
    for t in 0..trials as u64 {
        let mut r = rng::trial(seed, t);
        let mut c = 0;
        for _ in 0..b {
            let j = r.random_range(0..k);
            if seen[j] != t {
                seen[j] = t;
                c += 1;
            }
        }
        if c > b {
            return Err(SecuError::Inconsistent(format!(
                "{c} clusters covered by {b} instances"
            )));
        }
        covered.push(c);
    }
    let mut sorted = covered.clone();
    sorted.sort_unstable();
    let mut histogram: Vec<(usize, usize)> = Vec::new();
    for c in sorted {
        match histogram.last_mut() {
            Some((v, n)) if *v == c => *n += 1,
            _ => histogram.push((c, 1)),
        }
    }
    let max_covered = covered.iter().copied().max().unwrap_or(0);
    let mean_covered = covered.iter().sum::<usize>() as f64 / trials as f64;
    Ok(CoverageReport {
        k,
        batch_size: b,
        covered,
        histogram,
        max_covered,
        mean_covered,
    })
}

/// `K` clusters on the unit sphere in `d` dimensions. A sample of cluster `c`
/// is `x = aμ_c + √(1−a²)u` with `u` a uniform unit vector orthogonal to
/// `μ_c`, so `‖x‖ = 1` exactly and `E[x | c] = aμ_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereClusterModel {
    pub k: usize,
    pub d: usize,
    pub a: f64,
    pub directions: Vec<Vec<f64>>,
}

impl SphereClusterModel {
    /// Mean directions drawn uniformly on the sphere.
    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, a: f64, rng: &mut R) -> Result<Self> {
        if k == 0 || d < 2 {
            return Err(SecuError::InvalidArgument(format!(
                "sphere model needs K >= 1 and d >= 2 (got {k}, {d})"
            )));
        }
        if !(a > 0.0 && a < 1.0) {
            return Err(SecuError::InvalidArgument(format!(
                "mean norm must lie in (0, 1), got {a}"
            )));
        }
        let directions = (0..k).map(|_| rng::unit_vector(rng, d)).collect();
        Ok(Self {
            k,
            d,
            a,
            directions,
        })
    }

    pub fn sample_from<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        let mu = &self.directions[c];
        let u = loop {
            let mut g: Vec<f64> = (0..self.d).map(|_| rng::standard_normal(rng)).collect();
            let proj = dot(&g, mu);
            axpy_unchecked(-proj, mu, &mut g);
            if normalize_in_place(&mut g).is_ok() {
                break g;
            }
        };
        let s = (1.0 - self.a * self.a).sqrt();
        mu.iter().zip(&u).map(|(m, v)| self.a * m + s * v).collect()
    }

    /// A cluster uniformly at random, then a sample from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let c = rng.random_range(0..self.k);
        (c, self.sample_from(c, rng))
    }

    /// `n_per` samples from every cluster, listed cluster by cluster.
    pub fn dataset<R: Rng + ?Sized>(
        &self,
        n_per: usize,
        rng: &mut R,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::with_capacity(self.k * n_per);
        let mut ys = Vec::with_capacity(self.k * n_per);
        for c in 0..self.k {
            for _ in 0..n_per {
                xs.push(self.sample_from(c, rng));
                ys.push(c);
            }
        }
        (xs, ys)
    }
}

/// `Var_neg / Var_pos` when centers are spread uniformly:
/// `(K−2)/((K−1)(1−a²)) + 1/(K−1)`.
pub fn predicted_variance_ratio(k: usize, a: f64) -> f64 {
    let k = k as f64;
    (k - 2.0) / ((k - 1.0) * (1.0 - a * a)) + 1.0 / (k - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub var_pos: f64,
    pub var_neg: f64,
    pub predicted_ratio: f64,
    pub empirical_ratio: f64,
    /// Average norm of the empirical cluster means.
    pub achieved_mean_norm: f64,
}

impl VarianceReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["var_pos", "var_neg", "predicted_ratio", "empirical_ratio"])?;
        w.write_record([
            format!("{:?}", self.var_pos),
            format!("{:?}", self.var_neg),
            format!("{:?}", self.predicted_ratio),
            format!("{:?}", self.empirical_ratio),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Draws `samples` instances and measures
/// `Var_pos = E‖x − μ̂_{c(x)}‖²` and, for every reference cluster `i`,
/// `E‖x − m_i‖²` over instances of other clusters, where `m_i` averages the
/// empirical means of all clusters but `i`; `Var_neg` averages over `i`.
pub fn variance_ratio_probe(
    model: &SphereClusterModel,
    samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if model.k < 2 {
        return Err(SecuError::InvalidArgument(
            "variance probe needs K >= 2".into(),
        ));
    }
    if samples < model.k {
        return Err(SecuError::InvalidArgument(
            "variance probe needs at least one sample per cluster".into(),
        ));
    }
    let (k, d) = (model.k, model.d);
    let mut r = rng::stream(seed, rng::STREAM_PROBE);
    let draws: Vec<(usize, Vec<f64>)> = (0..samples).map(|_| model.sample(&mut r)).collect();

    let mut means = Mat::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (c, x) in &draws {
        axpy_unchecked(1.0, x, means.row_mut(*c));
        counts[*c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(SecuError::Infeasible(format!(
            "cluster {c} received no samples"
        )));
    }
    for c in 0..k {
        let inv = 1.0 / counts[c] as f64;
        means.row_mut(c).iter_mut().for_each(|v| *v *= inv);
    }
    let achieved_mean_norm = (0..k).map(|c| norm(means.row(c))).sum::<f64>() / k as f64;

    // m_i = (T − μ̂_i)/(K−1) with T the sum of all empirical means
    let mut total = vec![0.0; d];
    for c in 0..k {
        axpy_unchecked(1.0, means.row(c), &mut total);
    }
    let km1 = (k - 1) as f64;
    let others: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            total
                .iter()
                .zip(means.row(i))
                .map(|(t, m)| (t - m) / km1)
                .collect()
        })
        .collect();
    let others_sq: Vec<f64> = others.iter().map(|m| dot(m, m)).collect();

    // per reference cluster i: Σ over negatives x of ‖x − m_i‖², and the count
    let mut pos = 0.0;
    let mut neg_sum = vec![0.0; k];
    let mut neg_cnt = vec![0usize; k];
    for (c, x) in &draws {
        let mu = means.row(*c);
        pos += x
            .iter()
            .zip(mu)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let xx = dot(x, x);
        for i in 0..k {
            if i != *c {
                neg_sum[i] += xx - 2.0 * dot(x, &others[i]) + others_sq[i];
                neg_cnt[i] += 1;
            }
        }
    }
    let var_pos = pos / samples as f64;
    let var_neg = (0..k).map(|i| neg_sum[i] / neg_cnt[i] as f64).sum::<f64>() / k as f64;
    let predicted_ratio = predicted_variance_ratio(k, model.a);
    Ok(VarianceReport {
        var_pos,
        var_neg,
        predicted_ratio,
        empirical_ratio: var_neg / var_pos,
        achieved_mean_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMethod {
    Ce,
    Secu,
}

impl DriftMethod {
    pub fn name(self) -> &'static str {
        match self {
            DriftMethod::Ce => "ce",
            DriftMethod::Secu => "secu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// Mean center displacement per step, one entry per step.
    pub ce: Vec<f64>,
    pub secu: Vec<f64>,
    /// `(max, min)` cluster size after greedy re-assignment.
    pub ce_sizes: (usize, usize),
    pub secu_sizes: (usize, usize),
    pub ce_centers: Mat,
    pub secu_centers: Mat,
}

impl DriftReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "method", "mean_displacement"])?;
        for (method, traj) in [(DriftMethod::Ce, &self.ce), (DriftMethod::Secu, &self.secu)] {
            for (s, v) in traj.iter().enumerate() {
                w.write_record([s.to_string(), method.name().to_string(), format!("{v:?}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs plain SGD on the centers with fixed embeddings and labels, once with
/// the cross-entropy gradient and once with the stable gradient, from the
/// same initial centers and on the same batch sequence.
pub fn drift_probe<X: AsRef<[f64]>>(
    xs: &[X],
    labels: &[usize],
    init: &Mat,
    cfg: &DriftConfig,
    seed: u64,
) -> Result<DriftReport> {
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(SecuError::Shape(
            "drift probe needs equally many embeddings and labels".into(),
        ));
    }
    if cfg.batch_size == 0 || cfg.batch_size > xs.len() {
        return Err(SecuError::InvalidArgument(format!(
            "batch size {} not in 1..={}",
            cfg.batch_size,
            xs.len()
        )));
    }
    let lambda = Temperature::new(cfg.lambda)?;
    let mut r = rng::stream(seed, rng::STREAM_PROBE);
    let batches: Vec<Vec<usize>> = (0..cfg.steps)
        .map(|_| {
            (0..cfg.batch_size)
                .map(|_| r.random_range(0..xs.len()))
                .collect()
        })
        .collect();

    let run = |method: DriftMethod| -> Result<(Vec<f64>, Mat)> {
        let mut w = init.clone();
        for j in 0..w.rows() {
            normalize_in_place(w.row_mut(j))?;
        }
        let mut traj = Vec::with_capacity(cfg.steps);
        for batch in &batches {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i].as_ref()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = match method {
                DriftMethod::Ce => grad_w_ce(&bx, &by, &w, lambda)?,
                DriftMethod::Secu => grad_w_secu(&bx, &by, &w, lambda)?,
            };
            g.scale(1.0 / batch.len() as f64);
            let prev = w.clone();
            w.add_scaled(-cfg.lr, &g)?;
            for j in 0..w.rows() {
                normalize_in_place(w.row_mut(j))?;
            }
            let disp = (0..w.rows())
                .map(|j| {
                    w.row(j)
                        .iter()
                        .zip(prev.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / w.rows() as f64;
            traj.push(disp);
        }
        Ok((traj, w))
    };
    let (ce, ce_centers) = run(DriftMethod::Ce)?;
    let (secu, secu_centers) = run(DriftMethod::Secu)?;
    let sizes = |w: &Mat| -> Result<(usize, usize)> {
        let pred: Vec<usize> = xs
            .iter()
            .map(|x| {
                let s: Vec<f64> = w.iter_rows().map(|c| dot(x.as_ref(), c)).collect();
                argmax(&s)
            })
            .collect();
        size_stats(&pred, w.rows())
    };
    Ok(DriftReport {
        ce_sizes: sizes(&ce_centers)?,
        secu_sizes: sizes(&secu_centers)?,
        ce,
        secu,
        ce_centers,
        secu_centers,
    })
}
