//! Online cluster assignment under size or entropy constraints.
//!
//! Instances arrive in mini-batches and each gets a hard label immediately.
//! Size constraints are enforced through per-cluster dual variables updated
//! once per batch by projected gradient ascent. The entropy constraint is
//! handled exactly: each instance is moved to the cluster that minimizes its
//! cost minus `α` times the entropy of the global label histogram, with the
//! histogram updated after every single instance. That sequential update can
//! never increase the objective `Σ_i cost_{i,y_i} − α·H(counts)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::discrimination::Prediction;
use crate::error::{shape_err, Result, SecuError};
use crate::numerics::{argmin, compensated_sum, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// No constraint: every instance goes to its cheapest cluster.
    Greedy,
    /// Lower bound `γN/K` on every cluster size.
    SizeLb,
    /// Lower bound `γN/K` and upper bound `γ′N/K`.
    SizeLbUb,
    /// Lower bound on the entropy of the global size distribution.
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintConfig {
    pub mode: ConstraintMode,
    pub gamma: f64,
    pub gamma_upper: f64,
    pub alpha: f64,
    pub dual_lr: f64,
    /// Zero the duals at the start of every epoch.
    pub reset_duals: bool,
}

impl ConstraintConfig {
    pub fn greedy() -> Self {
        Self {
            mode: ConstraintMode::Greedy,
            gamma: 1.0,
            gamma_upper: 1.0,
            alpha: 0.0,
            dual_lr: 0.1,
            reset_duals: false,
        }
    }

    pub fn size_lb(gamma: f64, dual_lr: f64) -> Self {
        Self {
            mode: ConstraintMode::SizeLb,
            gamma,
            dual_lr,
            ..Self::greedy()
        }
    }

    pub fn size_lb_ub(gamma: f64, gamma_upper: f64, dual_lr: f64) -> Self {
        Self {
            mode: ConstraintMode::SizeLbUb,
            gamma,
            gamma_upper,
            dual_lr,
            ..Self::greedy()
        }
    }

    pub fn entropy(alpha: f64) -> Self {
        Self {
            mode: ConstraintMode::Entropy,
            alpha,
            ..Self::greedy()
        }
    }

    /// Default entropy weight for a data set of `n` instances: `6N/50`.
    pub fn default_alpha(n: usize) -> f64 {
        6.0 * n as f64 / 50.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SecuError::Config(m));
        match self.mode {
            ConstraintMode::Greedy => Ok(()),
            ConstraintMode::SizeLb | ConstraintMode::SizeLbUb => {
                if !(self.gamma > 0.0 && self.gamma <= 1.0) {
                    return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
                }
                if !(self.dual_lr > 0.0) {
                    return bad(format!(
                        "dual learning rate must be positive, got {}",
                        self.dual_lr
                    ));
                }
                if self.mode == ConstraintMode::SizeLbUb && !(self.gamma_upper >= 1.0) {
                    return bad(format!(
                        "gamma_upper must be at least 1, got {}",
                        self.gamma_upper
                    ));
                }
                Ok(())
            }
            ConstraintMode::Entropy => {
                if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
                    return bad(format!(
                        "alpha must be finite and non-negative, got {}",
                        self.alpha
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Which per-cluster quantity feeds the assignment cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// The raw inner product `xᵀw_j`.
    Logit,
    /// `log p_j`.
    LogProb,
}

/// Per-cluster assignment cost for one instance seen through one or two views:
/// `−score_j` for one view, `−(score¹_j + score²_j)/2` for two.
pub fn score(views: &[&Prediction], lambda: f64, kind: ScoreKind) -> Result<Vec<f64>> {
    let (first, rest) = views
        .split_first()
        .ok_or_else(|| SecuError::InvalidArgument("score needs at least one view".into()))?;
    if rest.len() > 1 {
        return Err(SecuError::InvalidArgument(
            "score accepts at most two views".into(),
        ));
    }
    let view_score = |p: &Prediction| -> Vec<f64> {
        match kind {
            ScoreKind::Logit => p.logits.iter().map(|l| l * lambda).collect(),
            ScoreKind::LogProb => (0..p.k()).map(|j| p.log_prob(j)).collect(),
        }
    };
    let s1 = view_score(first);
    Ok(match rest.first() {
        None => s1.into_iter().map(|s| -s).collect(),
        Some(second) => {
            if second.k() != first.k() {
                return shape_err("views disagree on cluster count");
            }
            let s2 = view_score(second);
            s1.iter().zip(&s2).map(|(a, b)| -(a + b) / 2.0).collect()
        }
    })
}

/// `H = −Σ_j (n_j/N) log(n_j/N)` with `0·log 0 = 0`.
pub fn entropy_of_counts(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let q = c as f64 / nf;
            h -= q * q.ln();
        }
    }
    h
}

#[inline]
fn n_log_n(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        let f = n as f64;
        f * f.ln()
    }
}

/// Change in entropy when one instance moves from cluster `from` to `to`,
/// with the total held fixed. Only the two affected terms are touched.
pub fn entropy_delta(counts: &[usize], total: usize, from: usize, to: usize) -> f64 {
    if from == to || total == 0 {
        return 0.0;
    }
    let (nc, nj) = (counts[from], counts[to]);
    let change = n_log_n(nc - 1) - n_log_n(nc) + n_log_n(nj + 1) - n_log_n(nj);
    -change / total as f64
}

/// Labels, cluster sizes and dual variables for one clustering head.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentState {
    labels: Vec<Option<usize>>,
    counts: Vec<usize>,
    assigned: usize,
    pub duals_lb: Vec<f64>,
    pub duals_ub: Vec<f64>,
}

impl AssignmentState {
    /// Fresh state with every instance unassigned.
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(SecuError::InvalidArgument(
                "need at least one cluster".into(),
            ));
        }
        Ok(Self {
            labels: vec![None; n],
            counts: vec![0; k],
            assigned: 0,
            duals_lb: vec![0.0; k],
            duals_ub: vec![0.0; k],
        })
    }

    /// State with every instance assigned.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut s = Self::new(labels.len(), k)?;
        for (i, &y) in labels.iter().enumerate() {
            s.set_label(i, y)?;
        }
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn assigned(&self) -> usize {
        self.assigned
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// Labels of all instances; errors if any is still unassigned.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| SecuError::Inconsistent(format!("instance {i} is unassigned")))
            })
            .collect()
    }

    pub fn entropy(&self) -> f64 {
        entropy_of_counts(&self.counts, self.assigned)
    }

    /// Moves instance `i` to cluster `j`, keeping the counts in sync.
    pub fn set_label(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.n() || j >= self.k() {
            return Err(SecuError::InvalidArgument(format!(
                "instance {i} / cluster {j} out of range ({} instances, {} clusters)",
                self.n(),
                self.k()
            )));
        }
        match self.labels[i] {
            Some(prev) => self.counts[prev] -= 1,
            None => self.assigned += 1,
        }
        self.counts[j] += 1;
        self.labels[i] = Some(j);
        Ok(())
    }

    /// Full recount; true when the cached counts agree with the labels.
    pub fn is_consistent(&self) -> bool {
        let mut counts = vec![0usize; self.k()];
        let mut assigned = 0;
        for l in self.labels.iter().flatten() {
            if *l >= self.k() {
                return false;
            }
            counts[*l] += 1;
            assigned += 1;
        }
        counts == self.counts && assigned == self.assigned
    }

    pub fn reset_duals(&mut self) {
        self.duals_lb.iter_mut().for_each(|r| *r = 0.0);
        self.duals_ub.iter_mut().for_each(|r| *r = 0.0);
    }

    fn check_costs(&self, costs: &[f64]) -> Result<()> {
        if costs.len() != self.k() {
            return shape_err(format!("{} costs for {} clusters", costs.len(), self.k()));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(SecuError::NonFinite("assignment costs"));
        }
        Ok(())
    }

    /// Greedy choice: cheapest cluster, lowest index on ties.
    pub fn assign_greedy(&self, costs: &[f64]) -> Result<usize> {
        self.check_costs(costs)?;
        Ok(argmin(costs))
    }

    /// `argmin_j cost_j − ρ_j (+ ρ′_j when upper bounds are active)`.
    pub fn assign_size(&self, costs: &[f64], upper: bool) -> Result<usize> {
        self.check_costs(costs)?;
        let adjusted: Vec<f64> = costs
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let mut v = c - self.duals_lb[j];
                if upper {
                    v += self.duals_ub[j];
                }
                v
            })
            .collect();
        Ok(argmin(&adjusted))
    }

    /// Projected dual ascent after a batch has been labelled:
    /// `ρ_j ← max(0, ρ_j − η(f_j − γ/K))`, `ρ′_j ← max(0, ρ′_j + η(f_j − γ′/K))`
    /// where `f_j` is the fraction of the batch assigned to `j`.
    pub fn dual_update(&mut self, batch_labels: &[usize], cfg: &ConstraintConfig) -> Result<()> {
        if batch_labels.is_empty() {
            return Err(SecuError::InvalidArgument(
                "dual update on an empty batch".into(),
            ));
        }
        let k = self.k();
        let mut hits = vec![0usize; k];
        for &y in batch_labels {
            if y >= k {
                return Err(SecuError::InvalidArgument(format!(
                    "label {y} out of range"
                )));
            }
            hits[y] += 1;
        }
        let b = batch_labels.len() as f64;
        let kf = k as f64;
        for j in 0..k {
            let frac = hits[j] as f64 / b;
            self.duals_lb[j] = (self.duals_lb[j] - cfg.dual_lr * (frac - cfg.gamma / kf)).max(0.0);
            if cfg.mode == ConstraintMode::SizeLbUb {
                self.duals_ub[j] =
                    (self.duals_ub[j] + cfg.dual_lr * (frac - cfg.gamma_upper / kf)).max(0.0);
            }
        }
        Ok(())
    }

    /// Sequential entropy-constrained assignment of instance `i`:
    /// `argmin_j cost_j − α·H(labels with i moved to j)`, applied immediately.
    ///
    /// Runs in O(K): relative to staying put, a move only touches the count
    /// terms of the previous and the candidate cluster. An unassigned instance
    /// grows the histogram by one; all candidates then share the new total and
    /// differ only in their own count term.
    pub fn assign_entropy(&mut self, costs: &[f64], i: usize, alpha: f64) -> Result<usize> {
        self.check_costs(costs)?;
        if i >= self.n() {
            return Err(SecuError::InvalidArgument(format!(
                "instance {i} out of range"
            )));
        }
        let prev = self.labels[i];
        if let Some(c) = prev {
            if self.counts[c] == 0 || self.assigned == 0 {
                return Err(SecuError::Inconsistent(format!(
                    "instance {i} is labelled {c} but that cluster is empty"
                )));
            }
        } else if self.assigned >= self.n() {
            return Err(SecuError::Inconsistent(format!(
                "instance {i} is unassigned but all {} instances are counted",
                self.n()
            )));
        }

        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for (j, &cost) in costs.iter().enumerate() {
            let gain = match prev {
                Some(c) => entropy_delta(&self.counts, self.assigned, c, j),
                None => {
                    let n = self.counts[j];
                    -(n_log_n(n + 1) - n_log_n(n)) / (self.assigned + 1) as f64
                }
            };
            let v = cost - alpha * gain;
            if v < best_val {
                best_val = v;
                best = j;
            }
        }
        self.set_label(i, best)?;
        Ok(best)
    }

    /// Writes `index,cluster` rows; unassigned instances are an error.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let labels = self.labels()?;
        write_assignments_csv(&labels, out)
    }
}

pub fn write_assignments_csv<W: Write>(labels: &[usize], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "cluster"])?;
    for (i, y) in labels.iter().enumerate() {
        w.write_record([i.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `Σ_i cost_{i,y_i} − α·H(counts)`; `costs` is N×K.
pub fn objective_entropy(costs: &Mat, state: &AssignmentState, alpha: f64) -> Result<f64> {
    if costs.rows() != state.n() || costs.cols() != state.k() {
        return shape_err(format!(
            "cost matrix is {}x{}, state has {} instances and {} clusters",
            costs.rows(),
            costs.cols(),
            state.n(),
            state.k()
        ));
    }
    let labels = state.labels()?;
    let total = compensated_sum(labels.iter().enumerate().map(|(i, &y)| costs.get(i, y)));
    Ok(total - alpha * entropy_of_counts(&state.counts, state.assigned))
}
