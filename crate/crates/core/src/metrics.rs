//! Clustering evaluation: matched accuracy, NMI, ARI and size extrema.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SecuError};

/// Counts of (predicted cluster, true class) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    table: Vec<u64>,
    k_pred: usize,
    k_true: usize,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub max_count: usize,
    pub min_count: usize,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.is_empty() {
            return Err(SecuError::InvalidArgument(
                "metrics need at least one instance".into(),
            ));
        }
        if pred.len() != truth.len() {
            return Err(SecuError::Shape(format!(
                "{} predictions but {} ground-truth labels",
                pred.len(),
                truth.len()
            )));
        }
        let k_pred = pred.iter().max().map_or(0, |m| m + 1);
        let k_true = truth.iter().max().map_or(0, |m| m + 1);
        let mut table = vec![0u64; k_pred * k_true];
        let mut row_sums = vec![0u64; k_pred];
        let mut col_sums = vec![0u64; k_true];
        for (&p, &t) in pred.iter().zip(truth) {
            table[p * k_true + t] += 1;
            row_sums[p] += 1;
            col_sums[t] += 1;
        }
        Ok(Self {
            table,
            k_pred,
            k_true,
            row_sums,
            col_sums,
            n: pred.len() as u64,
        })
    }

    #[inline]
    pub fn get(&self, p: usize, t: usize) -> u64 {
        self.table[p * self.k_true + t]
    }

    pub fn k_pred(&self) -> usize {
        self.k_pred
    }

    pub fn k_true(&self) -> usize {
        self.k_true
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn n(&self) -> u64 {
        self.n
    }
}

/// Minimum-cost perfect matching on a square `n × n` cost matrix
/// (shortest augmenting paths with potentials, O(n³)).
/// Returns `col_of_row`.
pub fn min_cost_assignment(cost: &[i64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    const INF: i64 = i64::MAX / 4;
    // 1-based with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Best cluster→class matching; padded to square with zero counts.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(pred, truth)?;
    let n = ct.k_pred.max(ct.k_true);
    let mut cost = vec![0i64; n * n];
    for p in 0..ct.k_pred {
        for t in 0..ct.k_true {
            cost[p * n + t] = -(ct.get(p, t) as i64);
        }
    }
    let matching = min_cost_assignment(&cost, n);
    let matched: u64 = matching
        .iter()
        .enumerate()
        .filter(|&(p, &t)| p < ct.k_pred && t < ct.k_true)
        .map(|(p, &t)| ct.get(p, t))
        .sum();
    Ok(matched as f64 / ct.n as f64)
}

fn entropy_of(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum()
}

/// Mutual information over the geometric mean of the two entropies
/// (natural log); zero whenever either partition is constant.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(pred, truth)?;
    let n = ct.n as f64;
    let hp = entropy_of(&ct.row_sums, n);
    let ht = entropy_of(&ct.col_sums, n);
    if hp <= 0.0 || ht <= 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for p in 0..ct.k_pred {
        for t in 0..ct.k_true {
            let c = ct.get(p, t);
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (c * n / (ct.row_sums[p] as f64 * ct.col_sums[t] as f64)).ln();
        }
    }
    Ok((mi / (hp * ht).sqrt()).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> f64 {
    let c = c as f64;
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index. When the denominator vanishes the result is 1 for
/// identical partitions and 0 otherwise.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(pred, truth)?;
    let index: f64 = ct.table.iter().map(|&c| pairs(c)).sum();
    let a: f64 = ct.row_sums.iter().map(|&c| pairs(c)).sum();
    let b: f64 = ct.col_sums.iter().map(|&c| pairs(c)).sum();
    let total = pairs(ct.n);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let denom = 0.5 * (a + b) - expected;
    if denom == 0.0 {
        return Ok(if same_partition(pred, truth) {
            1.0
        } else {
            0.0
        });
    }
    Ok((index - expected) / denom)
}

/// Whether two labelings induce the same partition (up to renaming).
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = std::collections::HashMap::new();
    let mut bwd = std::collections::HashMap::new();
    a.iter()
        .zip(b)
        .all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x)
}

/// `(max, min)` cluster size over all `k` clusters, counting empty ones.
pub fn size_stats(pred: &[usize], k: usize) -> Result<(usize, usize)> {
    let mut counts = vec![0usize; k];
    for &p in pred {
        if p >= k {
            return Err(SecuError::InvalidArgument(format!(
                "cluster {p} out of range for K = {k}"
            )));
        }
        counts[p] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    Ok((max, min))
}

/// All metrics for one head.
pub fn report(pred: &[usize], truth: &[usize], k: usize) -> Result<MetricsReport> {
    let (max_count, min_count) = size_stats(pred, k)?;
    Ok(MetricsReport {
        acc: accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        ari: ari(pred, truth)?,
        max_count,
        min_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_and_permuted() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let perm = [2, 2, 0, 0, 1, 1, 1];
        assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
        assert_eq!(accuracy(&perm, &truth).unwrap(), 1.0);
        assert!((nmi(&perm, &truth).unwrap() - 1.0).abs() <= 1e-12);
        assert!((ari(&perm, &truth).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn constant_prediction() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        assert_eq!(nmi(&pred, &truth).unwrap(), 0.0);
        assert_eq!(ari(&pred, &truth).unwrap(), 0.0);
        assert_eq!(accuracy(&pred, &truth).unwrap(), 0.5);
        // both trivial
        assert_eq!(ari(&pred, &pred).unwrap(), 1.0);
        assert_eq!(ari(&[0], &[3]).unwrap(), 1.0);
    }

    #[test]
    fn rectangular_accuracy() {
        // 3 predicted clusters, 2 classes
        let pred = [0, 0, 1, 1, 2, 2];
        let truth = [0, 0, 1, 1, 1, 1];
        assert!((accuracy(&pred, &truth).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((accuracy(&truth, &pred).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_direct_formula() {
        let pred = [0, 0, 1, 1, 1];
        let truth = [0, 1, 1, 1, 0];
        // p(0,0)=1/5 p(0,1)=1/5 p(1,0)=1/5 p(1,1)=2/5; marginals (2/5,3/5) and (2/5,3/5)
        let (a, b) = (0.4f64, 0.6f64);
        let mi = 0.2 * (0.2 / (a * a)).ln()
            + 0.2 * (0.2 / (a * b)).ln()
            + 0.2 * (0.2 / (b * a)).ln()
            + 0.4 * (0.4 / (b * b)).ln();
        let h = -(a * a.ln() + b * b.ln());
        assert!((nmi(&pred, &truth).unwrap() - mi / h).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(nmi(&[0, 1], &[0]).is_err());
        assert!(size_stats(&[0, 3], 2).is_err());
    }

    #[test]
    fn size_extrema() {
        assert_eq!(size_stats(&[0, 1, 2, 0, 1, 2], 3).unwrap(), (2, 2));
        assert_eq!(size_stats(&[1, 1, 1], 3).unwrap(), (3, 0));
    }

    #[test]
    fn assignment_small() {
        let cost = [4, 1, 3, 2, 0, 5, 3, 2, 2];
        let m = min_cost_assignment(&cost, 3);
        let total: i64 = m.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            pairs in prop::collection::vec((0usize..4, 0usize..5), 1..40)
        ) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let n1 = nmi(&a, &b).unwrap();
            let n2 = nmi(&b, &a).unwrap();
            prop_assert!((n1 - n2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&n1));
            let r1 = ari(&a, &b).unwrap();
            prop_assert!((r1 - ari(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(r1 <= 1.0 + 1e-12);
            let acc = accuracy(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!((acc - accuracy(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
