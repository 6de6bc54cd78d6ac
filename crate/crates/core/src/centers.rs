//! Cluster-center maintenance.
//!
//! Three update rules share one storage type:
//! - momentum SGD on the stable-loss gradient, followed by row renormalization;
//! - the hardness-weighted closed form, where each assigned instance pulls its
//!   center with weight `1 − p_{i,y_i}` (poorly classified instances weigh more);
//! - the uniform mean of assigned instances, as in plain spherical k-means.
//!
//! Every row stays unit-norm after every update. Clusters that receive no
//! weight keep their previous center.

use rand::Rng;

use crate::discrimination::{predict, Temperature};
use crate::error::{shape_err, Result, SecuError};
use crate::numerics::{axpy_unchecked, dot, norm, normalize_in_place, Mat, EPS_NORM};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenters {
    w: Mat,
    momentum: Mat,
}

/// Epoch-cumulative sums for the closed-form update.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterAccumulator {
    pub weighted_sum: Mat,
    pub weight: Vec<f64>,
}

/// How initial centers are picked from the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMethod {
    /// K distinct embeddings drawn uniformly.
    Random,
    /// First embedding at random, then repeatedly the embedding least similar
    /// to every center chosen so far.
    Farthest,
}

impl ClusterCenters {
    /// Normalizes every row of `w`.
    pub fn new(mut w: Mat) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return shape_err("centers need at least one row and one column");
        }
        for j in 0..w.rows() {
            normalize_in_place(w.row_mut(j))?;
        }
        let momentum = Mat::zeros(w.rows(), w.cols());
        Ok(Self { w, momentum })
    }

    /// Restores saved state verbatim; rows must already be unit-norm.
    pub(crate) fn from_parts(w: Mat, momentum: Mat) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return shape_err("centers need at least one row and one column");
        }
        if w.rows() != momentum.rows() || w.cols() != momentum.cols() {
            return shape_err("center momentum does not match centers");
        }
        if (0..w.rows()).any(|j| (norm(w.row(j)) - 1.0).abs() > 1e-9) {
            return Err(SecuError::InvalidArgument(
                "saved centers are not unit-norm".into(),
            ));
        }
        Ok(Self { w, momentum })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.w.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    #[inline]
    pub fn matrix(&self) -> &Mat {
        &self.w
    }

    pub fn momentum(&self) -> &Mat {
        &self.momentum
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.w.row(j)
    }

    /// Deep copy of the current centers, frozen for use as a prediction target.
    pub fn snapshot(&self) -> Mat {
        self.w.clone()
    }

    /// Momentum SGD step on every row, then row renormalization.
    pub fn sgd_update(&mut self, grad: &Mat, lr: f64, momentum: f64) -> Result<()> {
        if grad.rows() != self.k() || grad.cols() != self.dim() {
            return shape_err(format!(
                "center gradient is {}x{}, centers are {}x{}",
                grad.rows(),
                grad.cols(),
                self.k(),
                self.dim()
            ));
        }
        if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(SecuError::InvalidArgument(format!(
                "center sgd needs lr >= 0 and 0 <= momentum < 1 (got {lr}, {momentum})"
            )));
        }
        let mut next = self.w.clone();
        let mut buf = self.momentum.clone();
        for ((p, b), g) in next
            .as_mut_slice()
            .iter_mut()
            .zip(buf.as_mut_slice())
            .zip(grad.as_slice())
        {
            *b = momentum * *b + g;
            *p -= lr * *b;
        }
        for j in 0..self.k() {
            normalize_in_place(next.row_mut(j))?;
        }
        self.w = next;
        self.momentum = buf;
        Ok(())
    }

    /// `w_j ← Π(Σ(1−p)x / Σ(1−p))` for every cluster with weight above
    /// [`EPS_NORM`]; other clusters keep their center. The accumulator is
    /// left untouched so that it can keep growing over an epoch.
    pub fn closed_form_update(&mut self, acc: &CenterAccumulator) -> Result<()> {
        if acc.weighted_sum.rows() != self.k() || acc.weighted_sum.cols() != self.dim() {
            return shape_err("accumulator does not match centers");
        }
        for j in 0..self.k() {
            let wt = acc.weight[j];
            if wt <= EPS_NORM {
                continue;
            }
            let mut mean: Vec<f64> = acc.weighted_sum.row(j).iter().map(|v| v / wt).collect();
            if normalize_in_place(&mut mean).is_ok() {
                self.w.row_mut(j).copy_from_slice(&mean);
            }
        }
        Ok(())
    }

    /// `w_j ← Π(mean of the instances labelled j)`; empty clusters carry over.
    ///
    /// A cluster whose mean vanishes (e.g. two antipodal instances) is an error.
    pub fn coke_update<X: AsRef<[f64]>>(&mut self, xs: &[X], labels: &[usize]) -> Result<()> {
        if xs.len() != labels.len() {
            return shape_err(format!(
                "{} embeddings but {} labels",
                xs.len(),
                labels.len()
            ));
        }
        let mut sums = Mat::zeros(self.k(), self.dim());
        let mut counts = vec![0usize; self.k()];
        for (x, &y) in xs.iter().zip(labels) {
            let x = x.as_ref();
            if y >= self.k() || x.len() != self.dim() {
                return shape_err(format!(
                    "instance with label {y} and width {} does not fit",
                    x.len()
                ));
            }
            axpy_unchecked(1.0, x, sums.row_mut(y));
            counts[y] += 1;
        }
        let mut next = self.w.clone();
        for j in 0..self.k() {
            if counts[j] == 0 {
                continue;
            }
            let mut mean: Vec<f64> = sums.row(j).iter().map(|v| v / counts[j] as f64).collect();
            normalize_in_place(&mut mean)?;
            next.row_mut(j).copy_from_slice(&mean);
        }
        self.w = next;
        Ok(())
    }

    /// One projected gradient step on the distance form of the stable loss,
    /// with the prediction denominators frozen at the current centers:
    /// `∇_{w_j} = Σ_{i: y_i = j} (1 − p_{i,j})(w_j − x_i)/λ`.
    ///
    /// The step is preconditioned by `λ / Σ(1 − p)`, so with `lr = 1` it lands
    /// exactly on the closed-form solution for the current predictions.
    pub fn projected_gradient_step<X: AsRef<[f64]>>(
        &mut self,
        xs: &[X],
        labels: &[usize],
        lambda: Temperature,
        lr: f64,
    ) -> Result<()> {
        if xs.len() != labels.len() {
            return shape_err("embeddings and labels differ in length");
        }
        let inv = 1.0 / lambda.get();
        let mut grad = Mat::zeros(self.k(), self.dim());
        let mut weight = vec![0.0; self.k()];
        for (x, &y) in xs.iter().zip(labels) {
            let x = x.as_ref();
            let p = predict(x, &self.w, lambda)?;
            let h = 1.0 - p.probs[y];
            let row = grad.row_mut(y);
            for ((g, wv), xv) in row.iter_mut().zip(self.w.row(y)).zip(x) {
                *g += h * (wv - xv) * inv;
            }
            weight[y] += h;
        }
        for j in 0..self.k() {
            if weight[j] <= EPS_NORM {
                continue;
            }
            let step = lr * lambda.get() / weight[j];
            let mut next: Vec<f64> = self
                .w
                .row(j)
                .iter()
                .zip(grad.row(j))
                .map(|(w, g)| w - step * g)
                .collect();
            if normalize_in_place(&mut next).is_ok() {
                self.w.row_mut(j).copy_from_slice(&next);
            }
        }
        Ok(())
    }

    /// Picks `k` distinct embeddings as initial centers.
    pub fn seed<X: AsRef<[f64]>, R: Rng + ?Sized>(
        embeddings: &[X],
        k: usize,
        method: SeedMethod,
        rng: &mut R,
    ) -> Result<Self> {
        let n = embeddings.len();
        if k == 0 || k > n {
            return Err(SecuError::InvalidArgument(format!(
                "cannot seed {k} centers from {n} embeddings"
            )));
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        match method {
            SeedMethod::Random => {
                // partial Fisher–Yates
                let mut idx: Vec<usize> = (0..n).collect();
                for t in 0..k {
                    let j = rng.random_range(t..n);
                    idx.swap(t, j);
                    chosen.push(idx[t]);
                }
            }
            SeedMethod::Farthest => {
                chosen.push(rng.random_range(0..n));
                // best similarity of each embedding to any chosen center
                let mut best_sim: Vec<f64> = embeddings
                    .iter()
                    .map(|x| dot(x.as_ref(), embeddings[chosen[0]].as_ref()))
                    .collect();
                while chosen.len() < k {
                    let mut next = None;
                    let mut lowest = f64::INFINITY;
                    for (i, &s) in best_sim.iter().enumerate() {
                        if s < lowest && !chosen.contains(&i) {
                            lowest = s;
                            next = Some(i);
                        }
                    }
                    let next = next.expect("k <= n leaves a candidate");
                    chosen.push(next);
                    let c = embeddings[next].as_ref();
                    for (s, x) in best_sim.iter_mut().zip(embeddings) {
                        *s = s.max(dot(x.as_ref(), c));
                    }
                }
            }
        }
        let rows: Vec<&[f64]> = chosen.iter().map(|&i| embeddings[i].as_ref()).collect();
        Self::new(Mat::from_rows(&rows)?)
    }
}

impl CenterAccumulator {
    pub fn new(k: usize, d: usize) -> Self {
        Self {
            weighted_sum: Mat::zeros(k, d),
            weight: vec![0.0; k],
        }
    }

    pub fn clear(&mut self) {
        self.weighted_sum.fill(0.0);
        self.weight.iter_mut().for_each(|w| *w = 0.0);
    }

    /// Adds `(1 − p_i) x_i` to the row of each instance's cluster, where
    /// `p_i` is the predicted probability of its own label.
    pub fn accumulate<X: AsRef<[f64]>>(
        &mut self,
        xs: &[X],
        labels: &[usize],
        p_pos: &[f64],
    ) -> Result<()> {
        if xs.len() != labels.len() || xs.len() != p_pos.len() {
            return shape_err("accumulate needs equally many embeddings, labels and probabilities");
        }
        for ((x, &y), &p) in xs.iter().zip(labels).zip(p_pos) {
            let x = x.as_ref();
            if y >= self.weight.len() || x.len() != self.weighted_sum.cols() {
                return shape_err(format!(
                    "instance with label {y} and width {} does not fit",
                    x.len()
                ));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(SecuError::InvalidArgument(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
            let h = 1.0 - p;
            axpy_unchecked(h, x, self.weighted_sum.row_mut(y));
            self.weight[y] += h;
        }
        Ok(())
    }

    /// Unit weight per instance (the uniform-mean rule).
    pub fn accumulate_uniform<X: AsRef<[f64]>>(
        &mut self,
        xs: &[X],
        labels: &[usize],
    ) -> Result<()> {
        let zeros = vec![0.0; xs.len()];
        self.accumulate(xs, labels, &zeros)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normalize, rng};

    fn rand_centers(k: usize, d: usize, seed: u64) -> ClusterCenters {
        let mut r = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| rng::unit_vector(&mut r, d)).collect();
        ClusterCenters::new(Mat::from_rows(&rows).unwrap()).unwrap()
    }

    fn all_unit(c: &ClusterCenters) -> bool {
        (0..c.k()).all(|j| (norm(c.row(j)) - 1.0).abs() <= 1e-9)
    }

    #[test]
    fn sgd_zero_gradient_is_noop_and_rows_stay_unit() {
        let mut c = rand_centers(4, 3, 1);
        let before = c.snapshot();
        c.sgd_update(&Mat::zeros(4, 3), 1.0, 0.9).unwrap();
        assert!(c.matrix().max_abs_diff(&before) < 1e-15);

        let mut r = rng::seeded(2);
        let g = Mat::from_vec(
            4,
            3,
            (0..12).map(|_| rng::standard_normal(&mut r)).collect(),
        )
        .unwrap();
        c.sgd_update(&g, 0.7, 0.9).unwrap();
        assert!(all_unit(&c));
        assert!(c.sgd_update(&Mat::zeros(3, 3), 1.0, 0.0).is_err());
    }

    #[test]
    fn sgd_collapse_is_reported() {
        let mut c = ClusterCenters::new(Mat::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let g = Mat::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            c.sgd_update(&g, 1.0, 0.0),
            Err(SecuError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn sgd_step_can_land_on_closed_form() {
        // single cluster: with grad = (1/λ)Σ(p−1)x = −(W/λ)·m where m is the weighted mean and
        // W = Σ(1−p), the step w − lr·grad with lr = λ/W·s for large s points along m.
        let xs = vec![
            normalize(&[1.0, 0.2]).unwrap(),
            normalize(&[0.3, 1.0]).unwrap(),
        ];
        let labels = [0, 0];
        let lam = Temperature::new(0.5).unwrap();
        let mut sgd = ClusterCenters::new(Mat::from_rows(&[[0.0, 1.0]]).unwrap()).unwrap();
        let mut cf = sgd.clone();
        let g = crate::discrimination::grad_w_secu(&xs, &labels, sgd.matrix(), lam).unwrap();
        // with one cluster p = 1 and every gradient vanishes; both rules leave w alone
        sgd.sgd_update(&g, 10.0, 0.0).unwrap();
        let mut acc = CenterAccumulator::new(1, 2);
        acc.accumulate(&xs, &labels, &[1.0, 1.0]).unwrap();
        cf.closed_form_update(&acc).unwrap();
        assert_eq!(sgd, cf);

        // two clusters, instances all on cluster 0: choose lr so the raw step equals the fixed point
        let mut sgd =
            ClusterCenters::new(Mat::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]).unwrap()).unwrap();
        let mut cf = sgd.clone();
        let g = crate::discrimination::grad_w_secu(&xs, &labels, sgd.matrix(), lam).unwrap();
        let p: Vec<f64> = xs
            .iter()
            .map(|x| predict(x, sgd.matrix(), lam).unwrap().probs[0])
            .collect();
        let total: f64 = p.iter().map(|q| 1.0 - q).sum();
        // w − lr·g = w + (lr·W/λ)·m ; huge lr makes w negligible next to m
        let lr = 1e12 * lam.get() / total;
        sgd.sgd_update(&g, lr, 0.0).unwrap();
        let mut acc = CenterAccumulator::new(2, 2);
        acc.accumulate(&xs, &labels, &p).unwrap();
        cf.closed_form_update(&acc).unwrap();
        assert!(sgd.matrix().max_abs_diff(cf.matrix()) < 1e-10);
    }

    #[test]
    fn accumulate_weights_by_hardness() {
        let mut acc = CenterAccumulator::new(2, 2);
        acc.accumulate(&[[1.0, 0.0]], &[0], &[1.0]).unwrap();
        assert_eq!(acc.weight, vec![0.0, 0.0]);
        acc.accumulate(&[[0.0, 1.0]], &[1], &[0.0]).unwrap();
        assert_eq!(acc.weight[1], 1.0);
        assert_eq!(acc.weighted_sum.row(1), &[0.0, 1.0]);
        assert!(acc.accumulate(&[[0.0, 1.0]], &[1], &[1.5]).is_err());

        // direct summation
        let xs = [[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]];
        let mut acc = CenterAccumulator::new(2, 2);
        acc.accumulate(&xs, &[0, 0, 1], &[0.25, 0.5, 0.9]).unwrap();
        assert_eq!(acc.weight[0], 0.75 + 0.5);
        assert!((acc.weighted_sum.get(0, 0) - (0.75 * 0.6 + 0.5)).abs() < 1e-15);
        assert!((acc.weighted_sum.get(0, 1) - 0.75 * 0.8).abs() < 1e-15);
        assert!((acc.weight[1] - 0.1).abs() < 1e-15);
        assert!((acc.weighted_sum.get(1, 1) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn hardness_weighting_is_monotone() {
        // the easier instance contributes strictly less
        let mut acc = CenterAccumulator::new(1, 2);
        acc.accumulate(&[[1.0, 0.0], [0.0, 1.0]], &[0, 0], &[0.9, 0.2])
            .unwrap();
        assert!(acc.weighted_sum.get(0, 0) < acc.weighted_sum.get(0, 1));
    }

    #[test]
    fn closed_form_single_instance_and_empty_cluster() {
        let mut c = rand_centers(3, 3, 3);
        let before = c.snapshot();
        let x = normalize(&[1.0, -2.0, 0.5]).unwrap();
        let mut acc = CenterAccumulator::new(3, 3);
        acc.accumulate(std::slice::from_ref(&x), &[1], &[0.3]).unwrap();
        c.closed_form_update(&acc).unwrap();
        for (a, b) in c.row(1).iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(c.row(0), before.row(0));
        assert_eq!(c.row(2), before.row(2));
    }

    #[test]
    fn coke_single_instance_and_antipodal_pair() {
        let mut c = rand_centers(2, 2, 4);
        c.coke_update(&[[0.0, 1.0]], &[0]).unwrap();
        assert_eq!(c.row(0), &[0.0, 1.0]);
        assert!(matches!(
            c.coke_update(&[[1.0, 0.0], [-1.0, 0.0]], &[1, 1]),
            Err(SecuError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn coke_equals_closed_form_with_equal_probabilities() {
        let mut r = rng::seeded(5);
        let xs: Vec<Vec<f64>> = (0..20).map(|_| rng::unit_vector(&mut r, 4)).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let mut a = rand_centers(3, 4, 6);
        let mut b = a.clone();
        a.coke_update(&xs, &labels).unwrap();
        let mut acc = CenterAccumulator::new(3, 4);
        acc.accumulate(&xs, &labels, &[0.37; 20]).unwrap();
        b.closed_form_update(&acc).unwrap();
        assert!(a.matrix().max_abs_diff(b.matrix()) < 1e-12);
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut c = rand_centers(3, 2, 7);
        let snap = c.snapshot();
        let snap2 = snap.clone();
        assert_eq!(&snap, c.matrix());
        let g = Mat::from_vec(3, 2, vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.2]).unwrap();
        c.sgd_update(&g, 1.0, 0.0).unwrap();
        assert_ne!(&snap, c.matrix());
        assert_eq!(snap, snap2);
    }

    #[test]
    fn seeding_picks_distinct_embeddings() {
        let mut r = rng::seeded(8);
        let xs: Vec<Vec<f64>> = (0..30).map(|_| rng::unit_vector(&mut r, 5)).collect();
        for method in [SeedMethod::Random, SeedMethod::Farthest] {
            let c = ClusterCenters::seed(&xs, 6, method, &mut rng::seeded(9)).unwrap();
            assert_eq!(c.k(), 6);
            for j in 0..6 {
                assert!(xs
                    .iter()
                    .any(|x| x.iter().zip(c.row(j)).all(|(a, b)| (a - b).abs() < 1e-15)));
                for l in 0..j {
                    assert_ne!(c.row(j), c.row(l));
                }
            }
        }
        assert!(ClusterCenters::seed(&xs, 31, SeedMethod::Random, &mut r).is_err());
    }
}
