//! Temperature-scaled predictions against cluster centers, the stable
//! cluster-discrimination loss and its gradients.
//!
//! The stable loss has the same value as cross entropy. It differs only in
//! the center gradient: centers of negative clusters sit behind a
//! stop-gradient, so a center moves only in response to instances assigned to
//! it. [`grad_w_secu`] realizes that by construction and [`grad_w_ce`] keeps
//! the full cross-entropy gradient for comparison.

use crate::error::{shape_err, Result, SecuError};
use crate::numerics::{axpy_unchecked, dot, log_sum_exp, stable_softmax, Mat};

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Self(lambda))
        } else {
            Err(SecuError::InvalidArgument(format!(
                "temperature must be positive and finite, got {lambda}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `xᵀw_j / λ`.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// `log p_j`, computed from the logits rather than from `probs`.
    pub fn log_prob(&self, j: usize) -> f64 {
        self.logits[j] - log_sum_exp(&self.logits)
    }
}

/// Probability vector used as a training target.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SecuError::InvalidArgument(
                "soft label entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SecuError::InvalidArgument(format!(
                "soft label sums to {total}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn one_hot(k: usize, j: usize) -> Result<Self> {
        if j >= k {
            return Err(SecuError::InvalidArgument(format!(
                "label {j} out of range for {k} clusters"
            )));
        }
        let mut w = vec![0.0; k];
        w[j] = 1.0;
        Ok(Self(w))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

fn check_dims(x: &[f64], centers: &Mat) -> Result<()> {
    if centers.rows() == 0 {
        return Err(SecuError::InvalidArgument("no cluster centers".into()));
    }
    if x.len() != centers.cols() {
        return shape_err(format!(
            "embedding width {} does not match center width {}",
            x.len(),
            centers.cols()
        ));
    }
    Ok(())
}

/// `p_j = exp(xᵀw_j/λ) / Σ_k exp(xᵀw_k/λ)`.
pub fn predict(x: &[f64], centers: &Mat, lambda: Temperature) -> Result<Prediction> {
    check_dims(x, centers)?;
    let inv = 1.0 / lambda.get();
    let logits: Vec<f64> = centers.iter_rows().map(|w| dot(x, w) * inv).collect();
    let probs = stable_softmax(&logits)?;
    Ok(Prediction { logits, probs })
}

/// `−log p_y`. Same value as cross entropy; only the center gradient differs.
pub fn secu_loss(x: &[f64], y: usize, centers: &Mat, lambda: Temperature) -> Result<f64> {
    if y >= centers.rows() {
        return Err(SecuError::InvalidArgument(format!(
            "label {y} out of range for {} clusters",
            centers.rows()
        )));
    }
    let p = predict(x, centers, lambda)?;
    Ok(-p.log_prob(y))
}

/// `−Σ_j y_j log p_j`.
pub fn soft_ce_loss(x: &[f64], y: &SoftLabel, centers: &Mat, lambda: Temperature) -> Result<f64> {
    let p = predict(x, centers, lambda)?;
    soft_ce_from_prediction(&p, y)
}

pub fn soft_ce_from_prediction(p: &Prediction, y: &SoftLabel) -> Result<f64> {
    if y.weights().len() != p.k() {
        return shape_err(format!(
            "soft label over {} clusters, prediction over {}",
            y.weights().len(),
            p.k()
        ));
    }
    let lse = log_sum_exp(&p.logits);
    let mut loss = 0.0;
    for (w, l) in y.weights().iter().zip(&p.logits) {
        if *w != 0.0 {
            loss -= w * (l - lse);
        }
    }
    Ok(loss)
}

/// Gradient of [`soft_ce_loss`] with respect to the embedding:
/// `(1/λ) Σ_j (p_j − y_j) w_j`.
pub fn grad_x(x: &[f64], y: &SoftLabel, centers: &Mat, lambda: Temperature) -> Result<Vec<f64>> {
    let p = predict(x, centers, lambda)?;
    grad_x_from_prediction(&p, y, centers, lambda)
}

pub fn grad_x_from_prediction(
    p: &Prediction,
    y: &SoftLabel,
    centers: &Mat,
    lambda: Temperature,
) -> Result<Vec<f64>> {
    if y.weights().len() != p.k() || p.k() != centers.rows() {
        return shape_err("soft label, prediction and centers disagree on cluster count");
    }
    let inv = 1.0 / lambda.get();
    let mut g = vec![0.0; centers.cols()];
    for ((w, pj), yj) in centers.iter_rows().zip(&p.probs).zip(y.weights()) {
        let coef = (pj - yj) * inv;
        if coef != 0.0 {
            axpy_unchecked(coef, w, &mut g);
        }
    }
    Ok(g)
}

fn check_batch<X: AsRef<[f64]>>(xs: &[X], labels: &[usize], centers: &Mat) -> Result<()> {
    if xs.len() != labels.len() {
        return shape_err(format!(
            "{} embeddings but {} labels",
            xs.len(),
            labels.len()
        ));
    }
    for (x, &y) in xs.iter().zip(labels) {
        check_dims(x.as_ref(), centers)?;
        if y >= centers.rows() {
            return Err(SecuError::InvalidArgument(format!(
                "label {y} out of range for {} clusters",
                centers.rows()
            )));
        }
    }
    Ok(())
}

/// Center gradient of the summed stable loss over a batch:
/// row `j` is `(1/λ) Σ_{i: y_i = j} (p_{i,j} − 1) x_i`.
///
/// Rows of clusters without a positive instance in the batch are exactly zero.
pub fn grad_w_secu<X: AsRef<[f64]>>(
    xs: &[X],
    labels: &[usize],
    centers: &Mat,
    lambda: Temperature,
) -> Result<Mat> {
    check_batch(xs, labels, centers)?;
    let inv = 1.0 / lambda.get();
    let mut grad = Mat::zeros(centers.rows(), centers.cols());
    for (x, &y) in xs.iter().zip(labels) {
        let x = x.as_ref();
        let p = predict(x, centers, lambda)?;
        axpy_unchecked((p.probs[y] - 1.0) * inv, x, grad.row_mut(y));
    }
    Ok(grad)
}

/// Center gradient of the summed cross-entropy loss over a batch:
/// row `j` is `(1/λ) (Σ_{i: y_i = j} (p_{i,j} − 1) x_i + Σ_{k: y_k ≠ j} p_{k,j} x_k)`.
pub fn grad_w_ce<X: AsRef<[f64]>>(
    xs: &[X],
    labels: &[usize],
    centers: &Mat,
    lambda: Temperature,
) -> Result<Mat> {
    check_batch(xs, labels, centers)?;
    let inv = 1.0 / lambda.get();
    let mut grad = Mat::zeros(centers.rows(), centers.cols());
    for (x, &y) in xs.iter().zip(labels) {
        let x = x.as_ref();
        let p = predict(x, centers, lambda)?;
        for (j, pj) in p.probs.iter().enumerate() {
            let coef = if j == y { pj - 1.0 } else { *pj };
            if coef != 0.0 {
                axpy_unchecked(coef * inv, x, grad.row_mut(j));
            }
        }
    }
    Ok(grad)
}

/// Two-view soft target: `τ·onehot(y_prev) + (1 − τ)·p_other`.
pub fn soft_labels(y_prev: usize, p_other: &Prediction, tau: f64) -> Result<SoftLabel> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(SecuError::InvalidArgument(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    let k = p_other.k();
    if y_prev >= k {
        return Err(SecuError::InvalidArgument(format!(
            "label {y_prev} out of range for {k} clusters"
        )));
    }
    let mut w: Vec<f64> = p_other.probs.iter().map(|p| (1.0 - tau) * p).collect();
    w[y_prev] += tau;
    Ok(SoftLabel(w))
}
