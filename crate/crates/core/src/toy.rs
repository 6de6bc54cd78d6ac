//! Two-cluster toy in the plane comparing uniform-mean centers with
//! hardness-weighted centers.
//!
//! Two Gaussians with ten points each are drawn in 2-d and projected onto the
//! unit circle (the encoder is the identity followed by normalization). From
//! the same two seed points, both center rules alternate greedy labelling and
//! center updates until the labels stop changing. A seed search looks for a
//! draw where the uniform mean misclassifies some point while the hardness
//! weighting labels every point correctly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::centers::{CenterAccumulator, ClusterCenters};
use crate::data_io::gen_gaussian_mixture;
use crate::discrimination::{predict, Temperature};
use crate::error::{Result, SecuError};
use crate::metrics::accuracy;
use crate::numerics::{argmax, dot, normalize, rng, Mat};

pub const POINTS_PER_CLUSTER: usize = 10;
const MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Distance between the two Gaussian means (unit variance).
    pub separation: f64,
    pub lambda: f64,
    /// Seeds tried, starting from the requested one.
    pub max_tries: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            separation: 2.0,
            lambda: 0.1,
            max_tries: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOutcome {
    pub seed: u64,
    /// Points on the unit circle.
    pub points: Vec<[f64; 2]>,
    pub truth: Vec<usize>,
    pub kmeans_labels: Vec<usize>,
    pub secu_labels: Vec<usize>,
    pub kmeans_centers: Vec<[f64; 2]>,
    pub secu_centers: Vec<[f64; 2]>,
    pub kmeans_acc: f64,
    pub secu_acc: f64,
}

fn greedy_labels(points: &[Vec<f64>], w: &Mat) -> Vec<usize> {
    points
        .iter()
        .map(|x| argmax(&w.iter_rows().map(|c| dot(x, c)).collect::<Vec<_>>()))
        .collect()
}

fn rows2(w: &Mat) -> Vec<[f64; 2]> {
    w.iter_rows().map(|r| [r[0], r[1]]).collect()
}

/// Alternates greedy labels and center updates until labels are stable and
/// centers stop moving. `hardness` selects the weighted rule.
fn iterate(
    points: &[Vec<f64>],
    init: &Mat,
    lambda: Temperature,
    hardness: bool,
) -> Result<(Vec<usize>, Mat)> {
    let mut centers = ClusterCenters::new(init.clone())?;
    let mut labels = greedy_labels(points, centers.matrix());
    for _ in 0..MAX_ITERS {
        let mut acc = CenterAccumulator::new(centers.k(), centers.dim());
        if hardness {
            let p: Vec<f64> = points
                .iter()
                .zip(&labels)
                .map(|(x, &y)| predict(x, centers.matrix(), lambda).map(|p| p.probs[y]))
                .collect::<Result<_>>()?;
            acc.accumulate(points, &labels, &p)?;
        } else {
            acc.accumulate_uniform(points, &labels)?;
        }
        let before = centers.snapshot();
        centers.closed_form_update(&acc)?;
        let next = greedy_labels(points, centers.matrix());
        let moved = centers.matrix().max_abs_diff(&before);
        if next == labels && moved <= 1e-12 {
            return Ok((labels, centers.snapshot()));
        }
        labels = next;
    }
    Ok((labels, centers.snapshot()))
}

/// Runs both rules on the draw for one seed.
pub fn run_seed(seed: u64, cfg: &ToyConfig) -> Result<ToyOutcome> {
    let lambda = Temperature::new(cfg.lambda)?;
    let ds = gen_gaussian_mixture(
        2,
        POINTS_PER_CLUSTER,
        2,
        cfg.separation,
        &mut rng::stream(seed, rng::STREAM_DATA),
    )?;
    let points: Vec<Vec<f64>> = ds
        .features
        .iter_rows()
        .map(normalize)
        .collect::<Result<_>>()?;
    let truth = ds.labels.clone().unwrap_or_default();
    // one seed point from each half of a random order, kept distinct
    let order = rng::permutation(&mut rng::stream(seed, rng::STREAM_INIT_ORDER), points.len());
    let first = order[0];
    let second = *order[1..]
        .iter()
        .find(|&&i| points[i] != points[first])
        .ok_or_else(|| SecuError::Infeasible("all toy points coincide".into()))?;
    let init = Mat::from_rows(&[points[first].clone(), points[second].clone()])?;
    let (kmeans_labels, kmeans_w) = iterate(&points, &init, lambda, false)?;
    let (secu_labels, secu_w) = iterate(&points, &init, lambda, true)?;
    Ok(ToyOutcome {
        seed,
        points: points.iter().map(|p| [p[0], p[1]]).collect(),
        kmeans_acc: accuracy(&kmeans_labels, &truth)?,
        secu_acc: accuracy(&secu_labels, &truth)?,
        truth,
        kmeans_labels,
        secu_labels,
        kmeans_centers: rows2(&kmeans_w),
        secu_centers: rows2(&secu_w),
    })
}

/// First seed at or after `start` where the uniform mean misclassifies a
/// point and the hardness-weighted rule does not.
pub fn search(start: u64, cfg: &ToyConfig) -> Result<ToyOutcome> {
    for seed in start..start.saturating_add(cfg.max_tries) {
        let out = run_seed(seed, cfg)?;
        if out.kmeans_acc < 1.0 && out.secu_acc == 1.0 {
            return Ok(out);
        }
    }
    Err(SecuError::Infeasible(format!(
        "no separating toy configuration in seeds {start}..{}",
        start.saturating_add(cfg.max_tries)
    )))
}

impl ToyOutcome {
    /// Columns `kind,method,index,x,y,label,acc`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "method", "index", "x", "y", "label", "acc"])?;
        let mut row =
            |kind: &str, method: &str, i: usize, p: &[f64; 2], label: usize, acc: Option<f64>| {
                w.write_record([
                    kind.to_string(),
                    method.to_string(),
                    i.to_string(),
                    format!("{:?}", p[0]),
                    format!("{:?}", p[1]),
                    label.to_string(),
                    acc.map(|a| format!("{a:?}")).unwrap_or_default(),
                ])
            };
        for (method, labels, acc) in [
            ("truth", &self.truth, None),
            ("kmeans", &self.kmeans_labels, Some(self.kmeans_acc)),
            ("secu", &self.secu_labels, Some(self.secu_acc)),
        ] {
            for (i, (p, &l)) in self.points.iter().zip(labels).enumerate() {
                row("point", method, i, p, l, acc)?;
            }
        }
        for (method, centers, acc) in [
            ("kmeans", &self.kmeans_centers, self.kmeans_acc),
            ("secu", &self.secu_centers, self.secu_acc),
        ] {
            for (j, c) in centers.iter().enumerate() {
                row("center", method, j, c, j, Some(acc))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
