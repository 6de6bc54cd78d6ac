//! Training loop.
//!
//! Each epoch starts by freezing a copy of every head's centers. Within the
//! epoch, each mini-batch goes through:
//! 1. two augmented views, embedded by the encoder;
//! 2. predictions of both views against the frozen centers, soft targets that
//!    mix the previous hard label with the other view's prediction, and the
//!    encoder gradient of the averaged soft cross entropy;
//! 3. predictions of the detached embeddings against the live centers,
//!    constrained hard assignment, and a center update on the stable loss;
//! 4. one encoder SGD step.
//!
//! Heads share the encoder and nothing else. Head 0 is the one evaluated.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{score, AssignmentState, ConstraintConfig, ConstraintMode, ScoreKind};
use crate::centers::{CenterAccumulator, ClusterCenters, SeedMethod};
use crate::data_io::{augment, AugmentConfig, Dataset};
use crate::discrimination::{
    grad_w_secu, grad_x_from_prediction, predict, soft_ce_from_prediction, soft_labels, Prediction,
    Temperature,
};
use crate::encoder::{EncoderMlp, LrSchedule, ParamGrads};
use crate::error::{Result, SecuError};
use crate::metrics::{self, MetricsReport};
use crate::numerics::{argmax, compensated_sum, dot, rng, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Momentum SGD on the stable-loss center gradient.
    Sgd,
    /// Hardness-weighted closed form over the epoch so far.
    ClosedForm,
    /// Uniform mean over the epoch so far.
    Coke,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the previous hard label in the soft target.
    pub tau: f64,
    /// Temperature of the representation loss.
    pub lambda: f64,
    /// Temperature for center updates and assignment; defaults to `lambda`.
    pub lambda_centers: Option<f64>,
    pub constraint: ConstraintConfig,
    pub center_mode: CenterMode,
    /// Peak encoder learning rate.
    pub lr_encoder: f64,
    /// Capped at `epochs`.
    pub warmup_epochs: usize,
    pub encoder_momentum: f64,
    pub lr_centers: f64,
    pub center_momentum: f64,
    /// Cluster count per head; head 0 is evaluated.
    pub heads: Vec<usize>,
    /// Heads that are initialized but never trained.
    pub disabled_heads: Vec<usize>,
    pub score: ScoreKind,
    pub augment: AugmentConfig,
    pub seed_method: SeedMethod,
    /// Hidden widths of the encoder; input width comes from the data.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            seed: 0,
            tau: 0.2,
            lambda: 0.05,
            lambda_centers: None,
            constraint: ConstraintConfig::size_lb(0.9, 0.1),
            center_mode: CenterMode::Sgd,
            lr_encoder: 0.2,
            warmup_epochs: 10,
            encoder_momentum: 0.9,
            lr_centers: 1.2,
            center_momentum: 0.9,
            heads: vec![10],
            disabled_heads: Vec::new(),
            score: ScoreKind::Logit,
            augment: AugmentConfig::default(),
            seed_method: SeedMethod::Random,
            hidden: vec![64, 64],
            embedding_dim: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SecuError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", self.tau));
        }
        Temperature::new(self.lambda)?;
        if let Some(l) = self.lambda_centers {
            Temperature::new(l)?;
        }
        if self.heads.is_empty() {
            return bad("at least one head is required".into());
        }
        if self.heads.contains(&0) {
            return bad("every head needs at least one cluster".into());
        }
        if let Some(&h) = self.disabled_heads.iter().find(|&&h| h >= self.heads.len()) {
            return bad(format!("disabled head {h} does not exist"));
        }
        if !(self.lr_encoder > 0.0 && self.lr_encoder.is_finite()) {
            return bad(format!(
                "lr_encoder must be positive, got {}",
                self.lr_encoder
            ));
        }
        if !(self.lr_centers >= 0.0 && self.lr_centers.is_finite()) {
            return bad(format!(
                "lr_centers must be non-negative, got {}",
                self.lr_centers
            ));
        }
        for (name, m) in [
            ("encoder_momentum", self.encoder_momentum),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("{name} must lie in [0, 1), got {m}"));
            }
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        self.constraint.validate()?;
        self.augment.validate()
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(
            self.lr_encoder,
            self.warmup_epochs.min(self.epochs),
            self.epochs,
        )
    }

    fn lambda_c(&self) -> f64 {
        self.lambda_centers.unwrap_or(self.lambda)
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.embedding_dim);
        dims
    }
}

/// One clustering task on top of the shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub centers: ClusterCenters,
    pub state: AssignmentState,
    pub enabled: bool,
    accumulator: CenterAccumulator,
}

impl Head {
    pub fn new(centers: ClusterCenters, state: AssignmentState, enabled: bool) -> Result<Self> {
        if centers.k() != state.k() {
            return Err(SecuError::Shape(format!(
                "head has {} centers but {} assignment clusters",
                centers.k(),
                state.k()
            )));
        }
        let accumulator = CenterAccumulator::new(centers.k(), centers.dim());
        Ok(Self {
            centers,
            state,
            enabled,
            accumulator,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.k()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderMlp,
    pub heads: Vec<Head>,
}

/// Per-epoch summary; metric fields are `None` for unlabelled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_repr: f64,
    pub loss_ctr: f64,
    pub objective: Option<f64>,
    pub count_min: usize,
    pub count_max: usize,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
}

fn embed_all(encoder: &EncoderMlp, features: &Mat) -> Result<Vec<Vec<f64>>> {
    features.iter_rows().map(|x| encoder.embed(x)).collect()
}

fn head_costs(
    views: &[&[f64]],
    centers: &Mat,
    lambda: Temperature,
    kind: ScoreKind,
) -> Result<(Vec<f64>, Vec<Prediction>)> {
    let preds: Vec<Prediction> = views
        .iter()
        .map(|x| predict(x, centers, lambda))
        .collect::<Result<_>>()?;
    let refs: Vec<&Prediction> = preds.iter().collect();
    let costs = score(&refs, lambda.get(), kind)?;
    Ok((costs, preds))
}

/// Labels one batch of instances under the head's constraint.
/// `costs[t]` belongs to instance `batch[t]`.
fn assign_batch(
    state: &mut AssignmentState,
    batch: &[usize],
    costs: &[Vec<f64>],
    cfg: &ConstraintConfig,
) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(batch.len());
    match cfg.mode {
        ConstraintMode::Greedy => {
            for (&i, c) in batch.iter().zip(costs) {
                let j = state.assign_greedy(c)?;
                state.set_label(i, j)?;
                labels.push(j);
            }
        }
        ConstraintMode::SizeLb | ConstraintMode::SizeLbUb => {
            let upper = cfg.mode == ConstraintMode::SizeLbUb;
            // every instance sees the duals from before this batch
            for (&i, c) in batch.iter().zip(costs) {
                let j = state.assign_size(c, upper)?;
                labels.push(j);
                state.set_label(i, j)?;
            }
            state.dual_update(&labels, cfg)?;
        }
        ConstraintMode::Entropy => {
            for (&i, c) in batch.iter().zip(costs) {
                labels.push(state.assign_entropy(c, i, cfg.alpha)?);
            }
        }
    }
    Ok(labels)
}

/// Builds the encoder, seeds every head's centers from clean embeddings,
/// labels every instance once under the constraint, and sets each center to
/// the mean of its instances. The encoder is not updated.
pub fn init_pass(dataset: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let n = dataset.n();
    if n == 0 {
        return Err(SecuError::InvalidArgument("empty dataset".into()));
    }
    let mut enc_rng = rng::stream(cfg.seed, rng::STREAM_ENCODER_INIT);
    let encoder = EncoderMlp::new(&cfg.encoder_dims(dataset.dim()), &mut enc_rng)?;
    let emb = embed_all(&encoder, &dataset.features)?;
    let lambda = Temperature::new(cfg.lambda_c())?;

    let mut heads = Vec::with_capacity(cfg.heads.len());
    for (h, &k) in cfg.heads.iter().enumerate() {
        let mut head_rng = rng::head(cfg.seed, h);
        let centers = ClusterCenters::seed(&emb, k, cfg.seed_method, &mut head_rng)?;
        let mut state = AssignmentState::new(n, k)?;
        let order = rng::permutation(&mut rng::stream(cfg.seed, rng::STREAM_INIT_ORDER), n);
        for batch in order.chunks(cfg.batch_size) {
            let costs: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| head_costs(&[&emb[i]], centers.matrix(), lambda, cfg.score).map(|c| c.0))
                .collect::<Result<_>>()?;
            assign_batch(&mut state, batch, &costs, &cfg.constraint)?;
        }
        let mut centers = centers;
        centers.coke_update(&emb, &state.labels()?)?;
        heads.push(Head::new(centers, state, !cfg.disabled_heads.contains(&h))?);
    }
    Ok(Model { encoder, heads })
}

/// One pass over the data in a seeded random order.
pub fn train_epoch(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLog> {
    let n = dataset.n();
    if dataset.dim() != model.encoder.input_dim() {
        return Err(SecuError::Shape(format!(
            "data has {} features, encoder expects {}",
            dataset.dim(),
            model.encoder.input_dim()
        )));
    }
    let lam_repr = Temperature::new(cfg.lambda)?;
    let lam_ctr = Temperature::new(cfg.lambda_c())?;
    let lr = cfg.schedule()?.lr_at(epoch)?;
    let active: Vec<usize> = (0..model.heads.len())
        .filter(|&h| model.heads[h].enabled)
        .collect();
    let head_scale = if active.is_empty() {
        0.0
    } else {
        1.0 / active.len() as f64
    };

    if cfg.constraint.reset_duals {
        for h in &active {
            model.heads[*h].state.reset_duals();
        }
    }
    let snapshots: Vec<Mat> = model.heads.iter().map(|h| h.centers.snapshot()).collect();
    for h in &active {
        model.heads[*h].accumulator.clear();
    }

    let order = rng::permutation(&mut rng::epoch_order(cfg.seed, epoch), n);
    let mut aug_rng = rng::augment(cfg.seed, epoch);
    let mut loss_repr = Vec::with_capacity(n);
    let mut loss_ctr = Vec::with_capacity(n);

    for batch in order.chunks(cfg.batch_size) {
        let b = batch.len() as f64;
        let mut views: [Vec<Vec<f64>>; 2] = [
            Vec::with_capacity(batch.len()),
            Vec::with_capacity(batch.len()),
        ];
        let mut tapes = [
            Vec::with_capacity(batch.len()),
            Vec::with_capacity(batch.len()),
        ];
        for &i in batch {
            let x = dataset.features.row(i);
            for v in 0..2 {
                let xa = augment(x, &cfg.augment, &mut aug_rng);
                let (e, tape) = model.encoder.forward(&xa)?;
                views[v].push(e);
                tapes[v].push(tape);
            }
        }

        // representation gradient against the frozen centers
        let mut grads = ParamGrads::zeros_for(&model.encoder);
        let enc_scale = head_scale / (2.0 * b);
        for &h in &active {
            let w_prev = &snapshots[h];
            let state = &model.heads[h].state;
            for (t, &i) in batch.iter().enumerate() {
                let y_prev = state
                    .label(i)
                    .ok_or_else(|| SecuError::Inconsistent(format!("instance {i} has no label")))?;
                let p1 = predict(&views[0][t], w_prev, lam_repr)?;
                let p2 = predict(&views[1][t], w_prev, lam_repr)?;
                let y1 = soft_labels(y_prev, &p2, cfg.tau)?;
                let y2 = soft_labels(y_prev, &p1, cfg.tau)?;
                let l =
                    0.5 * (soft_ce_from_prediction(&p1, &y1)? + soft_ce_from_prediction(&p2, &y2)?);
                loss_repr.push(l * head_scale);
                let g1 = grad_x_from_prediction(&p1, &y1, w_prev, lam_repr)?;
                let g2 = grad_x_from_prediction(&p2, &y2, w_prev, lam_repr)?;
                model
                    .encoder
                    .backward_into(&tapes[0][t], &g1, enc_scale, &mut grads)?;
                model
                    .encoder
                    .backward_into(&tapes[1][t], &g2, enc_scale, &mut grads)?;
            }
        }

        // clustering path on detached embeddings and live centers
        for &h in &active {
            let head = &mut model.heads[h];
            let mut costs = Vec::with_capacity(batch.len());
            let mut preds = Vec::with_capacity(batch.len());
            for t in 0..batch.len() {
                let (c, p) = head_costs(
                    &[&views[0][t], &views[1][t]],
                    head.centers.matrix(),
                    lam_ctr,
                    cfg.score,
                )?;
                costs.push(c);
                preds.push(p);
            }
            let labels = assign_batch(&mut head.state, batch, &costs, &cfg.constraint)?;
            for (p, &y) in preds.iter().zip(&labels) {
                loss_ctr.push(-0.5 * (p[0].log_prob(y) + p[1].log_prob(y)) * head_scale);
            }
            match cfg.center_mode {
                CenterMode::Sgd => {
                    let mut g = grad_w_secu(&views[0], &labels, head.centers.matrix(), lam_ctr)?;
                    g.add_scaled(
                        1.0,
                        &grad_w_secu(&views[1], &labels, head.centers.matrix(), lam_ctr)?,
                    )?;
                    g.scale(1.0 / (2.0 * b));
                    head.centers
                        .sgd_update(&g, cfg.lr_centers, cfg.center_momentum)?;
                }
                CenterMode::ClosedForm => {
                    for v in 0..2 {
                        let p_pos: Vec<f64> = preds
                            .iter()
                            .zip(&labels)
                            .map(|(p, &y)| p[v].probs[y])
                            .collect();
                        head.accumulator.accumulate(&views[v], &labels, &p_pos)?;
                    }
                    head.centers.closed_form_update(&head.accumulator)?;
                }
                CenterMode::Coke => {
                    for v in 0..2 {
                        head.accumulator.accumulate_uniform(&views[v], &labels)?;
                    }
                    head.centers.closed_form_update(&head.accumulator)?;
                }
            }
        }

        model.encoder.sgd_step(&grads, lr, cfg.encoder_momentum)?;
    }

    let loss_repr = compensated_sum(loss_repr) / n as f64;
    let loss_ctr = compensated_sum(loss_ctr) / n as f64;
    if !loss_repr.is_finite() || !loss_ctr.is_finite() {
        return Err(SecuError::NonFinite("training loss"));
    }
    epoch_log(model, dataset, cfg, epoch, loss_repr, loss_ctr)
}

fn epoch_log(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    loss_repr: f64,
    loss_ctr: f64,
) -> Result<EpochLog> {
    let head = &model.heads[0];
    let counts = head.state.counts();
    let count_min = counts.iter().copied().min().unwrap_or(0);
    let count_max = counts.iter().copied().max().unwrap_or(0);
    let emb = embed_all(&model.encoder, &dataset.features)?;
    let objective = if cfg.constraint.mode == ConstraintMode::Entropy {
        let labels = head.state.labels()?;
        let cost = compensated_sum(
            emb.iter()
                .zip(&labels)
                .map(|(x, &y)| -dot(x, head.centers.row(y))),
        );
        let val = cost - cfg.constraint.alpha * head.state.entropy();
        Some(val)
    } else {
        None
    };
    let (acc, nmi, ari) = match &dataset.labels {
        Some(truth) => {
            let pred = predict_embedded(&emb, head.centers.matrix());
            (
                Some(metrics::accuracy(&pred, truth)?),
                Some(metrics::nmi(&pred, truth)?),
                Some(metrics::ari(&pred, truth)?),
            )
        }
        None => (None, None, None),
    };
    Ok(EpochLog {
        epoch,
        loss_repr,
        loss_ctr,
        objective,
        count_min,
        count_max,
        acc,
        nmi,
        ari,
    })
}

fn predict_embedded(emb: &[Vec<f64>], centers: &Mat) -> Vec<usize> {
    emb.iter()
        .map(|x| {
            let s: Vec<f64> = centers.iter_rows().map(|w| dot(x, w)).collect();
            argmax(&s)
        })
        .collect()
}

/// Unconstrained predictions of one head: `argmax_j xᵀw_j`.
pub fn predict_labels(model: &Model, head: usize, features: &Mat) -> Result<Vec<usize>> {
    let h = model.heads.get(head).ok_or_else(|| {
        SecuError::InvalidArgument(format!(
            "head {head} out of range ({} heads)",
            model.heads.len()
        ))
    })?;
    if features.cols() != model.encoder.input_dim() {
        return Err(SecuError::Shape(format!(
            "data has {} features, encoder expects {}",
            features.cols(),
            model.encoder.input_dim()
        )));
    }
    let emb = embed_all(&model.encoder, features)?;
    Ok(predict_embedded(&emb, h.centers.matrix()))
}

/// Accuracy, NMI, ARI and size extrema of one head's predictions.
pub fn evaluate(model: &Model, head: usize, dataset: &Dataset) -> Result<MetricsReport> {
    let truth = dataset
        .labels
        .as_ref()
        .ok_or_else(|| SecuError::InvalidArgument("evaluation needs ground-truth labels".into()))?;
    let pred = predict_labels(model, head, &dataset.features)?;
    metrics::report(&pred, truth, model.heads[head].k())
}

/// One JSON object per line, fields in declaration order, `null` for absent metrics.
pub fn write_logs_jsonl<W: std::io::Write>(logs: &[EpochLog], mut out: W) -> Result<()> {
    for log in logs {
        let line =
            serde_json::to_string(log).map_err(|e| SecuError::InvalidArgument(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Initialization pass followed by `cfg.epochs` training epochs.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    fit_with(dataset, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<F: FnMut(&EpochLog)>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model, Vec<EpochLog>)> {
    let mut model = init_pass(dataset, cfg)?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let log = train_epoch(&mut model, dataset, cfg, epoch)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// A random model for baselines: fresh encoder and centers, no training.
pub fn random_model<R: Rng + ?Sized>(
    input_dim: usize,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut R,
) -> Result<Model> {
    let encoder = EncoderMlp::new(&cfg.encoder_dims(input_dim), rng)?;
    let heads = cfg
        .heads
        .iter()
        .map(|&k| {
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| rng::unit_vector(rng, cfg.embedding_dim))
                .collect();
            Head::new(
                ClusterCenters::new(Mat::from_rows(&rows)?)?,
                AssignmentState::new(n, k)?,
                true,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Model { encoder, heads })
}
