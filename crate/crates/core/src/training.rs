//! Losses, the optimizer loop and validation-based early stopping.
//!
//! The CGP objective per sequence is the sum over steps of the coordinate
//! NLL under the labeled class's mixture plus the class cross-entropy. The
//! MDN drops the class term and uses one flat mixture; the D-LSTM uses the
//! mean squared error of its point prediction.

use crate::autodiff::{self, AutodiffError, GradCheckConfig, GradCheckReport, Graph, ParamSet, Var};
use crate::data::{LabeledSequence, Point};
use crate::distribution::{self, ConstrainOptions, DistributionError, RHO_LIMIT};
use crate::network::{self, BoundModel, Model, ModelKind, NetworkError, INPUT_DIM};
use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {term} loss in batch [{batch}] at step {step}")]
    NonFinite {
        term: &'static str,
        batch: String,
        step: usize,
    },
    #[error("batch sequences differ in length ({0} vs {1})")]
    RaggedBatch(usize, usize),
    #[error("sequence too short for a next-step target (length {0})")]
    TooShort(usize),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// `-log` density of `target` under class `label`'s mixture for one row of
/// raw coordinate-head outputs.
pub fn loss_coord(
    raw: &[f64],
    target: Point,
    label: usize,
    num_classes: usize,
    components: usize,
    options: ConstrainOptions,
) -> Result<f64> {
    let gmm = distribution::constrain_gmm(raw, num_classes, components, options)?;
    Ok(-distribution::class_gmm_log_pdf(target, &gmm, label)?)
}

/// Cross-entropy of raw class logits against the true class, via log-softmax.
pub fn loss_class(logits: &[f64], label: usize) -> f64 {
    autodiff::logsumexp(logits.iter().copied()) - logits[label]
}

/// Summed loss over a set of sequences, with per-term breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub coord: f64,
    pub class: f64,
    pub sequences: usize,
    /// Number of (sequence, step) terms.
    pub terms: usize,
}

impl LossReport {
    pub fn per_sequence(&self) -> f64 {
        self.total / self.sequences.max(1) as f64
    }

    pub fn coord_per_term(&self) -> f64 {
        self.coord / self.terms.max(1) as f64
    }

    pub fn class_per_term(&self) -> f64 {
        self.class / self.terms.max(1) as f64
    }

    fn merge(&mut self, other: &LossReport) {
        self.total += other.total;
        self.coord += other.coord;
        self.class += other.class;
        self.sequences += other.sequences;
        self.terms += other.terms;
    }
}

struct LossVars {
    total: Var,
    coord: Var,
    class: Option<Var>,
    /// Per-row log-likelihood (or squared error) used to locate non-finite terms.
    rows: Var,
    steps: usize,
}

/// Log density of each row's target under every class mixture, `[N, K]`.
fn mixture_log_density(
    g: &mut Graph<'_>,
    raw: Var,
    targets: &Array2<f64>,
    groups: usize,
    per_group: usize,
    options: ConstrainOptions,
) -> Result<Var> {
    let n = targets.nrows();
    let w = groups * per_group;
    let block = |g: &mut Graph<'_>, i: usize| g.slice(raw, 1, i * w, (i + 1) * w);
    let pi_raw = block(g, 0)?;
    let mu1 = block(g, 1)?;
    let mu2 = block(g, 2)?;
    let mut s1 = block(g, 3)?;
    let mut s2 = block(g, 4)?;
    let rho_raw = block(g, 5)?;
    if let Some(floor) = options.log_sigma_floor {
        s1 = g.clamp(s1, floor, f64::INFINITY);
        s2 = g.clamp(s2, floor, f64::INFINITY);
    }
    let grouped = g.reshape(pi_raw, &[n, groups, per_group])?;
    let log_pi = g.log_softmax(grouped);
    let log_pi = g.reshape(log_pi, &[n, w])?;
    let rho_t = g.tanh(rho_raw);
    let rho = g.clamp(rho_t, -RHO_LIMIT, RHO_LIMIT);

    let column = |d: usize| Array2::from_shape_fn((n, w), |(r, _)| targets[[r, d]]);
    let x1 = g.constant2(column(0));
    let x2 = g.constant2(column(1));
    let standardize = |g: &mut Graph<'_>, x: Var, mu: Var, s: Var| -> Result<Var> {
        let diff = g.sub(x, mu)?;
        let neg = g.scale(s, -1.0);
        let inv = g.exp(neg);
        Ok(g.mul(diff, inv)?)
    };
    let d1 = standardize(g, x1, mu1, s1)?;
    let d2 = standardize(g, x2, mu2, s2)?;
    let sq1 = g.square(d1);
    let sq2 = g.square(d2);
    let rd1 = g.mul(rho, d1)?;
    let cross = g.mul(rd1, d2)?;
    let cross2 = g.scale(cross, 2.0);
    let sq = g.add(sq1, sq2)?;
    let z = g.sub(sq, cross2)?;
    let rho_sq = g.square(rho);
    let neg_rho_sq = g.scale(rho_sq, -1.0);
    let one_minus = g.offset(neg_rho_sq, 1.0);
    let quad = g.div(z, one_minus)?;
    let log_one_minus = g.log(one_minus);
    // log N = -log 2pi - s1 - s2 - 0.5 log(1 - rho^2) - 0.5 z / (1 - rho^2)
    let log_scale = g.add(s1, s2)?;
    let half_log = g.scale(log_one_minus, 0.5);
    let half_quad = g.scale(quad, 0.5);
    let a = g.add(log_scale, half_log)?;
    let b = g.add(a, half_quad)?;
    let neg = g.scale(b, -1.0);
    let log_n = g.offset(neg, -(2.0 * PI).ln());
    let joint = g.add(log_pi, log_n)?;
    let joint = g.reshape(joint, &[n, groups, per_group])?;
    Ok(g.logsumexp(joint)?)
}

fn one_hot_rows(labels: &[usize], steps: usize, k: usize) -> Array2<f64> {
    let b = labels.len();
    Array2::from_shape_fn((steps * b, k), |(r, c)| if labels[r % b] == c { 1.0 } else { 0.0 })
}

/// Builds the summed loss of `batch` (all sequences the same length) in `g`.
fn build_loss(
    g: &mut Graph<'_>,
    bound: &BoundModel,
    batch: &[&LabeledSequence],
    options: ConstrainOptions,
) -> Result<LossVars> {
    let len = batch.first().ok_or(TrainError::Empty("batch"))?.seq.len();
    if let Some(other) = batch.iter().find(|s| s.seq.len() != len) {
        return Err(TrainError::RaggedBatch(len, other.seq.len()));
    }
    if len < 2 {
        return Err(TrainError::TooShort(len));
    }
    let steps = len - 1;
    let b = batch.len();
    let seqs: Vec<_> = batch.iter().map(|s| &s.seq).collect();
    let inputs = network::batch_inputs(&seqs, steps);
    let mut state = bound.zero_state(g, b);
    let mut features = Vec::with_capacity(steps);
    for x in inputs {
        let xv = g.constant2(x);
        let (f, next) = bound.step(g, xv, &state)?;
        features.push(f);
        state = next;
    }
    let stacked = g.concat(&features, 0)?;
    let heads = bound.heads(g, stacked)?;
    // Row t * B + i targets delta t + 1 of sequence i.
    let targets = Array2::from_shape_fn((steps * b, INPUT_DIM), |(r, d)| seqs[r % b].deltas[r / b + 1][d]);
    let config = bound.config;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    match config.kind {
        ModelKind::Cgp => {
            let (k, m) = (config.num_classes, config.components);
            let dens = mixture_log_density(g, heads.coord, &targets, k, m, options)?;
            let mask = g.constant2(one_hot_rows(&labels, steps, k));
            let picked = g.mul(dens, mask)?;
            let ll = g.sum(picked);
            let coord = g.scale(ll, -1.0);
            let log_p = g.log_softmax(heads.class.expect("cgp has a class head"));
            let mask = g.constant2(one_hot_rows(&labels, steps, k));
            let picked_p = g.mul(log_p, mask)?;
            let lp = g.sum(picked_p);
            let class = g.scale(lp, -1.0);
            let total = g.add(coord, class)?;
            Ok(LossVars {
                total,
                coord,
                class: Some(class),
                rows: picked,
                steps,
            })
        }
        ModelKind::Mdn => {
            let dens = mixture_log_density(g, heads.coord, &targets, 1, config.total_components(), options)?;
            let ll = g.sum(dens);
            let coord = g.scale(ll, -1.0);
            Ok(LossVars {
                total: coord,
                coord,
                class: None,
                rows: dens,
                steps,
            })
        }
        ModelKind::Dlstm => {
            let t = g.constant2(targets);
            let diff = g.sub(heads.coord, t)?;
            let sq = g.square(diff);
            let sum = g.sum(sq);
            // Mean over steps and coordinates, summed over sequences.
            let coord = g.scale(sum, 1.0 / (steps * INPUT_DIM) as f64);
            Ok(LossVars {
                total: coord,
                coord,
                class: None,
                rows: sq,
                steps,
            })
        }
    }
}

fn report(g: &Graph<'_>, vars: &LossVars, batch: &[&LabeledSequence]) -> Result<LossReport> {
    let rep = LossReport {
        total: g.scalar(vars.total),
        coord: g.scalar(vars.coord),
        class: vars.class.map_or(0.0, |c| g.scalar(c)),
        sequences: batch.len(),
        terms: batch.len() * vars.steps,
    };
    if !rep.total.is_finite() {
        let term = if !rep.coord.is_finite() { "coordinate" } else { "class" };
        let b = batch.len();
        let rows = g.value2(vars.rows);
        let bad_row = rows
            .outer_iter()
            .position(|r| r.iter().any(|x| !x.is_finite()))
            .unwrap_or(0);
        return Err(TrainError::NonFinite {
            term,
            batch: batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(","),
            step: bad_row / b.max(1),
        });
    }
    Ok(rep)
}

/// Loss of one batch without gradients.
pub fn batch_loss(model: &Model, batch: &[&LabeledSequence], options: ConstrainOptions) -> Result<LossReport> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let vars = build_loss(&mut g, &bound, batch, options)?;
    report(&g, &vars, batch)
}

/// Loss of one batch and its gradient for every parameter.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&LabeledSequence],
    options: ConstrainOptions,
) -> Result<(LossReport, Vec<ArrayD<f64>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let vars = build_loss(&mut g, &bound, batch, options)?;
    let rep = report(&g, &vars, batch)?;
    g.backward(vars.total)?;
    Ok((rep, model.params.collect_grads(&g, &bound.vars)))
}

/// Summed loss over `items`, evaluated in chunks of `chunk` sequences.
pub fn total_loss(model: &Model, items: &[LabeledSequence], chunk: usize, options: ConstrainOptions) -> Result<LossReport> {
    let mut out = LossReport::default();
    let refs: Vec<&LabeledSequence> = items.iter().collect();
    for batch in refs.chunks(chunk.max(1)) {
        out.merge(&batch_loss(model, batch, options)?);
    }
    Ok(out)
}

/// Compares backpropagated gradients of the batch loss with central
/// differences.
pub fn gradient_check(
    model: &Model,
    batch: &[&LabeledSequence],
    options: ConstrainOptions,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch, options)?;
    autodiff::gradient_check(
        &model.params,
        &grads,
        |params: &ParamSet| {
            let probe = Model {
                config: model.config,
                params: params.clone(),
            };
            Ok(batch_loss(&probe, batch, options)?.total)
        },
        config,
    )
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [ArrayD<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 500,
            patience: 10,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.patience > 0
            && self.clip_norm > 0.0;
        if !ok {
            return Err(TrainError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strict improvement of
/// the validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            since_improvement: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            return StopDecision::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss per training sequence.
    pub train_loss: f64,
    /// Mean loss per validation sequence.
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub improved: bool,
    /// Excluded from the deterministic epoch log.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Mini-batch training with per-epoch validation, returning the
/// best-validation weights. `on_epoch` sees every record and, on
/// improvement, the new best model.
pub fn train(
    model: Model,
    train_set: &[LabeledSequence],
    val_set: &[LabeledSequence],
    config: &TrainConfig,
    options: ConstrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&Model>),
) -> Result<TrainOutcome> {
    if val_set.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let chunk = config.batch_size;
    train_with_validator(
        model,
        train_set,
        config,
        options,
        |m, _| Ok(total_loss(m, val_set, chunk, options)?.per_sequence()),
        &mut on_epoch,
    )
}

/// [`train`] with the validation loss supplied by `validate`.
pub fn train_with_validator(
    mut model: Model,
    train_set: &[LabeledSequence],
    config: &TrainConfig,
    options: ConstrainOptions,
    mut validate: impl FnMut(&Model, usize) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochRecord, Option<&Model>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    let mut optimizer = Adam::new(&model.params, config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossReport::default();
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSequence> = idx.iter().map(|&i| &train_set[i]).collect();
            let (rep, mut grads) = loss_and_grads(&model, &batch, options)?;
            clip_global_norm(&mut grads, config.clip_norm);
            optimizer.step(&mut model.params, &grads);
            epoch_loss.merge(&rep);
        }
        let val_loss = validate(&model, epoch)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                term: "validation",
                batch: format!("epoch {epoch}"),
                step: 0,
            });
        }
        let decision = stopper.observe(epoch, val_loss);
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss.per_sequence(),
            val_loss,
            best_val_loss: stopper.best_loss,
            improved: decision == StopDecision::Improved,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if decision == StopDecision::Improved {
            best = model.clone();
            on_epoch(&record, Some(&best));
        } else {
            on_epoch(&record, None);
        }
        history.push(record);
        if decision == StopDecision::Stop {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        stopped_early,
    })
}
