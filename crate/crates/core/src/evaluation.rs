//! Endpoint RMSE under three class policies, Monte Carlo NLL, per-class
//! error curves and sampled-class frequencies.
//!
//! All metrics use the time convention of [`crate::prediction`]: input time
//! `t` is the number of observed displacements and the scored point is
//! absolute point `t + dt`, so `t + dt` must not exceed the last point index.
//!
//! * `rmse1` — free rollouts (class sampled at every step).
//! * `rmse2` — rollouts forced to each item's majority first-step class
//!   among its free rollouts (ties to the lowest index).
//! * `rmse3` — rollouts forced to the true class.
//!
//! Errors are pooled as the root of the mean squared endpoint distance over
//! every (item, sample) pair. Models without a class head report `rmse2` and
//! `rmse3` equal to `rmse1`, flagged in the record note.
//!
//! Work is spread over items in fixed-size chunks; every rollout draws from
//! its own stream keyed by the item's position, so results do not depend on
//! the thread count.

use crate::autodiff::logsumexp;
use crate::baselines::{self, BaselineError, NnIndex};
use crate::data::{LabeledSequence, Point};
use crate::distribution::{self, ConstrainOptions, DistributionError};
use crate::network::{Model, ModelKind, RawRow};
use crate::prediction::{self, ClassPolicy, PredictionError, RolloutOptions, RolloutRequest, RolloutResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

pub const DEFAULT_SAMPLES: usize = 20;
/// Items per parallel work unit.
const CHUNK: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("t = {t} plus dt = {dt} overruns sequences whose last point index is {last}")]
    Horizon { t: usize, dt: usize, last: usize },
    #[error("input time t must be at least 1")]
    ZeroTime,
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("empty test set")]
    Empty,
    #[error("{metric} is undefined for {model} models: {why}")]
    Unsupported {
        metric: Metric,
        model: String,
        why: &'static str,
    },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse1,
    Rmse2,
    Rmse3,
    Nll,
    ClassFrequency,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Rmse1, Metric::Rmse2, Metric::Rmse3, Metric::Nll, Metric::ClassFrequency];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Rmse1 => "rmse1",
            Metric::Rmse2 => "rmse2",
            Metric::Rmse3 => "rmse3",
            Metric::Nll => "nll",
            Metric::ClassFrequency => "class_frequency",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| EvalError::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub horizons: Vec<usize>,
    pub times: Vec<usize>,
    pub seed: u64,
    /// Worker threads; `0` lets rayon decide.
    pub threads: usize,
    #[serde(skip)]
    pub constrain: ConstrainOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            horizons: (1..=10).collect(),
            times: (1..=8).map(|i| 5 * i).collect(),
            seed: 0,
            threads: 0,
            constrain: ConstrainOptions::default(),
        }
    }
}

/// Worker count from `CGP_THREADS`, `0` (rayon default) when unset or
/// unparsable.
pub fn threads_from_env() -> usize {
    std::env::var("CGP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// What to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a Model),
    NearestNeighbor(&'a NnIndex),
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(m) => m.config.kind.as_str(),
            Predictor::NearestNeighbor(_) => "1nn",
        }
    }

    fn has_classes(&self) -> bool {
        matches!(self, Predictor::Model(m) if m.config.kind == ModelKind::Cgp)
    }

    fn deterministic(&self) -> bool {
        match self {
            Predictor::Model(m) => !m.config.kind.is_probabilistic(),
            Predictor::NearestNeighbor(_) => true,
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Predictor::Model(m) => m.config.num_classes,
            Predictor::NearestNeighbor(_) => 0,
        }
    }
}

/// Rollouts of one test item from one input time.
#[derive(Debug, Clone)]
pub struct ItemRollouts {
    pub free: Vec<RolloutResult>,
    pub majority: Option<usize>,
    pub majority_forced: Vec<RolloutResult>,
    pub true_forced: Vec<RolloutResult>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub majority: bool,
    pub truth: bool,
    pub raw: bool,
}

/// Mode of the first-step classes, lowest index on ties.
pub fn majority_class(first_classes: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in first_classes {
        *counts.entry(c).or_default() += 1;
    }
    counts
        .into_iter()
        .fold(None, |best: Option<(usize, usize)>, (c, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
}

/// Root of the mean squared distance between paired points.
pub fn pooled_rmse(pairs: impl IntoIterator<Item = (Point, Point)>) -> f64 {
    let (sum, n) = pairs.into_iter().fold((0.0, 0usize), |(s, n), (p, q)| {
        (s + (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2), n + 1)
    });
    (sum / n as f64).sqrt()
}

fn check_domain(items: &[LabeledSequence], t: usize, dt: usize) -> Result<()> {
    let last = items.first().ok_or(EvalError::Empty)?.seq.len();
    if t == 0 {
        return Err(EvalError::ZeroTime);
    }
    if dt == 0 || t + dt > last {
        return Err(EvalError::Horizon { t, dt, last });
    }
    Ok(())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| EvalError::Threads(e.to_string()))
}

/// Rollouts of every item from input time `t` out to `horizon` steps.
/// Shorter horizons are prefixes of these: each rollout's draws do not
/// depend on how far it is continued.
pub fn collect_rollouts(
    predictor: Predictor<'_>,
    items: &[LabeledSequence],
    t: usize,
    horizon: usize,
    config: &EvalConfig,
    needs: Needs,
) -> Result<Vec<ItemRollouts>> {
    check_domain(items, t, horizon)?;
    if config.n_samples == 0 {
        return Err(EvalError::NoSamples);
    }
    let prefixes: Vec<_> = items.iter().map(|it| it.seq.prefix(t)).collect();
    let indexed: Vec<usize> = (0..items.len()).collect();
    let chunks: Vec<Result<Vec<ItemRollouts>>> = pool(config.threads)?.install(|| {
        indexed
            .par_chunks(CHUNK)
            .map(|chunk| collect_chunk(predictor, items, &prefixes, chunk, t, horizon, config, needs))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn collect_chunk(
    predictor: Predictor<'_>,
    items: &[LabeledSequence],
    prefixes: &[crate::data::RelativeSequence],
    chunk: &[usize],
    t: usize,
    horizon: usize,
    config: &EvalConfig,
    needs: Needs,
) -> Result<Vec<ItemRollouts>> {
    let model = match predictor {
        Predictor::Model(m) => m,
        Predictor::NearestNeighbor(index) => {
            return chunk
                .iter()
                .map(|&i| {
                    let abs = items[i].absolute();
                    let m = baselines::nn_predict(index, &abs[..=t], horizon)?;
                    let result = nn_result(&abs[t], m.points);
                    Ok(ItemRollouts {
                        free: vec![result],
                        majority: None,
                        majority_forced: Vec::new(),
                        true_forced: Vec::new(),
                    })
                })
                .collect();
        }
    };
    // Deterministic models give n identical rollouts; one stands for all.
    let n = if predictor.deterministic() { 1 } else { config.n_samples };
    let options = RolloutOptions {
        constrain: config.constrain,
        keep_raw: needs.raw,
        ..RolloutOptions::new(horizon)
    };
    let requests = |policy: &dyn Fn(usize) -> ClassPolicy| -> Vec<RolloutRequest<'_>> {
        chunk
            .iter()
            .map(|&i| RolloutRequest {
                observed: &prefixes[i],
                policy: policy(i),
                stream: i as u64,
            })
            .collect()
    };
    let free = prediction::rollout_requests(model, &requests(&|_| ClassPolicy::Sample), n, config.seed, options)?;
    let classes = predictor.has_classes();
    let majorities: Vec<Option<usize>> = free
        .iter()
        .map(|rs| if classes { majority_class(rs.iter().filter_map(|r| r.first_class())) } else { None })
        .collect();
    let plain = RolloutOptions {
        keep_raw: false,
        ..options
    };
    let majority_forced = if classes && needs.majority {
        let by_item: BTreeMap<usize, usize> = chunk.iter().zip(&majorities).map(|(&i, m)| (i, m.unwrap())).collect();
        prediction::rollout_requests(model, &requests(&|i| ClassPolicy::Force(by_item[&i])), n, config.seed, plain)?
    } else {
        vec![Vec::new(); chunk.len()]
    };
    let true_forced = if classes && needs.truth {
        prediction::rollout_requests(model, &requests(&|i| ClassPolicy::Force(items[i].label)), n, config.seed, plain)?
    } else {
        vec![Vec::new(); chunk.len()]
    };
    Ok(free
        .into_iter()
        .zip(majorities)
        .zip(majority_forced.into_iter().zip(true_forced))
        .map(|((free, majority), (majority_forced, true_forced))| ItemRollouts {
            free,
            majority,
            majority_forced,
            true_forced,
        })
        .collect())
}

fn nn_result(last: &Point, points: Vec<Point>) -> RolloutResult {
    let mut prev = *last;
    let deltas = points
        .iter()
        .map(|p| {
            let d = [p[0] - prev[0], p[1] - prev[1]];
            prev = *p;
            d
        })
        .collect();
    RolloutResult {
        classes: Vec::new(),
        deltas,
        horizon: points.len(),
        absolute: points,
        raw: Vec::new(),
    }
}

fn rmse_over(sets: &[&[RolloutResult]], truths: &[Point], dt: usize) -> f64 {
    pooled_rmse(
        sets.iter()
            .zip(truths)
            .flat_map(|(rs, &truth)| rs.iter().map(move |r| (r.absolute[dt - 1], truth))),
    )
}

fn truths(items: &[LabeledSequence], t: usize, dt: usize) -> Vec<Point> {
    items.iter().map(|it| it.absolute()[t + dt]).collect()
}

/// Which rollout set a metric is computed from.
fn rollout_set(metric: Metric, r: &ItemRollouts, has_classes: bool) -> &[RolloutResult] {
    match metric {
        Metric::Rmse2 if has_classes => &r.majority_forced,
        Metric::Rmse3 if has_classes => &r.true_forced,
        _ => &r.free,
    }
}

fn rmse_from(metric: Metric, rollouts: &[ItemRollouts], items: &[LabeledSequence], t: usize, dt: usize, has_classes: bool) -> f64 {
    let sets: Vec<&[RolloutResult]> = rollouts.iter().map(|r| rollout_set(metric, r, has_classes)).collect();
    rmse_over(&sets, &truths(items, t, dt), dt)
}

fn rmse_metric(metric: Metric, predictor: Predictor<'_>, items: &[LabeledSequence], t: usize, dt: usize, config: &EvalConfig) -> Result<f64> {
    let needs = Needs {
        majority: metric == Metric::Rmse2,
        truth: metric == Metric::Rmse3,
        raw: false,
    };
    let rollouts = collect_rollouts(predictor, items, t, dt, config, needs)?;
    Ok(rmse_from(metric, &rollouts, items, t, dt, predictor.has_classes()))
}

pub fn rmse1(predictor: Predictor<'_>, items: &[LabeledSequence], t: usize, dt: usize, config: &EvalConfig) -> Result<f64> {
    rmse_metric(Metric::Rmse1, predictor, items, t, dt, config)
}

pub fn rmse2(predictor: Predictor<'_>, items: &[LabeledSequence], t: usize, dt: usize, config: &EvalConfig) -> Result<f64> {
    rmse_metric(Metric::Rmse2, predictor, items, t, dt, config)
}

pub fn rmse3(predictor: Predictor<'_>, items: &[LabeledSequence], t: usize, dt: usize, config: &EvalConfig) -> Result<f64> {
    rmse_metric(Metric::Rmse3, predictor, items, t, dt, config)
}

/// Log predictive density of `x` under one step's raw outputs.
pub fn step_log_density(model: &Model, raw: &RawRow, x: Point, options: ConstrainOptions) -> Result<f64> {
    let config = model.config;
    match config.kind {
        ModelKind::Cgp => {
            let (gmm, probs) = distribution::constrain(&raw.coord, raw.class.as_deref().unwrap(), config.components, options)?;
            Ok(distribution::mixture_log_posterior(x, &gmm, &probs)?)
        }
        ModelKind::Mdn => {
            let (k, m) = config.mixture_shape().unwrap();
            let gmm = distribution::constrain_gmm(&raw.coord, k, m, options)?;
            Ok(distribution::class_gmm_log_pdf(x, &gmm, 0)?)
        }
        ModelKind::Dlstm => Err(EvalError::Unsupported {
            metric: Metric::Nll,
            model: "dlstm".into(),
            why: "a point predictor has no density",
        }),
    }
}

fn nll_from(model: &Model, rollouts: &[ItemRollouts], items: &[LabeledSequence], t: usize, dt: usize, options: ConstrainOptions) -> Result<f64> {
    let mut total = 0.0;
    for (r, item) in rollouts.iter().zip(items) {
        let target = item.seq.deltas[t + dt - 1];
        let logs = r
            .free
            .iter()
            .map(|roll| step_log_density(model, &roll.raw[dt - 1], target, options))
            .collect::<Result<Vec<_>>>()?;
        total -= logsumexp(logs.iter().copied()) - (logs.len() as f64).ln();
    }
    Ok(total / items.len() as f64)
}

fn nll_model<'a>(predictor: Predictor<'a>) -> Result<&'a Model> {
    match predictor {
        Predictor::Model(m) if m.config.kind.is_probabilistic() => Ok(m),
        other => Err(EvalError::Unsupported {
            metric: Metric::Nll,
            model: other.name().into(),
            why: "deterministic predictors have no predictive density",
        }),
    }
}

/// Mean negative log predictive density of the true displacement at
/// `t + dt`. For `dt > 1` the density is a Monte Carlo marginal: the
/// log-mean-exp over free rollouts of the density at their final step.
pub fn nll_eval(predictor: Predictor<'_>, items: &[LabeledSequence], t: usize, dt: usize, config: &EvalConfig) -> Result<f64> {
    let model = nll_model(predictor)?;
    let needs = Needs {
        raw: true,
        ..Needs::default()
    };
    let rollouts = collect_rollouts(predictor, items, t, dt, config, needs)?;
    nll_from(model, &rollouts, items, t, dt, config.constrain)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub metric: Metric,
    /// True class for per-class rows.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class: Option<usize>,
    /// Sampled class for frequency rows.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sampled_class: Option<usize>,
    pub t: usize,
    pub dt: usize,
    pub value: f64,
    /// Items (or, for frequencies, rollouts) behind the value.
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        Ok(Self {
            records,
            warnings: Vec::new(),
        })
    }

    /// Pooled values find by (metric, t, dt).
    pub fn pooled(&self, metric: Metric, t: usize, dt: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.class.is_none() && r.sampled_class.is_none() && r.t == t && r.dt == dt)
            .map(|r| r.value)
    }

    /// Pooled metrics as a table: one row per (t, dt), one column per metric.
    pub fn summary_table(&self) -> String {
        let mut metrics: Vec<Metric> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), BTreeMap<Metric, f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.class.is_none() && r.sampled_class.is_none()) {
            if !metrics.contains(&r.metric) {
                metrics.push(r.metric);
            }
            cells.entry((r.t, r.dt)).or_default().insert(r.metric, r.value);
        }
        metrics.sort();
        let model = self.records.first().map_or("-", |r| r.model.as_str());
        let mut s = format!("model: {model}\n{:>4} {:>4}", "t", "dt");
        for m in &metrics {
            write!(s, " {:>12}", m.as_str()).unwrap();
        }
        s.push('\n');
        for ((t, dt), row) in &cells {
            write!(s, "{t:>4} {dt:>4}").unwrap();
            for m in &metrics {
                match row.get(m) {
                    Some(v) => write!(s, " {v:>12.4}").unwrap(),
                    None => write!(s, " {:>12}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        for w in &self.warnings {
            writeln!(s, "warning: {w}").unwrap();
        }
        s
    }
}

/// Item positions grouped by true class, classes ascending.
fn classes_present(items: &[LabeledSequence]) -> Vec<(usize, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(it.label).or_default().push(i);
    }
    by_class.into_iter().collect()
}

fn missing_class_warnings(items: &[LabeledSequence], num_classes: usize) -> Vec<String> {
    let present: Vec<usize> = classes_present(items).into_iter().map(|(c, _)| c).collect();
    (0..num_classes)
        .filter(|c| !present.contains(c))
        .map(|c| format!("class {c} has no test items; its curves are omitted"))
        .collect()
}

/// `rmse1` restricted to each true class, for every `t` in `config.times`
/// and `dt` in `dts`. Cells with `t + dt` past the end are absent.
pub fn per_class_rmse_curves(predictor: Predictor<'_>, items: &[LabeledSequence], dts: &[usize], config: &EvalConfig) -> Result<MetricReport> {
    let config = EvalConfig {
        horizons: dts.to_vec(),
        ..config.clone()
    };
    evaluate(predictor, items, &[Metric::Rmse1], &config).map(|mut report| {
        report.records.retain(|r| r.class.is_some());
        report
    })
}

/// Counts of first-step sampled classes per (true class, t), from free
/// rollouts. The first step's class does not depend on the horizon; `dt`
/// only labels the rows.
pub fn class_frequency(predictor: Predictor<'_>, items: &[LabeledSequence], times: &[usize], dt: usize, config: &EvalConfig) -> Result<MetricReport> {
    if !predictor.has_classes() {
        return Err(EvalError::Unsupported {
            metric: Metric::ClassFrequency,
            model: predictor.name().into(),
            why: "the model samples no classes",
        });
    }
    let mut report = MetricReport {
        records: Vec::new(),
        warnings: missing_class_warnings(items, predictor.num_classes()),
    };
    for &t in times {
        check_domain(items, t, dt)?;
        let rollouts = collect_rollouts(predictor, items, t, 1, config, Needs::default())?;
        report.records.extend(frequency_records(predictor, items, &rollouts, t, dt));
    }
    Ok(report)
}

fn frequency_records(predictor: Predictor<'_>, items: &[LabeledSequence], rollouts: &[ItemRollouts], t: usize, dt: usize) -> Vec<MetricRecord> {
    let k = predictor.num_classes();
    let mut out = Vec::new();
    for (class, idx) in classes_present(items) {
        let mut counts = vec![0usize; k];
        for &i in &idx {
            for r in &rollouts[i].free {
                counts[r.first_class().expect("class head")] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for (sampled, &count) in counts.iter().enumerate() {
            out.push(MetricRecord {
                model: predictor.name().into(),
                metric: Metric::ClassFrequency,
                class: Some(class),
                sampled_class: Some(sampled),
                t,
                dt,
                value: count as f64,
                n: total,
                note: None,
            });
        }
    }
    out
}

/// Full sweep over `config.times` × `config.horizons`. For each `t` one set
/// of rollouts to the longest valid horizon serves every `dt`. Produces
/// pooled records for each requested metric, per-class `rmse1` records and,
/// when requested, class frequencies (labelled with the longest horizon).
/// Metrics the predictor cannot support are skipped with a warning.
pub fn evaluate(predictor: Predictor<'_>, items: &[LabeledSequence], metrics: &[Metric], config: &EvalConfig) -> Result<MetricReport> {
    let last = items.first().ok_or(EvalError::Empty)?.seq.len();
    let mut report = MetricReport::default();
    let mut wanted: Vec<Metric> = Vec::new();
    for &m in metrics {
        let unsupported = match m {
            Metric::Nll if nll_model(predictor).is_err() => Some("no predictive density"),
            Metric::ClassFrequency if !predictor.has_classes() => Some("no sampled classes"),
            _ => None,
        };
        match unsupported {
            Some(why) => report
                .warnings
                .push(format!("{m} skipped for {} model: {why}", predictor.name())),
            None if !wanted.contains(&m) => wanted.push(m),
            None => {}
        }
    }
    if predictor.num_classes() > 0 {
        report.warnings.extend(missing_class_warnings(items, predictor.num_classes()));
    }
    let has_classes = predictor.has_classes();
    let proxy_note = (!has_classes).then(|| "no class head; equals rmse1".to_string());
    let name = predictor.name().to_string();
    let needs = Needs {
        majority: wanted.contains(&Metric::Rmse2),
        truth: wanted.contains(&Metric::Rmse3),
        raw: wanted.contains(&Metric::Nll),
    };
    let max_dt = config.horizons.iter().copied().max().unwrap_or(0);
    for &t in &config.times {
        if t == 0 || t >= last {
            report.warnings.push(format!("t = {t} outside [1, {}); skipped", last));
            continue;
        }
        let horizon = max_dt.min(last - t);
        if horizon == 0 {
            continue;
        }
        let beyond: Vec<String> = config
            .horizons
            .iter()
            .filter(|&&dt| dt > horizon)
            .map(|dt| dt.to_string())
            .collect();
        if !beyond.is_empty() {
            report.warnings.push(format!(
                "t = {t}: dt {} past the last point; skipped",
                beyond.join(",")
            ));
        }
        let rollouts = collect_rollouts(predictor, items, t, horizon, config, needs)?;
        for &dt in config.horizons.iter().filter(|&&dt| dt >= 1 && dt <= horizon) {
            let record = |metric: Metric, value: f64, class: Option<usize>, n: usize, note: Option<String>| MetricRecord {
                model: name.clone(),
                metric,
                class,
                sampled_class: None,
                t,
                dt,
                value,
                n,
                note,
            };
            for &m in &wanted {
                match m {
                    Metric::Rmse1 | Metric::Rmse2 | Metric::Rmse3 => {
                        let value = rmse_from(m, &rollouts, items, t, dt, has_classes);
                        let note = if m == Metric::Rmse1 { None } else { proxy_note.clone() };
                        report.records.push(record(m, value, None, items.len(), note));
                    }
                    Metric::Nll => {
                        let model = nll_model(predictor)?;
                        let value = nll_from(model, &rollouts, items, t, dt, config.constrain)?;
                        let note = (dt > 1).then(|| "monte carlo marginal over free rollouts".to_string());
                        report.records.push(record(m, value, None, items.len(), note));
                    }
                    Metric::ClassFrequency => {}
                }
            }
            if wanted.contains(&Metric::Rmse1) {
                for (class, idx) in classes_present(items) {
                    let sets: Vec<&[RolloutResult]> = idx.iter().map(|&i| rollouts[i].free.as_slice()).collect();
                    let truth: Vec<Point> = idx.iter().map(|&i| items[i].absolute()[t + dt]).collect();
                    let value = rmse_over(&sets, &truth, dt);
                    report.records.push(record(Metric::Rmse1, value, Some(class), idx.len(), None));
                }
            }
        }
        if wanted.contains(&Metric::ClassFrequency) {
            report.records.extend(frequency_records(predictor, items, &rollouts, t, horizon));
        }
    }
    Ok(report)
}
