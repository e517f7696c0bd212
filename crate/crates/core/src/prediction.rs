//! Autoregressive rollouts: observe a prefix, then repeatedly sample a class,
//! sample a displacement from that class's mixture and feed it back in.
//!
//! Time indexing: a prefix of `t` observed displacements covers absolute
//! points `0..=t`; a rollout of horizon `dt` predicts displacements
//! `t..t + dt` (0-based) and so ends on absolute point `t + dt`.
//!
//! Every rollout row owns a ChaCha8 stream derived from `(seed, stream,
//! sample)`, so results do not depend on how rows are batched or spread over
//! threads. Each predicted step consumes the same number of draws whatever
//! the class policy, which keeps free and class-forced rollouts on the same
//! random numbers.

use crate::data::{self, DataError, Point, RelativeSequence};
use crate::distribution::{self, ConstrainOptions, DistributionError};
use crate::network::{self, HiddenState, Model, ModelKind, NetworkError, RawRow, INPUT_DIM};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum PredictionError {
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("rollout needs at least one observed displacement")]
    EmptyPrefix,
    #[error("prefixes in one batch differ in length ({0} vs {1})")]
    RaggedPrefix(usize, usize),
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("class {class} outside [0, {num_classes})")]
    Class { class: usize, num_classes: usize },
    #[error("{0} models have no class head to force")]
    NoClassHead(ModelKind),
    #[error("rollout file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, PredictionError>;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Sampled class per predicted step; empty for models without a class
    /// head.
    pub classes: Vec<usize>,
    pub deltas: Vec<Point>,
    /// Predicted absolute points, chained from the last observed point.
    pub absolute: Vec<Point>,
    pub horizon: usize,
    /// Raw head outputs each displacement was drawn from, when requested.
    pub raw: Vec<RawRow>,
}

impl RolloutResult {
    pub fn endpoint(&self) -> Point {
        *self.absolute.last().expect("horizon >= 1")
    }

    pub fn first_class(&self) -> Option<usize> {
        self.classes.first().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassPolicy {
    /// Draw a class from the class head at every step.
    Sample,
    /// Use this class at every step. The class draw still happens and is
    /// discarded.
    Force(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordMode {
    Sample,
    /// π-weighted component mean; no randomness.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub horizon: usize,
    pub coord: CoordMode,
    pub constrain: ConstrainOptions,
    /// Keep the raw head outputs of every predicted step.
    pub keep_raw: bool,
}

impl RolloutOptions {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            coord: CoordMode::Sample,
            constrain: ConstrainOptions::default(),
            keep_raw: false,
        }
    }
}

/// One observed prefix to roll out from.
#[derive(Debug, Clone, Copy)]
pub struct RolloutRequest<'a> {
    pub observed: &'a RelativeSequence,
    pub policy: ClassPolicy,
    /// Identifies the item's random streams.
    pub stream: u64,
}

/// Random stream of rollout `sample` of item `stream`.
pub fn row_rng(seed: u64, stream: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | sample as u64);
    rng
}

/// Single rollout driven by a caller-supplied generator.
pub fn rollout<R: Rng>(model: &Model, observed: &RelativeSequence, horizon: usize, rng: &mut R) -> Result<RolloutResult> {
    rollout_with(model, observed, ClassPolicy::Sample, RolloutOptions::new(horizon), rng)
}

pub fn rollout_with<R: Rng>(
    model: &Model,
    observed: &RelativeSequence,
    policy: ClassPolicy,
    options: RolloutOptions,
    rng: &mut R,
) -> Result<RolloutResult> {
    let mut rows = [rng];
    let mut out = run(model, &[observed], &[policy], 1, &mut rows, options)?;
    Ok(out.pop().unwrap())
}

/// `n_samples` independent rollouts from one prefix.
pub fn rollout_batch(
    model: &Model,
    observed: &RelativeSequence,
    horizon: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<RolloutResult>> {
    let request = RolloutRequest {
        observed,
        policy: ClassPolicy::Sample,
        stream: 0,
    };
    let mut out = rollout_requests(model, &[request], n_samples, seed, RolloutOptions::new(horizon))?;
    Ok(out.pop().unwrap())
}

/// `n_samples` rollouts for every request, evaluated as one batch.
/// `result[i][s]` is sample `s` of request `i`.
pub fn rollout_requests(
    model: &Model,
    requests: &[RolloutRequest<'_>],
    n_samples: usize,
    seed: u64,
    options: RolloutOptions,
) -> Result<Vec<Vec<RolloutResult>>> {
    if n_samples == 0 {
        return Err(PredictionError::NoSamples);
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let mut rngs: Vec<ChaCha8Rng> = requests
        .iter()
        .flat_map(|r| (0..n_samples).map(move |s| row_rng(seed, r.stream, s)))
        .collect();
    let mut refs: Vec<&mut ChaCha8Rng> = rngs.iter_mut().collect();
    let observed: Vec<&RelativeSequence> = requests.iter().map(|r| r.observed).collect();
    let policies: Vec<ClassPolicy> = requests.iter().map(|r| r.policy).collect();
    let flat = run(model, &observed, &policies, n_samples, &mut refs, options)?;
    let mut it = flat.into_iter();
    Ok((0..requests.len())
        .map(|_| it.by_ref().take(n_samples).collect())
        .collect())
}

/// Deterministic class-conditional trajectory: class fixed to `class`, each
/// displacement the π-weighted mean of that class's components.
pub fn classwise_mean_rollout(model: &Model, observed: &RelativeSequence, horizon: usize, class: usize) -> Result<RolloutResult> {
    let options = RolloutOptions {
        coord: CoordMode::Mean,
        ..RolloutOptions::new(horizon)
    };
    // Mean mode draws nothing; the generator is a placeholder.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rollout_with(model, observed, ClassPolicy::Force(class), options, &mut rng)
}

/// Batched engine. Row `i * n_samples + s` is sample `s` of prefix `i` and
/// draws from `rngs[i * n_samples + s]`. Each prefix is fed once and its
/// state replicated.
fn run<R: Rng>(
    model: &Model,
    observed: &[&RelativeSequence],
    policies: &[ClassPolicy],
    n_samples: usize,
    rngs: &mut [&mut R],
    options: RolloutOptions,
) -> Result<Vec<RolloutResult>> {
    let config = model.config;
    if options.horizon == 0 {
        return Err(PredictionError::Horizon);
    }
    let t = observed[0].len();
    if t == 0 {
        return Err(PredictionError::EmptyPrefix);
    }
    if let Some(bad) = observed.iter().find(|o| o.len() != t) {
        return Err(PredictionError::RaggedPrefix(t, bad.len()));
    }
    for policy in policies {
        if let ClassPolicy::Force(c) = *policy {
            if config.kind != ModelKind::Cgp {
                return Err(PredictionError::NoClassHead(config.kind));
            }
            if c >= config.num_classes {
                return Err(PredictionError::Class {
                    class: c,
                    num_classes: config.num_classes,
                });
            }
        }
    }
    debug_assert_eq!(rngs.len(), observed.len() * n_samples);

    let steps = network::batch_inputs(observed, t);
    let (first, state) = network::run_prefix(model, &steps, observed.len())?;
    let rows: Vec<usize> = (0..observed.len() * n_samples).map(|r| r / n_samples).collect();
    let mut state: HiddenState = state.select(&rows);
    let mut raw: Vec<RawRow> = rows.iter().map(|&i| first.row(i)).collect();

    let origins: Vec<Point> = observed.iter().map(|o| *o.to_absolute().last().unwrap()).collect();
    let mut out: Vec<RolloutResult> = rows
        .iter()
        .map(|_| RolloutResult {
            classes: Vec::new(),
            deltas: Vec::with_capacity(options.horizon),
            absolute: Vec::with_capacity(options.horizon),
            horizon: options.horizon,
            raw: Vec::new(),
        })
        .collect();
    let mut pos: Vec<Point> = rows.iter().map(|&i| origins[i]).collect();

    for step in 0..options.horizon {
        let mut inputs = Array2::zeros((rows.len(), INPUT_DIM));
        for (r, &item) in rows.iter().enumerate() {
            let (class, delta) = draw(model, &raw[r], policies[item], options, &mut *rngs[r])?;
            if let Some(c) = class {
                out[r].classes.push(c);
            }
            pos[r] = [pos[r][0] + delta[0], pos[r][1] + delta[1]];
            out[r].deltas.push(delta);
            out[r].absolute.push(pos[r]);
            inputs[[r, 0]] = delta[0];
            inputs[[r, 1]] = delta[1];
        }
        if options.keep_raw {
            for (r, row) in raw.iter_mut().enumerate() {
                out[r].raw.push(std::mem::replace(row, RawRow { coord: Vec::new(), class: None }));
            }
        }
        if step + 1 < options.horizon {
            let (next_raw, next_state) = network::step(model, inputs.view(), &state)?;
            state = next_state;
            raw = (0..rows.len()).map(|r| next_raw.row(r)).collect();
        }
    }
    Ok(out)
}

/// One predicted step for one row: the class used (if any) and the
/// displacement.
fn draw<R: Rng + ?Sized>(
    model: &Model,
    raw: &RawRow,
    policy: ClassPolicy,
    options: RolloutOptions,
    rng: &mut R,
) -> Result<(Option<usize>, Point)> {
    let config = model.config;
    match config.kind {
        ModelKind::Dlstm => Ok((None, [raw.coord[0], raw.coord[1]])),
        ModelKind::Mdn => {
            let (k, m) = config.mixture_shape().expect("mdn has a mixture");
            let gmm = distribution::constrain_gmm(&raw.coord, k, m, options.constrain)?;
            let delta = match options.coord {
                CoordMode::Sample => distribution::sample_coord(&gmm, 0, rng)?,
                CoordMode::Mean => distribution::mean_coord(&gmm, 0)?,
            };
            Ok((None, delta))
        }
        ModelKind::Cgp => {
            let logits = raw.class.as_deref().expect("cgp has a class head");
            let (gmm, probs) = distribution::constrain(&raw.coord, logits, config.components, options.constrain)?;
            let class = match (options.coord, policy) {
                (CoordMode::Mean, ClassPolicy::Force(c)) => c,
                (CoordMode::Mean, ClassPolicy::Sample) => probs.argmax(),
                (CoordMode::Sample, policy) => {
                    let drawn = distribution::sample_class(&probs, rng);
                    match policy {
                        ClassPolicy::Sample => drawn,
                        ClassPolicy::Force(c) => c,
                    }
                }
            };
            let delta = match options.coord {
                CoordMode::Sample => distribution::sample_coord(&gmm, class, rng)?,
                CoordMode::Mean => distribution::mean_coord(&gmm, class)?,
            };
            Ok((Some(class), delta))
        }
    }
}

/// A rollout tagged with the item it continues.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub id: String,
    pub label: usize,
    pub result: RolloutResult,
}

/// Trajectory-file lines with a fourth column of per-step sampled classes
/// (`;`-separated, `-` when the model has none). The points are the predicted
/// absolute coordinates.
pub fn format_rollouts(records: &[RolloutRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let classes = if r.result.classes.is_empty() {
            "-".to_string()
        } else {
            r.result
                .classes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            r.id,
            r.label,
            data::format_points(&r.result.absolute),
            classes
        )
        .unwrap();
    }
    s
}

/// One parsed rollout line: `(id, label, points, classes)`.
pub type ParsedRollout = (String, usize, Vec<Point>, Vec<usize>);

/// Parses [`format_rollouts`] output.
pub fn parse_rollouts(text: &str) -> Result<Vec<ParsedRollout>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| PredictionError::Parse { line: line_no, msg };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let label = fields[1].parse().map_err(|_| bad(format!("bad class `{}`", fields[1])))?;
        let points = data::parse_points(fields[2]).map_err(bad)?;
        let classes = if fields[3] == "-" {
            Vec::new()
        } else {
            fields[3]
                .split(';')
                .map(|c| c.parse().map_err(|_| bad(format!("bad sampled class `{c}`"))))
                .collect::<Result<_>>()?
        };
        out.push((fields[0].to_string(), label, points, classes));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_sequence, init_model, ModelConfig};

    fn prefix(n: usize, seed: u64) -> RelativeSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RelativeSequence {
            origin: [10.0, 20.0],
            deltas: (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect(),
        }
    }

    fn cgp(k: usize, m: usize) -> Model {
        init_model(ModelConfig::new(ModelKind::Cgp, k, m, 6), 4).unwrap()
    }

    #[test]
    fn horizon_one_is_a_single_pair() {
        let model = cgp(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = rollout(&model, &prefix(5, 0), 1, &mut rng).unwrap();
        assert_eq!((r.classes.len(), r.deltas.len(), r.absolute.len()), (1, 1, 1));
        assert!(matches!(
            rollout(&model, &prefix(5, 0), 0, &mut rng),
            Err(PredictionError::Horizon)
        ));
        assert!(matches!(
            rollout(&model, &prefix(0, 0), 3, &mut rng),
            Err(PredictionError::EmptyPrefix)
        ));
    }

    #[test]
    fn fixed_seed_is_reproducible_and_seeds_differ() {
        let model = cgp(3, 2);
        let p = prefix(6, 1);
        let a = rollout_batch(&model, &p, 7, 5, 11).unwrap();
        let b = rollout_batch(&model, &p, 7, 5, 11).unwrap();
        let c = rollout_batch(&model, &p, 7, 5, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn absolute_is_cumulative_from_last_observed_point() {
        let model = cgp(2, 3);
        let p = prefix(4, 2);
        let last = *p.to_absolute().last().unwrap();
        for r in rollout_batch(&model, &p, 9, 3, 0).unwrap() {
            let mut acc = last;
            for (d, a) in r.deltas.iter().zip(&r.absolute) {
                acc = [acc[0] + d[0], acc[1] + d[1]];
                assert_eq!(*a, acc);
            }
        }
    }

    #[test]
    fn carried_state_equals_refeeding_the_whole_sequence() {
        for kind in [ModelKind::Cgp, ModelKind::Mdn, ModelKind::Dlstm] {
            let model = init_model(ModelConfig::new(kind, 2, 2, 5), 8).unwrap();
            let p = prefix(5, 3);
            let options = RolloutOptions {
                keep_raw: true,
                ..RolloutOptions::new(6)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let r = rollout_with(&model, &p, ClassPolicy::Sample, options, &mut rng).unwrap();
            let mut full = p.clone();
            full.deltas.extend_from_slice(&r.deltas);
            let replay = forward_sequence(&model, &full).unwrap();
            for (s, raw) in r.raw.iter().enumerate() {
                let expect = &replay[p.len() - 1 + s];
                for (a, b) in raw.coord.iter().zip(&expect.coord) {
                    assert!((a - b).abs() < 1e-12, "{kind} step {s}");
                }
                assert_eq!(raw.class.is_some(), expect.class.is_some());
            }
        }
    }

    #[test]
    fn batching_and_streams_do_not_change_results() {
        let model = cgp(3, 2);
        let (p, q) = (prefix(5, 4), prefix(5, 5));
        let req = |o, stream| RolloutRequest {
            observed: o,
            policy: ClassPolicy::Sample,
            stream,
        };
        let opts = RolloutOptions::new(4);
        let both = rollout_requests(&model, &[req(&p, 0), req(&q, 1)], 3, 9, opts).unwrap();
        let only_q = rollout_requests(&model, &[req(&q, 1)], 3, 9, opts).unwrap();
        for (a, b) in both[1].iter().zip(&only_q[0]) {
            assert_eq!(a.classes, b.classes);
            for (x, y) in a.absolute.iter().zip(&b.absolute) {
                assert!((x[0] - y[0]).abs() < 1e-12 && (x[1] - y[1]).abs() < 1e-12);
            }
        }
        let mut rng = row_rng(9, 1, 2);
        let single = rollout(&model, &q, 4, &mut rng).unwrap();
        assert_eq!(single.classes, only_q[0][2].classes);
    }

    #[test]
    fn forced_class_is_constant_and_shares_draws() {
        let model = cgp(3, 2);
        let p = prefix(5, 6);
        let free = rollout_requests(
            &model,
            &[RolloutRequest { observed: &p, policy: ClassPolicy::Sample, stream: 0 }],
            20,
            3,
            RolloutOptions::new(5),
        )
        .unwrap();
        let forced = rollout_requests(
            &model,
            &[RolloutRequest { observed: &p, policy: ClassPolicy::Force(2), stream: 0 }],
            20,
            3,
            RolloutOptions::new(5),
        )
        .unwrap();
        for (f, r) in forced[0].iter().zip(&free[0]) {
            assert!(f.classes.iter().all(|&c| c == 2));
            // Same uniforms: where the free rollout also sampled class 2 at
            // every step, the trajectories coincide.
            if r.classes.iter().all(|&c| c == 2) {
                assert_eq!(f.deltas, r.deltas);
            }
        }
        let err = rollout_with(
            &model,
            &p,
            ClassPolicy::Force(3),
            RolloutOptions::new(2),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(PredictionError::Class { class: 3, .. })));
    }

    #[test]
    fn classwise_mean_single_component_follows_mu() {
        let model = cgp(2, 1);
        let p = prefix(4, 7);
        let a = classwise_mean_rollout(&model, &p, 5, 1).unwrap();
        assert_eq!(a, classwise_mean_rollout(&model, &p, 5, 1).unwrap());
        assert!(a.classes.iter().all(|&c| c == 1));
        let mut full = p.clone();
        for (s, d) in a.deltas.iter().enumerate() {
            let raw = forward_sequence(&model, &full).unwrap().pop().unwrap();
            let gmm = distribution::constrain_gmm(&raw.coord, 2, 1, ConstrainOptions::default()).unwrap();
            let mu = gmm.class(1).unwrap()[0].mu;
            assert!((mu[0] - d[0]).abs() < 1e-12 && (mu[1] - d[1]).abs() < 1e-12, "step {s}");
            full.deltas.push(*d);
        }
        assert!(classwise_mean_rollout(&model, &p, 5, 2).is_err());
    }

    #[test]
    fn dlstm_rollout_is_deterministic_and_classless() {
        let model = init_model(ModelConfig::new(ModelKind::Dlstm, 2, 1, 5), 2).unwrap();
        let p = prefix(4, 8);
        let a = rollout(&model, &p, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = rollout(&model, &p, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.classes.is_empty());
        assert!(matches!(
            rollout_with(&model, &p, ClassPolicy::Force(0), RolloutOptions::new(1), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(PredictionError::NoClassHead(ModelKind::Dlstm))
        ));
    }

    #[test]
    fn rollout_file_round_trip() {
        let model = cgp(2, 2);
        let rs = rollout_batch(&model, &prefix(3, 9), 3, 2, 0).unwrap();
        let mdn = init_model(ModelConfig::new(ModelKind::Mdn, 2, 2, 4), 0).unwrap();
        let classless = rollout_batch(&mdn, &prefix(3, 9), 2, 1, 0).unwrap();
        let records = vec![
            RolloutRecord { id: "a".into(), label: 1, result: rs[0].clone() },
            RolloutRecord { id: "b".into(), label: 0, result: classless[0].clone() },
        ];
        let text = format_rollouts(&records);
        let back = parse_rollouts(&text).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].2, rs[0].absolute);
        assert_eq!(back[0].3, rs[0].classes);
        assert!(back[1].3.is_empty());
        assert!(text.lines().nth(1).unwrap().ends_with("\t-"));
    }
}
