//! Comparison models: the class-agnostic MDN, the deterministic D-LSTM and a
//! prefix-matching nearest neighbour.
//!
//! The MDN and D-LSTM are [`Model`]s of kind `mdn` / `dlstm`; they share the
//! LSTM stack, the training loop and the rollout engine with the CGP model.
//! The helpers here only pin the model kind.

use crate::data::{LabeledSequence, Point, RelativeSequence};
use crate::distribution::ConstrainOptions;
use crate::network::{Model, ModelKind};
use crate::prediction::{self, PredictionError, RolloutResult};
use crate::training::{self, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("expected a {expected} model, got {got}")]
    Kind { expected: ModelKind, got: ModelKind },
    #[error("nearest-neighbour index is empty")]
    EmptyIndex,
    #[error("index sequences must all have {expected} points, found {got}")]
    Length { expected: usize, got: usize },
    #[error("prefix of {prefix} points plus horizon {horizon} overruns sequences of {len} points")]
    Horizon { prefix: usize, horizon: usize, len: usize },
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

fn expect_kind(model: &Model, expected: ModelKind) -> Result<()> {
    if model.config.kind != expected {
        return Err(BaselineError::Kind {
            expected,
            got: model.config.kind,
        });
    }
    Ok(())
}

/// Summed negative log-likelihood of the flat mixture over `items`.
pub fn mdn_loss(model: &Model, items: &[LabeledSequence], options: ConstrainOptions) -> Result<f64> {
    expect_kind(model, ModelKind::Mdn)?;
    Ok(training::total_loss(model, items, 32, options)?.total)
}

/// Samples a component, then a displacement, `horizon` times.
pub fn mdn_rollout<R: Rng>(model: &Model, observed: &RelativeSequence, horizon: usize, rng: &mut R) -> Result<RolloutResult> {
    expect_kind(model, ModelKind::Mdn)?;
    Ok(prediction::rollout(model, observed, horizon, rng)?)
}

/// Summed per-sequence mean squared error over `items`.
pub fn dlstm_loss(model: &Model, items: &[LabeledSequence]) -> Result<f64> {
    expect_kind(model, ModelKind::Dlstm)?;
    Ok(training::total_loss(model, items, 32, ConstrainOptions::default())?.total)
}

/// Feeds back the point prediction; a pure function of weights and prefix.
pub fn dlstm_rollout(model: &Model, observed: &RelativeSequence, horizon: usize) -> Result<RolloutResult> {
    expect_kind(model, ModelKind::Dlstm)?;
    // The D-LSTM never draws; any generator will do.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(prediction::rollout(model, observed, horizon, &mut rng)?)
}

/// Training sequences in absolute canvas coordinates.
#[derive(Debug, Clone)]
pub struct NnIndex {
    pub sequences: Vec<Vec<Point>>,
    pub labels: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnMatch {
    /// Position of the matched sequence in the index.
    pub index: usize,
    pub distance: f64,
    pub points: Vec<Point>,
}

impl NnIndex {
    pub fn new(sequences: Vec<Vec<Point>>, labels: Vec<usize>) -> Result<Self> {
        let len = sequences.first().ok_or(BaselineError::EmptyIndex)?.len();
        if let Some(bad) = sequences.iter().find(|s| s.len() != len) {
            return Err(BaselineError::Length {
                expected: len,
                got: bad.len(),
            });
        }
        assert_eq!(sequences.len(), labels.len(), "one label per sequence");
        Ok(Self { sequences, labels, len })
    }

    pub fn from_items(items: &[LabeledSequence]) -> Result<Self> {
        Self::new(
            items.iter().map(|s| s.absolute()).collect(),
            items.iter().map(|s| s.label).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

fn squared_distance(a: &[Point], b: &[Point]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum()
}

/// Finds the indexed sequence closest to `prefix` (summed squared distance
/// over the aligned points) and returns its next `horizon` points, shifted so
/// that its last aligned point lands on the last prefix point. Ties go to the
/// earliest sequence.
pub fn nn_predict(index: &NnIndex, prefix: &[Point], horizon: usize) -> Result<NnMatch> {
    if index.is_empty() {
        return Err(BaselineError::EmptyIndex);
    }
    let n = prefix.len();
    if n == 0 || n + horizon > index.len {
        return Err(BaselineError::Horizon {
            prefix: n,
            horizon,
            len: index.len,
        });
    }
    let (best, distance) = index
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| (i, squared_distance(&s[..n], prefix)))
        .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
    let seq = &index.sequences[best];
    let shift = [prefix[n - 1][0] - seq[n - 1][0], prefix[n - 1][1] - seq[n - 1][1]];
    let points = seq[n..n + horizon]
        .iter()
        .map(|p| [p[0] + shift[0], p[1] + shift[1]])
        .collect();
    Ok(NnMatch {
        index: best,
        distance,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, ModelConfig};

    fn random_paths(n: usize, len: usize, seed: u64) -> Vec<Vec<Point>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..len).map(|_| [rng.random_range(0.0..127.0), rng.random_range(0.0..127.0)]).collect())
            .collect()
    }

    #[test]
    fn exact_prefix_returns_that_continuation() {
        let paths = random_paths(8, 12, 1);
        let index = NnIndex::new(paths.clone(), vec![0; 8]).unwrap();
        let m = nn_predict(&index, &paths[5][..6], 4).unwrap();
        assert_eq!(m.index, 5);
        assert_eq!(m.distance, 0.0);
        assert_eq!(m.points, paths[5][6..10].to_vec());
    }

    #[test]
    fn single_entry_index_always_matches_and_is_translated() {
        let paths = random_paths(1, 10, 2);
        let index = NnIndex::new(paths.clone(), vec![3]).unwrap();
        let query = random_paths(1, 4, 3).pop().unwrap();
        let m = nn_predict(&index, &query, 2).unwrap();
        assert_eq!(m.index, 0);
        let shift = [query[3][0] - paths[0][3][0], query[3][1] - paths[0][3][1]];
        for (p, q) in m.points.iter().zip(&paths[0][4..6]) {
            assert!((p[0] - q[0] - shift[0]).abs() < 1e-12 && (p[1] - q[1] - shift[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_shrinks_as_the_index_grows() {
        let paths = random_paths(30, 10, 4);
        let query = random_paths(1, 5, 5).pop().unwrap();
        let mut last = f64::INFINITY;
        for n in 1..=paths.len() {
            let index = NnIndex::new(paths[..n].to_vec(), vec![0; n]).unwrap();
            let d = nn_predict(&index, &query, 3).unwrap().distance;
            assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(NnIndex::new(vec![], vec![]), Err(BaselineError::EmptyIndex)));
        let paths = random_paths(2, 10, 6);
        assert!(NnIndex::new(vec![paths[0].clone(), paths[1][..9].to_vec()], vec![0, 0]).is_err());
        let index = NnIndex::new(paths.clone(), vec![0, 1]).unwrap();
        assert!(nn_predict(&index, &paths[0][..8], 3).is_err());
        assert!(nn_predict(&index, &paths[0][..7], 3).is_ok());
    }

    #[test]
    fn kind_helpers_check_the_model_kind() {
        let cgp = init_model(ModelConfig::new(ModelKind::Cgp, 2, 1, 3), 0).unwrap();
        let seq = RelativeSequence {
            origin: [0.0, 0.0],
            deltas: vec![[1.0, 1.0]; 3],
        };
        assert!(matches!(dlstm_rollout(&cgp, &seq, 2), Err(BaselineError::Kind { .. })));
        let dl = init_model(ModelConfig::new(ModelKind::Dlstm, 2, 1, 3), 0).unwrap();
        assert_eq!(dlstm_rollout(&dl, &seq, 4).unwrap(), dlstm_rollout(&dl, &seq, 4).unwrap());
        let mdn = init_model(ModelConfig::new(ModelKind::Mdn, 2, 2, 3), 0).unwrap();
        let r = mdn_rollout(&mdn, &seq, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.deltas.len(), 3);
        assert!(r.classes.is_empty());
    }
}
