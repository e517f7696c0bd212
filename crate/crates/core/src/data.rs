//! Trajectory interchange format, preprocessing and the synthetic generator.
//!
//! Trajectory files hold one sample per line:
//!
//! ```text
//! id<TAB>class_index<TAB>x1,y1;x2,y2;...
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub type Point = [f64; 2];

/// Canvas upper bound after normalization.
pub const CANVAS_MAX: f64 = 127.0;
/// Value assigned to a dimension with zero range.
pub const CANVAS_MID: f64 = 63.5;
pub const SEQUENCE_LENGTH: usize = 50;
pub const DEFAULT_CLASSES: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: class index {class} outside [0, {num_classes})")]
    ClassOutOfRange {
        line: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("{op} needs at least {needed} points, got {got}")]
    TooShort {
        op: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("target length must be at least 2, got {0}")]
    BadTargetLength(usize),
    #[error("dataset split needs at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One handwriting sequence with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub id: String,
    pub coords: Vec<Point>,
    pub label: usize,
    pub num_classes: usize,
}

impl TrajectorySample {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.num_classes];
        y[self.label] = 1.0;
        y
    }
}

/// Per-step displacements plus the starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeSequence {
    pub origin: Point,
    pub deltas: Vec<Point>,
}

impl RelativeSequence {
    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Cumulative reconstruction; `len() + 1` points.
    pub fn to_absolute(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.deltas.len() + 1);
        let mut p = self.origin;
        out.push(p);
        for d in &self.deltas {
            p = [p[0] + d[0], p[1] + d[1]];
            out.push(p);
        }
        out
    }

    /// The first `t` deltas.
    pub fn prefix(&self, t: usize) -> RelativeSequence {
        RelativeSequence {
            origin: self.origin,
            deltas: self.deltas[..t.min(self.deltas.len())].to_vec(),
        }
    }
}

/// A preprocessed sample in the model's relative coordinate space.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub id: String,
    pub seq: RelativeSequence,
    pub label: usize,
    pub num_classes: usize,
}

impl LabeledSequence {
    pub fn from_sample(sample: &TrajectorySample) -> Result<Self> {
        Ok(Self {
            id: sample.id.clone(),
            seq: to_relative(sample)?,
            label: sample.label,
            num_classes: sample.num_classes,
        })
    }

    pub fn absolute(&self) -> Vec<Point> {
        self.seq.to_absolute()
    }
}

/// Resample, normalize and convert every sample.
pub fn prepare(samples: &[TrajectorySample], target_len: usize) -> Result<Vec<LabeledSequence>> {
    samples
        .iter()
        .map(|s| LabeledSequence::from_sample(&preprocess(s, target_len)?))
        .collect()
}

pub fn parse_trajectories(text: &str, num_classes: usize) -> Result<Vec<TrajectorySample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 3 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let class: usize = fields[1].trim().parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("bad class index `{}`", fields[1]),
        })?;
        if class >= num_classes {
            return Err(DataError::ClassOutOfRange {
                line,
                class,
                num_classes,
            });
        }
        let coords = parse_points(fields[2]).map_err(|msg| DataError::Parse { line, msg })?;
        out.push(TrajectorySample {
            id: fields[0].to_string(),
            coords,
            label: class,
            num_classes,
        });
    }
    Ok(out)
}

pub(crate) fn parse_points(field: &str) -> std::result::Result<Vec<Point>, String> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|pair| {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| format!("point `{pair}` is not `x,y`"))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("non-numeric coordinate `{s}`"))
            };
            Ok([parse(x)?, parse(y)?])
        })
        .collect()
}

pub fn load_trajectories(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<TrajectorySample>> {
    parse_trajectories(&std::fs::read_to_string(path)?, num_classes)
}

pub(crate) fn format_points(points: &[Point]) -> String {
    let mut s = String::new();
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        write!(s, "{},{}", p[0], p[1]).unwrap();
    }
    s
}

pub fn format_trajectories(samples: &[TrajectorySample]) -> String {
    let mut s = String::new();
    for sample in samples {
        writeln!(s, "{}\t{}\t{}", sample.id, sample.label, format_points(&sample.coords)).unwrap();
    }
    s
}

pub fn write_trajectories(path: impl AsRef<Path>, samples: &[TrajectorySample]) -> Result<()> {
    std::fs::write(path, format_trajectories(samples))?;
    Ok(())
}

/// Per-dimension min-max map onto `[0, 127]`.
pub fn normalize(sample: &TrajectorySample) -> Result<TrajectorySample> {
    Ok(TrajectorySample {
        coords: normalize_points(&sample.coords)?,
        ..sample.clone()
    })
}

pub fn normalize_points(points: &[Point]) -> Result<Vec<Point>> {
    if points.len() < 2 {
        return Err(DataError::TooShort {
            op: "normalize",
            needed: 2,
            got: points.len(),
        });
    }
    let mut out = points.to_vec();
    for d in 0..2 {
        let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        for p in &mut out {
            p[d] = if range > 0.0 {
                (p[d] - lo) / range * CANVAS_MAX
            } else {
                CANVAS_MID
            };
        }
    }
    Ok(out)
}

/// Linear interpolation on the time index; output point `j` samples the
/// input at fractional index `j * (n - 1) / (target_len - 1)`.
pub fn resample_time(sample: &TrajectorySample, target_len: usize) -> Result<TrajectorySample> {
    Ok(TrajectorySample {
        coords: resample_points(&sample.coords, target_len)?,
        ..sample.clone()
    })
}

pub fn resample_points(points: &[Point], target_len: usize) -> Result<Vec<Point>> {
    if target_len < 2 {
        return Err(DataError::BadTargetLength(target_len));
    }
    if points.len() < 2 {
        return Err(DataError::TooShort {
            op: "resample_time",
            needed: 2,
            got: points.len(),
        });
    }
    let last = points.len() - 1;
    Ok((0..target_len)
        .map(|j| {
            let u = j as f64 * last as f64 / (target_len - 1) as f64;
            let i = (u.floor() as usize).min(last);
            if i == last {
                return points[last];
            }
            let frac = u - i as f64;
            let (a, b) = (points[i], points[i + 1]);
            [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
        })
        .collect())
}

pub fn to_relative(sample: &TrajectorySample) -> Result<RelativeSequence> {
    relative_from_points(&sample.coords)
}

pub fn relative_from_points(points: &[Point]) -> Result<RelativeSequence> {
    if points.len() < 2 {
        return Err(DataError::TooShort {
            op: "to_relative",
            needed: 2,
            got: points.len(),
        });
    }
    Ok(RelativeSequence {
        origin: points[0],
        deltas: points
            .windows(2)
            .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
            .collect(),
    })
}

/// Resample to `target_len` steps, then normalize onto the canvas.
pub fn preprocess(sample: &TrajectorySample, target_len: usize) -> Result<TrajectorySample> {
    normalize(&resample_time(sample, target_len)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded 70/10/20 partition of `0..n`.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(DataError::TooFewSamples(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).max(1);
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok(DatasetSplit {
        train: order,
        validation,
        test,
        seed,
    })
}

/// Declarative synthetic dataset: one template per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(rename = "class")]
    pub classes: Vec<SynthClass>,
}

fn default_length() -> usize {
    SEQUENCE_LENGTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    /// Template polyline vertices.
    pub points: Vec<Point>,
    /// Optional keyframe times (strictly increasing, first 0, last
    /// `length - 1`). Without them vertices are spread evenly over time.
    #[serde(default)]
    pub steps: Option<Vec<usize>>,
    pub count: usize,
    /// Standard deviation of the per-point Gaussian jitter, template units.
    pub jitter: f64,
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))
    }

    /// Each class template resampled to `length` points (before jitter and
    /// normalization).
    pub fn templates(&self) -> Result<Vec<Vec<Point>>> {
        self.classes.iter().map(|c| c.template(self.length)).collect()
    }
}

impl SynthClass {
    fn template(&self, length: usize) -> Result<Vec<Point>> {
        if self.points.len() < 2 {
            return Err(DataError::Config(format!(
                "class `{}`: template needs at least 2 points",
                self.name
            )));
        }
        let Some(steps) = &self.steps else {
            return resample_points(&self.points, length);
        };
        let valid = steps.len() == self.points.len()
            && steps.first() == Some(&0)
            && steps.last() == Some(&(length - 1))
            && steps.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(DataError::Config(format!(
                "class `{}`: steps must rise strictly from 0 to {} with one per point",
                self.name,
                length - 1
            )));
        }
        let mut out = Vec::with_capacity(length);
        for seg in 0..steps.len() - 1 {
            let (s0, s1) = (steps[seg], steps[seg + 1]);
            let (a, b) = (self.points[seg], self.points[seg + 1]);
            for j in s0..s1 {
                let f = (j - s0) as f64 / (s1 - s0) as f64;
                out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            }
        }
        out.push(*self.points.last().unwrap());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bifurcation {
    pub a: String,
    pub b: String,
    /// First 0-based step at which the normalized templates differ.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub classes: Vec<String>,
    pub length: usize,
    pub seed: u64,
    pub bifurcations: Vec<Bifurcation>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<TrajectorySample>,
    /// Normalized noise-free template per class.
    pub templates: Vec<Vec<Point>>,
    pub meta: SynthMeta,
}

/// Generates `count` jittered, normalized instances of every class template.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if config.classes.len() < 2 {
        return Err(DataError::Config("need at least 2 classes".into()));
    }
    if config.length < 2 {
        return Err(DataError::BadTargetLength(config.length));
    }
    let raw_templates = config.templates()?;
    let templates = raw_templates
        .iter()
        .map(|t| normalize_points(t))
        .collect::<Result<Vec<_>>>()?;
    let mut bifurcations = Vec::new();
    for i in 0..templates.len() {
        for j in i + 1..templates.len() {
            let step = templates[i]
                .iter()
                .zip(&templates[j])
                .position(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]) > 1e-9)
                .unwrap_or(config.length);
            if step > 0 {
                bifurcations.push(Bifurcation {
                    a: config.classes[i].name.clone(),
                    b: config.classes[j].name.clone(),
                    step,
                });
            }
        }
    }
    if bifurcations.is_empty() {
        return Err(DataError::Config(
            "no pair of classes shares a common prefix".into(),
        ));
    }
    let num_classes = config.classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (label, (class, template)) in config.classes.iter().zip(&raw_templates).enumerate() {
        if !(class.jitter >= 0.0 && class.jitter.is_finite()) {
            return Err(DataError::Config(format!(
                "class `{}`: jitter must be finite and non-negative",
                class.name
            )));
        }
        let noise = Normal::new(0.0, class.jitter).expect("validated above");
        for i in 0..class.count {
            let jittered: Vec<Point> = template
                .iter()
                .map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)])
                .collect();
            samples.push(TrajectorySample {
                id: format!("{}-{i:04}", class.name),
                coords: normalize_points(&jittered)?,
                label,
                num_classes,
            });
        }
    }
    Ok(SynthDataset {
        samples,
        templates,
        meta: SynthMeta {
            classes: config.classes.iter().map(|c| c.name.clone()).collect(),
            length: config.length,
            seed,
            bifurcations,
        },
    })
}
