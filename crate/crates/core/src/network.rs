//! Three-layer LSTM stack with skip connections and the model heads.
//!
//! Every layer sees the raw input; layers above the first also see the
//! output of the layer below. The heads read the concatenation of all layer
//! outputs (`3H` features). Gate columns are laid out `[input | forget | cell
//! | output]`, each `H` wide.
//!
//! The same stack backs all three model kinds; only the heads differ:
//!
//! | kind    | parameters                             | output width    |
//! |---------|----------------------------------------|-----------------|
//! | `cgp`   | `coord_head.{w,b}`, `class_head.{w,b}` | `K*M*6`, `K`    |
//! | `mdn`   | `mdn_head.{w,b}`                       | `K*M*6` (flat)  |
//! | `dlstm` | `point_head.{w,b}`                     | `2`             |

use crate::autodiff::{AutodiffError, Graph, ParamSet, Var};
use crate::data::RelativeSequence;
use crate::distribution::PARAMS_PER_COMPONENT;
use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const NUM_LAYERS: usize = 3;
pub const INPUT_DIM: usize = 2;
pub const DEFAULT_HIDDEN: usize = 128;
pub const INIT_SCALE: f64 = 0.1;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty input sequence")]
    EmptySequence,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cgp,
    Mdn,
    Dlstm,
}

impl ModelKind {
    pub fn is_probabilistic(self) -> bool {
        !matches!(self, ModelKind::Dlstm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cgp => "cgp",
            ModelKind::Mdn => "mdn",
            ModelKind::Dlstm => "dlstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cgp" => Ok(ModelKind::Cgp),
            "mdn" => Ok(ModelKind::Mdn),
            "dlstm" => Ok(ModelKind::Dlstm),
            other => Err(format!("unknown model kind `{other}` (expected cgp, mdn or dlstm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of classes `K`.
    pub num_classes: usize,
    /// Gaussian components per class `M`. The MDN uses `K * M` components in
    /// one flat mixture so both probabilistic models share a budget.
    pub components: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, num_classes: usize, components: usize, hidden: usize) -> Self {
        Self {
            kind,
            num_classes,
            components,
            hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.components < 1 || self.hidden < 1 {
            return Err(NetworkError::Config(format!(
                "need K >= 1, M >= 1, H >= 1; got K={}, M={}, H={}",
                self.num_classes, self.components, self.hidden
            )));
        }
        Ok(())
    }

    /// Total mixture components across the coordinate head.
    pub fn total_components(&self) -> usize {
        self.num_classes * self.components
    }

    pub fn feature_width(&self) -> usize {
        NUM_LAYERS * self.hidden
    }

    pub fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            INPUT_DIM
        } else {
            INPUT_DIM + self.hidden
        }
    }

    /// Width of the coordinate head output (mixture parameters or point).
    pub fn coord_width(&self) -> usize {
        match self.kind {
            ModelKind::Cgp | ModelKind::Mdn => self.total_components() * PARAMS_PER_COMPONENT,
            ModelKind::Dlstm => INPUT_DIM,
        }
    }

    pub fn class_width(&self) -> Option<usize> {
        (self.kind == ModelKind::Cgp).then_some(self.num_classes)
    }

    /// `(mixture classes, components per class)` as seen by the distribution
    /// module: `(K, M)` for CGP, `(1, K*M)` for the MDN.
    pub fn mixture_shape(&self) -> Option<(usize, usize)> {
        match self.kind {
            ModelKind::Cgp => Some((self.num_classes, self.components)),
            ModelKind::Mdn => Some((1, self.total_components())),
            ModelKind::Dlstm => None,
        }
    }

    fn head_names(&self) -> (&'static str, Option<&'static str>) {
        match self.kind {
            ModelKind::Cgp => ("coord_head", Some("class_head")),
            ModelKind::Mdn => ("mdn_head", None),
            ModelKind::Dlstm => ("point_head", None),
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for l in 0..NUM_LAYERS {
            out.push((format!("lstm.{l}.w_ih"), vec![self.layer_input_width(l), 4 * h]));
            out.push((format!("lstm.{l}.w_hh"), vec![h, 4 * h]));
            out.push((format!("lstm.{l}.b"), vec![4 * h]));
        }
        let (coord, class) = self.head_names();
        out.push((format!("{coord}.w"), vec![self.feature_width(), self.coord_width()]));
        out.push((format!("{coord}.b"), vec![self.coord_width()]));
        if let (Some(name), Some(width)) = (class, self.class_width()) {
            out.push((format!("{name}.w"), vec![self.feature_width(), width]));
            out.push((format!("{name}.b"), vec![width]));
        }
        out
    }
}

/// Trainable weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Uniform `[-0.1, 0.1]` weights, forget-gate biases at `1.0`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let h = config.hidden;
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE)).collect();
        let mut value = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("sized above");
        if name.starts_with("lstm.") && name.ends_with(".b") {
            value.slice_mut(s![h..2 * h]).fill(FORGET_BIAS);
        }
        params.insert(name, value)?;
    }
    Ok(Model { config, params })
}

impl Model {
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(NetworkError::Dimension(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(params.iter()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(NetworkError::Dimension(format!(
                    "parameter `{}` {:?} where `{name}` {shape:?} was expected",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn bind<'a>(&'a self, graph: &mut Graph<'a>) -> BoundModel {
        BoundModel {
            config: self.config,
            vars: self.params.bind(graph),
        }
    }
}

/// A model's parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub vars: Vec<Var>,
}

/// Recurrent state inside a graph.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub layers: Vec<(Var, Var)>,
}

/// Raw head outputs inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub coord: Var,
    pub class: Option<Var>,
}

impl BoundModel {
    fn layer(&self, l: usize) -> (Var, Var, Var) {
        (self.vars[3 * l], self.vars[3 * l + 1], self.vars[3 * l + 2])
    }

    pub fn zero_state(&self, graph: &mut Graph<'_>, batch: usize) -> StateVars {
        let h = self.config.hidden;
        StateVars {
            layers: (0..NUM_LAYERS)
                .map(|_| {
                    (
                        graph.constant2(Array2::zeros((batch, h))),
                        graph.constant2(Array2::zeros((batch, h))),
                    )
                })
                .collect(),
        }
    }

    pub fn state_from(&self, graph: &mut Graph<'_>, state: &HiddenState) -> StateVars {
        StateVars {
            layers: state
                .layers
                .iter()
                .map(|(h, c)| (graph.constant2(h.clone()), graph.constant2(c.clone())))
                .collect(),
        }
    }

    /// One time step of the stack for a `[B, 2]` input; returns the `[B, 3H]`
    /// head features and the next state.
    pub fn step(&self, g: &mut Graph<'_>, input: Var, state: &StateVars) -> Result<(Var, StateVars)> {
        let h = self.config.hidden;
        if g.shape(input).len() != 2 || g.shape(input)[1] != INPUT_DIM {
            return Err(NetworkError::Dimension(format!(
                "input shape {:?}, expected [B, {INPUT_DIM}]",
                g.shape(input)
            )));
        }
        if state.layers.len() != NUM_LAYERS {
            return Err(NetworkError::Dimension(format!(
                "state has {} layers, model has {NUM_LAYERS}",
                state.layers.len()
            )));
        }
        let mut next = Vec::with_capacity(NUM_LAYERS);
        let mut outputs = Vec::with_capacity(NUM_LAYERS);
        for l in 0..NUM_LAYERS {
            let (w_ih, w_hh, b) = self.layer(l);
            let (h_prev, c_prev) = state.layers[l];
            let layer_input = if l == 0 {
                input
            } else {
                g.concat(&[input, outputs[l - 1]], 1)?
            };
            let from_input = g.matmul(layer_input, w_ih)?;
            let from_hidden = g.matmul(h_prev, w_hh)?;
            let pre = g.add(from_input, from_hidden)?;
            let gates = g.add(pre, b)?;
            let i_pre = g.slice(gates, 1, 0, h)?;
            let f_pre = g.slice(gates, 1, h, 2 * h)?;
            let c_pre = g.slice(gates, 1, 2 * h, 3 * h)?;
            let o_pre = g.slice(gates, 1, 3 * h, 4 * h)?;
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let cand = g.tanh(c_pre);
            let o = g.sigmoid(o_pre);
            let keep = g.mul(f, c_prev)?;
            let write = g.mul(i, cand)?;
            let c = g.add(keep, write)?;
            let c_act = g.tanh(c);
            let h_new = g.mul(o, c_act)?;
            outputs.push(h_new);
            next.push((h_new, c));
        }
        let features = g.concat(&outputs, 1)?;
        Ok((features, StateVars { layers: next }))
    }

    /// Affine heads over `[N, 3H]` features.
    pub fn heads(&self, g: &mut Graph<'_>, features: Var) -> Result<HeadVars> {
        let base = 3 * NUM_LAYERS;
        let coord = g.matmul(features, self.vars[base])?;
        let coord = g.add(coord, self.vars[base + 1])?;
        let class = match self.config.kind {
            ModelKind::Cgp => {
                let z = g.matmul(features, self.vars[base + 2])?;
                Some(g.add(z, self.vars[base + 3])?)
            }
            _ => None,
        };
        Ok(HeadVars { coord, class })
    }
}

/// Recurrent state outside a graph, one row per sequence in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
}

impl HiddenState {
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let h = config.hidden;
        Self {
            layers: (0..NUM_LAYERS)
                .map(|_| (Array2::zeros((batch, h)), Array2::zeros((batch, h))))
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |(h, _)| h.nrows())
    }

    /// Row `i` of the result is row `rows[i]` of `self`.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(h, c)| (h.select(Axis(0), rows), c.select(Axis(0), rows)))
                .collect(),
        }
    }
}

/// Raw (unconstrained) head outputs for a batch, one row per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub coord: Array2<f64>,
    pub class: Option<Array2<f64>>,
}

impl RawOutputs {
    pub fn row(&self, i: usize) -> RawRow {
        RawRow {
            coord: self.coord.row(i).to_vec(),
            class: self.class.as_ref().map(|c| c.row(i).to_vec()),
        }
    }
}

/// Raw head outputs for one sequence at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub coord: Vec<f64>,
    pub class: Option<Vec<f64>>,
}

/// Advances every row of `state` by one input and evaluates the heads.
pub fn step(model: &Model, inputs: ArrayView2<'_, f64>, state: &HiddenState) -> Result<(RawOutputs, HiddenState)> {
    if inputs.nrows() != state.batch() {
        return Err(NetworkError::Dimension(format!(
            "{} inputs for a state of batch {}",
            inputs.nrows(),
            state.batch()
        )));
    }
    if state.layers.iter().any(|(h, c)| h.ncols() != model.config.hidden || c.ncols() != model.config.hidden) {
        return Err(NetworkError::Dimension("state width differs from hidden size".into()));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant2(inputs.to_owned());
    let vars = bound.state_from(&mut g, state);
    let (features, next) = bound.step(&mut g, x, &vars)?;
    let heads = bound.heads(&mut g, features)?;
    let take = |v: Var| g.value2(v).to_owned();
    let outputs = RawOutputs {
        coord: take(heads.coord),
        class: heads.class.map(take),
    };
    let next = HiddenState {
        layers: next.layers.iter().map(|&(h, c)| (take(h), take(c))).collect(),
    };
    Ok((outputs, next))
}

/// Feeds the rows of `inputs` (shape `[B, 2]` per step) through the stack.
/// Returns the final state and the head outputs after the last step.
pub fn run_prefix(model: &Model, steps: &[Array2<f64>], batch: usize) -> Result<(RawOutputs, HiddenState)> {
    let mut state = HiddenState::zeros(&model.config, batch);
    let mut last = None;
    for x in steps {
        let (out, next) = step(model, x.view(), &state)?;
        state = next;
        last = Some(out);
    }
    Ok((last.ok_or(NetworkError::EmptySequence)?, state))
}

/// Per-step raw head outputs for one sequence; output `t` is computed from
/// `deltas[..=t]` and parameterizes the distribution of `deltas[t + 1]`.
pub fn forward_sequence(model: &Model, seq: &RelativeSequence) -> Result<Vec<RawRow>> {
    if seq.deltas.is_empty() {
        return Err(NetworkError::EmptySequence);
    }
    let mut state = HiddenState::zeros(&model.config, 1);
    let mut out = Vec::with_capacity(seq.deltas.len());
    for d in &seq.deltas {
        let x = Array2::from_shape_vec((1, INPUT_DIM), d.to_vec()).unwrap();
        let (raw, next) = step(model, x.view(), &state)?;
        out.push(raw.row(0));
        state = next;
    }
    Ok(out)
}

/// Stacks step `t` of every sequence into a `[B, 2]` matrix.
pub fn batch_inputs(seqs: &[&RelativeSequence], steps: usize) -> Vec<Array2<f64>> {
    (0..steps)
        .map(|t| {
            let mut x = Array2::zeros((seqs.len(), INPUT_DIM));
            for (r, s) in seqs.iter().enumerate() {
                x.row_mut(r).assign(&Array1::from(s.deltas[t].to_vec()));
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, sigmoid, GradCheckConfig};

    fn cfg(kind: ModelKind, k: usize, m: usize, h: usize) -> ModelConfig {
        ModelConfig::new(kind, k, m, h)
    }

    #[test]
    fn init_is_seeded_and_in_range() {
        let c = cfg(ModelKind::Cgp, 3, 2, 4);
        let a = init_model(c, 5).unwrap();
        assert_eq!(a, init_model(c, 5).unwrap());
        assert_ne!(a, init_model(c, 6).unwrap());
        for p in a.params.iter() {
            if p.name.ends_with(".b") && p.name.starts_with("lstm") {
                assert!(p.value.slice(s![4..8]).iter().all(|&x| x == 1.0));
            }
            let outside = p.value.iter().filter(|x| x.abs() > INIT_SCALE).count();
            let allowed = if p.name.starts_with("lstm") && p.name.ends_with(".b") { 4 } else { 0 };
            assert_eq!(outside, allowed, "{}", p.name);
        }
    }

    #[test]
    fn head_widths() {
        let wide = init_model(cfg(ModelKind::Cgp, 10, 4, 3), 0).unwrap();
        assert_eq!(wide.params.get("coord_head.w").unwrap().value.shape(), &[9, 240]);
        assert_eq!(wide.params.get("class_head.b").unwrap().value.shape(), &[10]);
        let small = init_model(cfg(ModelKind::Cgp, 2, 1, 3), 0).unwrap();
        assert_eq!(small.params.get("coord_head.b").unwrap().value.len(), 12);
        let mdn = init_model(cfg(ModelKind::Mdn, 10, 4, 3), 0).unwrap();
        assert_eq!(mdn.params.get("mdn_head.b").unwrap().value.len(), 240);
        assert!(mdn.params.get("class_head.b").is_none());
        let d = init_model(cfg(ModelKind::Dlstm, 10, 4, 3), 0).unwrap();
        assert_eq!(d.params.get("point_head.b").unwrap().value.len(), 2);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(init_model(cfg(ModelKind::Cgp, 0, 2, 4), 0).is_err());
        assert!(init_model(cfg(ModelKind::Cgp, 2, 0, 4), 0).is_err());
        assert!(init_model(cfg(ModelKind::Cgp, 2, 2, 0), 0).is_err());
    }

    fn zeroed(c: ModelConfig) -> Model {
        let mut m = init_model(c, 0).unwrap();
        for p in m.params.iter_mut() {
            p.value.fill(0.0);
        }
        m
    }

    #[test]
    fn zero_weights_follow_bias_only_gate_algebra() {
        // All gates sigmoid(0) = 1/2 and candidate tanh(0) = 0, so c stays 0
        // and h = 0. With a bias b on the candidate gate, c = 1/2 tanh(b) and
        // h = 1/2 tanh(c).
        let c = cfg(ModelKind::Cgp, 2, 1, 2);
        let mut model = zeroed(c);
        let x = Array2::zeros((1, 2));
        let (_, st) = step(&model, x.view(), &HiddenState::zeros(&c, 1)).unwrap();
        assert!(st.layers.iter().all(|(h, c)| h.iter().all(|&v| v == 0.0) && c.iter().all(|&v| v == 0.0)));

        let bias = 0.8;
        for l in 0..NUM_LAYERS {
            let idx = model.params.position(&format!("lstm.{l}.b")).unwrap();
            model.params.at_mut(idx).value.slice_mut(s![4..6]).fill(bias);
        }
        let (_, st) = step(&model, x.view(), &HiddenState::zeros(&c, 1)).unwrap();
        let c_expected = sigmoid(0.0) * bias.tanh();
        let h_expected = sigmoid(0.0) * c_expected.tanh();
        for (h, cell) in &st.layers {
            assert!(cell.iter().all(|&v| (v - c_expected).abs() < 1e-15));
            assert!(h.iter().all(|&v| (v - h_expected).abs() < 1e-15));
        }
    }

    #[test]
    fn step_is_pure() {
        let c = cfg(ModelKind::Cgp, 3, 2, 5);
        let model = init_model(c, 2).unwrap();
        let before = model.params.checksum();
        let x = Array2::from_shape_vec((2, 2), vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let s0 = HiddenState::zeros(&c, 2);
        let a = step(&model, x.view(), &s0).unwrap();
        let b = step(&model, x.view(), &s0).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, model.params.checksum());
    }

    #[test]
    fn step_rejects_mismatched_state() {
        let c = cfg(ModelKind::Cgp, 2, 1, 3);
        let model = init_model(c, 0).unwrap();
        let x = Array2::zeros((2, 2));
        assert!(step(&model, x.view(), &HiddenState::zeros(&c, 1)).is_err());
        let other = cfg(ModelKind::Cgp, 2, 1, 4);
        assert!(step(&model, x.view(), &HiddenState::zeros(&other, 2)).is_err());
        let bad = Array2::zeros((1, 3));
        assert!(step(&model, bad.view(), &HiddenState::zeros(&c, 1)).is_err());
    }

    fn seq(n: usize) -> RelativeSequence {
        RelativeSequence {
            origin: [10.0, 20.0],
            deltas: (0..n).map(|i| [(i as f64 * 0.7).sin() * 3.0, (i as f64 * 0.3).cos()]).collect(),
        }
    }

    #[test]
    fn forward_sequence_lengths_and_causality() {
        let model = init_model(cfg(ModelKind::Cgp, 3, 2, 6), 1).unwrap();
        let before = model.params.checksum();
        assert_eq!(forward_sequence(&model, &seq(1)).unwrap().len(), 1);
        assert!(forward_sequence(&model, &seq(0)).is_err());
        let full = forward_sequence(&model, &seq(12)).unwrap();
        let part = forward_sequence(&model, &seq(12).prefix(5)).unwrap();
        assert_eq!(&full[..5], &part[..]);
        assert_eq!(before, model.params.checksum());
    }

    #[test]
    fn single_step_gradients_match_finite_differences() {
        // Scalar objective: weighted sum of the features after one step.
        let c = cfg(ModelKind::Cgp, 2, 1, 3);
        let model = init_model(c, 3).unwrap();
        let x = Array2::from_shape_vec((1, 2), vec![0.7, -1.3]).unwrap();
        let objective = |m: &Model, want_grads: bool| {
            let mut g = Graph::new();
            let bound = m.bind(&mut g);
            let xv = g.constant2(x.clone());
            let st = bound.zero_state(&mut g, 1);
            let (f, _) = bound.step(&mut g, xv, &st).unwrap();
            let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 9]), |i| 0.5 - 0.13 * i[1] as f64));
            let p = g.mul(f, w).unwrap();
            let total = g.sum(p);
            let grads = want_grads.then(|| {
                g.backward(total).unwrap();
                m.params.collect_grads(&g, &bound.vars)
            });
            (g.scalar(total), grads)
        };
        let (_, grads) = objective(&model, true);
        let cfg = GradCheckConfig::default();
        let report = gradient_check(
            &model.params,
            &grads.unwrap(),
            |p: &ParamSet| -> std::result::Result<f64, ()> {
                let m = Model { config: c, params: p.clone() };
                Ok(objective(&m, false).0)
            },
            &cfg,
        )
        .unwrap();
        let gate_entries = report.entries.iter().filter(|e| e.param.starts_with("lstm")).count();
        assert!(gate_entries > 0);
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn selecting_state_rows() {
        let c = cfg(ModelKind::Mdn, 2, 1, 2);
        let mut st = HiddenState::zeros(&c, 2);
        st.layers[0].0[[1, 0]] = 5.0;
        let picked = st.select(&[1, 1, 0]);
        assert_eq!(picked.batch(), 3);
        assert_eq!(picked.layers[0].0[[0, 0]], 5.0);
        assert_eq!(picked.layers[0].0[[2, 0]], 0.0);
    }
}
