//! Per-class bivariate Gaussian mixtures, the categorical class distribution,
//! their class-weighted combination and the sampling primitives.
//!
//! Raw coordinate-head outputs are laid out in six contiguous blocks of
//! `K * M` columns each, `[pi | mu1 | mu2 | log_sigma1 | log_sigma2 | rho]`;
//! inside a block, column `c * M + m` belongs to class `c`, component `m`.

use crate::autodiff::logsumexp;
use crate::data::Point;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// `|rho|` is clamped to this after `tanh`.
pub const RHO_LIMIT: f64 = 0.9999;
pub const DEFAULT_LOG_SIGMA_FLOOR: f64 = -10.0;
/// Raw outputs per mixture component.
pub const PARAMS_PER_COMPONENT: usize = 6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistributionError {
    #[error("non-finite raw output at {0}")]
    NonFinite(String),
    #[error("raw width {got} does not match {expected}")]
    Width { expected: usize, got: usize },
    #[error("invalid covariance: sigma {sigma:?}, rho {rho}")]
    Covariance { sigma: Point, rho: f64 },
    #[error("class {class} outside [0, {num_classes})")]
    Class { class: usize, num_classes: usize },
}

pub type Result<T> = std::result::Result<T, DistributionError>;

/// Block order of the raw coordinate head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawBlock {
    Pi = 0,
    Mu1,
    Mu2,
    LogSigma1,
    LogSigma2,
    Rho,
}

impl RawBlock {
    pub const ALL: [RawBlock; 6] = [
        RawBlock::Pi,
        RawBlock::Mu1,
        RawBlock::Mu2,
        RawBlock::LogSigma1,
        RawBlock::LogSigma2,
        RawBlock::Rho,
    ];

    fn name(self) -> &'static str {
        match self {
            RawBlock::Pi => "pi",
            RawBlock::Mu1 => "mu1",
            RawBlock::Mu2 => "mu2",
            RawBlock::LogSigma1 => "log_sigma1",
            RawBlock::LogSigma2 => "log_sigma2",
            RawBlock::Rho => "rho",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstrainOptions {
    /// Lower bound applied to raw log-sigma before `exp`; `None` disables it.
    pub log_sigma_floor: Option<f64>,
}

impl Default for ConstrainOptions {
    fn default() -> Self {
        Self {
            log_sigma_floor: Some(DEFAULT_LOG_SIGMA_FLOOR),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub pi: f64,
    pub mu: Point,
    pub sigma: Point,
    pub rho: f64,
}

/// Mixture parameters for every class, `components[c * M + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub num_classes: usize,
    pub num_components: usize,
    pub components: Vec<Component>,
}

impl GmmParams {
    pub fn class(&self, c: usize) -> Result<&[Component]> {
        if c >= self.num_classes {
            return Err(DistributionError::Class {
                class: c,
                num_classes: self.num_classes,
            });
        }
        let m = self.num_components;
        Ok(&self.components[c * m..(c + 1) * m])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs(pub Vec<f64>);

impl ClassProbs {
    pub fn uniform(k: usize) -> Self {
        ClassProbs(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, c: usize) -> Self {
        let mut p = vec![0.0; k];
        p[c] = 1.0;
        ClassProbs(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

fn check_finite(raw: &[f64], what: impl Fn(usize) -> String) -> Result<()> {
    match raw.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(DistributionError::NonFinite(what(i))),
        None => Ok(()),
    }
}

/// Maps one row of raw coordinate-head outputs onto valid mixture parameters:
/// per-class softmax for `pi`, `exp` for `sigma`, clamped `tanh` for `rho`.
pub fn constrain_gmm(
    raw: &[f64],
    num_classes: usize,
    num_components: usize,
    options: ConstrainOptions,
) -> Result<GmmParams> {
    let width = num_classes * num_components;
    if raw.len() != width * PARAMS_PER_COMPONENT {
        return Err(DistributionError::Width {
            expected: width * PARAMS_PER_COMPONENT,
            got: raw.len(),
        });
    }
    check_finite(raw, |i| {
        let block = RawBlock::ALL[i / width];
        let j = i % width;
        format!(
            "coord_head.{}[class={}, component={}]",
            block.name(),
            j / num_components,
            j % num_components
        )
    })?;
    let block = |b: RawBlock, j: usize| raw[b as usize * width + j];
    let floor = |s: f64| match options.log_sigma_floor {
        Some(f) => s.max(f),
        None => s,
    };
    let mut components = Vec::with_capacity(width);
    for c in 0..num_classes {
        let logits: Vec<f64> = (0..num_components)
            .map(|m| block(RawBlock::Pi, c * num_components + m))
            .collect();
        let lse = logsumexp(logits.iter().copied());
        for (m, logit) in logits.iter().enumerate() {
            let j = c * num_components + m;
            components.push(Component {
                pi: (logit - lse).exp(),
                mu: [block(RawBlock::Mu1, j), block(RawBlock::Mu2, j)],
                sigma: [
                    floor(block(RawBlock::LogSigma1, j)).exp(),
                    floor(block(RawBlock::LogSigma2, j)).exp(),
                ],
                rho: block(RawBlock::Rho, j).tanh().clamp(-RHO_LIMIT, RHO_LIMIT),
            });
        }
    }
    Ok(GmmParams {
        num_classes,
        num_components,
        components,
    })
}

/// Softmax over raw class logits.
pub fn constrain_classes(raw: &[f64]) -> Result<ClassProbs> {
    check_finite(raw, |i| format!("class_head[{i}]"))?;
    let lse = logsumexp(raw.iter().copied());
    Ok(ClassProbs(raw.iter().map(|x| (x - lse).exp()).collect()))
}

pub fn constrain(
    raw_coord: &[f64],
    raw_class: &[f64],
    num_components: usize,
    options: ConstrainOptions,
) -> Result<(GmmParams, ClassProbs)> {
    let probs = constrain_classes(raw_class)?;
    let gmm = constrain_gmm(raw_coord, raw_class.len(), num_components, options)?;
    Ok((gmm, probs))
}

fn check_covariance(sigma: Point, rho: f64) -> Result<()> {
    let ok = sigma[0] > 0.0 && sigma[1] > 0.0 && rho.abs() < 1.0;
    if !ok {
        return Err(DistributionError::Covariance { sigma, rho });
    }
    Ok(())
}

/// Log density of the correlated bivariate normal.
pub fn bivariate_log_pdf(x: Point, mu: Point, sigma: Point, rho: f64) -> Result<f64> {
    check_covariance(sigma, rho)?;
    let d1 = (x[0] - mu[0]) / sigma[0];
    let d2 = (x[1] - mu[1]) / sigma[1];
    let one_minus = 1.0 - rho * rho;
    let z = d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2;
    Ok(-(2.0 * PI).ln() - sigma[0].ln() - sigma[1].ln() - 0.5 * one_minus.ln() - z / (2.0 * one_minus))
}

pub fn bivariate_pdf(x: Point, mu: Point, sigma: Point, rho: f64) -> Result<f64> {
    check_covariance(sigma, rho)?;
    let d1 = (x[0] - mu[0]) / sigma[0];
    let d2 = (x[1] - mu[1]) / sigma[1];
    let one_minus = 1.0 - rho * rho;
    let z = d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2;
    Ok((-z / (2.0 * one_minus)).exp() / (2.0 * PI * sigma[0] * sigma[1] * one_minus.sqrt()))
}

fn component_log_pdf(x: Point, k: &Component) -> Result<f64> {
    Ok(k.pi.ln() + bivariate_log_pdf(x, k.mu, k.sigma, k.rho)?)
}

pub fn class_gmm_pdf(x: Point, params: &GmmParams, c: usize) -> Result<f64> {
    let mut total = 0.0;
    for k in params.class(c)? {
        total += k.pi * bivariate_pdf(x, k.mu, k.sigma, k.rho)?;
    }
    Ok(total)
}

pub fn class_gmm_log_pdf(x: Point, params: &GmmParams, c: usize) -> Result<f64> {
    let terms = params
        .class(c)?
        .iter()
        .map(|k| component_log_pdf(x, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(logsumexp(terms.iter().copied()))
}

/// `Σ_c p_c · class_gmm_pdf(x, c)`.
pub fn mixture_posterior(x: Point, params: &GmmParams, probs: &ClassProbs) -> Result<f64> {
    let mut total = 0.0;
    for (c, &p) in probs.0.iter().enumerate() {
        if p > 0.0 {
            total += p * class_gmm_pdf(x, params, c)?;
        }
    }
    Ok(total)
}

pub fn mixture_log_posterior(x: Point, params: &GmmParams, probs: &ClassProbs) -> Result<f64> {
    let mut terms = Vec::with_capacity(probs.len());
    for (c, &p) in probs.0.iter().enumerate() {
        if p > 0.0 {
            terms.push(p.ln() + class_gmm_log_pdf(x, params, c)?);
        }
    }
    Ok(logsumexp(terms.iter().copied()))
}

/// Index drawn from the (normalized) weights; consumes one uniform.
pub fn sample_index<R: Rng + ?Sized>(weights: impl IntoIterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.into_iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

pub fn sample_class<R: Rng + ?Sized>(probs: &ClassProbs, rng: &mut R) -> usize {
    sample_index(probs.0.iter().copied(), rng)
}

/// Draws a component of class `c`, then a point from it through the Cholesky
/// factor `[[s1, 0], [rho s2, s2 sqrt(1 - rho^2)]]`. Always consumes one
/// uniform and two standard normals.
pub fn sample_coord<R: Rng + ?Sized>(params: &GmmParams, c: usize, rng: &mut R) -> Result<Point> {
    let comps = params.class(c)?;
    let m = sample_index(comps.iter().map(|k| k.pi), rng);
    let k = &comps[m];
    check_covariance(k.sigma, k.rho)?;
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Ok([
        k.mu[0] + k.sigma[0] * z1,
        k.mu[1] + k.sigma[1] * (k.rho * z1 + (1.0 - k.rho * k.rho).sqrt() * z2),
    ])
}

/// `Σ_m π[c,m] μ[c,m]`.
pub fn mean_coord(params: &GmmParams, c: usize) -> Result<Point> {
    Ok(params.class(c)?.iter().fold([0.0, 0.0], |acc, k| {
        [acc[0] + k.pi * k.mu[0], acc[1] + k.pi * k.mu[1]]
    }))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Density through the explicit 2x2 covariance inverse and determinant.
    pub(crate) fn matrix_form_pdf(x: Point, mu: Point, sigma: Point, rho: f64) -> f64 {
        let (a, b, d) = (
            sigma[0] * sigma[0],
            rho * sigma[0] * sigma[1],
            sigma[1] * sigma[1],
        );
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let v = [x[0] - mu[0], x[1] - mu[1]];
        let q = v[0] * (inv[0][0] * v[0] + inv[0][1] * v[1]) + v[1] * (inv[1][0] * v[0] + inv[1][1] * v[1]);
        (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
    }

    pub(crate) fn random_params(rng: &mut ChaCha8Rng, k: usize, m: usize) -> (GmmParams, ClassProbs) {
        let raw: Vec<f64> = (0..k * m * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        constrain(&raw, &logits, m, ConstrainOptions::default()).unwrap()
    }

    #[test]
    fn zero_raw_gives_neutral_parameters() {
        let (gmm, probs) = constrain(&[0.0; 2 * 3 * 6], &[0.0; 2], 3, ConstrainOptions::default()).unwrap();
        for k in &gmm.components {
            assert!((k.pi - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(k.sigma, [1.0, 1.0]);
            assert_eq!(k.rho, 0.0);
            assert_eq!(k.mu, [0.0, 0.0]);
        }
        assert_eq!(probs.0, vec![0.5, 0.5]);
    }

    #[test]
    fn sigma_and_rho_transforms() {
        let mut raw = [0.0; 6];
        raw[RawBlock::LogSigma1 as usize] = 1.0;
        raw[RawBlock::Rho as usize] = 20.0;
        let g = constrain_gmm(&raw, 1, 1, ConstrainOptions::default()).unwrap();
        assert!((g.components[0].sigma[0] - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(g.components[0].rho, RHO_LIMIT);
        raw[RawBlock::LogSigma2 as usize] = -50.0;
        let floored = constrain_gmm(&raw, 1, 1, ConstrainOptions::default()).unwrap();
        assert_eq!(floored.components[0].sigma[1], (-10.0f64).exp());
        let raw_sigma = constrain_gmm(&raw, 1, 1, ConstrainOptions { log_sigma_floor: None }).unwrap();
        assert_eq!(raw_sigma.components[0].sigma[1], (-50.0f64).exp());
    }

    #[test]
    fn non_finite_raw_names_the_parameter() {
        let mut raw = vec![0.0; 2 * 2 * 6];
        raw[RawBlock::Rho as usize * 4 + 3] = f64::NAN;
        let err = constrain_gmm(&raw, 2, 2, ConstrainOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite raw output at coord_head.rho[class=1, component=1]");
        assert!(constrain_classes(&[0.0, f64::INFINITY]).is_err());
        assert!(constrain_gmm(&raw[1..], 2, 2, ConstrainOptions::default()).is_err());
    }

    #[test]
    fn bivariate_reference_values() {
        let peak = bivariate_pdf([0.0, 0.0], [0.0, 0.0], [1.0, 1.0], 0.0).unwrap();
        assert!((peak - 0.159_154_943_091_895_35).abs() < 1e-15);
        let off = bivariate_pdf([1.0, 0.0], [0.0, 0.0], [1.0, 1.0], 0.0).unwrap();
        assert!((off - 0.096_532_352_630_053_9).abs() < 1e-15);
        let (x, mu, s, r) = ([0.5, -0.3], [0.1, 0.2], [0.7, 1.3], 0.4);
        let expected = matrix_form_pdf(x, mu, s, r);
        assert!((bivariate_pdf(x, mu, s, r).unwrap() - expected).abs() < 1e-12);
        assert!(bivariate_pdf(x, mu, [0.0, 1.0], 0.0).is_err());
        assert!(bivariate_pdf(x, mu, s, 1.0).is_err());
    }

    #[test]
    fn class_gmm_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g1, _) = random_params(&mut rng, 2, 1);
        let x = [0.3, -0.2];
        let k = g1.components[1];
        assert!((class_gmm_pdf(x, &g1, 1).unwrap() - bivariate_pdf(x, k.mu, k.sigma, k.rho).unwrap()).abs() < 1e-15);

        let (mut g2, _) = random_params(&mut rng, 1, 2);
        g2.components[0].pi = 0.5;
        g2.components[1].pi = 0.5;
        let (a, b) = (g2.components[0], g2.components[1]);
        let mean = 0.5 * bivariate_pdf(x, a.mu, a.sigma, a.rho).unwrap()
            + 0.5 * bivariate_pdf(x, b.mu, b.sigma, b.rho).unwrap();
        assert!((class_gmm_pdf(x, &g2, 0).unwrap() - mean).abs() < 1e-15);
        assert!(class_gmm_pdf(x, &g2, 1).is_err());
    }

    #[test]
    fn class_gmm_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (g, _) = random_params(&mut rng, 1, 4);
        let x = [0.2, 0.7];
        let mut naive = 0.0;
        for k in &g.components {
            naive += k.pi * matrix_form_pdf(x, k.mu, k.sigma, k.rho);
        }
        assert!((class_gmm_pdf(x, &g, 0).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn mixture_posterior_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, _) = random_params(&mut rng, 3, 2);
        let x = [-0.4, 0.9];
        let onehot = ClassProbs::one_hot(3, 2);
        assert_eq!(mixture_posterior(x, &g, &onehot).unwrap(), class_gmm_pdf(x, &g, 2).unwrap());

        let (g2, _) = random_params(&mut rng, 2, 1);
        let half = ClassProbs(vec![0.5, 0.5]);
        let avg = 0.5 * (class_gmm_pdf(x, &g2, 0).unwrap() + class_gmm_pdf(x, &g2, 1).unwrap());
        assert!((mixture_posterior(x, &g2, &half).unwrap() - avg).abs() < 1e-15);

        let (g3, p3) = random_params(&mut rng, 3, 2);
        let mut oracle = 0.0;
        for c in 0..3 {
            for m in 0..2 {
                let k = g3.components[c * 2 + m];
                oracle += p3.0[c] * k.pi * matrix_form_pdf(x, k.mu, k.sigma, k.rho);
            }
        }
        assert!((mixture_posterior(x, &g3, &p3).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn class_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let onehot = ClassProbs::one_hot(4, 3);
        assert!((0..100).all(|_| sample_class(&onehot, &mut rng) == 3));
        let half = ClassProbs(vec![0.5, 0.5]);
        let ones = (0..10_000).filter(|_| sample_class(&half, &mut rng) == 1).count();
        let freq = ones as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
        let draws = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_class(&half, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draws(4), draws(4));
    }

    fn single(mu: Point, sigma: Point, rho: f64) -> GmmParams {
        GmmParams {
            num_classes: 1,
            num_components: 1,
            components: vec![Component { pi: 1.0, mu, sigma, rho }],
        }
    }

    #[test]
    fn vanishing_variance_sample_is_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = single([3.0, -2.0], [1e-12, 1e-12], 0.7);
        for _ in 0..100 {
            let x = sample_coord(&g, 0, &mut rng).unwrap();
            assert!((x[0] - 3.0).abs() < 1e-9 && (x[1] + 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_moments_match_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mu, sigma, rho) = ([1.5, -0.5], [0.8, 2.0], -0.6);
        let g = single(mu, sigma, rho);
        let n = 50_000;
        let xs: Vec<Point> = (0..n).map(|_| sample_coord(&g, 0, &mut rng).unwrap()).collect();
        let mean = |d: usize| xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let (m0, m1) = (mean(0), mean(1));
        assert!((m0 - mu[0]).abs() < 0.05 * sigma[0]);
        assert!((m1 - mu[1]).abs() < 0.05 * sigma[1]);
        let var = |d: usize, m: f64| xs.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / n as f64;
        let cov = xs.iter().map(|x| (x[0] - m0) * (x[1] - m1)).sum::<f64>() / n as f64;
        let corr = cov / (var(0, m0) * var(1, m1)).sqrt();
        assert!((corr - rho).abs() < 0.05, "{corr}");
    }

    #[test]
    fn one_hot_pi_always_picks_that_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tight = [1e-12, 1e-12];
        let g = GmmParams {
            num_classes: 1,
            num_components: 3,
            components: vec![
                Component { pi: 0.0, mu: [0.0, 0.0], sigma: tight, rho: 0.0 },
                Component { pi: 1.0, mu: [5.0, 5.0], sigma: tight, rho: 0.0 },
                Component { pi: 0.0, mu: [9.0, 9.0], sigma: tight, rho: 0.0 },
            ],
        };
        for _ in 0..200 {
            let x = sample_coord(&g, 0, &mut rng).unwrap();
            assert!((x[0] - 5.0).abs() < 1e-9);
        }
        assert_eq!(mean_coord(&g, 0).unwrap(), [5.0, 5.0]);
    }

    #[test]
    fn mixture_posterior_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let (g, p) = random_params(&mut rng, 2, 2);
            assert!((grid_integral(&g, &p) - 1.0).abs() < 1e-3);
        }
    }

    /// Midpoint rule over the union box `mean ± 8 sigma` of all components.
    pub(crate) fn grid_integral(g: &GmmParams, p: &ClassProbs) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for k in &g.components {
            for d in 0..2 {
                lo[d] = lo[d].min(k.mu[d] - 8.0 * k.sigma[d]);
                hi[d] = hi[d].max(k.mu[d] + 8.0 * k.sigma[d]);
            }
        }
        let n = 600;
        let (hx, hy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo[0] + (i as f64 + 0.5) * hx, lo[1] + (j as f64 + 0.5) * hy];
                total += mixture_posterior(x, g, p).unwrap();
            }
        }
        total * hx * hy
    }

    proptest! {
        #[test]
        fn constrained_params_are_valid(raw in proptest::collection::vec(-40.0f64..40.0, 36), logits in proptest::collection::vec(-40.0f64..40.0, 3)) {
            let (g, p) = constrain(&raw, &logits, 2, ConstrainOptions::default()).unwrap();
            prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.0.iter().all(|&x| x >= 0.0));
            for c in 0..3 {
                let comps = g.class(c).unwrap();
                prop_assert!((comps.iter().map(|k| k.pi).sum::<f64>() - 1.0).abs() < 1e-9);
                for k in comps {
                    prop_assert!(k.pi >= 0.0 && k.sigma[0] > 0.0 && k.sigma[1] > 0.0 && k.rho.abs() < 1.0);
                }
            }
        }

        #[test]
        fn log_and_linear_densities_agree(
            x in (-5.0f64..5.0, -5.0f64..5.0),
            raw in proptest::collection::vec(-1.5f64..1.5, 24),
            logits in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let (g, p) = constrain(&raw, &logits, 2, ConstrainOptions::default()).unwrap();
            let x = [x.0, x.1];
            let lin = mixture_posterior(x, &g, &p).unwrap();
            if lin >= 1e-290 {
                let log = mixture_log_posterior(x, &g, &p).unwrap();
                prop_assert!(((log.exp() - lin) / lin).abs() < 1e-10);
                let k = g.components[0];
                let l1 = bivariate_log_pdf(x, k.mu, k.sigma, k.rho).unwrap();
                let p1 = bivariate_pdf(x, k.mu, k.sigma, k.rho).unwrap();
                prop_assert!(p1 < 1e-290 || ((l1.exp() - p1) / p1).abs() < 1e-10);
            }
        }
    }
}
