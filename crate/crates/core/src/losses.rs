//! Terms of the translation objective.
//!
//! With `x_rec = G2(G1(x))` and `y_rec = G1(G2(y))`:
//!
//! * adversarial value `E[ln D(y)] + E[ln(1 - D(G(x)))]`, maximized by the
//!   discriminator; the generator minimizes either its saturating form
//!   `E[ln(1 - D(G(x)))]` or the non-saturating `-E[ln D(G(x))]`;
//! * cycle consistency `mean|x - x_rec| + mean|y - y_rec|`;
//! * cycle-perceptual `sum_i l_cp_i (mean|F_i(x) - F_i(x_rec)| + mean|F_i(y) - F_i(y_rec)|)`;
//! * Gram matrices `Gr_i(x)[m, n] = 1/(h_i w_i d_i) sum_{h,w} F_i(x)[h,w,m] F_i(x)[h,w,n]`;
//! * cycle-style `sum_i l_cs_i / (4 d_i^2) (|Gr_i(x) - Gr_i(x_rec)|_F^2 + |Gr_i(y) - Gr_i(y_rec)|_F^2)`;
//! * total `adv_1 + adv_2 + l_cP cPercep + l_cyc cyc + l_cS cStyle`.
//!
//! Absolute-error norms are means over every element (batch included). Squared
//! Frobenius norms are per sample and averaged over the batch.
//!
//! Each term is built once, as autodiff graph operations; the plain
//! evaluators below run the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::FeatureStack;
use crate::tensor::{Nhwc, Real, Tensor};

/// Clamp applied to discriminator probabilities before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    Saturating,
    #[default]
    NonSaturating,
}

impl std::str::FromStr for AdversarialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(AdversarialMode::Saturating),
            "non_saturating" => Ok(AdversarialMode::NonSaturating),
            other => Err(Error::Config(format!("unknown adversarial mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for AdversarialMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdversarialMode::Saturating => "saturating",
            AdversarialMode::NonSaturating => "non_saturating",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_cp: f64,
    pub lambda_cs: f64,
    pub cp_layers: Vec<f64>,
    pub cs_layers: Vec<f64>,
}

impl LossWeights {
    /// Defaults for an extractor with `layers` tapped maps.
    pub fn with_layers(layers: usize) -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_cp: 1.0,
            lambda_cs: 10.0,
            cp_layers: vec![1.0; layers],
            cs_layers: vec![1.0; layers],
        }
    }

    /// Same weights with the perceptual and style terms switched off.
    pub fn without_feature_terms(&self) -> Self {
        LossWeights { lambda_cp: 0.0, lambda_cs: 0.0, ..self.clone() }
    }

    pub fn uses_features(&self) -> bool {
        self.lambda_cp > 0.0 || self.lambda_cs > 0.0
    }

    pub fn validate(&self, layers: Option<usize>) -> Result<()> {
        let all = [self.lambda_cyc, self.lambda_cp, self.lambda_cs]
            .into_iter()
            .chain(self.cp_layers.iter().copied())
            .chain(self.cs_layers.iter().copied());
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {v} must be finite and non-negative")));
            }
        }
        if self.cp_layers.len() != self.cs_layers.len() {
            return Err(Error::Config("per-layer weight vectors differ in length".into()));
        }
        if let Some(l) = layers {
            if self.cp_layers.len() != l {
                return Err(Error::Config(format!(
                    "{} per-layer weights for an extractor with {l} layers",
                    self.cp_layers.len()
                )));
            }
        }
        Ok(())
    }
}

/// Un-weighted terms of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_1: f64,
    pub adv_2: f64,
    pub cyc: f64,
    pub c_percep: f64,
    pub c_style: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_1: f64,
    pub adv_2: f64,
    pub cyc: f64,
    pub c_percep: f64,
    pub c_style: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.adv_1, self.adv_2, self.cyc, self.c_percep, self.c_style, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,adv_1,adv_2,cyc,cPercep,cStyle,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.adv_1, self.adv_2, self.cyc, self.c_percep, self.c_style, self.total
        )
    }
}

/// Weighted recombination of the objective terms.
pub fn total_objective(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("adv_1", parts.adv_1),
        ("adv_2", parts.adv_2),
        ("cyc", parts.cyc),
        ("cPercep", parts.c_percep),
        ("cStyle", parts.c_style),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical(format!("loss term {name}")));
    }
    let total = parts.adv_1
        + parts.adv_2
        + w.lambda_cp * parts.c_percep
        + w.lambda_cyc * parts.cyc
        + w.lambda_cs * parts.c_style;
    Ok(LossBreakdown {
        adv_1: parts.adv_1,
        adv_2: parts.adv_2,
        cyc: parts.cyc,
        c_percep: parts.c_percep,
        c_style: parts.c_style,
        total,
    })
}

// ---------------------------------------------------------------------------
// Graph terms

fn log_prob<'g, T: Real>(scores: Var<'g, T>) -> Var<'g, T> {
    scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS).ln()
}

fn log_one_minus<'g, T: Real>(scores: Var<'g, T>) -> Var<'g, T> {
    // 1 - s as (-s) + 1 keeps the graph to existing ops
    let g = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let ones = constant_like(g, T::ONE);
    ones.sub(g).ln()
}

fn constant_like<'g, T: Real>(v: Var<'g, T>, value: T) -> Var<'g, T> {
    v.graph_constant(Tensor::full(&v.shape(), value))
}

/// `E[ln D(real)] + E[ln(1 - D(fake))]`.
pub fn adversarial_value_term<'g, T: Real>(real: Var<'g, T>, fake: Var<'g, T>) -> Var<'g, T> {
    log_prob(real).mean().add(log_one_minus(fake).mean())
}

/// Quantity the discriminator minimizes: the negated adversarial value.
pub fn discriminator_loss_term<'g, T: Real>(real: Var<'g, T>, fake: Var<'g, T>) -> Var<'g, T> {
    adversarial_value_term(real, fake).scale(-1.0)
}

pub fn generator_adversarial_term<'g, T: Real>(fake: Var<'g, T>, mode: AdversarialMode) -> Var<'g, T> {
    match mode {
        AdversarialMode::Saturating => log_one_minus(fake).mean(),
        AdversarialMode::NonSaturating => log_prob(fake).mean().scale(-1.0),
    }
}

pub fn mean_abs_diff<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    a.sub(b).abs().mean()
}

pub fn cycle_consistency_term<'g, T: Real>(
    x: Var<'g, T>,
    x_rec: Var<'g, T>,
    y: Var<'g, T>,
    y_rec: Var<'g, T>,
) -> Var<'g, T> {
    mean_abs_diff(x, x_rec).add(mean_abs_diff(y, y_rec))
}

fn weighted_sum<'g, T: Real>(terms: Vec<(f64, Var<'g, T>)>) -> Option<Var<'g, T>> {
    terms.into_iter().map(|(w, t)| t.scale(w)).reduce(|a, b| a.add(b))
}

fn check_stacks<T: Real>(stacks: [&[Var<'_, T>]; 4], weights: &[f64]) -> Result<()> {
    let l = stacks[0].len();
    if stacks.iter().any(|s| s.len() != l) || weights.len() != l {
        return Err(Error::Shape(format!(
            "feature stacks of lengths {:?} with {} layer weights",
            stacks.iter().map(|s| s.len()).collect::<Vec<_>>(),
            weights.len()
        )));
    }
    for i in 0..l {
        let shape = stacks[0][i].shape();
        if stacks.iter().any(|s| s[i].shape() != shape) {
            return Err(Error::Shape(format!("layer {i} feature maps differ in shape")));
        }
    }
    Ok(())
}

/// Weighted cycle-perceptual sum over layers, unscaled by `lambda_cp`.
pub fn cycle_perceptual_term<'g, T: Real>(
    fx: &[Var<'g, T>],
    fx_rec: &[Var<'g, T>],
    fy: &[Var<'g, T>],
    fy_rec: &[Var<'g, T>],
    layer_weights: &[f64],
) -> Result<Var<'g, T>> {
    check_stacks([fx, fx_rec, fy, fy_rec], layer_weights)?;
    let terms = (0..fx.len())
        .map(|i| (layer_weights[i], mean_abs_diff(fx[i], fx_rec[i]).add(mean_abs_diff(fy[i], fy_rec[i]))))
        .collect();
    weighted_sum(terms).ok_or_else(|| Error::Shape("empty feature stack".into()))
}

/// Batch mean of `|Gr(a) - Gr(b)|_F^2` for one layer.
fn gram_distance<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    let d = a.shape()[3] as f64;
    // mean over (n, d, d) times d^2 is the per-sample Frobenius sum, batch-averaged
    a.gram().sub(b.gram()).square().mean().scale(d * d)
}

/// Weighted cycle-style sum over layers, unscaled by `lambda_cs`.
pub fn cycle_style_term<'g, T: Real>(
    fx: &[Var<'g, T>],
    fx_rec: &[Var<'g, T>],
    fy: &[Var<'g, T>],
    fy_rec: &[Var<'g, T>],
    layer_weights: &[f64],
) -> Result<Var<'g, T>> {
    check_stacks([fx, fx_rec, fy, fy_rec], layer_weights)?;
    let terms = (0..fx.len())
        .map(|i| {
            let d = fx[i].shape()[3] as f64;
            let both = gram_distance(fx[i], fx_rec[i]).add(gram_distance(fy[i], fy_rec[i]));
            (layer_weights[i] / (4.0 * d * d), both)
        })
        .collect();
    weighted_sum(terms).ok_or_else(|| Error::Shape("empty feature stack".into()))
}

// ---------------------------------------------------------------------------
// Plain evaluators

fn scores_ok<T: Real>(t: &Tensor<T>) -> Result<()> {
    if t.is_empty() || !t.all_finite() {
        return Err(Error::Numerical("discriminator scores".into()));
    }
    Ok(())
}

/// Adversarial value of a pair of score grids.
pub fn adversarial_value<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>) -> Result<f64> {
    scores_ok(d_real)?;
    scores_ok(d_fake)?;
    let g = Graph::new();
    let v = adversarial_value_term(g.constant(d_real.clone()), g.constant(d_fake.clone()));
    Ok(v.item().to_f64())
}

pub fn generator_adversarial_loss<T: Real>(d_fake: &Tensor<T>, mode: AdversarialMode) -> Result<f64> {
    scores_ok(d_fake)?;
    let g = Graph::new();
    Ok(generator_adversarial_term(g.constant(d_fake.clone()), mode).item().to_f64())
}

pub fn cycle_consistency_loss(
    x: &ImageTensor,
    x_rec: &ImageTensor,
    y: &ImageTensor,
    y_rec: &ImageTensor,
) -> Result<f64> {
    cycle_consistency_loss_tensors(x.tensor(), x_rec.tensor(), y.tensor(), y_rec.tensor())
}

pub fn cycle_consistency_loss_tensors<T: Real>(
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
    y: &Tensor<T>,
    y_rec: &Tensor<T>,
) -> Result<f64> {
    if x.shape() != x_rec.shape() || y.shape() != y_rec.shape() {
        return Err(Error::Shape(format!(
            "cycle pairs {:?}/{:?} and {:?}/{:?}",
            x.shape(),
            x_rec.shape(),
            y.shape(),
            y_rec.shape()
        )));
    }
    let g = Graph::new();
    let [a, b, c, d] = [x, x_rec, y, y_rec].map(|t| g.constant(t.clone()));
    Ok(cycle_consistency_term(a, b, c, d).item().to_f64())
}

/// Gram matrix of a single feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub layer_index: usize,
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub values: Vec<f64>,
}

impl GramMatrix {
    pub fn at(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.dim + n]
    }

    pub fn max_asymmetry(&self) -> f64 {
        let d = self.dim;
        (0..d * d).map(|i| (self.values[i] - self.values[(i % d) * d + i / d]).abs()).fold(0.0, f64::max)
    }
}

/// Gram matrix of one `(h, w, d)` (or `(1, h, w, d)`) feature map.
pub fn gram_matrix<T: Real>(feature_map: &Tensor<T>, layer_index: usize) -> Result<GramMatrix> {
    let map = match *feature_map.shape() {
        [h, w, d] => feature_map.clone().reshape(&[1, h, w, d])?,
        [1, _, _, _] => feature_map.clone(),
        ref s => return Err(Error::Shape(format!("gram_matrix expects (h, w, d), got {s:?}"))),
    };
    let s = Nhwc::of(&map)?;
    if s.h == 0 || s.w == 0 || s.c == 0 {
        return Err(Error::Shape("gram_matrix of an empty map".into()));
    }
    if !map.all_finite() {
        return Err(Error::Numerical(format!("feature map {layer_index}")));
    }
    let g = kernels::gram_forward(&map);
    Ok(GramMatrix { layer_index, dim: s.c, values: g.data().iter().map(|v| v.to_f64()).collect() })
}

fn stacks_as_vars<'g, T: Real>(g: &'g Graph<T>, s: &FeatureStack<T>) -> Vec<Var<'g, T>> {
    s.maps.iter().map(|m| g.constant(m.clone())).collect()
}

pub fn cycle_perceptual_loss<T: Real>(
    fx: &FeatureStack<T>,
    fx_rec: &FeatureStack<T>,
    fy: &FeatureStack<T>,
    fy_rec: &FeatureStack<T>,
    w: &LossWeights,
) -> Result<f64> {
    let g = Graph::new();
    let [a, b, c, d] = [fx, fx_rec, fy, fy_rec].map(|s| stacks_as_vars(&g, s));
    Ok(cycle_perceptual_term(&a, &b, &c, &d, &w.cp_layers)?.item().to_f64())
}

pub fn cycle_style_loss<T: Real>(
    fx: &FeatureStack<T>,
    fx_rec: &FeatureStack<T>,
    fy: &FeatureStack<T>,
    fy_rec: &FeatureStack<T>,
    w: &LossWeights,
) -> Result<f64> {
    let g = Graph::new();
    let [a, b, c, d] = [fx, fx_rec, fy, fy_rec].map(|s| stacks_as_vars(&g, s));
    Ok(cycle_style_term(&a, &b, &c, &d, &w.cs_layers)?.item().to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn stack(maps: Vec<Tensor<f64>>) -> FeatureStack<f64> {
        FeatureStack { maps }
    }

    fn one_layer(w: f64) -> LossWeights {
        LossWeights { lambda_cyc: 10.0, lambda_cp: 1.0, lambda_cs: 1.0, cp_layers: vec![w], cs_layers: vec![w] }
    }

    #[test]
    fn adversarial_value_at_one_half() {
        let v = adversarial_value(&grid(&[0.5; 4]), &grid(&[0.5; 4])).unwrap();
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adversarial_value_at_optimal_discriminator_is_near_zero() {
        let v = adversarial_value(&grid(&[1.0 - SCORE_EPS]), &grid(&[SCORE_EPS])).unwrap();
        assert!(v.abs() < 1e-6);
        // exact 0 / 1 scores are clamped, never NaN
        let v = adversarial_value(&grid(&[0.0, 1.0]), &grid(&[1.0, 0.0])).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn generator_modes_at_one_half() {
        let s = grid(&[0.5; 3]);
        let ns = generator_adversarial_loss(&s, AdversarialMode::NonSaturating).unwrap();
        let sat = generator_adversarial_loss(&s, AdversarialMode::Saturating).unwrap();
        assert!((ns - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((sat + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_saturating_decreases_with_score() {
        let vals: Vec<f64> = (3..=7)
            .map(|k| generator_adversarial_loss(&grid(&[k as f64 / 10.0]), AdversarialMode::NonSaturating).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn cycle_loss_of_constant_offsets() {
        let x = Tensor::<f64>::full(&[1, 4, 4, 1], 0.2);
        let xr = Tensor::<f64>::full(&[1, 4, 4, 1], 0.5);
        let v = cycle_consistency_loss_tensors(&x, &xr, &x, &x).unwrap();
        assert!((v - 0.3).abs() < 1e-12);
        assert_eq!(cycle_consistency_loss_tensors(&x, &x, &xr, &xr).unwrap(), 0.0);
        let bad = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        assert!(matches!(cycle_consistency_loss_tensors(&x, &bad, &x, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn gram_small_cases() {
        let f = Tensor::from_vec(&[1, 1, 2], vec![2.0f64, 3.0]).unwrap();
        let g = gram_matrix(&f, 0).unwrap();
        assert_eq!(g.values, vec![2.0, 3.0, 3.0, 4.5]);
        let f = Tensor::from_vec(&[2, 1, 1], vec![1.0f64, 3.0]).unwrap();
        assert_eq!(gram_matrix(&f, 0).unwrap().values, vec![5.0]);
        let z = Tensor::<f64>::zeros(&[3, 3, 4]);
        assert!(gram_matrix(&z, 0).unwrap().values.iter().all(|&v| v == 0.0));
        let nan = Tensor::from_vec(&[1, 1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(gram_matrix(&nan, 2), Err(Error::Numerical(_))));
    }

    #[test]
    fn perceptual_hand_example() {
        let a = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 1, 2, 1], vec![2.0, 4.0]).unwrap();
        let fx = stack(vec![a.clone()]);
        let fxr = stack(vec![b]);
        let v = cycle_perceptual_loss(&fx, &fxr, &fx, &fx, &one_layer(1.0)).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        let v2 = cycle_perceptual_loss(&fx, &fxr, &fx, &fx, &one_layer(2.0)).unwrap();
        assert!((v2 - 3.0).abs() < 1e-12);
        assert_eq!(cycle_perceptual_loss(&fx, &fx, &fx, &fx, &one_layer(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn style_hand_example() {
        // single 1x1x1 map: Gram = value^2, so sqrt(2) gives [[2]]
        let a = Tensor::from_vec(&[1, 1, 1, 1], vec![2f64.sqrt()]).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let v = cycle_style_loss(&stack(vec![a.clone()]), &stack(vec![z]), &stack(vec![a.clone()]), &stack(vec![a]), &one_layer(1.0))
            .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_count_mismatch_is_shape_error() {
        let a = stack(vec![Tensor::zeros(&[1, 1, 1, 1])]);
        let b = stack(vec![Tensor::zeros(&[1, 1, 1, 1]), Tensor::zeros(&[1, 1, 1, 1])]);
        assert!(matches!(cycle_style_loss(&a, &b, &a, &a, &one_layer(1.0)), Err(Error::Shape(_))));
        assert!(matches!(cycle_perceptual_loss(&a, &a, &a, &a, &LossWeights::with_layers(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn total_objective_arithmetic() {
        let w = LossWeights { lambda_cyc: 10.0, lambda_cp: 0.0, lambda_cs: 0.0, cp_layers: vec![], cs_layers: vec![] };
        let b = total_objective(LossParts { cyc: 0.3, ..Default::default() }, &w).unwrap();
        assert!((b.total - 3.0).abs() < 1e-12);
        let zero = LossWeights { lambda_cyc: 0.0, ..w.clone() };
        let parts = LossParts { adv_1: 0.7, adv_2: 0.4, cyc: 5.0, c_percep: 2.0, c_style: 1.0 };
        assert!((total_objective(parts, &zero).unwrap().total - 1.1).abs() < 1e-12);
        let err = total_objective(LossParts { c_style: f64::NAN, ..parts }, &w).unwrap_err();
        assert!(err.to_string().contains("cStyle"));
    }

    #[test]
    fn weights_validation() {
        let mut w = LossWeights::with_layers(4);
        assert!(w.validate(Some(4)).is_ok());
        assert!(w.validate(Some(3)).is_err());
        w.lambda_cs = -1.0;
        assert!(w.validate(None).is_err());
    }
}
