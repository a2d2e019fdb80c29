//! Finite-difference check of the generator objective's gradients on a
//! tiny double-precision bundle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::error::Result;
use crate::losses::{AdversarialMode, LossWeights};
use crate::nn::{
    DiscriminatorConfig, ExtractorConfig, FeatureExtractor, GeneratorConfig, NetworkBundle, NetworkConfig, ParamStore,
};
use crate::tensor::Tensor;
use crate::training::{generator_objective, BoundBundle};

pub const TOY_RESOLUTION: usize = 8;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// The toy bundle and a fixed batch to evaluate it on.
pub struct Toy {
    pub nets: NetworkBundle<f64>,
    pub x: Tensor<f64>,
    pub y: Tensor<f64>,
    pub weights: LossWeights,
}

impl Toy {
    pub fn total_parameters(&self) -> usize {
        let n = &self.nets;
        [&n.g1.params, &n.g2.params, &n.d1.params, &n.d2.params].iter().map(|p| p.num_scalars()).sum::<usize>()
            + n.extractor.as_ref().map_or(0, |f| f.params.num_scalars())
    }
}

fn widen(params: &mut ParamStore<f64>, factor: f64) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

pub fn toy(seed: u64) -> Result<Toy> {
    let r = TOY_RESOLUTION;
    let config = NetworkConfig {
        generator: GeneratorConfig {
            input_resolution: r,
            base_filters: 1,
            residual_blocks: 1,
            downsamplings: 1,
            outer_kernel: 3,
        },
        discriminator: DiscriminatorConfig { input_resolution: r, base_filters: 1, strided_layers: 1 },
    };
    let f = ExtractorConfig { input_resolution: r, channels: vec![1, 1, 2, 2], strides: vec![1, 2, 2, 2] };
    let extractor = FeatureExtractor::new(f, seed ^ 0x5eed)?.frozen();
    let mut nets = NetworkBundle::new(config, Some(extractor), seed)?;
    // larger weights than the training init so every term contributes
    for p in [&mut nets.g1.params, &mut nets.g2.params, &mut nets.d1.params, &mut nets.d2.params] {
        widen(p, 20.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = || Tensor::from_fn(&[2, r, r, 1], |_| rng.random_range(-0.9..0.9));
    let (x, y) = (image(), image());
    Ok(Toy { nets, x, y, weights: LossWeights::with_layers(4) })
}

fn objective(toy: &Toy) -> Result<f64> {
    let g = Graph::new();
    let bound = BoundBundle::new(&g, &toy.nets, false);
    let obj = generator_objective(&g, &toy.nets, &bound, &toy.x, &toy.y, &toy.weights, AdversarialMode::NonSaturating)?;
    Ok(obj.total.item())
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub bundle_parameters: usize,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub objective: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Compare analytic gradients of the full objective with central
/// differences for every scalar of both generators.
pub fn check_generator_gradients(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut toy = toy(seed)?;
    let (analytic, value) = {
        let g = Graph::new();
        let bound = BoundBundle::new(&g, &toy.nets, true);
        let obj =
            generator_objective(&g, &toy.nets, &bound, &toy.x, &toy.y, &toy.weights, AdversarialMode::NonSaturating)?;
        let grads = g.backward(obj.total);
        let mut a = bound.g1.collect_grads(&grads).prefixed("g1");
        a.extend(bound.g2.collect_grads(&grads).prefixed("g2"));
        (a, obj.total.item())
    };

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (net, prefix) in [(0, "g1"), (1, "g2")] {
        let names: Vec<String> = toy.nets.g1.params.names().map(str::to_string).collect();
        for name in names {
            let len = toy.nets.g1.params.get(&name).expect("named").len();
            for i in 0..len {
                let eval = |toy: &mut Toy, delta: f64| -> Result<f64> {
                    let store = if net == 0 { &mut toy.nets.g1.params } else { &mut toy.nets.g2.params };
                    let t = store.get_mut(&name).expect("named");
                    let orig = t.data()[i];
                    t.data_mut()[i] = orig + delta;
                    let v = objective(toy);
                    let store = if net == 0 { &mut toy.nets.g1.params } else { &mut toy.nets.g2.params };
                    store.get_mut(&name).expect("named").data_mut()[i] = orig;
                    v
                };
                let numeric = (eval(&mut toy, h)? - eval(&mut toy, -h)?) / (2.0 * h);
                let a = analytic.get(&format!("{prefix}.{name}")).expect("gradient").data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                checked += 1;
                if rel > worst.0 || worst.1.is_empty() {
                    worst = (rel, format!("{prefix}.{name}[{i}]"));
                }
            }
        }
    }
    Ok(GradCheckReport {
        bundle_parameters: toy.total_parameters(),
        checked,
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        objective: value,
    })
}
