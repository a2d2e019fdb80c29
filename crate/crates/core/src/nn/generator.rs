//! Residual-block translation generator: a reflection-padded stem, strided
//! downsampling, a stack of residual blocks, transposed-convolution
//! upsampling and a `tanh` head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, ConvTransposeGeom};
use crate::nn::params::{normal, ParamStore};
use crate::tensor::{Real, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_resolution: usize,
    pub base_filters: usize,
    pub residual_blocks: usize,
    /// Number of stride-2 stages (and matching upsampling stages).
    pub downsamplings: usize,
    /// Kernel size of the stem and head convolutions.
    pub outer_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_resolution: 64,
            base_filters: 32,
            residual_blocks: 4,
            downsamplings: 2,
            outer_kernel: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.downsamplings;
        if self.base_filters == 0 || self.outer_kernel % 2 == 0 {
            return Err(Error::Config(format!("invalid generator config {self:?}")));
        }
        if self.input_resolution % factor != 0 || self.input_resolution / factor < 2 {
            return Err(Error::Config(format!(
                "resolution {} not divisible into {} downsampling stages",
                self.input_resolution, self.downsamplings
            )));
        }
        if self.outer_kernel / 2 >= self.input_resolution {
            return Err(Error::Config("outer kernel larger than the image".into()));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_filters << stage
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let k = config.outer_kernel;
        p.insert("stem.w", normal(&mut rng, &[k, k, 1, config.width(0)], INIT_STD));
        for i in 0..config.downsamplings {
            p.insert(
                &format!("down{i}.w"),
                normal(&mut rng, &[3, 3, config.width(i), config.width(i + 1)], INIT_STD),
            );
        }
        let inner = config.width(config.downsamplings);
        for r in 0..config.residual_blocks {
            p.insert(&format!("res{r}.a.w"), normal(&mut rng, &[3, 3, inner, inner], INIT_STD));
            p.insert(&format!("res{r}.b.w"), normal(&mut rng, &[3, 3, inner, inner], INIT_STD));
        }
        for i in (0..config.downsamplings).rev() {
            p.insert(
                &format!("up{i}.w"),
                normal(&mut rng, &[config.width(i + 1), 3, 3, config.width(i)], INIT_STD),
            );
        }
        p.insert("head.w", normal(&mut rng, &[k, k, config.width(0), 1], INIT_STD));
        p.insert("head.b", Tensor::zeros(&[1]));
        Ok(Generator { config, params: p })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.input_resolution;
        match *shape {
            [_, h, w, 1] if h == r && w == r => Ok(()),
            _ => Err(Error::Shape(format!("generator expects (n, {r}, {r}, 1), got {shape:?}"))),
        }
    }

    /// Graph forward pass using parameters already bound into `g`.
    pub fn forward<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let c = &self.config;
        let half = c.outer_kernel / 2;
        let same = |k| ConvGeom { kernel: k, stride: 1, pad: 0 };
        let down = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let up = ConvTransposeGeom { kernel: 3, stride: 2, pad: 1, output_pad: 1 };

        let mut h = x
            .reflect_pad(half)
            .conv2d(bound.get("stem.w"), None, same(c.outer_kernel))
            .instance_norm()
            .relu();
        for i in 0..c.downsamplings {
            h = h.conv2d(bound.get(&format!("down{i}.w")), None, down).instance_norm().relu();
        }
        for r in 0..c.residual_blocks {
            let t = h
                .reflect_pad(1)
                .conv2d(bound.get(&format!("res{r}.a.w")), None, same(3))
                .instance_norm()
                .relu()
                .reflect_pad(1)
                .conv2d(bound.get(&format!("res{r}.b.w")), None, same(3))
                .instance_norm();
            h = h.add(t);
        }
        for i in (0..c.downsamplings).rev() {
            h = h
                .conv_transpose2d(bound.get(&format!("up{i}.w")), None, up)
                .instance_norm()
                .relu();
        }
        h.reflect_pad(half)
            .conv2d(bound.get("head.w"), Some(bound.get("head.b")), same(c.outer_kernel))
            .tanh()
    }

    /// Inference on a plain tensor, no gradients.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let bound = g.bind(&self.params, false);
        let out = self.forward(&bound, g.constant(x.clone()));
        let v = out.value();
        Ok((*v).clone())
    }
}

impl Generator<f32> {
    pub fn translate(&self, x: &ImageTensor) -> Result<ImageTensor> {
        ImageTensor::new(self.forward_tensor(x.tensor())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            input_resolution: 16,
            base_filters: 4,
            residual_blocks: 2,
            downsamplings: 2,
            outer_kernel: 7,
        }
    }

    fn random_image(n: usize, r: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, r, r, 1], |_| rng.random_range(-1.0..=1.0))
    }

    #[test]
    fn output_matches_input_shape_and_range() {
        let g = Generator::<f32>::new(tiny(), 1).unwrap();
        let x = random_image(2, 16, 2);
        let y = g.forward_tensor(&x).unwrap();
        assert_eq!(y.shape(), &[2, 16, 16, 1]);
        let (lo, hi) = y.min_max().unwrap();
        assert!(lo >= -1.0 && hi <= 1.0);
    }

    #[test]
    fn batch_forward_equals_per_sample_forward() {
        let g = Generator::<f32>::new(tiny(), 3).unwrap();
        let x = random_image(2, 16, 4);
        let both = g.forward_tensor(&x).unwrap();
        for i in 0..2 {
            let single = g.forward_tensor(&x.narrow(i, i + 1)).unwrap();
            for (a, b) in single.data().iter().zip(both.outer(i)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let g = Generator::<f32>::new(tiny(), 1).unwrap();
        let err = g.forward_tensor(&random_image(1, 32, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let cfg = GeneratorConfig { input_resolution: 18, ..tiny() };
        assert!(matches!(Generator::<f32>::new(cfg, 0), Err(Error::Config(_))));
    }
}
