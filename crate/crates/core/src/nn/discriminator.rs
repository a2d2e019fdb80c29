//! Patch discriminator: a fully convolutional classifier emitting a grid of
//! real/fake probabilities, one per overlapping receptive-field patch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::nn::params::{normal, ParamStore};
use crate::tensor::{Real, Tensor};

const INIT_STD: f64 = 0.02;
const SLOPE: f64 = 0.2;
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_resolution: usize,
    pub base_filters: usize,
    /// Stride-2 stages before the two stride-1 stages.
    pub strided_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { input_resolution: 64, base_filters: 32, strided_layers: 2 }
    }
}

impl DiscriminatorConfig {
    fn geoms(&self) -> Vec<ConvGeom> {
        let mut g: Vec<ConvGeom> =
            (0..self.strided_layers).map(|_| ConvGeom { kernel: KERNEL, stride: 2, pad: 1 }).collect();
        g.push(ConvGeom { kernel: KERNEL, stride: 1, pad: 1 });
        g.push(ConvGeom { kernel: KERNEL, stride: 1, pad: 1 });
        g
    }

    /// Side length, in input pixels, of the patch behind one output score.
    pub fn receptive_field(&self) -> usize {
        self.geoms().iter().rev().fold(1, |rf, g| (rf - 1) * g.stride + g.kernel)
    }

    /// Side length of the score grid.
    pub fn grid_size(&self) -> usize {
        self.geoms().iter().fold(self.input_resolution, |s, g| g.conv_out(s))
    }

    fn widths(&self) -> Vec<usize> {
        (0..=self.strided_layers).map(|i| self.base_filters << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return Err(Error::Config("discriminator base_filters must be positive".into()));
        }
        let mut s = self.input_resolution;
        for g in self.geoms() {
            if s + 2 * g.pad < g.kernel {
                return Err(Error::Config(format!(
                    "resolution {} too small for {} strided discriminator layers",
                    self.input_resolution, self.strided_layers
                )));
            }
            s = g.conv_out(s);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.widths();
        let mut p = ParamStore::new();
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            p.insert(&format!("conv{i}.w"), normal(&mut rng, &[KERNEL, KERNEL, cin, w], INIT_STD));
            if i == 0 {
                p.insert("conv0.b", Tensor::zeros(&[w]));
            }
            cin = w;
        }
        p.insert("score.w", normal(&mut rng, &[KERNEL, KERNEL, cin, 1], INIT_STD));
        p.insert("score.b", Tensor::zeros(&[1]));
        Ok(Discriminator { config, params: p })
    }

    /// Zero the scoring layer so every patch reads exactly 0.5.
    pub fn zero_score_layer(&mut self) {
        for name in ["score.w", "score.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(T::ZERO);
            }
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.input_resolution;
        match *shape {
            [_, h, w, 1] if h == r && w == r => Ok(()),
            _ => Err(Error::Shape(format!("discriminator expects (n, {r}, {r}, 1), got {shape:?}"))),
        }
    }

    /// Patch probabilities `(n, grid, grid, 1)`, each strictly inside (0, 1)
    /// up to floating-point saturation.
    pub fn forward<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let geoms = self.config.geoms();
        let n_feat = self.config.strided_layers + 1;
        let mut h = x;
        for (i, geom) in geoms.iter().take(n_feat).enumerate() {
            let bias = (i == 0).then(|| bound.get("conv0.b"));
            h = h.conv2d(bound.get(&format!("conv{i}.w")), bias, *geom);
            if i > 0 {
                h = h.instance_norm();
            }
            h = h.leaky_relu(SLOPE);
        }
        h.conv2d(bound.get("score.w"), Some(bound.get("score.b")), geoms[n_feat]).sigmoid()
    }

    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let bound = g.bind(&self.params, false);
        let out = self.forward(&bound, g.constant(x.clone()));
        let v = out.value();
        Ok((*v).clone())
    }
}
