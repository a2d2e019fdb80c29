//! The two generators, two discriminators and the frozen feature extractor.

pub mod discriminator;
pub mod extractor;
pub mod generator;
pub mod params;

use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use extractor::{
    pretrain_feature_extractor, ExtractorConfig, FeatureExtractor, FeatureStack, PretrainOptions,
    PretrainOutcome,
};
pub use generator::{Generator, GeneratorConfig};
pub use params::ParamStore;

use crate::error::Result;
use crate::tensor::Real;

/// Architecture descriptor of a [`NetworkBundle`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl NetworkConfig {
    pub fn at_resolution(resolution: usize) -> Self {
        NetworkConfig {
            generator: GeneratorConfig { input_resolution: resolution, ..Default::default() },
            discriminator: DiscriminatorConfig { input_resolution: resolution, ..Default::default() },
        }
    }
}

/// `g1: X -> Y`, `g2: Y -> X`, `d1` judges domain Y, `d2` judges domain X.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkBundle<T> {
    pub config: NetworkConfig,
    pub g1: Generator<T>,
    pub g2: Generator<T>,
    pub d1: Discriminator<T>,
    pub d2: Discriminator<T>,
    pub extractor: Option<FeatureExtractor<T>>,
}

impl<T: Real> NetworkBundle<T> {
    pub fn new(config: NetworkConfig, extractor: Option<FeatureExtractor<T>>, seed: u64) -> Result<Self> {
        let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Ok(NetworkBundle {
            g1: Generator::new(config.generator.clone(), sub(1))?,
            g2: Generator::new(config.generator.clone(), sub(2))?,
            d1: Discriminator::new(config.discriminator.clone(), sub(3))?,
            d2: Discriminator::new(config.discriminator.clone(), sub(4))?,
            config,
            extractor,
        })
    }

    /// Trainable parameters of both generators, names prefixed `g1.`/`g2.`.
    pub fn generator_params(&self) -> ParamStore<T> {
        let mut p = self.g1.params.prefixed("g1");
        p.extend(self.g2.params.prefixed("g2"));
        p
    }

    pub fn discriminator_params(&self) -> ParamStore<T> {
        let mut p = self.d1.params.prefixed("d1");
        p.extend(self.d2.params.prefixed("d2"));
        p
    }
}
