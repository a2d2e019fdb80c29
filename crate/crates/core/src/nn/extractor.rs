//! Convolutional encoder whose post-activation maps feed the perceptual and
//! style terms and the learned perceptual distance. It is pretrained as the
//! encoder half of a reconstruction autoencoder and then frozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, ConvTransposeGeom};
use crate::nn::params::{normal, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_resolution: usize,
    /// Output channels of each stage; its length is the layer count `L`.
    pub channels: Vec<usize>,
    /// Stride (1 or 2) of each stage.
    pub strides: Vec<usize>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { input_resolution: 64, channels: vec![16, 32, 64, 64], strides: vec![1, 2, 2, 2] }
    }
}

impl ExtractorConfig {
    pub fn layer_count(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("extractor needs one stride per stage".into()));
        }
        if self.channels.contains(&0) || self.strides.iter().any(|s| !(1..=2).contains(s)) {
            return Err(Error::Config(format!("invalid extractor config {self:?}")));
        }
        let mut r = self.input_resolution;
        for &s in &self.strides {
            if r % s != 0 || r < 2 {
                return Err(Error::Config(format!(
                    "resolution {} incompatible with extractor strides {:?}",
                    self.input_resolution, self.strides
                )));
            }
            r /= s;
        }
        Ok(())
    }

    /// `(h_i, w_i, d_i)` of every tapped map.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut r = self.input_resolution;
        self.channels
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| {
                r /= s;
                (r, r, c)
            })
            .collect()
    }
}

fn geom(stride: usize) -> ConvGeom {
    ConvGeom { kernel: 3, stride, pad: 1 }
}

/// Feature maps `F_1..F_L`, each `(n, h_i, w_i, d_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Real> FeatureStack<T> {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.maps.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub config: ExtractorConfig,
    pub params: ParamStore<T>,
    pub frozen: bool,
}

impl<T: Real> FeatureExtractor<T> {
    /// He-initialized, unfrozen extractor.
    pub fn new(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            p.insert(&format!("enc{i}.w"), normal(&mut rng, &[3, 3, cin, c], std));
            p.insert(&format!("enc{i}.b"), Tensor::zeros(&[c]));
            cin = c;
        }
        Ok(FeatureExtractor { config, params: p, frozen: false })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn layer_count(&self) -> usize {
        self.config.layer_count()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let r = self.config.input_resolution;
        match *shape {
            [_, h, w, 1] if h == r && w == r => Ok(()),
            _ => Err(Error::Shape(format!("extractor expects (n, {r}, {r}, 1), got {shape:?}"))),
        }
    }

    /// Tapped activations of every stage.
    pub fn forward<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.layer_count());
        for (i, &s) in self.config.strides.iter().enumerate() {
            h = h
                .conv2d(bound.get(&format!("enc{i}.w")), Some(bound.get(&format!("enc{i}.b"))), geom(s))
                .leaky_relu(SLOPE);
            taps.push(h);
        }
        taps
    }

    /// Feature stack of `img` without gradient tracking.
    pub fn extract(&self, img: &Tensor<T>) -> Result<FeatureStack<T>> {
        self.check_input(img.shape())?;
        let g = Graph::new();
        let bound = g.bind(&self.params, false);
        let taps = self.forward(&bound, g.constant(img.clone()));
        let maps: Vec<Tensor<T>> = taps.iter().map(|v| (*v.value()).clone()).collect();
        Ok(FeatureStack { maps })
    }
}

/// Decoder mirroring the encoder, used only during pretraining.
struct Decoder<T> {
    params: ParamStore<T>,
    strides: Vec<usize>,
}

impl<T: Real> Decoder<T> {
    fn new(config: &ExtractorConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = ParamStore::new();
        let ch = &config.channels;
        for i in (0..ch.len()).rev() {
            let cin = ch[i];
            let cout = if i == 0 { ch[0] } else { ch[i - 1] };
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let shape = if config.strides[i] == 2 { [cin, 3, 3, cout] } else { [3, 3, cin, cout] };
            p.insert(&format!("dec{i}.w"), normal(rng, &shape, std));
            p.insert(&format!("dec{i}.b"), Tensor::zeros(&[cout]));
        }
        p.insert("dec.out.w", normal(rng, &[3, 3, ch[0], 1], (1.0 / (9 * ch[0]) as f64).sqrt()));
        p.insert("dec.out.b", Tensor::zeros(&[1]));
        Decoder { params: p, strides: config.strides.clone() }
    }

    fn forward<'g>(&self, bound: &Bound<'g, T>, code: Var<'g, T>) -> Var<'g, T> {
        let up = ConvTransposeGeom { kernel: 3, stride: 2, pad: 1, output_pad: 1 };
        let mut h = code;
        for i in (0..self.strides.len()).rev() {
            let (w, b) = (bound.get(&format!("dec{i}.w")), Some(bound.get(&format!("dec{i}.b"))));
            h = if self.strides[i] == 2 { h.conv_transpose2d(w, b, up) } else { h.conv2d(w, b, geom(1)) };
            h = h.leaky_relu(SLOPE);
        }
        h.conv2d(bound.get("dec.out.w"), Some(bound.get("dec.out.b")), geom(1)).tanh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { epochs: 20, batch_size: 16, learning_rate: 1e-3, seed: 0 }
    }
}

pub struct PretrainOutcome<T> {
    pub extractor: FeatureExtractor<T>,
    /// Held-out reconstruction MSE before training, then after each epoch.
    pub holdout_history: Vec<f64>,
}

impl<T> PretrainOutcome<T> {
    pub fn initial_holdout_loss(&self) -> f64 {
        self.holdout_history[0]
    }

    pub fn final_holdout_loss(&self) -> f64 {
        *self.holdout_history.last().expect("history has the initial entry")
    }
}

fn reconstruction_loss<T: Real>(
    enc: &FeatureExtractor<T>,
    dec: &Decoder<T>,
    enc_params: &ParamStore<T>,
    batch: &Tensor<T>,
    trainable: bool,
) -> (f64, Option<(ParamStore<T>, ParamStore<T>)>) {
    let g = Graph::new();
    let be = g.bind(enc_params, trainable);
    let bd = g.bind(&dec.params, trainable);
    let x = g.constant(batch.clone());
    let code = *enc.forward(&be, x).last().expect("at least one stage");
    let loss = dec.forward(&bd, code).sub(x).square().mean();
    let value = loss.item().to_f64();
    if !trainable {
        return (value, None);
    }
    let grads = g.backward(loss);
    (value, Some((be.collect_grads(&grads), bd.collect_grads(&grads))))
}

fn holdout_loss<T: Real>(
    enc: &FeatureExtractor<T>,
    dec: &Decoder<T>,
    holdout: &[Tensor<T>],
) -> f64 {
    let total: f64 = holdout.iter().map(|b| reconstruction_loss(enc, dec, &enc.params, b, false).0).sum();
    total / holdout.len() as f64
}

/// Train the encoder as half of an autoencoder on `corpus` and return it
/// frozen. 10% of the corpus (at least one image) is held out to monitor
/// reconstruction error.
pub fn pretrain_feature_extractor(
    corpus: &DomainDataset,
    config: ExtractorConfig,
    opts: PretrainOptions,
) -> Result<PretrainOutcome<f32>> {
    if corpus.is_empty() {
        return Err(Error::DatasetEmpty("extractor pretraining corpus".into()));
    }
    let config = ExtractorConfig { input_resolution: corpus.resolution().unwrap_or(0), ..config };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut enc = FeatureExtractor::<f32>::new(config.clone(), opts.seed)?;
    let mut dec = Decoder::<f32>::new(&config, &mut rng);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if corpus.len() < 2 { 0 } else { (corpus.len() / 10).max(1) };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let hold_idx = if hold_idx.is_empty() { train_idx } else { hold_idx };
    let holdout: Vec<Tensor<f32>> = hold_idx
        .chunks(opts.batch_size.max(1))
        .map(|c| corpus.gather(c).map(|t| t.into_tensor()))
        .collect::<Result<_>>()?;

    let mut history = vec![holdout_loss(&enc, &dec, &holdout)];
    let adam = AdamConfig { learning_rate: opts.learning_rate, beta1: 0.9, ..Default::default() };
    let (mut opt_e, mut opt_d) = (Adam::new(adam), Adam::new(adam));
    let batch_size = opts.batch_size.clamp(1, train_idx.len());
    let mut step = 0u64;
    let mut train_order = train_idx.to_vec();
    for _ in 0..opts.epochs {
        train_order.shuffle(&mut rng);
        for chunk in train_order.chunks_exact(batch_size) {
            let batch = corpus.gather(chunk)?.into_tensor();
            let (loss, grads) = reconstruction_loss(&enc, &dec, &enc.params, &batch, true);
            step += 1;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, breakdown: Box::default() });
            }
            let (ge, gd) = grads.expect("trainable pass returns gradients");
            opt_e.step(&mut enc.params, &ge);
            opt_d.step(&mut dec.params, &gd);
        }
        let h = holdout_loss(&enc, &dec, &holdout);
        if !h.is_finite() {
            return Err(Error::TrainingDiverged { step, breakdown: Box::default() });
        }
        history.push(h);
    }
    Ok(PretrainOutcome { extractor: enc.frozen(), holdout_history: history })
}
