//! Alternating optimization: one discriminator step, then one generator step
//! per unpaired batch.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, Var};
use crate::data::{BatchCursor, DomainDataset, ImageTensor, PairedValidationSet, UnpairedBatches};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialMode, LossBreakdown, LossParts, LossWeights};
use crate::metrics::{self, MetricScores};
use crate::nn::{FeatureExtractor, NetworkBundle, NetworkConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub adv_mode: AdversarialMode,
    pub checkpoint_every: u64,
    pub resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::with_layers(4),
            seed: 0,
            adv_mode: AdversarialMode::NonSaturating,
            checkpoint_every: 200,
            resolution: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("adam beta {b} outside [0, 1)"));
            }
        }
        if self.checkpoint_every < 1 {
            return bad("checkpoint_every must be at least 1".into());
        }
        self.weights.validate(None)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }
}

/// Optimizer state for the four trainable networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T> {
    pub g1: Adam<T>,
    pub g2: Adam<T>,
    pub d1: Adam<T>,
    pub d2: Adam<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(config: AdamConfig) -> Self {
        Optimizers { g1: Adam::new(config), g2: Adam::new(config), d1: Adam::new(config), d2: Adam::new(config) }
    }

    /// Named access in a fixed order, used by checkpoints.
    pub fn named(&self) -> [(&'static str, &Adam<T>); 4] {
        [("g1", &self.g1), ("g2", &self.g2), ("d1", &self.d1), ("d2", &self.d2)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Adam<T>); 4] {
        [("g1", &mut self.g1), ("g2", &mut self.g2), ("d1", &mut self.d1), ("d2", &mut self.d2)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub networks: NetworkBundle<f32>,
    pub optimizers: Optimizers<f32>,
    /// Position in the batch stream, which is a pure function of the seed.
    pub cursor: BatchCursor,
    pub seed: u64,
}

impl TrainState {
    pub fn new(
        network: NetworkConfig,
        extractor: Option<FeatureExtractor<f32>>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Ok(TrainState {
            step: 0,
            epoch: 0,
            networks: NetworkBundle::new(network, extractor, cfg.seed)?,
            optimizers: Optimizers::new(cfg.adam()),
            cursor: BatchCursor::default(),
            seed: cfg.seed,
        })
    }
}

// ---------------------------------------------------------------------------
// Objective graphs

/// The graph nodes of one generator-side objective evaluation.
pub struct GeneratorObjective<'g, T: Real> {
    pub total: Var<'g, T>,
    pub adv_1: Var<'g, T>,
    pub adv_2: Var<'g, T>,
    pub cyc: Var<'g, T>,
    pub c_percep: Option<Var<'g, T>>,
    pub c_style: Option<Var<'g, T>>,
}

impl<T: Real> GeneratorObjective<'_, T> {
    pub fn parts(&self) -> LossParts {
        let v = |x: Var<'_, T>| x.item().to_f64();
        LossParts {
            adv_1: v(self.adv_1),
            adv_2: v(self.adv_2),
            cyc: v(self.cyc),
            c_percep: self.c_percep.map_or(0.0, v),
            c_style: self.c_style.map_or(0.0, v),
        }
    }
}

/// Bound parameters of a bundle on one graph.
pub struct BoundBundle<'g, T: Real> {
    pub g1: Bound<'g, T>,
    pub g2: Bound<'g, T>,
    pub d1: Bound<'g, T>,
    pub d2: Bound<'g, T>,
    pub extractor: Option<Bound<'g, T>>,
}

impl<'g, T: Real> BoundBundle<'g, T> {
    pub fn new(g: &'g Graph<T>, nets: &NetworkBundle<T>, train_generators: bool) -> Self {
        BoundBundle {
            g1: g.bind(&nets.g1.params, train_generators),
            g2: g.bind(&nets.g2.params, train_generators),
            d1: g.bind(&nets.d1.params, false),
            d2: g.bind(&nets.d2.params, false),
            extractor: nets.extractor.as_ref().map(|f| g.bind(&f.params, false)),
        }
    }
}

/// Build the full generator objective on `g`. The feature extractor is only
/// run when a perceptual or style weight is non-zero, and each of those terms
/// is only built when its own weight is.
pub fn generator_objective<'g, T: Real>(
    g: &'g Graph<T>,
    nets: &NetworkBundle<T>,
    bound: &BoundBundle<'g, T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    weights: &LossWeights,
    mode: AdversarialMode,
) -> Result<GeneratorObjective<'g, T>> {
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let y_fake = nets.g1.forward(&bound.g1, xv);
    let x_rec = nets.g2.forward(&bound.g2, y_fake);
    let x_fake = nets.g2.forward(&bound.g2, yv);
    let y_rec = nets.g1.forward(&bound.g1, x_fake);

    let adv_1 = losses::generator_adversarial_term(nets.d1.forward(&bound.d1, y_fake), mode);
    let adv_2 = losses::generator_adversarial_term(nets.d2.forward(&bound.d2, x_fake), mode);
    let cyc = losses::cycle_consistency_term(xv, x_rec, yv, y_rec);
    let mut total = adv_1.add(adv_2).add(cyc.scale(weights.lambda_cyc));

    let (mut c_percep, mut c_style) = (None, None);
    if weights.uses_features() {
        let (f, fb) = match (&nets.extractor, &bound.extractor) {
            (Some(f), Some(fb)) => (f, fb),
            _ => return Err(Error::Config("perceptual or style weight set without a feature extractor".into())),
        };
        if !f.frozen {
            return Err(Error::FrozenViolation);
        }
        let fx = f.forward(fb, xv);
        let fx_rec = f.forward(fb, x_rec);
        let fy = f.forward(fb, yv);
        let fy_rec = f.forward(fb, y_rec);
        if weights.lambda_cp > 0.0 {
            let t = losses::cycle_perceptual_term(&fx, &fx_rec, &fy, &fy_rec, &weights.cp_layers)?;
            total = total.add(t.scale(weights.lambda_cp));
            c_percep = Some(t);
        }
        if weights.lambda_cs > 0.0 {
            let t = losses::cycle_style_term(&fx, &fx_rec, &fy, &fy_rec, &weights.cs_layers)?;
            total = total.add(t.scale(weights.lambda_cs));
            c_style = Some(t);
        }
    }
    Ok(GeneratorObjective { total, adv_1, adv_2, cyc, c_percep, c_style })
}

fn diverged(step: u64, parts: LossParts) -> Error {
    let breakdown = LossBreakdown {
        adv_1: parts.adv_1,
        adv_2: parts.adv_2,
        cyc: parts.cyc,
        c_percep: parts.c_percep,
        c_style: parts.c_style,
        total: f64::NAN,
    };
    Error::TrainingDiverged { step, breakdown: Box::new(breakdown) }
}

/// Discriminator ascent on the adversarial value with generator outputs
/// held fixed. Returns the discriminators' loss.
fn discriminator_step(state: &mut TrainState, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    let nets = &state.networks;
    let y_fake = nets.g1.forward_tensor(x)?;
    let x_fake = nets.g2.forward_tensor(y)?;

    let g = Graph::new();
    let b1 = g.bind(&nets.d1.params, true);
    let b2 = g.bind(&nets.d2.params, true);
    let l1 = losses::discriminator_loss_term(
        nets.d1.forward(&b1, g.constant(y.clone())),
        nets.d1.forward(&b1, g.constant(y_fake)),
    );
    let l2 = losses::discriminator_loss_term(
        nets.d2.forward(&b2, g.constant(x.clone())),
        nets.d2.forward(&b2, g.constant(x_fake)),
    );
    let loss = l1.add(l2);
    let value = loss.item().to_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss);
    let (g1, g2) = (b1.collect_grads(&grads), b2.collect_grads(&grads));
    state.optimizers.d1.step(&mut state.networks.d1.params, &g1);
    state.optimizers.d2.step(&mut state.networks.d2.params, &g2);
    Ok(value)
}

/// One discriminator step on both D, then one generator step on both G.
pub fn train_step(state: &mut TrainState, x: &ImageTensor, y: &ImageTensor, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if let Some(f) = &state.networks.extractor {
        if !f.frozen {
            return Err(Error::FrozenViolation);
        }
    }
    let (x, y) = (x.tensor(), y.tensor());
    state.networks.g1.check_input(x.shape())?;
    state.networks.g2.check_input(y.shape())?;

    let d_loss = discriminator_step(state, x, y)?;

    let g = Graph::new();
    let nets = &state.networks;
    let bound = BoundBundle::new(&g, nets, true);
    let obj = generator_objective(&g, nets, &bound, x, y, &cfg.weights, cfg.adv_mode)?;
    let parts = obj.parts();
    if !d_loss.is_finite() || !obj.total.item().is_finite() {
        return Err(diverged(state.step, parts));
    }
    let breakdown = losses::total_objective(parts, &cfg.weights).map_err(|_| diverged(state.step, parts))?;
    let grads = g.backward(obj.total);
    let (gr1, gr2) = (bound.g1.collect_grads(&grads), bound.g2.collect_grads(&grads));
    state.optimizers.g1.step(&mut state.networks.g1.params, &gr1);
    state.optimizers.g2.step(&mut state.networks.g2.params, &gr2);
    state.step += 1;
    Ok(breakdown)
}

// ---------------------------------------------------------------------------
// Run loop

/// Scores of one validation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub scores: MetricScores,
}

pub const VAL_HEADER: &str = "epoch,ssim,psnr_db,mse,uqi,vif,lpd";

impl EpochMetrics {
    fn csv_row(&self) -> String {
        let mut s = self.epoch.to_string();
        for v in self.scores.values() {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&format!("{v:.6}"));
            }
        }
        s
    }
}

/// Files a run writes; `None` keeps the run in memory.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub run_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub losses: Vec<LossBreakdown>,
    pub validation: Vec<EpochMetrics>,
}

struct CsvLog {
    out: Option<BufWriter<File>>,
    path: PathBuf,
}

impl CsvLog {
    fn open(dir: Option<&Path>, name: &str, header: &str, append: bool) -> Result<Self> {
        let Some(dir) = dir else { return Ok(CsvLog { out: None, path: PathBuf::new() }) };
        let path = dir.join(name);
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut log = CsvLog { out: Some(BufWriter::new(file)), path };
        if !(append && exists) {
            log.line(header)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some(out) = &mut self.out {
            writeln!(out, "{s}").map_err(|e| Error::io(format!("writing {}", self.path.display()), e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io(format!("writing {}", self.path.display()), e))?;
        }
        Ok(())
    }
}

/// Score `G1` on the validation pairs.
pub fn validate(state: &TrainState, val: &PairedValidationSet) -> Result<MetricScores> {
    let f = state.networks.extractor.as_ref();
    let report = metrics::evaluate_on_validation("current", &state.networks.g1, val, f)?;
    Ok(report.models[0].scores)
}

/// Train from `state` until `cfg.epochs` epochs are done.
///
/// Writes `losses.csv`, `val_metrics.csv` and checkpoints `ckpt_<step>` under
/// the run directory when one is given. A state loaded from a checkpoint
/// continues where it stopped, appending to the logs.
pub fn train(
    mut state: TrainState,
    cfg: &TrainConfig,
    dx: &DomainDataset,
    dy: &DomainDataset,
    val: Option<&PairedValidationSet>,
    output: &RunOutput,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(f) = &state.networks.extractor {
        if !f.frozen {
            return Err(Error::FrozenViolation);
        }
    }
    if let Some(v) = val {
        v.ensure_disjoint(dx)?;
        v.ensure_disjoint(dy)?;
    }
    let dir = output.run_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let resuming = state.step > 0;
    let mut loss_log = CsvLog::open(dir, "losses.csv", LossBreakdown::CSV_HEADER, resuming)?;
    let mut val_log = CsvLog::open(dir, "val_metrics.csv", VAL_HEADER, resuming)?;

    let mut batches = UnpairedBatches::resume(dx, dy, cfg.batch_size, state.seed, state.cursor)?;
    let per_epoch = batches.batches_per_epoch() as u64;
    let total_steps = cfg.epochs as u64 * per_epoch;
    let mut outcome_losses = Vec::new();
    let mut validation = Vec::new();

    while state.step < total_steps {
        let (x, y) = batches.next_batch()?;
        let breakdown = train_step(&mut state, &x, &y, cfg)?;
        state.cursor = batches.cursor();
        loss_log.line(&breakdown.csv_row(state.step))?;
        outcome_losses.push(breakdown);

        if state.step % per_epoch == 0 {
            state.epoch = state.step / per_epoch;
            loss_log.flush()?;
            if let Some(v) = val {
                let m = EpochMetrics { epoch: state.epoch, scores: validate(&state, v)? };
                val_log.line(&m.csv_row())?;
                val_log.flush()?;
                validation.push(m);
            }
        }
        if let Some(d) = dir {
            if state.step % cfg.checkpoint_every == 0 || state.step == total_steps {
                crate::checkpoint::save(&state, cfg, &d.join(format!("ckpt_{}", state.step)))?;
            }
        }
    }
    loss_log.flush()?;
    Ok(TrainOutcome { state, losses: outcome_losses, validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::nn::{DiscriminatorConfig, ExtractorConfig, GeneratorConfig};

    pub(crate) fn tiny_network(res: usize) -> NetworkConfig {
        NetworkConfig {
            generator: GeneratorConfig {
                input_resolution: res,
                base_filters: 4,
                residual_blocks: 1,
                downsamplings: 2,
                outer_kernel: 7,
            },
            discriminator: DiscriminatorConfig { input_resolution: res, base_filters: 4, strided_layers: 2 },
        }
    }

    fn tiny_extractor(res: usize) -> FeatureExtractor<f32> {
        let c = ExtractorConfig { input_resolution: res, channels: vec![4, 4, 8, 8], strides: vec![1, 2, 2, 2] };
        FeatureExtractor::new(c, 5).unwrap().frozen()
    }

    fn dataset(domain: Domain, n: usize, res: usize, offset: u64) -> DomainDataset {
        let samples = (0..n)
            .map(|i| {
                let t = Tensor::from_fn(&[1, res, res, 1], |k| {
                    (((k as u64 * 2654435761 + i as u64 * 97 + offset) % 1000) as f32 / 500.0) - 1.0
                });
                ImageTensor::new(t).unwrap()
            })
            .collect();
        DomainDataset::new(domain, samples, (0..n).map(|i| format!("s{i}")).collect()).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 4, resolution: 16, ..Default::default() }
    }

    #[test]
    fn one_epoch_of_eight_is_two_steps() {
        let (dx, dy) = (dataset(Domain::X, 8, 16, 0), dataset(Domain::Y, 8, 16, 3));
        let state = TrainState::new(tiny_network(16), Some(tiny_extractor(16)), &cfg()).unwrap();
        let out = train(state, &cfg(), &dx, &dy, None, &RunOutput::default()).unwrap();
        assert_eq!(out.state.step, 2);
        assert_eq!(out.losses.len(), 2);
        for b in &out.losses {
            let w = &cfg().weights;
            let recombined = b.adv_1 + b.adv_2 + w.lambda_cp * b.c_percep + w.lambda_cyc * b.cyc + w.lambda_cs * b.c_style;
            assert!((recombined - b.total).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (dx, dy) = (dataset(Domain::X, 4, 16, 0), dataset(Domain::Y, 4, 16, 3));
        let mut c = cfg();
        c.learning_rate = 0.0;
        let mut state = TrainState::new(tiny_network(16), Some(tiny_extractor(16)), &c).unwrap();
        let before = state.networks.clone();
        let (x, y) = (dx.gather(&[0, 1, 2, 3]).unwrap(), dy.gather(&[0, 1, 2, 3]).unwrap());
        train_step(&mut state, &x, &y, &c).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(state.networks, before);
    }

    #[test]
    fn steps_touch_only_their_own_networks() {
        let (dx, dy) = (dataset(Domain::X, 4, 16, 0), dataset(Domain::Y, 4, 16, 3));
        let mut state = TrainState::new(tiny_network(16), Some(tiny_extractor(16)), &cfg()).unwrap();
        let before = state.networks.clone();
        discriminator_step(&mut state, dx.gather(&[0, 1]).unwrap().tensor(), dy.gather(&[2, 3]).unwrap().tensor())
            .unwrap();
        assert_eq!(state.networks.g1, before.g1);
        assert_eq!(state.networks.g2, before.g2);
        assert_ne!(state.networks.d1, before.d1);
        let after_d = state.networks.clone();
        let (x, y) = (dx.gather(&[0, 1]).unwrap(), dy.gather(&[2, 3]).unwrap());
        train_step(&mut state, &x, &y, &cfg()).unwrap();
        assert_eq!(state.networks.extractor, before.extractor);
        assert_ne!(state.networks.g1, after_d.g1);
    }

    #[test]
    fn unfrozen_extractor_is_rejected() {
        let (dx, dy) = (dataset(Domain::X, 4, 16, 0), dataset(Domain::Y, 4, 16, 3));
        let mut f = tiny_extractor(16);
        f.frozen = false;
        let mut state = TrainState::new(tiny_network(16), Some(f), &cfg()).unwrap();
        let (x, y) = (dx.gather(&[0, 1]).unwrap(), dy.gather(&[0, 1]).unwrap());
        assert!(matches!(train_step(&mut state, &x, &y, &cfg()), Err(Error::FrozenViolation)));
    }

    #[test]
    fn zero_feature_weights_skip_the_terms() {
        let (dx, dy) = (dataset(Domain::X, 4, 16, 0), dataset(Domain::Y, 4, 16, 3));
        let mut c = cfg();
        c.weights = c.weights.without_feature_terms();
        let mut state = TrainState::new(tiny_network(16), None, &c).unwrap();
        let (x, y) = (dx.gather(&[0, 1]).unwrap(), dy.gather(&[0, 1]).unwrap());
        let b = train_step(&mut state, &x, &y, &c).unwrap();
        assert_eq!((b.c_percep, b.c_style), (0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { adam_beta2: 1.0, ..Default::default() }.validate().is_err());
    }
}
