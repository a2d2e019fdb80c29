//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, command-line
//! flags. Lines starting with `#` and blank lines are ignored; an unknown key
//! is an error. [`RunConfig::to_text`] writes every effective key back in the
//! same format, so a run manifest can be fed to `--config` again.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{AdversarialMode, LossWeights};
use crate::nn::{ExtractorConfig, NetworkConfig, PretrainOptions};
use crate::synth::{SynthSpec, Transform};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CycleGan,
    CycleMedGan,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle_gan" => Ok(Variant::CycleGan),
            "cycle_medgan" => Ok(Variant::CycleMedGan),
            other => Err(Error::Config(format!("unknown variant {other:?} (cycle_gan or cycle_medgan)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::CycleGan => "cycle_gan",
            Variant::CycleMedGan => "cycle_medgan",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub resolution: usize,
    pub data_root: PathBuf,
    pub run_dir: PathBuf,
    pub extractor: Option<PathBuf>,
    pub val_fraction: f64,
    pub parallel: bool,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub extractor_arch: ExtractorConfig,
    pub pretrain: PretrainOptions,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let resolution = 64;
        RunConfig {
            variant: Variant::CycleMedGan,
            seed: 0,
            resolution,
            data_root: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            extractor: None,
            val_fraction: 0.2,
            parallel: true,
            train: TrainConfig::default(),
            network: NetworkConfig::at_resolution(resolution),
            extractor_arch: ExtractorConfig { input_resolution: resolution, ..Default::default() },
            pretrain: PretrainOptions::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Every key accepted in files and by `--set`, in output order.
    pub const KEYS: &'static [&'static str] = &[
        "variant",
        "seed",
        "resolution",
        "data_root",
        "run_dir",
        "extractor",
        "val_fraction",
        "parallel",
        "epochs",
        "batch_size",
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adv_mode",
        "checkpoint_every",
        "lambda_cyc",
        "lambda_cp",
        "lambda_cs",
        "cp_layers",
        "cs_layers",
        "gen_base_filters",
        "gen_residual_blocks",
        "gen_downsamplings",
        "gen_outer_kernel",
        "disc_base_filters",
        "disc_strided_layers",
        "extractor_channels",
        "extractor_strides",
        "pretrain_epochs",
        "pretrain_batch_size",
        "pretrain_learning_rate",
        "n_images",
        "transform",
        "blur_sigma",
        "texture_amplitude",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "data_root" => self.data_root = PathBuf::from(v),
            "run_dir" => self.run_dir = PathBuf::from(v),
            "extractor" => self.extractor = (!v.is_empty()).then(|| PathBuf::from(v)),
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "adv_mode" => self.train.adv_mode = parse::<AdversarialMode>(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "lambda_cyc" => self.train.weights.lambda_cyc = parse(key, v)?,
            "lambda_cp" => self.train.weights.lambda_cp = parse(key, v)?,
            "lambda_cs" => self.train.weights.lambda_cs = parse(key, v)?,
            "cp_layers" => self.train.weights.cp_layers = parse_list(key, v)?,
            "cs_layers" => self.train.weights.cs_layers = parse_list(key, v)?,
            "gen_base_filters" => self.network.generator.base_filters = parse(key, v)?,
            "gen_residual_blocks" => self.network.generator.residual_blocks = parse(key, v)?,
            "gen_downsamplings" => self.network.generator.downsamplings = parse(key, v)?,
            "gen_outer_kernel" => self.network.generator.outer_kernel = parse(key, v)?,
            "disc_base_filters" => self.network.discriminator.base_filters = parse(key, v)?,
            "disc_strided_layers" => self.network.discriminator.strided_layers = parse(key, v)?,
            "extractor_channels" => self.extractor_arch.channels = parse_list(key, v)?,
            "extractor_strides" => self.extractor_arch.strides = parse_list(key, v)?,
            "pretrain_epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain_batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain_learning_rate" => self.pretrain.learning_rate = parse(key, v)?,
            "n_images" => self.synth.n_images = parse(key, v)?,
            "transform" => self.synth.transform = parse::<Transform>(key, v)?,
            "blur_sigma" => self.synth.blur_sigma = parse(key, v)?,
            "texture_amplitude" => self.synth.texture_amplitude = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let n = &self.network;
        Some(match key {
            "variant" => self.variant.to_string(),
            "seed" => self.seed.to_string(),
            "resolution" => self.resolution.to_string(),
            "data_root" => self.data_root.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            "extractor" => self.extractor.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "val_fraction" => self.val_fraction.to_string(),
            "parallel" => self.parallel.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adv_mode" => t.adv_mode.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "lambda_cyc" => t.weights.lambda_cyc.to_string(),
            "lambda_cp" => t.weights.lambda_cp.to_string(),
            "lambda_cs" => t.weights.lambda_cs.to_string(),
            "cp_layers" => join(&t.weights.cp_layers),
            "cs_layers" => join(&t.weights.cs_layers),
            "gen_base_filters" => n.generator.base_filters.to_string(),
            "gen_residual_blocks" => n.generator.residual_blocks.to_string(),
            "gen_downsamplings" => n.generator.downsamplings.to_string(),
            "gen_outer_kernel" => n.generator.outer_kernel.to_string(),
            "disc_base_filters" => n.discriminator.base_filters.to_string(),
            "disc_strided_layers" => n.discriminator.strided_layers.to_string(),
            "extractor_channels" => join(&self.extractor_arch.channels),
            "extractor_strides" => join(&self.extractor_arch.strides),
            "pretrain_epochs" => self.pretrain.epochs.to_string(),
            "pretrain_batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain_learning_rate" => self.pretrain.learning_rate.to_string(),
            "n_images" => self.synth.n_images.to_string(),
            "transform" => self.synth.transform.to_string(),
            "blur_sigma" => self.synth.blur_sigma.to_string(),
            "texture_amplitude" => self.synth.texture_amplitude.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.finalize()
    }

    /// Propagate shared settings into the nested configs, apply the variant
    /// and validate.
    pub fn finalize(mut self) -> Result<Self> {
        let r = self.resolution;
        self.train.resolution = r;
        self.train.seed = self.seed;
        self.network.generator.input_resolution = r;
        self.network.discriminator.input_resolution = r;
        self.extractor_arch.input_resolution = r;
        self.synth.resolution = r;
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        if self.variant == Variant::CycleGan {
            self.train.weights.lambda_cp = 0.0;
            self.train.weights.lambda_cs = 0.0;
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        self.train.validate()?;
        self.train.weights.validate(Some(self.extractor_arch.channels.len()))?;
        self.network.generator.validate()?;
        self.network.discriminator.validate()?;
        self.extractor_arch.validate()?;
        Ok(self)
    }

    /// The extractor path, required by the cycle_medgan variant.
    pub fn require_extractor(&self) -> Result<Option<&Path>> {
        match (self.variant, &self.extractor) {
            (Variant::CycleMedGan, None) => {
                Err(Error::Config("variant cycle_medgan requires an extractor path (key `extractor`)".into()))
            }
            (_, p) => Ok(p.as_deref()),
        }
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.train.weights
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("listed key")).expect("write to string");
        }
        s
    }
}
