//! Checkpoints: a named-tensor archive (`tensors.bin`) next to a JSON
//! manifest (`manifest.json`).
//!
//! Archive layout, little-endian: magic `CMGT`, version `u32`, tensor count
//! `u32`, then per tensor in name order: name length `u32`, UTF-8 name, rank
//! `u32`, dims `u64` each, `f32` data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::BatchCursor;
use crate::error::{Error, Result};
use crate::nn::{ExtractorConfig, FeatureExtractor, NetworkBundle, NetworkConfig, ParamStore};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::{Optimizers, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"CMGT";
const VERSION: u32 = 1;
pub const TENSOR_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const STATE_FORMAT: &str = "cycle-medgan/train-state/1";
const EXTRACTOR_FORMAT: &str = "cycle-medgan/extractor/1";

pub type Archive = BTreeMap<String, Tensor<f32>>;

pub fn encode_archive(tensors: &Archive) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated tensor archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a tensor archive".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("archive version {version}")));
    }
    let count = r.u32()?;
    let mut out = Archive::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.insert(name, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes in tensor archive".into()));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a serializable configuration's canonical JSON.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

pub fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))
}

fn put(archive: &mut Archive, prefix: &str, store: &ParamStore<f32>) {
    for (name, t) in store.iter() {
        archive.insert(format!("{prefix}.{name}"), t.clone());
    }
}

/// Overwrite every tensor of `store` from `archive`, requiring equal shapes
/// and no missing names.
fn fill(archive: &Archive, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    for (name, t) in store.iter_mut() {
        let key = format!("{prefix}.{name}");
        let src = archive
            .get(&key)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {key}")))?;
        if src.shape() != t.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{key} has shape {:?}, architecture expects {:?}",
                src.shape(),
                t.shape()
            )));
        }
        *t = src.clone();
    }
    Ok(())
}

fn take_prefixed(archive: &Archive, prefix: &str) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    let p = format!("{prefix}.");
    for (name, t) in archive {
        if let Some(rest) = name.strip_prefix(&p) {
            out.insert(rest, t.clone());
        }
    }
    out
}

fn write_pair<M: Serialize>(dir: &Path, archive: &Archive, manifest: &M) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("creating {}: {e}", dir.display())))?;
    write_file(&dir.join(TENSOR_FILE), &encode_archive(archive))?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())
}

fn read_pair<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<(Archive, M, String)> {
    let bytes = read_file(&dir.join(TENSOR_FILE))?;
    let digest = sha256_hex(&bytes);
    let text = read_file(&dir.join(MANIFEST_FILE))?;
    let manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    Ok((decode_archive(&bytes)?, manifest, digest))
}

// ---------------------------------------------------------------------------
// Training state

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateManifest {
    pub format: String,
    pub code_version: String,
    pub architecture: NetworkConfig,
    pub extractor: Option<ExtractorConfig>,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub cursor: BatchCursor,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub train_config: TrainConfig,
    pub config_hash: String,
    pub tensor_sha256: String,
    pub timestamp: String,
}

fn state_archive(state: &TrainState) -> Archive {
    let nets = &state.networks;
    let mut a = Archive::new();
    put(&mut a, "g1", &nets.g1.params);
    put(&mut a, "g2", &nets.g2.params);
    put(&mut a, "d1", &nets.d1.params);
    put(&mut a, "d2", &nets.d2.params);
    if let Some(f) = &nets.extractor {
        put(&mut a, "f", &f.params);
    }
    for (net, opt) in state.optimizers.named() {
        put(&mut a, &format!("opt.{net}.m"), &opt.first_moment);
        put(&mut a, &format!("opt.{net}.v"), &opt.second_moment);
    }
    a
}

pub fn save(state: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<StateManifest> {
    let archive = state_archive(state);
    let manifest = StateManifest {
        format: STATE_FORMAT.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        architecture: state.networks.config.clone(),
        extractor: state.networks.extractor.as_ref().map(|f| f.config.clone()),
        shapes: archive.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        cursor: state.cursor,
        optimizer_steps: state.optimizers.named().iter().map(|(n, o)| (n.to_string(), o.steps)).collect(),
        train_config: cfg.clone(),
        config_hash: config_hash(&(&state.networks.config, cfg)),
        tensor_sha256: sha256_hex(&encode_archive(&archive)),
        timestamp: timestamp(),
    };
    write_pair(dir, &archive, &manifest)?;
    Ok(manifest)
}

/// Load a training state. With `expected`, the stored architecture must
/// match it exactly.
pub fn load(dir: &Path, expected: Option<&NetworkConfig>) -> Result<(TrainState, TrainConfig)> {
    let (archive, m, digest): (Archive, StateManifest, String) = read_pair(dir)?;
    if m.format != STATE_FORMAT {
        return Err(Error::IncompatibleCheckpoint(format!("format {:?}", m.format)));
    }
    if digest != m.tensor_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its manifest digest", dir.display())));
    }
    if let Some(e) = expected {
        if *e != m.architecture {
            return Err(Error::IncompatibleCheckpoint(format!(
                "stored architecture {:?} differs from requested {:?}",
                m.architecture, e
            )));
        }
    }
    if config_hash(&(&m.architecture, &m.train_config)) != m.config_hash {
        return Err(Error::IncompatibleCheckpoint("config hash mismatch".into()));
    }
    let extractor = match &m.extractor {
        Some(c) => {
            let mut f = FeatureExtractor::new(c.clone(), 0)?.frozen();
            fill(&archive, "f", &mut f.params)?;
            Some(f)
        }
        None => None,
    };
    let mut nets = NetworkBundle::new(m.architecture.clone(), extractor, m.seed)?;
    fill(&archive, "g1", &mut nets.g1.params)?;
    fill(&archive, "g2", &mut nets.g2.params)?;
    fill(&archive, "d1", &mut nets.d1.params)?;
    fill(&archive, "d2", &mut nets.d2.params)?;

    let expected_names: usize = [&nets.g1.params, &nets.g2.params, &nets.d1.params, &nets.d2.params]
        .iter()
        .map(|p| p.len())
        .sum::<usize>()
        + nets.extractor.as_ref().map_or(0, |f| f.params.len());
    let network_names = archive.keys().filter(|k| !k.starts_with("opt.")).count();
    if network_names != expected_names {
        return Err(Error::IncompatibleCheckpoint("unexpected tensors in archive".into()));
    }

    let mut optimizers = Optimizers::new(m.train_config.adam());
    for (net, opt) in optimizers.named_mut() {
        *opt = Adam {
            config: m.train_config.adam(),
            steps: *m.optimizer_steps.get(net).unwrap_or(&0),
            first_moment: take_prefixed(&archive, &format!("opt.{net}.m")),
            second_moment: take_prefixed(&archive, &format!("opt.{net}.v")),
        };
    }
    let state = TrainState {
        step: m.step,
        epoch: m.epoch,
        networks: nets,
        optimizers,
        cursor: m.cursor,
        seed: m.seed,
    };
    Ok((state, m.train_config))
}

// ---------------------------------------------------------------------------
// Feature extractor

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorManifest {
    pub format: String,
    pub code_version: String,
    pub config: ExtractorConfig,
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub seed: u64,
    pub holdout_history: Vec<f64>,
    pub tensor_sha256: String,
    pub timestamp: String,
}

pub fn save_extractor(f: &FeatureExtractor<f32>, seed: u64, holdout_history: &[f64], dir: &Path) -> Result<()> {
    let mut archive = Archive::new();
    put(&mut archive, "f", &f.params);
    let manifest = ExtractorManifest {
        format: EXTRACTOR_FORMAT.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        config: f.config.clone(),
        shapes: archive.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
        seed,
        holdout_history: holdout_history.to_vec(),
        tensor_sha256: sha256_hex(&encode_archive(&archive)),
        timestamp: timestamp(),
    };
    write_pair(dir, &archive, &manifest)
}

/// Load a frozen extractor; `resolution` must match the stored one.
pub fn load_extractor(dir: &Path, resolution: Option<usize>) -> Result<FeatureExtractor<f32>> {
    let (archive, m, digest): (Archive, ExtractorManifest, String) = read_pair(dir)?;
    if m.format != EXTRACTOR_FORMAT {
        return Err(Error::IncompatibleCheckpoint(format!("format {:?}", m.format)));
    }
    if digest != m.tensor_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its manifest digest", dir.display())));
    }
    if let Some(r) = resolution {
        if r != m.config.input_resolution {
            return Err(Error::IncompatibleCheckpoint(format!(
                "extractor built for {0}x{0}, requested {r}x{r}",
                m.config.input_resolution
            )));
        }
    }
    let mut f = FeatureExtractor::new(m.config.clone(), 0)?.frozen();
    fill(&archive, "f", &mut f.params)?;
    Ok(f)
}
