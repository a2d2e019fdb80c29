//! Image ingestion, unpaired batching and group-wise paired splits.
//!
//! Images are single-channel and square, stored NHWC with values in
//! `[-1, 1]`. Folder layouts:
//!
//! * unpaired: a flat folder of PNG files;
//! * paired: `<root>/X/*.png` and `<root>/Y/*.png` with matching filenames.
//!
//! In a paired root the group ("patient") of a file is the part of its name
//! before the first underscore; splits never put one group on both sides.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// A batch of square grayscale images in `[-1, 1]`, shape `(n, r, r, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [_, h, w, 1] if h == w => {}
            ref s => return Err(Error::Shape(format!("expected (n, r, r, 1), got {s:?}"))),
        }
        if let Some((lo, hi)) = t.min_max() {
            if !(lo >= -1.0 && hi <= 1.0) {
                return Err(Error::Numerical(format!("image values span [{lo}, {hi}], outside [-1, 1]")));
            }
        }
        Ok(ImageTensor(t))
    }

    /// Build from `[0, 1]` pixel rows of one `res x res` image.
    pub fn from_unit(pixels: &[f32], res: usize) -> Result<Self> {
        let data = pixels.iter().map(|&v| normalize_unit(v)).collect();
        ImageTensor::new(Tensor::from_vec(&[1, res, res, 1], data)?)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn sample(&self, i: usize) -> ImageTensor {
        ImageTensor(self.0.narrow(i, i + 1))
    }

    /// Pixels of sample `i` mapped to `[0, 1]` in f64.
    pub fn unit_pixels(&self, i: usize) -> Vec<f64> {
        self.0.outer(i).iter().map(|&v| (v as f64 + 1.0) * 0.5).collect()
    }

    pub fn stack(parts: &[&ImageTensor]) -> Result<Self> {
        let ts: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.0).collect();
        Ok(ImageTensor(Tensor::concat(&ts)?))
    }
}

/// `[0, 1] -> [-1, 1]`.
#[inline]
pub fn normalize_unit(v: f32) -> f32 {
    (v * 2.0 - 1.0).clamp(-1.0, 1.0)
}

#[inline]
pub fn normalize_u8(v: u8) -> f32 {
    normalize_unit(v as f32 / 255.0)
}

#[inline]
pub fn denormalize_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::X => "X",
            Domain::Y => "Y",
        })
    }
}

#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub domain: Domain,
    samples: Vec<ImageTensor>,
    ids: Vec<String>,
}

impl DomainDataset {
    pub fn new(domain: Domain, samples: Vec<ImageTensor>, ids: Vec<String>) -> Result<Self> {
        if samples.len() != ids.len() {
            return Err(Error::Shape("one id per sample required".into()));
        }
        let unique: BTreeSet<&String> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(Error::Config(format!("duplicate sample ids in domain {domain}")));
        }
        if let Some(first) = samples.first() {
            let shape = first.tensor().shape().to_vec();
            if samples.iter().any(|s| s.tensor().shape() != shape.as_slice() || s.batch() != 1) {
                return Err(Error::Shape(format!("domain {domain} samples differ in shape")));
            }
        }
        Ok(DomainDataset { domain, samples, ids })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, i: usize) -> &ImageTensor {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[ImageTensor] {
        &self.samples
    }

    pub fn resolution(&self) -> Option<usize> {
        self.samples.first().map(ImageTensor::resolution)
    }

    /// Stack the samples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> Result<ImageTensor> {
        let parts: Vec<&ImageTensor> = indices.iter().map(|&i| &self.samples[i]).collect();
        ImageTensor::stack(&parts)
    }

    /// Subset by index, keeping ids.
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            domain: self.domain,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValidationPair {
    pub id: String,
    pub x: ImageTensor,
    pub y_truth: ImageTensor,
}

#[derive(Clone, Debug, Default)]
pub struct PairedValidationSet {
    pub pairs: Vec<ValidationPair>,
}

impl PairedValidationSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }

    /// Fails if any validation id also occurs in `train`.
    pub fn ensure_disjoint(&self, train: &DomainDataset) -> Result<()> {
        let train_ids: BTreeSet<&str> = train.ids().iter().map(String::as_str).collect();
        match self.ids().find(|id| train_ids.contains(id)) {
            Some(id) => Err(Error::Config(format!("validation id {id} is also a training sample"))),
            None => Ok(()),
        }
    }
}

/// Group key of a sample id: the prefix before the first underscore.
pub fn group_of(id: &str) -> &str {
    id.split('_').next().unwrap_or(id)
}

pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn sample_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Decode one grayscale PNG, resample it to `resolution` and normalize to `[-1, 1]`.
pub fn load_image(path: &Path, resolution: usize) -> Result<ImageTensor> {
    let decode_err = |message: String| Error::Decode { path: path.to_path_buf(), message };
    let img = image::ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    let unit: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(Error::Channel { path: path.to_path_buf(), color: format!("{:?}", other.color()) })
        }
    };
    let r = resolution as u32;
    let unit = if (w, h) == (r, r) {
        unit
    } else {
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w, h, unit).ok_or_else(|| decode_err("truncated pixel buffer".into()))?;
        imageops::resize(&buf, r, r, FilterType::Triangle).into_raw()
    };
    ImageTensor::from_unit(&unit, resolution)
}

/// Load every PNG in `dir` (sorted by filename) as one domain.
pub fn load_dataset(dir: &Path, resolution: usize, domain: Domain) -> Result<DomainDataset> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::DatasetEmpty(dir.display().to_string()));
    }
    let loaded = exec::map_indexed(files.len(), |i| load_image(&files[i], resolution));
    let samples = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let ids = files.iter().map(|p| sample_id(p)).collect();
    DomainDataset::new(domain, samples, ids)
}

/// Write one image (`[-1, 1]`, sample 0 of `img`) as an 8-bit PNG.
pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let r = img.resolution() as u32;
    let bytes: Vec<u8> = img.tensor().outer(0).iter().map(|&v| denormalize_u8(v)).collect();
    save_gray8(path, r, r, bytes)
}

pub fn save_gray8(path: &Path, width: u32, height: u32, bytes: Vec<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width, height, bytes).ok_or_else(|| Error::Shape("pixel count".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(format!("writing {}", path.display()), io),
        other => Error::Checkpoint(format!("encoding {}: {other}", path.display())),
    })
}

/// Position of an [`UnpairedBatches`] stream; enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub batch: usize,
}

/// Endless stream of `(x, y)` batches. Each epoch draws an independent
/// permutation per domain from its own ChaCha stream, so batch positions
/// carry no pairing and the whole stream is a function of the seed.
/// The final partial batch of an epoch is dropped.
pub struct UnpairedBatches<'a> {
    dx: &'a DomainDataset,
    dy: &'a DomainDataset,
    batch_size: usize,
    seed: u64,
    cursor: BatchCursor,
    perms: Option<(Vec<usize>, Vec<usize>)>,
}

impl<'a> UnpairedBatches<'a> {
    pub fn new(dx: &'a DomainDataset, dy: &'a DomainDataset, batch_size: usize, seed: u64) -> Result<Self> {
        Self::resume(dx, dy, batch_size, seed, BatchCursor::default())
    }

    pub fn resume(
        dx: &'a DomainDataset,
        dy: &'a DomainDataset,
        batch_size: usize,
        seed: u64,
        cursor: BatchCursor,
    ) -> Result<Self> {
        if dx.is_empty() || dy.is_empty() {
            return Err(Error::DatasetEmpty("unpaired batch source".into()));
        }
        let available = dx.len().min(dy.len());
        if batch_size == 0 || batch_size > available {
            return Err(Error::BatchTooLarge { batch_size, available });
        }
        Ok(UnpairedBatches { dx, dy, batch_size, seed, cursor, perms: None })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dx.len().min(self.dy.len()) / self.batch_size
    }

    pub fn cursor(&self) -> BatchCursor {
        self.cursor
    }

    /// Permutation of `0..n` for `domain` in `epoch`.
    pub fn permutation(seed: u64, epoch: u64, domain: Domain, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * epoch + matches!(domain, Domain::Y) as u64);
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        p
    }

    /// Indices of the next batch, advancing the cursor.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        if self.cursor.batch >= self.batches_per_epoch() {
            self.cursor = BatchCursor { epoch: self.cursor.epoch + 1, batch: 0 };
            self.perms = None;
        }
        let (seed, epoch) = (self.seed, self.cursor.epoch);
        let (px, py) = self.perms.get_or_insert_with(|| {
            (
                Self::permutation(seed, epoch, Domain::X, self.dx.len()),
                Self::permutation(seed, epoch, Domain::Y, self.dy.len()),
            )
        });
        let range = self.cursor.batch * self.batch_size..(self.cursor.batch + 1) * self.batch_size;
        let out = (px[range.clone()].to_vec(), py[range].to_vec());
        self.cursor.batch += 1;
        out
    }

    pub fn next_batch(&mut self) -> Result<(ImageTensor, ImageTensor)> {
        let (ix, iy) = self.next_indices();
        Ok((self.dx.gather(&ix)?, self.dy.gather(&iy)?))
    }
}

impl Iterator for UnpairedBatches<'_> {
    type Item = (ImageTensor, ImageTensor);

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().ok()
    }
}

pub struct PairedSplit {
    pub train_x: DomainDataset,
    pub train_y: DomainDataset,
    pub validation: PairedValidationSet,
    pub validation_groups: Vec<String>,
}

/// Number of held-out groups for `val_fraction`, keeping both sides non-empty.
pub fn validation_group_count(groups: usize, val_fraction: f64) -> usize {
    let n = (groups as f64 * val_fraction).round() as usize;
    if groups < 2 {
        0
    } else {
        n.clamp(1, groups - 1)
    }
}

/// Split a paired root by group. Training domains keep no pairing metadata;
/// the validation set keeps `(x, y_truth)` by filename.
pub fn split_paired(root: &Path, val_fraction: f64, seed: u64, resolution: usize) -> Result<PairedSplit> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let x_all = load_dataset(&root.join("X"), resolution, Domain::X)?;
    let y_all = load_dataset(&root.join("Y"), resolution, Domain::Y)?;
    let y_index: BTreeMap<&str, usize> = y_all.ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let x_index: BTreeSet<&str> = x_all.ids().iter().map(String::as_str).collect();
    if let Some(id) = x_all.ids().iter().find(|id| !y_index.contains_key(id.as_str())) {
        return Err(Error::PairingMismatch(format!("X/{id}.png has no Y/{id}.png")));
    }
    if let Some(id) = y_all.ids().iter().find(|id| !x_index.contains(id.as_str())) {
        return Err(Error::PairingMismatch(format!("Y/{id}.png has no X/{id}.png")));
    }

    let mut groups: Vec<String> = x_all.ids().iter().map(|id| group_of(id).to_string()).collect();
    groups.sort();
    groups.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = groups.clone();
    order.shuffle(&mut rng);
    let n_val = validation_group_count(groups.len(), val_fraction);
    let mut val_groups: Vec<String> = order[..n_val].to_vec();
    val_groups.sort();
    let is_val = |id: &str| val_groups.iter().any(|g| g == group_of(id));

    let (mut train_xi, mut train_yi, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, id) in x_all.ids().iter().enumerate() {
        let j = y_index[id.as_str()];
        if is_val(id) {
            pairs.push(ValidationPair { id: id.clone(), x: x_all.get(i).clone(), y_truth: y_all.get(j).clone() });
        } else {
            train_xi.push(i);
            train_yi.push(j);
        }
    }
    // Y keeps its own filename order; no index relation to X survives.
    train_yi.sort_unstable();
    Ok(PairedSplit {
        train_x: x_all.subset(&train_xi),
        train_y: y_all.subset(&train_yi),
        validation: PairedValidationSet { pairs },
        validation_groups: val_groups,
    })
}
