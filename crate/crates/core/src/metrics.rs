//! Full-reference image quality metrics.
//!
//! Pixel metrics map `[-1, 1]` images to `[0, 1]` first (dynamic range 1).
//! Batched inputs are scored per image and averaged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, PairedValidationSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{FeatureExtractor, Generator};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const UQI_WINDOW: usize = 8;
pub const VIF_MIN_SIZE: usize = 32;
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;
const VIF_NOISE_VAR: f64 = 2.0;
const VIF_SCALES: usize = 4;

/// A single-channel image in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width, "plane size");
        Plane { height, width, pixels }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.pixels[i * self.width + j]
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        let pixels = self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect();
        Plane::new(self.height, self.width, pixels)
    }

    fn subsample(&self) -> Plane {
        let (h, w) = (self.height.div_ceil(2), self.width.div_ceil(2));
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                out.push(self.at(2 * i, 2 * j));
            }
        }
        Plane::new(h, w, out)
    }
}

fn planes(img: &ImageTensor) -> Vec<Plane> {
    let r = img.resolution();
    (0..img.batch()).map(|i| Plane::new(r, r, img.unit_pixels(i))).collect()
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!("metric inputs {:?} vs {:?}", a.tensor().shape(), b.tensor().shape())));
    }
    Ok(())
}

fn batch_mean(a: &ImageTensor, b: &ImageTensor, f: impl Fn(&Plane, &Plane) -> Result<f64>) -> Result<f64> {
    check_pair(a, b)?;
    let (pa, pb) = (planes(a), planes(b));
    let mut sum = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        sum += f(x, y)?;
    }
    Ok(sum / pa.len() as f64)
}

// ---------------------------------------------------------------------------
// Filtering

/// Normalized 1-D Gaussian of odd length `n`.
pub fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let k: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation, keeping only fully-covered positions.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.height + 1 - n, p.width + 1 - n);
    let mut rows = vec![0.0; p.height * ow];
    for i in 0..p.height {
        let src = &p.pixels[i * p.width..][..p.width];
        for j in 0..ow {
            rows[i * ow + j] = k.iter().zip(&src[j..j + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = k.iter().enumerate().map(|(t, &w)| w * rows[(i + t) * ow + j]).sum();
        }
    }
    Plane::new(oh, ow, out)
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Separable correlation at every pixel, mirroring across borders.
fn filter_same(p: &Plane, k: &[f64]) -> Plane {
    let half = (k.len() / 2) as isize;
    let (h, w) = (p.height, p.width);
    let mut padded = Vec::with_capacity((h + 2 * half as usize) * (w + 2 * half as usize));
    for i in -half..h as isize + half {
        for j in -half..w as isize + half {
            padded.push(p.at(mirror(i, h), mirror(j, w)));
        }
    }
    let pw = w + 2 * half as usize;
    filter_valid(&Plane::new(padded.len() / pw, pw, padded), k)
}

struct LocalStats {
    mu_a: Plane,
    mu_b: Plane,
    var_a: Plane,
    var_b: Plane,
    cov: Plane,
}

fn local_stats(a: &Plane, b: &Plane, k: &[f64]) -> LocalStats {
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let aa = filter_valid(&a.zip(a, |x, y| x * y), k);
    let bb = filter_valid(&b.zip(b, |x, y| x * y), k);
    let ab = filter_valid(&a.zip(b, |x, y| x * y), k);
    LocalStats {
        var_a: aa.zip(&mu_a, |e, m| e - m * m),
        var_b: bb.zip(&mu_b, |e, m| e - m * m),
        cov: ab.zip(&mu_a.zip(&mu_b, |x, y| x * y), |e, m| e - m),
        mu_a,
        mu_b,
    }
}

fn check_window(p: &Plane, window: usize) -> Result<()> {
    if p.height < window || p.width < window {
        return Err(Error::Window { height: p.height, width: p.width, window });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-plane metrics

pub fn mse_plane(a: &Plane, b: &Plane) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.pixels.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64> {
    check_window(a, SSIM_WINDOW)?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let s = local_stats(a, b, &k);
    let n = s.mu_a.pixels.len();
    let mut sum = 0.0;
    for i in 0..n {
        let (ma, mb) = (s.mu_a.pixels[i], s.mu_b.pixels[i]);
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * s.cov.pixels[i] + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (s.var_a.pixels[i] + s.var_b.pixels[i] + SSIM_C2);
        sum += num / den;
    }
    Ok(sum / n as f64)
}

/// Universal quality index over uniform sliding windows.
///
/// Windows whose denominator vanishes score 1 when the two windows are
/// identical and are skipped otherwise. If every window is skipped the
/// index is 0.
pub fn uqi_plane(a: &Plane, b: &Plane) -> Result<f64> {
    check_window(a, UQI_WINDOW)?;
    let n = UQI_WINDOW;
    let count = (n * n) as f64;
    let (mut sum, mut used) = (0.0, 0usize);
    let mut wa = vec![0.0; n * n];
    let mut wb = vec![0.0; n * n];
    for i in 0..=a.height - n {
        for j in 0..=a.width - n {
            for r in 0..n {
                wa[r * n..][..n].copy_from_slice(&a.pixels[(i + r) * a.width + j..][..n]);
                wb[r * n..][..n].copy_from_slice(&b.pixels[(i + r) * b.width + j..][..n]);
            }
            let ma = wa.iter().sum::<f64>() / count;
            let mb = wb.iter().sum::<f64>() / count;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for (x, y) in wa.iter().zip(&wb) {
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
                cov += (x - ma) * (y - mb);
            }
            // constant windows get exactly zero variance despite rounding in the mean
            let flat = |w: &[f64]| w.iter().all(|&v| v == w[0]);
            let va = if flat(&wa) { 0.0 } else { va / count };
            let vb = if flat(&wb) { 0.0 } else { vb / count };
            let cov = cov / count;
            let den = (va + vb) * (ma * ma + mb * mb);
            if den == 0.0 {
                if wa == wb {
                    sum += 1.0;
                    used += 1;
                }
                continue;
            }
            sum += 4.0 * cov * ma * mb / den;
            used += 1;
        }
    }
    Ok(if used == 0 { 0.0 } else { sum / used as f64 })
}

/// Window size of VIF scale `s` (0-based): 17, 9, 5, 3.
fn vif_window(s: usize) -> usize {
    (1 << (VIF_SCALES - s)) + 1
}

/// Pixel-domain visual information fidelity over four dyadic scales.
///
/// Images are compared on a 0..255 scale with noise variance 2. Between
/// scales the images are Gaussian-smoothed with border mirroring and
/// subsampled by two. If the reference carries no information at any scale
/// the result is 1 for identical inputs and 0 otherwise.
pub fn vif_plane(reference: &Plane, distorted: &Plane) -> Result<f64> {
    const EPS: f64 = 1e-10;
    let too_small = || Error::Scale { height: reference.height, width: reference.width, scales: VIF_SCALES };
    if reference.height < VIF_MIN_SIZE || reference.width < VIF_MIN_SIZE {
        return Err(too_small());
    }
    let mut r = Plane::new(reference.height, reference.width, reference.pixels.iter().map(|v| v * 255.0).collect());
    let mut d = Plane::new(distorted.height, distorted.width, distorted.pixels.iter().map(|v| v * 255.0).collect());
    let (mut num, mut den) = (0.0, 0.0);
    for s in 0..VIF_SCALES {
        let n = vif_window(s);
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if s > 0 {
            r = filter_same(&r, &k).subsample();
            d = filter_same(&d, &k).subsample();
        }
        if r.height < n || r.width < n {
            return Err(too_small());
        }
        let st = local_stats(&r, &d, &k);
        for i in 0..st.mu_a.pixels.len() {
            let s1 = st.var_a.pixels[i].max(0.0);
            let s2 = st.var_b.pixels[i].max(0.0);
            let s12 = st.cov.pixels[i];
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            let mut s1 = s1;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    if den == 0.0 {
        return Ok(if reference.pixels == distorted.pixels { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

// ---------------------------------------------------------------------------
// Batch metrics

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    batch_mean(a, b, |x, y| Ok(mse_plane(x, y)))
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    batch_mean(a, b, ssim_plane)
}

pub fn uqi(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    batch_mean(a, b, uqi_plane)
}

pub fn vif(reference: &ImageTensor, distorted: &ImageTensor) -> Result<f64> {
    batch_mean(reference, distorted, vif_plane)
}

/// Mean over extractor layers of the mean squared difference between
/// feature maps normalized to unit length across channels.
pub fn learned_perceptual_distance(a: &ImageTensor, b: &ImageTensor, f: &FeatureExtractor<f32>) -> Result<f64> {
    if !f.frozen {
        return Err(Error::FrozenViolation);
    }
    check_pair(a, b)?;
    let fa = f.extract(a.tensor())?;
    let fb = f.extract(b.tensor())?;
    let mut total = 0.0;
    for (ma, mb) in fa.maps.iter().zip(&fb.maps) {
        let c = *ma.shape().last().expect("feature map rank");
        let mut sum = 0.0;
        for (pa, pb) in ma.data().chunks(c).zip(mb.data().chunks(c)) {
            let na = unit_norm(pa);
            let nb = unit_norm(pb);
            sum += pa.iter().zip(pb).map(|(&x, &y)| (x as f64 / na - y as f64 / nb).powi(2)).sum::<f64>();
        }
        total += sum / ma.len() as f64;
    }
    Ok(total / fa.maps.len() as f64)
}

fn unit_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() + 1e-10
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub ssim: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub uqi: f64,
    pub vif: f64,
    /// Absent when no feature extractor was available.
    pub lpd: Option<f64>,
}

impl MetricScores {
    pub const NAMES: [&'static str; 6] = ["ssim", "psnr_db", "mse", "uqi", "vif", "lpd"];

    pub fn compute(a: &ImageTensor, b: &ImageTensor, f: Option<&FeatureExtractor<f32>>) -> Result<Self> {
        Ok(MetricScores {
            ssim: ssim(a, b)?,
            psnr_db: psnr(a, b)?,
            mse: mse(a, b)?,
            uqi: uqi(a, b)?,
            vif: vif(a, b)?,
            lpd: f.map(|f| learned_perceptual_distance(a, b, f)).transpose()?,
        })
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [Some(self.ssim), Some(self.psnr_db), Some(self.mse), Some(self.uqi), Some(self.vif), self.lpd]
    }

    /// Arithmetic mean of each metric.
    pub fn mean(scores: &[MetricScores]) -> Self {
        let n = scores.len() as f64;
        let avg = |f: fn(&MetricScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let lpd = if scores.iter().all(|s| s.lpd.is_some()) {
            Some(scores.iter().map(|s| s.lpd.unwrap_or(0.0)).sum::<f64>() / n)
        } else {
            None
        };
        MetricScores {
            ssim: avg(|s| s.ssim),
            psnr_db: avg(|s| s.psnr_db),
            mse: avg(|s| s.mse),
            uqi: avg(|s| s.uqi),
            vif: avg(|s| s.vif),
            lpd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub scores: MetricScores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub checkpoint: String,
    pub timestamp: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub models: Vec<ModelRow>,
    pub metadata: ReportMetadata,
    /// Per-pair scores behind the first model's means, when available.
    pub per_pair: Vec<(String, MetricScores)>,
}

pub const REPORT_HEADER: &str = "model,ssim,psnr_db,mse,uqi,vif,lpd";

impl MetricReport {
    /// `(model, metric, value)` triples; `lpd` is left out when absent.
    pub fn rows(&self) -> Vec<(String, &'static str, f64)> {
        let mut out = Vec::new();
        for m in &self.models {
            for (name, v) in MetricScores::NAMES.iter().zip(m.scores.values()) {
                if let Some(v) = v {
                    out.push((m.model.clone(), *name, v));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for m in &self.models {
            s.push_str(&m.model);
            for v in m.scores.values() {
                match v {
                    Some(v) => write!(s, ",{v:.6}").expect("write to string"),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::Config("metric report header mismatch".into()));
        }
        let mut models = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 7 {
                return Err(Error::Config(format!("metric report row {line:?}")));
            }
            let num = |c: &str| -> Result<f64> {
                c.trim().parse().map_err(|_| Error::Config(format!("metric value {c:?}")))
            };
            let lpd = if cells[6].trim().is_empty() { None } else { Some(num(cells[6])?) };
            models.push(ModelRow {
                model: cells[0].to_string(),
                scores: MetricScores {
                    ssim: num(cells[1])?,
                    psnr_db: num(cells[2])?,
                    mse: num(cells[3])?,
                    uqi: num(cells[4])?,
                    vif: num(cells[5])?,
                    lpd,
                },
            });
        }
        Ok(MetricReport { models, ..Default::default() })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Translate every validation `x` with `g` and score it against its ground
/// truth. Pairs are scored in parallel.
pub fn evaluate_on_validation(
    model: &str,
    g: &Generator<f32>,
    val: &PairedValidationSet,
    f: Option<&FeatureExtractor<f32>>,
) -> Result<MetricReport> {
    if val.is_empty() {
        return Err(Error::DatasetEmpty("paired validation set".into()));
    }
    let per_pair: Vec<Result<MetricScores>> = exec::map_indexed(val.len(), |i| {
        let p = &val.pairs[i];
        let out = g.translate(&p.x)?;
        MetricScores::compute(&out, &p.y_truth, f)
    });
    let per_pair = per_pair.into_iter().collect::<Result<Vec<_>>>()?;
    let ids = val.pairs.iter().map(|p| p.id.clone());
    Ok(MetricReport {
        models: vec![ModelRow { model: model.to_string(), scores: MetricScores::mean(&per_pair) }],
        metadata: ReportMetadata::default(),
        per_pair: ids.zip(per_pair).collect(),
    })
}
