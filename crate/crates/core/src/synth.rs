//! Synthetic two-domain corpus with a known pixelwise transform.
//!
//! Domain X holds compositions of soft-edged shapes over a ramp background.
//! Domain Y is `T(x) = clip(blur(1 - x) + texture)`. Both are exported as
//! 8-bit PNG under `X/` and `Y/` with matching names `p{group}_{index}.png`,
//! where the ten groups stand in for patients.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, PairedValidationSet};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{self, Plane};

pub const GROUPS: usize = 10;
/// Period in pixels of the additive texture grid.
pub const TEXTURE_PERIOD: f64 = 4.0;
const SUPERSAMPLE: usize = 4;
pub const MANIFEST_FILE: &str = "synth_manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    InvertBlur,
    InvertBlurTexture,
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invert_blur" => Ok(Transform::InvertBlur),
            "invert_blur_texture" => Ok(Transform::InvertBlurTexture),
            other => Err(Error::Config(format!("unknown transform {other:?}"))),
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transform::InvertBlur => "invert_blur",
            Transform::InvertBlurTexture => "invert_blur_texture",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_images: usize,
    pub resolution: usize,
    pub transform: Transform,
    pub blur_sigma: f64,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_images: 200,
            resolution: 64,
            transform: Transform::InvertBlurTexture,
            blur_sigma: 2.0,
            texture_amplitude: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::Config(format!("synthetic resolution {} below 32", self.resolution)));
        }
        if self.n_images < 10 {
            return Err(Error::Config(format!("synthetic corpus needs at least 10 images, got {}", self.n_images)));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!("blur_sigma {}", self.blur_sigma)));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude.is_finite()) {
            return Err(Error::Config(format!("texture_amplitude {}", self.texture_amplitude)));
        }
        Ok(())
    }

    /// File stem of image `index`.
    pub fn name(index: usize) -> String {
        format!("p{}_{index:04}", index % GROUPS)
    }
}

// ---------------------------------------------------------------------------
// Domain X rendering

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse,
    Rect,
}

#[derive(Clone, Copy, Debug)]
struct Ramp {
    base: f64,
    slope: f64,
    dir: (f64, f64),
}

impl Ramp {
    fn random(rng: &mut ChaCha8Rng, base: (f64, f64), slope: f64) -> Self {
        let a = rng.random_range(0.0..2.0 * PI);
        Ramp { base: rng.random_range(base.0..base.1), slope: rng.random_range(-slope..slope), dir: (a.cos(), a.sin()) }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.base + self.slope * ((u - 0.5) * self.dir.0 + (v - 0.5) * self.dir.1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    shape: Shape,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    fill: Ramp,
}

impl Blob {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let a = (du * c + dv * s) / self.radii.0;
        let b = (-du * s + dv * c) / self.radii.1;
        match self.shape {
            Shape::Ellipse => a * a + b * b <= 1.0,
            Shape::Rect => a.abs() <= 1.0 && b.abs() <= 1.0,
        }
    }
}

/// One domain-X image in `[0, 1]`, row-major.
pub fn render_x(rng: &mut ChaCha8Rng, res: usize) -> Vec<f64> {
    let background = Ramp::random(rng, (0.05, 0.35), 0.3);
    let count = rng.random_range(2..=5);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            shape: if rng.random_bool(0.5) { Shape::Ellipse } else { Shape::Rect },
            center: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            radii: (rng.random_range(0.08..0.3), rng.random_range(0.08..0.3)),
            angle: rng.random_range(0.0..PI),
            fill: Ramp::random(rng, (0.4, 0.95), 0.6),
        })
        .collect();
    let step = 1.0 / (res * SUPERSAMPLE) as f64;
    let mut out = Vec::with_capacity(res * res);
    for i in 0..res {
        for j in 0..res {
            let mut acc = 0.0;
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let v = ((i * SUPERSAMPLE + si) as f64 + 0.5) * step;
                    let u = ((j * SUPERSAMPLE + sj) as f64 + 0.5) * step;
                    // later shapes paint over earlier ones
                    let top = blobs.iter().rev().find(|b| b.contains(u, v));
                    acc += top.map_or(background.at(u, v), |b| b.fill.at(u, v));
                }
            }
            out.push((acc / (SUPERSAMPLE * SUPERSAMPLE) as f64).clamp(0.0, 1.0));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Transform

fn blur(pixels: &[f64], res: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return pixels.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = metrics::gaussian_kernel(2 * radius + 1, sigma);
    let reflect = |i: isize| -> usize {
        let n = res as isize;
        let i = if i < 0 { -i - 1 } else { i };
        (if i >= n { 2 * n - 1 - i } else { i }).clamp(0, n - 1) as usize
    };
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; res * res];
        for i in 0..res {
            for j in 0..res {
                let mut acc = 0.0;
                for (t, &w) in kernel.iter().enumerate() {
                    let o = t as isize - radius as isize;
                    acc += w * if horizontal {
                        src[i * res + reflect(j as isize + o)]
                    } else {
                        src[reflect(i as isize + o) * res + j]
                    };
                }
                out[i * res + j] = acc;
            }
        }
        out
    };
    pass(&pass(pixels, true), false)
}

/// Additive texture value at pixel `(i, j)` for unit amplitude, in `[-1, 1]`.
pub fn texture(i: usize, j: usize) -> f64 {
    let w = 2.0 * PI / TEXTURE_PERIOD;
    0.5 * ((w * (j as f64 + 0.5)).sin() + (w * (i as f64 + 0.5)).sin())
}

/// `T(x)` on a `res x res` image in `[0, 1]`.
pub fn apply_transform(x: &[f64], res: usize, spec: &SynthSpec) -> Vec<f64> {
    let inverted: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    let mut y = blur(&inverted, res, spec.blur_sigma);
    if spec.transform == Transform::InvertBlurTexture {
        for i in 0..res {
            for j in 0..res {
                y[i * res + j] += spec.texture_amplitude * texture(i, j);
            }
        }
    }
    y.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// An image pair as it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub name: String,
    pub x: Vec<u8>,
    pub y: Vec<u8>,
}

/// Image `index` of the corpus. `y` is computed from the quantized `x`, so
/// it can be recomputed exactly from the exported file.
pub fn generate_pair(spec: &SynthSpec, index: usize) -> SynthPair {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let x: Vec<u8> = render_x(&mut rng, spec.resolution).into_iter().map(quantize).collect();
    let y = transform_u8(&x, spec);
    SynthPair { name: SynthSpec::name(index), x, y }
}

pub fn transform_u8(x: &[u8], spec: &SynthSpec) -> Vec<u8> {
    let unit: Vec<f64> = x.iter().map(|&v| v as f64 / 255.0).collect();
    apply_transform(&unit, spec.resolution, spec).into_iter().map(quantize).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub spec: SynthSpec,
    /// Mean SSIM between each `x` and `T(x)`.
    pub identity_ssim: f64,
}

/// Write the corpus to `out_dir/X` and `out_dir/Y`, plus a manifest.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    for d in ["X", "Y"] {
        let p = out_dir.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
    }
    let r = spec.resolution;
    let scores: Vec<Result<f64>> = exec::map_indexed(spec.n_images, |i| {
        let pair = generate_pair(spec, i);
        let file = format!("{}.png", pair.name);
        let to_plane = |b: &[u8]| Plane::new(r, r, b.iter().map(|&v| v as f64 / 255.0).collect());
        let s = metrics::ssim_plane(&to_plane(&pair.x), &to_plane(&pair.y))?;
        data::save_gray8(&out_dir.join("X").join(&file), r as u32, r as u32, pair.x)?;
        data::save_gray8(&out_dir.join("Y").join(&file), r as u32, r as u32, pair.y)?;
        Ok(s)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let summary = CorpusSummary { spec: spec.clone(), identity_ssim: scores.iter().sum::<f64>() / scores.len() as f64 };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(summary)
}

pub fn read_summary(dir: &Path) -> Result<CorpusSummary> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Ground-truth pairs of the validation groups of a generated corpus.
///
/// Every pair is checked against a fresh evaluation of the transform on the
/// exported `x`.
pub fn oracle_pairs(out_dir: &Path, val_fraction: f64, seed: u64) -> Result<PairedValidationSet> {
    let summary = read_summary(out_dir)?;
    let split = data::split_paired(out_dir, val_fraction, seed, summary.spec.resolution)?;
    for p in &split.validation.pairs {
        let x: Vec<u8> = p.x.tensor().data().iter().map(|&v| data::denormalize_u8(v)).collect();
        let y: Vec<u8> = p.y_truth.tensor().data().iter().map(|&v| data::denormalize_u8(v)).collect();
        if transform_u8(&x, &summary.spec) != y {
            return Err(Error::PairingMismatch(format!("{} is not the transform of its source", p.id)));
        }
    }
    Ok(split.validation)
}
