mod common;

use cycle_medgan::data::{ImageTensor, PairedValidationSet, ValidationPair};
use cycle_medgan::metrics::{
    self, learned_perceptual_distance, mse_plane, ssim_plane, uqi_plane, vif_plane, MetricReport, MetricScores,
    Plane, PSNR_CAP_DB, REPORT_HEADER,
};
use cycle_medgan::nn::{ExtractorConfig, FeatureExtractor, Generator, GeneratorConfig};
use cycle_medgan::tensor::Tensor;
use cycle_medgan::Error;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use common::{images, rng, smooth_images, unit_grid};

fn random_plane(r: &mut ChaCha8Rng, n: usize) -> Plane {
    Plane::new(n, n, (0..n * n).map(|_| r.random::<f64>()).collect())
}

fn grid(p: &Plane) -> Vec<Vec<f64>> {
    p.pixels.chunks(p.width).map(|r| r.to_vec()).collect()
}

/// SSIM by explicit 11x11 Gaussian windows at every fully covered position.
fn oracle_ssim(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = 11;
    let sigma: f64 = 1.5;
    let mut w = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let size = a.len();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..=size - n {
        for j in 0..=size - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    ma += w[u][v] / total * a[i + u][j + v];
                    mb += w[u][v] / total * b[i + u][j + v];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let k = w[u][v] / total;
                    va += k * (a[i + u][j + v] - ma).powi(2);
                    vb += k * (b[i + u][j + v] - mb).powi(2);
                    cov += k * (a[i + u][j + v] - ma) * (b[i + u][j + v] - mb);
                }
            }
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// UQI by explicit uniform 8x8 windows.
fn oracle_uqi(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = 8;
    let size = a.len();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..=size - n {
        for j in 0..=size - n {
            let cells: Vec<(f64, f64)> =
                (0..n * n).map(|k| (a[i + k / n][j + k % n], b[i + k / n][j + k % n])).collect();
            let m = (n * n) as f64;
            let ma = cells.iter().map(|c| c.0).sum::<f64>() / m;
            let mb = cells.iter().map(|c| c.1).sum::<f64>() / m;
            let va = cells.iter().map(|c| (c.0 - ma).powi(2)).sum::<f64>() / m;
            let vb = cells.iter().map(|c| (c.1 - mb).powi(2)).sum::<f64>() / m;
            let cov = cells.iter().map(|c| (c.0 - ma) * (c.1 - mb)).sum::<f64>() / m;
            sum += 4.0 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb));
            count += 1;
        }
    }
    sum / count as f64
}

fn oracle_mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s / (a.len() * a[0].len()) as f64
}

fn extractor(res: usize) -> FeatureExtractor<f32> {
    let cfg = ExtractorConfig { input_resolution: res, channels: vec![4, 8, 8], strides: vec![1, 2, 2] };
    FeatureExtractor::new(cfg, 3).unwrap().frozen()
}

/// `img` plus Gaussian noise of std `sigma` on the unit scale, clipped.
fn noisy(img: &ImageTensor, sigma: f64, r: &mut ChaCha8Rng) -> ImageTensor {
    let noise = Normal::new(0.0, 2.0 * sigma).unwrap();
    let data = img.tensor().data().iter().map(|&v| (v as f64 + noise.sample(r)).clamp(-1.0, 1.0) as f32).collect();
    ImageTensor::new(Tensor::from_vec(img.tensor().shape(), data).unwrap()).unwrap()
}

#[test]
fn ssim_uqi_mse_match_window_oracles_on_16px() {
    let mut r = rng(30);
    for _ in 0..10 {
        let a = random_plane(&mut r, 16);
        let b = Plane::new(16, 16, a.pixels.iter().map(|v| (v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect());
        let (ga, gb) = (grid(&a), grid(&b));
        assert!((ssim_plane(&a, &b).unwrap() - oracle_ssim(&ga, &gb)).abs() < 1e-6);
        assert!((uqi_plane(&a, &b).unwrap() - oracle_uqi(&ga, &gb)).abs() < 1e-6);
        assert!((mse_plane(&a, &b) - oracle_mse(&ga, &gb)).abs() < 1e-9);
    }
}

#[test]
fn batch_metrics_match_oracles_through_image_tensors() {
    let mut r = rng(31);
    let a = images(&mut r, 3, 16);
    let b = images(&mut r, 3, 16);
    let mut want = (0.0, 0.0, 0.0);
    for i in 0..3 {
        let (ga, gb) = (unit_grid(&a, i), unit_grid(&b, i));
        want.0 += oracle_ssim(&ga, &gb) / 3.0;
        want.1 += oracle_uqi(&ga, &gb) / 3.0;
        want.2 += oracle_mse(&ga, &gb) / 3.0;
    }
    assert!((metrics::ssim(&a, &b).unwrap() - want.0).abs() < 1e-6);
    assert!((metrics::uqi(&a, &b).unwrap() - want.1).abs() < 1e-6);
    assert!((metrics::mse(&a, &b).unwrap() - want.2).abs() < 1e-9);
}

#[derive(Deserialize)]
struct Reference {
    cases: Vec<ReferenceCase>,
}

#[derive(Deserialize)]
struct ReferenceCase {
    size: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    ssim: f64,
}

#[test]
fn ssim_agrees_with_scikit_image() {
    let text = include_str!("fixtures/ssim_reference.json");
    let reference: Reference = serde_json::from_str(text).unwrap();
    assert!(!reference.cases.is_empty());
    for c in reference.cases {
        let a = Plane::new(c.size, c.size, c.a);
        let b = Plane::new(c.size, c.size, c.b);
        let got = ssim_plane(&a, &b).unwrap();
        assert!((got - c.ssim).abs() < 1e-6, "{}px: {got} vs {}", c.size, c.ssim);
    }
}

#[test]
fn identical_inputs_score_perfectly() {
    let mut r = rng(32);
    let f = extractor(32);
    for _ in 0..50 {
        let x = images(&mut r, 1, 32);
        let s = MetricScores::compute(&x, &x.clone(), Some(&f)).unwrap();
        assert!((s.ssim - 1.0).abs() < 1e-6, "ssim {}", s.ssim);
        assert!((s.uqi - 1.0).abs() < 1e-6, "uqi {}", s.uqi);
        assert!((s.vif - 1.0).abs() < 1e-6, "vif {}", s.vif);
        assert_eq!(s.mse, 0.0);
        assert_eq!(s.psnr_db, PSNR_CAP_DB);
        assert_eq!(s.lpd, Some(0.0));
    }
}

#[test]
fn constant_images_reduce_ssim_to_luminance() {
    let a = ImageTensor::from_unit(&[0.5; 256], 16).unwrap();
    let b = ImageTensor::from_unit(&[0.25; 256], 16).unwrap();
    let expect = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
    assert!((metrics::ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
    let zeros = ImageTensor::from_unit(&[0.0; 256], 16).unwrap();
    let ones = ImageTensor::from_unit(&[1.0; 256], 16).unwrap();
    assert_eq!(metrics::mse(&zeros, &ones).unwrap(), 1.0);
    assert_eq!(metrics::psnr(&zeros, &ones).unwrap(), 0.0);
}

#[test]
fn symmetric_metrics_are_symmetric() {
    let mut r = rng(33);
    let f = extractor(32);
    for _ in 0..10 {
        let (a, b) = (images(&mut r, 2, 32), images(&mut r, 2, 32));
        assert!((metrics::ssim(&a, &b).unwrap() - metrics::ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!((metrics::uqi(&a, &b).unwrap() - metrics::uqi(&b, &a).unwrap()).abs() < 1e-9);
        assert_eq!(metrics::mse(&a, &b).unwrap(), metrics::mse(&b, &a).unwrap());
        let (d1, d2) =
            (learned_perceptual_distance(&a, &b, &f).unwrap(), learned_perceptual_distance(&b, &a, &f).unwrap());
        assert!((d1 - d2).abs() < 1e-9);
    }
}

#[test]
fn batch_order_does_not_change_scores() {
    let mut r = rng(34);
    let (a, b) = (smooth_images(&mut r, 3, 32), smooth_images(&mut r, 3, 32));
    let order = [2, 0, 1];
    let perm = |t: &ImageTensor| {
        let parts: Vec<ImageTensor> = order.iter().map(|&i| t.sample(i)).collect();
        ImageTensor::stack(&parts.iter().collect::<Vec<_>>()).unwrap()
    };
    let f = extractor(32);
    let s = MetricScores::compute(&a, &b, Some(&f)).unwrap();
    let p = MetricScores::compute(&perm(&a), &perm(&b), Some(&f)).unwrap();
    for (x, y) in s.values().iter().zip(p.values()) {
        assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ssim_and_psnr_fall_as_noise_grows() {
    let mut r = rng(35);
    let clean = smooth_images(&mut r, 20, 32);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for sigma in [0.01, 0.05, 0.1] {
        let mut nr = rng(36);
        let degraded = noisy(&clean, sigma, &mut nr);
        let (s, p) = (metrics::ssim(&clean, &degraded).unwrap(), metrics::psnr(&clean, &degraded).unwrap());
        assert!(s < last.0 && p < last.1, "sigma {sigma}: ssim {s} psnr {p} after {last:?}");
        last = (s, p);
    }
}

#[test]
fn lpd_grows_with_noise() {
    let f = extractor(32);
    let (mut small, mut large) = (0.0, 0.0);
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let x = smooth_images(&mut r, 1, 32);
        small += learned_perceptual_distance(&x, &noisy(&x, 0.01, &mut r), &f).unwrap();
        large += learned_perceptual_distance(&x, &noisy(&x, 0.1, &mut r), &f).unwrap();
    }
    assert!(large > small, "{large} vs {small}");
}

#[test]
fn lpd_requires_a_frozen_extractor() {
    let cfg = ExtractorConfig { input_resolution: 32, channels: vec![4], strides: vec![1] };
    let f = FeatureExtractor::<f32>::new(cfg, 0).unwrap();
    let x = images(&mut rng(37), 1, 32);
    assert!(matches!(learned_perceptual_distance(&x, &x, &f), Err(Error::FrozenViolation)));
}

#[test]
fn vif_drops_under_blur_and_is_deterministic() {
    let mut r = rng(38);
    let x = smooth_images(&mut r, 1, 64);
    let noise = images(&mut r, 1, 64);
    // detail the box blur below removes
    let detailed =
        ImageTensor::new(x.tensor().zip_map(noise.tensor(), |a, b| (0.7 * a + 0.3 * b).clamp(-1.0, 1.0))).unwrap();
    let p = detailed.unit_pixels(0);
    let blurred: Vec<f32> = (0..64 * 64)
        .map(|k| {
            let (i, j) = (k / 64, k % 64);
            let mut s = 0.0;
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                s += p[(i + di).min(63) * 64 + (j + dj).min(63)];
            }
            (s / 4.0) as f32
        })
        .collect();
    let blurred = ImageTensor::from_unit(&blurred, 64).unwrap();
    let v = metrics::vif(&detailed, &blurred).unwrap();
    assert!(v < 1.0 && v > 0.0, "{v}");
    assert_eq!(v, metrics::vif(&detailed, &blurred).unwrap());
}

#[test]
fn size_preconditions_are_enforced() {
    let mut r = rng(39);
    let small = random_plane(&mut r, 10);
    assert!(matches!(ssim_plane(&small, &small), Err(Error::Window { .. })));
    assert!(matches!(uqi_plane(&random_plane(&mut r, 7), &random_plane(&mut r, 7)), Err(Error::Window { .. })));
    let p = random_plane(&mut r, 31);
    assert!(matches!(vif_plane(&p, &p), Err(Error::Scale { .. })));
    let (a, b) = (images(&mut r, 1, 16), images(&mut r, 2, 16));
    assert!(matches!(metrics::mse(&a, &b), Err(Error::Shape(_))));
}

#[test]
fn uqi_skips_flat_windows_unless_they_match() {
    let flat = Plane::new(8, 8, vec![0.0; 64]);
    assert_eq!(uqi_plane(&flat, &flat).unwrap(), 1.0);
    let other = Plane::new(8, 8, vec![0.4; 64]);
    let grey = Plane::new(8, 8, vec![0.2; 64]);
    assert_eq!(uqi_plane(&grey, &other).unwrap(), 0.0);
}

fn generator(res: usize) -> Generator<f32> {
    let cfg = GeneratorConfig { input_resolution: res, base_filters: 4, residual_blocks: 1, ..Default::default() };
    Generator::new(cfg, 5).unwrap()
}

#[test]
fn validation_report_means_are_per_pair_means() {
    let mut r = rng(40);
    let g = generator(32);
    let pairs: Vec<ValidationPair> = (0..5)
        .map(|i| ValidationPair { id: format!("p{i}"), x: smooth_images(&mut r, 1, 32), y_truth: smooth_images(&mut r, 1, 32) })
        .collect();
    let val = PairedValidationSet { pairs };
    let f = extractor(32);
    let report = metrics::evaluate_on_validation("m", &g, &val, Some(&f)).unwrap();
    assert_eq!(report.rows().len(), 6);
    assert_eq!(report.per_pair.len(), 5);
    let mean = report.models[0].scores;
    for k in 0..6 {
        let avg = report.per_pair.iter().map(|(_, s)| s.values()[k].unwrap()).sum::<f64>() / 5.0;
        assert!((mean.values()[k].unwrap() - avg).abs() < 1e-9);
    }
    let without = metrics::evaluate_on_validation("m", &g, &val, None).unwrap();
    assert_eq!(without.rows().len(), 5);
    assert_eq!(without.models[0].scores.lpd, None);
}

#[test]
fn validation_against_the_generators_own_output_is_perfect() {
    let mut r = rng(41);
    let g = generator(32);
    let pairs: Vec<ValidationPair> = (0..3)
        .map(|i| {
            let x = smooth_images(&mut r, 1, 32);
            let y_truth = g.translate(&x).unwrap();
            ValidationPair { id: format!("p{i}"), x, y_truth }
        })
        .collect();
    let report = metrics::evaluate_on_validation("m", &g, &PairedValidationSet { pairs }, None).unwrap();
    let s = report.models[0].scores;
    assert!((s.ssim - 1.0).abs() < 1e-9);
    assert_eq!(s.mse, 0.0);
    assert_eq!(s.psnr_db, PSNR_CAP_DB);
}

#[test]
fn empty_validation_set_is_rejected() {
    let g = generator(32);
    let err = metrics::evaluate_on_validation("m", &g, &PairedValidationSet { pairs: vec![] }, None);
    assert!(matches!(err, Err(Error::DatasetEmpty(_))));
}

#[test]
fn report_csv_round_trips() {
    let row = |name: &str, lpd| cycle_medgan::metrics::ModelRow {
        model: name.into(),
        scores: MetricScores { ssim: 0.9, psnr_db: 21.5, mse: 0.01, uqi: 0.8, vif: 0.4, lpd },
    };
    let report = MetricReport { models: vec![row("cycle_gan", None), row("cycle_medgan", Some(0.003))], ..Default::default() };
    let text = report.to_csv();
    assert!(text.starts_with(REPORT_HEADER));
    assert!(text.contains("cycle_gan,0.900000,21.500000,0.010000,0.800000,0.400000,\n"));
    assert_eq!(MetricReport::from_csv(&text).unwrap().models, report.models);
    assert!(MetricReport::from_csv("model,ssim\n").is_err());
}
