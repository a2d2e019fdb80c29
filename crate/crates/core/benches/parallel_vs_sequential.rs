use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cycle_medgan::data::{ImageTensor, PairedValidationSet, ValidationPair};
use cycle_medgan::exec;
use cycle_medgan::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use cycle_medgan::metrics;
use cycle_medgan::nn::{Generator, GeneratorConfig, NetworkConfig};
use cycle_medgan::tensor::Tensor;
use cycle_medgan::training::{train_step, TrainConfig, TrainState};

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn pseudo(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
        (h % 2000) as f32 / 1000.0 - 1.0
    })
}

fn image(n: usize, r: usize, salt: u64) -> ImageTensor {
    ImageTensor::new(pseudo(&[n, r, r, 1], salt)).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    let x = pseudo(&[8, 64, 64, 16], 1);
    let w = pseudo(&[3, 3, 16, 16], 2).map(|v| v * 0.1);
    let geom = ConvGeom { kernel: 3, stride: 1, pad: 1 };
    for (name, par) in MODES {
        exec::set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let y = conv2d_forward(&x, &w, None, geom);
                conv2d_backward(&x, &w, false, geom, &y, true)
            })
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_32px");
    group.sample_size(10);
    let mut net = NetworkConfig::at_resolution(32);
    net.generator.base_filters = 8;
    net.discriminator.base_filters = 8;
    let cfg = TrainConfig { batch_size: 4, resolution: 32, weights: TrainConfig::default().weights.without_feature_terms(), ..Default::default() };
    let (x, y) = (image(4, 32, 3), image(4, 32, 4));
    for (name, par) in MODES {
        exec::set_parallel(par);
        let mut state = TrainState::new(net.clone(), None, &cfg).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| train_step(&mut state, &x, &y, &cfg).unwrap()));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate_16_pairs");
    group.sample_size(10);
    let config = GeneratorConfig { input_resolution: 64, base_filters: 8, ..Default::default() };
    let g = Generator::<f32>::new(config, 7).unwrap();
    let pairs = (0..16)
        .map(|i| ValidationPair { id: format!("p{i}"), x: image(1, 64, 10 + i), y_truth: image(1, 64, 50 + i) })
        .collect();
    let val = PairedValidationSet { pairs };
    for (name, par) in MODES {
        exec::set_parallel(par);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| metrics::evaluate_on_validation("bench", &g, &val, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, step, evaluation);
criterion_main!(benches);
