#![allow(dead_code)]

use cycle_medgan::data::ImageTensor;
use cycle_medgan::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random images in [-1, 1].
pub fn images(rng: &mut ChaCha8Rng, n: usize, res: usize) -> ImageTensor {
    ImageTensor::new(Tensor::from_fn(&[n, res, res, 1], |_| rng.random_range(-1.0f32..1.0))).unwrap()
}

/// Smooth random images, closer to natural content than white noise.
pub fn smooth_images(rng: &mut ChaCha8Rng, n: usize, res: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(n * res * res);
    for _ in 0..n {
        let (a, b, c): (f32, f32, f32) = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random());
        for i in 0..res {
            for j in 0..res {
                let (u, v) = (i as f32 / res as f32, j as f32 / res as f32);
                let s = 0.5 * (a * 6.28 * u + c * 6.28).sin() * (b * 6.28 * v).cos() + 0.3 * (u - v);
                data.push(s.clamp(-1.0, 1.0));
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(&[n, res, res, 1], data).unwrap()).unwrap()
}

/// Unit-range pixels of the `i`th image as a row-major grid.
pub fn unit_grid(img: &ImageTensor, i: usize) -> Vec<Vec<f64>> {
    let r = img.resolution();
    let p = img.unit_pixels(i);
    (0..r).map(|row| p[row * r..(row + 1) * r].to_vec()).collect()
}
