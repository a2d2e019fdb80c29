mod common;

use std::time::Instant;

use cycle_medgan::losses::{
    adversarial_value, cycle_consistency_loss_tensors, cycle_perceptual_loss, cycle_style_loss, gram_matrix,
    total_objective, LossParts, LossWeights,
};
use cycle_medgan::nn::FeatureStack;
use cycle_medgan::tensor::Tensor;
use cycle_medgan::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use common::{rng, uniform};

/// Nested-loop Gram matrix of an (h, w, d) map given as `f[h][w][m]`.
fn oracle_gram(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (h, w, d) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let at = |i: usize, j: usize, m: usize| t.data()[(i * w + j) * d + m];
    let mut g = vec![vec![0.0; d]; d];
    for (m, row) in g.iter_mut().enumerate() {
        for (n, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += at(i, j, m) * at(i, j, n);
                }
            }
            *cell = acc / (h * w * d) as f64;
        }
    }
    g
}

fn oracle_frobenius_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (va, vb) in ra.iter().zip(rb) {
            s += (va - vb) * (va - vb);
        }
    }
    s
}

fn oracle_mae(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a.data()[i] - b.data()[i]).abs();
    }
    s / a.len() as f64
}

fn single(maps: Vec<Tensor<f64>>) -> FeatureStack<f64> {
    FeatureStack { maps }
}

#[test]
fn gram_matches_nested_loops_on_random_maps() {
    let start = Instant::now();
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=16));
        let t = uniform(&mut r, &[h, w, d], -2.0, 2.0);
        let got = gram_matrix(&t, 0).unwrap();
        let want = oracle_gram(&t);
        assert_eq!(got.dim, d);
        for m in 0..d {
            for n in 0..d {
                worst = worst.max((got.at(m, n) - want[m][n]).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max abs error {worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn gram_in_single_precision_tracks_the_oracle() {
    let mut r = rng(12);
    for _ in 0..20 {
        let t = uniform(&mut r, &[8, 8, 16], -1.0, 1.0);
        let got = gram_matrix(&t.cast::<f32>(), 0).unwrap();
        let want = oracle_gram(&t.cast::<f32>().cast::<f64>());
        for m in 0..16 {
            for n in 0..16 {
                assert!((got.at(m, n) - want[m][n]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn gram_worked_examples() {
    let t = Tensor::from_vec(&[1, 1, 2], vec![2.0, 3.0]).unwrap();
    assert_eq!(gram_matrix(&t, 0).unwrap().values, vec![2.0, 3.0, 3.0, 4.5]);
    let t = Tensor::from_vec(&[2, 1, 1], vec![1.0, 3.0]).unwrap();
    assert_eq!(gram_matrix(&t, 0).unwrap().values, vec![5.0]);
    let t = Tensor::<f64>::zeros(&[3, 2, 4]);
    assert!(gram_matrix(&t, 0).unwrap().values.iter().all(|&v| v == 0.0));
}

#[test]
fn gram_rejects_non_finite_features() {
    let t = Tensor::from_vec(&[1, 2, 1], vec![1.0, f64::NAN]).unwrap();
    assert!(matches!(gram_matrix(&t, 3), Err(Error::Numerical(_))));
}

#[test]
fn gram_is_symmetric_and_positive_semidefinite() {
    let mut r = rng(13);
    for _ in 0..50 {
        let (h, w, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=16));
        let g = gram_matrix(&uniform(&mut r, &[h, w, d], -3.0, 3.0), 0).unwrap();
        assert_eq!(g.max_asymmetry(), 0.0);
        let m = DMatrix::from_row_slice(d, d, &g.values);
        let min = m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8, "eigenvalue {min}");
    }
}

#[test]
fn channel_permutation_conjugates_gram() {
    let mut r = rng(14);
    let (h, w, d) = (5, 4, 6);
    let t = uniform(&mut r, &[h, w, d], -1.0, 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = Tensor::from_fn(&[h, w, d], |i| t.data()[i - i % d + perm[i % d]]);
    let (g, gp) = (gram_matrix(&t, 0).unwrap(), gram_matrix(&permuted, 0).unwrap());
    for m in 0..d {
        for n in 0..d {
            assert!((gp.at(m, n) - g.at(perm[m], perm[n])).abs() < 1e-12);
        }
    }
}

#[test]
fn style_loss_is_invariant_to_a_shared_channel_permutation() {
    let mut r = rng(15);
    let perm = [2, 0, 3, 1];
    let shuffle = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i - i % 4 + perm[i % 4]]);
    let maps: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[1, 3, 3, 4], -1.0, 1.0)).collect();
    let w = LossWeights::with_layers(1);
    let base = cycle_style_loss(
        &single(vec![maps[0].clone()]),
        &single(vec![maps[1].clone()]),
        &single(vec![maps[2].clone()]),
        &single(vec![maps[3].clone()]),
        &w,
    )
    .unwrap();
    let p: Vec<FeatureStack<f64>> = maps.iter().map(|m| single(vec![shuffle(m)])).collect();
    let permuted = cycle_style_loss(&p[0], &p[1], &p[2], &p[3], &w).unwrap();
    assert!((base - permuted).abs() < 1e-12);
}

#[test]
fn style_loss_matches_brute_force_on_small_maps() {
    let mut r = rng(16);
    for _ in 0..20 {
        // two layers with different depth, batch of one
        let layer_weights = vec![r.random_range(0.1..2.0), r.random_range(0.1..2.0)];
        let shapes = [[1, 3, 3, 2], [1, 2, 2, 3]];
        let stacks: Vec<Vec<Tensor<f64>>> =
            (0..4).map(|_| shapes.iter().map(|s| uniform(&mut r, s, -1.5, 1.5)).collect()).collect();
        let mut want = 0.0;
        for (i, s) in shapes.iter().enumerate() {
            let d = s[3] as f64;
            let gx = oracle_frobenius_sq(&oracle_gram(&stacks[0][i]), &oracle_gram(&stacks[1][i]));
            let gy = oracle_frobenius_sq(&oracle_gram(&stacks[2][i]), &oracle_gram(&stacks[3][i]));
            want += layer_weights[i] / (4.0 * d * d) * (gx + gy);
        }
        let w = LossWeights { cs_layers: layer_weights, ..LossWeights::with_layers(2) };
        let fs: Vec<FeatureStack<f64>> = stacks.into_iter().map(single).collect();
        let got = cycle_style_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn style_loss_averages_squared_distances_over_the_batch() {
    let mut r = rng(17);
    let maps: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0)).collect();
    let w = LossWeights::with_layers(1);
    let mut want = 0.0;
    for b in 0..2 {
        let s: Vec<Tensor<f64>> = maps.iter().map(|m| m.narrow(b, b + 1)).collect();
        want += (oracle_frobenius_sq(&oracle_gram(&s[0]), &oracle_gram(&s[1]))
            + oracle_frobenius_sq(&oracle_gram(&s[2]), &oracle_gram(&s[3])))
            / 16.0;
    }
    want /= 2.0;
    let fs: Vec<FeatureStack<f64>> = maps.into_iter().map(|m| single(vec![m])).collect();
    let got = cycle_style_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn style_and_perceptual_worked_examples() {
    let t = |v: Vec<f64>| Tensor::from_vec(&[1, 1, v.len(), 1], v).unwrap();
    let w = LossWeights::with_layers(1);
    // Gram [[2]] from a 1x1x1 map: value sqrt(2)
    let a = single(vec![Tensor::from_vec(&[1, 1, 1, 1], vec![2f64.sqrt()]).unwrap()]);
    let z = single(vec![Tensor::zeros(&[1, 1, 1, 1])]);
    assert!((cycle_style_loss(&a, &z, &z, &z, &w).unwrap() - 1.0).abs() < 1e-12);

    let x = single(vec![t(vec![1.0, 2.0])]);
    let x_rec = single(vec![t(vec![2.0, 4.0])]);
    assert!((cycle_perceptual_loss(&x, &x_rec, &x, &x, &w).unwrap() - 1.5).abs() < 1e-12);
    let doubled = LossWeights { cp_layers: vec![2.0], ..w.clone() };
    assert!((cycle_perceptual_loss(&x, &x_rec, &x, &x, &doubled).unwrap() - 3.0).abs() < 1e-12);
}

#[test]
fn perceptual_loss_matches_per_layer_mae_oracle() {
    let mut r = rng(18);
    let shapes = [[2, 4, 4, 3], [2, 2, 2, 5], [2, 1, 1, 8]];
    let stacks: Vec<Vec<Tensor<f64>>> =
        (0..4).map(|_| shapes.iter().map(|s| uniform(&mut r, s, -1.0, 1.0)).collect()).collect();
    let lw = vec![0.5, 1.0, 2.0];
    let want: f64 = (0..3)
        .map(|i| lw[i] * (oracle_mae(&stacks[0][i], &stacks[1][i]) + oracle_mae(&stacks[2][i], &stacks[3][i])))
        .sum();
    let w = LossWeights { cp_layers: lw, ..LossWeights::with_layers(3) };
    let fs: Vec<FeatureStack<f64>> = stacks.into_iter().map(single).collect();
    let got = cycle_perceptual_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap();
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn layer_count_mismatch_is_a_shape_error() {
    let a = single(vec![Tensor::zeros(&[1, 2, 2, 1])]);
    let b = single(vec![Tensor::zeros(&[1, 2, 2, 1]), Tensor::zeros(&[1, 1, 1, 1])]);
    let w = LossWeights::with_layers(1);
    assert!(matches!(cycle_perceptual_loss(&a, &b, &a, &a, &w), Err(Error::Shape(_))));
    assert!(matches!(cycle_style_loss(&a, &b, &a, &a, &w), Err(Error::Shape(_))));
}

#[test]
fn cycle_consistency_matches_nested_loops() {
    let mut r = rng(19);
    for _ in 0..20 {
        let ts: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[1, 4, 4, 1], -1.0, 1.0)).collect();
        let mut want = 0.0;
        for (a, b) in [(&ts[0], &ts[1]), (&ts[2], &ts[3])] {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += (a.data()[i * 4 + j] - b.data()[i * 4 + j]).abs();
                }
            }
            want += s / 16.0;
        }
        let got = cycle_consistency_loss_tensors(&ts[0], &ts[1], &ts[2], &ts[3]).unwrap();
        assert!((got - want).abs() < 1e-6);
    }
    let x = Tensor::full(&[1, 4, 4, 1], 0.2);
    let x_rec = Tensor::full(&[1, 4, 4, 1], 0.5);
    let got = cycle_consistency_loss_tensors(&x, &x_rec, &x, &x).unwrap();
    assert!((got - 0.3).abs() < 1e-12);
}

#[test]
fn all_cycle_terms_vanish_on_exact_copies_and_are_never_negative() {
    let mut r = rng(20);
    let w = LossWeights::with_layers(2);
    for _ in 0..100 {
        let res = r.random_range(2..=6);
        let img: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[2, res, res, 1], -1.0, 1.0)).collect();
        let stack = |r: &mut rand_chacha::ChaCha8Rng| {
            single(vec![uniform(r, &[2, 3, 3, 4], -2.0, 2.0), uniform(r, &[2, 2, 2, 8], -2.0, 2.0)])
        };
        let fs: Vec<FeatureStack<f64>> = (0..4).map(|_| stack(&mut r)).collect();

        assert_eq!(cycle_consistency_loss_tensors(&img[0], &img[0].clone(), &img[2], &img[2].clone()).unwrap(), 0.0);
        assert_eq!(cycle_perceptual_loss(&fs[0], &fs[0].clone(), &fs[2], &fs[2].clone(), &w).unwrap(), 0.0);
        assert_eq!(cycle_style_loss(&fs[0], &fs[0].clone(), &fs[2], &fs[2].clone(), &w).unwrap(), 0.0);

        assert!(cycle_consistency_loss_tensors(&img[0], &img[1], &img[2], &img[3]).unwrap() >= 0.0);
        assert!(cycle_perceptual_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap() >= 0.0);
        assert!(cycle_style_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap() >= 0.0);
    }
}

#[test]
fn adversarial_value_at_uniform_scores_is_minus_two_ln_two() {
    let half = Tensor::full(&[4, 6, 6, 1], 0.5f64);
    let v = adversarial_value(&half, &half).unwrap();
    assert!((v + 2.0 * 2f64.ln()).abs() < 1e-9);
    let half32 = Tensor::full(&[2, 6, 6, 1], 0.5f32);
    assert!((adversarial_value(&half32, &half32).unwrap() + 2.0 * 2f64.ln()).abs() < 1e-6);
}

#[test]
fn adversarial_value_is_finite_at_saturated_scores() {
    let ones = Tensor::full(&[1, 2, 2, 1], 1.0f64);
    let zeros = Tensor::zeros(&[1, 2, 2, 1]);
    assert!(adversarial_value(&zeros, &ones).unwrap().is_finite());
    assert!(adversarial_value(&ones, &zeros).unwrap().abs() < 1e-6);
}

#[test]
fn total_is_the_weighted_sum_and_names_bad_terms() {
    let parts = LossParts { adv_1: 0.7, adv_2: 0.9, cyc: 0.3, c_percep: 0.2, c_style: 0.05 };
    let w = LossWeights::with_layers(4);
    let b = total_objective(parts, &w).unwrap();
    assert!((b.total - (0.7 + 0.9 + 10.0 * 0.3 + 0.2 + 10.0 * 0.05)).abs() < 1e-12);

    let zero = LossWeights { lambda_cyc: 0.0, lambda_cp: 0.0, lambda_cs: 0.0, ..w.clone() };
    assert_eq!(total_objective(parts, &zero).unwrap().total, 0.7 + 0.9);

    let bad = LossParts { c_style: f64::INFINITY, ..parts };
    match total_objective(bad, &w) {
        Err(Error::Numerical(m)) => assert!(m.contains("cStyle"), "{m}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_oracle_agrees_for_arbitrary_maps(
        (h, w, d, data) in (1usize..=8, 1usize..=8, 1usize..=16)
            .prop_flat_map(|(h, w, d)| (Just(h), Just(w), Just(d), prop::collection::vec(-10.0f64..10.0, h * w * d)))
    ) {
        let t = Tensor::from_vec(&[h, w, d], data).unwrap();
        let got = gram_matrix(&t, 0).unwrap();
        let want = oracle_gram(&t);
        for m in 0..d {
            for n in 0..d {
                let tol = 1e-9 * (1.0 + want[m][n].abs());
                prop_assert!((got.at(m, n) - want[m][n]).abs() < tol);
            }
        }
    }

    #[test]
    fn perceptual_loss_is_linear_in_layer_weights(scale in 0.1f64..10.0, seed in 0u64..1000) {
        let mut r = rng(seed);
        let fs: Vec<FeatureStack<f64>> = (0..4).map(|_| single(vec![uniform(&mut r, &[1, 3, 3, 2], -1.0, 1.0)])).collect();
        let w = LossWeights::with_layers(1);
        let ws = LossWeights { cp_layers: vec![scale], cs_layers: vec![scale], ..w.clone() };
        let (p, ps) = (
            cycle_perceptual_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap(),
            cycle_perceptual_loss(&fs[0], &fs[1], &fs[2], &fs[3], &ws).unwrap(),
        );
        prop_assert!((ps - scale * p).abs() < 1e-9 * (1.0 + ps.abs()));
        let (s, ss) = (
            cycle_style_loss(&fs[0], &fs[1], &fs[2], &fs[3], &w).unwrap(),
            cycle_style_loss(&fs[0], &fs[1], &fs[2], &fs[3], &ws).unwrap(),
        );
        prop_assert!((ss - scale * s).abs() < 1e-9 * (1.0 + ss.abs()));
    }
}
