use proptest::prelude::*;

use super::*;
use crate::geometry::FiducialSet;
use crate::tensor::gradcheck::{self, GradcheckOptions};
use crate::tensor::lattice_coord;
use crate::test_support::{max_abs_diff, perturb, pyramid_distance_oracle, rng, uniform};
use crate::training::{texture_filters, PYRAMID_LEVELS, TEXTURE_SEED};

const K: usize = 15;

fn params(seed: u64) -> (ParamStore, LocalizationParams) {
    let mut store = ParamStore::new();
    let lp = LocalizationParams::new(&mut store, &mut rng(seed), K, 128, 64);
    (store, lp)
}

fn keypoints(seed: u64, n: usize) -> Tensor {
    uniform(&mut rng(seed), &[n, K, 2], -0.9, 0.9)
}

fn run_localize(
    store: &ParamStore,
    lp: &LocalizationParams,
    s: &Tensor,
    d: &Tensor,
) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let (s, d) = (tape.constant(s.clone()), tape.constant(d.clone()));
    let (z, f) = localize(&mut tape, &p, lp, s, d).unwrap();
    (tape.value(z).clone(), tape.value(f).clone())
}

fn base_flat() -> Vec<f64> {
    base_points().iter().flatten().copied().collect()
}

#[test]
fn input_dimension_for_fifteen_keypoints() {
    assert_eq!(LocalizationParams::input_dim(K), 120);
    let (store, lp) = params(1);
    let w = store.get(lp.layers[0].weight);
    assert_eq!(w.shape(), &[128, 120]);
    assert_eq!(
        store.get(lp.fiducial.weight).shape(),
        &[NUM_FIDUCIAL * 2, 64]
    );
}

#[test]
fn fresh_parameters_regress_the_base_lattice() {
    let (store, lp) = params(2);
    let (z, f) = run_localize(&store, &lp, &keypoints(3, 2), &keypoints(4, 2));
    assert_eq!(z.shape(), &[2, 64]);
    assert_eq!(f.shape(), &[2, NUM_FIDUCIAL, 2]);
    let base = base_flat();
    assert_eq!(&f.data()[..40], &base[..]);
    assert_eq!(&f.data()[40..], &base[..]);
}

#[test]
fn keypoint_count_mismatch_is_rejected() {
    let (store, lp) = params(2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let s = tape.constant(Tensor::zeros(vec![1, 10, 2]));
    let d = tape.constant(Tensor::zeros(vec![1, 10, 2]));
    assert!(localize(&mut tape, &p, &lp, s, d).is_err());
    let s15 = tape.constant(Tensor::zeros(vec![1, K, 2]));
    assert!(localize(&mut tape, &p, &lp, s15, d).is_err());
}

// Layer-by-layer forward with explicit loops.
fn localize_oracle(
    store: &ParamStore,
    lp: &LocalizationParams,
    s: &[f64],
    d: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let centered = |pts: &[f64]| {
        let mut c = [0.0; 2];
        for i in 0..K {
            c[0] += pts[2 * i] / K as f64;
            c[1] += pts[2 * i + 1] / K as f64;
        }
        (0..2 * K).map(|j| pts[j] - c[j % 2]).collect::<Vec<_>>()
    };
    let mut x: Vec<f64> = s.to_vec();
    x.extend_from_slice(d);
    x.extend(centered(s));
    x.extend(centered(d));
    let affine = |x: &[f64], lin: &crate::nn::Linear| {
        let w = store.get(lin.weight);
        let b = store.get(lin.bias);
        let (o, i) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    for layer in &lp.layers {
        x = affine(&x, layer)
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.2 * v })
            .collect();
    }
    let r = affine(&x, &lp.fiducial);
    let f = r
        .iter()
        .zip(base_flat())
        .map(|(r, b)| b + 1.05 * r.tanh())
        .collect();
    (x, f)
}

#[test]
fn forward_matches_layer_oracle() {
    let (mut store, lp) = params(5);
    perturb(&mut store, 6, 0.3);
    let (s, d) = (keypoints(7, 3), keypoints(8, 3));
    let (z, f) = run_localize(&store, &lp, &s, &d);
    for b in 0..3 {
        let (oz, of) = localize_oracle(
            &store,
            &lp,
            &s.data()[b * 30..(b + 1) * 30],
            &d.data()[b * 30..(b + 1) * 30],
        );
        assert!(max_abs_diff(&z.data()[b * 64..(b + 1) * 64], &oz) <= 1e-12);
        assert!(max_abs_diff(&f.data()[b * 40..(b + 1) * 40], &of) <= 1e-12);
    }
}

#[test]
fn swapping_source_and_driving_changes_the_output() {
    let (mut store, lp) = params(9);
    perturb(&mut store, 10, 0.3);
    let (s, d) = (keypoints(11, 1), keypoints(12, 1));
    let (_, f1) = run_localize(&store, &lp, &s, &d);
    let (_, f2) = run_localize(&store, &lp, &d, &s);
    assert!(max_abs_diff(f1.data(), f2.data()) > 1e-6);
}

fn rectify_value(image: &Tensor, fiducial: &[[f64; 2]]) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let f = Tensor::new(
        vec![1, NUM_FIDUCIAL, 2],
        fiducial.iter().flatten().copied().collect(),
    )
    .unwrap();
    let f = tape.constant(f);
    let y = rectify(&mut tape, x, f).unwrap();
    tape.value(y).clone()
}

#[test]
fn base_fiducials_rectify_to_the_identity() {
    let image = uniform(&mut rng(13), &[1, 3, 32, 32], 0.0, 1.0);
    let out = rectify_value(&image, FiducialSet::base().points());
    assert_eq!(out.data(), image.data());
}

fn pattern(c: usize, x: f64, y: f64) -> f64 {
    0.5 + 0.4 * ((2.0 + c as f64) * x).sin() * (1.5 * y + 0.3 * c as f64).cos()
}

#[test]
fn shrunken_fiducials_give_the_analytic_zoom() {
    let n = 64;
    let image = Tensor::from_fn(vec![1, 3, n, n], |i| {
        let (c, y, x) = (i / (n * n), (i / n) % n, i % n);
        pattern(c, lattice_coord(x, n), lattice_coord(y, n))
    });
    let fid = FiducialSet::map_base(|p| [0.8 * p[0], 0.8 * p[1]]);
    let out = rectify_value(&image, fid.points());
    let mut err = 0.0;
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let want = pattern(c, 0.8 * lattice_coord(x, n), 0.8 * lattice_coord(y, n));
                err += (out.data()[(c * n + y) * n + x] - want).abs();
            }
        }
    }
    let mae = err / (3 * n * n) as f64;
    assert!(mae <= 2e-2, "mae {mae}");
}

#[test]
fn rectification_gradient_matches_finite_differences() {
    let image = uniform(&mut rng(14), &[1, 3, 16, 16], 0.0, 1.0);
    let mut fid = Tensor::new(vec![1, NUM_FIDUCIAL, 2], base_flat()).unwrap();
    let mut r = rng(15);
    fid.data_mut()
        .iter_mut()
        .for_each(|v| *v += rand::Rng::gen_range(&mut r, -0.05..0.05));
    let report = gradcheck::check(
        &[fid],
        |tape, v| {
            let x = tape.constant(image.clone());
            let y = rectify(tape, x, v[0])?;
            Ok(tape.sum(y))
        },
        &GradcheckOptions {
            entries_per_input: 40,
            skip_branch_changes: true,
            ..GradcheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.checked > 0);
    assert!(report.passed(), "{report:?}");
}

fn loss_value(features: &PyramidLoss, a: &Tensor, b: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = rectification_loss(&mut tape, features, x, y).unwrap();
    tape.value(l).item()
}

#[test]
fn rectification_loss_of_identical_images_is_zero() {
    let a = uniform(&mut rng(16), &[2, 3, 32, 32], 0.0, 1.0);
    assert_eq!(
        loss_value(
            &PyramidLoss::new(PYRAMID_LEVELS, Some(TEXTURE_SEED)),
            &a,
            &a
        ),
        0.0
    );
}

#[test]
fn constant_offset_costs_its_size_per_level() {
    let a = uniform(&mut rng(17), &[1, 3, 32, 32], 0.0, 0.8);
    let b = Tensor::from_fn(a.shape().to_vec(), |i| a.data()[i] + 0.1);
    let pixel_only = loss_value(&PyramidLoss::new(PYRAMID_LEVELS, None), &a, &b);
    assert!((pixel_only - 0.1 * PYRAMID_LEVELS as f64).abs() < 1e-12);
    // the texture filters are zero-mean, so they ignore a constant offset
    let with_texture = loss_value(
        &PyramidLoss::new(PYRAMID_LEVELS, Some(TEXTURE_SEED)),
        &a,
        &b,
    );
    assert!((with_texture - 0.1 * PYRAMID_LEVELS as f64).abs() < 1e-12);
}

#[test]
fn rectification_loss_matches_recomputation() {
    let a = uniform(&mut rng(18), &[2, 3, 24, 24], 0.0, 1.0);
    let b = uniform(&mut rng(19), &[2, 3, 24, 24], 0.0, 1.0);
    let filters = texture_filters(TEXTURE_SEED);
    let got = loss_value(
        &PyramidLoss::new(PYRAMID_LEVELS, Some(TEXTURE_SEED)),
        &a,
        &b,
    );
    let want = pyramid_distance_oracle(&a, &b, PYRAMID_LEVELS, Some(&filters));
    assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
}

#[test]
fn rectification_loss_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![1, 3, 16, 16]));
    let b = tape.constant(Tensor::zeros(vec![1, 3, 16, 32]));
    assert!(rectification_loss(&mut tape, &PyramidLoss::new(2, None), a, b).is_err());
}

#[test]
fn every_localization_tensor_receives_gradient() {
    let (mut store, lp) = params(20);
    perturb(&mut store, 21, 0.05);
    let image = uniform(&mut rng(22), &[1, 3, 16, 16], 0.0, 1.0);
    let gt = uniform(&mut rng(23), &[1, 3, 16, 16], 0.0, 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let s = tape.constant(keypoints(24, 1));
    let d = tape.constant(keypoints(25, 1));
    let (_, f) = localize(&mut tape, &p, &lp, s, d).unwrap();
    let x = tape.constant(image);
    let y = rectify(&mut tape, x, f).unwrap();
    let g = tape.constant(gt);
    let loss = rectification_loss(
        &mut tape,
        &PyramidLoss::new(PYRAMID_LEVELS, Some(TEXTURE_SEED)),
        g,
        y,
    )
    .unwrap();
    tape.backward(loss).unwrap();
    for (grad, name) in p.gradients(&tape).iter().zip(store.names()) {
        let norm: f64 = grad.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "no gradient reaches {name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_start_holds_for_any_keypoints(
        s in prop::collection::vec(-1.0f64..1.0, 2 * K),
        d in prop::collection::vec(-1.0f64..1.0, 2 * K),
        seed in 0u64..1000,
    ) {
        let (store, lp) = params(seed);
        let s = Tensor::new(vec![1, K, 2], s).unwrap();
        let d = Tensor::new(vec![1, K, 2], d).unwrap();
        let (z, f) = run_localize(&store, &lp, &s, &d);
        prop_assert_eq!(f.data(), &base_flat()[..]);
        prop_assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_rectification_for_any_image(
        data in prop::collection::vec(0.0f64..1.0, 3 * 16 * 16),
    ) {
        let image = Tensor::new(vec![1, 3, 16, 16], data).unwrap();
        let out = rectify_value(&image, FiducialSet::base().points());
        prop_assert_eq!(out.data(), image.data());
    }
}
