use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::tensor::{identity_grid, lattice_coord};
use crate::test_support::{max_abs_diff, perturb, rng, uniform};

const Z: usize = 6;

fn params(seed: u64, widths: [usize; LEVELS]) -> (ParamStore, GeneratorParams) {
    let mut store = ParamStore::new();
    let g = GeneratorParams::new(&mut store, &mut rng(seed), widths, Z);
    (store, g)
}

fn features(
    store: &ParamStore,
    g: &GeneratorParams,
    image: &Tensor,
    z: Option<&Tensor>,
) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(image.clone());
    let z = z.map(|z| tape.constant(z.clone()));
    encode(&mut tape, &p, g, x, z)
        .unwrap()
        .into_iter()
        .map(|f| tape.value(f).clone())
        .collect()
}

#[test]
fn encoder_halves_the_extent_per_level() {
    let (store, g) = params(1, [4, 5, 6, 7]);
    let image = uniform(&mut rng(2), &[1, 3, 64, 64], 0.0, 1.0);
    let f = features(&store, &g, &image, None);
    let shapes: Vec<&[usize]> = f.iter().map(|t| t.shape()).collect();
    assert_eq!(
        shapes,
        [
            &[1, 4, 64, 64][..],
            &[1, 5, 32, 32],
            &[1, 6, 16, 16],
            &[1, 7, 8, 8]
        ]
    );
    assert_eq!(g.downs.len(), 3);
    assert_eq!(g.ups.len(), 3);
}

#[test]
fn projection_widths_match_their_layers() {
    let (store, g) = params(1, [4, 5, 6, 7]);
    for (i, &id) in g.inject.iter().enumerate() {
        assert_eq!(store.get(id).shape(), &[Z, g.widths[i]]);
    }
    for (i, &id) in g.inject_up.iter().enumerate() {
        assert_eq!(store.get(id).shape(), &[Z, g.widths[i + 1]]);
    }
}

#[test]
fn encoder_rejects_indivisible_extent() {
    let (store, g) = params(1, [3, 3, 3, 3]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(vec![1, 3, 20, 20]));
    assert!(encode(&mut tape, &p, &g, x, None).is_err());
}

#[test]
fn zero_projections_ignore_the_code() {
    let (store, g) = params(3, [3, 4, 4, 5]);
    let image = uniform(&mut rng(4), &[2, 3, 16, 16], 0.0, 1.0);
    let z = uniform(&mut rng(5), &[2, Z], -1.0, 1.0);
    let plain = features(&store, &g, &image, None);
    let injected = features(&store, &g, &image, Some(&z));
    let zero = features(&store, &g, &image, Some(&Tensor::zeros(vec![2, Z])));
    for ((a, b), c) in plain.iter().zip(&injected).zip(&zero) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), c.data());
    }
}

// f_2 recomputed from f_1 with the projection broadcast by hand.
#[test]
fn injection_adds_the_projected_code_per_channel() {
    let (mut store, g) = params(6, [3, 4, 4, 5]);
    perturb(&mut store, 7, 0.2);
    let image = uniform(&mut rng(8), &[2, 3, 16, 16], 0.0, 1.0);
    let z = uniform(&mut rng(9), &[2, Z], -1.0, 1.0);
    let f = features(&store, &g, &image, Some(&z));
    let w = store.get(g.inject[0]);
    let c = g.widths[0];
    let mut shifted = f[0].clone();
    for b in 0..2 {
        for ch in 0..c {
            let proj: f64 = (0..Z)
                .map(|k| z.data()[b * Z + k] * w.data()[k * c + ch])
                .sum();
            for v in &mut shifted.data_mut()[(b * c + ch) * 256..(b * c + ch + 1) * 256] {
                *v += proj;
            }
        }
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(shifted);
    let f2 = g.downs[0].forward(&mut tape, &p, x).unwrap();
    assert!(max_abs_diff(tape.value(f2).data(), f[1].data()) <= 1e-12);
}

#[test]
fn code_derivative_matches_directional_differences() {
    let (mut store, g) = params(10, [3, 4, 4, 5]);
    perturb(&mut store, 11, 0.2);
    let image = uniform(&mut rng(12), &[1, 3, 16, 16], 0.0, 1.0);
    let z0 = uniform(&mut rng(13), &[1, Z], -1.0, 1.0);
    let dir = uniform(&mut rng(14), &[1, Z], -1.0, 1.0);
    let weights = uniform(&mut rng(15), &[1, 4, 8, 8], -1.0, 1.0);
    let probe = |z: &Tensor| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(image.clone());
        let zv = tape.param(z.clone());
        let f = encode(&mut tape, &p, &g, x, Some(zv)).unwrap();
        let r = tape.constant(weights.clone());
        let m = tape.mul(f[1], r).unwrap();
        let l = tape.sum(m);
        tape.backward(l).unwrap();
        (tape.value(l).item(), Some(tape.grad_or_zeros(zv)))
    };
    let (_, grad) = probe(&z0);
    let analytic: f64 = grad
        .unwrap()
        .data()
        .iter()
        .zip(dir.data())
        .map(|(a, b)| a * b)
        .sum();
    let h = 1e-6;
    let shift = |s: f64| Tensor::from_fn(vec![1, Z], |i| z0.data()[i] + s * dir.data()[i]);
    let numeric = (probe(&shift(h)).0 - probe(&shift(-h)).0) / (2.0 * h);
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    assert!(analytic.abs() > 1e-6);
    assert!(rel <= 1e-4, "{analytic} vs {numeric}");
}

fn warp(features: &Tensor, grid: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let (f, g) = (tape.constant(features.clone()), tape.constant(grid.clone()));
    let y = warp_bottleneck(&mut tape, f, g).unwrap();
    tape.value(y).clone()
}

#[test]
fn identity_grid_leaves_features_unchanged() {
    let f = uniform(&mut rng(16), &[2, 5, 8, 8], -1.0, 1.0);
    assert_eq!(warp(&f, &identity_grid(2, 8, 8)).data(), f.data());
}

#[test]
fn translation_grid_shifts_with_border_clamp() {
    let n = 8;
    let f = uniform(&mut rng(17), &[1, 3, n, n], -1.0, 1.0);
    let step = 2.0 / (n - 1) as f64;
    let mut grid = identity_grid(1, n, n);
    grid.data_mut()
        .iter_mut()
        .step_by(2)
        .for_each(|x| *x += step);
    let out = warp(&f, &grid);
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                let want = f.data()[(c * n + y) * n + (x + 1).min(n - 1)];
                assert!((out.data()[(c * n + y) * n + x] - want).abs() <= 1e-12);
            }
        }
    }
}

fn bilinear_oracle(plane: &[f64], h: usize, w: usize, gx: f64, gy: f64) -> f64 {
    let px = ((gx + 1.0) / 2.0 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let py = ((gy + 1.0) / 2.0 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (px - x0 as f64, py - y0 as f64);
    let at = |x: usize, y: usize| plane[y * w + x];
    (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x1, y0))
        + ay * ((1.0 - ax) * at(x0, y1) + ax * at(x1, y1))
}

#[test]
fn random_grid_matches_per_channel_oracle() {
    let (n, c, s) = (2, 4, 6);
    let f = uniform(&mut rng(18), &[n, c, s, s], -1.0, 1.0);
    let grid = uniform(&mut rng(19), &[n, s, s, 2], -1.2, 1.2);
    let out = warp(&f, &grid);
    for b in 0..n {
        for ch in 0..c {
            let plane = &f.data()[(b * c + ch) * s * s..(b * c + ch + 1) * s * s];
            for p in 0..s * s {
                let gi = (b * s * s + p) * 2;
                let want = bilinear_oracle(plane, s, s, grid.data()[gi], grid.data()[gi + 1]);
                assert!((out.data()[(b * c + ch) * s * s + p] - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn warp_rejects_mismatched_grid() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    let g = tape.constant(identity_grid(1, 4, 4));
    assert!(warp_bottleneck(&mut tape, f, g).is_err());
}

fn decoded(
    store: &ParamStore,
    g: &GeneratorParams,
    bottleneck: &Tensor,
    z: Option<&Tensor>,
) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let b = tape.constant(bottleneck.clone());
    let z = z.map(|z| tape.constant(z.clone()));
    let y = decode(&mut tape, &p, g, b, z).unwrap();
    tape.value(y).clone()
}

#[test]
fn decoder_restores_full_resolution_in_the_open_unit_interval() {
    let (store, g) = params(20, [4, 5, 6, 7]);
    let b = uniform(&mut rng(21), &[1, 7, 8, 8], -2.0, 2.0);
    let y = decoded(&store, &g, &b, None);
    assert_eq!(y.shape(), &[1, 3, 64, 64]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zero_up_projections_make_the_output_independent_of_z() {
    let (mut store, g) = params(22, [3, 4, 4, 5]);
    perturb(&mut store, 23, 0.1);
    for &id in &g.inject_up {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let b = uniform(&mut rng(24), &[1, 5, 2, 2], -1.0, 1.0);
    let y1 = decoded(
        &store,
        &g,
        &b,
        Some(&uniform(&mut rng(25), &[1, Z], -1.0, 1.0)),
    );
    let y2 = decoded(
        &store,
        &g,
        &b,
        Some(&uniform(&mut rng(26), &[1, Z], -3.0, 3.0)),
    );
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn decoder_rejects_wrong_bottleneck_width() {
    let (store, g) = params(1, [3, 4, 4, 5]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let b = tape.constant(Tensor::zeros(vec![1, 4, 2, 2]));
    assert!(decode(&mut tape, &p, &g, b, None).is_err());
}

fn run(model: &Model, s: &Tensor, d: &Tensor, ablation: Ablation) -> (Tape, Generated) {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let (s, d) = (tape.constant(s.clone()), tape.constant(d.clone()));
    let g = generate(&mut tape, &p, model, s, d, ablation).unwrap();
    (tape, g)
}

#[test]
fn untrained_model_passes_the_driving_frame_through_rectification() {
    let model = Model::new(ModelConfig::desk(), 27);
    let s = uniform(&mut rng(28), &[1, 3, 64, 64], 0.0, 1.0);
    let d = uniform(&mut rng(29), &[1, 3, 64, 64], 0.0, 1.0);
    let (tape, g) = run(&model, &s, &d, Ablation::FULL);
    assert_eq!(tape.value(g.rectified).data(), d.data());
    assert_eq!(tape.shape(g.output), &[1, 3, 64, 64]);
    assert_eq!(tape.shape(g.z.unwrap()), &[1, 64]);
    for kp in [g.kp_source, g.kp_driving, g.kp_rectified] {
        assert_eq!(tape.shape(kp), &[1, 15, 2]);
    }
}

#[test]
fn baseline_skips_the_scale_modules() {
    let model = Model::new(ModelConfig::miniature(), 30);
    let s = uniform(&mut rng(31), &[1, 3, 16, 16], 0.0, 1.0);
    let d = uniform(&mut rng(32), &[1, 3, 16, 16], 0.0, 1.0);
    let (tape, g) = run(&model, &s, &d, Ablation::BASELINE);
    assert!(g.z.is_none() && g.fiducial.is_none());
    assert_eq!(tape.value(g.rectified).data(), d.data());
}

#[test]
fn generate_is_bit_reproducible() {
    let mut model = Model::new(ModelConfig::miniature(), 33);
    perturb(&mut model.store, 34, 0.05);
    let s = uniform(&mut rng(35), &[2, 3, 16, 16], 0.0, 1.0);
    let d = uniform(&mut rng(36), &[2, 3, 16, 16], 0.0, 1.0);
    let (t1, g1) = run(&model, &s, &d, Ablation::FULL);
    let (t2, g2) = run(&model, &s, &d, Ablation::FULL);
    assert_eq!(t1.value(g1.output).data(), t2.value(g2.output).data());
    assert_eq!(t1.value(g1.rectified).data(), t2.value(g2.rectified).data());
}

#[test]
fn output_depends_on_the_code_once_projections_are_trained() {
    let mut model = Model::new(ModelConfig::miniature(), 37);
    perturb(&mut model.store, 38, 0.1);
    let g = &model.generator;
    let b = uniform(&mut rng(39), &[1, g.widths[LEVELS - 1], 2, 2], -1.0, 1.0);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let bv = tape.constant(b);
    let z = tape.param(uniform(
        &mut rng(40),
        &[1, model.config.latent_dim],
        -1.0,
        1.0,
    ));
    let y = decode(&mut tape, &p, g, bv, Some(z)).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    let norm: f64 = tape.grad_or_zeros(z).data().iter().map(|v| v * v).sum();
    assert!(norm > 0.0);
}

#[test]
fn decoder_sees_only_the_bottleneck() {
    let mut model = Model::new(ModelConfig::miniature(), 41);
    perturb(&mut model.store, 42, 0.05);
    let s = uniform(&mut rng(43), &[1, 3, 16, 16], 0.0, 1.0);
    let d = uniform(&mut rng(44), &[1, 3, 16, 16], 0.0, 1.0);
    let (tape, g) = run(&model, &s, &d, Ablation::FULL);
    // rebuild the bottleneck on its own and decode it on a fresh tape
    let mut t2 = Tape::new();
    let p2 = model.store.bind(&mut t2);
    let src = t2.constant(s);
    let z = t2.constant(tape.value(g.z.unwrap()).clone());
    let feats = encode(&mut t2, &p2, &model.generator, src, Some(z)).unwrap();
    let bottleneck = t2.value(*feats.last().unwrap()).clone();
    drop(feats);
    let mut t3 = Tape::new();
    let p3 = model.store.bind(&mut t3);
    let b = t3.constant(bottleneck);
    let grid = t3.constant(tape.value(g.bottleneck_grid).clone());
    let w = warp_bottleneck(&mut t3, b, grid).unwrap();
    let z3 = t3.constant(tape.value(g.z.unwrap()).clone());
    let y = decode(&mut t3, &p3, &model.generator, w, Some(z3)).unwrap();
    assert_eq!(t3.value(y).data(), tape.value(g.output).data());
}

#[test]
fn sampling_oracle_handles_lattice_points() {
    let plane: Vec<f64> = (0..12).map(|v| v as f64).collect();
    for y in 0..3 {
        for x in 0..4 {
            let v = bilinear_oracle(&plane, 3, 4, lattice_coord(x, 4), lattice_coord(y, 3));
            assert!((v - plane[y * 4 + x]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoded_pixels_stay_in_the_open_interval(
        data in prop::collection::vec(-5.0f64..5.0, 5 * 4),
        seed in 0u64..100,
    ) {
        let (store, g) = params(seed, [3, 4, 4, 5]);
        let b = Tensor::new(vec![1, 5, 2, 2], data).unwrap();
        let y = decoded(&store, &g, &b, None);
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
