//! Shared helpers and brute-force oracles for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Adds `U(−scale, scale)` noise to every parameter, so zero-initialized
/// heads become generic.
pub fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += r.gen_range(-scale..scale));
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Blur with replicated borders at full resolution, then keep even rows
/// and columns. `x` is one `[H, W]` plane.
fn blur_then_decimate(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = [1.0, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
    let at = |y: isize, xx: isize| {
        x[y.clamp(0, h as isize - 1) as usize * w + xx.clamp(0, w as isize - 1) as usize]
    };
    let mut full = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut acc = 0.0;
            for a in -2..=2isize {
                for b in -2..=2isize {
                    acc += k[(a + 2) as usize] * k[(b + 2) as usize] * at(y + a, xx + b);
                }
            }
            full[y as usize * w + xx as usize] = acc;
        }
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for xx in 0..ow {
            out.push(full[2 * y * w + 2 * xx]);
        }
    }
    (out, oh, ow)
}

fn valid_conv(x: &[f64], c: usize, h: usize, w: usize, f: &Tensor) -> Vec<f64> {
    let (o, k) = (f.shape()[0], f.shape()[2]);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let fd = f.data();
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for i in 0..k {
                        for j in 0..k {
                            acc += fd[((oc * c + ic) * k + i) * k + j]
                                * x[(ic * h + y + i) * w + xx + j];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Pyramid feature distance recomputed with plain loops over `[N, C, H, W]`
/// images; the texture term applies only to 3-channel levels of at least
/// 3×3.
pub fn pyramid_distance_oracle(
    a: &Tensor,
    b: &Tensor,
    levels: usize,
    texture: Option<&Tensor>,
) -> f64 {
    let s = a.shape();
    let (n, c, mut h, mut w) = (s[0], s[1], s[2], s[3]);
    let mut la = a.data().to_vec();
    let mut lb = b.data().to_vec();
    let mut total = 0.0;
    for level in 0..levels {
        total += mean_abs(&la, &lb);
        if let Some(f) = texture {
            if c == 3 && h >= 3 && w >= 3 {
                let (mut fa, mut fb) = (Vec::new(), Vec::new());
                for i in 0..n {
                    let r = i * c * h * w..(i + 1) * c * h * w;
                    fa.extend(valid_conv(&la[r.clone()], c, h, w, f));
                    fb.extend(valid_conv(&lb[r], c, h, w, f));
                }
                total += mean_abs(&fa, &fb);
            }
        }
        if level + 1 == levels {
            break;
        }
        let (mut na, mut nb) = (Vec::new(), Vec::new());
        let (mut oh, mut ow) = (0, 0);
        for p in 0..n * c {
            let r = p * h * w..(p + 1) * h * w;
            let (da, hh, ww) = blur_then_decimate(&la[r.clone()], h, w);
            let (db, _, _) = blur_then_decimate(&lb[r], h, w);
            na.extend(da);
            nb.extend(db);
            (oh, ow) = (hh, ww);
        }
        (la, lb, h, w) = (na, nb, oh, ow);
    }
    total
}
