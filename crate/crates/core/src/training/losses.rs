use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Function, Result, Tape, Tensor, TensorError, Var};

/// 5-tap binomial kernel used before each ×2 decimation.
pub const BLUR_TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
pub const PYRAMID_LEVELS: usize = 4;
/// Output channels of the frozen texture layer.
pub const TEXTURE_CHANNELS: usize = 8;

struct BlurDecimateFn {
    h: usize,
    w: usize,
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

impl Function for BlurDecimateFn {
    fn name(&self) -> &'static str {
        "blur_decimate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        let planes = inputs[0].numel() / (h * w);
        let mut dx = vec![0.0; inputs[0].numel()];
        for p in 0..planes {
            let src = &mut dx[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(p * oh + oy) * ow + ox];
                    for (a, ka) in BLUR_TAPS.iter().enumerate() {
                        let y = clamp_index(2 * oy as isize + a as isize - 2, h);
                        for (b, kb) in BLUR_TAPS.iter().enumerate() {
                            let x = clamp_index(2 * ox as isize + b as isize - 2, w);
                            src[y * w + x] += gv * ka * kb;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Binomial blur with replicated borders followed by keeping every other row
/// and column: `[N, C, H, W]` to `[N, C, ⌈H/2⌉, ⌈W/2⌉]`.
pub fn blur_decimate(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let &[n, c, h, w] = s.as_slice() else {
        return Err(TensorError::Shape {
            op: "blur_decimate",
            detail: format!("expected NCHW, got {s:?}"),
        });
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let xd = tape.value(x).data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for (a, ka) in BLUR_TAPS.iter().enumerate() {
                    let y = clamp_index(2 * oy as isize + a as isize - 2, h);
                    let mut row = 0.0;
                    for (b, kb) in BLUR_TAPS.iter().enumerate() {
                        row += kb * src[y * w + clamp_index(2 * ox as isize + b as isize - 2, w)];
                    }
                    acc += ka * row;
                }
                out.push(acc);
            }
        }
    }
    let value = Tensor::new(vec![n, c, oh, ow], out)?;
    Ok(tape.record(value, &[x], BlurDecimateFn { h, w }))
}

/// Zero-mean random 3×3 filters `[8, 3, 3, 3]`, fixed by `seed`.
pub fn texture_filters(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 27;
    let mut data: Vec<f64> = (0..TEXTURE_CHANNELS * per)
        .map(|_| rng.gen_range(-1.0..1.0) / (per as f64).sqrt())
        .collect();
    for f in data.chunks_mut(per) {
        let m = f.iter().sum::<f64>() / per as f64;
        f.iter_mut().for_each(|v| *v -= m);
    }
    Tensor::new(vec![TEXTURE_CHANNELS, 3, 3, 3], data).unwrap()
}

/// Perceptual-distance substitute: an image pyramid compared pixelwise and,
/// optionally, through one frozen random convolution.
#[derive(Clone, Debug)]
pub struct PyramidLoss {
    pub levels: usize,
    pub texture: Option<Tensor>,
}

impl PyramidLoss {
    pub fn new(levels: usize, texture_seed: Option<u64>) -> Self {
        Self {
            levels,
            texture: texture_seed.map(texture_filters),
        }
    }

    /// `[x, blur_decimate(x), …]`, `levels` entries.
    pub fn pyramid(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = vec![x];
        for _ in 1..self.levels {
            let next = blur_decimate(tape, *out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }

    /// Per-level pixel terms and texture terms (the latter `None` where the
    /// level is smaller than the filter).
    pub fn terms(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Vec<(Var, Option<Var>)>> {
        let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::Shape {
                op: "pyramid_loss",
                detail: format!("image shapes differ: {sa:?} vs {sb:?}"),
            });
        }
        let pa = self.pyramid(tape, a)?;
        let pb = self.pyramid(tape, b)?;
        let filters = self.texture.as_ref().map(|f| tape.constant(f.clone()));
        let bias = tape.constant(Tensor::zeros(vec![TEXTURE_CHANNELS]));
        let mut out = Vec::with_capacity(self.levels);
        for (&la, &lb) in pa.iter().zip(&pb) {
            let pixel = tape.mean_abs_diff(la, lb)?;
            let s = tape.shape(la);
            let texture = match filters {
                Some(f) if s[1] == 3 && s[2] >= 3 && s[3] >= 3 => {
                    let fa = tape.conv2d(la, f, bias, 1, 0)?;
                    let fb = tape.conv2d(lb, f, bias, 1, 0)?;
                    Some(tape.mean_abs_diff(fa, fb)?)
                }
                _ => None,
            };
            out.push((pixel, texture));
        }
        Ok(out)
    }

    /// `Σ_j Σ_i mean|V_i(pyr_j(a)) − V_i(pyr_j(b))|`.
    pub fn distance(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let terms: Vec<Var> = self
            .terms(tape, a, b)?
            .into_iter()
            .flat_map(|(p, t)| std::iter::once(p).chain(t))
            .collect();
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    }
}

/// `(L_rec^D, L_rec^D̂)`: generated frame and rectified frame against ground
/// truth.
pub fn reconstruction_loss(
    tape: &mut Tape,
    features: &PyramidLoss,
    gt: Var,
    generated: Var,
    rectified: Var,
) -> Result<(Var, Var)> {
    let rec = features.distance(tape, gt, generated)?;
    let rect = features.distance(tape, gt, rectified)?;
    Ok((rec, rect))
}

struct KeypointSpreadFn {
    gamma: f64,
}

impl KeypointSpreadFn {
    fn hinge_terms(
        &self,
        pts: &[f64],
        k: usize,
        mut visit: impl FnMut(usize, usize, f64, [f64; 2]),
    ) {
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let dx = pts[2 * i] - pts[2 * j];
                let dy = pts[2 * i + 1] - pts[2 * j + 1];
                let slack = self.gamma - (dx.abs() + dy.abs());
                if slack > 0.0 {
                    visit(i, j, slack, [dx, dy]);
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Function for KeypointSpreadFn {
    fn name(&self) -> &'static str {
        "keypoint_distance_loss"
    }

    fn branches(&self, inputs: &[&Tensor], _: &Tensor, h: &mut dyn std::hash::Hasher) {
        let t = inputs[0];
        let (n, k) = (t.shape()[0], t.shape()[1]);
        for b in 0..n {
            self.hinge_terms(
                &t.data()[b * k * 2..(b + 1) * k * 2],
                k,
                |i, j, _, [dx, dy]| {
                    h.write_usize(b * k * k + i * k + j);
                    h.write_i8(sign(dx) as i8);
                    h.write_i8(sign(dy) as i8);
                },
            );
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let t = inputs[0];
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let scale = g[0] / n as f64;
        let mut d = vec![0.0; t.numel()];
        for b in 0..n {
            let pts = &t.data()[b * k * 2..(b + 1) * k * 2];
            let db = &mut d[b * k * 2..(b + 1) * k * 2];
            self.hinge_terms(pts, k, |i, j, _, [dx, dy]| {
                // ∂(γ − |dx| − |dy|)/∂x_i = −sign(dx)
                db[2 * i] -= scale * sign(dx);
                db[2 * i + 1] -= scale * sign(dy);
                db[2 * j] += scale * sign(dx);
                db[2 * j + 1] += scale * sign(dy);
            });
        }
        vec![Some(d)]
    }
}

/// Mean over sets of `Σ_{i≠j} max(0, γ − ‖x^i − x^j‖₁)` for `[N, K, 2]`
/// keypoints. Ordered pairs, so each unordered pair counts twice.
pub fn keypoint_distance_loss(tape: &mut Tape, kps: Var, gamma: f64) -> Result<Var> {
    let t = tape.value(kps);
    let &[n, k, 2] = t.shape() else {
        return Err(TensorError::Shape {
            op: "keypoint_distance_loss",
            detail: format!("expected [N, K, 2], got {:?}", t.shape()),
        });
    };
    if k < 2 || n == 0 {
        return Err(TensorError::Shape {
            op: "keypoint_distance_loss",
            detail: format!("need at least one set of two keypoints, got [{n}, {k}]"),
        });
    }
    let f = KeypointSpreadFn { gamma };
    let mut total = 0.0;
    for b in 0..n {
        f.hinge_terms(&t.data()[b * k * 2..(b + 1) * k * 2], k, |_, _, s, _| {
            total += s
        });
    }
    Ok(tape.record(Tensor::scalar(total / n as f64), &[kps], f))
}

/// Mean over all `(set, keypoint)` of the L1 norm of `a − b`, both `[N, K, 2]`.
pub fn mean_keypoint_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let m = tape.mean_abs_diff(a, b)?;
    // mean over N·K·2 entries, times 2 = mean over points of |dx| + |dy|
    Ok(tape.scale(m, 2.0))
}

/// Loss weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub equivariance: f64,
    pub distance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 10.0,
            equivariance: 10.0,
            distance: 10.0,
        }
    }
}

/// Scalar loss parts on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub rec: Var,
    pub rect: Var,
    pub eq: Var,
    pub dist: Var,
}

/// `λ1·(rec + rect) + λ2·eq + λ3·dist`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let rec = tape.add(parts.rec, parts.rect)?;
    let rec = tape.scale(rec, w.reconstruction);
    let eq = tape.scale(parts.eq, w.equivariance);
    let dist = tape.scale(parts.dist, w.distance);
    let s = tape.add(rec, eq)?;
    tape.add(s, dist)
}

/// Plain-number version of [`total_loss`].
pub fn total_loss_value(rec: f64, rect: f64, eq: f64, dist: f64, w: &LossWeights) -> f64 {
    w.reconstruction * (rec + rect) + w.equivariance * eq + w.distance * dist
}

/// Equivariance of a keypoint detector under the warps `transforms`
/// (`[N, T+3, 2]` spline coefficients, one per image): the keypoints of the
/// warped image, mapped back through the warp, should match the keypoints of
/// the original.
///
/// `detect` maps `[N, 3, H, W]` images to `[N, K, 2]` keypoints;
/// `kp_source` may supply already computed keypoints of `source`.
pub fn equivariance_loss<F>(
    tape: &mut Tape,
    source: Var,
    kp_source: Option<Var>,
    transforms: &Tensor,
    mut detect: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let s = tape.shape(source).to_vec();
    let &[n, _, h, w] = s.as_slice() else {
        return Err(TensorError::Shape {
            op: "equivariance_loss",
            detail: format!("source must be NCHW, got {s:?}"),
        });
    };
    if transforms.shape()[0] != n {
        return Err(TensorError::Shape {
            op: "equivariance_loss",
            detail: format!("{} transforms for {n} images", transforms.shape()[0]),
        });
    }
    let coeffs = tape.constant(transforms.clone());
    let grid = crate::geometry::tps_grid_var(tape, coeffs, h, w)?;
    let warped = tape.grid_sample(source, grid)?;
    let kp_warped = detect(tape, warped)?;
    let mapped = crate::geometry::apply_tps_var(tape, coeffs, kp_warped)?;
    let kp = match kp_source {
        Some(k) => k,
        None => detect(tape, source)?,
    };
    mean_keypoint_l1(tape, mapped, kp)
}
