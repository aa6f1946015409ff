//! Encoder–decoder generator with per-layer scale-code injection and a
//! warped bottleneck, plus the full two-step forward pass.

use rand::Rng;

use crate::model::{Ablation, Model};
use crate::motion::{dense_motion, detect_keypoints, resample_flow, DenseMotion};
use crate::nn::{Bound, Conv2d, DownBlock, InstanceNorm, ParamId, ParamStore, UpBlock};
use crate::scale_transform::{localize, rectify};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Number of feature levels `L`.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub widths: [usize; LEVELS],
    pub encoder: Conv2d,
    pub encoder_norm: InstanceNorm,
    pub downs: Vec<DownBlock>,
    /// `ups[i]` maps level `i+2` features to level `i+1`.
    pub ups: Vec<UpBlock>,
    /// `W_i`, stored `[Z, C_i]`; added to `f_i` before `downs[i]`.
    pub inject: Vec<ParamId>,
    /// `W_i^w`, stored `[Z, C_{i+1}]`; added to `f_{i+1}^w` before `ups[i]`.
    pub inject_up: Vec<ParamId>,
    pub output: Conv2d,
}

impl GeneratorParams {
    /// Projections start at zero, so a fresh generator ignores `z`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        widths: [usize; LEVELS],
        latent: usize,
    ) -> Self {
        let encoder = Conv2d::new(store, rng, "gen.encoder", 3, widths[0], 7);
        let encoder_norm = InstanceNorm::new(store, "gen.encoder.norm", widths[0]);
        let mut downs = Vec::new();
        let mut inject = Vec::new();
        for i in 0..LEVELS - 1 {
            inject.push(store.add(
                format!("gen.inject{}", i + 1),
                Tensor::zeros(vec![latent, widths[i]]),
            ));
            downs.push(DownBlock::new(
                store,
                rng,
                &format!("gen.down{}", i + 1),
                widths[i],
                widths[i + 1],
            ));
        }
        let mut ups = Vec::new();
        let mut inject_up = Vec::new();
        for i in 0..LEVELS - 1 {
            inject_up.push(store.add(
                format!("gen.inject_up{}", i + 1),
                Tensor::zeros(vec![latent, widths[i + 1]]),
            ));
            ups.push(UpBlock::new(
                store,
                rng,
                &format!("gen.up{}", i + 1),
                widths[i + 1],
                widths[i],
            ));
        }
        let output = Conv2d::new(store, rng, "gen.output", widths[0], 3, 1);
        Self {
            widths,
            encoder,
            encoder_norm,
            downs,
            ups,
            inject,
            inject_up,
            output,
        }
    }
}

/// `f + broadcast(z·W)` when a code is given.
fn inject(tape: &mut Tape, f: Var, z: Option<Var>, w: Var) -> Result<Var> {
    match z {
        Some(z) => {
            let proj = tape.bmm(z, w)?;
            tape.add_channelwise(f, proj)
        }
        None => Ok(f),
    }
}

/// `f_1 … f_L` of a square `[N, 3, H, H]` image.
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    params: &GeneratorParams,
    image: Var,
    z: Option<Var>,
) -> Result<Vec<Var>> {
    let s = tape.shape(image).to_vec();
    let factor = 1 << (LEVELS - 1);
    match s.as_slice() {
        &[_, 3, h, w] if h == w && h % factor == 0 => {}
        _ => {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!(
                    "image must be [N, 3, H, H] with H divisible by {factor}, got {s:?}"
                ),
            })
        }
    }
    let f = params.encoder.forward(tape, p, image)?;
    let f = params.encoder_norm.forward(tape, p, f)?;
    let mut feats = vec![tape.relu(f)];
    for (down, &w) in params.downs.iter().zip(&params.inject) {
        let x = inject(tape, *feats.last().unwrap(), z, p.var(w))?;
        feats.push(down.forward(tape, p, x)?);
    }
    Ok(feats)
}

/// Channel-wise resampling of the bottleneck through `grid`.
pub fn warp_bottleneck(tape: &mut Tape, features: Var, grid: Var) -> Result<Var> {
    let (fs, gs) = (tape.shape(features), tape.shape(grid));
    if fs.len() != 4 || gs.len() != 4 || fs[2..] != gs[1..3] || fs[0] != gs[0] {
        return Err(TensorError::Shape {
            op: "warp_bottleneck",
            detail: format!("grid {gs:?} does not cover features {fs:?}"),
        });
    }
    tape.grid_sample(features, grid)
}

/// Mirrored up path and output head: `f_L^w` to an image in `(0, 1)`.
pub fn decode(
    tape: &mut Tape,
    p: &Bound,
    params: &GeneratorParams,
    bottleneck: Var,
    z: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(bottleneck);
    if s.len() != 4 || s[1] != params.widths[LEVELS - 1] {
        return Err(TensorError::Shape {
            op: "decode",
            detail: format!(
                "bottleneck must have {} channels, got {s:?}",
                params.widths[LEVELS - 1]
            ),
        });
    }
    let mut x = bottleneck;
    for i in (0..LEVELS - 1).rev() {
        x = inject(tape, x, z, p.var(params.inject_up[i]))?;
        x = params.ups[i].forward(tape, p, x)?;
    }
    let y = params.output.forward(tape, p, x)?;
    Ok(tape.sigmoid(y))
}

/// Everything the forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct Generated {
    pub output: Var,
    pub rectified: Var,
    /// `None` when neither scale module is active.
    pub z: Option<Var>,
    pub fiducial: Option<Var>,
    pub kp_source: Var,
    pub kp_driving: Var,
    pub kp_rectified: Var,
    pub motion: DenseMotion,
    /// Flow at bottleneck resolution.
    pub bottleneck_grid: Var,
}

/// Rectifies the driving frame to the source's scale, then animates the
/// source with the rectified frame's motion.
pub fn generate(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    source: Var,
    driving: Var,
    ablation: Ablation,
) -> Result<Generated> {
    let (ss, ds) = (tape.shape(source).to_vec(), tape.shape(driving).to_vec());
    if ss != ds {
        return Err(TensorError::Shape {
            op: "generate",
            detail: format!("source {ss:?} and driving {ds:?} differ"),
        });
    }
    let n = ss[0];
    let both = tape.concat(&[source, driving], 0)?;
    let kps = detect_keypoints(tape, p, &model.detector, both)?;
    let kp_source = tape.narrow(kps, 0, 0, n)?;
    let kp_driving = tape.narrow(kps, 0, n, n)?;

    let needs_code = ablation.scale_transform || ablation.scale_embedding;
    let (z, fiducial) = if needs_code {
        let (z, f) = localize(tape, p, &model.localizer, kp_source, kp_driving)?;
        (Some(z), Some(f))
    } else {
        (None, None)
    };
    let (rectified, kp_rectified) = match fiducial {
        Some(f) if ablation.scale_transform => {
            let r = rectify(tape, driving, f)?;
            (r, detect_keypoints(tape, p, &model.detector, r)?)
        }
        _ => (driving, kp_driving),
    };

    let motion = dense_motion(tape, p, &model.motion, source, kp_source, kp_rectified)?;
    let inject_z = if ablation.scale_embedding { z } else { None };
    let feats = encode(tape, p, &model.generator, source, inject_z)?;
    let bottleneck = *feats.last().unwrap();
    let size = tape.shape(bottleneck)[2];
    let bottleneck_grid = resample_flow(tape, motion.grid, size)?;
    let warped = warp_bottleneck(tape, bottleneck, bottleneck_grid)?;
    drop(feats);
    let output = decode(tape, p, &model.generator, warped, inject_z)?;
    Ok(Generated {
        output,
        rectified,
        z,
        fiducial,
        kp_source,
        kp_driving,
        kp_rectified,
        motion,
        bottleneck_grid,
    })
}

#[cfg(test)]
mod tests;
