//! Self-supervised keypoint detector and the zeroth-order dense motion block.

use rand::Rng;

use crate::geometry::gaussian_heatmaps_var;
use crate::nn::{Bound, Conv2d, DownBlock, ParamStore, UpBlock};
use crate::tensor::{
    identity_grid, lattice_coord, Function, Result, Tape, Tensor, TensorError, Var,
};

/// Softmax temperature applied to detector logits.
pub const KEYPOINT_TEMPERATURE: f64 = 0.1;
/// Width of the Gaussian keypoint maps fed to dense motion.
pub const HEATMAP_SIGMA: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct KeypointDetectorParams {
    pub num_keypoints: usize,
    pub downs: Vec<DownBlock>,
    pub head: Conv2d,
    pub temperature: f64,
}

impl KeypointDetectorParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        num_keypoints: usize,
        widths: [usize; 3],
    ) -> Self {
        let mut downs = Vec::with_capacity(3);
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            downs.push(DownBlock::new(
                store,
                rng,
                &format!("kp.down{}", i + 1),
                cin,
                c,
            ));
            cin = c;
        }
        let head = Conv2d::new(store, rng, "kp.head", cin, num_keypoints, 1);
        Self {
            num_keypoints,
            downs,
            head,
            temperature: KEYPOINT_TEMPERATURE,
        }
    }

    /// Heatmap logits `[N, K, H/4, W/4]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        let factor = 1 << self.downs.len();
        match s.as_slice() {
            &[_, 3, h, w] if h == w && h % factor == 0 => {}
            _ => {
                return Err(TensorError::Shape {
                    op: "detect_keypoints",
                    detail: format!(
                        "image must be [N, 3, H, H] with H divisible by {factor}, got {s:?}"
                    ),
                })
            }
        }
        let mut x = image;
        for d in &self.downs {
            x = d.forward(tape, p, x)?;
        }
        let x = self.head.forward(tape, p, x)?;
        tape.upsample_bilinear2(x)
    }
}

/// Softmax over the spatial positions of every `[N, K, h, w]` plane.
pub fn spatial_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let &[n, k, h, w] = s.as_slice() else {
        return Err(TensorError::Shape {
            op: "spatial_softmax",
            detail: format!("expected [N, K, h, w], got {s:?}"),
        });
    };
    let flat = tape.reshape(logits, &[n, k, h * w])?;
    let sm = tape.softmax(flat, 2)?;
    tape.reshape(sm, &[n, k, h, w])
}

/// `[h·w, 2]` normalized lattice coordinates, row-major.
pub fn lattice_points(h: usize, w: usize) -> Tensor {
    identity_grid(1, h, w).reshaped(vec![h * w, 2]).unwrap()
}

/// Expected lattice position under each `[N, K, h, w]` distribution.
pub fn soft_argmax(tape: &mut Tape, heat: Var) -> Result<Var> {
    let s = tape.shape(heat).to_vec();
    let &[n, k, h, w] = s.as_slice() else {
        return Err(TensorError::Shape {
            op: "soft_argmax",
            detail: format!("expected [N, K, h, w], got {s:?}"),
        });
    };
    let flat = tape.reshape(heat, &[n, k, h * w])?;
    let lattice = tape.constant(lattice_points(h, w));
    let lattice = tape.reshape(lattice, &[1, h * w, 2])?;
    tape.bmm(flat, lattice)
}

/// `[N, 3, H, H]` images to `[N, K, 2]` keypoints in `[−1, 1]²`.
pub fn detect_keypoints(
    tape: &mut Tape,
    p: &Bound,
    params: &KeypointDetectorParams,
    image: Var,
) -> Result<Var> {
    let logits = params.logits(tape, p, image)?;
    let logits = tape.scale(logits, 1.0 / params.temperature);
    let heat = spatial_softmax(tape, logits)?;
    soft_argmax(tape, heat)
}

struct SparseMotionFn {
    h: usize,
    w: usize,
}

impl Function for SparseMotionFn {
    fn name(&self) -> &'static str {
        "sparse_motions"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (n, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let plane = self.h * self.w;
        let mut sums = vec![0.0; n * k * 2];
        for b in 0..n {
            for kp in 0..k {
                let base = ((b * (k + 1) + kp + 1) * plane) * 2;
                let (mut sx, mut sy) = (0.0, 0.0);
                for px in g[base..base + plane * 2].chunks(2) {
                    sx += px[0];
                    sy += px[1];
                }
                sums[(b * k + kp) * 2] = sx;
                sums[(b * k + kp) * 2 + 1] = sy;
            }
        }
        vec![
            needs[0].then(|| sums.clone()),
            needs[1].then(|| sums.iter().map(|v| -v).collect()),
        ]
    }
}

/// Candidate backward flows `[N, K+1, h, w, 2]`: candidate 0 is the identity,
/// candidate `k` samples the source at `p − x_D^k + x_S^k`.
pub fn sparse_motions(
    tape: &mut Tape,
    kp_source: Var,
    kp_driving: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let (ss, ds) = (
        tape.shape(kp_source).to_vec(),
        tape.shape(kp_driving).to_vec(),
    );
    if ss != ds || ss.len() != 3 || ss[2] != 2 {
        return Err(TensorError::Shape {
            op: "sparse_motions",
            detail: format!("keypoint sets must share shape [N, K, 2], got {ss:?} and {ds:?}"),
        });
    }
    let (n, k) = (ss[0], ss[1]);
    let (src, drv) = (tape.value(kp_source).data(), tape.value(kp_driving).data());
    let mut out = Vec::with_capacity(n * (k + 1) * h * w * 2);
    for b in 0..n {
        for c in 0..=k {
            let shift = if c == 0 {
                [0.0, 0.0]
            } else {
                let i = (b * k + c - 1) * 2;
                [src[i] - drv[i], src[i + 1] - drv[i + 1]]
            };
            for y in 0..h {
                let py = lattice_coord(y, h);
                for x in 0..w {
                    out.push(lattice_coord(x, w) + shift[0]);
                    out.push(py + shift[1]);
                }
            }
        }
    }
    let value = Tensor::new(vec![n, k + 1, h, w, 2], out)?;
    Ok(tape.record(value, &[kp_source, kp_driving], SparseMotionFn { h, w }))
}

struct CombineFlowsFn;

impl Function for CombineFlowsFn {
    fn name(&self) -> &'static str {
        "combine_flows"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (masks, cands) = (inputs[0], inputs[1]);
        let s = masks.shape();
        let (n, k1, plane) = (s[0], s[1], s[2] * s[3]);
        let mut dm = needs[0].then(|| vec![0.0; masks.numel()]);
        let mut dc = needs[1].then(|| vec![0.0; cands.numel()]);
        for b in 0..n {
            for c in 0..k1 {
                for p in 0..plane {
                    let mi = (b * k1 + c) * plane + p;
                    let gi = (b * plane + p) * 2;
                    if let Some(dm) = dm.as_mut() {
                        dm[mi] =
                            g[gi] * cands.data()[mi * 2] + g[gi + 1] * cands.data()[mi * 2 + 1];
                    }
                    if let Some(dc) = dc.as_mut() {
                        dc[mi * 2] = g[gi] * masks.data()[mi];
                        dc[mi * 2 + 1] = g[gi + 1] * masks.data()[mi];
                    }
                }
            }
        }
        vec![dm, dc]
    }
}

/// `Σ_k masks[k]·candidates[k]` per pixel: `[N, K+1, h, w]` weights and
/// `[N, K+1, h, w, 2]` flows to an `[N, h, w, 2]` grid.
pub fn combine_flows(tape: &mut Tape, masks: Var, candidates: Var) -> Result<Var> {
    let (ms, cs) = (tape.shape(masks).to_vec(), tape.shape(candidates).to_vec());
    if ms.len() != 4 || cs.len() != 5 || cs[..4] != ms[..] || cs[4] != 2 {
        return Err(TensorError::Shape {
            op: "combine_flows",
            detail: format!("masks {ms:?} do not match candidates {cs:?}"),
        });
    }
    let (n, k1, h, w) = (ms[0], ms[1], ms[2], ms[3]);
    let plane = h * w;
    let (md, cd) = (tape.value(masks).data(), tape.value(candidates).data());
    let mut out = vec![0.0; n * plane * 2];
    for b in 0..n {
        for c in 0..k1 {
            for p in 0..plane {
                let mi = (b * k1 + c) * plane + p;
                out[(b * plane + p) * 2] += md[mi] * cd[mi * 2];
                out[(b * plane + p) * 2 + 1] += md[mi] * cd[mi * 2 + 1];
            }
        }
    }
    let value = Tensor::new(vec![n, h, w, 2], out)?;
    Ok(tape.record(value, &[masks, candidates], CombineFlowsFn))
}

/// Bilinear resize of an `[N, h, w, 2]` grid to `size × size`.
pub fn resample_flow(tape: &mut Tape, grid: Var, size: usize) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 4 || s[3] != 2 {
        return Err(TensorError::Shape {
            op: "resample_flow",
            detail: format!("expected [N, h, w, 2], got {s:?}"),
        });
    }
    if s[1] == size && s[2] == size {
        return Ok(grid);
    }
    let planes = tape.permute(grid, &[0, 3, 1, 2])?;
    let at = tape.constant(identity_grid(s[0], size, size));
    let resized = tape.grid_sample(planes, at)?;
    tape.permute(resized, &[0, 2, 3, 1])
}

#[derive(Clone, Debug)]
pub struct DenseMotionParams {
    pub num_keypoints: usize,
    pub downs: [DownBlock; 2],
    pub ups: [UpBlock; 2],
    pub mask: Conv2d,
    pub sigma: f64,
}

impl DenseMotionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        num_keypoints: usize,
        channels: usize,
    ) -> Self {
        let cin = 4 * (num_keypoints + 1);
        Self {
            num_keypoints,
            downs: [
                DownBlock::new(store, rng, "motion.down1", cin, channels),
                DownBlock::new(store, rng, "motion.down2", channels, channels),
            ],
            ups: [
                UpBlock::new(store, rng, "motion.up1", channels, channels),
                UpBlock::new(store, rng, "motion.up2", channels, channels),
            ],
            mask: Conv2d::new(store, rng, "motion.mask", channels, num_keypoints + 1, 3),
            sigma: HEATMAP_SIGMA,
        }
    }
}

/// Intermediate and final quantities of [`dense_motion`].
#[derive(Clone, Copy, Debug)]
pub struct DenseMotion {
    /// `[N, h, w, 2]` combined backward flow at quarter resolution.
    pub grid: Var,
    /// `[N, K+1, h, w]` softmax mask weights.
    pub masks: Var,
    /// `[N, K+1, h, w, 2]` candidate flows.
    pub candidates: Var,
}

/// Predicts the source-from-driving motion at a quarter of the image
/// resolution.
pub fn dense_motion(
    tape: &mut Tape,
    p: &Bound,
    params: &DenseMotionParams,
    source: Var,
    kp_source: Var,
    kp_driving: Var,
) -> Result<DenseMotion> {
    let s = tape.shape(source).to_vec();
    let k = params.num_keypoints;
    let &[n, c, h, w] = s.as_slice() else {
        return Err(TensorError::Shape {
            op: "dense_motion",
            detail: format!("source must be NCHW, got {s:?}"),
        });
    };
    if h != w || h % 16 != 0 {
        return Err(TensorError::Shape {
            op: "dense_motion",
            detail: format!("source must be square with extent divisible by 16, got {h}x{w}"),
        });
    }
    let q = h / 4;
    let small = tape.avg_pool2(source)?;
    let small = tape.avg_pool2(small)?;

    let hd = gaussian_heatmaps_var(tape, kp_driving, params.sigma, q, q)?;
    let hs = gaussian_heatmaps_var(tape, kp_source, params.sigma, q, q)?;
    let diff = tape.sub(hd, hs)?;
    let background = tape.constant(Tensor::zeros(vec![n, 1, q, q]));
    let heat = tape.concat(&[background, diff], 1)?;

    let candidates = sparse_motions(tape, kp_source, kp_driving, q, q)?;
    let mut warped = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let g = tape.narrow(candidates, 1, j, 1)?;
        let g = tape.reshape(g, &[n, q, q, 2])?;
        warped.push(tape.grid_sample(small, g)?);
    }
    let warped = tape.concat(&warped, 1)?;
    debug_assert_eq!(tape.shape(warped)[1], c * (k + 1));

    let mut x = tape.concat(&[heat, warped], 1)?;
    for d in &params.downs {
        x = d.forward(tape, p, x)?;
    }
    for u in &params.ups {
        x = u.forward(tape, p, x)?;
    }
    let logits = params.mask.forward(tape, p, x)?;
    let masks = tape.softmax(logits, 1)?;
    let grid = combine_flows(tape, masks, candidates)?;
    Ok(DenseMotion {
        grid,
        masks,
        candidates,
    })
}
