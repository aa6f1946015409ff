//! Keypoint-conditioned scale rectification.
//!
//! Source and driving keypoints, together with their centroid distance
//! vectors, go through a four-layer MLP whose output is the latent scale code
//! `z`. A final layer regresses the TPS fiducial points as a bounded residual
//! around the base lattice, and the driving image is resampled through the
//! induced grid.

use rand::Rng;

use crate::geometry::{
    base_points, centroid_distance_vectors, solve_tps_var, tps_grid_var, NUM_FIDUCIAL,
};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::training::PyramidLoss;

/// Negative slope between MLP layers.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Bound of the fiducial residual around the base lattice.
pub const RESIDUAL_BOUND: f64 = 1.05;

#[derive(Clone, Debug)]
pub struct LocalizationParams {
    pub num_keypoints: usize,
    pub layers: [Linear; 4],
    pub fiducial: Linear,
}

impl LocalizationParams {
    /// Random MLP, zero fiducial head (identity start).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        num_keypoints: usize,
        width: usize,
        latent: usize,
    ) -> Self {
        let input = Self::input_dim(num_keypoints);
        let layers = [
            Linear::new(store, rng, "loc.fc1", input, width),
            Linear::new(store, rng, "loc.fc2", width, width),
            Linear::new(store, rng, "loc.fc3", width, width),
            Linear::new(store, rng, "loc.fc4", width, latent),
        ];
        let fiducial = Linear::zeros(store, "loc.fiducial", latent, NUM_FIDUCIAL * 2);
        Self {
            num_keypoints,
            layers,
            fiducial,
        }
    }

    /// Source points, driving points, source distances, driving distances.
    pub fn input_dim(num_keypoints: usize) -> usize {
        4 * num_keypoints * 2
    }
}

/// `(z [N, Z], fiducials [N, T, 2])` from `[N, K, 2]` source and driving
/// keypoints.
pub fn localize(
    tape: &mut Tape,
    p: &Bound,
    params: &LocalizationParams,
    kp_source: Var,
    kp_driving: Var,
) -> Result<(Var, Var)> {
    let (ss, ds) = (
        tape.shape(kp_source).to_vec(),
        tape.shape(kp_driving).to_vec(),
    );
    let k = params.num_keypoints;
    if ss.len() != 3 || ss[1..] != [k, 2] || ds.len() != 3 || ds[1..] != [k, 2] || ss[0] != ds[0] {
        return Err(TensorError::Shape {
            op: "localize",
            detail: format!("keypoints must both be [N, {k}, 2], got {ss:?} and {ds:?}"),
        });
    }
    let n = ss[0];
    let d_source = centroid_distance_vectors(tape, kp_source)?;
    let d_driving = centroid_distance_vectors(tape, kp_driving)?;
    let mut parts = Vec::with_capacity(4);
    for v in [kp_source, kp_driving, d_source, d_driving] {
        parts.push(tape.reshape(v, &[n, k * 2])?);
    }
    let mut h = tape.concat(&parts, 1)?;
    for layer in &params.layers {
        h = layer.forward(tape, p, h)?;
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    let z = h;
    let r = params.fiducial.forward(tape, p, z)?;
    let r = tape.tanh(r);
    let r = tape.scale(r, RESIDUAL_BOUND);
    let r = tape.reshape(r, &[n, NUM_FIDUCIAL, 2])?;
    let base = Tensor::new(
        vec![1, NUM_FIDUCIAL, 2],
        base_points().iter().flatten().copied().collect(),
    )?;
    let base = tape.constant(base);
    let base = broadcast_batch(tape, base, n)?;
    let fiducial = tape.add(r, base)?;
    Ok((z, fiducial))
}

/// Repeats a batch-1 constant `n` times along axis 0.
pub(crate) fn broadcast_batch(tape: &mut Tape, v: Var, n: usize) -> Result<Var> {
    if n == 1 {
        return Ok(v);
    }
    tape.concat(&vec![v; n], 0)
}

/// Warps `[N, C, H, W]` images through the TPS grid of `[N, T, 2]` fiducials.
pub fn rectify(tape: &mut Tape, image: Var, fiducial: Var) -> Result<Var> {
    let s = tape.shape(image).to_vec();
    let &[_, _, h, w] = s.as_slice() else {
        return Err(TensorError::Shape {
            op: "rectify",
            detail: format!("image must be NCHW, got {s:?}"),
        });
    };
    if h != w {
        return Err(TensorError::Shape {
            op: "rectify",
            detail: format!("image must be square, got {h}x{w}"),
        });
    }
    let coeffs = solve_tps_var(tape, fiducial)?;
    let grid = tps_grid_var(tape, coeffs, h, w)?;
    tape.grid_sample(image, grid)
}

/// Multi-resolution feature distance between ground truth and the rectified
/// driving frame.
pub fn rectification_loss(
    tape: &mut Tape,
    features: &PyramidLoss,
    gt: Var,
    rectified: Var,
) -> Result<Var> {
    features.distance(tape, gt, rectified)
}

#[cfg(test)]
mod tests;
