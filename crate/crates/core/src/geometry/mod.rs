//! Keypoint structure, thin-plate-spline warps and Gaussian keypoint maps.
//!
//! All coordinates live in the normalized square `[−1, 1]²` with `x` along
//! image columns and `y` along rows, matching [`crate::tensor::lattice_coord`].

mod heatmap;
mod tps;

pub use heatmap::{gaussian_heatmaps, gaussian_heatmaps_var};
pub use tps::{
    apply_tps_var, base_points, basis_row, coefficient_map, fit_affine, lattice_basis, random_tps,
    random_tps_with, solve_dense, solve_tps, solve_tps_var, system_matrix, tps_grid_var,
    tps_kernel, TpsTransform, BASE_COLS, BASE_EXTENT, BASE_ROWS, RANDOM_ROTATION_MAX,
    RANDOM_SCALE_RANGE,
};

use crate::tensor::{Function, Result, Tape, Tensor, TensorError, Var};

/// Number of self-supervised keypoints.
pub const NUM_KEYPOINTS: usize = 15;
/// Number of predicted fiducial points.
pub const NUM_FIDUCIAL: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    points: Vec<[f64; 2]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 2] {
        let k = self.points.len() as f64;
        let s = self
            .points
            .iter()
            .fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / k, s[1] / k]
    }

    /// `Δd^k = x^k − x̄`.
    pub fn distance_vectors(&self) -> Vec<[f64; 2]> {
        let c = self.centroid();
        self.points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1]])
            .collect()
    }

    /// Rows of a `[N, K, 2]` tensor.
    pub fn from_batch(t: &Tensor) -> Vec<KeypointSet> {
        let (n, k) = (t.shape()[0], t.shape()[1]);
        (0..n)
            .map(|b| {
                KeypointSet::new(
                    (0..k)
                        .map(|i| [t.data()[(b * k + i) * 2], t.data()[(b * k + i) * 2 + 1]])
                        .collect(),
                )
            })
            .collect()
    }

    pub fn to_batch(sets: &[KeypointSet]) -> Result<Tensor> {
        let k = sets.first().map_or(0, |s| s.len());
        if sets.iter().any(|s| s.len() != k) {
            return Err(TensorError::Shape {
                op: "keypoints",
                detail: "keypoint sets of different sizes".into(),
            });
        }
        Tensor::new(
            vec![sets.len(), k, 2],
            sets.iter()
                .flat_map(|s| s.points.iter().flatten().copied())
                .collect(),
        )
    }
}

/// Predicted control points `c_t`, ordered like [`base_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct FiducialSet {
    points: Vec<[f64; 2]>,
}

impl FiducialSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_FIDUCIAL {
            return Err(TensorError::Shape {
                op: "fiducials",
                detail: format!("expected {NUM_FIDUCIAL} points, got {}", points.len()),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "fiducials",
                what: "points",
            });
        }
        Ok(Self { points })
    }

    pub fn base() -> Self {
        Self {
            points: base_points().to_vec(),
        }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Applies `f` to every base point.
    pub fn map_base(f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: base_points().iter().map(|&p| f(p)).collect(),
        }
    }
}

struct CenterPointsFn;

impl Function for CenterPointsFn {
    fn name(&self) -> &'static str {
        "centroid_distance_vectors"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let k = inputs[0].shape()[1];
        let mut dx = g.to_vec();
        for set in dx.chunks_mut(k * 2) {
            for axis in 0..2 {
                let mean: f64 = (0..k).map(|i| set[2 * i + axis]).sum::<f64>() / k as f64;
                (0..k).for_each(|i| set[2 * i + axis] -= mean);
            }
        }
        vec![Some(dx)]
    }
}

/// `[N, K, 2]` keypoints to their distance vectors from the per-set centroid.
pub fn centroid_distance_vectors(tape: &mut Tape, kps: Var) -> Result<Var> {
    let t = tape.value(kps);
    let &[_, k, 2] = t.shape() else {
        return Err(TensorError::Shape {
            op: "centroid_distance_vectors",
            detail: format!("expected [N, K, 2], got {:?}", t.shape()),
        });
    };
    if k == 0 {
        return Err(TensorError::Shape {
            op: "centroid_distance_vectors",
            detail: "K must be at least 1".into(),
        });
    }
    let mut data = t.data().to_vec();
    for set in data.chunks_mut(k * 2) {
        let ks = KeypointSet::new(set.chunks(2).map(|p| [p[0], p[1]]).collect());
        for (dst, d) in set.chunks_mut(2).zip(ks.distance_vectors()) {
            dst.copy_from_slice(&d);
        }
    }
    let value = Tensor::new(t.shape().to_vec(), data)?;
    Ok(tape.record(value, &[kps], CenterPointsFn))
}
