//! Thin-plate-spline grid generator.
//!
//! The control points of the source side are a fixed lattice, so the TPS
//! system matrix is constant and the spline coefficients are a fixed linear
//! map of the predicted fiducial points. Both the solve and the grid are
//! therefore a single batched matrix product each on the tape.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{lattice_coord, Result, Tape, Tensor, TensorError, Var};

use super::{FiducialSet, KeypointSet, NUM_FIDUCIAL};

/// Rows and columns of the base control-point lattice.
pub const BASE_ROWS: usize = 4;
pub const BASE_COLS: usize = 5;
pub const BASE_EXTENT: f64 = 0.9;

/// `U(r) = r² log r²`, with `U(0) = 0`.
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// dU/d(r²).
fn tps_kernel_deriv(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2.ln() + 1.0
    }
}

/// Uniform 4×5 lattice on [−0.9, 0.9]², row-major (y outer, x inner).
pub fn base_points() -> &'static [[f64; 2]; NUM_FIDUCIAL] {
    static BASE: OnceLock<[[f64; 2]; NUM_FIDUCIAL]> = OnceLock::new();
    BASE.get_or_init(|| {
        let mut pts = [[0.0; 2]; NUM_FIDUCIAL];
        for r in 0..BASE_ROWS {
            for c in 0..BASE_COLS {
                pts[r * BASE_COLS + c] = [
                    BASE_EXTENT * lattice_coord(c, BASE_COLS),
                    BASE_EXTENT * lattice_coord(r, BASE_ROWS),
                ];
            }
        }
        pts
    })
}

/// `[U(|p−c'₁|) … U(|p−c'_T|), 1, x, y]`.
pub fn basis_row(p: [f64; 2]) -> [f64; NUM_FIDUCIAL + 3] {
    let mut row = [0.0; NUM_FIDUCIAL + 3];
    for (t, c) in base_points().iter().enumerate() {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        row[t] = tps_kernel(dx * dx + dy * dy);
    }
    row[NUM_FIDUCIAL] = 1.0;
    row[NUM_FIDUCIAL + 1] = p[0];
    row[NUM_FIDUCIAL + 2] = p[1];
    row
}

/// The `(T+3)×(T+3)` interpolation system `[[K, P], [Pᵀ, 0]]`.
pub fn system_matrix() -> Vec<Vec<f64>> {
    let n = NUM_FIDUCIAL + 3;
    let base = base_points();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..NUM_FIDUCIAL {
        let row = basis_row(base[i]);
        m[i].copy_from_slice(&row);
        for j in 0..3 {
            m[NUM_FIDUCIAL + j][i] = row[NUM_FIDUCIAL + j];
        }
    }
    m
}

/// Solves `a·x = b` (square `a`, several right-hand sides) by Gaussian
/// elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= 1e-13 * scale {
            return Err(TensorError::Singular { op: "solve_tps" });
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            for k in 0..b[row].len() {
                b[row][k] -= f * b[col][k];
            }
        }
    }
    let rhs = b[0].len();
    let mut x = vec![vec![0.0; rhs]; n];
    for row in (0..n).rev() {
        for k in 0..rhs {
            let mut s = b[row][k];
            for j in row + 1..n {
                s -= a[row][j] * x[j][k];
            }
            x[row][k] = s / a[row][row];
        }
    }
    Ok(x)
}

/// `(T+3)×T` map from fiducial points to spline coefficients: the first `T`
/// columns of the inverse system matrix.
pub fn coefficient_map() -> Result<&'static Tensor> {
    static MAP: OnceLock<std::result::Result<Tensor, String>> = OnceLock::new();
    let cached = MAP.get_or_init(|| {
        let n = NUM_FIDUCIAL + 3;
        let rhs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..NUM_FIDUCIAL)
                    .map(|j| if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        solve_dense(system_matrix(), rhs)
            .map(|x| Tensor::new(vec![n, NUM_FIDUCIAL], x.concat()).unwrap())
            .map_err(|e| e.to_string())
    });
    cached
        .as_ref()
        .map_err(|_| TensorError::Singular { op: "solve_tps" })
}

/// Spline coefficients: `T` radial weights followed by the affine rows for
/// `1`, `x`, `y`; each row holds the `(x, y)` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsTransform {
    coeffs: [[f64; 2]; NUM_FIDUCIAL + 3],
}

impl TpsTransform {
    pub fn from_coefficients(t: &Tensor) -> Self {
        assert_eq!(t.numel(), (NUM_FIDUCIAL + 3) * 2);
        let mut coeffs = [[0.0; 2]; NUM_FIDUCIAL + 3];
        for (i, c) in coeffs.iter_mut().enumerate() {
            *c = [t.data()[2 * i], t.data()[2 * i + 1]];
        }
        Self { coeffs }
    }

    pub fn coefficients(&self) -> Tensor {
        Tensor::new(vec![NUM_FIDUCIAL + 3, 2], self.coeffs.concat()).unwrap()
    }

    pub fn identity() -> Self {
        solve_tps(&FiducialSet::base()).expect("base lattice is non-singular")
    }

    /// Radial weights `w_t`.
    pub fn radial(&self) -> &[[f64; 2]] {
        &self.coeffs[..NUM_FIDUCIAL]
    }

    /// Affine part as the 2×3 matrix `A` with `f_affine(p) = A·[x, y, 1]`.
    pub fn affine(&self) -> [[f64; 3]; 2] {
        let [c, ax, ay] = [
            self.coeffs[NUM_FIDUCIAL],
            self.coeffs[NUM_FIDUCIAL + 1],
            self.coeffs[NUM_FIDUCIAL + 2],
        ];
        [[ax[0], ay[0], c[0]], [ax[1], ay[1], c[1]]]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let row = basis_row(p);
        let mut out = [0.0; 2];
        for (b, c) in row.iter().zip(&self.coeffs) {
            out[0] += b * c[0];
            out[1] += b * c[1];
        }
        out
    }

    pub fn apply_to_points(&self, kps: &KeypointSet) -> KeypointSet {
        KeypointSet::new(kps.points().iter().map(|&p| self.apply(p)).collect())
    }

    /// Dense `[1, h, w, 2]` sampling grid on the normalized output lattice.
    pub fn grid(&self, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(h * w * 2);
        for y in 0..h {
            for x in 0..w {
                let v = self.apply([lattice_coord(x, w), lattice_coord(y, h)]);
                data.extend_from_slice(&v);
            }
        }
        Tensor::new(vec![1, h, w, 2], data).unwrap()
    }
}

/// Solves the interpolation system for one fiducial configuration.
pub fn solve_tps(fiducial: &FiducialSet) -> Result<TpsTransform> {
    let map = coefficient_map()?;
    let mut coeffs = [[0.0; 2]; NUM_FIDUCIAL + 3];
    for (i, c) in coeffs.iter_mut().enumerate() {
        for (t, p) in fiducial.points().iter().enumerate() {
            let m = map.data()[i * NUM_FIDUCIAL + t];
            c[0] += m * p[0];
            c[1] += m * p[1];
        }
    }
    Ok(TpsTransform { coeffs })
}

/// Tape version of [`solve_tps`]: `[N, T, 2]` fiducials to `[N, T+3, 2]`
/// coefficients.
pub fn solve_tps_var(tape: &mut Tape, fiducial: Var) -> Result<Var> {
    let shape = tape.shape(fiducial).to_vec();
    if shape.len() != 3 || shape[1] != NUM_FIDUCIAL || shape[2] != 2 {
        return Err(crate::tensor::TensorError::Shape {
            op: "solve_tps",
            detail: format!("fiducials must be [N, {NUM_FIDUCIAL}, 2], got {shape:?}"),
        });
    }
    let map = tape.constant(coefficient_map()?.clone());
    tape.bmm(map, fiducial)
}

/// `[h·w, T+3]` basis rows of the normalized lattice.
pub fn lattice_basis(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * (NUM_FIDUCIAL + 3));
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&basis_row([lattice_coord(x, w), lattice_coord(y, h)]));
        }
    }
    Tensor::new(vec![h * w, NUM_FIDUCIAL + 3], data).unwrap()
}

/// Tape version of [`TpsTransform::grid`]: `[N, T+3, 2]` coefficients to an
/// `[N, h, w, 2]` sampling grid.
pub fn tps_grid_var(tape: &mut Tape, coeffs: Var, h: usize, w: usize) -> Result<Var> {
    let n = tape.shape(coeffs)[0];
    let basis = tape.constant(lattice_basis(h, w));
    let g = tape.bmm(basis, coeffs)?;
    tape.reshape(g, &[n, h, w, 2])
}

/// Jitter strength and affine ranges of the equivariance transform.
pub const RANDOM_SCALE_RANGE: (f64, f64) = (0.75, 1.25);
pub const RANDOM_ROTATION_MAX: f64 = std::f64::consts::PI / 12.0;

/// Random nonlinear warp: the base lattice under a random rotation and
/// isotropic scale about the origin, then jittered by i.i.d. uniform offsets
/// in `[−strength, strength]²`.
pub fn random_tps(seed: u64, strength: f64) -> TpsTransform {
    random_tps_with(&mut ChaCha8Rng::seed_from_u64(seed), strength, true)
}

/// [`random_tps`] drawing from `rng`; `with_affine = false` forces the affine
/// draw to the identity.
pub fn random_tps_with<R: Rng>(rng: &mut R, strength: f64, with_affine: bool) -> TpsTransform {
    let (scale, angle) = if with_affine {
        (
            rng.gen_range(RANDOM_SCALE_RANGE.0..=RANDOM_SCALE_RANGE.1),
            rng.gen_range(-RANDOM_ROTATION_MAX..=RANDOM_ROTATION_MAX),
        )
    } else {
        (1.0, 0.0)
    };
    let (s, c) = angle.sin_cos();
    let points = base_points()
        .iter()
        .map(|p| {
            let (jx, jy) = if strength > 0.0 {
                (
                    rng.gen_range(-strength..=strength),
                    rng.gen_range(-strength..=strength),
                )
            } else {
                (0.0, 0.0)
            };
            let (x, y) = (p[0], p[1]);
            [scale * (c * x - s * y) + jx, scale * (s * x + c * y) + jy]
        })
        .collect();
    solve_tps(&FiducialSet::new(points).unwrap()).expect("base lattice is non-singular")
}

struct TpsPointsFn;

impl crate::tensor::Function for TpsPointsFn {
    fn name(&self) -> &'static str {
        "tps_points"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (coeffs, pts) = (inputs[0], inputs[1]);
        let n = pts.shape()[0];
        let k = pts.shape()[1];
        let cb = coeffs.shape()[0] > 1;
        let stride = (NUM_FIDUCIAL + 3) * 2;
        let mut dc = needs[0].then(|| vec![0.0; coeffs.numel()]);
        let mut dp = needs[1].then(|| vec![0.0; pts.numel()]);
        let base = base_points();
        for b in 0..n {
            let co = &coeffs.data()[if cb { b * stride } else { 0 }..][..stride];
            for i in 0..k {
                let pi = (b * k + i) * 2;
                let p = [pts.data()[pi], pts.data()[pi + 1]];
                let (gx, gy) = (g[pi], g[pi + 1]);
                if let Some(dc) = dc.as_mut() {
                    let dco = &mut dc[if cb { b * stride } else { 0 }..][..stride];
                    for (j, bv) in basis_row(p).iter().enumerate() {
                        dco[2 * j] += gx * bv;
                        dco[2 * j + 1] += gy * bv;
                    }
                }
                if let Some(dp) = dp.as_mut() {
                    // d f / d p = affine linear part + Σ w_t U'(r²)·2(p − c'_t)ᵀ
                    let (mut jxx, mut jxy, mut jyx, mut jyy) = (
                        co[2 * (NUM_FIDUCIAL + 1)],
                        co[2 * (NUM_FIDUCIAL + 2)],
                        co[2 * (NUM_FIDUCIAL + 1) + 1],
                        co[2 * (NUM_FIDUCIAL + 2) + 1],
                    );
                    for (t, c) in base.iter().enumerate() {
                        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                        let du = 2.0 * tps_kernel_deriv(dx * dx + dy * dy);
                        jxx += co[2 * t] * du * dx;
                        jxy += co[2 * t] * du * dy;
                        jyx += co[2 * t + 1] * du * dx;
                        jyy += co[2 * t + 1] * du * dy;
                    }
                    dp[pi] += gx * jxx + gy * jyx;
                    dp[pi + 1] += gx * jxy + gy * jyy;
                }
            }
        }
        vec![dc, dp]
    }
}

/// Maps `[N, K, 2]` points through `[N or 1, T+3, 2]` spline coefficients.
pub fn apply_tps_var(tape: &mut Tape, coeffs: Var, points: Var) -> Result<Var> {
    let (cs, ps) = (tape.shape(coeffs).to_vec(), tape.shape(points).to_vec());
    if cs.len() != 3 || cs[1] != NUM_FIDUCIAL + 3 || cs[2] != 2 || ps.len() != 3 || ps[2] != 2 {
        return Err(crate::tensor::TensorError::Shape {
            op: "tps_points",
            detail: format!("coefficients {cs:?} / points {ps:?}"),
        });
    }
    if cs[0] != 1 && cs[0] != ps[0] {
        return Err(crate::tensor::TensorError::Shape {
            op: "tps_points",
            detail: format!("batch of coefficients {} vs points {}", cs[0], ps[0]),
        });
    }
    let ct = tape.value(coeffs);
    let pt = tape.value(points);
    let stride = (NUM_FIDUCIAL + 3) * 2;
    let mut out = Vec::with_capacity(pt.numel());
    for b in 0..ps[0] {
        let co = &ct.data()[if cs[0] > 1 { b * stride } else { 0 }..][..stride];
        let t =
            TpsTransform::from_coefficients(&Tensor::new(vec![NUM_FIDUCIAL + 3, 2], co.to_vec())?);
        for i in 0..ps[1] {
            let pi = (b * ps[1] + i) * 2;
            out.extend_from_slice(&t.apply([pt.data()[pi], pt.data()[pi + 1]]));
        }
    }
    let value = Tensor::new(ps, out)?;
    Ok(tape.record(value, &[coeffs, points], TpsPointsFn))
}

/// Least-squares affine fit `g(p) ≈ A·[x, y, 1]` to a `[1, h, w, 2]` grid.
pub fn fit_affine(grid: &Tensor) -> [[f64; 3]; 2] {
    let (h, w) = (grid.shape()[1], grid.shape()[2]);
    let mut ata = vec![vec![0.0; 3]; 3];
    let mut atb = vec![vec![0.0; 2]; 3];
    for y in 0..h {
        for x in 0..w {
            let row = [lattice_coord(x, w), lattice_coord(y, h), 1.0];
            let gi = (y * w + x) * 2;
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i][0] += row[i] * grid.data()[gi];
                atb[i][1] += row[i] * grid.data()[gi + 1];
            }
        }
    }
    let sol = solve_dense(ata, atb).expect("lattice design matrix has full rank");
    [
        [sol[0][0], sol[1][0], sol[2][0]],
        [sol[0][1], sol[1][1], sol[2][1]],
    ]
}
