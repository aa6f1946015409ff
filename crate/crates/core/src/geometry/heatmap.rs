use crate::tensor::{lattice_coord, Function, Result, Tape, Tensor, TensorError, Var};

use super::KeypointSet;

/// `H_k(p) = exp(−‖p − x^k‖² / (2σ²))` on the normalized `h×w` lattice, as a
/// `[K, h, w]` tensor.
pub fn gaussian_heatmaps(kps: &KeypointSet, sigma: f64, h: usize, w: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = KeypointSet::to_batch(std::slice::from_ref(kps))?;
    let v = tape.constant(t);
    let hm = gaussian_heatmaps_var(&mut tape, v, sigma, h, w)?;
    tape.value(hm).clone().reshaped(vec![kps.len(), h, w])
}

struct HeatmapFn {
    sigma: f64,
    h: usize,
    w: usize,
}

impl Function for HeatmapFn {
    fn name(&self) -> &'static str {
        "gaussian_heatmaps"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let kp = inputs[0].data();
        let inv_var = 1.0 / (self.sigma * self.sigma);
        let plane = self.h * self.w;
        let mut dk = vec![0.0; kp.len()];
        for (p, d) in dk.chunks_mut(2).enumerate() {
            let (kx, ky) = (kp[2 * p], kp[2 * p + 1]);
            let (mut sx, mut sy) = (0.0, 0.0);
            for y in 0..self.h {
                let py = lattice_coord(y, self.h);
                for x in 0..self.w {
                    let i = p * plane + y * self.w + x;
                    let gv = g[i] * out.data()[i] * inv_var;
                    sx += gv * (lattice_coord(x, self.w) - kx);
                    sy += gv * (py - ky);
                }
            }
            d[0] = sx;
            d[1] = sy;
        }
        vec![Some(dk)]
    }
}

/// `[N, K, 2]` keypoints to `[N, K, h, w]` Gaussian maps.
pub fn gaussian_heatmaps_var(
    tape: &mut Tape,
    kps: Var,
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<Var> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(TensorError::Shape {
            op: "gaussian_heatmaps",
            detail: format!("sigma must be positive, got {sigma}"),
        });
    }
    let t = tape.value(kps);
    let &[n, k, 2] = t.shape() else {
        return Err(TensorError::Shape {
            op: "gaussian_heatmaps",
            detail: format!("expected [N, K, 2], got {:?}", t.shape()),
        });
    };
    let denom = 2.0 * sigma * sigma;
    let xs: Vec<f64> = (0..w).map(|x| lattice_coord(x, w)).collect();
    let ys: Vec<f64> = (0..h).map(|y| lattice_coord(y, h)).collect();
    let mut out = Vec::with_capacity(n * k * h * w);
    for p in t.data().chunks(2) {
        for &py in &ys {
            let dy = py - p[1];
            for &px in &xs {
                let dx = px - p[0];
                out.push((-(dx * dx + dy * dy) / denom).exp());
            }
        }
    }
    let value = Tensor::new(vec![n, k, h, w], out)?;
    Ok(tape.record(value, &[kps], HeatmapFn { sigma, h, w }))
}
