use super::{shape_err, Function, Result, Tape, Tensor, TensorError, Var};

/// Sample positions closer than this (in pixels) to a lattice point are
/// snapped onto it, so identity grids reproduce their input bit-exactly.
pub const SNAP_TOLERANCE: f64 = 1e-9;

/// Normalized coordinate of pixel `i` on an axis of `len` pixels
/// (align-corners: pixel 0 ↦ −1, pixel len−1 ↦ +1).
pub fn lattice_coord(i: usize, len: usize) -> f64 {
    if len < 2 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (len - 1) as f64
    }
}

/// `[n, h, w, 2]` grid whose entry `(y, x)` is `(lattice_coord(x), lattice_coord(y))`.
pub fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for y in 0..h {
            for x in 0..w {
                data.push(lattice_coord(x, w));
                data.push(lattice_coord(y, h));
            }
        }
    }
    Tensor::new(vec![n, h, w, 2], data).unwrap()
}

/// Bilinear taps along one axis for a normalized coordinate.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
    /// d(pixel)/d(normalized); zero when clamped at the border.
    dpix: f64,
}

fn tap(coord: f64, len: usize) -> Tap {
    if len < 2 {
        return Tap {
            i0: 0,
            i1: 0,
            frac: 0.0,
            dpix: 0.0,
        };
    }
    let half = (len - 1) as f64 / 2.0;
    let mut pix = (coord + 1.0) * half;
    let mut dpix = half;
    if pix <= 0.0 {
        if pix < 0.0 {
            dpix = 0.0;
        }
        pix = 0.0;
    } else if pix >= (len - 1) as f64 {
        if pix > (len - 1) as f64 {
            dpix = 0.0;
        }
        pix = (len - 1) as f64;
    }
    let r = pix.round();
    if (pix - r).abs() < SNAP_TOLERANCE {
        pix = r;
    }
    let i0 = (pix.floor() as usize).min(len - 2);
    Tap {
        i0,
        i1: i0 + 1,
        frac: pix - i0 as f64,
        dpix,
    }
}

struct GridSampleFn;

impl Function for GridSampleFn {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn branches(&self, inputs: &[&Tensor], _: &Tensor, h: &mut dyn std::hash::Hasher) {
        let (x, grid) = (inputs[0], inputs[1]);
        let (xh, xw) = (x.shape()[2], x.shape()[3]);
        for p in grid.data().chunks(2) {
            for (v, len) in [(p[0], xw), (p[1], xh)] {
                let t = tap(v, len);
                // cell index plus whether the clamp or snap is active
                h.write_usize(t.i0);
                h.write_u8((t.dpix == 0.0) as u8 | (((t.frac == 0.0) as u8) << 1));
            }
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, grid) = (inputs[0], inputs[1]);
        let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        let (oh, ow) = (grid.shape()[1], grid.shape()[2]);
        let (xd, gd) = (x.data(), grid.data());
        let mut dx = needs[0].then(|| vec![0.0; xd.len()]);
        let mut dgrid = needs[1].then(|| vec![0.0; gd.len()]);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gi = ((b * oh + oy) * ow + ox) * 2;
                    let tx = tap(gd[gi], w);
                    let ty = tap(gd[gi + 1], h);
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = g[((b * c + ch) * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let base = (b * c + ch) * h * w;
                        if let Some(dx) = dx.as_mut() {
                            let wts = [
                                (1.0 - ty.frac) * (1.0 - tx.frac),
                                (1.0 - ty.frac) * tx.frac,
                                ty.frac * (1.0 - tx.frac),
                                ty.frac * tx.frac,
                            ];
                            dx[base + ty.i0 * w + tx.i0] += gv * wts[0];
                            dx[base + ty.i0 * w + tx.i1] += gv * wts[1];
                            dx[base + ty.i1 * w + tx.i0] += gv * wts[2];
                            dx[base + ty.i1 * w + tx.i1] += gv * wts[3];
                        }
                        if dgrid.is_some() {
                            let v00 = xd[base + ty.i0 * w + tx.i0];
                            let v01 = xd[base + ty.i0 * w + tx.i1];
                            let v10 = xd[base + ty.i1 * w + tx.i0];
                            let v11 = xd[base + ty.i1 * w + tx.i1];
                            sx += gv * ((1.0 - ty.frac) * (v01 - v00) + ty.frac * (v11 - v10));
                            sy += gv * ((1.0 - tx.frac) * (v10 - v00) + tx.frac * (v11 - v01));
                        }
                    }
                    if let Some(dg) = dgrid.as_mut() {
                        dg[gi] += sx * tx.dpix;
                        dg[gi + 1] += sy * ty.dpix;
                    }
                }
            }
        }
        vec![dx, dgrid]
    }
}

impl Tape {
    /// Bilinear sampling of `x: [N,C,H,W]` at `grid: [N,H',W',2]` holding
    /// normalized `(x, y)` source coordinates. Out-of-range coordinates are
    /// clamped to the border.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(grid));
        let &[n, c, h, w] = tx.shape() else {
            return Err(shape_err(
                "grid_sample",
                format!("input must be NCHW, got {:?}", tx.shape()),
            ));
        };
        let &[gn, oh, ow, two] = tg.shape() else {
            return Err(shape_err(
                "grid_sample",
                format!("grid must be [N,H,W,2], got {:?}", tg.shape()),
            ));
        };
        if gn != n || two != 2 {
            return Err(shape_err(
                "grid_sample",
                format!(
                    "grid {:?} incompatible with input {:?}",
                    tg.shape(),
                    tx.shape()
                ),
            ));
        }
        if tg.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite {
                op: "grid_sample",
                what: "grid",
            });
        }
        let (xd, gd) = (tx.data(), tg.data());
        let mut out = vec![0.0; n * c * oh * ow];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gi = ((b * oh + oy) * ow + ox) * 2;
                    let tx = tap(gd[gi], w);
                    let ty = tap(gd[gi + 1], h);
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let v00 = xd[base + ty.i0 * w + tx.i0];
                        let v = if tx.frac == 0.0 && ty.frac == 0.0 {
                            v00
                        } else {
                            let v01 = xd[base + ty.i0 * w + tx.i1];
                            let v10 = xd[base + ty.i1 * w + tx.i0];
                            let v11 = xd[base + ty.i1 * w + tx.i1];
                            let top = v00 * (1.0 - tx.frac) + v01 * tx.frac;
                            let bot = v10 * (1.0 - tx.frac) + v11 * tx.frac;
                            top * (1.0 - ty.frac) + bot * ty.frac
                        };
                        out[((b * c + ch) * oh + oy) * ow + ox] = v;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(value, &[x, grid], GridSampleFn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_is_bit_exact() {
        let img = Tensor::from_fn([2, 3, 7, 5], |i| ((i * 7919) % 101) as f64 / 13.0);
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let g = tape.constant(identity_grid(2, 7, 5));
        let y = tape.grid_sample(x, g).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn constant_image_stays_constant_under_any_grid() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 6, 6], 0.375));
        let g = tape.constant(Tensor::from_fn([1, 4, 4, 2], |i| {
            ((i as f64) * 1.37).sin() * 2.5
        }));
        let y = tape.grid_sample(x, g).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 0.375).abs() < 1e-15));
    }

    #[test]
    fn nan_grid_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        let mut gt = identity_grid(1, 2, 2);
        gt.data_mut()[3] = f64::NAN;
        let g = tape.constant(gt);
        assert!(matches!(
            tape.grid_sample(x, g),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn border_clamp_far_outside() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::new([1, 1, 2, 2], vec![-9.0, -9.0, 9.0, 9.0]).unwrap());
        let y = tape.grid_sample(x, g).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 4.0]);
    }
}
