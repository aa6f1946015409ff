use super::linalg::gemm;
use super::tape::conv_grad_fault_active;
use super::{shape_err, Function, Result, Tape, Tensor, Var};

#[derive(Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.col_cols();
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dFn {
    batch: usize,
    out_channels: usize,
    geom: ConvGeom,
}

impl Function for Conv2dFn {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let geom = self.geom;
        let (o, rows, p) = (self.out_channels, geom.col_rows(), geom.col_cols());
        let in_size = geom.channels * geom.height * geom.width;
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * p }];
        let mut dcols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * p }];
        for n in 0..self.batch {
            let gn = &g[n * o * p..(n + 1) * o * p];
            let xn = &x[n * in_size..(n + 1) * in_size];
            if let Some(dw) = dw.as_mut() {
                let c: &[f64] = if geom.is_pointwise() {
                    xn
                } else {
                    geom.im2col(xn, &mut cols);
                    &cols
                };
                gemm(o, p, rows, gn, false, c, true, 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_size..(n + 1) * in_size];
                if geom.is_pointwise() {
                    gemm(rows, o, p, w, true, gn, false, 0.0, dxn);
                } else {
                    gemm(rows, o, p, w, true, gn, false, 0.0, &mut dcols);
                    geom.col2im(&dcols, dxn);
                }
            }
        }
        if conv_grad_fault_active() {
            if let Some(dx) = dx.as_mut() {
                dx.iter_mut().for_each(|v| *v = -*v);
            }
        }
        let db = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for n in 0..self.batch {
                for (c, d) in db.iter_mut().enumerate() {
                    let base = (n * o + c) * p;
                    *d += g[base..base + p].iter().sum::<f64>();
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct AvgPool2Fn;

impl Function for AvgPool2Fn {
    fn name(&self) -> &'static str {
        "avg_pool2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let mut dx = vec![0.0; inputs[0].numel()];
        for pl in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = 0.25 * g[(pl * oh + oy) * ow + ox];
                    let base = pl * h * w + 2 * oy * w + 2 * ox;
                    dx[base] += v;
                    dx[base + 1] += v;
                    dx[base + w] += v;
                    dx[base + w + 1] += v;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Align-corners source taps for doubling an axis of length `len`.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    let out = 2 * len;
    (0..out)
        .map(|i| {
            if len == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (len - 1) as f64 / (out - 1) as f64;
            let i0 = (src.floor() as usize).min(len - 2);
            (i0, i0 + 1, src - i0 as f64)
        })
        .collect()
}

struct Upsample2Fn;

impl Function for Upsample2Fn {
    fn name(&self) -> &'static str {
        "upsample_bilinear2"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let (h, w) = (s[2], s[3]);
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = vec![0.0; inputs[0].numel()];
        for pl in 0..s[0] * s[1] {
            let d = &mut dx[pl * h * w..(pl + 1) * h * w];
            let gp = &g[pl * oh * ow..(pl + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = gp[oy * ow + ox];
                    d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    d[y0 * w + x1] += v * (1.0 - fy) * fx;
                    d[y1 * w + x0] += v * fy * (1.0 - fx);
                    d[y1 * w + x1] += v * fy * fx;
                }
            }
        }
        vec![Some(dx)]
    }
}

fn nchw(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(shape_err(
            op,
            format!("expected NCHW input, got shape {s:?}"),
        )),
    }
}

impl Tape {
    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,kh,kw]` plus bias `[O]`,
    /// zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let [n, c, h, wd] = nchw("conv2d", tx)?;
        let &[o, c2, kh, kw] = tw.shape() else {
            return Err(shape_err(
                "conv2d",
                format!("weight must be [O,C,kh,kw], got {:?}", tw.shape()),
            ));
        };
        if c != c2 {
            return Err(shape_err(
                "conv2d",
                format!("input channels (dim 1) = {c} but weight expects {c2}"),
            ));
        }
        if tb.shape() != [o] {
            return Err(shape_err(
                "conv2d",
                format!("bias must be [{o}], got {:?}", tb.shape()),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        if h + 2 * padding < kh {
            return Err(shape_err(
                "conv2d",
                format!("height (dim 2) {h} with padding {padding} is smaller than kernel {kh}"),
            ));
        }
        if wd + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("width (dim 3) {wd} with padding {padding} is smaller than kernel {kw}"),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * p }];
        let in_size = c * h * wd;
        for i in 0..n {
            let xn = &tx.data()[i * in_size..(i + 1) * in_size];
            let on = &mut out[i * o * p..(i + 1) * o * p];
            for (ch, &bv) in tb.data().iter().enumerate() {
                on[ch * p..(ch + 1) * p].fill(bv);
            }
            let cmat: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                geom.im2col(xn, &mut cols);
                &cols
            };
            gemm(o, rows, p, tw.data(), false, cmat, false, 1.0, on);
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        Ok(self.record(
            value,
            &[x, w, b],
            Conv2dFn {
                batch: n,
                out_channels: o,
                geom,
            },
        ))
    }

    /// 2×2 non-overlapping mean.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = nchw("avg_pool2", tx)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(
                "avg_pool2",
                format!("spatial extents must be even, got {h}×{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = tx.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for pl in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = pl * h * w + 2 * oy * w + 2 * ox;
                    out[(pl * oh + oy) * ow + ox] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(value, &[x], AvgPool2Fn))
    }

    /// Doubles both spatial extents with align-corners bilinear interpolation.
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = nchw("upsample_bilinear2", tx)?;
        if h == 0 || w == 0 {
            return Err(shape_err("upsample_bilinear2", "empty spatial extent"));
        }
        let (ty, txp) = (upsample_taps(h), upsample_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let d = tx.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for pl in 0..n * c {
            let src = &d[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in txp.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.record(value, &[x], Upsample2Fn))
    }
}
