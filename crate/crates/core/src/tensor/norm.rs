use super::{shape_err, Function, Result, Tape, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

struct InstanceNormFn {
    channels: usize,
    inner: usize,
    /// Per-(sample, channel) normalized values and inverse std.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Function for InstanceNormFn {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let gamma = inputs[1].data();
        let (c, m) = (self.channels, self.inner);
        let planes = g.len() / m;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = needs[0].then(|| vec![0.0; g.len()]);
        for p in 0..planes {
            let ch = p % c;
            let gp = &g[p * m..(p + 1) * m];
            let xh = &self.xhat[p * m..(p + 1) * m];
            let (mut sg, mut sgx) = (0.0, 0.0);
            for (gv, xv) in gp.iter().zip(xh) {
                sg += gv;
                sgx += gv * xv;
            }
            dbeta[ch] += sg;
            dgamma[ch] += sgx;
            if let Some(dx) = dx.as_mut() {
                let k = gamma[ch] * self.inv_std[p] / m as f64;
                for ((d, gv), xv) in dx[p * m..(p + 1) * m].iter_mut().zip(gp).zip(xh) {
                    *d = k * (m as f64 * gv - sg - xv * sgx);
                }
            }
        }
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

impl Tape {
    /// Per-sample, per-channel normalization over spatial positions with a
    /// learnable per-channel scale and shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = tx.shape();
        if s.len() < 3 {
            return Err(shape_err(
                "instance_norm",
                format!("need [N,C,...], got {s:?}"),
            ));
        }
        let c = s[1];
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err(
                "instance_norm",
                format!(
                    "scale/shift must be [{c}], got {:?} and {:?}",
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let m: usize = s[2..].iter().product();
        let planes = s[0] * c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; planes];
        let mut out = vec![0.0; tx.numel()];
        for p in 0..planes {
            let xs = &tx.data()[p * m..(p + 1) * m];
            let mean = xs.iter().sum::<f64>() / m as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            inv_std[p] = is;
            let (gm, bt) = (tg.data()[p % c], tb.data()[p % c]);
            for i in 0..m {
                let h = (xs[i] - mean) * is;
                xhat[p * m + i] = h;
                out[p * m + i] = h * gm + bt;
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.record(
            value,
            &[x, gamma, beta],
            InstanceNormFn {
                channels: c,
                inner: m,
                xhat,
                inv_std,
            },
        ))
    }
}
