use super::{shape_err, Function, Result, Tape, Tensor, Var};

struct SoftmaxFn {
    dim: usize,
    inner: usize,
}

impl Function for SoftmaxFn {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let y = out.data();
        let (d, inner) = (self.dim, self.inner);
        let outer = y.len() / (d * inner);
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * d + k) * inner + i;
                let dot: f64 = (0..d).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..d {
                    dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl Tape {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if axis >= s.len() {
            return Err(shape_err(
                "softmax",
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let d = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * d + k) * inner + i;
                let mx = (0..d).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..d {
                    let e = (xd[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..d {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.record(value, &[x], SoftmaxFn { dim: d, inner }))
    }
}
