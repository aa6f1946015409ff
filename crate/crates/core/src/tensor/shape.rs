use super::{shape_err, Function, Result, Tape, Tensor, Var};

struct ReshapeFn;

impl Function for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Splits a shape into (outer, axis extent, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

struct ConcatFn {
    axis: usize,
}

impl Function for ConcatFn {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (outer, total, inner) = split(out.shape(), self.axis);
        let mut offset = 0;
        inputs
            .iter()
            .zip(needs)
            .map(|(t, &need)| {
                let d = t.shape()[self.axis];
                let res = need.then(|| {
                    let mut gi = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + d * inner]);
                    }
                    gi
                });
                offset += d;
                res
            })
            .collect()
    }
}

struct NarrowFn {
    axis: usize,
    start: usize,
}

impl Function for NarrowFn {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (outer, total, inner) = split(inputs[0].shape(), self.axis);
        let len = out.shape()[self.axis];
        let mut dx = vec![0.0; inputs[0].numel()];
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(dx)]
    }
}

struct PermuteFn {
    axes: Vec<usize>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[idx] = x[perm(idx)]`, returned as a gather index per output element.
fn permute_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut gather = Vec::with_capacity(numel);
    for _ in 0..numel {
        gather.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    gather
}

impl Function for PermuteFn {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let gather = permute_index(inputs[0].shape(), &self.axes);
        let mut dx = vec![0.0; g.len()];
        for (o, &src) in gather.iter().enumerate() {
            dx[src] = g[o];
        }
        vec![Some(dx)]
    }
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.record(value, &[x], ReshapeFn))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("shape {s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let d = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, xs, ConcatFn { axis }))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "narrow",
                format!(
                    "range {start}..{} on axis {axis} exceeds {s:?}",
                    start + len
                ),
            ));
        }
        let (outer, total, inner) = split(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * total + start) * inner;
            data.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], NarrowFn { axis, start }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", s.len()),
            ));
        }
        let gather = permute_index(s, axes);
        let data = gather.iter().map(|&i| t.data()[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(
            value,
            &[x],
            PermuteFn {
                axes: axes.to_vec(),
            },
        ))
    }
}
