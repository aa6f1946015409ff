use super::{shape_err, Function, Result, Tape, Tensor, Var};

/// `c = a·b + beta·c` for row-major operands; `ta`/`tb` read the stored
/// matrix transposed. `a` is m×k after transposition, `b` k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds
    // row-major layouts of the stated dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct LinearFn {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Function for LinearFn {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (n, f, o) = (self.rows, self.fan_in, self.fan_out);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * f];
            gemm(n, o, f, g, false, w, false, 0.0, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; o * f];
            gemm(o, n, f, g, true, x, false, 0.0, &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for row in g.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct BmmFn {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl Function for BmmFn {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            let mut da = vec![0.0; a.len()];
            for i in 0..self.batch {
                let ao = if self.a_batched { i * m * k } else { 0 };
                let bo = if self.b_batched { i * k * n } else { 0 };
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..],
                    false,
                    &b[bo..],
                    true,
                    1.0,
                    &mut da[ao..],
                );
            }
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; b.len()];
            for i in 0..self.batch {
                let ao = if self.a_batched { i * m * k } else { 0 };
                let bo = if self.b_batched { i * k * n } else { 0 };
                gemm(
                    k,
                    m,
                    n,
                    &a[ao..],
                    true,
                    &g[i * m * n..],
                    false,
                    1.0,
                    &mut db[bo..],
                );
            }
            db
        });
        vec![da, db]
    }
}

impl Tape {
    /// `x·wᵀ + b` for `x: [N, F]`, `w: [G, F]`, `b: [G]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[n, f], &[o, f2], &[o2]) = (tx.shape(), tw.shape(), tb.shape()) else {
            return Err(shape_err(
                "linear",
                format!(
                    "expected input [N,F], weight [G,F], bias [G]; got {:?}, {:?}, {:?}",
                    tx.shape(),
                    tw.shape(),
                    tb.shape()
                ),
            ));
        };
        if f != f2 {
            return Err(shape_err(
                "linear",
                format!("input features {f} != weight fan-in {f2}"),
            ));
        }
        if o != o2 {
            return Err(shape_err(
                "linear",
                format!("weight fan-out {o} != bias length {o2}"),
            ));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm(n, f, o, tx.data(), false, tw.data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.record(
            value,
            &[x, w, b],
            LinearFn {
                rows: n,
                fan_in: f,
                fan_out: o,
            },
        ))
    }

    /// Batched matrix product. Operands are `[B, m, k]` and `[B, k, n]`; either
    /// may have batch 1 (shared). Two rank-2 operands give a rank-2 product.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let as3 = |s: &[usize]| -> Option<[usize; 3]> {
            match *s {
                [r, c] => Some([1, r, c]),
                [bt, r, c] => Some([bt, r, c]),
                _ => None,
            }
        };
        let (Some([ba, m, k]), Some([bb, k2, n])) = (as3(ta.shape()), as3(tb.shape())) else {
            return Err(shape_err(
                "bmm",
                format!(
                    "operands must be rank 2 or 3, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                ),
            ));
        };
        if k != k2 {
            return Err(shape_err(
                "bmm",
                format!("inner dimensions differ: {k} vs {k2}"),
            ));
        }
        if ba != bb && ba != 1 && bb != 1 {
            return Err(shape_err(
                "bmm",
                format!("batch sizes differ: {ba} vs {bb}"),
            ));
        }
        let batch = ba.max(bb);
        let (a_batched, b_batched) = (ba == batch && batch > 1, bb == batch && batch > 1);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ao = if a_batched { i * m * k } else { 0 };
            let bo = if b_batched { i * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &ta.data()[ao..],
                false,
                &tb.data()[bo..],
                false,
                0.0,
                &mut out[i * m * n..],
            );
        }
        let shape = if ta.rank() == 2 && tb.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.record(
            value,
            &[a, b],
            BmmFn {
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
        ))
    }
}
