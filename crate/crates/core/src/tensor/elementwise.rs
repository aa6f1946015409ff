use super::{shape_err, Function, Result, Tape, Tensor, Var};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

struct BinaryFn(Binary);

impl Function for BinaryFn {
    fn name(&self) -> &'static str {
        match self.0 {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        match self.0 {
            Binary::Add => vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())],
            Binary::Sub => vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ],
            Binary::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Scale(f64),
    AddScalar(f64),
    Abs,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
}

struct UnaryFn(Unary);

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Scale(s) => x * s,
            Unary::AddScalar(s) => x + s,
            Unary::Abs => x.abs(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Scale(s) => s,
            Unary::AddScalar(_) => 1.0,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
        }
    }
}

impl Function for UnaryFn {
    fn name(&self) -> &'static str {
        match self.0 {
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Abs => "abs",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
        }
    }

    fn branches(&self, inputs: &[&Tensor], _: &Tensor, h: &mut dyn std::hash::Hasher) {
        if matches!(self.0, Unary::Abs | Unary::Relu | Unary::LeakyRelu(_)) {
            for &x in inputs[0].data() {
                h.write_i8(if x > 0.0 {
                    1
                } else if x < 0.0 {
                    -1
                } else {
                    0
                });
            }
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = out.data();
        vec![Some(
            (0..g.len())
                .map(|i| g[i] * self.0.derivative(x[i], y[i]))
                .collect(),
        )]
    }
}

struct SumFn {
    scale: f64,
}

impl Function for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; inputs[0].numel()])]
    }
}

/// `x[n, c, ...] + b[n, c]` (or `b[c]`, shared across the batch).
struct AddChannelwiseFn {
    batch: usize,
    channels: usize,
    inner: usize,
    shared: bool,
}

impl Function for AddChannelwiseFn {
    fn name(&self) -> &'static str {
        "add_channelwise"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let gb = needs[1].then(|| {
            let mut gb = vec![
                0.0;
                if self.shared {
                    self.channels
                } else {
                    self.batch * self.channels
                }
            ];
            for n in 0..self.batch {
                for c in 0..self.channels {
                    let base = (n * self.channels + c) * self.inner;
                    let s: f64 = g[base..base + self.inner].iter().sum();
                    let slot = if self.shared {
                        c
                    } else {
                        n * self.channels + c
                    };
                    gb[slot] += s;
                }
            }
            gb
        });
        vec![needs[0].then(|| g.to_vec()), gb]
    }
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            let f = BinaryFn(kind);
            return Err(shape_err(
                f.name(),
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                ),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.record(value, &[a, b], BinaryFn(kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| kind.apply(v)).collect(),
        };
        self.record(value, &[x], UnaryFn(kind))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Unary::AddScalar(s))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), &[x], SumFn { scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel().max(1) as f64;
        let s: f64 = t.data().iter().sum::<f64>() / n;
        self.record(Tensor::scalar(s), &[x], SumFn { scale: 1.0 / n })
    }

    /// Mean absolute difference of two same-shape values.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Adds one value per (sample, channel), broadcast over trailing axes.
    /// `b` is `[N, C]` or `[C]`.
    pub fn add_channelwise(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let xs = tx.shape();
        if xs.len() < 2 {
            return Err(shape_err(
                "add_channelwise",
                format!("input rank {} < 2", xs.len()),
            ));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let shared = match tb.shape() {
            [c] if *c == channels => true,
            [n, c] if *n == batch && *c == channels => false,
            s => {
                return Err(shape_err(
                    "add_channelwise",
                    format!(
                        "bias shape {s:?} does not match channel dimension {channels} of {xs:?}"
                    ),
                ))
            }
        };
        let mut data = tx.data().to_vec();
        for n in 0..batch {
            for c in 0..channels {
                let bv = tb.data()[if shared { c } else { n * channels + c }];
                let base = (n * channels + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.record(
            value,
            &[x, b],
            AddChannelwiseFn {
                batch,
                channels,
                inner,
                shared,
            },
        ))
    }
}
