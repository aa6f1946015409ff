//! Named parameter storage and the small layer vocabulary the networks are
//! built from.
//!
//! Parameters live in a [`ParamStore`] between steps. A forward pass binds the
//! whole store onto a fresh [`Tape`] and layers look their tensors up through
//! the returned [`Bound`] handle.

use rand::Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Copies values from `other` by name. Every parameter here must be
    /// present there with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| TensorError::Decode(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(TensorError::Decode(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; untouched parameters get zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in scaled uniform init, `same` padding for odd kernels.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let bound = (1.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(rng, vec![cout, cin, k, k], bound),
            ),
            bias: store.add(format!("{name}.bias"), uniform(rng, vec![cout], bound)),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(rng, vec![fan_out, fan_in], bound),
            ),
            bias: store.add(format!("{name}.bias"), uniform(rng, vec![fan_out], bound)),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Tensor::zeros(vec![fan_out, fan_in]),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.instance_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// conv3×3 → instance norm → ReLU → 2×2 average pool.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl DownBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = self.norm.forward(tape, p, y)?;
        let y = tape.relu(y);
        tape.avg_pool2(y)
    }
}

/// ×2 bilinear upsample → conv3×3 → instance norm → ReLU.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl UpBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), cin, cout, 3),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.upsample_bilinear2(x)?;
        let y = self.conv.forward(tape, p, y)?;
        let y = self.norm.forward(tape, p, y)?;
        Ok(tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_gradients_follow_store_order() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(vec![2], 3.0));
        let b = store.add("b", Tensor::full(vec![1], 1.0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let sq = tape.mul(p.var(a), p.var(a)).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let g = p.gradients(&tape);
        assert_eq!(g[a.index()].data(), &[6.0, 6.0]);
        assert_eq!(g[b.index()].data(), &[0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(vec![1]));
        store.add("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn load_from_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::new();
        Linear::new(&mut a, &mut rng, "fc", 3, 2);
        let mut b = ParamStore::new();
        Linear::new(&mut b, &mut rng, "fc", 3, 2);
        b.load_from(&a).unwrap();
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        Linear::new(&mut c, &mut rng, "fc", 4, 2);
        assert!(c.load_from(&a).is_err());
    }

    #[test]
    fn blocks_change_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let down = DownBlock::new(&mut store, &mut rng, "d", 3, 4);
        let up = UpBlock::new(&mut store, &mut rng, "u", 4, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(vec![1, 3, 8, 8], |i| {
            (i as f64 * 0.37).sin()
        }));
        let d = down.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(d), &[1, 4, 4, 4]);
        let u = up.forward(&mut tape, &p, d).unwrap();
        assert_eq!(tape.shape(u), &[1, 2, 8, 8]);
    }
}
