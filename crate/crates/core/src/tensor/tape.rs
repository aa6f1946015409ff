use std::cell::Cell;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive.
///
/// `backward` receives the forward inputs, the forward output and the upstream
/// gradient of the output. It returns one entry per input; entries whose
/// `needs` flag is false may be `None`.
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;

    /// Feeds the branch taken by each output entry of a piecewise operation
    /// (sign of a ReLU input, active hinge terms, bilinear cell) into `h`.
    /// Smooth operations keep the default no-op.
    fn branches(&self, _inputs: &[&Tensor], _output: &Tensor, _h: &mut dyn std::hash::Hasher) {}
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so node indices are a topological
/// order and backward simply walks them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    last_visit: Vec<usize>,
}

thread_local! {
    static CONV_GRAD_SIGN_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Flips the sign of the conv2d input gradient on the current thread.
///
/// Mutation fixture for the gradient checker; never enable outside tests.
#[doc(hidden)]
pub fn inject_conv_grad_sign_fault(on: bool) {
    CONV_GRAD_SIGN_FAULT.with(|c| c.set(on));
}

pub(crate) fn conv_grad_fault_active() -> bool {
    CONV_GRAD_SIGN_FAULT.with(|c| c.get())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            requires_grad,
        })
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Appends the result of a primitive. The function is kept only when some
    /// input needs a gradient.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], func: impl Function + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            func: requires_grad.then(|| Box::new(func) as Box<dyn Function>),
            requires_grad,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].func.as_ref().map_or("leaf", |f| f.name())
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).unwrap())
    }

    /// Gradient of a leaf, zeros if the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad_tensor(v)
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Node indices with a function visited by the last backward call, in
    /// visiting order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_visit
    }

    /// Hash of the branches taken by every piecewise operation on the tape.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Some(f) = node.func.as_ref() {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                f.branches(&inputs, &node.value, &mut h);
            }
        }
        h.finish()
    }

    /// Accumulates d(loss)/d(leaf) into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 || loss_shape.len() > 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        self.last_visit.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let Some(func) = node.func.as_ref() else {
                if node.requires_grad {
                    accumulate(&mut self.leaf_grads[idx], &g);
                }
                continue;
            };
            self.last_visit.push(idx);
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = func.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if let (true, Some(ig)) = (*need, ig) {
                    debug_assert_eq!(ig.len(), self.nodes[v.0].value.numel(), "{}", func.name());
                    accumulate(&mut grads[v.0], &ig);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
