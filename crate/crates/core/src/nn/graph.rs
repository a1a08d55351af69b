//! Define-by-run reverse-mode autodiff over dense n-d arrays.
//!
//! Every op records its output value, its input node ids and a backward
//! closure. A graph built with [`Graph::no_grad`] records values only, which is
//! how evaluation-mode and detached forward passes are run.

use ndarray::{ArrayD, IxDyn};

use super::params::{ParamId, ParamStore};
use super::real::Real;

pub type Tensor<T> = ArrayD<T>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op: given the gradient of the output, return
/// one optional gradient per input (same order as recorded).
pub trait Backward<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

impl<T: Real, F> Backward<T> for F
where
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        self(inputs, output, grad)
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_nodes: Vec<(ParamId, usize)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: Vec::new(),
        }
    }

    /// A graph that only evaluates; nothing it produces carries gradient.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
        })
    }

    /// Leaf that receives a gradient even though it is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
        })
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return Var(node);
        }
        let var = self.push(Node {
            value: store.value(id).clone(),
            inputs: Vec::new(),
            op: None,
            requires_grad: self.grad_enabled,
        });
        self.param_nodes.push((id, var.0));
        var
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut from the tape: downstream gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Record an op whose forward value has already been computed.
    pub fn apply(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: if requires_grad { Some(Box::new(op)) } else { None },
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar (single-element) node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root = &self.nodes[loss.0];
        assert_eq!(root.value.len(), 1, "backward needs a scalar root");
        if root.requires_grad {
            grads[loss.0] = Some(ArrayD::from_elem(root.value.raw_dim(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
        }
    }
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf node (parameter or input), if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter of `store`, zero where unused.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| ArrayD::zeros(IxDyn(p.value.shape())))
            .collect();
        for &(id, node) in &self.param_nodes {
            if let Some(g) = &self.grads[node] {
                out[id.index()] += g;
            }
        }
        out
    }
}
