use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::CTensor;
use crate::{Error, Result, C64};

/// Local adjoint rule: maps the output gradient (plus input and output
/// values) to one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&CTensor, &[&CTensor], &CTensor) -> Vec<Option<CTensor>>>;

struct Node {
    value: Rc<CTensor>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the index order is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    branches: Cell<u64>,
}

/// Handle to one value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds the branch taken by each element of a piecewise op into the
    /// tape's branch signature.
    pub fn note_branches(&self, branches: impl IntoIterator<Item = u8>) {
        let mut h = self.branches.get() ^ 0xcbf2_9ce4_8422_2325;
        for b in branches {
            h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
        }
        self.branches.set(h.rotate_left(7));
    }

    /// Hash of every branch recorded so far; two forward passes with equal
    /// signatures took the same piece of every piecewise op.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Learnable leaf: receives a gradient on `backward`.
    pub fn param(&self, value: CTensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&self, value: CTensor) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn constant_real(&self, shape: &[usize], data: &[f64]) -> Result<Var<'_>> {
        Ok(self.constant(CTensor::from_real(shape, data)?))
    }

    /// Registers an operation computed outside this module.
    ///
    /// `backward` receives the output gradient, the input values and the
    /// output value, and must return one entry per input.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: CTensor,
        backward: BackwardFn,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<CTensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a real scalar.
    ///
    /// Gradients follow the convention `dL/dRe(z) + i dL/dIm(z)` (twice the
    /// conjugate Wirtinger derivative), so `z - lr * grad` descends `L`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff(
                "backward called on a value with no recorded dependence on parameters".into(),
            ));
        }
        let mut grads: Vec<Option<CTensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(CTensor::from_parts(
            root.value.shape().to_vec(),
            vec![C64::new(1.0, 0.0)],
        ));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&CTensor> =
                    node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
                let local = bw(&g, &inputs, &node.value);
                debug_assert_eq!(local.len(), node.inputs.len());
                for (&inp, lg) in node.inputs.iter().zip(local) {
                    let Some(lg) = lg else { continue };
                    if !nodes[inp].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(lg.shape(), nodes[inp].value.shape(), "node {id}");
                    match &mut grads[inp] {
                        Some(acc) => acc.add_assign(&lg),
                        slot => *slot = Some(lg),
                    }
                }
            }
            if node.inputs.is_empty() {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<CTensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&CTensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> CTensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| CTensor::zeros(var.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<CTensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> C64 {
        self.value().data()[0]
    }
}
