use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation. Receives the gradient of the
/// operation's output, read access to every recorded value, and the
/// gradient store to accumulate input contributions into.
pub type BackwardFn<S> = Box<dyn Fn(&[S], &ValueView<'_, S>, &mut Gradients<S>) + Send + Sync>;

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Read-only view of recorded values handed to backward rules.
pub struct ValueView<'a, S> {
    nodes: &'a [Node<S>],
}

impl<S: Scalar> ValueView<'_, S> {
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }
}

/// Accumulated gradients after a backward pass.
pub struct Gradients<S> {
    slots: Vec<Option<Vec<S>>>,
    lens: Vec<usize>,
    needs: Vec<bool>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf (or `None` if it received no contribution).
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Gradient of a leaf, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Vec<S> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); self.lens[v.0]],
        }
    }

    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Mutable accumulation buffer for `v`, zero-initialised on first use.
    /// `None` when `v` does not participate in differentiation.
    pub fn slot(&mut self, v: Var) -> Option<&mut [S]> {
        if !self.needs[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![S::zero(); len]).as_mut_slice())
    }

    pub fn accumulate(&mut self, v: Var, contribution: &[S]) {
        if let Some(slot) = self.slot(v) {
            debug_assert_eq!(slot.len(), contribution.len());
            for (s, c) in slot.iter_mut().zip(contribution) {
                *s += *c;
            }
        }
    }
}

/// Ordered trace of operations. Backward replays it in reverse; the
/// accumulation order is fixed by the trace, so repeated runs are
/// bit-reproducible.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an operation result. The backward rule is kept only when at
    /// least one input takes part in differentiation.
    pub fn push_op(&mut self, value: Tensor<S>, inputs: &[Var], backward: BackwardFn<S>) -> Var {
        let requires_grad = self.any_requires_grad(inputs);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape(
                "Tape::backward",
                format!("output must hold one value, has shape {:?}", out.value.shape()),
            ));
        }
        let mut grads = Gradients {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
            needs: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !out.requires_grad {
            return Ok(grads);
        }
        grads.slots[output.0] = Some(vec![S::one()]);
        let view = ValueView { nodes: &self.nodes };
        for i in (0..=output.0).rev() {
            let Some(backward) = &self.nodes[i].backward else { continue };
            let Some(g) = grads.slots[i].take() else { continue };
            backward(&g, &view, &mut grads);
        }
        Ok(grads)
    }
}
