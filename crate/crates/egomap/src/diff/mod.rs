//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Operations execute eagerly and record themselves on a tape; a reverse
//! sweep replays them backwards, accumulating vector-Jacobian products.
//! The operator set is exactly what the agent architectures need, nothing
//! more: no broadcasting zoo, no higher-order derivatives.

mod ops;

pub mod gradcheck;
pub mod nn;
pub mod suite;

use crate::real::Real;
use crate::tensor::Tensor;

pub use ops::ConvGeom;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got {0} elements")]
    NonScalarLoss(usize),
}

pub type Result<V> = std::result::Result<V, DiffError>;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub values: Vec<T>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<T>>,
    pub op: ops::Op<T>,
    pub requires_grad: bool,
}

/// Records a computation; one tape per worker, dropped after the sweep.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        values: Vec<T>,
        shape: Vec<usize>,
        op: ops::Op<T>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            values,
            shape,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input; gradient never flows into it.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            ops::Op::Leaf,
            false,
        )
    }

    /// Record a trainable parameter; gradient accumulates into it.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), ops::Op::Leaf, true)
    }

    pub fn scalar_input(&mut self, v: T) -> Var {
        self.push(vec![v], vec![1], ops::Op::Leaf, false)
    }

    /// Copy values into a fresh leaf, cutting the graph. The new leaf never
    /// receives gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let values = self.nodes[v.0].values.clone();
        let shape = self.nodes[v.0].shape.clone();
        self.push(values, shape, ops::Op::Leaf, false)
    }

    pub fn values(&self, v: Var) -> &[T] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.values(v).to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last reverse sweep, if any flowed here.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[v.0].values.len()],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn accumulate(&mut self, v: Var, delta: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Nodes are already in topological
    /// order because operations record themselves at creation time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(DiffError::NonScalarLoss(self.nodes[loss.0].values.len()));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_some() && self.nodes[id].requires_grad {
                self.backward_node(id);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_leaf_gets_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(&Tensor::from_vec(vec![2.0, 3.0]));
        let d = tape.detach(p);
        let c = tape.mul(p, d).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        // p gets d's values as gradient, the detached copy gets nothing.
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 3.0]);
        assert!(tape.grad(d).is_none());
        assert_eq!(tape.grad_or_zeros(d), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(&Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // loss = sum(2x) + sum(3x) => d_x = 5 everywhere
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![1.0, -1.0]));
        let a = tape.affine(x, 2.0, 0.0).unwrap();
        let b = tape.affine(x, 3.0, 0.0).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 5.0]);
    }
}
