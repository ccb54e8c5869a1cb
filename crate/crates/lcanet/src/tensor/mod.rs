//! Minimal tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are rank-4-or-less f32 arrays with `(N, C, H, W)` semantics,
//! row-major storage, and an optional gradient buffer. Every operation that
//! touches a gradient-requiring input records its parents and a backward
//! closure; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and accumulates `d(loss)/d(tensor)` into each node.
//!
//! Execution is single-threaded and deterministic: identical inputs produce
//! bit-identical outputs. Reductions accumulate in f64 before rounding back
//! to f32.

mod conv;
mod gradcheck;
pub mod io;
mod ops;
mod resize;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Gradient contributions per parent, in parent order.
type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Vec<f32>>>;

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A shared handle to an f32 array of rank <= 4.
///
/// Cloning is cheap (reference-counted); all clones observe the same data
/// and gradient buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

impl Tensor {
    /// Build a tensor from shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; numel])
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: f32) -> Self {
        Self::leaf(vec![1], vec![value])
    }

    fn leaf(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad: false,
                grad: None,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// Construct an op output node. The backward closure receives the output
    /// gradient and returns one contribution per parent, in order.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad: needs_grad,
                grad: None,
                parents: if needs_grad { parents } else { Vec::new() },
                backward: if needs_grad { Some(backward) } else { None },
            })),
        }
    }

    /// Mark a leaf tensor as trainable. Must not be called on op outputs.
    pub fn requires_grad(self, yes: bool) -> Self {
        {
            let mut inner = self.inner.borrow_mut();
            assert!(
                inner.backward.is_none(),
                "requires_grad can only be toggled on leaf tensors"
            );
            inner.requires_grad = yes;
        }
        self
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the raw data. Do not hold the guard across mutating calls.
    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() requires a 1-element tensor");
        inner.data[0]
    }

    /// Overwrite the data in place (shape unchanged). Used by the optimizer
    /// and by finite-difference probes.
    pub fn set_data(&self, data: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    /// Mutate data through a closure (avoids a copy for single-element pokes).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f32]) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        f(&mut inner.data)
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad()
    }

    fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// `(N, C, H, W)` extents; errors unless rank is exactly 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        let inner = self.inner.borrow();
        match inner.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected rank-4 NCHW tensor, got shape {:?}",
                other
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        let inner = self.inner.borrow();
        match inner.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            other => Err(Error::ShapeMismatch(format!(
                "expected rank-3 tensor, got shape {:?}",
                other
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, contribution: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad {
            Some(ref mut g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode backward pass from a scalar loss. Gradients accumulate
    /// into every gradient-requiring tensor reachable from the loss and stay
    /// until [`Tensor::zero_grad`] is called.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.numel()));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let (grad_out, n_parents) = {
                let inner = node.inner.borrow();
                if inner.backward.is_none() {
                    continue;
                }
                match inner.grad {
                    Some(ref g) => (g.clone(), inner.parents.len()),
                    None => continue,
                }
            };
            let contributions = {
                let inner = node.inner.borrow();
                (inner.backward.as_ref().unwrap())(&grad_out)
            };
            debug_assert_eq!(contributions.len(), n_parents);
            for (idx, contribution) in contributions.into_iter().enumerate() {
                let parent = node.inner.borrow().parents[idx].clone();
                if parent.requires_grad() {
                    parent.accumulate_grad(&contribution);
                }
            }
        }
        Ok(())
    }

    /// Post-order DFS: parents appear before their consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const RefCell<TensorInner>> = HashSet::new();
        // Iterative DFS; (node, next_parent_index) frames.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, idx)) = stack.pop() {
            let parent = {
                let inner = node.inner.borrow();
                inner.parents.get(idx).cloned()
            };
            match parent {
                Some(p) => {
                    stack.push((node, idx + 1));
                    if visited.insert(Rc::as_ptr(&p.inner)) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}

/// A named trainable tensor with an SGD momentum buffer.
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    momentum: Vec<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let tensor = tensor.requires_grad(true);
        let momentum = vec![0.0; tensor.numel()];
        Parameter {
            name: name.into(),
            tensor,
            momentum,
        }
    }

    pub fn momentum(&self) -> &[f32] {
        &self.momentum
    }

    /// Heavy-ball SGD step: `v <- m*v + (g + wd*w); w <- w - lr*v`.
    /// Clears the gradient afterwards.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
        let grad = self
            .tensor
            .grad()
            .ok_or_else(|| Error::MissingGrad(self.name.clone()))?;
        self.tensor.with_data_mut(|w| {
            for i in 0..w.len() {
                let g = grad[i] + weight_decay * w[i];
                self.momentum[i] = momentum * self.momentum[i] + g;
                w[i] -= lr * self.momentum[i];
            }
        });
        self.tensor.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let w = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .requires_grad(true);
        let loss = w.sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic_is_twice_input() {
        let w = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .requires_grad(true);
        let loss = w.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let w = Tensor::from_vec(&[2], vec![1.0, 2.0])
            .unwrap()
            .requires_grad(true);
        w.sum_all().backward().unwrap();
        w.sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
        w.sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::zeros(&[2, 2]).requires_grad(true);
        let y = w.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(4))));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = sum(x*x) + sum(x) -> grad = 2x + 1
        let x = Tensor::from_vec(&[2], vec![3.0, -1.0])
            .unwrap()
            .requires_grad(true);
        let a = x.mul(&x).unwrap().sum_all();
        let b = x.sum_all();
        let loss = a.add(&b).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn sgd_step_plain_gradient_descent() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut p = Parameter::new("w", t);
        let loss = p.tensor.mul(&p.tensor).unwrap().sum_all();
        loss.backward().unwrap();
        p.sgd_step(0.1, 0.0, 0.0).unwrap();
        // w -= lr * 2w
        assert_eq!(p.tensor.to_vec(), vec![0.8, 1.6]);
        assert!(p.tensor.grad().is_none());
    }

    #[test]
    fn sgd_step_without_grad_errors() {
        let mut p = Parameter::new("w", Tensor::zeros(&[2]));
        assert!(matches!(
            p.sgd_step(0.1, 0.9, 0.0),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn sgd_zero_velocity_zero_grad_is_fixed_point() {
        let mut p = Parameter::new("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        // Zero gradient, zero weight decay: weights must not move.
        p.tensor.accumulate_grad(&[0.0, 0.0]);
        p.sgd_step(0.5, 0.9, 0.0).unwrap();
        assert_eq!(p.tensor.to_vec(), vec![1.0, -1.0]);
    }
}
