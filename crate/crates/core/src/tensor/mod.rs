//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted handles over flat row-major storage. Every
//! differentiable operation records its parents and a backward closure; calling
//! [`backward`] on a scalar loss walks the graph in reverse topological order
//! and accumulates gradients into every tracked leaf.
//!
//! Storage is generic over [`Element`] (`f32` or `f64`). Training runs in
//! `f32`; the finite-difference oracles run in `f64`. All reductions use a
//! fixed sequential order per output element, so results are bitwise
//! independent of thread count.

mod complex;
mod conv;
mod fft;
mod norm;
mod ops;

pub use complex::ComplexTensor;
pub use conv::conv2d;
pub use fft::{fft2_block, freq_modulate, ifft2_block};
pub use norm::group_norm;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can store.
pub trait Element:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function.
    fn erf(self) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self as f64) as f32
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self)
    }
}

/// Storage precision tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

type BackwardFn<E> = Box<dyn Fn(&[E])>;

struct TapeNode<E: Element> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: Cell<bool>,
    node: RefCell<Option<TapeNode<E>>>,
}

/// N-dimensional dense tensor with optional gradient and tape node.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}", self.inner.shape)?;
        let d = self.inner.data.borrow();
        if d.len() <= 8 {
            write!(f, ", data={:?}", &d[..])?;
        }
        write!(f, ")")
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(data: Vec<E>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: RefCell::new(None),
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::new(vec![v; shape.iter().product()], shape)
    }

    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![v], &[1])
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Self {
        Tensor::new(data.iter().map(|&v| E::from_f64(v)).collect(), shape)
    }

    /// Gaussian-initialized tensor (Box-Muller over the given RNG).
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                E::from_f64(z * std)
            })
            .collect();
        Tensor::new(data, shape)
    }

    /// Uniform random tensor in [lo, hi).
    pub fn rand_uniform<R: rand::Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::new(data, shape)
    }

    /// Marks this tensor as a gradient leaf (parameter or tracked input).
    pub fn tracked(self) -> Self {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// True if backward will reach this tensor (leaf or interior node).
    pub(crate) fn on_tape(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.node.borrow().is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.as_f64()).collect()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn accumulate_grad(&self, g: &[E]) {
        assert_eq!(g.len(), self.len(), "gradient length mismatch");
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Creates a result tensor and, when recording is active and any parent is
    /// on the tape, attaches the backward closure.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: &[usize],
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) + 'static,
    ) -> Self {
        let t = Tensor::new(data, shape);
        if grad_enabled() && parents.iter().any(|p| p.on_tape()) {
            *t.inner.node.borrow_mut() = Some(TapeNode {
                parents,
                backward: Box::new(backward),
            });
        }
        t
    }

    /// Detaches from the graph: same storage view as a fresh leaf.
    pub fn detach(&self) -> Self {
        Tensor::new(self.to_vec(), self.shape())
    }

    /// Reverse-mode backward pass from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Post-order DFS, iterative to survive deep graphs.
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<E>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.inner.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.inner.node.borrow().as_ref() {
                for p in &node.parents {
                    if !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        self.accumulate_grad(&[E::one()]);
        for t in order.iter().rev() {
            let node = t.inner.node.borrow();
            if let Some(node) = node.as_ref() {
                // Interior grads are consumed so repeated backward passes do
                // not double-count; leaves keep accumulating.
                let taken = t.inner.grad.borrow_mut().take();
                let g = taken.unwrap_or_else(|| vec![E::zero(); t.len()]);
                (node.backward)(&g);
            }
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        let t = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert_eq!(t.len(), 24);
        assert_eq!(t.shape(), &[2, 3, 4]);
    }

    #[test]
    #[should_panic]
    fn shape_mismatch_panics() {
        let _ = Tensor::<f64>::new(vec![1.0, 2.0], &[3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::zeros(&[2]);
        assert!(t.backward().is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::scalar(3.0).tracked();
        let y = x.mul(&x);
        y.backward().unwrap();
        y.backward().unwrap();
        // d(x^2)/dx = 6 per pass.
        assert_eq!(x.grad().unwrap()[0], 12.0);
    }

    #[test]
    fn no_grad_skips_tape() {
        let x = Tensor::<f64>::scalar(2.0).tracked();
        let y = no_grad(|| x.mul(&x));
        assert!(y.inner.node.borrow().is_none());
    }
}
