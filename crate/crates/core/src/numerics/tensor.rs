use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use sha2::{Digest, Sha256};

use super::ops::Op;
use super::scalar::Scalar;
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations; results are plain constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    op: Option<Op<T>>,
}

/// Dense row-major array taking part in reverse-mode differentiation.
///
/// `Clone` is a handle copy: clones share storage, so an update through one
/// handle is visible through every other. Parameters that must be shared
/// (the shared down-projection) rely on this.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Input(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op: None,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); n], false).expect("valid zeros shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![1], vec![v], false).expect("scalar")
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let rg = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(rg),
            op: if rg { Some(op) } else { None },
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access for optimizers and test fixtures. Must not be held
    /// across a forward pass.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// True when both handles point at the same storage.
    pub fn same(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn node(&self) -> &Node<T> {
        &self.0
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Overwrites the values in place, keeping identity and gradient state.
    pub fn assign(&self, values: &[T]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::shape("assign", &self.0.shape, &[values.len()]));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    /// Detached copy with fresh storage.
    pub fn deep_clone(&self) -> Tensor<T> {
        Self::build(self.0.shape.clone(), self.to_vec(), self.requires_grad()).expect("valid")
    }

    /// SHA-256 over shape and raw value bits.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &e in &self.0.shape {
            h.update((e as u64).to_le_bytes());
        }
        for v in self.0.data.borrow().iter() {
            h.update(v.bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Reverse pass from a one-element loss. Leaf gradients accumulate across
    /// calls until [`Tensor::zero_grad`]; interior gradients are overwritten.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() || self.is_leaf() {
            return Err(Error::Usage(
                "backward called on a tensor that is not part of a recorded computation".into(),
            ));
        }
        let order = topo_order(self);
        let index: HashMap<*const Node<T>, usize> =
            order.iter().enumerate().map(|(i, t)| (t.key(), i)).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; order.len()];
        grads[order.len() - 1] = Some(vec![T::one()]);

        for pos in (0..order.len()).rev() {
            let Some(g) = grads[pos].take() else { continue };
            let t = &order[pos];
            if let Some(op) = &t.0.op {
                op.backward(t.node(), &g, &mut |parent: &Tensor<T>, contrib: Vec<T>| {
                    if !parent.requires_grad() {
                        return;
                    }
                    if let Some(&pi) = index.get(&parent.key()) {
                        match &mut grads[pi] {
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(contrib) {
                                    *a += c;
                                }
                            }
                            slot => *slot = Some(contrib),
                        }
                    }
                });
                *t.0.grad.borrow_mut() = Some(g);
            } else {
                let mut slot = t.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(g) {
                            *a += c;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Nodes reachable from `root` through gradient-carrying edges, parents first.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut seen: HashMap<*const Node<T>, ()> = HashMap::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if seen.insert(t.key(), ()).is_some() {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.0.op {
            for p in op.parents() {
                if p.requires_grad() && !seen.contains_key(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}
