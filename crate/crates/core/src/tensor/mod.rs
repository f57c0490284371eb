//! A small reverse-mode automatic differentiation engine over `f64` arrays.
//!
//! Every backward rule is itself written in terms of [`Tensor`] operations, so
//! gradients can be differentiated again (`create_graph = true`). The gradient
//! penalties used by the adversarial prior need exactly that.
//!
//! Image tensors use NHWC layout throughout.

mod linear_map;
mod ops;

pub use linear_map::{LinearMap, MapBuilder};

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub type Array = ArrayD<f64>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disables graph recording until the guard is dropped.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

type BackwardFn = dyn Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Node {
    id: u64,
    value: RefCell<Array>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

impl Tensor {
    fn from_node(value: Array, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value: RefCell::new(value),
            requires_grad,
            grad_fn,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Array) -> Self {
        Self::from_node(value, false, None)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Array) -> Self {
        Self::from_node(value, true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(ArrayD::ones(IxDyn(shape)))
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::constant(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch"))
    }

    /// Builds the result of an operation, recording the backward rule only when
    /// grad mode is on and some parent requires a gradient.
    pub(crate) fn from_op<F>(value: Array, name: &'static str, parents: Vec<Tensor>, backward: F) -> Self
    where
        F: Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Self::from_node(
                value,
                true,
                Some(GradFn {
                    name,
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn value(&self) -> Ref<'_, Array> {
        self.0.value.borrow()
    }

    pub fn to_array(&self) -> Array {
        self.0.value.borrow().clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().iter().copied().collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.borrow().ndim()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn item(&self) -> f64 {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Replaces the value of a leaf in place (used by optimizers).
    pub fn set_value(&self, value: Array) {
        assert!(self.is_leaf(), "set_value on a non-leaf tensor");
        assert_eq!(
            value.shape(),
            self.0.value.borrow().shape(),
            "set_value shape mismatch"
        );
        *self.0.value.borrow_mut() = value;
    }

    pub fn update_value(&self, f: impl FnOnce(&mut Array)) {
        assert!(self.is_leaf(), "update_value on a non-leaf tensor");
        f(&mut self.0.value.borrow_mut());
    }

    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }

    pub fn all_finite(&self) -> bool {
        self.0.value.borrow().iter().all(|v| v.is_finite())
    }
}

/// Gradients of `output` (seeded with ones) with respect to `inputs`.
///
/// Inputs that `output` does not depend on receive zeros. With
/// `create_graph`, the returned tensors are themselves differentiable.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    let seed = Tensor::ones(&output.shape());
    grad_with_seed(output, &seed, inputs, create_graph)
}

pub fn grad_with_seed(output: &Tensor, seed: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    let _mode = set_grad_enabled(create_graph);
    let input_ids: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();

    // Post-order over the recorded graph, marking nodes that lead to an input.
    let mut order: Vec<Tensor> = Vec::new();
    let mut needed: HashMap<u64, bool> = HashMap::new();
    if output.requires_grad() {
        let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                let mut n = input_ids.contains(&t.id());
                if let Some(gf) = &t.0.grad_fn {
                    for p in &gf.parents {
                        if needed.get(&p.id()).copied().unwrap_or(false) {
                            n = true;
                        }
                    }
                }
                needed.insert(t.id(), n);
                order.push(t);
                continue;
            }
            if needed.contains_key(&t.id()) {
                continue;
            }
            // Placeholder so a node reachable twice is expanded once.
            needed.insert(t.id(), false);
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !needed.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    if needed.get(&output.id()).copied().unwrap_or(false) {
        grads.insert(output.id(), seed.clone());
    }
    for t in order.iter().rev() {
        let Some(g) = grads.get(&t.id()).cloned() else {
            continue;
        };
        let Some(gf) = &t.0.grad_fn else { continue };
        if !gf.parents.iter().any(|p| needed.get(&p.id()).copied().unwrap_or(false)) {
            continue;
        }
        let pg = (gf.backward)(&gf.parents, t, &g);
        debug_assert_eq!(pg.len(), gf.parents.len(), "backward of {} arity", gf.name);
        for (p, gp) in gf.parents.iter().zip(pg) {
            let Some(gp) = gp else { continue };
            if !needed.get(&p.id()).copied().unwrap_or(false) {
                continue;
            }
            debug_assert_eq!(gp.shape(), p.shape(), "gradient shape from {}", gf.name);
            let acc = match grads.remove(&p.id()) {
                Some(prev) => prev.add(&gp),
                None => gp,
            };
            grads.insert(p.id(), acc);
        }
    }

    inputs
        .iter()
        .map(|x| match grads.get(&x.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&x.shape()),
        })
        .collect()
}
