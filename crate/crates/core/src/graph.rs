//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients into leaves.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gradient rule: given the output gradient and which parents need a
/// gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Arc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf input whose gradient is kept after [`Graph::backward`].
    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(Node {
            value: Arc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.push_node(Node {
            value: Arc::clone(&entry.value),
            parents: Vec::new(),
            backward: None,
            requires_grad: entry.trainable,
        });
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "item() on a tensor of shape {:?}", val.shape());
        val.data()[0]
    }

    /// Records an operation. The backward rule is only kept when some parent
    /// requires a gradient.
    pub(crate) fn op(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar `loss` (seeded with gradient one).
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let seed_shape = nodes[loss.0].value.shape().to_vec();
        assert_eq!(
            seed_shape.iter().product::<usize>(),
            1,
            "backward() needs a scalar loss, got shape {seed_shape:?}"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&seed_shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p.0].value.len(), "gradient size mismatch for parent of node {i}");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let params = self.params.borrow().iter().map(|(&k, &v)| (k, v)).collect();
        Gradients { grads, params }
    }
}

/// Gradients produced by a reverse sweep, retained for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Tensor<T>> {
        let v = *self.params.get(&id)?;
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
