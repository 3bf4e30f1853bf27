//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, stores its
//! output value and, when any input needs a gradient, a closure that maps the
//! output gradient onto its inputs. Nodes only ever reference earlier nodes,
//! so walking the tape backwards is a valid topological order.
//!
//! Parameters live in a [`ParamStore`]; the graph copies a parameter into a
//! leaf node the first time it is used and remembers the mapping so that
//! [`Graph::param_grads`] can hand gradients back to the store.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod sample;

use std::collections::HashMap;

pub use conv::ConvOpts;
pub use norm::BatchNormRefs;
pub use sample::{bilinear_gather, bilinear_weights, BilinearTap};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>, &mut GradSink<'_, T>)>;

pub(crate) struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Read access to forward values while a backward closure runs.
pub(crate) struct Ctx<'n, T> {
    nodes: &'n [Node<T>],
    pub out: &'n [T],
    pub grad: &'n [T],
}

impl<'n, T> Ctx<'n, T> {
    pub fn value(&self, v: Var) -> &'n [T] {
        &self.nodes[v.0].value
    }
}

/// Lazily allocated gradient accumulators for the nodes that need them.
pub(crate) struct GradSink<'g, T> {
    nodes: &'g [Node<T>],
    grads: &'g mut [Option<Vec<T>>],
}

impl<'g, T: Real> GradSink<'g, T> {
    /// Accumulator for `v`, or `None` when nothing upstream wants it.
    pub fn get(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]))
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(acc) = self.get(v) {
            acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
}

/// Whether normalization layers use batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a batch-norm op in training mode, to be
/// folded into the running buffers once the forward pass is over.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'a ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    bn_updates: Vec<BnUpdate<T>>,
    branches: Option<u64>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    /// A graph without parameters, in training mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            mode: Mode::Train,
            bn_updates: Vec::new(),
            branches: None,
        }
    }

    pub fn with_params(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { store: Some(store), mode, ..Self::new() }
    }

    /// Record which side of every kink (ReLU zero, min/max choice, bilinear
    /// cell) the forward pass takes. Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn track_branches(mut self) -> Self {
        self.branches = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub(crate) fn tracking_branches(&self) -> bool {
        self.branches.is_some()
    }

    pub(crate) fn note_branches(&mut self, keys: impl IntoIterator<Item = u64>) {
        if let Some(h) = &mut self.branches {
            for k in keys {
                *h = (*h ^ k).wrapping_mul(0x100_0000_01b3);
            }
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf holding `t`. It receives a gradient iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.leaf(vec![1], vec![v], false)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let entry = store.entry(id);
        let t = &entry.tensor;
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), entry.is_trainable());
        self.param_vars.insert(id, v);
        v
    }

    /// Read a buffer (e.g. batch-norm running statistics) without making it
    /// part of the differentiable graph.
    pub fn buffer(&self, id: ParamId) -> &'a Tensor<T> {
        &self.store.expect("graph has no parameter store").entry(id).tensor
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, needs_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copy a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub(crate) fn push_bn_update(&mut self, u: BnUpdate<T>) {
        self.bn_updates.push(u);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Record an op result. Fails if the value contains NaN or infinity.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        parents: &[Var],
        backward: impl Fn(&Ctx<'_, T>, &mut GradSink<'_, T>) + 'static,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{op}: shape/value mismatch");
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward: Option<BackwardFn<T>> =
            if needs_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { shape, value, needs_grad, backward });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Gradients of repeated calls are
    /// independent; accumulation happens in the [`ParamStore`].
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root_node.needs_grad {
            grads[root.0] = Some(vec![T::ONE]);
        }
        for i in (0..=root.0).rev() {
            let Some(back) = &self.nodes[i].backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = Ctx { nodes: &self.nodes, out: &self.nodes[i].value, grad: &g };
            let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads };
            back(&ctx, &mut sink);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every parameter touched by this graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub(crate) fn expect_shape(&self, op: &'static str, v: Var, expected: &[usize]) -> Result<()> {
        if self.shape(v) != expected {
            return Err(Error::Shape {
                op,
                detail: format!("expected {expected:?}, got {:?}", self.shape(v)),
            });
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::Shape {
                op,
                detail: format!("expected rank {rank}, got shape {:?}", self.shape(v)),
            });
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` if `v` does not need
    /// one or the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::ZERO; len])
    }
}

/// Run `f` over disjoint `chunk`-sized pieces of `out`, in parallel when the
/// `parallel` feature is on. Each chunk is produced by exactly one call, so
/// results do not depend on the worker count.
pub(crate) fn for_each_chunk<T: Send>(
    out: &mut [T],
    chunk: usize,
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::from_fn(&[2, 3], |i| i as f64).with_requires_grad());
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_two_x() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[4], |i| i as f64 - 1.5).with_requires_grad();
        let x = g.input(&t);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        let expected: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.input(&Tensor::zeros(&[2]).with_requires_grad());
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_carry_no_closure() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::full(&[3], 2.0));
        let b = g.add(a, a).unwrap();
        assert!(!g.needs_grad(b));
        assert!(g.nodes[b.0].backward.is_none());
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::full(&[1], 1.0));
        let z = g.constant(&Tensor::full(&[1], 0.0));
        assert!(matches!(g.div(a, z), Err(Error::NonFinite { .. })));
    }
}
