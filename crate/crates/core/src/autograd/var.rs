use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::real::Real;
use super::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: `(upstream, parents, output, needed) -> per-parent gradients`.
/// `needed[i]` is false when parent `i` takes no gradient; rules may return
/// `None` there.
///
/// Rules are written with differentiable ops, so when the graph is built with
/// `create_graph` the resulting gradients can be differentiated again.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Var<T>, &[Var<T>], &Var<T>, &[bool]) -> Vec<Option<Var<T>>>>;

pub(crate) struct Node<T: Real> {
    id: u64,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

impl<T: Real> Drop for Node<T> {
    // Second-order graphs are deep; unwind iteratively instead of recursing.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A node in a dynamically built computation graph.
#[derive(Clone)]
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, parents: Vec<Var<T>>, backward: Option<BackwardFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Self::make(value, true, Vec::new(), None)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, Vec::new(), None)
    }

    /// Records an op result. Parents that do not require gradients are
    /// dropped from the graph entirely.
    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, parents, Some(backward))
        } else {
            Self::constant(value)
        }
    }

    #[inline]
    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    fn id(&self) -> u64 {
        self.0.id
    }
}

/// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves graph nodes that
/// depend on `wrt`, enabling gradients of gradients. Without it they are
/// constants and the backward pass records nothing.
pub fn grad<T: Real>(output: &Var<T>, wrt: &[Var<T>], create_graph: bool) -> Vec<Var<T>> {
    assert_eq!(output.value().len(), 1, "grad expects a scalar output");
    let zeros = |v: &Var<T>| Var::constant(Tensor::zeros(v.shape()));
    if !output.requires_grad() {
        return wrt.iter().map(zeros).collect();
    }

    // Ids increase monotonically, so descending id order is a valid reverse
    // topological order of the reachable subgraph.
    let mut nodes: Vec<Var<T>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        nodes.push(v);
    }
    nodes.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

    let wanted: std::collections::HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    let mut results: HashMap<u64, Var<T>> = HashMap::new();

    for node in nodes {
        let id = node.id();
        let Some(g) = grads.remove(&id) else { continue };
        if wanted.contains(&id) {
            results.insert(id, g.clone());
        }
        let Some(backward) = node.0.backward.as_ref() else { continue };
        let (parents, out, g) = if create_graph {
            (node.0.parents.clone(), node.clone(), g)
        } else {
            (
                node.0.parents.iter().map(Var::detach).collect::<Vec<_>>(),
                node.detach(),
                g.detach(),
            )
        };
        let needed: Vec<bool> = node.0.parents.iter().map(Var::requires_grad).collect();
        let pgrads = backward(&g, &parents, &out, &needed);
        debug_assert_eq!(pgrads.len(), parents.len());
        for (p, pg) in node.0.parents.iter().zip(pgrads) {
            let Some(pg) = pg else { continue };
            if !p.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
            let acc = match grads.remove(&p.id()) {
                Some(prev) => super::ops::add(&prev, &pg),
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }

    wrt.iter()
        .map(|v| results.get(&v.id()).cloned().unwrap_or_else(|| zeros(v)))
        .collect()
}
