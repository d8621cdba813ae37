//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The graph is built while operations run (define-by-run). Every tensor
//! produced from at least one gradient-tracking input keeps a [`GraphNode`]
//! holding its parents and a closure that maps the output gradient to one
//! gradient per parent. [`Tensor::backward`] walks the graph once, in reverse
//! topological order, from a scalar loss.
//!
//! Values are immutable once a tensor exists. Parameters are updated by
//! replacing the tensor, which also drops the previous step's graph.

mod gradcheck;
pub(crate) mod kernels;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use gradcheck::{finite_diff_check, finite_diff_check_at, relative_error, GradCheckReport};
pub use ops::{sigmoid, BinaryOp};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Inputs handed to a backward rule.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to the node's output.
    pub grad: &'a [f64],
    /// The node's forward output values.
    pub output: &'a [f64],
    pub parents: &'a [Tensor],
}

/// Maps the output gradient to one optional gradient per parent. `None` means
/// "no contribution" and is only allowed for parents that do not require grad.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// One recorded operation in the computation graph.
pub struct GraphNode {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<[f64]>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<GraphNode>,
}

/// Reference-counted handle to an immutable n-dimensional array.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

/// Entry of [`BackwardReport::order`]: which node ran and which parents it fed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: u64,
    pub op: &'static str,
    pub parents: Vec<u64>,
}

/// Execution trace of a backward traversal, in the order rules ran.
#[derive(Debug, Clone, Default)]
pub struct BackwardReport {
    pub order: Vec<NodeRecord>,
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape(op, format!("zero extent in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} needs {n} values, got {len}"),
        ));
    }
    Ok(())
}

fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Arc<[f64]>,
        requires_grad: bool,
        node: Option<GraphNode>,
    ) -> Self {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Creates a constant tensor (no gradient tracking).
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape("tensor", &shape, data.len())?;
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self::build(shape, data.into(), false, None))
    }

    /// Creates a leaf tensor that accumulates gradients.
    pub fn parameter(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape("parameter", &shape, data.len())?;
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: "parameter" });
        }
        Ok(Self::build(shape, data.into(), true, None))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones_like(&self) -> Self {
        Self::build(
            self.shape().to_vec(),
            vec![1.0; self.numel()].into(),
            false,
            None,
        )
    }

    /// Records the result of an operation. A graph node is attached only when
    /// some parent requires grad; otherwise `backward` is dropped unused.
    ///
    /// Fails with [`Error::NonFinite`] if `data` holds NaN or infinity.
    pub fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Result<Self>
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        check_shape(op, &shape, data.len())?;
        if !all_finite(&data) {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| GraphNode {
            op,
            parents,
            backward: Box::new(backward),
        });
        Ok(Self::build(shape, data.into(), requires_grad, node))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the operation that produced this tensor, or `"leaf"`.
    pub fn op(&self) -> &'static str {
        self.0.node.as_ref().map_or("leaf", |n| n.op)
    }

    pub fn graph_node(&self) -> Option<&GraphNode> {
        self.0.node.as_ref()
    }

    /// Accumulated gradient, present only after a backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn reset_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, no graph, no gradient tracking. Shares the value buffer.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    fn accumulate_grad(&self, g: Vec<f64>) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Reverse-topological order (root first) of all gradient-tracking
    /// tensors reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut post = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                post.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        post.reverse();
        post
    }

    /// Accumulates d(self)/d(t) into every reachable gradient-tracking tensor.
    ///
    /// Gradients add up across calls until [`Tensor::reset_grad`].
    pub fn backward(&self) -> Result<BackwardReport> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if self.0.node.is_none() {
            return Err(Error::NoGraph);
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        let mut report = BackwardReport::default();

        for t in order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let args = BackwardArgs {
                    grad: &g,
                    output: t.values(),
                    parents: &node.parents,
                };
                let parent_grads = (node.backward)(&args);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel(), "grad size for {}", node.op);
                    if !all_finite(&pg) {
                        return Err(Error::NonFinite { op: node.op });
                    }
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
                report.order.push(NodeRecord {
                    id: t.id(),
                    op: node.op,
                    parents: node.parents.iter().map(Tensor::id).collect(),
                });
            } else {
                report.order.push(NodeRecord {
                    id: t.id(),
                    op: "leaf",
                    parents: Vec::new(),
                });
            }
            t.accumulate_grad(g);
        }
        Ok(report)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("op", &self.op())
            .field("requires_grad", &self.0.requires_grad);
        if self.numel() <= 16 {
            d.field("values", &&self.0.data[..]);
        }
        d.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::parameter(vec![1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_on_constant_graph_fails() {
        let c = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = c.sum().unwrap();
        assert!(matches!(s.backward(), Err(Error::NoGraph)));
    }

    #[test]
    fn backward_on_non_scalar_fails() {
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let y = x.mul_scalar(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let x = Tensor::parameter(vec![2], vec![1.0, -2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -8.0]);
        x.reset_grad();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn accumulation_is_linear() {
        let vals = vec![0.3, -0.7, 1.1];
        let build = |x: &Tensor| {
            let a = x.sigmoid().unwrap().sum().unwrap();
            let b = x.mul(x).unwrap().mul_scalar(0.5).unwrap().sum().unwrap();
            (a, b)
        };
        let x1 = Tensor::parameter(vec![3], vals.clone()).unwrap();
        let (a, b) = build(&x1);
        a.backward().unwrap();
        b.backward().unwrap();

        let x2 = Tensor::parameter(vec![3], vals).unwrap();
        let (a, b) = build(&x2);
        a.add(&b).unwrap().backward().unwrap();

        for (g1, g2) in x1.grad().unwrap().iter().zip(x2.grad().unwrap()) {
            assert!((g1 - g2).abs() < 1e-15);
        }
    }

    #[test]
    fn consumers_run_before_producers() {
        // diamond: x -> (a, b) -> c, plus a reused twice
        let x = Tensor::parameter(vec![2], vec![0.5, -0.25]).unwrap();
        let a = x.sigmoid().unwrap();
        let b = x.relu().unwrap();
        let c = a.mul(&b).unwrap().add(&a).unwrap();
        let loss = c.sum().unwrap();
        let report = loss.backward().unwrap();

        let pos: HashMap<u64, usize> = report
            .order
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id, i))
            .collect();
        assert_eq!(pos.len(), report.order.len(), "each node visited once");
        for rec in &report.order {
            for p in &rec.parents {
                if let Some(&pi) = pos.get(p) {
                    assert!(pi > pos[&rec.id], "{} ran before its consumer", p);
                }
            }
        }
        // d/dx [s(x) r(x) + s(x)] at x=0.5: s'(x)(x+1) + s(x); at x=-0.25: s'(x)
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let ds = |v: f64| s(v) * (1.0 - s(v));
        let g = x.grad().unwrap();
        assert!((g[0] - (ds(0.5) * 1.5 + s(0.5))).abs() < 1e-15);
        assert!((g[1] - ds(-0.25)).abs() < 1e-15);
    }

    #[test]
    fn detach_stops_gradient() {
        let x = Tensor::parameter(vec![1], vec![2.0]).unwrap();
        let y = x.detach().mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }
}
