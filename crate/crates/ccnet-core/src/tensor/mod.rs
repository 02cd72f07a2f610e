//! Reverse-mode autodiff on dense row-major f64 tensors.
//!
//! A `Tape` records one node per produced tensor; each node holds a backward
//! closure that scatters the node's gradient into its parents' gradients.
//! Tensors are immutable values: the buffer is shared behind an `Arc`, so
//! clones and reshapes are cheap. A tensor participates in differentiation
//! only when it was created through a tape (a leaf or an op on tracked
//! inputs); everything else is a constant and records nothing.
//!
//! `backward` walks nodes in reverse creation order, which is a valid
//! reverse-topological order because every op is created after its inputs.
//! Gradient accumulation across multiple consumers falls out of the walk:
//! each consumer adds its contribution into the shared parent buffer.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

mod conv;
mod elementwise;
mod gradcheck;
mod matmul;
mod norm;
mod reduce;
mod shape_ops;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use norm::COSINE_EPS;
pub use reduce::ReduceKind;
pub use shape_ops::PadMode;

pub(crate) type Data = Arc<Vec<f64>>;
pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut GradTable)>;

// ── Tape ──────────────────────────────────────────────────────────────────

struct Node {
    back: Option<BackFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records the computation graph for one backward pass. Cheap to clone
/// (shared handle). Graph construction is single-threaded by design.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, back: Option<BackFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { back });
        inner.nodes.len() - 1
    }

    /// Registers `t`'s data as a differentiable leaf on this tape.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(None);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some((self.clone(), id)),
        }
    }
}

// ── Gradient storage ──────────────────────────────────────────────────────

/// Per-node gradient buffers, populated lazily during the backward walk.
pub struct GradTable {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradTable {
    /// Gradient buffer for node `id`, allocated as zeros on first touch.
    pub(crate) fn acc(&mut self, id: usize, len: usize) -> &mut [f64] {
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Result of a backward pass: gradients addressable by the tensors that
/// produced them.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, if `t` is tracked
    /// on the same tape and received any gradient.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let (tape, id) = t.node.as_ref()?;
        if !tape.same_as(&self.tape) {
            return None;
        }
        self.grads[*id].as_deref()
    }

    /// Like `wrt`, but materializes an untracked tensor of `t`'s shape,
    /// zero-filled when no gradient reached `t`.
    pub fn wrt_tensor(&self, t: &Tensor) -> Tensor {
        match self.wrt(t) {
            Some(g) => Tensor::from_vec_unchecked(g.to_vec(), t.shape.clone()),
            None => Tensor::zeros(t.shape()),
        }
    }
}

// ── Tensor ────────────────────────────────────────────────────────────────

/// Dense row-major f64 tensor. Rank 0 (shape `[]`) is a scalar.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Data,
    node: Option<(Tape, usize)>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::invalid(
                "from_vec",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::from_vec_unchecked(data, shape.to_vec()))
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>, shape: Vec<usize>) -> Self {
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec_unchecked(vec![0.0; shape.iter().product()], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec_unchecked(vec![value; shape.iter().product()], shape.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec_unchecked(vec![value], Vec::new())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Data {
        self.data.clone()
    }

    /// True when the tensor participates in the current graph (leaf or op
    /// result on a tape).
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Re-registers this tensor's data as a leaf on `tape`.
    pub fn tracked(&self, tape: &Tape) -> Tensor {
        tape.leaf(self)
    }

    /// Detached copy: same data, no tape.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    fn node_id_on(&self, tape: &Tape) -> Option<usize> {
        match &self.node {
            Some((t, id)) if t.same_as(tape) => Some(*id),
            _ => None,
        }
    }

    /// Runs the backward pass from this scalar root and returns gradients of
    /// everything tracked on its tape.
    pub fn backward(&self) -> Result<Gradients> {
        let (tape, root) = self.node.as_ref().ok_or_else(|| {
            Error::invalid("backward", "root tensor is not tracked on any tape")
        })?;
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be a scalar, shape is {:?}", self.shape),
            ));
        }
        let inner = tape.inner.borrow();
        let mut table = GradTable {
            grads: vec![None; inner.nodes.len()],
        };
        table.grads[*root] = Some(vec![1.0]);
        for id in (0..=*root).rev() {
            if table.grads[id].is_none() {
                continue;
            }
            if let Some(back) = &inner.nodes[id].back {
                let g = table.grads[id].take().expect("grad present");
                back(&g, &mut table);
                table.grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            tape: tape.clone(),
            grads: table.grads,
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.numel().min(8);
        write!(
            f,
            "Tensor{:?} tracked={} data[..{}]={:?}",
            self.shape,
            self.is_tracked(),
            n,
            &self.data[..n]
        )
    }
}

// ── Op plumbing ───────────────────────────────────────────────────────────

/// Finds the single tape shared by any tracked inputs. Mixing tapes is a
/// caller bug surfaced as an error rather than silently wrong gradients.
pub(crate) fn common_tape(op: &'static str, inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.node {
            match &found {
                None => found = Some(tape.clone()),
                Some(prev) if prev.same_as(tape) => {}
                Some(_) => {
                    return Err(Error::invalid(op, "inputs belong to different tapes"));
                }
            }
        }
    }
    Ok(found)
}

/// Completes an op: wraps `data` in a tensor and, when any input is tracked,
/// records the backward closure produced by `build`. `build` receives the
/// node id of each input (None for constants) and the output buffer.
pub(crate) fn finish_op(
    op: &'static str,
    inputs: &[&Tensor],
    data: Vec<f64>,
    shape: Vec<usize>,
    build: impl FnOnce(Vec<Option<usize>>, &Data) -> BackFn,
) -> Result<Tensor> {
    let tape = common_tape(op, inputs)?;
    let arc = Arc::new(data);
    let node = match tape {
        None => None,
        Some(tape) => {
            let ids: Vec<Option<usize>> = inputs.iter().map(|t| t.node_id_on(&tape)).collect();
            let back = build(ids, &arc);
            Some((tape.clone(), tape.push(Some(back))))
        }
    };
    Ok(Tensor {
        shape,
        data: arc,
        node,
    })
}

/// Variant of `finish_op` for ops that alias the input buffer (reshape).
pub(crate) fn finish_op_shared(
    op: &'static str,
    inputs: &[&Tensor],
    data: Data,
    shape: Vec<usize>,
    build: impl FnOnce(Vec<Option<usize>>) -> BackFn,
) -> Result<Tensor> {
    let tape = common_tape(op, inputs)?;
    let node = match tape {
        None => None,
        Some(tape) => {
            let ids: Vec<Option<usize>> = inputs.iter().map(|t| t.node_id_on(&tape)).collect();
            let back = build(ids);
            Some((tape.clone(), tape.push(Some(back))))
        }
    };
    Ok(Tensor {
        shape,
        data,
        node,
    })
}

// ── Shape helpers shared by the op files ──────────────────────────────────

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast shape of two operands under right-aligned rules, or an error
/// naming both shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Strides into an operand as seen from the broadcast output: 0 on axes the
/// operand broadcasts over.
pub(crate) fn broadcast_strides(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let real = strides_of(operand);
    let offset = out.len() - operand.len();
    let mut s = vec![0; out.len()];
    for i in 0..operand.len() {
        s[offset + i] = if operand[i] == 1 { 0 } else { real[i] };
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
