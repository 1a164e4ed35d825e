//! Dense reverse-mode autodiff on a per-sample tape.
//!
//! A [`Graph`] is an append-only list of nodes; parents always precede
//! children, so forward evaluation is a single pass over the node list and
//! the backward pass is the reverse pass. Values live in one flat `f64`
//! arena per evaluation, sliced by per-node offsets.
//!
//! Leaves are named. They can carry a value at build time (the common case:
//! the tape is rebuilt per sample with parameter values snapshotted in) or
//! be declared as placeholders and bound at [`Graph::forward`] time through
//! [`Bindings`]. Bindings also override build-time values, which is what the
//! finite-difference checker uses to probe each coordinate.
//!
//! All arithmetic is `f64` and strictly sequential: the same graph and the
//! same inputs produce bit-identical forward values and gradients.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

/// A dense row-major matrix; vectors are `(n, 1)`, scalars `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Value {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Value {
        assert_eq!(data.len(), rows * cols, "value data length != rows*cols");
        Value { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Value {
        Value { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Value {
        Value { rows: data.len(), cols: 1, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Value {
        Value { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { slot: usize },
    Const { slot: usize },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    CosDiff(NodeId, NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    Concat(Vec<NodeId>),
    Slice { src: NodeId, start: usize, len: usize },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    offset: usize,
}

struct LeafSlot {
    name: String,
    node: NodeId,
    rows: usize,
    cols: usize,
    value: Option<Arc<Value>>,
}

/// Errors surfaced by forward evaluation and the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// A placeholder leaf was left unbound at forward time.
    UnboundInput { name: String },
    /// A binding's shape disagrees with the declared leaf shape.
    BindingShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A binding names a leaf that does not exist in this graph.
    UnknownBinding { name: String },
    /// Finite-difference checking needs every leaf to be named.
    AnonymousLeaf { slot: usize },
    /// Backward requires a scalar root.
    NonScalarRoot { node: usize, shape: (usize, usize) },
    /// The evaluation was produced by a different graph.
    StaleEvaluation,
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::UnboundInput { name } => {
                write!(f, "input `{name}` is not bound")
            }
            GraphError::BindingShape { name, expected, got } => write!(
                f,
                "binding `{name}` has shape {}x{}, leaf expects {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            GraphError::UnknownBinding { name } => {
                write!(f, "binding `{name}` does not match any leaf")
            }
            GraphError::AnonymousLeaf { slot } => {
                write!(f, "leaf slot {slot} is anonymous and cannot be probed by name")
            }
            GraphError::NonScalarRoot { node, shape } => write!(
                f,
                "backward root must be scalar, node {node} has shape {}x{}",
                shape.0, shape.1
            ),
            GraphError::StaleEvaluation => {
                write!(f, "evaluation does not belong to this graph (run forward first)")
            }
        }
    }
}

impl std::error::Error for GraphError {}

/// Named values bound to placeholder leaves (or overriding bound leaves).
#[derive(Default, Clone)]
pub struct Bindings {
    map: BTreeMap<String, Value>,
}

impl Bindings {
    pub fn new() -> Bindings {
        Bindings::default()
    }

    pub fn bind(&mut self, name: &str, value: Value) -> &mut Self {
        self.map.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Forward values for every node, in one arena.
#[derive(Debug)]
pub struct Evaluation {
    arena: Vec<f64>,
    nodes: usize,
}

impl Evaluation {
    /// Recover the buffer for reuse by [`Graph::forward_reusing`].
    pub fn into_arena(self) -> Vec<f64> {
        self.arena
    }
}

/// Per-node gradients of a scalar root, same layout as [`Evaluation`].
#[derive(Debug)]
pub struct GradStore {
    arena: Vec<f64>,
    nodes: usize,
}

impl GradStore {
    /// Recover the buffer for reuse by [`Graph::backward_reusing`].
    pub fn into_arena(self) -> Vec<f64> {
        self.arena
    }
}

/// The computation tape. See the module docs for the evaluation model.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<LeafSlot>,
    leaf_index: HashMap<String, usize>,
    consts: Vec<Value>,
    arena_len: usize,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.idx()];
        (n.rows, n.cols)
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.iter().map(|l| l.name.as_str())
    }

    pub fn leaf_node(&self, name: &str) -> Option<NodeId> {
        self.leaf_index.get(name).map(|&i| self.leaves[i].node)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        let offset = self.arena_len;
        self.arena_len += rows * cols;
        self.nodes.push(Node { op, rows, cols, offset });
        id
    }

    fn push_leaf(&mut self, name: Option<&str>, rows: usize, cols: usize, value: Option<Arc<Value>>) -> NodeId {
        let slot = self.leaves.len();
        let id = self.push(Op::Leaf { slot }, rows, cols);
        let name = match name {
            Some(n) => {
                assert!(
                    !self.leaf_index.contains_key(n),
                    "duplicate leaf name `{n}`"
                );
                self.leaf_index.insert(n.to_string(), slot);
                n.to_string()
            }
            None => String::new(),
        };
        self.leaves.push(LeafSlot { name, node: id, rows, cols, value });
        id
    }

    /// A named leaf with a build-time value (rebindable through [`Bindings`]).
    pub fn leaf(&mut self, name: &str, value: Value) -> NodeId {
        let (r, c) = value.shape();
        self.push_leaf(Some(name), r, c, Some(Arc::new(value)))
    }

    /// A named leaf sharing an existing value without copying it.
    pub fn leaf_shared(&mut self, name: &str, value: Arc<Value>) -> NodeId {
        let (r, c) = value.shape();
        self.push_leaf(Some(name), r, c, Some(value))
    }

    /// An anonymous bound leaf: not rebindable, but cheaper to create (no
    /// name allocation or index insert). The training hot path uses these.
    pub fn leaf_anon(&mut self, value: Value) -> NodeId {
        let (r, c) = value.shape();
        self.push_leaf(None, r, c, Some(Arc::new(value)))
    }

    /// Anonymous shared-value leaf (see [`Graph::leaf_anon`]).
    pub fn leaf_anon_shared(&mut self, value: Arc<Value>) -> NodeId {
        let (r, c) = value.shape();
        self.push_leaf(None, r, c, Some(value))
    }

    /// A named leaf that must be bound at forward time.
    pub fn placeholder(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        self.push_leaf(Some(name), rows, cols, None)
    }

    pub fn constant(&mut self, value: Value) -> NodeId {
        let (r, c) = value.shape();
        let slot = self.consts.len();
        self.consts.push(value);
        self.push(Op::Const { slot }, r, c)
    }

    pub fn constant_scalar(&mut self, x: f64) -> NodeId {
        self.constant(Value::scalar(x))
    }

    // ── op builders (shape-checked; mismatches are programmer errors) ──

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(
            sa, sb,
            "add: shape mismatch {sa:?} vs {sb:?} at node {}",
            self.nodes.len()
        );
        self.push(Op::Add(a, b), sa.0, sa.1)
    }

    /// Elementwise product; either operand may be a scalar (broadcast).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = if sa == sb {
            sa
        } else if sa == (1, 1) {
            sb
        } else if sb == (1, 1) {
            sa
        } else {
            panic!(
                "mul: shape mismatch {sa:?} vs {sb:?} at node {}",
                self.nodes.len()
            );
        };
        self.push(Op::Mul(a, b), out.0, out.1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(
            k,
            k2,
            "matmul: inner dims {k} vs {k2} at node {}",
            self.nodes.len()
        );
        self.push(Op::MatMul(a, b), m, n)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Exp(a), s.0, s.1)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Log(a), s.0, s.1)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Sigmoid(a), s.0, s.1)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Relu(a), s.0, s.1)
    }

    /// Elementwise cos(a - b).
    pub fn cos_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(
            sa, sb,
            "cos_diff: shape mismatch {sa:?} vs {sb:?} at node {}",
            self.nodes.len()
        );
        self.push(Op::CosDiff(a, b), sa.0, sa.1)
    }

    /// Softmax over a column vector, computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(c, 1, "softmax expects a column vector, got {r}x{c}");
        self.push(Op::Softmax(a), r, 1)
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Scale(a, k), s.0, s.1)
    }

    /// Stack column vectors vertically.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, 1, "concat expects column vectors, node {} is {r}x{c}", p.0);
            rows += r;
        }
        self.push(Op::Concat(parts.to_vec()), rows, 1)
    }

    /// Contiguous rows `[start, start+len)` of a column vector.
    pub fn slice(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(src);
        assert_eq!(c, 1, "slice expects a column vector, got {r}x{c}");
        assert!(start + len <= r, "slice [{start}, {start}+{len}) out of 0..{r}");
        self.push(Op::Slice { src, start, len }, len, 1)
    }

    // ── sugar over the op set ──

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Dot product of two equally shaped nodes.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum(p)
    }

    // ── evaluation ──

    /// Evaluate every node. `binds` must cover all placeholders; it may also
    /// override bound leaves by name.
    pub fn forward(&self, binds: &Bindings) -> Result<Evaluation, GraphError> {
        self.forward_reusing(binds, Vec::new())
    }

    /// [`Graph::forward`] recycling a previous evaluation's buffer (see
    /// [`Evaluation::into_arena`]); every node slot is overwritten, so stale
    /// contents are harmless.
    pub fn forward_reusing(
        &self,
        binds: &Bindings,
        mut arena: Vec<f64>,
    ) -> Result<Evaluation, GraphError> {
        for name in binds.map.keys() {
            if !self.leaf_index.contains_key(name) {
                return Err(GraphError::UnknownBinding { name: name.clone() });
            }
        }
        arena.resize(self.arena_len, 0.0);
        for node in &self.nodes {
            let size = node.rows * node.cols;
            let (before, rest) = arena.split_at_mut(node.offset);
            let out = &mut rest[..size];
            match &node.op {
                Op::Leaf { slot } => {
                    let leaf = &self.leaves[*slot];
                    let value = match binds.get(&leaf.name) {
                        Some(v) => v,
                        None => leaf
                            .value
                            .as_deref()
                            .ok_or_else(|| GraphError::UnboundInput { name: leaf.name.clone() })?,
                    };
                    if value.shape() != (leaf.rows, leaf.cols) {
                        return Err(GraphError::BindingShape {
                            name: leaf.name.clone(),
                            expected: (leaf.rows, leaf.cols),
                            got: value.shape(),
                        });
                    }
                    out.copy_from_slice(value.data());
                }
                Op::Const { slot } => out.copy_from_slice(self.consts[*slot].data()),
                Op::Add(a, b) => {
                    let va = self.slice_of(before, *a);
                    let vb = self.slice_of(before, *b);
                    for ((o, x), y) in out.iter_mut().zip(va).zip(vb) {
                        *o = x + y;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.slice_of(before, *a);
                    let vb = self.slice_of(before, *b);
                    if va.len() == vb.len() {
                        for ((o, x), y) in out.iter_mut().zip(va).zip(vb) {
                            *o = x * y;
                        }
                    } else if va.len() == 1 {
                        let x = va[0];
                        for (o, y) in out.iter_mut().zip(vb) {
                            *o = x * y;
                        }
                    } else {
                        let y = vb[0];
                        for (o, x) in out.iter_mut().zip(va) {
                            *o = x * y;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    let va = self.slice_of(before, *a);
                    let vb = self.slice_of(before, *b);
                    if n == 1 {
                        // matrix-vector: the dominant case
                        for (o, row) in out.iter_mut().zip(va.chunks_exact(k)) {
                            let mut acc = 0.0;
                            for (x, y) in row.iter().zip(vb) {
                                acc += x * y;
                            }
                            *o = acc;
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for l in 0..k {
                                    acc += va[i * k + l] * vb[l * n + j];
                                }
                                out[i * n + j] = acc;
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    let va = self.slice_of(before, *a);
                    for i in 0..size {
                        out[i] = va[i].exp();
                    }
                }
                Op::Log(a) => {
                    let va = self.slice_of(before, *a);
                    for i in 0..size {
                        out[i] = va[i].ln();
                    }
                }
                Op::Sigmoid(a) => {
                    let va = self.slice_of(before, *a);
                    for i in 0..size {
                        out[i] = sigmoid(va[i]);
                    }
                }
                Op::Relu(a) => {
                    let va = self.slice_of(before, *a);
                    for i in 0..size {
                        out[i] = va[i].max(0.0);
                    }
                }
                Op::CosDiff(a, b) => {
                    let va = self.slice_of(before, *a);
                    let vb = self.slice_of(before, *b);
                    for i in 0..size {
                        out[i] = (va[i] - vb[i]).cos();
                    }
                }
                Op::Softmax(a) => {
                    let va = self.slice_of(before, *a);
                    let max = va.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for i in 0..size {
                        out[i] = (va[i] - max).exp();
                        total += out[i];
                    }
                    for v in out.iter_mut() {
                        *v /= total;
                    }
                }
                Op::Sum(a) => {
                    let va = self.slice_of(before, *a);
                    out[0] = va.iter().sum();
                }
                Op::Scale(a, k) => {
                    let va = self.slice_of(before, *a);
                    for i in 0..size {
                        out[i] = k * va[i];
                    }
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let vp = self.slice_of(before, p);
                        out[at..at + vp.len()].copy_from_slice(vp);
                        at += vp.len();
                    }
                }
                Op::Slice { src, start, len } => {
                    let vs = self.slice_of(before, *src);
                    out.copy_from_slice(&vs[*start..*start + *len]);
                }
            }
        }
        Ok(Evaluation { arena, nodes: self.nodes.len() })
    }

    /// Reverse pass from a scalar `root`; returns d(root)/d(node) for every
    /// node. The root's own gradient is exactly 1.
    pub fn backward(&self, eval: &Evaluation, root: NodeId) -> Result<GradStore, GraphError> {
        self.backward_reusing(eval, root, Vec::new())
    }

    /// [`Graph::backward`] recycling a previous store's buffer (see
    /// [`GradStore::into_arena`]).
    pub fn backward_reusing(
        &self,
        eval: &Evaluation,
        root: NodeId,
        mut grads: Vec<f64>,
    ) -> Result<GradStore, GraphError> {
        if eval.nodes != self.nodes.len() || eval.arena.len() != self.arena_len {
            return Err(GraphError::StaleEvaluation);
        }
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(GraphError::NonScalarRoot { node: root.idx(), shape });
        }
        grads.clear();
        grads.resize(self.arena_len, 0.0);
        grads[self.nodes[root.idx()].offset] = 1.0;

        for idx in (0..=root.idx()).rev() {
            let node = &self.nodes[idx];
            let size = node.rows * node.cols;
            let (gbefore, grest) = grads.split_at_mut(node.offset);
            let g = &grest[..size];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf { .. } | Op::Const { .. } => {}
                Op::Add(a, b) => {
                    {
                        let ga = self.grad_slice(gbefore, *a);
                        for (o, gi) in ga.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                    let gb = self.grad_slice(gbefore, *b);
                    for (o, gi) in gb.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.value(eval, *a);
                    let vb = self.value(eval, *b);
                    if va.len() == vb.len() {
                        {
                            let ga = self.grad_slice(gbefore, *a);
                            for ((o, gi), y) in ga.iter_mut().zip(g).zip(vb) {
                                *o += gi * y;
                            }
                        }
                        let gb = self.grad_slice(gbefore, *b);
                        for ((o, gi), x) in gb.iter_mut().zip(g).zip(va) {
                            *o += gi * x;
                        }
                    } else if va.len() == 1 {
                        let mut acc = 0.0;
                        for (gi, y) in g.iter().zip(vb) {
                            acc += gi * y;
                        }
                        self.grad_slice(gbefore, *a)[0] += acc;
                        let a0 = va[0];
                        let gb = self.grad_slice(gbefore, *b);
                        for (o, gi) in gb.iter_mut().zip(g) {
                            *o += gi * a0;
                        }
                    } else {
                        let b0 = vb[0];
                        {
                            let ga = self.grad_slice(gbefore, *a);
                            for (o, gi) in ga.iter_mut().zip(g) {
                                *o += gi * b0;
                            }
                        }
                        let mut acc = 0.0;
                        for (gi, x) in g.iter().zip(va) {
                            acc += gi * x;
                        }
                        self.grad_slice(gbefore, *b)[0] += acc;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    let va = self.value(eval, *a);
                    let vb = self.value(eval, *b);
                    if n == 1 {
                        // d_A += g (outer) b^T, d_b += A^T g
                        {
                            let ga = self.grad_slice(gbefore, *a);
                            for (row, gi) in ga.chunks_exact_mut(k).zip(g) {
                                for (o, y) in row.iter_mut().zip(vb) {
                                    *o += gi * y;
                                }
                            }
                        }
                        let gb = self.grad_slice(gbefore, *b);
                        for (row, gi) in va.chunks_exact(k).zip(g) {
                            for (o, x) in gb.iter_mut().zip(row) {
                                *o += gi * x;
                            }
                        }
                    } else {
                        {
                            let ga = self.grad_slice(gbefore, *a);
                            for i in 0..m {
                                for l in 0..k {
                                    let mut acc = 0.0;
                                    for j in 0..n {
                                        acc += g[i * n + j] * vb[l * n + j];
                                    }
                                    ga[i * k + l] += acc;
                                }
                            }
                        }
                        let gb = self.grad_slice(gbefore, *b);
                        for l in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += va[i * k + l] * g[i * n + j];
                                }
                                gb[l * n + j] += acc;
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = self.value_at(eval, node.offset, size);
                    let ga = self.grad_slice(gbefore, *a);
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
                Op::Log(a) => {
                    let va = self.value(eval, *a);
                    let ga = self.grad_slice(gbefore, *a);
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(va) {
                        *o += gi / x;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value_at(eval, node.offset, size);
                    let ga = self.grad_slice(gbefore, *a);
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
                Op::Relu(a) => {
                    let va = self.value(eval, *a);
                    let ga = self.grad_slice(gbefore, *a);
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::CosDiff(a, b) => {
                    let va = self.value(eval, *a);
                    let vb = self.value(eval, *b);
                    {
                        let ga = self.grad_slice(gbefore, *a);
                        for i in 0..size {
                            ga[i] -= g[i] * (va[i] - vb[i]).sin();
                        }
                    }
                    let gb = self.grad_slice(gbefore, *b);
                    for i in 0..size {
                        gb[i] += g[i] * (va[i] - vb[i]).sin();
                    }
                }
                Op::Softmax(a) => {
                    let y = self.value_at(eval, node.offset, size);
                    let mut dot = 0.0;
                    for i in 0..size {
                        dot += g[i] * y[i];
                    }
                    let ga = self.grad_slice(gbefore, *a);
                    for i in 0..size {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
                Op::Sum(a) => {
                    let ga = self.grad_slice(gbefore, *a);
                    let g0 = g[0];
                    for gi in ga.iter_mut() {
                        *gi += g0;
                    }
                }
                Op::Scale(a, k) => {
                    let ga = self.grad_slice(gbefore, *a);
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += k * gi;
                    }
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let plen = {
                            let (r, c) = self.shape(p);
                            r * c
                        };
                        let gp = self.grad_slice(gbefore, p);
                        for i in 0..plen {
                            gp[i] += g[at + i];
                        }
                        at += plen;
                    }
                }
                Op::Slice { src, start, len } => {
                    let gs = self.grad_slice(gbefore, *src);
                    for i in 0..*len {
                        gs[*start + i] += g[i];
                    }
                }
            }
        }
        Ok(GradStore { arena: grads, nodes: self.nodes.len() })
    }

    fn slice_of<'a>(&self, before: &'a [f64], id: NodeId) -> &'a [f64] {
        let n = &self.nodes[id.idx()];
        &before[n.offset..n.offset + n.rows * n.cols]
    }

    fn grad_slice<'a>(&self, gbefore: &'a mut [f64], id: NodeId) -> &'a mut [f64] {
        let n = &self.nodes[id.idx()];
        &mut gbefore[n.offset..n.offset + n.rows * n.cols]
    }

    fn value_at<'a>(&self, eval: &'a Evaluation, offset: usize, size: usize) -> &'a [f64] {
        &eval.arena[offset..offset + size]
    }

    /// Forward value of a node.
    pub fn value<'a>(&self, eval: &'a Evaluation, id: NodeId) -> &'a [f64] {
        let n = &self.nodes[id.idx()];
        &eval.arena[n.offset..n.offset + n.rows * n.cols]
    }

    pub fn scalar_value(&self, eval: &Evaluation, id: NodeId) -> f64 {
        self.value(eval, id)[0]
    }

    /// Gradient of the backward root with respect to a node.
    pub fn grad<'a>(&self, store: &'a GradStore, id: NodeId) -> &'a [f64] {
        assert_eq!(store.nodes, self.nodes.len(), "grad store from another graph");
        let n = &self.nodes[id.idx()];
        &store.arena[n.offset..n.offset + n.rows * n.cols]
    }

    pub fn leaf_grad<'a>(&self, store: &'a GradStore, name: &str) -> Option<&'a [f64]> {
        self.leaf_node(name).map(|id| self.grad(store, id))
    }

    /// True when any relu input changes sign between two evaluations. A
    /// finite-difference probe whose +h/-h evaluations straddle a relu kink
    /// measures a secant across the non-differentiable point, so checkers
    /// skip such coordinates.
    pub fn relu_crossing(&self, a: &Evaluation, b: &Evaluation) -> bool {
        for node in &self.nodes {
            if let Op::Relu(src) = node.op {
                let va = self.value(a, src);
                let vb = self.value(b, src);
                for i in 0..va.len() {
                    if (va[i] > 0.0) != (vb[i] > 0.0) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── finite-difference checking ──────────────────────────────────────

/// Relative error with an absolute floor: `|a - n| / max(|a|, |n|, 0.01)`,
/// so a 1e-4 threshold on this score allows absolute deviations up to 1e-6
/// when both gradients are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Worst-coordinate report from [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_leaf: String,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// True if any probe produced a non-finite loss value.
    pub non_finite: bool,
    /// Coordinates skipped because the probe crossed a relu kink.
    pub kink_skips: usize,
    pub per_leaf: Vec<(String, f64)>,
}

/// Compare analytic gradients of `root` against central differences
/// `(f(x+h) - f(x-h)) / 2h` with `h = 1e-4 * max(1, |x|)`, probing every
/// coordinate of every leaf.
pub fn finite_diff_check(
    graph: &Graph,
    binds: &Bindings,
    root: NodeId,
) -> Result<FiniteDiffReport, GraphError> {
    let eval = graph.forward(binds)?;
    let grads = graph.backward(&eval, root)?;

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_leaf: String::new(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        non_finite: false,
        kink_skips: 0,
        per_leaf: Vec::new(),
    };

    for (slot_idx, slot) in graph.leaves.iter().enumerate() {
        if slot.name.is_empty() {
            return Err(GraphError::AnonymousLeaf { slot: slot_idx });
        }
        let base: Value = match binds.get(&slot.name) {
            Some(v) => v.clone(),
            None => match &slot.value {
                Some(v) => (**v).clone(),
                None => return Err(GraphError::UnboundInput { name: slot.name.clone() }),
            },
        };
        let analytic = graph.leaf_grad(&grads, &slot.name).unwrap().to_vec();
        let mut leaf_worst = 0.0f64;
        for coord in 0..base.numel() {
            let x = base.data()[coord];
            let h = 1e-4 * x.abs().max(1.0);
            let probe = |delta: f64| -> Result<Evaluation, GraphError> {
                let mut v = base.clone();
                v.data_mut()[coord] = x + delta;
                let mut b = binds.clone();
                b.bind(&slot.name, v);
                graph.forward(&b)
            };
            let ep = probe(h)?;
            let em = probe(-h)?;
            let fp = graph.scalar_value(&ep, root);
            let fm = graph.scalar_value(&em, root);
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite = true;
                continue;
            }
            if graph.relu_crossing(&ep, &em) {
                report.kink_skips += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[coord], numeric);
            if err > leaf_worst {
                leaf_worst = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_leaf = slot.name.clone();
                report.worst_coord = coord;
                report.worst_analytic = analytic[coord];
                report.worst_numeric = numeric;
            }
        }
        report.per_leaf.push((slot.name.clone(), leaf_worst));
    }
    Ok(report)
}
