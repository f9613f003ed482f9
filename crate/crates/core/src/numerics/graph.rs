use std::ops::Range;

use super::{dot, Matrix, NumericsError, Real};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Contiguous block of rows treated as one set by the segmented operations.
pub type Segment = Range<usize>;

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    SumSquares(NodeId),
    MeanRows(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    NormalizeRows(NodeId, Vec<T>),
    Cosine {
        a: NodeId,
        b: NodeId,
        norm_a: T,
        norm_b: T,
    },
    GatherRows(NodeId, Vec<usize>),
    BlendRows(NodeId, NodeId, Vec<bool>),
    Interleave(Vec<NodeId>),
    SegmentMean(NodeId, Vec<Segment>),
    SegmentAttention(Box<AttentionCache<T>>),
}

struct AttentionCache<T> {
    hidden: NodeId,
    key_w: NodeId,
    query_w: NodeId,
    segments: Vec<Segment>,
    keys: Matrix<T>,
    queries: Matrix<T>,
    probs: Vec<Matrix<T>>,
    scale: T,
}

struct Node<T> {
    value: Matrix<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A computation graph recorded in execution order.
///
/// Nodes are only ever appended, so a node's parents always precede it and a
/// single reverse sweep over the node list is a valid reverse topological
/// traversal. Fan-out is handled by summing adjoint contributions.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Matrix<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.get(0, 0)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Adjoint of `id` after [`Graph::backward`]; `None` when nothing flowed into it.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros of the node's shape.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix<T> {
        self.grad(id).cloned().unwrap_or_else(|| {
            let (r, c) = self.value(id).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, name: &'static str, value: Matrix<T>, parents: &[NodeId], op: Op<T>) -> Result<NodeId, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        self.push("matmul_nt", value, &[a, b], Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.value(a).transpose();
        self.push("transpose", value, &[a], Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId, NumericsError> {
        let value = self.value(a).scale(s);
        self.push("scale", value, &[a], Op::Scale(a, s))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push("sum", value, &[a], Op::Sum(a))
    }

    /// Sum of squared entries as a 1×1 node.
    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = Matrix::filled(1, 1, self.value(a).sum_squares());
        self.push("sum_squares", value, &[a], Op::SumSquares(a))
    }

    /// Arithmetic mean of the rows as a 1×cols node.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.value(a).mean_rows()?;
        self.push("mean_rows", value, &[a], Op::MeanRows(a))
    }

    /// Row-wise softmax with row-max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push("softmax_rows", value, &[a], Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax via the log-sum-exp shift.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push("log_softmax_rows", value, &[a], Op::LogSoftmaxRows(a))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm <= T::zero() {
                return Err(NumericsError::Degenerate {
                    op: "normalize_rows",
                });
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        self.push("normalize_rows", value, &[a], Op::NormalizeRows(a, norms))
    }

    /// Cosine similarity of two equally sized vectors (any shape, flattened).
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.data().len() != vb.data().len() || va.data().is_empty() {
            return Err(NumericsError::Shape {
                op: "cosine",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let norm_a = dot(va.data(), va.data()).sqrt();
        let norm_b = dot(vb.data(), vb.data()).sqrt();
        if norm_a <= T::zero() || norm_b <= T::zero() {
            return Err(NumericsError::Degenerate { op: "cosine" });
        }
        let c = dot(va.data(), vb.data()) / (norm_a * norm_b);
        let c = c.max(-T::one()).min(T::one());
        self.push(
            "cosine",
            Matrix::filled(1, 1, c),
            &[a, b],
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
        )
    }

    /// Stacks the listed rows of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, NumericsError> {
        let src = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.rows()) {
            return Err(NumericsError::Index {
                op: "gather_rows",
                index: bad,
                rows: src.rows(),
            });
        }
        let value = src.select_rows(indices);
        self.push("gather_rows", value, &[a], Op::GatherRows(a, indices.to_vec()))
    }

    /// Row `r` comes from `a` when `take_a[r]`, otherwise from `b`.
    pub fn blend_rows(&mut self, a: NodeId, b: NodeId, take_a: &[bool]) -> Result<NodeId, NumericsError> {
        self.same_shape("blend_rows", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if take_a.len() != va.rows() {
            return Err(NumericsError::Shape {
                op: "blend_rows",
                left: va.shape(),
                right: (take_a.len(), 1),
            });
        }
        let mut value = vb.clone();
        for (r, &pick) in take_a.iter().enumerate() {
            if pick {
                value.row_mut(r).copy_from_slice(va.row(r));
            }
        }
        self.push("blend_rows", value, &[a, b], Op::BlendRows(a, b, take_a.to_vec()))
    }

    /// Interleaves equally shaped parts: output row `i·m + j` is row `i` of part `j`.
    pub fn interleave_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = *parts.first().ok_or(NumericsError::Empty {
            op: "interleave_rows",
        })?;
        for &p in &parts[1..] {
            self.same_shape("interleave_rows", first, p)?;
        }
        let (rows, cols) = self.value(first).shape();
        let m = parts.len();
        let mut value = Matrix::zeros(rows * m, cols);
        for (j, &p) in parts.iter().enumerate() {
            let src = self.value(p);
            for i in 0..rows {
                value.row_mut(i * m + j).copy_from_slice(src.row(i));
            }
        }
        self.push("interleave_rows", value, parts, Op::Interleave(parts.to_vec()))
    }

    fn check_segments(&self, op: &'static str, rows: usize, segments: &[Segment]) -> Result<(), NumericsError> {
        let mut next = 0;
        for seg in segments {
            if seg.start != next || seg.end <= seg.start {
                return Err(NumericsError::Empty { op });
            }
            next = seg.end;
        }
        if next != rows {
            return Err(NumericsError::Shape {
                op,
                left: (rows, 0),
                right: (next, 0),
            });
        }
        Ok(())
    }

    /// Mean of each segment; output has one row per segment.
    ///
    /// Segments must tile the rows of `a` in order and be nonempty.
    pub fn segment_mean(&mut self, a: NodeId, segments: &[Segment]) -> Result<NodeId, NumericsError> {
        let src = self.value(a);
        self.check_segments("segment_mean", src.rows(), segments)?;
        let mut value = Matrix::zeros(segments.len(), src.cols());
        for (s, seg) in segments.iter().enumerate() {
            let out = value.row_mut(s);
            for r in seg.clone() {
                for (o, &v) in out.iter_mut().zip(src.row(r)) {
                    *o = *o + v;
                }
            }
            let n = T::from_usize(seg.len()).expect("segment length fits");
            for o in out.iter_mut() {
                *o = *o / n;
            }
        }
        self.push("segment_mean", value, &[a], Op::SegmentMean(a, segments.to_vec()))
    }

    /// Key/query self-attention applied independently within each segment.
    ///
    /// For a segment with rows `H`: `A = (H·W_K)(H·W_Q)ᵀ / √d`, output
    /// `softmax_rows(A)·H`, where `d` is the key width. There is no value
    /// projection. Segments must tile the rows of `hidden`.
    pub fn segment_attention(
        &mut self,
        hidden: NodeId,
        key_w: NodeId,
        query_w: NodeId,
        segments: &[Segment],
    ) -> Result<NodeId, NumericsError> {
        self.same_shape("segment_attention", key_w, query_w)?;
        let h = self.value(hidden);
        self.check_segments("segment_attention", h.rows(), segments)?;
        let keys = h.matmul(self.value(key_w))?;
        let queries = h.matmul(self.value(query_w))?;
        let width = T::from_usize(keys.cols()).expect("width fits");
        let scale = T::one() / width.sqrt();
        let mut value = Matrix::zeros(h.rows(), h.cols());
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let n = seg.len();
            let mut p = Matrix::zeros(n, n);
            for i in 0..n {
                let k = keys.row(seg.start + i);
                let row = p.row_mut(i);
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = dot(k, queries.row(seg.start + j)) * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                let out = value.row_mut(seg.start + i);
                for j in 0..n {
                    let w = p.get(i, j);
                    for (o, &v) in out.iter_mut().zip(h.row(seg.start + j)) {
                        *o = *o + w * v;
                    }
                }
            }
            probs.push(p);
        }
        let cache = AttentionCache {
            hidden,
            key_w,
            query_w,
            segments: segments.to_vec(),
            keys,
            queries,
            probs,
            scale,
        };
        self.push(
            "segment_attention",
            value,
            &[hidden, key_w, query_w],
            Op::SegmentAttention(Box::new(cache)),
        )
    }

    /// Populates adjoints of every node reachable from the scalar `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NotScalar { shape });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Matrix::filled(1, 1, T::one()));

        let Graph { nodes, grads, .. } = self;
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, contribution) in local_backward(nodes, node, &g)? {
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn local_backward<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Matrix<T>) -> Result<Vec<(NodeId, Matrix<T>)>, NumericsError> {
    let val = |id: NodeId| &nodes[id.0].value;
    let wants = |id: NodeId| nodes[id.0].requires_grad;
    let mut out = Vec::with_capacity(3);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                out.push((*a, g.matmul_nt(val(*b))?));
            }
            if wants(*b) {
                out.push((*b, val(*a).matmul_tn(g)?));
            }
        }
        Op::MatMulNt(a, b) => {
            if wants(*a) {
                out.push((*a, g.matmul(val(*b))?));
            }
            if wants(*b) {
                out.push((*b, g.matmul_tn(val(*a))?));
            }
        }
        Op::Transpose(a) => out.push((*a, g.transpose())),
        Op::Add(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.map(|v| -v)));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
            }
            if wants(*b) {
                out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
            }
        }
        Op::Scale(a, s) => out.push((*a, g.scale(*s))),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            out.push((*a, Matrix::filled(r, c, g.get(0, 0))));
        }
        Op::SumSquares(a) => {
            let two_g = T::lit(2.0) * g.get(0, 0);
            out.push((*a, val(*a).scale(two_g)));
        }
        Op::MeanRows(a) => {
            let (r, c) = val(*a).shape();
            let n = T::from_usize(r).expect("row count fits");
            out.push((*a, Matrix::from_fn(r, c, |_, j| g.get(0, j) / n)));
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let s = dot(gr, yr);
                for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - s);
                }
            }
            out.push((*a, ga));
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let mut ga = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let s = gr.iter().fold(T::zero(), |acc, &v| acc + v);
                for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * s;
                }
            }
            out.push((*a, ga));
        }
        Op::NormalizeRows(a, norms) => {
            let y = &node.value;
            let mut ga = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let s = dot(gr, yr);
                for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = (gv - yv * s) / norms[r];
                }
            }
            out.push((*a, ga));
        }
        Op::Cosine {
            a,
            b,
            norm_a,
            norm_b,
        } => {
            let c = node.value.get(0, 0);
            let g0 = g.get(0, 0);
            let (va, vb) = (val(*a), val(*b));
            let denom = *norm_a * *norm_b;
            let grad_for = |x: &Matrix<T>, y: &Matrix<T>, norm_x: T| {
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&xv, &yv)| g0 * (yv / denom - c * xv / (norm_x * norm_x)))
                    .collect();
                Matrix::from_vec(x.rows(), x.cols(), data)
            };
            if wants(*a) {
                out.push((*a, grad_for(va, vb, *norm_a)?));
            }
            if wants(*b) {
                out.push((*b, grad_for(vb, va, *norm_b)?));
            }
        }
        Op::GatherRows(a, indices) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for (k, &i) in indices.iter().enumerate() {
                for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o = *o + v;
                }
            }
            out.push((*a, ga));
        }
        Op::BlendRows(a, b, take_a) => {
            let (r, c) = g.shape();
            let mut ga = Matrix::zeros(r, c);
            let mut gb = Matrix::zeros(r, c);
            for (i, &pick) in take_a.iter().enumerate() {
                let dst = if pick { &mut ga } else { &mut gb };
                dst.row_mut(i).copy_from_slice(g.row(i));
            }
            out.push((*a, ga));
            out.push((*b, gb));
        }
        Op::Interleave(parts) => {
            let m = parts.len();
            let rows = g.rows() / m;
            for (j, &p) in parts.iter().enumerate() {
                if !wants(p) {
                    continue;
                }
                let mut gp = Matrix::zeros(rows, g.cols());
                for i in 0..rows {
                    gp.row_mut(i).copy_from_slice(g.row(i * m + j));
                }
                out.push((p, gp));
            }
        }
        Op::SegmentMean(a, segments) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for (s, seg) in segments.iter().enumerate() {
                let n = T::from_usize(seg.len()).expect("segment length fits");
                for row in seg.clone() {
                    for (o, &v) in ga.row_mut(row).iter_mut().zip(g.row(s)) {
                        *o = v / n;
                    }
                }
            }
            out.push((*a, ga));
        }
        Op::SegmentAttention(cache) => attention_backward(nodes, cache, g, &mut out)?,
    }
    Ok(out)
}

fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    cache: &AttentionCache<T>,
    g: &Matrix<T>,
    out: &mut Vec<(NodeId, Matrix<T>)>,
) -> Result<(), NumericsError> {
    let h = &nodes[cache.hidden.0].value;
    let (keys, queries) = (&cache.keys, &cache.queries);
    let width = keys.cols();
    let mut d_hidden = Matrix::zeros(h.rows(), h.cols());
    let mut d_keys = Matrix::zeros(h.rows(), width);
    let mut d_queries = Matrix::zeros(h.rows(), width);

    for (seg, p) in cache.segments.iter().zip(&cache.probs) {
        let (start, n) = (seg.start, seg.len());
        let mut d_scores = Matrix::zeros(n, n);
        for i in 0..n {
            let gi = g.row(start + i);
            let mut d_p = vec![T::zero(); n];
            for (j, dp) in d_p.iter_mut().enumerate() {
                *dp = dot(gi, h.row(start + j));
                let w = p.get(i, j);
                for (o, &v) in d_hidden.row_mut(start + j).iter_mut().zip(gi) {
                    *o = *o + w * v;
                }
            }
            let s = dot(&d_p, p.row(i));
            for (j, &dp) in d_p.iter().enumerate() {
                d_scores.set(i, j, p.get(i, j) * (dp - s) * cache.scale);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let ds = d_scores.get(i, j);
                for (o, &q) in d_keys.row_mut(start + i).iter_mut().zip(queries.row(start + j)) {
                    *o = *o + ds * q;
                }
                for (o, &k) in d_queries.row_mut(start + j).iter_mut().zip(keys.row(start + i)) {
                    *o = *o + ds * k;
                }
            }
        }
    }

    let key_w = &nodes[cache.key_w.0];
    let query_w = &nodes[cache.query_w.0];
    if key_w.requires_grad {
        out.push((cache.key_w, h.matmul_tn(&d_keys)?));
    }
    if query_w.requires_grad {
        out.push((cache.query_w, h.matmul_tn(&d_queries)?));
    }
    if nodes[cache.hidden.0].requires_grad {
        d_hidden.add_assign(&d_keys.matmul_nt(&key_w.value)?);
        d_hidden.add_assign(&d_queries.matmul_nt(&query_w.value)?);
        out.push((cache.hidden, d_hidden));
    }
    Ok(())
}
