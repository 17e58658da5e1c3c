//! Tape-based computation graph. Nodes are appended in topological order
//! (inputs always precede outputs), so backward is a single reverse sweep.

use super::{Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Gather rows of `table` at `ids`: (V x D) -> (T x D).
    LookupRows { table: NodeId, ids: Vec<u32> },
    /// Stack T equal-length vectors into a (T x D) matrix.
    StackRows { rows: Vec<NodeId> },
    /// Extract row `row` of a matrix as a vector.
    SliceRow { m: NodeId, row: usize },
    /// (R x C) * (C) -> (R).
    MatVec { m: NodeId, v: NodeId },
    /// (M x K) * (K x N) -> (M x N).
    MatMul { a: NodeId, b: NodeId },
    /// Sliding windows over rows: (P x K) -> (P-w+1 x w*K).
    Unfold { x: NodeId, window: usize },
    /// Add a length-C vector to every row of an (R x C) matrix.
    AddRowBroadcast { m: NodeId, v: NodeId },
    /// Elementwise sum of same-shape nodes.
    AddN { items: Vec<NodeId> },
    /// Elementwise product of two same-shape nodes.
    Mul { a: NodeId, b: NodeId },
    /// Multiply by a compile-time constant.
    ScaleConst { x: NodeId, k: f32 },
    /// Multiply a tensor by a scalar node (shape [1]).
    ScaleBy { s: NodeId, x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: f32 },
    /// Contiguous range of a vector.
    Slice { x: NodeId, start: usize, len: usize },
    /// Concatenate vectors.
    Concat { items: Vec<NodeId> },
    /// Softmax over the final axis (vector, or each row of a matrix).
    Softmax { x: NodeId },
    /// Log-softmax over the final axis, max-subtracted.
    LogSoftmax { x: NodeId },
    /// log(mean over rows of exp(x))): (J x Y) -> (Y), computed as
    /// column-wise log-sum-exp minus log J.
    LogMeanExpRows { x: NodeId },
    /// Sum of all entries -> scalar.
    SumAll { x: NodeId },
    /// Single entry of a vector -> scalar.
    Pick { x: NodeId, index: usize },
    /// Elementwise multiply by a fixed mask (inverted-dropout scaling baked in).
    Dropout { x: NodeId, mask: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f32>,
    op: Op,
    constant: bool,
}

/// A single-use computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f32>, op: Op, constant: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            constant,
        });
        self.nodes.len() - 1
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant_slice(&mut self, shape: &[usize], data: &[f32]) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf, true)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; n], Op::Leaf, true)
    }

    /// Trainable leaf; backward will fill its gradient buffer.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    fn want_rank(&self, op: &'static str, id: NodeId, rank: usize) -> Result<(), TensorError> {
        if self.nodes[id].shape.len() != rank {
            return Err(TensorError::BadRank {
                op,
                expected: rank,
                shape: self.nodes[id].shape.clone(),
            });
        }
        Ok(())
    }

    fn want_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn lookup_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        self.want_rank("lookup_rows", table, 2)?;
        let (v, d) = (self.nodes[table].shape[0], self.nodes[table].shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let r = id as usize;
            if r >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "lookup_rows",
                    index: r,
                    shape: self.nodes[table].shape.clone(),
                });
            }
            out.extend_from_slice(&self.nodes[table].values[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::LookupRows {
                table,
                ids: ids.to_vec(),
            },
            false,
        ))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        self.want_rank("stack_rows", rows[0], 1)?;
        let d = self.nodes[rows[0]].shape[0];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            self.want_same_shape("stack_rows", rows[0], r)?;
            out.extend_from_slice(&self.nodes[r].values);
        }
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::StackRows {
                rows: rows.to_vec(),
            },
            false,
        ))
    }

    pub fn slice_row(&mut self, m: NodeId, row: usize) -> Result<NodeId, TensorError> {
        self.want_rank("slice_row", m, 2)?;
        let (r, c) = (self.nodes[m].shape[0], self.nodes[m].shape[1]);
        if row >= r {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_row",
                index: row,
                shape: self.nodes[m].shape.clone(),
            });
        }
        let vals = self.nodes[m].values[row * c..(row + 1) * c].to_vec();
        Ok(self.push(vec![c], vals, Op::SliceRow { m, row }, false))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("matvec", m, 2)?;
        self.want_rank("matvec", v, 1)?;
        let (r, c) = (self.nodes[m].shape[0], self.nodes[m].shape[1]);
        if c != self.nodes[v].shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.nodes[m].shape.clone(),
                rhs: self.nodes[v].shape.clone(),
            });
        }
        let mv = &self.nodes[m].values;
        let vv = &self.nodes[v].values;
        let mut out = vec![0.0f32; r];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &mv[i * c..(i + 1) * c];
            *o = row.iter().zip(vv.iter()).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(vec![r], out, Op::MatVec { m, v }, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("matmul", a, 2)?;
        self.want_rank("matmul", b, 2)?;
        let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
        let (k2, n) = (self.nodes[b].shape[0], self.nodes[b].shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let av = &self.nodes[a].values;
        let bv = &self.nodes[b].values;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aik) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * bpj;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, false))
    }

    pub fn unfold(&mut self, x: NodeId, window: usize) -> Result<NodeId, TensorError> {
        self.want_rank("unfold", x, 2)?;
        let (p, k) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        if window == 0 || window > p {
            return Err(TensorError::IndexOutOfBounds {
                op: "unfold",
                index: window,
                shape: self.nodes[x].shape.clone(),
            });
        }
        let rows = p - window + 1;
        let xv = &self.nodes[x].values;
        let mut out = Vec::with_capacity(rows * window * k);
        for j in 0..rows {
            out.extend_from_slice(&xv[j * k..(j + window) * k]);
        }
        Ok(self.push(vec![rows, window * k], out, Op::Unfold { x, window }, false))
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("add_row_broadcast", m, 2)?;
        self.want_rank("add_row_broadcast", v, 1)?;
        let (r, c) = (self.nodes[m].shape[0], self.nodes[m].shape[1]);
        if c != self.nodes[v].shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[m].shape.clone(),
                rhs: self.nodes[v].shape.clone(),
            });
        }
        let vv = &self.nodes[v].values;
        let mut out = self.nodes[m].values.clone();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(vv.iter()) {
                *o += b;
            }
        }
        Ok(self.push(vec![r, c], out, Op::AddRowBroadcast { m, v }, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.add_n(&[a, b])
    }

    pub fn add_n(&mut self, items: &[NodeId]) -> Result<NodeId, TensorError> {
        if items.is_empty() {
            return Err(TensorError::EmptyInput { op: "add_n" });
        }
        for &it in &items[1..] {
            self.want_same_shape("add_n", items[0], it)?;
        }
        let mut out = self.nodes[items[0]].values.clone();
        for &it in &items[1..] {
            for (o, &v) in out.iter_mut().zip(self.nodes[it].values.iter()) {
                *o += v;
            }
        }
        Ok(self.push(
            self.nodes[items[0]].shape.clone(),
            out,
            Op::AddN {
                items: items.to_vec(),
            },
            false,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.want_same_shape("mul", a, b)?;
        let out = self.nodes[a]
            .values
            .iter()
            .zip(self.nodes[b].values.iter())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::Mul { a, b }, false))
    }

    pub fn scale(&mut self, x: NodeId, k: f32) -> NodeId {
        let out = self.nodes[x].values.iter().map(|v| v * k).collect();
        self.push(
            self.nodes[x].shape.clone(),
            out,
            Op::ScaleConst { x, k },
            false,
        )
    }

    pub fn scale_by(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[s].values.len() != 1 {
            return Err(TensorError::BadRank {
                op: "scale_by",
                expected: 1,
                shape: self.nodes[s].shape.clone(),
            });
        }
        let sv = self.nodes[s].values[0];
        let out = self.nodes[x].values.iter().map(|v| v * sv).collect();
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::ScaleBy { s, x }, false))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].values.iter().map(|&v| sigmoid(v)).collect();
        self.push(self.nodes[x].shape.clone(), out, Op::Sigmoid { x }, false)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].values.iter().map(|v| v.tanh()).collect();
        self.push(self.nodes[x].shape.clone(), out, Op::Tanh { x }, false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].values.iter().map(|v| v.max(0.0)).collect();
        self.push(self.nodes[x].shape.clone(), out, Op::Relu { x }, false)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let out = self.nodes[x]
            .values
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        self.push(
            self.nodes[x].shape.clone(),
            out,
            Op::LeakyRelu { x, slope },
            false,
        )
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        self.want_rank("slice", x, 1)?;
        let n = self.nodes[x].shape[0];
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                shape: self.nodes[x].shape.clone(),
            });
        }
        let vals = self.nodes[x].values[start..start + len].to_vec();
        Ok(self.push(vec![len], vals, Op::Slice { x, start, len }, false))
    }

    pub fn concat(&mut self, items: &[NodeId]) -> Result<NodeId, TensorError> {
        if items.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let mut out = Vec::new();
        for &it in items {
            self.want_rank("concat", it, 1)?;
            out.extend_from_slice(&self.nodes[it].values);
        }
        let n = out.len();
        Ok(self.push(
            vec![n],
            out,
            Op::Concat {
                items: items.to_vec(),
            },
            false,
        ))
    }

    fn rows_cols(&self, op: &'static str, x: NodeId) -> Result<(usize, usize), TensorError> {
        match self.nodes[x].shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rows_cols("softmax", x)?;
        let mut out = self.nodes[x].values.clone();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::Softmax { x }, false))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.rows_cols("log_softmax", x)?;
        let mut out = self.nodes[x].values.clone();
        for r in 0..rows {
            log_softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            self.nodes[x].shape.clone(),
            out,
            Op::LogSoftmax { x },
            false,
        ))
    }

    pub fn log_mean_exp_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.want_rank("log_mean_exp_rows", x, 2)?;
        let (j, y) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
        let xv = &self.nodes[x].values;
        let mut out = vec![0.0f32; y];
        for (c, o) in out.iter_mut().enumerate() {
            let mut mx = f32::NEG_INFINITY;
            for r in 0..j {
                mx = mx.max(xv[r * y + c]);
            }
            let mut s = 0.0f32;
            for r in 0..j {
                s += (xv[r * y + c] - mx).exp();
            }
            *o = mx + s.ln() - (j as f32).ln();
        }
        Ok(self.push(vec![y], out, Op::LogMeanExpRows { x }, false))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.nodes[x].values.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { x }, false)
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId, TensorError> {
        self.want_rank("pick", x, 1)?;
        if index >= self.nodes[x].shape[0] {
            return Err(TensorError::IndexOutOfBounds {
                op: "pick",
                index,
                shape: self.nodes[x].shape.clone(),
            });
        }
        let v = self.nodes[x].values[index];
        Ok(self.push(vec![1], vec![v], Op::Pick { x, index }, false))
    }

    /// Elementwise multiply by `mask`. Callers bake the inverted-dropout
    /// `1/keep` scaling into the mask so eval-time passes need no rescaling.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f32>) -> Result<NodeId, TensorError> {
        if mask.len() != self.nodes[x].values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: self.nodes[x].shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out = self.nodes[x]
            .values
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::Dropout { x, mask }, false))
    }

    /// Negative log-likelihood of one class under a log-probability vector.
    pub fn nll(&mut self, log_probs: NodeId, class: usize) -> Result<NodeId, TensorError> {
        let p = self.pick(log_probs, class)?;
        Ok(self.scale(p, -1.0))
    }

    /// Fill gradient buffers for every non-constant node reachable from
    /// `loss`. Gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: NodeId, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        // Accumulate `f(dst_index)` into the gradient of `dst`, skipping
        // constants so they never allocate a buffer.
        macro_rules! acc {
            ($dst:expr, $n:expr, |$k:ident| $val:expr) => {{
                let dst: NodeId = $dst;
                if !self.nodes[dst].constant {
                    let buf =
                        grads[dst].get_or_insert_with(|| vec![0.0; self.nodes[dst].values.len()]);
                    debug_assert_eq!(buf.len(), $n);
                    for $k in 0..$n {
                        buf[$k] += $val;
                    }
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::LookupRows { table, ids } => {
                if !self.nodes[*table].constant {
                    let d = self.nodes[*table].shape[1];
                    let buf = grads[*table]
                        .get_or_insert_with(|| vec![0.0; self.nodes[*table].values.len()]);
                    for (t, &id) in ids.iter().enumerate() {
                        let r = id as usize;
                        for k in 0..d {
                            buf[r * d + k] += g[t * d + k];
                        }
                    }
                }
            }
            Op::StackRows { rows } => {
                let d = self.nodes[rows[0]].values.len();
                for (t, &r) in rows.iter().enumerate() {
                    acc!(r, d, |k| g[t * d + k]);
                }
            }
            Op::SliceRow { m, row } => {
                let c = self.nodes[*m].shape[1];
                if !self.nodes[*m].constant {
                    let buf =
                        grads[*m].get_or_insert_with(|| vec![0.0; self.nodes[*m].values.len()]);
                    for k in 0..c {
                        buf[row * c + k] += g[k];
                    }
                }
            }
            Op::MatVec { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                let mv = &self.nodes[*m].values;
                let vv = &self.nodes[*v].values;
                acc!(*m, r * c, |k| g[k / c] * vv[k % c]);
                if !self.nodes[*v].constant {
                    let buf =
                        grads[*v].get_or_insert_with(|| vec![0.0; self.nodes[*v].values.len()]);
                    for i in 0..r {
                        let gi = g[i];
                        let row = &mv[i * c..(i + 1) * c];
                        for (b, &m_ik) in buf.iter_mut().zip(row.iter()) {
                            *b += gi * m_ik;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                if !self.nodes[*a].constant {
                    let buf =
                        grads[*a].get_or_insert_with(|| vec![0.0; self.nodes[*a].values.len()]);
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &mut buf[i * k..(i + 1) * k];
                        for (p, da) in arow.iter_mut().enumerate() {
                            let brow = &bv[p * n..(p + 1) * n];
                            *da += grow
                                .iter()
                                .zip(brow.iter())
                                .map(|(x, y)| x * y)
                                .sum::<f32>();
                        }
                    }
                }
                if !self.nodes[*b].constant {
                    let buf =
                        grads[*b].get_or_insert_with(|| vec![0.0; self.nodes[*b].values.len()]);
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (p, &aip) in arow.iter().enumerate() {
                            let brow = &mut buf[p * n..(p + 1) * n];
                            for (db, &gij) in brow.iter_mut().zip(grow.iter()) {
                                *db += aip * gij;
                            }
                        }
                    }
                }
            }
            Op::Unfold { x, window } => {
                let k = self.nodes[*x].shape[1];
                let rows = node.shape[0];
                if !self.nodes[*x].constant {
                    let buf =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].values.len()]);
                    let w = window * k;
                    for j in 0..rows {
                        for (b, &gv) in buf[j * k..j * k + w].iter_mut().zip(&g[j * w..(j + 1) * w])
                        {
                            *b += gv;
                        }
                    }
                }
            }
            Op::AddRowBroadcast { m, v } => {
                let (r, c) = (self.nodes[*m].shape[0], self.nodes[*m].shape[1]);
                acc!(*m, r * c, |k| g[k]);
                if !self.nodes[*v].constant {
                    let buf =
                        grads[*v].get_or_insert_with(|| vec![0.0; self.nodes[*v].values.len()]);
                    for i in 0..r {
                        for (b, &gv) in buf.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *b += gv;
                        }
                    }
                }
            }
            Op::AddN { items } => {
                let n = g.len();
                for &it in items {
                    acc!(it, n, |k| g[k]);
                }
            }
            Op::Mul { a, b } => {
                let n = g.len();
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                acc!(*a, n, |k| g[k] * bv[k]);
                acc!(*b, n, |k| g[k] * av[k]);
            }
            Op::ScaleConst { x, k: c } => {
                let n = g.len();
                let c = *c;
                acc!(*x, n, |k| g[k] * c);
            }
            Op::ScaleBy { s, x } => {
                let n = g.len();
                let sv = self.nodes[*s].values[0];
                let xv = &self.nodes[*x].values;
                acc!(*x, n, |k| g[k] * sv);
                if !self.nodes[*s].constant {
                    let buf = grads[*s].get_or_insert_with(|| vec![0.0; 1]);
                    buf[0] += g
                        .iter()
                        .zip(xv.iter())
                        .map(|(gv, x)| gv * x)
                        .sum::<f32>();
                }
            }
            Op::Sigmoid { x } => {
                let n = g.len();
                let yv = &node.values;
                acc!(*x, n, |k| g[k] * yv[k] * (1.0 - yv[k]));
            }
            Op::Tanh { x } => {
                let n = g.len();
                let yv = &node.values;
                acc!(*x, n, |k| g[k] * (1.0 - yv[k] * yv[k]));
            }
            Op::Relu { x } => {
                let n = g.len();
                let xv = &self.nodes[*x].values;
                acc!(*x, n, |k| if xv[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::LeakyRelu { x, slope } => {
                let n = g.len();
                let s = *slope;
                let xv = &self.nodes[*x].values;
                acc!(*x, n, |k| if xv[k] >= 0.0 { g[k] } else { g[k] * s });
            }
            Op::Slice { x, start, len } => {
                if !self.nodes[*x].constant {
                    let buf =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].values.len()]);
                    for k in 0..*len {
                        buf[start + k] += g[k];
                    }
                }
            }
            Op::Concat { items } => {
                let mut off = 0;
                for &it in items {
                    let n = self.nodes[it].values.len();
                    acc!(it, n, |k| g[off + k]);
                    off += n;
                }
            }
            Op::Softmax { x } => {
                let (rows, cols) = self.rows_cols("softmax", *x).expect("checked at build");
                if !self.nodes[*x].constant {
                    let buf =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].values.len()]);
                    let yv = &node.values;
                    for r in 0..rows {
                        let y = &yv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f32 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for k in 0..cols {
                            buf[r * cols + k] += y[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let (rows, cols) = self.rows_cols("log_softmax", *x).expect("checked at build");
                if !self.nodes[*x].constant {
                    let buf =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].values.len()]);
                    let yv = &node.values;
                    for r in 0..rows {
                        let y = &yv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f32 = gr.iter().sum();
                        for k in 0..cols {
                            buf[r * cols + k] += gr[k] - y[k].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogMeanExpRows { x } => {
                let (j, y) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                if !self.nodes[*x].constant {
                    let xv = &self.nodes[*x].values;
                    let out = &node.values;
                    let buf =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].values.len()]);
                    let logj = (j as f32).ln();
                    for c in 0..y {
                        let lse = out[c] + logj;
                        for r in 0..j {
                            buf[r * y + c] += g[c] * (xv[r * y + c] - lse).exp();
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                let n = self.nodes[*x].values.len();
                let gv = g[0];
                acc!(*x, n, |_k| gv);
            }
            Op::Pick { x, index } => {
                if !self.nodes[*x].constant {
                    let buf =
                        grads[*x].get_or_insert_with(|| vec![0.0; self.nodes[*x].values.len()]);
                    buf[*index] += g[0];
                }
            }
            Op::Dropout { x, mask } => {
                let n = g.len();
                acc!(*x, n, |k| g[k] * mask[k]);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f32]) {
    let mx = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn log_softmax_in_place(v: &mut [f32]) {
    let mx = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f32;
    for x in v.iter() {
        s += (*x - mx).exp();
    }
    let lse = mx + s.ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}
