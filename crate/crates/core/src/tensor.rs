//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`]; `backward` replays them in reverse
//! creation order and accumulates adjoints. Only the op set needed by the
//! GRU/attention networks is provided: rank-1 and rank-2 tensors, no general
//! broadcasting (scalar-vs-tensor and equal-shape only).

use rand::Rng;

use crate::error::{Error, Result};

/// Plain (tape-free) tensor: shape plus row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`]. Ids are unique and topologically ordered
/// by creation within one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    SquaredL2(NodeId),
    /// Stored multiplier already folds in the 1/(1-rate) inverted-dropout scale.
    Dropout(NodeId, Vec<f64>),
    MaskedSoftmax(NodeId, Vec<f64>),
    WeightedSum { rows: Vec<NodeId>, weights: NodeId },
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    /// Negative log softmax probability of the given class index.
    Nll(NodeId, usize),
    Sum(NodeId),
    Scale(NodeId, f64),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Reverse-mode tape. Single-owner during recording; backward visits
/// operation records in strict reverse creation order.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// Inference-only tape: ops evaluate normally but backward is refused.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dim(format!(
                "leaf shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        let n = shape.iter().product();
        self.push(shape, vec![0.0; n], Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Accumulated gradient of `id`, populated by `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
    }

    // ── ops ──────────────────────────────────────────────────────────

    /// Matrix product. Supports [m,k]x[k,n] -> [m,n] and [m,k]x[k] -> [m].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n, vec_rhs) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, false),
            ([m, k], [k2]) if k == k2 => (*m, *k, 1usize, true),
            _ => {
                return Err(Error::Dim(format!(
                    "matmul: incompatible shapes {:?} x {:?}",
                    sa, sb
                )))
            }
        };
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        if vec_rhs {
            for i in 0..m {
                let row = &av[i * k..(i + 1) * k];
                let mut acc = 0.0;
                for (x, y) in row.iter().zip(bv.iter()) {
                    acc += x * y;
                }
                out[i] = acc;
            }
        } else {
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bx) in orow.iter_mut().zip(brow.iter()) {
                        *o += aip * bx;
                    }
                }
            }
        }
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        Ok(self.push(shape, out, Op::MatMul(a, b)))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let la: usize = sa.iter().product();
        let lb: usize = sb.iter().product();
        if sa == sb {
            Ok(sa.to_vec())
        } else if lb == 1 {
            Ok(sa.to_vec())
        } else if la == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Dim(format!(
                "{what}: incompatible shapes {:?} vs {:?}",
                sa, sb
            )))
        }
    }

    fn binary<FW>(&mut self, a: NodeId, b: NodeId, what: &str, f: FW, op: Op) -> Result<NodeId>
    where
        FW: Fn(f64, f64) -> f64,
    {
        let shape = self.binary_shapes(a, b, what)?;
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let n = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = if av.len() == 1 { av[0] } else { av[i] };
            let y = if bv.len() == 1 { bv[0] } else { bv[i] };
            out.push(f(x, y));
        }
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// Concatenates rank-1 tensors along axis 0.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if axis != 0 {
            return Err(Error::Dim(format!("concat: unsupported axis {axis}")));
        }
        if parts.is_empty() {
            return Err(Error::Dim("concat: empty part list".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Dim(format!(
                    "concat: rank-1 parts required, got {:?}",
                    self.shape(p)
                )));
            }
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec())))
    }

    /// Selects rows of a rank-2 table; output is [ids.len(), cols].
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        let [rows, cols] = shape.as_slice() else {
            return Err(Error::Dim(format!(
                "gather_rows: rank-2 table required, got {:?}",
                shape
            )));
        };
        let (rows, cols) = (*rows, *cols);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Data(format!(
                    "gather_rows: id {id} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&self.nodes[table.0].values[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(vec![ids.len(), cols], out, Op::GatherRows(table, ids.to_vec())))
    }

    /// Single embedding lookup as a rank-1 vector.
    pub fn gather_row(&mut self, table: NodeId, id: usize) -> Result<NodeId> {
        let g = self.gather_rows(table, &[id])?;
        let cols = self.shape(g)[1];
        self.nodes[g.0].shape = vec![cols];
        Ok(g)
    }

    /// Sum of squared entries, as a scalar.
    pub fn squared_l2(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].values.iter().map(|x| x * x).sum();
        self.push(vec![1], vec![s], Op::SquaredL2(a))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by 1/(1-rate); eval mode is identity.
    pub fn dropout<R: Rng>(
        &mut self,
        a: NodeId,
        rate: f64,
        rng: &mut R,
        train_mode: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train_mode || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mult: Vec<f64> = (0..self.nodes[a.0].values.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(mult.iter())
            .map(|(x, m)| x * m)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Dropout(a, mult)))
    }

    /// Softmax over unmasked positions; masked entries are exactly zero.
    /// Stabilized by max-subtraction over unmasked entries.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: &[f64]) -> Result<NodeId> {
        let v = &self.nodes[logits.0].values;
        if v.len() != mask.len() {
            return Err(Error::Dim(format!(
                "masked_softmax: logits len {} vs mask len {}",
                v.len(),
                mask.len()
            )));
        }
        let mut max = f64::NEG_INFINITY;
        for (x, m) in v.iter().zip(mask.iter()) {
            if *m != 0.0 && *x > max {
                max = *x;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Data("masked_softmax: all positions masked".into()));
        }
        let mut out = vec![0.0; v.len()];
        let mut denom = 0.0;
        for i in 0..v.len() {
            if mask[i] != 0.0 {
                out[i] = (v[i] - max).exp();
                denom += out[i];
            }
        }
        for o in &mut out {
            *o /= denom;
        }
        let shape = self.nodes[logits.0].shape.clone();
        Ok(self.push(shape, out, Op::MaskedSoftmax(logits, mask.to_vec())))
    }

    /// Weighted sum of equal-shape rank-1 rows: out = sum_j weights[j] * rows[j].
    pub fn weighted_sum(&mut self, rows: &[NodeId], weights: NodeId) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Dim("weighted_sum: no rows".into()));
        }
        let w = &self.nodes[weights.0].values;
        if w.len() != rows.len() {
            return Err(Error::Dim(format!(
                "weighted_sum: {} rows vs {} weights",
                rows.len(),
                w.len()
            )));
        }
        let d = self.nodes[rows[0].0].values.len();
        let mut out = vec![0.0; d];
        for (j, &r) in rows.iter().enumerate() {
            let rv = &self.nodes[r.0].values;
            if rv.len() != d {
                return Err(Error::Dim("weighted_sum: row shape mismatch".into()));
            }
            let wj = self.nodes[weights.0].values[j];
            for (o, x) in out.iter_mut().zip(rv.iter()) {
                *o += wj * x;
            }
        }
        Ok(self.push(vec![d], out, Op::WeightedSum { rows: rows.to_vec(), weights }))
    }

    /// Inner product of two equal-length rank-1 tensors, as a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        if av.len() != bv.len() {
            return Err(Error::Dim(format!(
                "dot: lengths {} vs {}",
                av.len(),
                bv.len()
            )));
        }
        let s: f64 = av.iter().zip(bv.iter()).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![1], vec![s], Op::Dot(a, b)))
    }

    /// Stacks scalar nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.nodes[p.0].values.len() != 1 {
                return Err(Error::Dim("stack_scalars: non-scalar part".into()));
            }
            out.push(self.nodes[p.0].values[0]);
        }
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Stack(parts.to_vec())))
    }

    /// Negative log-likelihood of class `target` under softmax(logits),
    /// computed via log-sum-exp.
    pub fn nll(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let v = &self.nodes[logits.0].values;
        if target >= v.len() {
            return Err(Error::Data(format!(
                "nll: target {target} out of range for {} classes",
                v.len()
            )));
        }
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v[target];
        Ok(self.push(vec![1], vec![loss], Op::Nll(logits, target)))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) into every node's grad, additively with
    /// any gradients already present.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::Config("backward on a non-recording tape".into()));
        }
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Dim("backward: loss must be scalar".into()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let sa = self.nodes[a.0].shape.clone();
                    let vec_rhs = self.nodes[b.0].shape.len() == 1;
                    let (m, k) = (sa[0], sa[1]);
                    let n = if vec_rhs { 1 } else { self.nodes[b.0].shape[1] };
                    let g = std::mem::take(&mut grads[i]);
                    // a.grad += g . b^T
                    {
                        let bv = &self.nodes[b.0].values;
                        let ga = &mut grads[a.0];
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += g[r * n + c] * bv[p * n + c];
                                }
                                ga[r * k + p] += acc;
                            }
                        }
                    }
                    // b.grad += a^T . g
                    {
                        let av = &self.nodes[a.0].values;
                        let gb = &mut grads[b.0];
                        for p in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += av[r * k + p] * g[r * n + c];
                                }
                                gb[p * n + c] += acc;
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg_b = matches!(self.nodes[i].op, Op::Sub(_, _));
                    let g = std::mem::take(&mut grads[i]);
                    accumulate_broadcast(&mut grads[a.0], &g, 1.0);
                    accumulate_broadcast(&mut grads[b.0], &g, if neg_b { -1.0 } else { 1.0 });
                    grads[i] = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut grads[i]);
                    {
                        let bv = &self.nodes[b.0].values;
                        let scaled: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, gi)| gi * if bv.len() == 1 { bv[0] } else { bv[idx] })
                            .collect();
                        accumulate_broadcast(&mut grads[a.0], &scaled, 1.0);
                    }
                    {
                        let av = &self.nodes[a.0].values;
                        let scaled: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(idx, gi)| gi * if av.len() == 1 { av[0] } else { av[idx] })
                            .collect();
                        accumulate_broadcast(&mut grads[b.0], &scaled, 1.0);
                    }
                    grads[i] = g;
                }
                Op::Tanh(a) => {
                    let g = std::mem::take(&mut grads[i]);
                    let y = &self.nodes[i].values;
                    let ga = &mut grads[a.0];
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] * (1.0 - y[idx] * y[idx]);
                    }
                    grads[i] = g;
                }
                Op::Sigmoid(a) => {
                    let g = std::mem::take(&mut grads[i]);
                    let y = &self.nodes[i].values;
                    let ga = &mut grads[a.0];
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] * y[idx] * (1.0 - y[idx]);
                    }
                    grads[i] = g;
                }
                Op::Scale(a, c) => {
                    let g = std::mem::take(&mut grads[i]);
                    let ga = &mut grads[a.0];
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] * c;
                    }
                    grads[i] = g;
                }
                Op::Sum(a) => {
                    let g0 = grads[i][0];
                    for ga in grads[a.0].iter_mut() {
                        *ga += g0;
                    }
                }
                Op::Concat(parts) => {
                    let g = std::mem::take(&mut grads[i]);
                    let mut off = 0;
                    for &p in &parts {
                        let n = self.nodes[p.0].values.len();
                        let gp = &mut grads[p.0];
                        for idx in 0..n {
                            gp[idx] += g[off + idx];
                        }
                        off += n;
                    }
                    grads[i] = g;
                }
                Op::GatherRows(table, ids) => {
                    let g = std::mem::take(&mut grads[i]);
                    let cols = self.nodes[table.0].shape[1];
                    let gt = &mut grads[table.0];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[r * cols + c];
                        }
                    }
                    grads[i] = g;
                }
                Op::SquaredL2(a) => {
                    let g0 = grads[i][0];
                    let av = &self.nodes[a.0].values;
                    let ga = &mut grads[a.0];
                    for idx in 0..av.len() {
                        ga[idx] += g0 * 2.0 * av[idx];
                    }
                }
                Op::Dropout(a, mult) => {
                    let g = std::mem::take(&mut grads[i]);
                    let ga = &mut grads[a.0];
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] * mult[idx];
                    }
                    grads[i] = g;
                }
                Op::MaskedSoftmax(a, mask) => {
                    let g = std::mem::take(&mut grads[i]);
                    let y = &self.nodes[i].values;
                    let gy: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                    let ga = &mut grads[a.0];
                    for idx in 0..g.len() {
                        if mask[idx] != 0.0 {
                            ga[idx] += y[idx] * (g[idx] - gy);
                        }
                    }
                    grads[i] = g;
                }
                Op::WeightedSum { rows, weights } => {
                    let g = std::mem::take(&mut grads[i]);
                    for (j, &r) in rows.iter().enumerate() {
                        let wj = self.nodes[weights.0].values[j];
                        {
                            let gr = &mut grads[r.0];
                            for idx in 0..g.len() {
                                gr[idx] += wj * g[idx];
                            }
                        }
                        let dotv: f64 = self.nodes[r.0]
                            .values
                            .iter()
                            .zip(g.iter())
                            .map(|(x, gi)| x * gi)
                            .sum();
                        grads[weights.0][j] += dotv;
                    }
                    grads[i] = g;
                }
                Op::Dot(a, b) => {
                    let g0 = grads[i][0];
                    {
                        let bv = self.nodes[b.0].values.clone();
                        let ga = &mut grads[a.0];
                        for idx in 0..bv.len() {
                            ga[idx] += g0 * bv[idx];
                        }
                    }
                    {
                        let av = self.nodes[a.0].values.clone();
                        let gb = &mut grads[b.0];
                        for idx in 0..av.len() {
                            gb[idx] += g0 * av[idx];
                        }
                    }
                }
                Op::Stack(parts) => {
                    let g = std::mem::take(&mut grads[i]);
                    for (idx, &p) in parts.iter().enumerate() {
                        grads[p.0][0] += g[idx];
                    }
                    grads[i] = g;
                }
                Op::Nll(a, target) => {
                    let g0 = grads[i][0];
                    let v = &self.nodes[a.0].values;
                    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = v.iter().map(|x| (x - max).exp()).sum();
                    let ga = &mut grads[a.0];
                    for idx in 0..v.len() {
                        let p = (v[idx] - max).exp() / denom;
                        let delta = if idx == target { 1.0 } else { 0.0 };
                        ga[idx] += g0 * (p - delta);
                    }
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Adds `scale * g` into `dst`, summing when `dst` is a broadcast scalar.
fn accumulate_broadcast(dst: &mut [f64], g: &[f64], scale: f64) {
    if dst.len() == g.len() {
        for (d, x) in dst.iter_mut().zip(g.iter()) {
            *d += scale * x;
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        dst[0] += scale * g.iter().sum::<f64>();
    }
}

// ── gradient checking ────────────────────────────────────────────────

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckWorst {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
    pub worst: Option<GradCheckWorst>,
    pub pass: bool,
}

/// Compares tape gradients of a scalar-valued function against central finite
/// differences at `points`. Relative error per coordinate is
/// |a - n| / max(1, |a|, |n|).
pub fn grad_check<F>(f: F, points: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Config("grad_check: step must be positive".into()));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf_tensor(t)).collect();
    let out = f(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf grad populated").to_vec())
        .collect();

    let value_at = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let ids: Vec<NodeId> = pts.iter().map(|p| t.leaf_tensor(p)).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.scalar_value(out))
    };

    let mut max_rel = 0.0f64;
    let mut per_input = vec![0.0f64; points.len()];
    let mut worst = None;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for c in 0..point.data.len() {
            let orig = point.data[c];
            work[pi].data[c] = orig + step;
            let fp = value_at(&work)?;
            work[pi].data[c] = orig - step;
            let fm = value_at(&work)?;
            work[pi].data[c] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi][c];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite value at input {pi} coordinate {c}"
                )));
            }
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > per_input[pi] {
                per_input[pi] = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = Some(GradCheckWorst {
                    input: pi,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_input,
        worst,
        pass: max_rel < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.leaf(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_hand() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.leaf(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.leaf(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let rep = grad_check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                Ok(t.sum(c))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn elementwise_values() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        let th = t.tanh(z);
        let sg = t.sigmoid(z);
        assert_eq!(t.scalar_value(th), 0.0);
        assert_eq!(t.scalar_value(sg), 0.5);
    }

    #[test]
    fn tanh_adjoint_matches_finite_differences() {
        let rep = grad_check(
            |t, ids| {
                let y = t.tanh(ids[0]);
                Ok(t.sum(y))
            },
            &[Tensor::scalar(0.7)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn sigmoid_mul_sub_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![5]);
        let y = rand_tensor(&mut rng, vec![5]);
        let rep = grad_check(
            |t, ids| {
                let s = t.sigmoid(ids[0]);
                let m = t.mul(s, ids[1])?;
                let d = t.sub(m, ids[0])?;
                Ok(t.sum(d))
            },
            &[x, y],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut t = Tape::new();
        let v = t.leaf(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.scalar(10.0);
        let a = t.add(v, s).unwrap();
        assert_eq!(t.values(a), &[11.0, 12.0, 13.0]);
        let m = t.mul(s, v).unwrap();
        assert_eq!(t.values(m), &[10.0, 20.0, 30.0]);
        let bad = t.leaf(vec![2], vec![0.0; 2]).unwrap();
        assert!(t.add(v, bad).is_err());
    }

    #[test]
    fn masked_softmax_uniform_and_masked() {
        let mut t = Tape::new();
        let l = t.leaf(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = t.masked_softmax(l, &[1.0, 1.0, 1.0]).unwrap();
        for v in t.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let l2 = t.leaf(vec![3], vec![5.0, 5.0, -100.0]).unwrap();
        let y2 = t.masked_softmax(l2, &[1.0, 1.0, 0.0]).unwrap();
        let v = t.values(y2);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn masked_softmax_all_masked_errors() {
        let mut t = Tape::new();
        let l = t.leaf(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(t.masked_softmax(l, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn masked_softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![7]);
        let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let w = rand_tensor(&mut rng, vec![7]);
        let rep = grad_check(
            |t, ids| {
                let y = t.masked_softmax(ids[0], &mask)?;
                let m = t.mul(y, ids[1])?;
                Ok(t.sum(m))
            },
            &[x, w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn squared_l2_value() {
        let mut t = Tape::new();
        let v = t.leaf(vec![2], vec![3.0, 4.0]).unwrap();
        let s = t.squared_l2(v);
        assert_eq!(t.scalar_value(s), 25.0);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = t.leaf(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = t.dropout(v, 0.0, &mut rng, true).unwrap();
        assert_eq!(d, v);
        let e = t.dropout(v, 0.5, &mut rng, false).unwrap();
        assert_eq!(e, v);
        assert!(t.dropout(v, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = t.leaf(vec![1000], vec![1.0; 1000]).unwrap();
        let d = t.dropout(v, 0.5, &mut rng, true).unwrap();
        for x in t.values(d) {
            assert!(*x == 0.0 || *x == 2.0);
        }
        let kept = t.values(d).iter().filter(|x| **x != 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept}");
    }

    #[test]
    fn gather_rows_order_and_grad() {
        let mut t = Tape::new();
        let table = t
            .leaf(vec![5, 2], (0..10).map(|x| x as f64).collect())
            .unwrap();
        let g = t.gather_rows(table, &[4, 0]).unwrap();
        assert_eq!(t.values(g), &[8.0, 9.0, 0.0, 1.0]);
        assert!(t.gather_rows(table, &[5]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tbl = rand_tensor(&mut rng, vec![5, 2]);
        let w = rand_tensor(&mut rng, vec![2]);
        let rep = grad_check(
            |t, ids| {
                let g = t.gather_rows(ids[0], &[4, 0])?;
                let s = t.squared_l2(g);
                let r4 = t.gather_row(ids[0], 4)?;
                let d = t.dot(r4, ids[1])?;
                t.add(s, d)
            },
            &[tbl, w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn concat_and_stack_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, vec![3]);
        let b = rand_tensor(&mut rng, vec![2]);
        let rep = grad_check(
            |t, ids| {
                let c = t.concat(&[ids[0], ids[1]], 0)?;
                let s1 = t.squared_l2(c);
                let d = t.dot(ids[0], ids[0])?;
                let st = t.stack_scalars(&[s1, d])?;
                Ok(t.sum(st))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn weighted_sum_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r0 = rand_tensor(&mut rng, vec![4]);
        let r1 = rand_tensor(&mut rng, vec![4]);
        let w = rand_tensor(&mut rng, vec![2]);
        let rep = grad_check(
            |t, ids| {
                let ws = t.weighted_sum(&[ids[0], ids[1]], ids[2])?;
                Ok(t.squared_l2(ws))
            },
            &[r0, r1, w],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn nll_grad_and_value() {
        let mut t = Tape::new();
        // uniform logits over V classes -> nll = ln V
        let l = t.leaf(vec![5], vec![0.0; 5]).unwrap();
        let loss = t.nll(l, 2).unwrap();
        assert!((t.scalar_value(loss) - 5.0f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = rand_tensor(&mut rng, vec![6]);
        let rep = grad_check(
            |t, ids| t.nll(ids[0], 3),
            &[logits],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_quadratic() {
        let rep = grad_check(
            |t, ids| Ok(t.squared_l2(ids[0])),
            &[Tensor::new(vec![2], vec![1.0, 2.0])],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(rep.pass, "max rel err {}", rep.max_rel_err);
        // analytic grad of ||x||^2 at [1,2] is [2,4]
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let l = t.squared_l2(x);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_check_constant_function() {
        let rep = grad_check(
            |t, ids| {
                let z = t.scalar(3.5);
                let _ = ids;
                Ok(z)
            },
            &[Tensor::new(vec![3], vec![1.0, 2.0, 3.0])],
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(rep.pass);
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn gradients_accumulate_additively() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let l = t.squared_l2(x);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_bitwise_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut t = Tape::new();
            let x = t.leaf_tensor(&rand_tensor(&mut rng, vec![6]));
            let w = t.leaf_tensor(&rand_tensor(&mut rng, vec![6]));
            let s = t.sigmoid(x);
            let m = t.mul(s, w).unwrap();
            let sm = t.masked_softmax(m, &[1.0; 6]).unwrap();
            let l = t.squared_l2(sm);
            t.backward(l).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut t = Tape::no_grad();
        let x = t.leaf(vec![1], vec![2.0]).unwrap();
        let l = t.squared_l2(x);
        assert!(t.backward(l).is_err());
    }
}
