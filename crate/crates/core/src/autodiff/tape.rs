//! Wengert-list reverse-mode differentiation over dense tensors.
//!
//! Each forward op appends a node holding its output value; `backward` walks
//! the list in reverse, applying hand-written vector-Jacobian products. All
//! reductions run in a fixed sequential order, so identical inputs give
//! bitwise identical outputs and gradients.

use super::tensor::{Scalar, Tensor};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type AdResult<T> = Result<T, AdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf,
    /// [n,k] x [k,m] -> [n,m]
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// [n,d] + [d] broadcast over rows
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [n,d] * [d] broadcast over rows
    MulRowVec(NodeId, NodeId),
    Scale(NodeId, F),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Rc<Vec<usize>>),
    ScatterSumRows(NodeId, Rc<Vec<usize>>),
    /// Fused gather+scatter: out[dst[e]] += a[src[e]] per edge e.
    EdgeSum(NodeId, Rc<Vec<usize>>, Rc<Vec<usize>>),
    Relu(NodeId),
    LeakyRelu(NodeId, F),
    SoftmaxRows(NodeId),
    /// Normalize [n, h] per (segment, column); segment id per row.
    SegmentSoftmax(NodeId, Rc<Vec<usize>>, usize),
    /// x, gamma, beta; normalizes the last dim of [n, d]
    LayerNorm(NodeId, NodeId, NodeId, F),
    /// x [B,L,Cin], w [Cout,K,Cin], b [Cout]; zero-padded, stride 1
    Conv1d(NodeId, NodeId, NodeId),
    /// Rows are [T, w] blocks; running sum over T.
    CumsumSteps(NodeId, usize),
    /// [n, h*b] -> [n, h], summing each b-wide block
    BlockSumCols(NodeId, usize),
    /// [n, h] -> [n, h*b], repeating each entry b times
    BlockRepeatCols(NodeId, usize),
    Reshape(NodeId),
    /// Weighted smooth-L1 against a constant target; scalar output.
    SmoothL1(NodeId, Rc<Tensor<F>>, Rc<Tensor<F>>),
    /// Mean cross-entropy of logit rows against class indices.
    CrossEntropyLogits(NodeId, Rc<Vec<usize>>),
    SumAll(NodeId),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    /// Whether any ancestor is a differentiable leaf.
    requires: bool,
}

/// Gradients keyed by node id after a backward pass.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf that participated in the loss; zeros otherwise.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<F> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    strict: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// A tape that fails fast on non-finite op outputs.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires: bool) -> NodeId {
        debug_assert!(!self.strict || value.all_finite());
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(&self, id: NodeId, what: &'static str) -> AdResult<NodeId> {
        if self.strict && !self.nodes[id.0].value.all_finite() {
            return Err(AdError::NonFinite(what));
        }
        Ok(id)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    fn want_2d(&self, id: NodeId, what: &str) -> AdResult<(usize, usize)> {
        let s = &self.nodes[id.0].value.shape;
        if s.len() != 2 {
            return Err(AdError::ShapeMismatch(format!(
                "{what}: expected 2-d tensor, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // -- arithmetic ---------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (n, k) = self.want_2d(a, "matmul lhs")?;
        let (k2, m) = self.want_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(AdError::ShapeMismatch(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![F::zero(); n * m];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for i in 0..n {
                let arow = &av[i * k..(i + 1) * k];
                let orow = &mut out[i * m..(i + 1) * m];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &bv[kk * m..(kk + 1) * m];
                    for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                        *o += aik * b;
                    }
                }
            }
        }
        let req = self.req(&[a, b]);
        let id = self.push(Tensor::new(vec![n, m], out), Op::Matmul(a, b), req);
        self.check_finite(id, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let sa = self.nodes[a.0].value.shape.clone();
        let sb = &self.nodes[b.0].value.shape;
        if &sa != sb {
            return Err(AdError::ShapeMismatch(format!("add: {sa:?} vs {sb:?}")));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(sa, data), Op::Add(a, b), req))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "add_bias input")?;
        let sb = &self.nodes[bias.0].value.shape;
        if sb != &vec![d] {
            return Err(AdError::ShapeMismatch(format!(
                "add_bias: input cols {d}, bias {sb:?}"
            )));
        }
        let mut data = self.nodes[a.0].value.data.clone();
        let bv = &self.nodes[bias.0].value.data;
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += bv[c];
            }
        }
        let req = self.req(&[a, bias]);
        Ok(self.push(Tensor::new(vec![n, d], data), Op::AddBias(a, bias), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let sa = self.nodes[a.0].value.shape.clone();
        let sb = &self.nodes[b.0].value.shape;
        if &sa != sb {
            return Err(AdError::ShapeMismatch(format!("mul: {sa:?} vs {sb:?}")));
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(self.nodes[b.0].value.data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(Tensor::new(sa, data), Op::Mul(a, b), req))
    }

    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "mul_rowvec input")?;
        let sv = &self.nodes[v.0].value.shape;
        if sv != &vec![d] {
            return Err(AdError::ShapeMismatch(format!(
                "mul_rowvec: input cols {d}, vector {sv:?}"
            )));
        }
        let mut data = self.nodes[a.0].value.data.clone();
        let vv = &self.nodes[v.0].value.data;
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] *= vv[c];
            }
        }
        let req = self.req(&[a, v]);
        Ok(self.push(Tensor::new(vec![n, d], data), Op::MulRowVec(a, v), req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = F::from_f64(c);
        let shape = self.nodes[a.0].value.shape.clone();
        let data = self.nodes[a.0].value.data.iter().map(|&x| x * c).collect();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, data), Op::Scale(a, c), req)
    }

    // -- structure ----------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> AdResult<NodeId> {
        if parts.is_empty() {
            return Err(AdError::ShapeMismatch("concat_rows: empty input".into()));
        }
        let (_, d) = self.want_2d(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, dp) = self.want_2d(p, "concat_rows part")?;
            if dp != d {
                return Err(AdError::ShapeMismatch(format!(
                    "concat_rows: col mismatch {d} vs {dp}"
                )));
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let req = self.req(parts);
        Ok(self.push(
            Tensor::new(vec![rows, d], data),
            Op::ConcatRows(parts.to_vec()),
            req,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "slice_cols")?;
        if start >= end || end > d {
            return Err(AdError::ShapeMismatch(format!(
                "slice_cols: [{start},{end}) out of {d}"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            let row = &self.nodes[a.0].value.data[r * d..(r + 1) * d];
            data.extend_from_slice(&row[start..end]);
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, w], data),
            Op::SliceCols(a, start, end),
            req,
        ))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AdError::ShapeMismatch(format!(
                "gather_rows: index {bad} out of {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(&self.nodes[a.0].value.data[i * d..(i + 1) * d]);
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data),
            Op::GatherRows(a, idx),
            req,
        ))
    }

    /// Sum row e of the input into output row `idx[e]`, in input order.
    pub fn scatter_sum_rows(
        &mut self,
        a: NodeId,
        idx: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "scatter_sum_rows")?;
        if idx.len() != n {
            return Err(AdError::ShapeMismatch(format!(
                "scatter_sum_rows: {n} rows but {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(AdError::ShapeMismatch(format!(
                "scatter_sum_rows: index {bad} out of {out_rows} rows"
            )));
        }
        let mut data = vec![F::zero(); out_rows * d];
        for (e, &dst) in idx.iter().enumerate() {
            let src = &self.nodes[a.0].value.data[e * d..(e + 1) * d];
            let out = &mut data[dst * d..(dst + 1) * d];
            for (o, &s) in out.iter_mut().zip(src.iter()) {
                *o += s;
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![out_rows, d], data),
            Op::ScatterSumRows(a, idx),
            req,
        ))
    }

    /// Sum rows `src[e]` of the input into output rows `dst[e]`, edge by
    /// edge in list order. Equivalent to scatter_sum(gather(a, src), dst)
    /// without the intermediate.
    pub fn edge_sum(
        &mut self,
        a: NodeId,
        src: Rc<Vec<usize>>,
        dst: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "edge_sum")?;
        if src.len() != dst.len() {
            return Err(AdError::ShapeMismatch(format!(
                "edge_sum: {} sources vs {} destinations",
                src.len(),
                dst.len()
            )));
        }
        if let Some(&bad) = src.iter().find(|&&i| i >= n) {
            return Err(AdError::ShapeMismatch(format!(
                "edge_sum: source {bad} out of {n} rows"
            )));
        }
        if let Some(&bad) = dst.iter().find(|&&i| i >= out_rows) {
            return Err(AdError::ShapeMismatch(format!(
                "edge_sum: destination {bad} out of {out_rows} rows"
            )));
        }
        let mut data = vec![F::zero(); out_rows * d];
        {
            let av = &self.nodes[a.0].value.data;
            for (&s, &t) in src.iter().zip(dst.iter()) {
                let from = &av[s * d..(s + 1) * d];
                let to = &mut data[t * d..(t + 1) * d];
                for (o, &x) in to.iter_mut().zip(from.iter()) {
                    *o += x;
                }
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![out_rows, d], data),
            Op::EdgeSum(a, src, dst),
            req,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> AdResult<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(AdError::ShapeMismatch(format!(
                "reshape: {:?} -> {shape:?}",
                self.nodes[a.0].value.shape
            )));
        }
        let data = self.nodes[a.0].value.data.clone();
        let req = self.req(&[a]);
        Ok(self.push(Tensor::new(shape, data), Op::Reshape(a), req))
    }

    // -- nonlinearities -----------------------------------------------------

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].value.shape.clone();
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, data), Op::Relu(a), req)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let slope = F::from_f64(slope);
        let shape = self.nodes[a.0].value.shape.clone();
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| if x > F::zero() { x } else { x * slope })
            .collect();
        let req = self.req(&[a]);
        self.push(Tensor::new(shape, data), Op::LeakyRelu(a, slope), req)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "softmax_rows")?;
        let mut data = vec![F::zero(); n * d];
        for r in 0..n {
            let row = &self.nodes[a.0].value.data[r * d..(r + 1) * d];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut sum = F::zero();
            for c in 0..d {
                let e = (row[c] - max).exp();
                data[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                data[r * d + c] /= sum;
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(Tensor::new(vec![n, d], data), Op::SoftmaxRows(a), req))
    }

    /// Softmax over rows sharing a segment id, independently per column.
    /// Rows of `a` are scores (e.g. one per edge); segments usually index
    /// destination nodes.
    pub fn segment_softmax(
        &mut self,
        a: NodeId,
        seg: Rc<Vec<usize>>,
        n_seg: usize,
    ) -> AdResult<NodeId> {
        let (n, h) = self.want_2d(a, "segment_softmax")?;
        if seg.len() != n {
            return Err(AdError::ShapeMismatch(format!(
                "segment_softmax: {n} rows but {} segment ids",
                seg.len()
            )));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(AdError::ShapeMismatch(format!(
                "segment_softmax: segment {bad} out of {n_seg}"
            )));
        }
        let av = &self.nodes[a.0].value.data;
        let mut maxes = vec![F::neg_infinity(); n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let m = &mut maxes[s * h + c];
                *m = m.max(av[r * h + c]);
            }
        }
        let mut data = vec![F::zero(); n * h];
        let mut sums = vec![F::zero(); n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let e = (av[r * h + c] - maxes[s * h + c]).exp();
                data[r * h + c] = e;
                sums[s * h + c] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                data[r * h + c] /= sums[s * h + c];
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, h], data),
            Op::SegmentSoftmax(a, seg, n_seg),
            req,
        ))
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "layer_norm")?;
        for (nm, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[id.0].value.shape;
            if s != &vec![d] {
                return Err(AdError::ShapeMismatch(format!(
                    "layer_norm {nm}: expected [{d}], got {s:?}"
                )));
            }
        }
        let eps = F::from_f64(eps);
        let mut data = vec![F::zero(); n * d];
        {
            let av = &self.nodes[a.0].value.data;
            let gv = &self.nodes[gamma.0].value.data;
            let bv = &self.nodes[beta.0].value.data;
            let dn = F::from_f64(d as f64);
            for r in 0..n {
                let row = &av[r * d..(r + 1) * d];
                let mean = row.iter().fold(F::zero(), |s, &x| s + x) / dn;
                let var = row
                    .iter()
                    .fold(F::zero(), |s, &x| s + (x - mean) * (x - mean))
                    / dn;
                let rstd = F::one() / (var + eps).sqrt();
                for c in 0..d {
                    data[r * d + c] = (row[c] - mean) * rstd * gv[c] + bv[c];
                }
            }
        }
        let req = self.req(&[a, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, d], data),
            Op::LayerNorm(a, gamma, beta, eps),
            req,
        ))
    }

    // -- convolution --------------------------------------------------------

    /// 1-d convolution over the middle (time) axis with zero padding that
    /// preserves length. Input [B, L, Cin], weights [Cout, K, Cin], bias
    /// [Cout]; output [B, L, Cout].
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> AdResult<NodeId> {
        let xs = self.nodes[x.0].value.shape.clone();
        let ws = self.nodes[w.0].value.shape.clone();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(AdError::ShapeMismatch(format!(
                "conv1d: input {xs:?}, weights {ws:?}"
            )));
        }
        let (batch, len, cin) = (xs[0], xs[1], xs[2]);
        let (cout, k, cin2) = (ws[0], ws[1], ws[2]);
        if cin != cin2 {
            return Err(AdError::ShapeMismatch(format!(
                "conv1d: channels {cin} vs {cin2}"
            )));
        }
        if self.nodes[b.0].value.shape != vec![cout] {
            return Err(AdError::ShapeMismatch("conv1d bias".into()));
        }
        let pad = k / 2;
        let mut data = vec![F::zero(); batch * len * cout];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for bi in 0..batch {
                for t in 0..len {
                    let orow = &mut data[(bi * len + t) * cout..(bi * len + t + 1) * cout];
                    for (co, o) in orow.iter_mut().enumerate() {
                        let mut acc = bv[co];
                        for kk in 0..k {
                            let src = t as isize + kk as isize - pad as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let xrow = &xv[(bi * len + src as usize) * cin..][..cin];
                            let wrow = &wv[(co * k + kk) * cin..][..cin];
                            for (xc, wc) in xrow.iter().zip(wrow.iter()) {
                                acc += *xc * *wc;
                            }
                        }
                        *o = acc;
                    }
                }
            }
        }
        let req = self.req(&[x, w, b]);
        let id = self.push(
            Tensor::new(vec![batch, len, cout], data),
            Op::Conv1d(x, w, b),
            req,
        );
        self.check_finite(id, "conv1d")
    }

    // -- accumulation -------------------------------------------------------

    /// Treat each row as [T, step] and take the running sum over T.
    pub fn cumsum_steps(&mut self, a: NodeId, step: usize) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "cumsum_steps")?;
        if step == 0 || d % step != 0 {
            return Err(AdError::ShapeMismatch(format!(
                "cumsum_steps: width {d} not divisible by {step}"
            )));
        }
        let mut data = self.nodes[a.0].value.data.clone();
        let t = d / step;
        for r in 0..n {
            let row = &mut data[r * d..(r + 1) * d];
            for u in 1..t {
                for c in 0..step {
                    row[u * step + c] = row[u * step + c] + row[(u - 1) * step + c];
                }
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, d], data),
            Op::CumsumSteps(a, step),
            req,
        ))
    }

    pub fn block_sum_cols(&mut self, a: NodeId, block: usize) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "block_sum_cols")?;
        if block == 0 || d % block != 0 {
            return Err(AdError::ShapeMismatch(format!(
                "block_sum_cols: width {d} not divisible by {block}"
            )));
        }
        let h = d / block;
        let mut data = vec![F::zero(); n * h];
        let av = &self.nodes[a.0].value.data;
        for r in 0..n {
            for hh in 0..h {
                let mut s = F::zero();
                for c in 0..block {
                    s += av[r * d + hh * block + c];
                }
                data[r * h + hh] = s;
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, h], data),
            Op::BlockSumCols(a, block),
            req,
        ))
    }

    pub fn block_repeat_cols(&mut self, a: NodeId, block: usize) -> AdResult<NodeId> {
        let (n, h) = self.want_2d(a, "block_repeat_cols")?;
        let d = h * block;
        let mut data = vec![F::zero(); n * d];
        let av = &self.nodes[a.0].value.data;
        for r in 0..n {
            for hh in 0..h {
                let v = av[r * h + hh];
                for c in 0..block {
                    data[r * d + hh * block + c] = v;
                }
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, d], data),
            Op::BlockRepeatCols(a, block),
            req,
        ))
    }

    // -- losses -------------------------------------------------------------

    /// Sum of weight * smoothl1(x - target); the weight tensor carries both
    /// validity masks and averaging factors. smoothl1(d) = d^2/2 for |d| < 1,
    /// |d| - 1/2 otherwise.
    pub fn smooth_l1(
        &mut self,
        a: NodeId,
        target: Rc<Tensor<F>>,
        weight: Rc<Tensor<F>>,
    ) -> AdResult<NodeId> {
        let s = &self.nodes[a.0].value.shape;
        if *s != target.shape || *s != weight.shape {
            return Err(AdError::ShapeMismatch(format!(
                "smooth_l1: pred {s:?}, target {:?}, weight {:?}",
                target.shape, weight.shape
            )));
        }
        let half = F::from_f64(0.5);
        let one = F::one();
        let mut acc = F::zero();
        for ((&p, &t), &w) in self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(target.data.iter())
            .zip(weight.data.iter())
        {
            let d = p - t;
            let l = if d.abs() < one {
                half * d * d
            } else {
                d.abs() - half
            };
            acc += w * l;
        }
        let req = self.req(&[a]);
        Ok(self.push(Tensor::scalar(acc), Op::SmoothL1(a, target, weight), req))
    }

    /// Mean over rows of cross-entropy between logit rows and target indices.
    pub fn cross_entropy_logits(
        &mut self,
        a: NodeId,
        targets: Rc<Vec<usize>>,
    ) -> AdResult<NodeId> {
        let (n, d) = self.want_2d(a, "cross_entropy_logits")?;
        if targets.len() != n {
            return Err(AdError::ShapeMismatch(format!(
                "cross_entropy_logits: {n} rows, {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
            return Err(AdError::ShapeMismatch(format!(
                "cross_entropy_logits: class {bad} out of {d}"
            )));
        }
        let av = &self.nodes[a.0].value.data;
        let mut acc = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &av[r * d..(r + 1) * d];
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().fold(F::zero(), |s, &x| s + (x - max).exp()).ln() + max;
            acc += lse - row[t];
        }
        acc /= F::from_f64(n as f64);
        let req = self.req(&[a]);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::CrossEntropyLogits(a, targets),
            req,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0]
            .value
            .data
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        let req = self.req(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), req)
    }

    // -- backward -----------------------------------------------------------

    /// Backpropagate from a scalar node, returning gradients for every node
    /// that (transitively) required them.
    pub fn backward(&self, loss: NodeId) -> AdResult<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AdError::NotScalar(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires {
                continue;
            }
            let go = grads[i].take().unwrap();
            self.backprop_node(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, delta: Tensor<F>) {
        if !self.nodes[id.0].requires {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, go: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (n, k) = (av.rows(), av.cols());
                let m = bv.cols();
                if self.nodes[a.0].requires {
                    // dA = go . B^T; transpose B once so the inner loop is a
                    // contiguous axpy.
                    let mut bt = vec![F::zero(); m * k];
                    for kk in 0..k {
                        for j in 0..m {
                            bt[j * k + kk] = bv.data[kk * m + j];
                        }
                    }
                    let mut da = vec![F::zero(); n * k];
                    for r in 0..n {
                        let grow = &go.data[r * m..(r + 1) * m];
                        let darow = &mut da[r * k..(r + 1) * k];
                        for (j, &g) in grow.iter().enumerate() {
                            let btrow = &bt[j * k..(j + 1) * k];
                            for (d, &b) in darow.iter_mut().zip(btrow.iter()) {
                                *d += g * b;
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da));
                }
                if self.nodes[b.0].requires {
                    // dB = A^T . go
                    let mut db = vec![F::zero(); k * m];
                    for r in 0..n {
                        let arow = &av.data[r * k..(r + 1) * k];
                        let grow = &go.data[r * m..(r + 1) * m];
                        for (kk, &aik) in arow.iter().enumerate() {
                            let dbrow = &mut db[kk * m..(kk + 1) * m];
                            for (d, g) in dbrow.iter_mut().zip(grow.iter()) {
                                *d += aik * *g;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, go.clone());
                self.accumulate(grads, *b, go.clone());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, go.clone());
                if self.nodes[bias.0].requires {
                    let d = self.nodes[bias.0].value.numel();
                    let n = go.numel() / d;
                    let mut db = vec![F::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += go.data[r * d + c];
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![d], db));
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires {
                    let data = go
                        .data
                        .iter()
                        .zip(self.nodes[b.0].value.data.iter())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(go.shape.clone(), data));
                }
                if self.nodes[b.0].requires {
                    let data = go
                        .data
                        .iter()
                        .zip(self.nodes[a.0].value.data.iter())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(go.shape.clone(), data));
                }
            }
            Op::MulRowVec(a, v) => {
                let d = self.nodes[v.0].value.numel();
                let n = go.numel() / d;
                if self.nodes[a.0].requires {
                    let vv = &self.nodes[v.0].value.data;
                    let mut da = vec![F::zero(); n * d];
                    for r in 0..n {
                        for c in 0..d {
                            da[r * d + c] = go.data[r * d + c] * vv[c];
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
                }
                if self.nodes[v.0].requires {
                    let av = &self.nodes[a.0].value.data;
                    let mut dv = vec![F::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            dv[c] += go.data[r * d + c] * av[r * d + c];
                        }
                    }
                    self.accumulate(grads, *v, Tensor::new(vec![d], dv));
                }
            }
            Op::Scale(a, c) => {
                let data = go.data.iter().map(|&g| g * *c).collect();
                self.accumulate(grads, *a, Tensor::new(go.shape.clone(), data));
            }
            Op::ConcatRows(parts) => {
                let d = go.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.nodes[p.0].value.rows();
                    if self.nodes[p.0].requires {
                        let data = go.data[offset * d..(offset + r) * d].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![r, d], data));
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, d) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let w = end - start;
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    for c in 0..w {
                        da[r * d + start + c] = go.data[r * w + c];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::GatherRows(a, idx) => {
                let (n, d) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut da = vec![F::zero(); n * d];
                for (e, &i) in idx.iter().enumerate() {
                    let src = &go.data[e * d..(e + 1) * d];
                    let dst = &mut da[i * d..(i + 1) * d];
                    for (x, &g) in dst.iter_mut().zip(src.iter()) {
                        *x += g;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::ScatterSumRows(a, idx) => {
                let (n, d) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut da = vec![F::zero(); n * d];
                for (e, &dst) in idx.iter().enumerate() {
                    da[e * d..(e + 1) * d].copy_from_slice(&go.data[dst * d..(dst + 1) * d]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::EdgeSum(a, src, dst) => {
                let (n, d) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut da = vec![F::zero(); n * d];
                for (&s, &t) in src.iter().zip(dst.iter()) {
                    let from = &go.data[t * d..(t + 1) * d];
                    let to = &mut da[s * d..(s + 1) * d];
                    for (o, &g) in to.iter_mut().zip(from.iter()) {
                        *o += g;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape.clone();
                self.accumulate(grads, *a, Tensor::new(shape, go.data.clone()));
            }
            Op::Relu(a) => {
                let data = go
                    .data
                    .iter()
                    .zip(self.nodes[a.0].value.data.iter())
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(go.shape.clone(), data));
            }
            Op::LeakyRelu(a, slope) => {
                let data = go
                    .data
                    .iter()
                    .zip(self.nodes[a.0].value.data.iter())
                    .map(|(&g, &x)| if x > F::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(go.shape.clone(), data));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (n, d) = (y.rows(), y.cols());
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    let yr = &y.data[r * d..(r + 1) * d];
                    let gr = &go.data[r * d..(r + 1) * d];
                    let dot = yr
                        .iter()
                        .zip(gr.iter())
                        .fold(F::zero(), |s, (&yv, &gv)| s + yv * gv);
                    for c in 0..d {
                        da[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let y = &self.nodes[i].value;
                let (n, h) = (y.rows(), y.cols());
                let mut dots = vec![F::zero(); n_seg * h];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..h {
                        dots[s * h + c] += y.data[r * h + c] * go.data[r * h + c];
                    }
                }
                let mut da = vec![F::zero(); n * h];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..h {
                        da[r * h + c] = y.data[r * h + c] * (go.data[r * h + c] - dots[s * h + c]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, h], da));
            }
            Op::LayerNorm(a, gamma, beta, eps) => {
                let x = &self.nodes[a.0].value;
                let (n, d) = (x.rows(), x.cols());
                let gv = &self.nodes[gamma.0].value.data;
                let dn = F::from_f64(d as f64);
                let mut da = vec![F::zero(); n * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..n {
                    let row = &x.data[r * d..(r + 1) * d];
                    let grow = &go.data[r * d..(r + 1) * d];
                    let mean = row.iter().fold(F::zero(), |s, &v| s + v) / dn;
                    let var = row
                        .iter()
                        .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                        / dn;
                    let rstd = F::one() / (var + *eps).sqrt();
                    // g = gamma .* go; dx = rstd * (g - mean(g) - xhat * mean(g .* xhat))
                    let mut gmean = F::zero();
                    let mut gxmean = F::zero();
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let g = gv[c] * grow[c];
                        gmean += g;
                        gxmean += g * xhat;
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                    }
                    gmean /= dn;
                    gxmean /= dn;
                    for c in 0..d {
                        let xhat = (row[c] - mean) * rstd;
                        let g = gv[c] * grow[c];
                        da[r * d + c] = rstd * (g - gmean - xhat * gxmean);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
                if self.nodes[gamma.0].requires {
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], dgamma));
                }
                if self.nodes[beta.0].requires {
                    self.accumulate(grads, *beta, Tensor::new(vec![d], dbeta));
                }
            }
            Op::Conv1d(x, w, b) => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (batch, len, cin) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (cout, k) = (wv.shape[0], wv.shape[1]);
                let pad = k / 2;
                if self.nodes[x.0].requires {
                    let mut dx = vec![F::zero(); batch * len * cin];
                    for bi in 0..batch {
                        for t in 0..len {
                            let grow = &go.data[(bi * len + t) * cout..][..cout];
                            for kk in 0..k {
                                let src = t as isize + kk as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let drow = &mut dx[(bi * len + src as usize) * cin..][..cin];
                                for (co, &g) in grow.iter().enumerate() {
                                    let wrow = &wv.data[(co * k + kk) * cin..][..cin];
                                    for (d, &wc) in drow.iter_mut().zip(wrow.iter()) {
                                        *d += g * wc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![batch, len, cin], dx));
                }
                if self.nodes[w.0].requires {
                    let mut dw = vec![F::zero(); cout * k * cin];
                    for bi in 0..batch {
                        for t in 0..len {
                            let grow = &go.data[(bi * len + t) * cout..][..cout];
                            for kk in 0..k {
                                let src = t as isize + kk as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let xrow = &xv.data[(bi * len + src as usize) * cin..][..cin];
                                for (co, &g) in grow.iter().enumerate() {
                                    let dwrow = &mut dw[(co * k + kk) * cin..][..cin];
                                    for (d, &xc) in dwrow.iter_mut().zip(xrow.iter()) {
                                        *d += g * xc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![cout, k, cin], dw));
                }
                if self.nodes[b.0].requires {
                    let mut db = vec![F::zero(); cout];
                    for chunk in go.data.chunks_exact(cout) {
                        for (d, &g) in db.iter_mut().zip(chunk.iter()) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![cout], db));
                }
            }
            Op::CumsumSteps(a, step) => {
                let (n, d) = (go.rows(), go.cols());
                let t = d / step;
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    // suffix sums
                    for c in 0..*step {
                        let mut acc = F::zero();
                        for u in (0..t).rev() {
                            acc += go.data[r * d + u * step + c];
                            da[r * d + u * step + c] = acc;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::BlockSumCols(a, block) => {
                let (n, h) = (go.rows(), go.cols());
                let d = h * block;
                let mut da = vec![F::zero(); n * d];
                for r in 0..n {
                    for hh in 0..h {
                        let g = go.data[r * h + hh];
                        for c in 0..*block {
                            da[r * d + hh * block + c] = g;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::BlockRepeatCols(a, block) => {
                let (n, d) = (go.rows(), go.cols());
                let h = d / block;
                let mut da = vec![F::zero(); n * h];
                for r in 0..n {
                    for hh in 0..h {
                        let mut s = F::zero();
                        for c in 0..*block {
                            s += go.data[r * d + hh * block + c];
                        }
                        da[r * h + hh] = s;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, h], da));
            }
            Op::SmoothL1(a, target, weight) => {
                let g = go.item();
                let one = F::one();
                let data = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .zip(target.data.iter())
                    .zip(weight.data.iter())
                    .map(|((&p, &t), &w)| {
                        let d = p - t;
                        let dl = if d.abs() < one {
                            d
                        } else if d > F::zero() {
                            one
                        } else {
                            -one
                        };
                        g * w * dl
                    })
                    .collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(self.nodes[a.0].value.shape.clone(), data),
                );
            }
            Op::CrossEntropyLogits(a, targets) => {
                let g = go.item();
                let (n, d) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let inv_n = F::from_f64(1.0 / n as f64);
                let av = &self.nodes[a.0].value.data;
                let mut da = vec![F::zero(); n * d];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &av[r * d..(r + 1) * d];
                    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                    let sum = row.iter().fold(F::zero(), |s, &x| s + (x - max).exp());
                    for c in 0..d {
                        let p = (row[c] - max).exp() / sum;
                        let ind = if c == t { F::one() } else { F::zero() };
                        da[r * d + c] = g * inv_n * (p - ind);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, d], da));
            }
            Op::SumAll(a) => {
                let g = go.item();
                let shape = self.nodes[a.0].value.shape.clone();
                let data = vec![g; self.nodes[a.0].value.numel()];
                self.accumulate(grads, *a, Tensor::new(shape, data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(vec![rows, cols], v)
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 2, &[-1.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data, vec![0.0, 2.0]);
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![0.0, 1.0]);
    }

    #[test]
    fn matmul_linear_gradient_is_outer_product_structure() {
        // loss = sum(W x); dL/dW[i][j] = x[j]
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let x = tape.constant(t2(2, 1, &[5.0, 7.0]));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data, vec![5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn zero_loss_path_gives_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 2, &[1.0, 2.0]), true);
        let y = tape.leaf(t2(1, 2, &[3.0, 4.0]), true);
        let _ = x;
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn segment_softmax_singleton_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 2, &[0.3, -5.0]), true);
        let y = tape.segment_softmax(x, Rc::new(vec![0]), 1).unwrap();
        assert!((tape.value(y).data[0] - 1.0).abs() < 1e-12);
        assert!((tape.value(y).data[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            t2(5, 3, &[0.1, 1.0, -2.0, 0.4, 0.0, 3.0, -1.0, 2.0, 0.5, 0.9, -0.4, 1.1, 2.0, 0.3, 0.0]),
            true,
        );
        let seg = Rc::new(vec![0usize, 1, 0, 2, 1]);
        let y = tape.segment_softmax(x, seg.clone(), 3).unwrap();
        let yv = tape.value(y);
        for s in 0..3 {
            for c in 0..3 {
                let sum: f64 = (0..5)
                    .filter(|&r| seg[r] == s)
                    .map(|r| yv.data[r * 3 + c])
                    .sum();
                assert!((sum - 1.0).abs() < 1e-6, "segment {s} col {c}: {sum}");
            }
        }
    }

    #[test]
    fn scatter_sum_matches_explicit_loop() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), true);
        let idx = Rc::new(vec![1usize, 0, 1, 2]);
        let y = tape.scatter_sum_rows(x, idx.clone(), 3).unwrap();
        let mut expect = vec![0.0; 6];
        for (e, &d) in idx.iter().enumerate() {
            for c in 0..2 {
                expect[d * 2 + c] += tape.value(x).data[e * 2 + c];
            }
        }
        assert_eq!(tape.value(y).data, expect);
    }

    #[test]
    fn edge_sum_equals_gather_then_scatter() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let src = Rc::new(vec![0usize, 2, 2, 1]);
        let dst = Rc::new(vec![1usize, 0, 1, 1]);
        let fused = tape.edge_sum(x, src.clone(), dst.clone(), 2).unwrap();
        let g = tape.gather_rows(x, src).unwrap();
        let sc = tape.scatter_sum_rows(g, dst, 2).unwrap();
        assert_eq!(tape.value(fused).data, tape.value(sc).data);
    }

    #[test]
    fn smooth_l1_closed_form_values() {
        // smoothl1(0.5) = 0.125, smoothl1(2.0) = 1.5
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 2, &[0.5, 2.0]), true);
        let target = Rc::new(t2(1, 2, &[0.0, 0.0]));
        let w = Rc::new(t2(1, 2, &[1.0, 0.0]));
        let l = tape.smooth_l1(x, target.clone(), w).unwrap();
        assert!((tape.value(l).item() - 0.125).abs() < 1e-12);
        let w2 = Rc::new(t2(1, 2, &[0.0, 1.0]));
        let l2 = tape.smooth_l1(x, target, w2).unwrap();
        assert!((tape.value(l2).item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(2, 2, &[1.0; 4]), true);
        match tape.backward(x) {
            Err(AdError::NotScalar(s)) => assert_eq!(s, vec![2, 2]),
            other => panic!("expected NotScalar, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]), false);
        let b = tape.leaf(t2(3, 2, &[0.0; 6]), false);
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn deterministic_bitwise_repeat() {
        let run = || -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(t2(3, 3, &[0.3, -1.2, 0.7, 2.2, -0.4, 0.1, 1.0, 0.5, -2.0]), true);
            let w = tape.leaf(t2(3, 3, &[0.11, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9]), true);
            let y = tape.matmul(x, w).unwrap();
            let z = tape.relu(y);
            let s = tape.sum_all(z);
            let grads = tape.backward(s).unwrap();
            let mut out = tape.value(s).data.clone();
            out.extend_from_slice(&grads.get(x).unwrap().data);
            out.extend_from_slice(&grads.get(w).unwrap().data);
            out
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
