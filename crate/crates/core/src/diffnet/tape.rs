//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value; a single
//! [`Tape::backward`] call walks the nodes in exact reverse order and
//! returns gradients for every parameter that was read through
//! [`Tape::param`].

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc};
use super::{Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::uncmath::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddScalarNode(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LnGamma(NodeId),
    Digamma(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Min(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Gather {
        table: NodeId,
        idx: Vec<usize>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        width: usize,
        group: usize,
    },
    MeanGroups {
        x: NodeId,
        group: usize,
    },
    Cosine {
        a: NodeId,
        b: NodeId,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    SharedAttention(Box<SharedAttention>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::AddScalarNode(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::LnGamma(_) => "ln_gamma",
            Op::Digamma(_) => "digamma",
            Op::Clamp { .. } => "clamp",
            Op::Min(..) => "min",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gather { .. } => "gather",
            Op::Conv1d { .. } => "conv1d",
            Op::MeanGroups { .. } => "mean_groups",
            Op::Cosine { .. } => "cosine",
            Op::SharedAttention(_) => "shared_attention",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Saved state of [`Tape::shared_attention`].
#[derive(Debug, Clone)]
struct SharedAttention {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    lens: Vec<usize>,
    /// Per batch entry: Q×len attention weights, row-major.
    probs: Vec<Vec<f64>>,
    scale: f64,
}

/// Records one forward pass. Consumed by the first call to `backward`.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    consumed: bool,
}

fn shape_err(op: &str, index: usize, detail: String) -> Error {
    Error::ShapeMismatch {
        node: format!("{op}#{index}"),
        detail,
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_nodes: vec![None; params.len()],
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn next_index(&self) -> usize {
        self.nodes.len()
    }

    /// A constant input; gradients flow into it but are not reported.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Reads a parameter; repeated reads share one leaf.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let value = self.params.get(id).clone();
        let n = self.push(value, Op::Param(id.0));
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        if k != k2 {
            return Err(shape_err(
                "affine",
                self.next_index(),
                format!("x {n}x{k} · w {k2}x{m}"),
            ));
        }
        let mut out = match b {
            Some(b) => {
                if self.shape(b) != (1, m) {
                    return Err(shape_err(
                        "affine",
                        self.next_index(),
                        format!("bias {:?} for width {m}", self.shape(b)),
                    ));
                }
                let bias = self.value(b).data();
                let mut data = Vec::with_capacity(n * m);
                for _ in 0..n {
                    data.extend_from_slice(bias);
                }
                data
            }
            None => vec![0.0; n * m],
        };
        gemm_acc(
            &mut out,
            self.value(x).data(),
            self.value(w).data(),
            n,
            k,
            m,
        );
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.next_index(),
                format!("{n}x{k} · {k2}x{m}"),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
        );
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err(
                "matmul_t",
                self.next_index(),
                format!("{n}x{k} · ({m}x{k2})ᵀ"),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm_bt_acc(
            &mut out,
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
        );
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::MatMulT(a, b)))
    }

    fn zip_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op.name(),
                self.next_index(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::from_vec(r, c, data)?, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Min(a, b), f64::min)
    }

    /// Adds a 1×m row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err(
                "add_row",
                self.next_index(),
                format!("{r}x{c} + {:?}", self.shape(row)),
            ));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, y) in chunk.iter_mut().zip(&rv) {
                *x += y;
            }
        }
        Ok(self.push(Tensor::from_vec(r, c, data)?, Op::AddRow(a, row)))
    }

    /// Adds a 1×1 node to every element of `a`.
    pub fn add_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err(
                "add_scalar",
                self.next_index(),
                format!("{:?} is not 1x1", self.shape(s)),
            ));
        }
        let v = self.value(s).item();
        let out = self.value(a).map(|x| x + v);
        Ok(self.push(out, Op::AddScalarNode(a, s)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(crate::uncmath::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, stable for large |x|.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| {
            if x >= 0.0 {
                -(-x).exp().ln_1p()
            } else {
                x - x.exp().ln_1p()
            }
        });
        self.push(out, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain(format!(
                "log of non-positive value at node #{}",
                a.0
            )));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn ln_gamma(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain(format!(
                "ln_gamma of non-positive value at node #{}",
                a.0
            )));
        }
        let out = self.value(a).map(ln_gamma_unchecked);
        Ok(self.push(out, Op::LnGamma(a)))
    }

    pub fn digamma(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain(format!(
                "digamma of non-positive value at node #{}",
                a.0
            )));
        }
        let out = self.value(a).map(digamma_unchecked);
        Ok(self.push(out, Op::Digamma(a)))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(crate::uncmath::softmax(self.value(a).row_slice(i)));
        }
        let t = Tensor::from_vec(r, c, data).expect("softmax preserves shape");
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(a).row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|z| z - lse));
        }
        let t = Tensor::from_vec(r, c, data).expect("log_softmax preserves shape");
        self.push(t, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Row sums: n×m → n×1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        let data = (0..r)
            .map(|i| self.value(a).row_slice(i).iter().sum())
            .collect();
        let t = Tensor::from_vec(r, 1, data).expect("sum_cols shape");
        self.push(t, Op::SumCols(a))
    }

    /// Column means: n×m → 1×m.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(self.value(a).row_slice(i)) {
                *d += v;
            }
        }
        let inv = 1.0 / r.max(1) as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        self.push(Tensor::row(&data), Op::MeanRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err(
                "concat_cols",
                self.next_index(),
                "row counts differ".into(),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(
            Tensor::from_vec(rows, cols, data)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err(
                "concat_rows",
                self.next_index(),
                "column counts differ".into(),
            ));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_vec(rows, cols, data)?,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(shape_err(
                "slice_cols",
                self.next_index(),
                format!("{start}+{len} > {c}"),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(x).row_slice(i)[start..start + len]);
        }
        Ok(self.push(Tensor::from_vec(r, len, data)?, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(shape_err(
                "slice_rows",
                self.next_index(),
                format!("{start}+{len} > {r}"),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::from_vec(len, c, data)?, Op::SliceRows { x, start }))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err(
                "gather",
                self.next_index(),
                format!("row {bad} of {r}"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        Ok(self.push(
            Tensor::from_vec(idx.len(), c, data)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Same-padded 1-D convolution over rows. `x` is L×C, `w` is (width·C)×O
    /// with tap-major rows, `b` is 1×O. `width` must be odd.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, width: usize) -> Result<NodeId> {
        let l = self.shape(x).0;
        self.conv1d_grouped(x, w, b, width, l.max(1))
    }

    /// [`Tape::conv1d`] applied independently to consecutive blocks of
    /// `group` rows, each padded at its own borders.
    pub fn conv1d_grouped(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        width: usize,
        group: usize,
    ) -> Result<NodeId> {
        let (l, c) = self.shape(x);
        let (wr, o) = self.shape(w);
        if width % 2 == 0
            || wr != width * c
            || self.shape(b) != (1, o)
            || group == 0
            || l % group != 0
        {
            return Err(shape_err(
                "conv1d",
                self.next_index(),
                format!(
                    "x {l}x{c}, w {wr}x{o}, b {:?}, width {width}, group {group}",
                    self.shape(b)
                ),
            ));
        }
        let pad = width / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(l * o);
        for _ in 0..l {
            out.extend_from_slice(bv);
        }
        for t in 0..l {
            let base = t - t % group;
            let local = t % group;
            let out_row = &mut out[t * o..(t + 1) * o];
            for f in 0..width {
                let src = local as isize + f as isize - pad as isize;
                if src < 0 || src >= group as isize {
                    continue;
                }
                let src = base + src as usize;
                let x_row = &xv[src * c..(src + 1) * c];
                let w_block = &wv[f * c * o..(f + 1) * c * o];
                gemm_acc(out_row, x_row, w_block, 1, c, o);
            }
        }
        Ok(self.push(
            Tensor::from_vec(l, o, out)?,
            Op::Conv1d {
                x,
                w,
                b,
                width,
                group,
            },
        ))
    }

    /// Means of consecutive blocks of `group` rows: (G·group)×C → G×C.
    pub fn mean_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (l, c) = self.shape(x);
        if group == 0 || l % group != 0 {
            return Err(shape_err(
                "mean_groups",
                self.next_index(),
                format!("{l} rows in groups of {group}"),
            ));
        }
        let n = l / group;
        let inv = 1.0 / group as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for (t, row) in xv.chunks(c.max(1)).enumerate() {
            let dst = &mut out[(t / group) * c..(t / group + 1) * c];
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v * inv;
            }
        }
        Ok(self.push(Tensor::from_vec(n, c, out)?, Op::MeanGroups { x, group }))
    }

    /// Pairwise cosine similarities of the rows of `a` (n×d) and `b` (m×d),
    /// giving n×m. Similarity with a zero vector is defined as 0.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.shape(a);
        let (m, d2) = self.shape(b);
        if d != d2 {
            return Err(shape_err(
                "cosine",
                self.next_index(),
                format!("{n}x{d} vs {m}x{d2}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let na: Vec<f64> = (0..n).map(|i| norm(&av[i * d..(i + 1) * d])).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(&bv[j * d..(j + 1) * d])).collect();
        let mut out = vec![0.0; n * m];
        gemm_bt_acc(&mut out, av, bv, n, d, m);
        let mut zero_guard = false;
        for i in 0..n {
            for j in 0..m {
                let denom = na[i] * nb[j];
                if denom == 0.0 {
                    zero_guard = true;
                    out[i * m + j] = 0.0;
                } else {
                    out[i * m + j] /= denom;
                }
            }
        }
        if zero_guard {
            log::debug!("cosine similarity with a zero vector set to 0");
        }
        Ok(self.push(Tensor::from_vec(n, m, out)?, Op::Cosine { a, b, na, nb }))
    }

    /// Scaled dot-product attention of one shared query set against a batch
    /// of key/value sequences stored time-major: row `t·B + i` of `k` and `v`
    /// holds step `t` of sequence `i`, and only its first `lens[i]` steps are
    /// attended to. Output row `i·Q + j` is query `j` applied to sequence `i`.
    pub fn shared_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        lens: &[usize],
    ) -> Result<NodeId> {
        let (nq, d) = self.shape(q);
        let (kr, d2) = self.shape(k);
        let (vr, dv) = self.shape(v);
        let batch = lens.len();
        if batch == 0
            || d != d2
            || kr != vr
            || kr % batch != 0
            || lens.iter().any(|&l| l == 0 || l * batch > kr)
        {
            return Err(shape_err(
                "shared_attention",
                self.next_index(),
                format!("q {nq}x{d}, k {kr}x{d2}, v {vr}x{dv}, lens {lens:?}"),
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = vec![0.0; batch * nq * dv];
        let mut probs = Vec::with_capacity(batch);
        for (i, &len) in lens.iter().enumerate() {
            let mut p = vec![0.0; nq * len];
            for j in 0..nq {
                let qrow = &qv[j * d..(j + 1) * d];
                let prow = &mut p[j * len..(j + 1) * len];
                for (t, pv) in prow.iter_mut().enumerate() {
                    let r = t * batch + i;
                    *pv = scale
                        * qrow
                            .iter()
                            .zip(&kv[r * d..(r + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                }
                let mx = prow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for pv in prow.iter_mut() {
                    *pv = (*pv - mx).exp();
                    z += *pv;
                }
                let orow = &mut out[(i * nq + j) * dv..(i * nq + j + 1) * dv];
                for (t, pv) in prow.iter_mut().enumerate() {
                    *pv /= z;
                    let r = t * batch + i;
                    for (o, x) in orow.iter_mut().zip(&vv[r * dv..(r + 1) * dv]) {
                        *o += *pv * x;
                    }
                }
            }
            probs.push(p);
        }
        Ok(self.push(
            Tensor::from_vec(batch * nq, dv, out)?,
            Op::SharedAttention(Box::new(SharedAttention {
                q,
                k,
                v,
                lens: lens.to_vec(),
                probs,
                scale,
            })),
        ))
    }

    /// Cosine similarity of the 1×d row `a` with each row of `b` (n×d),
    /// giving 1×n. Similarity with a zero vector is defined as 0.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).0 != 1 {
            return Err(shape_err(
                "cosine",
                self.next_index(),
                format!("{:?} is not a row", self.shape(a)),
            ));
        }
        self.cosine_matrix(a, b)
    }

    /// Reverse pass from a scalar output with seed gradient 1.
    pub fn backward(&mut self, output: NodeId) -> Result<Grads> {
        let (r, c) = self.shape(output);
        self.backward_with(output, Tensor::filled(r, c, 1.0))
    }

    /// Reverse pass from `output` with an explicit upstream gradient.
    pub fn backward_with(&mut self, output: NodeId, seed: Tensor) -> Result<Grads> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if seed.shape() != self.shape(output) {
            return Err(shape_err(
                "backward",
                output.0,
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    self.shape(output)
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    param_grads[*p] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (n, k) = self.nodes[x.0].value.shape();
                    let m = node.value.cols();
                    let mut gx = vec![0.0; n * k];
                    gemm_bt_acc(&mut gx, g.data(), self.nodes[w.0].value.data(), n, m, k);
                    let mut gw = vec![0.0; k * m];
                    gemm_at_acc(&mut gw, self.nodes[x.0].value.data(), g.data(), n, k, m);
                    if let Some(b) = b {
                        let mut gb = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::row(&gb));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(n, k, gx)?);
                    accumulate(&mut grads, *w, Tensor::from_vec(k, m, gw)?);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.nodes[a.0].value.shape();
                    let m = node.value.cols();
                    let mut ga = vec![0.0; n * k];
                    gemm_bt_acc(&mut ga, g.data(), self.nodes[b.0].value.data(), n, m, k);
                    let mut gb = vec![0.0; k * m];
                    gemm_at_acc(&mut gb, self.nodes[a.0].value.data(), g.data(), n, k, m);
                    accumulate(&mut grads, *a, Tensor::from_vec(n, k, ga)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(k, m, gb)?);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ; ga = g b, gb = gᵀ a
                    let (n, k) = self.nodes[a.0].value.shape();
                    let m = node.value.cols();
                    let mut ga = vec![0.0; n * k];
                    gemm_acc(&mut ga, g.data(), self.nodes[b.0].value.data(), n, m, k);
                    let mut gb = vec![0.0; m * k];
                    gemm_at_acc(&mut gb, g.data(), self.nodes[a.0].value.data(), n, m, k);
                    accumulate(&mut grads, *a, Tensor::from_vec(n, k, ga)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(m, k, gb)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = zip_map(&g, bv, |gi, bi| gi * bi);
                    let gb = zip_map(&g, av, |gi, ai| gi * ai);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut ga = g.clone();
                    let mut gb = g;
                    for ((x, y), (da, db)) in av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .zip(ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()))
                    {
                        if x <= y {
                            *db = 0.0;
                        } else {
                            *da = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for chunk in g.data().chunks(c.max(1)) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *row, Tensor::row(&gr));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddScalarNode(a, s) => {
                    let total: f64 = g.data().iter().sum();
                    accumulate(&mut grads, *s, Tensor::scalar(total));
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let gx = zip_map(&g, &node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut grads, *a, gx);
                }
                Op::LogSigmoid(a) => {
                    let gx = zip_map(&g, &self.nodes[a.0].value, |gi, x| {
                        gi * crate::uncmath::sigmoid(-x)
                    });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Tanh(a) => {
                    let gx = zip_map(&g, &node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, gx);
                }
                Op::Exp(a) => {
                    let gx = zip_map(&g, &node.value, |gi, y| gi * y);
                    accumulate(&mut grads, *a, gx);
                }
                Op::Log(a) => {
                    let gx = zip_map(&g, &self.nodes[a.0].value, |gi, x| gi / x);
                    accumulate(&mut grads, *a, gx);
                }
                Op::LnGamma(a) => {
                    let gx = zip_map(&g, &self.nodes[a.0].value, |gi, x| {
                        gi * digamma_unchecked(x)
                    });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Digamma(a) => {
                    let gx = zip_map(&g, &self.nodes[a.0].value, |gi, x| {
                        gi * trigamma_unchecked(x)
                    });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = zip_map(&g, &self.nodes[x.0].value, |gi, v| {
                        if v > lo && v < hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = node.value.shape();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let y = node.value.row_slice(i);
                        let gy = g.row_slice(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(r, c, gx)?);
                }
                Op::LogSoftmaxRows(a) => {
                    let (r, c) = node.value.shape();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let y = node.value.row_slice(i);
                        let gy = g.row_slice(i);
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            gx[i * c + j] = gy[j] - y[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(r, c, gx)?);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    accumulate(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let v = g.item() / (r * c).max(1) as f64;
                    accumulate(&mut grads, *a, Tensor::filled(r, c, v));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gx.extend(std::iter::repeat(g.data()[i]).take(c));
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(r, c, gx)?);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let inv = 1.0 / r.max(1) as f64;
                    let mut gx = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        gx.extend(g.data().iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(r, c, gx)?);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        let mut gp = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                        }
                        offset += pc;
                        accumulate(&mut grads, p, Tensor::from_vec(rows, pc, gp)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        let gp = g.data()[offset * cols..(offset + pr) * cols].to_vec();
                        offset += pr;
                        accumulate(&mut grads, p, Tensor::from_vec(pr, cols, gp)?);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let len = node.value.cols();
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(r, c, gx)?);
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.nodes[x.0].value.shape();
                    let mut gx = vec![0.0; r * c];
                    gx[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, Tensor::from_vec(r, c, gx)?);
                }
                Op::Gather { table, idx } => {
                    let (r, c) = self.nodes[table.0].value.shape();
                    let mut gt = vec![0.0; r * c];
                    for (k, &row) in idx.iter().enumerate() {
                        for (acc, v) in gt[row * c..(row + 1) * c].iter_mut().zip(g.row_slice(k)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::from_vec(r, c, gt)?);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    width,
                    group,
                } => {
                    let (l, c) = self.nodes[x.0].value.shape();
                    let o = node.value.cols();
                    let (width, group) = (*width, *group);
                    let pad = width / 2;
                    let xv = self.nodes[x.0].value.data();
                    let wv = self.nodes[w.0].value.data();
                    let mut gx = vec![0.0; l * c];
                    let mut gw = vec![0.0; width * c * o];
                    let mut gb = vec![0.0; o];
                    for t in 0..l {
                        let base = t - t % group;
                        let local = t % group;
                        let g_row = g.row_slice(t);
                        for (acc, v) in gb.iter_mut().zip(g_row) {
                            *acc += v;
                        }
                        for f in 0..width {
                            let src = local as isize + f as isize - pad as isize;
                            if src < 0 || src >= group as isize {
                                continue;
                            }
                            let src = base + src as usize;
                            let w_block = &wv[f * c * o..(f + 1) * c * o];
                            gemm_bt_acc(&mut gx[src * c..(src + 1) * c], g_row, w_block, 1, o, c);
                            gemm_at_acc(
                                &mut gw[f * c * o..(f + 1) * c * o],
                                &xv[src * c..(src + 1) * c],
                                g_row,
                                1,
                                c,
                                o,
                            );
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(l, c, gx)?);
                    accumulate(&mut grads, *w, Tensor::from_vec(width * c, o, gw)?);
                    accumulate(&mut grads, *b, Tensor::row(&gb));
                }
                Op::MeanGroups { x, group } => {
                    let (l, c) = self.nodes[x.0].value.shape();
                    let inv = 1.0 / *group as f64;
                    let mut gx = Vec::with_capacity(l * c);
                    for t in 0..l {
                        gx.extend(g.row_slice(t / group).iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(l, c, gx)?);
                }
                Op::Cosine { a, b, na, nb } => {
                    let (n, d) = self.nodes[a.0].value.shape();
                    let m = nb.len();
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let mut ga = vec![0.0; n * d];
                    let mut gb = vec![0.0; m * d];
                    for i in 0..n {
                        if na[i] == 0.0 {
                            continue;
                        }
                        let arow = &av[i * d..(i + 1) * d];
                        for j in 0..m {
                            if nb[j] == 0.0 {
                                continue;
                            }
                            let gij = g.data()[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cos = node.value.data()[i * m + j];
                            let brow = &bv[j * d..(j + 1) * d];
                            let inv = 1.0 / (na[i] * nb[j]);
                            let ca = cos / (na[i] * na[i]);
                            let cb = cos / (nb[j] * nb[j]);
                            for q in 0..d {
                                ga[i * d + q] += gij * (brow[q] * inv - ca * arow[q]);
                                gb[j * d + q] += gij * (arow[q] * inv - cb * brow[q]);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(n, d, ga)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(m, d, gb)?);
                }
                Op::SharedAttention(sa) => {
                    let (nq, d) = self.nodes[sa.q.0].value.shape();
                    let (kr, dv) = self.nodes[sa.v.0].value.shape();
                    let batch = sa.lens.len();
                    let qv = self.nodes[sa.q.0].value.data();
                    let kv = self.nodes[sa.k.0].value.data();
                    let vv = self.nodes[sa.v.0].value.data();
                    let mut gq = vec![0.0; nq * d];
                    let mut gk = vec![0.0; kr * d];
                    let mut gv = vec![0.0; kr * dv];
                    let mut gs = Vec::new();
                    for (i, &len) in sa.lens.iter().enumerate() {
                        let p = &sa.probs[i];
                        for j in 0..nq {
                            let go = g.row_slice(i * nq + j);
                            let prow = &p[j * len..(j + 1) * len];
                            // dP = go · vᵀ, dS = P ⊙ (dP − ⟨dP, P⟩)
                            gs.clear();
                            let mut dot = 0.0;
                            for (t, &pv) in prow.iter().enumerate() {
                                let r = t * batch + i;
                                let dp: f64 = go
                                    .iter()
                                    .zip(&vv[r * dv..(r + 1) * dv])
                                    .map(|(a, b)| a * b)
                                    .sum();
                                for (acc, x) in gv[r * dv..(r + 1) * dv].iter_mut().zip(go) {
                                    *acc += pv * x;
                                }
                                dot += dp * pv;
                                gs.push(dp);
                            }
                            let qrow = &qv[j * d..(j + 1) * d];
                            for (t, &pv) in prow.iter().enumerate() {
                                let ds = pv * (gs[t] - dot) * sa.scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let r = t * batch + i;
                                let krow = &kv[r * d..(r + 1) * d];
                                for q in 0..d {
                                    gq[j * d + q] += ds * krow[q];
                                    gk[r * d + q] += ds * qrow[q];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, sa.q, Tensor::from_vec(nq, d, gq)?);
                    accumulate(&mut grads, sa.k, Tensor::from_vec(kr, d, gk)?);
                    accumulate(&mut grads, sa.v, Tensor::from_vec(kr, dv, gv)?);
                }
            }
        }
        Ok(Grads::from_entries(param_grads))
    }
}

fn zip_map(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::row(&[1.0, 2.0])).unwrap();
        let mut tape = Tape::new(&ps);
        let xn = tape.param(x);
        let sq = tape.mul(xn, xn).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn tape_cannot_be_reused() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new(&ps);
        let xn = tape.param(x);
        let y = tape.exp(xn);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::row(&[0.3, -0.2])).unwrap();
        let mut tape = Tape::new(&ps);
        let wn = tape.param(w);
        let y = tape.tanh(wn);
        let g = tape.backward_with(y, Tensor::zeros(1, 2)).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.input(Tensor::zeros(2, 3));
        let b = tape.input(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert!(node.starts_with("matmul#")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.input(Tensor::row(&[0.0, 0.0]));
        let b = tape.input(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let c = tape.cosine_rows(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);
    }
}
