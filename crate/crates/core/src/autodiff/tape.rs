use std::sync::Arc;

use super::{gemm, AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const SMOOTH_L1_BETA: f64 = 1.0;
const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    GatherRows { src: Var, index: Vec<Option<usize>> },
    Reshape(Var),
    SwapAxes12(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    SmoothL1 { pred: Var, target: Arc<Tensor>, weight: Arc<Tensor>, norm: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch-matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add-row",
            Op::MulRow(..) => "mul-row",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat-rows",
            Op::GatherRows { .. } => "gather-rows",
            Op::Reshape(..) => "reshape",
            Op::SwapAxes12(..) => "swap-axes",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Gelu(..) => "gelu",
            Op::SmoothL1 { .. } => "smooth-l1",
            Op::CrossEntropy { .. } => "cross-entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a reverse sweep is a valid reverse-topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn acc(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matmul: `[G, m, k] x [G, k, n]`, or `[G, m, k] x [G, n, k]^T`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || mismatch("batch-matmul", format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for gi in 0..g {
            gemm(
                m,
                k,
                n,
                &da[gi * m * k..(gi + 1) * m * k],
                k,
                1,
                &db[gi * k * n..(gi + 1) * k * n],
                rsb,
                csb,
                &mut out[gi * m * n..(gi + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    fn binary(
        &mut self,
        kind: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(kind, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    fn row_broadcast(
        &mut self,
        kind: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.numel() != c || ta.shape().is_empty() {
            return Err(mismatch(kind, format!("{:?} with row {:?}", ta.shape(), tr.shape())));
        }
        let r = tr.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, r[i % c])).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, op, rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast("add-row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast("mul-row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(mismatch("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| mismatch("concat-rows", "no inputs".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(mismatch("concat-rows", format!("{:?} with cols {}", t.shape(), cols)));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of a 2-D tensor; `None` yields a zero row. Indices are
    /// constants: only the gathered values carry gradient.
    pub fn gather_rows(&mut self, src: Var, index: &[Option<usize>]) -> Result<Var, AutodiffError> {
        let t = self.value(src);
        if t.shape().len() != 2 {
            return Err(mismatch("gather-rows", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; index.len() * c];
        for (o, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= r {
                    return Err(AutodiffError::IndexOutOfRange { op: "gather-rows", index: i, len: r });
                }
                data[o * c..(o + 1) * c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(&[src]);
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows { src, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`. Used to split/merge attention heads.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 4 {
            return Err(mismatch("swap-axes", format!("{:?}", s)));
        }
        let (n0, n1, n2, n3) = (s[0], s[1], s[2], s[3]);
        let out = swap12(t.data(), n0, n1, n2, n3);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n0, n2, n1, n3], out)?, Op::SwapAxes12(a), rg))
    }

    /// Row-wise softmax over the last dimension, stabilised by subtracting
    /// the row max. Masked-out entries (`mask[i] == false`) get probability 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(AutodiffError::NonFinite { op: "softmax" });
        }
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(mismatch("softmax", format!("mask {} for {:?}", m.len(), t.shape())));
            }
        }
        let out = softmax_forward(t.data(), t.cols(), mask)?;
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let c = t.cols();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(mismatch(
                "layer-norm",
                format!("{:?} with gamma {:?}", t.shape(), self.value(gamma).shape()),
            ));
        }
        let rows = t.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Weighted smooth-L1 (beta = 1) against a constant target, normalised by
    /// the total weight. Zero total weight yields 0.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor, weight: Tensor) -> Result<Var, AutodiffError> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weight.shape() {
            return Err(mismatch(
                "smooth-l1",
                format!("pred {:?} target {:?} weight {:?}", p.shape(), target.shape(), weight.shape()),
            ));
        }
        let wsum: f64 = weight.data().iter().sum();
        let norm = if wsum > 0.0 { 1.0 / wsum } else { 0.0 };
        let mut total = 0.0;
        for ((&x, &y), &w) in p.data().iter().zip(target.data()).zip(weight.data()) {
            if w != 0.0 {
                total += w * smooth_l1_value(x - y);
            }
        }
        let rg = self.rg(&[pred]);
        let op = Op::SmoothL1 { pred, target: Arc::new(target), weight: Arc::new(weight), norm };
        Ok(self.push(Tensor::scalar(total * norm), op, rg))
    }

    /// Mean cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(mismatch("cross-entropy", format!("logits {:?}, {} targets", t.shape(), targets.len())));
        }
        let c = t.cols();
        if let Some(&bad) = targets.iter().find(|&&k| k >= c) {
            return Err(AutodiffError::IndexOutOfRange { op: "cross-entropy", index: bad, len: c });
        }
        if !t.is_finite() {
            return Err(AutodiffError::NonFinite { op: "cross-entropy" });
        }
        let probs = softmax_forward(t.data(), c, None)?;
        let mut loss = 0.0;
        for (r, &k) in targets.iter().enumerate() {
            let row = &t.data()[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[k];
        }
        loss /= targets.len().max(1) as f64;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar root; `d root / d root = 1`.
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        let shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(AutodiffError::NotScalar { shape });
        }
        self.backward_seeded(&[(root, Tensor::full(&shape, 1.0))])
    }

    /// Reverse sweep seeded with explicit output gradients (vector-Jacobian
    /// product). Seeds for the same node accumulate.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor)]) -> Result<(), AutodiffError> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) && g.numel() != self.value(*v).numel() {
                return Err(mismatch("backward", format!("seed {:?} for {:?}", g.shape(), self.shape(*v))));
            }
            let shape = self.shape(*v).to_vec();
            acc(&mut grads[v.0], &shape, |d| {
                for (x, y) in d.iter_mut().zip(g.data()) {
                    *x += y;
                }
            });
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if want(*a) {
                    // dA = dC B^T
                    acc(&mut grads[a.0], ta.shape(), |d| gemm(m, n, k, gd, n, 1, tb.data(), 1, n, d, 1.0));
                }
                if want(*b) {
                    // dB = A^T dC
                    acc(&mut grads[b.0], tb.shape(), |d| gemm(k, m, n, ta.data(), 1, k, gd, n, 1, d, 1.0));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (g_, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                if want(*a) {
                    acc(&mut grads[a.0], ta.shape(), |d| {
                        for gi in 0..g_ {
                            let dc = &gd[gi * m * n..(gi + 1) * m * n];
                            let bb = &tb.data()[gi * k * n..(gi + 1) * k * n];
                            let da = &mut d[gi * m * k..(gi + 1) * m * k];
                            // B stored [k, n] (or [n, k] when transposed): dA = dC * B^T
                            let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                            gemm(m, n, k, dc, n, 1, bb, rs, cs, da, 1.0);
                        }
                    });
                }
                if want(*b) {
                    acc(&mut grads[b.0], tb.shape(), |d| {
                        for gi in 0..g_ {
                            let dc = &gd[gi * m * n..(gi + 1) * m * n];
                            let aa = &ta.data()[gi * m * k..(gi + 1) * m * k];
                            let db = &mut d[gi * k * n..(gi + 1) * k * n];
                            if *trans_b {
                                // B is [n, k]: dB = dC^T A
                                gemm(n, m, k, dc, 1, n, aa, k, 1, db, 1.0);
                            } else {
                                // dB = A^T dC
                                gemm(k, m, n, aa, 1, k, dc, n, 1, db, 1.0);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if want(*a) {
                    acc(&mut grads[a.0], node.value.shape(), |d| add_into(d, gd, 1.0));
                }
                if want(*b) {
                    acc(&mut grads[b.0], node.value.shape(), |d| add_into(d, gd, sign));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    acc(&mut grads[a.0], ta.shape(), |d| {
                        for ((x, &dy), &y) in d.iter_mut().zip(gd).zip(tb.data()) {
                            *x += dy * y;
                        }
                    });
                }
                if want(*b) {
                    acc(&mut grads[b.0], tb.shape(), |d| {
                        for ((x, &dy), &y) in d.iter_mut().zip(gd).zip(ta.data()) {
                            *x += dy * y;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                if want(*a) {
                    acc(&mut grads[a.0], node.value.shape(), |d| add_into(d, gd, *s));
                }
            }
            Op::AddRow(a, row) => {
                if want(*a) {
                    acc(&mut grads[a.0], node.value.shape(), |d| add_into(d, gd, 1.0));
                }
                if want(*row) {
                    let c = node.value.cols();
                    acc(&mut grads[row.0], self.shape(*row), |d| {
                        for (i, &dy) in gd.iter().enumerate() {
                            d[i % c] += dy;
                        }
                    });
                }
            }
            Op::MulRow(a, row) => {
                let c = node.value.cols();
                let (ta, tr) = (self.value(*a), self.value(*row));
                if want(*a) {
                    acc(&mut grads[a.0], ta.shape(), |d| {
                        for (i, (x, &dy)) in d.iter_mut().zip(gd).enumerate() {
                            *x += dy * tr.data()[i % c];
                        }
                    });
                }
                if want(*row) {
                    acc(&mut grads[row.0], tr.shape(), |d| {
                        for (i, (&dy, &x)) in gd.iter().zip(ta.data()).enumerate() {
                            d[i % c] += dy * x;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if want(*a) {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    acc(&mut grads[a.0], self.shape(*a), |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[j * r + i] += gd[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if want(*p) {
                        acc(&mut grads[p.0], self.shape(*p), |d| add_into(d, &gd[off..off + len], 1.0));
                    }
                    off += len;
                }
            }
            Op::GatherRows { src, index } => {
                if want(*src) {
                    let c = node.value.cols();
                    acc(&mut grads[src.0], self.shape(*src), |d| {
                        for (o, idx) in index.iter().enumerate() {
                            if let Some(r) = *idx {
                                add_into(&mut d[r * c..(r + 1) * c], &gd[o * c..(o + 1) * c], 1.0);
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if want(*a) {
                    acc(&mut grads[a.0], self.shape(*a), |d| add_into(d, gd, 1.0));
                }
            }
            Op::SwapAxes12(a) => {
                if want(*a) {
                    let s = node.value.shape();
                    let back = swap12(gd, s[0], s[1], s[2], s[3]);
                    acc(&mut grads[a.0], self.shape(*a), |d| add_into(d, &back, 1.0));
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc(&mut grads[a.0], self.shape(*a), |d| {
                        for r in 0..node.value.rows() {
                            let ys = &y[r * c..(r + 1) * c];
                            let gs = &gd[r * c..(r + 1) * c];
                            let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                d[r * c + j] += ys[j] * (gs[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if want(*a) {
                    let s = gd[0];
                    acc(&mut grads[a.0], self.shape(*a), |d| d.iter_mut().for_each(|x| *x += s));
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let s = gd[0] / self.value(*a).numel().max(1) as f64;
                    acc(&mut grads[a.0], self.shape(*a), |d| d.iter_mut().for_each(|x| *x += s));
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                if want(*x) {
                    acc(&mut grads[x.0], self.shape(*x), |d| {
                        let nf = c as f64;
                        for r in 0..rows {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                let dxh = gd[r * c + j] * gam[j];
                                s1 += dxh;
                                s2 += dxh * xhat[r * c + j];
                            }
                            for j in 0..c {
                                let dxh = gd[r * c + j] * gam[j];
                                d[r * c + j] += inv_std[r] / nf * (nf * dxh - s1 - xhat[r * c + j] * s2);
                            }
                        }
                    });
                }
                if want(*gamma) {
                    acc(&mut grads[gamma.0], self.shape(*gamma), |d| {
                        for (i, &dy) in gd.iter().enumerate() {
                            d[i % c] += dy * xhat[i];
                        }
                    });
                }
                if want(*beta) {
                    acc(&mut grads[beta.0], self.shape(*beta), |d| {
                        for (i, &dy) in gd.iter().enumerate() {
                            d[i % c] += dy;
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let xs = self.value(*a).data();
                    acc(&mut grads[a.0], self.shape(*a), |d| {
                        for ((o, &dy), &x) in d.iter_mut().zip(gd).zip(xs) {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let th = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            *o += dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                        }
                    });
                }
            }
            Op::SmoothL1 { pred, target, weight, norm } => {
                if want(*pred) {
                    let s = gd[0] * norm;
                    let p = self.value(*pred).data();
                    acc(&mut grads[pred.0], self.shape(*pred), |d| {
                        for (i, o) in d.iter_mut().enumerate() {
                            let w = weight.data()[i];
                            if w != 0.0 {
                                *o += s * w * smooth_l1_grad(p[i] - target.data()[i]);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if want(*logits) {
                    let c = node_cols(self.value(*logits));
                    let s = gd[0] / targets.len().max(1) as f64;
                    acc(&mut grads[logits.0], self.shape(*logits), |d| {
                        for (r, &k) in targets.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == k { 1.0 } else { 0.0 };
                                d[r * c + j] += s * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }
}

fn node_cols(t: &Tensor) -> usize {
    t.cols()
}

fn add_into(d: &mut [f64], g: &[f64], s: f64) {
    if s == 1.0 {
        for (x, y) in d.iter_mut().zip(g) {
            *x += y;
        }
    } else {
        for (x, y) in d.iter_mut().zip(g) {
            *x += s * y;
        }
    }
}

fn swap12(src: &[f64], n0: usize, n1: usize, n2: usize, n3: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..n0 {
        for b in 0..n1 {
            for c in 0..n2 {
                let s = ((a * n1 + b) * n2 + c) * n3;
                let o = ((a * n2 + c) * n1 + b) * n3;
                out[o..o + n3].copy_from_slice(&src[s..s + n3]);
            }
        }
    }
    out
}

pub(crate) fn softmax_forward(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Result<Vec<f64>, AutodiffError> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return Ok(out);
    }
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let allowed = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(AutodiffError::NoAttendableTokens);
        }
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for j in 0..cols {
            if allowed(j) {
                let e = (row[j] - mx).exp();
                o[j] = e;
                z += e;
            }
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

pub fn smooth_l1_value(e: f64) -> f64 {
    let a = e.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * e * e / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < SMOOTH_L1_BETA {
        e / SMOOTH_L1_BETA
    } else {
        e.signum()
    }
}
