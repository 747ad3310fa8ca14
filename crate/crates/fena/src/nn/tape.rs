//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its result plus enough context to
//! run the chain rule backwards. Construction order is a topological order,
//! so `backward` is a single reverse sweep. Gradients are only materialized
//! for subgraphs that reach a parameter leaf.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleConst(usize, f64),
    /// Elementwise multiply by a one-element tensor (trainable scalar).
    MulScalar(usize, usize),
    MatMul(usize, usize),
    AddBiasRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Sin(usize),
    Exp(usize),
    Recip(usize),
    SumAll(usize),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
    },
    AddChanBias(usize, usize),
    MaxPool1d {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape node, produced by `Tape::backward`.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `v`, if any path
    /// required it. Taking twice yields `None`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.by_node[v.0].take()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Errors if the node holds any NaN or infinity, naming `context`.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.nodes[v.0].value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, "sub", |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0]
            .value
            .zip_map(&self.nodes[b.0].value, "mul", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * k);
        let rg = self.needs(a);
        self.push(v, Op::ScaleConst(a.0, k), rg)
    }

    /// Broadcast multiply by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.nodes[s.0].value.item().map_err(|_| Error::ShapeMismatch {
            op: "mul_scalar",
            detail: format!("scalar operand has shape {:?}", self.nodes[s.0].value.shape()),
        })?;
        let v = self.nodes[a.0].value.map(|x| x * sv);
        let rg = self.needs(a) || self.needs(s);
        Ok(self.push(v, Op::MulScalar(a.0, s.0), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a.0, b.0), rg))
    }

    /// Row-broadcast bias add: `a` is m×n, `bias` has n entries.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.dim2()?;
        let bv = &self.nodes[bias.0].value;
        if bv.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                detail: format!("matrix {:?} vs bias {:?}", self.nodes[a.0].value.shape(), bv.shape()),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        {
            let src = self.nodes[a.0].value.data();
            let b = bv.data();
            let dst = out.data_mut();
            for r in 0..m {
                for c in 0..n {
                    dst[r * n + c] = src[r * n + c] + b[c];
                }
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBiasRow(a.0, bias.0), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        let rg = self.needs(a);
        self.push(v, Op::Tanh(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.needs(a);
        self.push(v, Op::Sigmoid(a.0), rg)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::sin);
        let rg = self.needs(a);
        self.push(v, Op::Sin(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::exp);
        let rg = self.needs(a);
        self.push(v, Op::Exp(a.0), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| 1.0 / x);
        let rg = self.needs(a);
        self.push(v, Op::Recip(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Columns `[start, start+len)` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.dim2()?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice {}..{} out of {} columns", start, start + len, n),
            });
        }
        let mut out = Tensor::zeros(&[m, len]);
        {
            let src = self.nodes[a.0].value.data();
            let dst = out.data_mut();
            for r in 0..m {
                dst[r * len..(r + 1) * len]
                    .copy_from_slice(&src[r * n + start..r * n + start + len]);
            }
        }
        let rg = self.needs(a);
        Ok(self.push(out, Op::SliceCols { x: a.0, start, len }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.nodes[a.0].value.dim2()?;
        let (mb, nb) = self.nodes[b.0].value.dim2()?;
        if ma != mb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts differ: {} vs {}", ma, mb),
            });
        }
        let mut out = Tensor::zeros(&[ma, na + nb]);
        {
            let sa = self.nodes[a.0].value.data();
            let sb = self.nodes[b.0].value.data();
            let dst = out.data_mut();
            for r in 0..ma {
                dst[r * (na + nb)..r * (na + nb) + na].copy_from_slice(&sa[r * na..(r + 1) * na]);
                dst[r * (na + nb) + na..(r + 1) * (na + nb)]
                    .copy_from_slice(&sb[r * nb..(r + 1) * nb]);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), rg))
    }

    /// Valid (no padding) 1-D convolution. `x` is B×C_in×L, `w` is
    /// C_out×C_in×K; output length is `(L − K)/stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (bsz, cin, l) = self.nodes[x.0].value.dim3()?;
        let (cout, cin_w, k) = self.nodes[w.0].value.dim3()?;
        if cin != cin_w || l < k || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                detail: format!(
                    "input {:?} incompatible with kernel {:?} at stride {}",
                    self.nodes[x.0].value.shape(),
                    self.nodes[w.0].value.shape(),
                    stride
                ),
            });
        }
        let lout = (l - k) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, cout, lout]);
        {
            let xs = self.nodes[x.0].value.data();
            let ws = self.nodes[w.0].value.data();
            let dst = out.data_mut();
            for b in 0..bsz {
                for co in 0..cout {
                    for lo in 0..lout {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            let xoff = b * cin * l + ci * l + lo * stride;
                            let woff = co * cin * k + ci * k;
                            for kk in 0..k {
                                s += xs[xoff + kk] * ws[woff + kk];
                            }
                        }
                        dst[b * cout * lout + co * lout + lo] = s;
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(
            out,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                stride,
            },
            rg,
        ))
    }

    /// Per-channel bias add on a B×C×L node; `bias` has C entries.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (bsz, c, l) = self.nodes[x.0].value.dim3()?;
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                detail: format!(
                    "input {:?} vs bias {:?}",
                    self.nodes[x.0].value.shape(),
                    self.nodes[bias.0].value.shape()
                ),
            });
        }
        let mut out = Tensor::zeros(&[bsz, c, l]);
        {
            let xs = self.nodes[x.0].value.data();
            let bs = self.nodes[bias.0].value.data();
            let dst = out.data_mut();
            for b in 0..bsz {
                for ci in 0..c {
                    let off = b * c * l + ci * l;
                    for li in 0..l {
                        dst[off + li] = xs[off + li] + bs[ci];
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddChanBias(x.0, bias.0), rg))
    }

    /// Max pooling over the length axis of a B×C×L node. Ties resolve to the
    /// earliest position, which keeps backward deterministic.
    pub fn max_pool1d(&mut self, x: Var, width: usize, stride: usize) -> Result<Var> {
        let (bsz, c, l) = self.nodes[x.0].value.dim3()?;
        if width == 0 || stride == 0 || l < width {
            return Err(Error::ShapeMismatch {
                op: "max_pool1d",
                detail: format!("length {} with window {} stride {}", l, width, stride),
            });
        }
        let lout = (l - width) / stride + 1;
        let mut out = Tensor::zeros(&[bsz, c, lout]);
        let mut argmax = vec![0usize; bsz * c * lout];
        {
            let xs = self.nodes[x.0].value.data();
            let dst = out.data_mut();
            for b in 0..bsz {
                for ci in 0..c {
                    let off = b * c * l + ci * l;
                    for lo in 0..lout {
                        let base = off + lo * stride;
                        let mut best = xs[base];
                        let mut best_i = base;
                        for kk in 1..width {
                            if xs[base + kk] > best {
                                best = xs[base + kk];
                                best_i = base + kk;
                            }
                        }
                        let oi = b * c * lout + ci * lout + lo;
                        dst[oi] = best;
                        argmax[oi] = best_i;
                    }
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, Op::MaxPool1d { x: x.0, argmax }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        let rg = self.needs(a);
        Ok(self.push(v, Op::Reshape(a.0), rg))
    }

    /// Reverse sweep from a one-element root. Returns gradients for every
    /// node on a path from a `param` leaf to the root.
    pub fn backward(&mut self, root: Var) -> Result<Grads> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "root must be scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: usize,
        update: impl FnOnce(&mut Tensor),
    ) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let shape = self.nodes[target].value.shape().to_vec();
        let slot = grads[target].get_or_insert_with(|| Tensor::zeros(&shape));
        update(slot);
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), bi) in acc.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for ((o, gi), ai) in acc.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::ScaleConst(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi * k;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[*s].value.data()[0];
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi * sv;
                    }
                });
                self.accumulate(grads, *s, |acc| {
                    let dot: f64 = av.data().iter().zip(g.data()).map(|(x, gi)| x * gi).sum();
                    acc.data_mut()[0] += dot;
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.nodes[*a].requires_grad {
                    let shape = av.shape().to_vec();
                    let slot = grads[*a].get_or_insert_with(|| Tensor::zeros(&shape));
                    g.matmul_acc(false, bv, true, slot)?;
                }
                if self.nodes[*b].requires_grad {
                    let shape = bv.shape().to_vec();
                    let slot = grads[*b].get_or_insert_with(|| Tensor::zeros(&shape));
                    av.matmul_acc(true, g, false, slot)?;
                }
            }
            Op::AddBiasRow(a, bias) => {
                self.accumulate(grads, *a, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                let (m, n) = self.nodes[*a].value.dim2()?;
                self.accumulate(grads, *bias, |acc| {
                    let gd = g.data();
                    let out = acc.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            out[c] += gd[r * n + c];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), yi) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), yi) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Sin(a) => {
                let xv = &self.nodes[*a].value;
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), xi) in acc.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o += gi * xi.cos();
                    }
                });
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), yi) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi;
                    }
                });
            }
            Op::Recip(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(grads, *a, |acc| {
                    for ((o, gi), yi) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o -= gi * yi * yi;
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, |acc| {
                    for o in acc.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.nodes[*x].value.dim2()?;
                let (start, len) = (*start, *len);
                self.accumulate(grads, *x, |acc| {
                    let gd = g.data();
                    let out = acc.data_mut();
                    for r in 0..m {
                        for c in 0..len {
                            out[r * n + start + c] += gd[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.nodes[*a].value.dim2()?;
                let nb = self.nodes[*b].value.dim2()?.1;
                let n = na + nb;
                self.accumulate(grads, *a, |acc| {
                    let gd = g.data();
                    let out = acc.data_mut();
                    for r in 0..m {
                        for c in 0..na {
                            out[r * na + c] += gd[r * n + c];
                        }
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    let gd = g.data();
                    let out = acc.data_mut();
                    for r in 0..m {
                        for c in 0..nb {
                            out[r * nb + c] += gd[r * n + na + c];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, stride } => {
                let (bsz, cin, l) = self.nodes[*x].value.dim3()?;
                let (cout, _, k) = self.nodes[*w].value.dim3()?;
                let lout = (l - k) / stride + 1;
                let stride = *stride;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                self.accumulate(grads, *x, |acc| {
                    let gd = g.data();
                    let ws = wv.data();
                    let out = acc.data_mut();
                    for b in 0..bsz {
                        for co in 0..cout {
                            for lo in 0..lout {
                                let gi = gd[b * cout * lout + co * lout + lo];
                                for ci in 0..cin {
                                    let xoff = b * cin * l + ci * l + lo * stride;
                                    let woff = co * cin * k + ci * k;
                                    for kk in 0..k {
                                        out[xoff + kk] += gi * ws[woff + kk];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |acc| {
                    let gd = g.data();
                    let xs = xv.data();
                    let out = acc.data_mut();
                    for b in 0..bsz {
                        for co in 0..cout {
                            for lo in 0..lout {
                                let gi = gd[b * cout * lout + co * lout + lo];
                                for ci in 0..cin {
                                    let xoff = b * cin * l + ci * l + lo * stride;
                                    let woff = co * cin * k + ci * k;
                                    for kk in 0..k {
                                        out[woff + kk] += gi * xs[xoff + kk];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AddChanBias(x, bias) => {
                let (bsz, c, l) = self.nodes[*x].value.dim3()?;
                self.accumulate(grads, *x, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *bias, |acc| {
                    let gd = g.data();
                    let out = acc.data_mut();
                    for b in 0..bsz {
                        for ci in 0..c {
                            let off = b * c * l + ci * l;
                            for li in 0..l {
                                out[ci] += gd[off + li];
                            }
                        }
                    }
                });
            }
            Op::MaxPool1d { x, argmax } => {
                self.accumulate(grads, *x, |acc| {
                    let out = acc.data_mut();
                    for (oi, &src) in argmax.iter().enumerate() {
                        out[src] += g.data()[oi];
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |acc| {
                    for (o, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Checks d(scalar graph)/d(leaf) against central differences for every
    /// leaf entry. `build` must construct the same graph for given leaves.
    fn check_gradients(
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let mut grads = tape.backward(root).unwrap();

        for (li, leaf) in leaves.iter().enumerate() {
            let got = grads.take(vars[li]).expect("missing leaf gradient");
            let fd = central_diff(leaf.data(), 1e-6, |vals| {
                let mut probe = leaves.clone();
                probe[li] = Tensor::new(leaf.shape().to_vec(), vals.to_vec()).unwrap();
                let mut t = Tape::new();
                let vs: Vec<Var> = probe.iter().map(|x| t.param(x.clone())).collect();
                let r = build(&mut t, &vs);
                t.value(r).item().unwrap()
            });
            let err = max_rel_err(got.data(), &fd);
            assert!(
                err < tol,
                "leaf {} rel err {:.3e} exceeds {:.1e}\nad: {:?}\nfd: {:?}",
                li,
                err,
                tol,
                got.data(),
                fd
            );
        }
    }

    #[test]
    fn grad_add_sub_mul_scale() {
        check_gradients(
            &[&[2, 3], &[2, 3], &[2, 3]],
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[2]).unwrap();
                let c = t.mul(b, v[0]).unwrap();
                let d = t.scale(c, 0.7);
                t.sum_all(d)
            },
            1,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_bias() {
        check_gradients(
            &[&[3, 4], &[4, 2], &[2]],
            |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let y = t.add_bias_row(y, v[2]).unwrap();
                let y = t.tanh(y);
                t.sum_all(y)
            },
            2,
            1e-6,
        );
    }

    #[test]
    fn grad_elementwise_nonlinearities() {
        check_gradients(
            &[&[2, 5]],
            |t, v| {
                let a = t.sigmoid(v[0]);
                let b = t.sin(a);
                let c = t.exp(b);
                let d = t.tanh(c);
                t.mean_all(d)
            },
            3,
            1e-6,
        );
    }

    #[test]
    fn grad_recip_and_mul_scalar() {
        check_gradients(
            &[&[1], &[3, 3]],
            |t, v| {
                // Keep the scalar away from zero so 1/x stays well behaved.
                let shifted = t.scale(v[0], 0.25);
                let two = t.constant(Tensor::scalar(2.0));
                let s = t.add(shifted, two).unwrap();
                let inv = t.recip(s);
                let y = t.mul_scalar(v[1], inv).unwrap();
                t.sum_all(y)
            },
            4,
            1e-6,
        );
    }

    #[test]
    fn grad_slice_concat() {
        check_gradients(
            &[&[2, 6], &[2, 3]],
            |t, v| {
                let a = t.slice_cols(v[0], 1, 3).unwrap();
                let b = t.mul(a, v[1]).unwrap();
                let c = t.concat_cols(b, v[1]).unwrap();
                let d = t.tanh(c);
                t.sum_all(d)
            },
            5,
            1e-6,
        );
    }

    #[test]
    fn grad_conv_pool_chain() {
        check_gradients(
            &[&[2, 2, 9], &[3, 2, 3], &[3]],
            |t, v| {
                let y = t.conv1d(v[0], v[1], 1).unwrap();
                let y = t.add_chan_bias(y, v[2]).unwrap();
                let y = t.tanh(y);
                let y = t.max_pool1d(y, 2, 2).unwrap();
                let n = t.value(y).len();
                let y = t.reshape(y, vec![1, n]).unwrap();
                t.sum_all(y)
            },
            6,
            1e-5,
        );
    }

    #[test]
    fn grad_strided_conv() {
        check_gradients(
            &[&[1, 3, 11], &[2, 3, 5]],
            |t, v| {
                let y = t.conv1d(v[0], v[1], 2).unwrap();
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            7,
            1e-6,
        );
    }

    #[test]
    fn constant_subgraphs_get_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(p, c).unwrap();
        let root = tape.sum_all(y);
        let mut grads = tape.backward(root).unwrap();
        assert_eq!(grads.take(p).unwrap().data(), &[5.0]);
        assert!(grads.take(c).is_none());
    }

    #[test]
    fn backward_rejects_nonscalar_root() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn shape_mismatches_rejected_before_compute() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.concat_cols(a, b).is_err());
        let w = tape.param(Tensor::zeros(&[4, 9, 3]));
        let x = tape.param(Tensor::zeros(&[1, 2, 8]));
        assert!(tape.conv1d(x, w, 1).is_err());
        let k = tape.param(Tensor::zeros(&[4, 2, 9]));
        assert!(tape.conv1d(x, k, 1).is_err(), "kernel longer than input");
    }

    #[test]
    fn check_finite_names_context() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(0.0));
        let r = tape.recip(a);
        let err = tape.check_finite(r, "reciprocal block").unwrap_err();
        assert!(err.to_string().contains("reciprocal block"));
    }

    #[test]
    fn mul_by_self_doubles_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(p, p).unwrap();
        let root = tape.sum_all(sq);
        let mut grads = tape.backward(root).unwrap();
        assert_eq!(grads.take(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn same_graph_same_gradient_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = rand_tensor(&mut rng, &[4, 6]);
            let w = rand_tensor(&mut rng, &[6, 3]);
            let mut tape = Tape::new();
            let xv = tape.param(x);
            let wv = tape.param(w);
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.tanh(y);
            let root = tape.mean_all(y);
            let mut grads = tape.backward(root).unwrap();
            (
                tape.value(root).item().unwrap(),
                grads.take(wv).unwrap().into_data(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert!(l1 == l2 && g1 == g2, "bitwise determinism violated");
    }
}
