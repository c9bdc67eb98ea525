use super::scalar::{gemm, MatMut, MatRef};
use super::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    OverwriteRows {
        x: Var,
        src: Var,
        positions: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, u32)>,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter; `None` when the loss does not depend on it.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }

    /// Gradient with respect to a recorded node (e.g. an input leaf).
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("consistent shape"))
    }
}

/// Records a forward computation for later differentiation.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, l: &[usize], r: &[usize]) -> Error {
    Error::Shape {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param graph").get(*id),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The parameter with index `id` in the bound store (one node per parameter).
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .and_then(|p| p.id(name))
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let n = tb.cols();
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            T::zero(),
            MatMut::new(&mut out, m, n),
        );
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    /// `a + row`, broadcasting a `[1, n]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o = *o + r;
            }
        }
        let shape = ta.shape().to_vec();
        let ng = self.needs(&[a, row]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(&[a]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(a, c), ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = tx.shape().to_vec();
        let ng = self.needs(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Softmax(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|&v| gelu(v).0).collect();
        let shape = tx.shape().to_vec();
        let ng = self.needs(&[x]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Gelu(x), ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (v, h) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Invalid(format!(
                    "embedding id {id} out of range for table {:?}",
                    tt.shape()
                )));
            }
            out.extend_from_slice(tt.row(id as usize));
        }
        if ids.is_empty() {
            return Err(Error::Invalid("embedding lookup with no ids".into()));
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            Tensor::from_rows(ids.len(), h, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::from_rows(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= tx.rows() {
                return Err(Error::Invalid(format!("gather row {i} of {:?}", tx.shape())));
            }
            out.extend_from_slice(tx.row(i));
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_rows(idx.len(), cols, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Copy of `x` whose rows at `positions` are replaced by the rows of `src`.
    pub fn overwrite_rows(&mut self, x: Var, src: Var, positions: &[usize]) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(src));
        if ts.cols() != tx.cols() || ts.rows() != positions.len() {
            return Err(shape_err("overwrite_rows", tx.shape(), ts.shape()));
        }
        let cols = tx.cols();
        let mut out = tx.data().to_vec();
        let mut seen = vec![false; tx.rows()];
        for (i, &p) in positions.iter().enumerate() {
            if p >= tx.rows() || seen[p] {
                return Err(Error::Invalid(format!("bad overwrite position {p}")));
            }
            seen[p] = true;
            out[p * cols..(p + 1) * cols].copy_from_slice(ts.row(i));
        }
        let shape = tx.shape().to_vec();
        let ng = self.needs(&[x, src]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::OverwriteRows {
                x,
                src,
                positions: positions.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[N, 3H]` holding queries, keys and values side by side.
    /// Attention is confined to each `(start, len)` segment; with `causal`
    /// a row attends only to rows at or before it within its segment.
    /// Returns `[N, H]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        segments: &[(usize, usize)],
        causal: bool,
    ) -> Result<Var> {
        let t = self.value(qkv);
        let (n, w) = (t.rows(), t.cols());
        if w % 3 != 0 || (w / 3) % heads != 0 {
            return Err(shape_err("attention", t.shape(), &[heads]));
        }
        let h = w / 3;
        let dh = h / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut covered = 0;
        for &(s, len) in segments {
            if s != covered || len == 0 {
                return Err(Error::Invalid("attention segments must tile the rows".into()));
            }
            covered += len;
        }
        if covered != n {
            return Err(Error::Invalid("attention segments must tile the rows".into()));
        }
        let probs_len: usize = segments.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = vec![T::zero(); probs_len];
        let mut out = vec![T::zero(); n * h];
        let src = MatRef::new(t.data(), n, w);
        let mut off = 0;
        for &(s, len) in segments {
            for hd in 0..heads {
                let p = &mut probs[off..off + len * len];
                let q = src.block(s, len, hd * dh, dh);
                let k = src.block(s, len, h + hd * dh, dh);
                let v = src.block(s, len, 2 * h + hd * dh, dh);
                gemm(scale, q, k.t(), T::zero(), MatMut::new(p, len, len));
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    if causal {
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                    } else {
                        softmax_in_place(row);
                    }
                }
                let o = MatMut::new(&mut out, n, h).block(s, len, hd * dh, dh);
                gemm(T::one(), MatRef::new(p, len, len), v, T::zero(), o);
                off += len * len;
            }
        }
        let ng = self.needs(&[qkv]);
        Ok(self.push(
            Tensor::from_rows(n, h, out),
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood over rows with a target; rows with
    /// `None` are excluded from both sum and count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        if targets.len() != tl.rows() {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let rows: Vec<(usize, u32)> = targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (i, t)))
            .collect();
        if rows.is_empty() {
            return Err(Error::Invalid("cross_entropy without targets".into()));
        }
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = T::zero();
        for &(r, t) in &rows {
            if t as usize >= v {
                return Err(Error::Invalid(format!("target {t} outside vocabulary {v}")));
            }
            let row = tl.row(r);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total = total + lse - row[t as usize];
            probs.extend(p);
        }
        let loss = total / T::from_f64(rows.len() as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut params: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        for (id, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &grads[v.0] {
                    let shape = self.value(*v).shape().to_vec();
                    params[id] = Some(Tensor::new(shape, g.clone())?);
                }
            }
        }
        let shapes = (0..self.nodes.len())
            .map(|i| self.value(Var(i)).shape().to_vec())
            .collect();
        Ok(Gradients {
            params,
            nodes: grads,
            shapes,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, op: &Op<T>, me: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(me));
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let gm = MatRef::new(g, m, n);
                if let Some(da) = self.acc(grads, *a) {
                    gemm(T::one(), gm, MatRef::new(tb.data(), k, n).t(), T::one(), MatMut::new(da, m, k));
                }
                if let Some(db) = self.acc(grads, *b) {
                    gemm(T::one(), MatRef::new(ta.data(), m, k).t(), gm, T::one(), MatMut::new(db, k, n));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * tb[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
                let n = out.cols();
                if let Some(d) = self.acc(grads, *r) {
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let rows = out.rows();
                let gam = self.value(*gamma).data().to_vec();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..n {
                            dg[c] = dg[c] + g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let nf = T::from_f64(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * gam[c];
                            m1 = m1 + dxhat[c];
                            m2 = m2 + dxhat[c] * xhat[r * n + c];
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for c in 0..n {
                            let i = r * n + c;
                            dx[i] = dx[i] + rstd[r] * (dxhat[c] - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let y = out.data();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..out.rows() {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = dx[r * n + c] + ys[c] * (gs[c] - dot);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] = dx[i] + g[i] * gelu(xs[i]).1;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let h = out.cols();
                if let Some(dt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * h..(id as usize + 1) * h];
                        dst.iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(d) = self.acc(grads, *p) {
                        d.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let h = out.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        dx[i * h..(i + 1) * h]
                            .iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::OverwriteRows { x, src, positions } => {
                let h = out.cols();
                if let Some(dx) = self.acc(grads, *x) {
                    let mut masked = g.to_vec();
                    for &p in positions {
                        masked[p * h..(p + 1) * h].iter_mut().for_each(|v| *v = T::zero());
                    }
                    dx.iter_mut().zip(&masked).for_each(|(d, &x)| *d = *d + x);
                }
                if let Some(ds) = self.acc(grads, *src) {
                    for (i, &p) in positions.iter().enumerate() {
                        ds[i * h..(i + 1) * h]
                            .iter_mut()
                            .zip(&g[p * h..(p + 1) * h])
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let t = self.value(*qkv);
                let (n, w) = (t.rows(), t.cols());
                let h = w / 3;
                let dh = h / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let Some(dqkv) = self.acc(grads, *qkv) else {
                    return;
                };
                let src = MatRef::new(t.data(), n, w);
                let gout = MatRef::new(g, n, h);
                let mut off = 0;
                let mut dp = Vec::new();
                for &(s, len) in segments {
                    for hd in 0..*heads {
                        let p = &probs[off..off + len * len];
                        off += len * len;
                        let pm = MatRef::new(p, len, len);
                        let q = src.block(s, len, hd * dh, dh);
                        let k = src.block(s, len, h + hd * dh, dh);
                        let v = src.block(s, len, 2 * h + hd * dh, dh);
                        let go = gout.block(s, len, hd * dh, dh);
                        // dV += P^T dO
                        gemm(
                            T::one(),
                            pm.t(),
                            go,
                            T::one(),
                            MatMut::new(dqkv, n, w).block(s, len, 2 * h + hd * dh, dh),
                        );
                        // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
                        dp.clear();
                        dp.resize(len * len, T::zero());
                        gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, len, len));
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut dp[i * len..(i + 1) * len];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..len {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        let ds = MatRef::new(&dp, len, len);
                        gemm(
                            scale,
                            ds,
                            k,
                            T::one(),
                            MatMut::new(dqkv, n, w).block(s, len, hd * dh, dh),
                        );
                        gemm(
                            scale,
                            ds.t(),
                            q,
                            T::one(),
                            MatMut::new(dqkv, n, w).block(s, len, h + hd * dh, dh),
                        );
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let coef = g[0] / T::from_f64(rows.len() as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for (k, &(r, t)) in rows.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let d = &mut dl[r * v..(r + 1) * v];
                        for c in 0..v {
                            d[c] = d[c] + coef * p[c];
                        }
                        d[t as usize] = d[t as usize] - coef;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v = *v + g[0]);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// GELU value and derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x);
    (y, dy)
}
