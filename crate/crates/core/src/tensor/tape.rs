use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Inputs are referenced by [`Var`].
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Adds a length-`c` row vector to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MaskedMeanRows { x: Var, rows: Vec<usize> },
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize },
    GroupedLogSoftmax { x: Var, groups: Vec<Vec<usize>> },
    Log(Var),
    Exp(Var),
    Sum(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
    /// Per-op cache for the backward rule (normalized rows, probabilities...).
    aux: Vec<T>,
}

/// Records ops in execution order and replays them backward.
///
/// `backward` may run once per tape; a second call is rejected with a usage
/// error so gradients are never silently doubled.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of recorded ops whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Count of ops that take part in differentiation.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad(), Vec::new())
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, Vec::new())
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false, Vec::new()))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).unwrap()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn cols(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap()
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.len() / self.cols(v)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool, aux: Vec<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Config(format!("{op}: expected a 2-d tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = ops::matmul_nn(self.value(a), self.value(b), m, k, n);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), g, Vec::new()))
    }

    /// `x + bias` where `bias` is a row of length `cols(x)` added to each row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.cols(x);
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), g, Vec::new()))
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, g, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let g = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), out, op, g, Vec::new())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let st = T::of(s);
        self.map(x, Op::Scale(x, s), |v| v * st)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), ops::gelu_scalar)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x), self.cols(x));
        let g = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), g, Vec::new())
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` (length `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.cols(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xhat, rstd) = ops::normalize_rows(self.value(x), c, eps);
        let gm = self.value(gamma);
        let bt = self.value(beta);
        let out: Vec<T> = xhat
            .chunks(c)
            .flat_map(|row| row.iter().zip(gm).zip(bt).map(|((&v, &g), &b)| v * g + b))
            .collect();
        let mut aux = xhat;
        aux.extend(rstd);
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gamma, beta }, g, aux))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", x)?;
        let out = ops::transpose(self.value(x), r, c);
        let g = self.any_grad(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), g, Vec::new()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), g, Vec::new()))
    }

    /// Row gather: output row `o` is input row `index[o]`. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Config(format!("gather_rows: row {bad} out of {r}")));
        }
        if index.is_empty() {
            return Err(Error::Config("gather_rows: empty index".into()));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(vec![index.len(), c], out, Op::GatherRows { x, index }, g, Vec::new()))
    }

    /// Concatenation over the last axis of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Config("concat_cols: no inputs".into()))?;
        let r = self.rows(first);
        for &x in xs {
            if self.rows(x) != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
        }
        let total: usize = xs.iter().map(|&x| self.cols(x)).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let c = self.cols(x);
                out.extend_from_slice(&self.value(x)[i * c..(i + 1) * c]);
            }
        }
        let g = self.any_grad(xs);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(xs.to_vec()), g, Vec::new()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if len == 0 || start + len > c {
            return Err(Error::Config(format!(
                "slice_cols: [{start}, {}) outside {c} columns",
                start + len
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, g, Vec::new()))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Config("concat_rows: no inputs".into()))?;
        let c = self.cols(first);
        let mut out = Vec::new();
        let mut r = 0;
        for &x in xs {
            if self.cols(x) != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            r += self.rows(x);
            out.extend_from_slice(self.value(x));
        }
        let g = self.any_grad(xs);
        Ok(self.push(vec![r, c], out, Op::ConcatRows(xs.to_vec()), g, Vec::new()))
    }

    /// Mean of the selected rows, as a `1 x cols` matrix.
    pub fn masked_mean_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if rows.is_empty() {
            return Err(Error::Config("masked_mean_rows: empty index set".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Config(format!("masked_mean_rows: row {bad} out of {r}")));
        }
        let out = ops::masked_mean_rows(self.value(x), c, &rows);
        let g = self.any_grad(&[x]);
        Ok(self.push(vec![1, c], out, Op::MaskedMeanRows { x, rows }, g, Vec::new()))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| {
                let d = (x - y).f64();
                d * d
            })
            .sum();
        let g = self.any_grad(&[a, b]);
        Ok(self.push(vec![1], vec![T::of(s / n)], Op::Mse(a, b), g, Vec::new()))
    }

    /// Mean cross-entropy of row logits against class targets. Rows whose
    /// target equals `ignore` add neither loss nor gradient; if every row is
    /// ignored the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, ignore: usize) -> Result<Var> {
        let (r, c) = (self.rows(logits), self.cols(logits));
        if targets.len() != r {
            return Err(Error::Config(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= c) {
            return Err(Error::Config(format!("cross_entropy: target {bad} outside {c} classes")));
        }
        let logp = ops::log_softmax_rows(self.value(logits), c);
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t != ignore {
                total -= logp[i * c + t].f64();
                count += 1;
            }
        }
        let v = if count == 0 { 0.0 } else { total / count as f64 };
        let g = self.any_grad(&[logits]);
        let aux = logp.into_iter().map(|v| v.exp()).collect();
        Ok(self.push(vec![1], vec![T::of(v)], Op::CrossEntropy { logits, targets, ignore }, g, aux))
    }

    /// Log of summed softmax probabilities per column group; see
    /// [`ops::grouped_log_softmax`].
    pub fn grouped_log_softmax(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&k| k >= c)) {
            return Err(Error::Config(format!("grouped_log_softmax: bad groups for {c} columns")));
        }
        let out = ops::grouped_log_softmax(self.value(x), c, &groups);
        let lse: Vec<T> = self
            .value(x)
            .chunks(c)
            .map(|row| {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
            })
            .collect();
        let g = self.any_grad(&[x]);
        let ng = groups.len();
        Ok(self.push(vec![r, ng], out, Op::GroupedLogSoftmax { x, groups }, g, lse))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let g = self.any_grad(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), g, Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &x in xs {
            acc = Some(match acc {
                None => x,
                Some(a) => self.add(a, x)?,
            });
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop(node, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        let add_into = |buf: &mut [T], src: &[T]| buf.iter_mut().zip(src).for_each(|(b, &s)| *b = *b + s);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |buf| {
                    let bt = ops::transpose(bv, k, n);
                    ops::matmul_acc(g, &bt, m, n, k, buf);
                });
                acc(*b, &mut |buf| {
                    let at = ops::transpose(av, m, k);
                    ops::matmul_acc(&at, g, k, m, n, buf);
                });
            }
            Op::AddRow(x, b) => {
                let c = nodes[b.0].value.len();
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &v)| *o = *o - v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| {
                    for ((o, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o = *o + gv * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = T::of(*s);
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v * s));
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o = *o + gv * ops::gelu_grad_scalar(v);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((orow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let c = *node.shape.last().unwrap();
                let n = node.value.len();
                let (xhat, rstd) = node.aux.split_at(n);
                let gm = &nodes[gamma.0].value;
                acc(*gamma, &mut |buf| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *o = *o + gv * xv;
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for grow in g.chunks(c) {
                        add_into(buf, grow);
                    }
                });
                acc(*x, &mut |buf| {
                    let inv_c = T::of(1.0 / c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    for (r, ((orow, grow), xrow)) in
                        buf.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate()
                    {
                        for ((d, &gv), &gmv) in dxhat.iter_mut().zip(grow).zip(gm) {
                            *d = gv * gmv;
                        }
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat.iter().zip(xrow).map(|(&d, &xv)| d * xv).sum();
                        for ((o, &d), &xv) in orow.iter_mut().zip(&dxhat).zip(xrow) {
                            *o = *o + rstd[r] * (d - inv_c * sum_d - xv * inv_c * sum_dx);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(*x, &mut |buf| add_into(buf, &ops::transpose(g, c, r)));
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::GatherRows { x, index } => {
                let c = *node.shape.last().unwrap();
                acc(*x, &mut |buf| {
                    for (o, &i) in index.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = *node.shape.last().unwrap();
                let mut offset = 0;
                for &x in xs {
                    let c = self.cols(x);
                    acc(x, &mut |buf| {
                        for (orow, grow) in buf.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(orow, &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let w = *node.shape.last().unwrap();
                let c = self.cols(*x);
                acc(*x, &mut |buf| {
                    for (orow, grow) in buf.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut orow[*start..*start + w], grow);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(x, &mut |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::MaskedMeanRows { x, rows } => {
                let c = *node.shape.last().unwrap();
                let inv = T::of(1.0 / rows.len() as f64);
                acc(*x, &mut |buf| {
                    for &r in rows {
                        for (o, &gv) in buf[r * c..(r + 1) * c].iter_mut().zip(g) {
                            *o = *o + gv * inv;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = g[0] * T::of(2.0 / av.len() as f64);
                acc(*a, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o = *o + k * (x - y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(av).zip(bv) {
                        *o = *o - k * (x - y);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, ignore } => {
                let c = self.cols(*logits);
                let probs = &node.aux;
                let count = targets.iter().filter(|&&t| t != *ignore).count();
                if count == 0 {
                    return;
                }
                let k = g[0] * T::of(1.0 / count as f64);
                acc(*logits, &mut |buf| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let orow = &mut buf[i * c..(i + 1) * c];
                        for (j, (o, &p)) in orow.iter_mut().zip(&probs[i * c..(i + 1) * c]).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *o = *o + k * (p - onehot);
                        }
                    }
                });
            }
            Op::GroupedLogSoftmax { x, groups } => {
                let c = self.cols(*x);
                let ng = groups.len();
                let xv = &nodes[x.0].value;
                let lse = &node.aux;
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for r in 0..lse.len() {
                        let xrow = &xv[r * c..(r + 1) * c];
                        let grow = &g[r * ng..(r + 1) * ng];
                        let yrow = &y[r * ng..(r + 1) * ng];
                        let gsum: T = grow.iter().copied().sum();
                        let orow = &mut buf[r * c..(r + 1) * c];
                        for (k, o) in orow.iter_mut().enumerate() {
                            *o = *o - (xrow[k] - lse[r]).exp() * gsum;
                        }
                        for (gi, cols) in groups.iter().enumerate() {
                            // p_k / q_g = exp(x_k - lse - y_g)
                            let shift = lse[r] + yrow[gi];
                            for &k in cols {
                                orow[k] = orow[k] + grow[gi] * (xrow[k] - shift).exp();
                            }
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *o = *o + gv / v;
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |buf| {
                    for ((o, &gv), &v) in buf.iter_mut().zip(g).zip(y) {
                        *o = *o + gv * v;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g[0])),
        }
    }
}
