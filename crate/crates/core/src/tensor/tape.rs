//! Wengert-list reverse mode. Every operation appends a node holding its
//! value and the parents it read; `backward` replays the list in reverse.
//! Parents always precede children, so the list is acyclic by construction.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, LAYER_NORM_EPS};
use super::{dropout_mask, Float, RngStream, Tensor};
use crate::error::{PlrError, Result};

/// Addresses one key/value row: `part` selects a key/value source tensor,
/// `row` the row within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyRef {
    pub part: u32,
    pub row: u32,
}

impl KeyRef {
    pub fn new(part: usize, row: usize) -> Self {
        Self {
            part: part as u32,
            row: row as u32,
        }
    }
}

/// Attention probabilities (before dropout) saved by an attention node.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub keys: Rc<Vec<Vec<KeyRef>>>,
    pub heads: usize,
    /// `probs[query][head][slot]`
    pub probs: Vec<Vec<Vec<T>>>,
}

struct AttentionNode<T> {
    q: usize,
    k_parts: Vec<usize>,
    v_parts: Vec<usize>,
    keys: Rc<Vec<Vec<KeyRef>>>,
    offsets: Vec<usize>,
    heads: usize,
    probs: Vec<T>,
    mask: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulBT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MaskMul(usize, Rc<Vec<T>>),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        index: Rc<Vec<usize>>,
    },
    ConcatRows(Vec<usize>),
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Rc<Vec<usize>>,
        probs: Vec<T>,
    },
    PairwiseKl {
        logits: usize,
        group: usize,
        probs: Vec<T>,
        logp: Vec<T>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
    Attention(Box<AttentionNode<T>>),
    WeightedRowSum {
        weights: usize,
        rows: usize,
    },
    Sum(usize),
    Mean(usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MaskMul(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } | Op::PairwiseKl { logits, .. } => vec![*logits],
            Op::NormalizeRows { x, .. } => vec![*x],
            Op::Attention(node) => {
                let mut p = vec![node.q];
                p.extend(&node.k_parts);
                p.extend(&node.v_parts);
                p
            }
            Op::WeightedRowSum { weights, rows } => vec![*weights, *rows],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations for one forward/backward pass. Confined to a single
/// thread; build one tape per training step or evaluation batch.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

fn shape_err<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> PlrError {
    PlrError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn dims2<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(PlrError::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf. Leaves with `requires_grad` accumulate gradients
    /// across `backward` calls until `zero_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].needs_grad)
        };
        self.push_raw(value, op, needs_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a leaf, if any `backward` reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| PlrError::Input("concat of zero tensors".into()))?
            .value();
        let cols = dims2("concat_rows", &first)?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            let (r, c) = dims2("concat_rows", &v)?;
            if c != cols {
                return Err(shape_err("concat_rows", &first, &v));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    /// Multi-head scaled dot-product attention over explicit key lists.
    ///
    /// Query row `i` attends to the rows `keys[i]`, each addressing one of
    /// the key/value sources by part index. Optional dropout is applied to
    /// the attention probabilities.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, T>,
        k_parts: &[Var<'t, T>],
        v_parts: &[Var<'t, T>],
        keys: Rc<Vec<Vec<KeyRef>>>,
        heads: usize,
        dropout: Option<(f64, &mut RngStream)>,
    ) -> Result<Var<'t, T>> {
        let qv = q.value();
        let (nq, d) = dims2("attention", &qv)?;
        if heads == 0 || d % heads != 0 {
            return Err(PlrError::Config(format!(
                "model dimension {d} not divisible by {heads} heads"
            )));
        }
        if keys.len() != nq {
            return Err(PlrError::Input(format!(
                "attention has {nq} queries but {} key lists",
                keys.len()
            )));
        }
        if k_parts.len() != v_parts.len() {
            return Err(PlrError::Input("key/value part counts differ".into()));
        }
        let kv: Vec<Rc<Tensor<T>>> = k_parts.iter().map(|v| v.value()).collect();
        let vv: Vec<Rc<Tensor<T>>> = v_parts.iter().map(|v| v.value()).collect();
        for (k, v) in kv.iter().zip(&vv) {
            if k.shape() != v.shape() || dims2("attention", k)?.1 != d {
                return Err(shape_err("attention", k, v));
            }
        }
        let mut offsets = Vec::with_capacity(nq + 1);
        offsets.push(0);
        for list in keys.iter() {
            if list.is_empty() {
                return Err(PlrError::Input("attention query with no keys".into()));
            }
            for key in list {
                let part = kv.get(key.part as usize).ok_or_else(|| {
                    PlrError::Input(format!("key part {} out of range", key.part))
                })?;
                if key.row as usize >= part.rows() {
                    return Err(PlrError::Input(format!(
                        "key row {} out of range for part {}",
                        key.row, key.part
                    )));
                }
            }
            offsets.push(offsets.last().unwrap() + list.len());
        }
        let slots = *offsets.last().unwrap();
        let mask = match dropout {
            Some((rate, rng)) if rate > 0.0 => Some(dropout_mask::<T>(slots * heads, rate, rng)?),
            Some((rate, _)) => {
                dropout_mask::<T>(0, rate, &mut RngStream::new(0))?;
                None
            }
            None => None,
        };

        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); slots * heads];
        let mut out = vec![T::zero(); nq * d];
        let mut scores = Vec::new();
        for i in 0..nq {
            let list = &keys[i];
            let qrow = qv.row(i);
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                scores.clear();
                for key in list {
                    let krow = kv[key.part as usize].row(key.row as usize);
                    scores.push(kernels::dot(&qrow[hs.clone()], &krow[hs.clone()]) * scale);
                }
                kernels::softmax_in_place(&mut scores);
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (s, (key, &p)) in list.iter().zip(&scores).enumerate() {
                    let slot = (offsets[i] + s) * heads + h;
                    probs[slot] = p;
                    let a = match &mask {
                        Some(m) => p * m[slot],
                        None => p,
                    };
                    if a == T::zero() {
                        continue;
                    }
                    let vrow = &vv[key.part as usize].row(key.row as usize)[hs.clone()];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += a * x;
                    }
                }
            }
        }
        let node = AttentionNode {
            q: q.id,
            k_parts: k_parts.iter().map(|v| v.id).collect(),
            v_parts: v_parts.iter().map(|v| v.id).collect(),
            keys,
            offsets,
            heads,
            probs,
            mask,
        };
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention(Box::new(node)),
        ))
    }

    /// The pre-dropout attention probabilities of an attention node.
    pub fn attention_record(&self, var: Var<'_, T>) -> Option<AttentionRecord<T>> {
        let nodes = self.nodes.borrow();
        match &nodes[var.id].op {
            Op::Attention(node) => {
                let probs = node
                    .keys
                    .iter()
                    .enumerate()
                    .map(|(i, list)| {
                        (0..node.heads)
                            .map(|h| {
                                (0..list.len())
                                    .map(|s| node.probs[(node.offsets[i] + s) * node.heads + h])
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                Some(AttentionRecord {
                    keys: Rc::clone(&node.keys),
                    heads: node.heads,
                    probs,
                })
            }
            _ => None,
        }
    }

    /// Populates leaf gradients with d(loss)/d(leaf), adding to whatever a
    /// previous call left there.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let root = loss.id;
        {
            let nodes = self.nodes.borrow();
            if nodes[root].value.len() != 1 {
                return Err(PlrError::Input(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    nodes[root].value.shape()
                )));
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = {
            let n = self.nodes.borrow().len();
            (0..n).map(|_| None).collect()
        };
        grads[root] = Some(vec![T::one()]);
        {
            let nodes = self.nodes.borrow();
            for id in (0..=root).rev() {
                let node = &nodes[id];
                if !node.needs_grad {
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                if matches!(node.op, Op::Leaf) {
                    grads[id] = Some(g);
                    continue;
                }
                if node.op.parents().iter().any(|&p| p >= id) {
                    return Err(PlrError::State(format!(
                        "tape node {id} reads a later node"
                    )));
                }
                backprop(&nodes, id, &g, &mut grads);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(nodes[id].op, Op::Leaf) {
                    match &mut nodes[id].grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<T: Float>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop<T: Float>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let need = |p: usize| nodes[p].needs_grad;
    let val = |p: usize| &*nodes[p].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if need(*a) {
                let da = acc(grads, *a, m * k);
                // dA = G · Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        da[i * k + p] += kernels::dot(grow, bv.row(p));
                    }
                }
            }
            if need(*b) {
                let db = acc(grads, *b, k * n);
                kernels::matmul_at_b_acc(av.data(), g, db, m, k, n);
            }
        }
        Op::MatMulBT(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            if need(*a) {
                let da = acc(grads, *a, m * k);
                kernels::matmul_acc(g, bv.data(), da, m, n, k);
            }
            if need(*b) {
                let db = acc(grads, *b, n * k);
                kernels::matmul_at_b_acc(g, av.data(), db, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if need(p) {
                    acc(grads, p, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Sub(a, b) => {
            if need(*a) {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d += x);
            }
            if need(*b) {
                acc(grads, *b, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if need(*a) {
                let da = acc(grads, *a, g.len());
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += x * y;
                }
            }
            if need(*b) {
                let db = acc(grads, *b, g.len());
                for ((d, &x), &y) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += x * y;
                }
            }
        }
        Op::AddRow(a, r) => {
            if need(*a) {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d += x);
            }
            if need(*r) {
                let cols = val(*r).len();
                let dr = acc(grads, *r, cols);
                for chunk in g.chunks(cols) {
                    dr.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::Scale(a, c) => {
            if need(*a) {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d += x * *c);
            }
        }
        Op::MaskMul(a, mask) => {
            if need(*a) {
                let da = acc(grads, *a, g.len());
                for ((d, &x), &m) in da.iter_mut().zip(g).zip(mask.iter()) {
                    *d += x * m;
                }
            }
        }
        Op::Gelu(a) => {
            if need(*a) {
                let av = val(*a);
                let da = acc(grads, *a, g.len());
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(av.data()) {
                    *d += x * kernels::gelu_grad(y);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let cols = gv.len();
            let rows = g.len() / cols;
            if need(*gain) {
                let dg = acc(grads, *gain, cols);
                for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((d, &a), &b) in dg.iter_mut().zip(gr).zip(xr) {
                        *d += a * b;
                    }
                }
            }
            if need(*bias) {
                let db = acc(grads, *bias, cols);
                for gr in g.chunks(cols) {
                    db.iter_mut().zip(gr).for_each(|(d, &a)| *d += a);
                }
            }
            if need(*x) {
                let dx = acc(grads, *x, g.len());
                let n = T::lit(cols as f64);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    for ((dh, &a), &w) in dxhat.iter_mut().zip(gr).zip(gv.data()) {
                        *dh = a * w;
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = kernels::dot(&dxhat, xr) / n;
                    let out = &mut dx[r * cols..(r + 1) * cols];
                    for ((o, &dh), &xh) in out.iter_mut().zip(&dxhat).zip(xr) {
                        *o += rstd[r] * (dh - mean_d - xh * mean_dx);
                    }
                }
            }
        }
        Op::Gather { table, index } => {
            if need(*table) {
                let tv = val(*table);
                let cols = tv.cols();
                let dt = acc(grads, *table, tv.len());
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut dt[src * cols..(src + 1) * cols];
                    dst.iter_mut()
                        .zip(&g[r * cols..(r + 1) * cols])
                        .for_each(|(d, &x)| *d += x);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if need(p) {
                    acc(grads, p, len)
                        .iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, &x)| *d += x);
                }
                offset += len;
            }
        }
        Op::SoftmaxRows(a) => {
            if need(*a) {
                let y = val(id);
                let cols = y.cols();
                let da = acc(grads, *a, g.len());
                for ((dr, gr), yr) in da
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let s = kernels::dot(gr, yr);
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yv * (gv - s);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            if need(*logits) {
                let cols = val(*logits).cols();
                let scale = g[0] / T::lit(targets.len() as f64);
                let dl = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut dl[r * cols..(r + 1) * cols];
                    for (d, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                        *d += scale * p;
                    }
                    row[t] -= scale;
                }
            }
        }
        Op::PairwiseKl {
            logits,
            group,
            probs,
            logp,
        } => {
            if need(*logits) && *group > 1 {
                let cols = val(*logits).cols();
                let rows = probs.len() / cols;
                let groups = rows / group;
                let nn = T::lit(*group as f64);
                let scale = g[0] / T::lit((groups * group * (group - 1)) as f64);
                let dl = acc(grads, *logits, probs.len());
                let mut psum = vec![T::zero(); cols];
                let mut lsum = vec![T::zero(); cols];
                let mut glp = vec![T::zero(); cols];
                for gi in 0..groups {
                    psum.iter_mut().for_each(|x| *x = T::zero());
                    lsum.iter_mut().for_each(|x| *x = T::zero());
                    for r in gi * group..(gi + 1) * group {
                        for v in 0..cols {
                            psum[v] += probs[r * cols + v];
                            lsum[v] += logp[r * cols + v];
                        }
                    }
                    for r in gi * group..(gi + 1) * group {
                        let p = &probs[r * cols..(r + 1) * cols];
                        let lp = &logp[r * cols..(r + 1) * cols];
                        for v in 0..cols {
                            glp[v] = nn * p[v] * (lp[v] + T::one()) - p[v] * lsum[v] - psum[v];
                        }
                        let s: T = glp.iter().copied().sum();
                        let out = &mut dl[r * cols..(r + 1) * cols];
                        for v in 0..cols {
                            out[v] += scale * (glp[v] - p[v] * s);
                        }
                    }
                }
            }
        }
        Op::NormalizeRows { x, norms } => {
            if need(*x) {
                let y = val(id);
                let cols = y.cols();
                let dx = acc(grads, *x, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yr = y.row(r);
                    let s = kernels::dot(gr, yr);
                    for ((d, &gv), &yv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                        *d += (gv - yv * s) / norm;
                    }
                }
            }
        }
        Op::Attention(node) => attention_backward(nodes, node, g, grads),
        Op::WeightedRowSum { weights, rows } => {
            let (wv, zv) = (val(*weights), val(*rows));
            let (b, m) = (wv.shape()[0], wv.shape()[1]);
            let d = zv.cols();
            if need(*weights) {
                let dw = acc(grads, *weights, b * m);
                for bi in 0..b {
                    for mi in 0..m {
                        dw[bi * m + mi] +=
                            kernels::dot(&g[bi * d..(bi + 1) * d], zv.row(bi * m + mi));
                    }
                }
            }
            if need(*rows) {
                let dz = acc(grads, *rows, b * m * d);
                for bi in 0..b {
                    for mi in 0..m {
                        let w = wv.data()[bi * m + mi];
                        let r = bi * m + mi;
                        for (dd, &gv) in dz[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(&g[bi * d..(bi + 1) * d])
                        {
                            *dd += w * gv;
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if need(*a) {
                let len = val(*a).len();
                acc(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if need(*a) {
                let len = val(*a).len();
                let s = g[0] / T::lit(len as f64);
                acc(grads, *a, len).iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

fn attention_backward<T: Float>(
    nodes: &[Node<T>],
    node: &AttentionNode<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let qv = &*nodes[node.q].value;
    let d = qv.cols();
    let heads = node.heads;
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let kv: Vec<&Tensor<T>> = node.k_parts.iter().map(|&p| &*nodes[p].value).collect();
    let vv: Vec<&Tensor<T>> = node.v_parts.iter().map(|&p| &*nodes[p].value).collect();
    let need_q = nodes[node.q].needs_grad;
    let need_k: Vec<bool> = node.k_parts.iter().map(|&p| nodes[p].needs_grad).collect();
    let need_v: Vec<bool> = node.v_parts.iter().map(|&p| nodes[p].needs_grad).collect();

    let mut dq = vec![T::zero(); qv.len()];
    let mut dk: Vec<Vec<T>> = kv.iter().map(|k| vec![T::zero(); k.len()]).collect();
    let mut dv: Vec<Vec<T>> = vv.iter().map(|v| vec![T::zero(); v.len()]).collect();
    let mut da = Vec::new();
    for (i, list) in node.keys.iter().enumerate() {
        let grow = &g[i * d..(i + 1) * d];
        let qrow = qv.row(i);
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let gh = &grow[hs.clone()];
            da.clear();
            let mut weighted = T::zero();
            for (s, key) in list.iter().enumerate() {
                let slot = (node.offsets[i] + s) * heads + h;
                let p = node.probs[slot];
                let m = node.mask.as_ref().map_or(T::one(), |m| m[slot]);
                let (part, row) = (key.part as usize, key.row as usize);
                if need_v[part] {
                    let a = p * m;
                    let dst = &mut dv[part][row * d + h * dh..row * d + (h + 1) * dh];
                    dst.iter_mut().zip(gh).for_each(|(o, &x)| *o += a * x);
                }
                let dprob = kernels::dot(gh, &vv[part].row(row)[hs.clone()]) * m;
                weighted += dprob * p;
                da.push(dprob);
            }
            for (s, key) in list.iter().enumerate() {
                let slot = (node.offsets[i] + s) * heads + h;
                let ds = node.probs[slot] * (da[s] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let (part, row) = (key.part as usize, key.row as usize);
                if need_q {
                    let krow = &kv[part].row(row)[hs.clone()];
                    dq[i * d + h * dh..i * d + (h + 1) * dh]
                        .iter_mut()
                        .zip(krow)
                        .for_each(|(o, &x)| *o += ds * x);
                }
                if need_k[part] {
                    let dst = &mut dk[part][row * d + h * dh..row * d + (h + 1) * dh];
                    dst.iter_mut()
                        .zip(&qrow[hs.clone()])
                        .for_each(|(o, &x)| *o += ds * x);
                }
            }
        }
    }
    if need_q {
        acc(grads, node.q, dq.len())
            .iter_mut()
            .zip(&dq)
            .for_each(|(o, &x)| *o += x);
    }
    for (j, &p) in node.k_parts.iter().enumerate() {
        if need_k[j] {
            acc(grads, p, dk[j].len())
                .iter_mut()
                .zip(&dk[j])
                .for_each(|(o, &x)| *o += x);
        }
    }
    for (j, &p) in node.v_parts.iter().enumerate() {
        if need_v[j] {
            acc(grads, p, dv[j].len())
                .iter_mut()
                .zip(&dv[j])
                .for_each(|(o, &x)| *o += x);
        }
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn binary_same_shape(
        self,
        other: Var<'t, T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op_name, &a, &b));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, op))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = dims2("matmul_bt", &a)?;
        let (n, k2) = dims2("matmul_bt", &b)?;
        if k != k2 {
            return Err(shape_err("matmul_bt", &a, &b));
        }
        let bt = kernels::transpose(b.data(), n, k);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(a.data(), &bt, &mut out, m, k, n);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulBT(self.id, other.id),
        ))
    }

    /// Adds a `[d]` (or `[1×d]`) row to every row of `self`.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, r) = (self.value(), row.value());
        let cols = a.cols();
        if r.len() != cols || a.shape().len() != 2 {
            return Err(shape_err("add_row", &a, &r));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            chunk.iter_mut().zip(r.data()).for_each(|(x, &y)| *x += y);
        }
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddRow(self.id, row.id),
        ))
    }

    pub fn scale(self, c: T) -> Result<Var<'t, T>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * c).collect();
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::Scale(self.id, c),
        ))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(self, mask: Rc<Vec<T>>) -> Result<Var<'t, T>> {
        let a = self.value();
        if mask.len() != a.len() {
            return Err(PlrError::Input(format!(
                "mask of length {} for tensor of {} entries",
                mask.len(),
                a.len()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(self.tape.push(
            Tensor::new(a.shape().to_vec(), data)?,
            Op::MaskMul(self.id, mask),
        ))
    }

    /// Inverted dropout drawn from `rng`; the identity when `rate == 0`.
    pub fn dropout(self, rate: f64, rng: &mut RngStream) -> Result<Var<'t, T>> {
        if rate == 0.0 {
            return Ok(self);
        }
        let mask = dropout_mask::<T>(self.value().len(), rate, rng)?;
        self.mask_mul(Rc::new(mask))
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        let a = self.value();
        Ok(self.tape.push(a.gelu(), Op::Gelu(self.id)))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let cols = x.cols();
        if gv.len() != cols || bv.len() != cols || x.shape().len() != 2 {
            return Err(shape_err("layer_norm", &x, &gv));
        }
        let rows = x.rows();
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Row gather: `out[r] = self[index[r]]`.
    pub fn gather_rows(self, index: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let t = self.value();
        let cols = t.cols();
        let rows = t.rows();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            if i >= rows {
                return Err(PlrError::Input(format!(
                    "row index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        Ok(self.tape.push(
            Tensor::new(vec![index.len(), cols], data)?,
            Op::Gather {
                table: self.id,
                index,
            },
        ))
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let t = self.value();
        let cols = t.cols();
        if cols == 0 {
            return Err(PlrError::Input("softmax over an empty axis".into()));
        }
        let mut data = t.data().to_vec();
        data.chunks_mut(cols).for_each(kernels::softmax_in_place);
        Ok(self.tape.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::SoftmaxRows(self.id),
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let t = self.value();
        let (rows, cols) = dims2("cross_entropy", &t)?;
        if targets.len() != rows || rows == 0 {
            return Err(PlrError::Input(format!(
                "{} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = vec![T::zero(); t.len()];
        let mut loss = T::zero();
        for (r, &target) in targets.iter().enumerate() {
            if target >= cols {
                return Err(PlrError::Input(format!(
                    "target index {target} outside vocabulary of {cols}"
                )));
            }
            let lp = &mut probs[r * cols..(r + 1) * cols];
            kernels::log_softmax(t.row(r), lp);
            loss -= lp[target];
            lp.iter_mut().for_each(|x| *x = x.exp());
        }
        loss /= T::lit(rows as f64);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets,
                probs,
            },
        ))
    }

    /// Rows are split into consecutive groups of `group`; within each group
    /// the distributions `softmax(row)` are compared over all ordered pairs
    /// of distinct rows. Returns the mean pairwise KL divergence, averaged
    /// over groups (zero when `group == 1`).
    pub fn pairwise_kl(self, group: usize) -> Result<Var<'t, T>> {
        let t = self.value();
        let (rows, cols) = dims2("pairwise_kl", &t)?;
        if group == 0 || rows % group != 0 || rows == 0 {
            return Err(PlrError::Input(format!(
                "{rows} rows do not split into groups of {group}"
            )));
        }
        let mut logp = vec![T::zero(); t.len()];
        for r in 0..rows {
            kernels::log_softmax(t.row(r), &mut logp[r * cols..(r + 1) * cols]);
        }
        let probs: Vec<T> = logp.iter().map(|x| x.exp()).collect();
        let mut total = T::zero();
        if group > 1 {
            let groups = rows / group;
            let nn = T::lit(group as f64);
            for gi in 0..groups {
                let range = gi * group * cols..(gi + 1) * group * cols;
                let mut self_term = T::zero();
                for (p, l) in probs[range.clone()].iter().zip(&logp[range.clone()]) {
                    self_term += *p * *l;
                }
                let mut cross = T::zero();
                for v in 0..cols {
                    let mut ps = T::zero();
                    let mut ls = T::zero();
                    for r in gi * group..(gi + 1) * group {
                        ps += probs[r * cols + v];
                        ls += logp[r * cols + v];
                    }
                    cross += ps * ls;
                }
                total += nn * self_term - cross;
            }
            total /= T::lit((groups * group * (group - 1)) as f64);
        }
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::PairwiseKl {
                logits: self.id,
                group,
                probs,
                logp,
            },
        ))
    }

    /// Scales each row to unit Euclidean norm; zero rows are an error.
    pub fn normalize_rows(self) -> Result<Var<'t, T>> {
        let t = self.value();
        let (rows, cols) = dims2("normalize_rows", &t)?;
        let mut norms = Vec::with_capacity(rows);
        let mut data = t.data().to_vec();
        for chunk in data.chunks_mut(cols.max(1)) {
            let norm = kernels::dot(chunk, chunk).sqrt();
            if norm == T::zero() || !norm.is_finite() {
                return Err(PlrError::Input("zero-norm row cannot be normalized".into()));
            }
            chunk.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        Ok(self.tape.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::NormalizeRows { x: self.id, norms },
        ))
    }

    /// `out[b] = Σ_m self[b, m] · rows[b·M + m]` for weights `self: [B×M]`.
    pub fn weighted_row_sum(self, rows: Var<'t, T>) -> Result<Var<'t, T>> {
        let (w, z) = (self.value(), rows.value());
        let (b, m) = dims2("weighted_row_sum", &w)?;
        let (zr, d) = dims2("weighted_row_sum", &z)?;
        if zr != b * m {
            return Err(shape_err("weighted_row_sum", &w, &z));
        }
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for mi in 0..m {
                let wv = w.data()[bi * m + mi];
                out[bi * d..(bi + 1) * d]
                    .iter_mut()
                    .zip(z.row(bi * m + mi))
                    .for_each(|(o, &x)| *o += wv * x);
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![b, d], out)?,
            Op::WeightedRowSum {
                weights: self.id,
                rows: rows.id,
            },
        ))
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let s = self.value().data().iter().copied().sum();
        Ok(self.tape.push(Tensor::scalar(s), Op::Sum(self.id)))
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let t = self.value();
        if t.is_empty() {
            return Err(PlrError::Input("mean of an empty tensor".into()));
        }
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        Ok(self.tape.push(Tensor::scalar(s), Op::Mean(self.id)))
    }
}
