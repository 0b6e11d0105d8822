//! Reverse-mode differentiation over an append-only node arena.
//!
//! Every primitive evaluates eagerly, records its inputs, and checks that its
//! output is finite. `backward` walks the arena in reverse and only visits
//! nodes that depend on a gradient-requiring leaf.

use super::gemm::{gemm_strided, View};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention group: query rows attend only to the key rows of the same
/// group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    /// Keeps the local derivative when a gradient is needed.
    Gelu { x: Var, dy: Vec<f64> },
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Permute {
        src: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient of a scalar with respect to every tape node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    // tanh through a single exp, cheaper than the libm tanh.
    let e = (-2.0 * u.abs()).exp();
    let t = ((1.0 - e) / (1.0 + e)).copysign(u);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place numerically stable row softmax.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradient requirements; used for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf; its gradient is available through [`Tape::gradients`].
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs = store.requires_grad(id);
        self.push(store.value(id).clone(), Op::Param(id), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        check_finite("matmul", &out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite(name, &out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        check_finite("scale", &out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    /// `x (m x n) + b (n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(Error::dim(format!(
                "add_row: bias of {} values for {} columns",
                tb.numel(),
                n
            )));
        }
        let mut data = tx.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (v, bb) in row.iter_mut().zip(tb.data()) {
                    *v += bb;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        check_finite("add_row", &out)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let ng = self.ng(&[x]);
        let (data, dy) = if ng {
            t.data().iter().map(|&v| gelu_parts(v)).unzip()
        } else {
            (t.data().iter().map(|&v| gelu_parts(v).0).collect(), Vec::new())
        };
        let out = Tensor::new(t.shape().to_vec(), data)?;
        check_finite("gelu", &out)?;
        Ok(self.push(out, Op::Gelu { x, dy }, ng))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        check_finite("silu", &out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Silu(x), ng))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if d == 0 || tg.numel() != d || tb.numel() != d {
            return Err(Error::dim(format!(
                "layer_norm: width {d}, gamma {}, beta {}",
                tg.numel(),
                tb.numel()
            )));
        }
        if !tx.is_finite() {
            return Err(Error::NonFinite { op: "layer_norm" });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        check_finite("layer_norm", &out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            out,
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

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        if t.numel() == 0 {
            return Err(Error::dim("softmax_rows on an empty matrix"));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Each segment is an independent attention
    /// problem; query rows outside every segment produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let dm = tq.cols();
        if heads == 0 || dm % heads != 0 {
            return Err(Error::dim(format!("width {dm} not divisible by {heads} heads")));
        }
        if tk.cols() != dm || tv.cols() != dm || tk.rows() != tv.rows() {
            return Err(Error::dim(format!(
                "attention operands q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        for s in &segments {
            if s.q_start + s.q_len > tq.rows() || s.k_start + s.k_len > tk.rows() {
                return Err(Error::dim("attention segment out of range"));
            }
            if s.k_len == 0 && s.q_len > 0 {
                return Err(Error::contract("attention over an empty key/value source"));
            }
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ng = self.ng(&[q, k, v]);
        let mut out = vec![0.0; tq.rows() * dm];
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = if ng { Vec::with_capacity(total) } else { Vec::new() };
        let mut scratch = Vec::new();
        let rm = View::rowmajor(dm);
        for s in &segments {
            if s.q_len == 0 {
                continue;
            }
            let (lq, lk) = (s.q_len, s.k_len);
            for h in 0..heads {
                let qb = s.q_start * dm + h * dh;
                let kb = s.k_start * dm + h * dh;
                scratch.clear();
                scratch.resize(lq * lk, 0.0);
                gemm_strided(
                    lq,
                    dh,
                    lk,
                    scale,
                    &tq.data()[qb..],
                    rm,
                    &tk.data()[kb..],
                    rm.transposed(),
                    0.0,
                    &mut scratch,
                    View::rowmajor(lk),
                );
                for row in scratch.chunks_mut(lk) {
                    softmax_in_place(row);
                }
                gemm_strided(
                    lq,
                    lk,
                    dh,
                    1.0,
                    &scratch,
                    View::rowmajor(lk),
                    &tv.data()[kb..],
                    rm,
                    0.0,
                    &mut out[qb..],
                    rm,
                );
                if ng {
                    probs.extend_from_slice(&scratch);
                }
            }
        }
        let out = Tensor::new(tq.shape().to_vec(), out)?;
        check_finite("attention", &out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            ng,
        ))
    }

    /// Output row `i` is row `rows[i]` of `src`.
    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(src);
        let c = t.cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::dim(format!("gather row {bad} of {}", t.rows())));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        let ng = self.ng(&[src]);
        Ok(self.push(out, Op::GatherRows { src, rows }, ng))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(src, (start..start + len).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Element gather: `out.data[i] = src.data[index[i]]`, reshaped to `shape`.
    pub fn permute(&mut self, src: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::dim(format!("permute index {bad} of {}", t.numel())));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let ng = self.ng(&[src]);
        Ok(self.push(out, Op::Permute { src, index }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let out = Tensor::scalar(s);
        check_finite("sum", &out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        check_finite("mean", &out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Mean(x), ng))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from a non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Reverse pass that accumulates into the gradients of every trainable
    /// parameter reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        if !node.needs_grad {
            return;
        }
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    gemm_strided(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        View::rowmajor(n),
                        tb.data(),
                        View::rowmajor(n).transposed(),
                        1.0,
                        ga,
                        View::rowmajor(k),
                    );
                }
                if wants(*b) {
                    let gb = slot(grads, nodes, *b);
                    gemm_strided(
                        k,
                        m,
                        n,
                        1.0,
                        ta.data(),
                        View::rowmajor(k).transposed(),
                        g,
                        View::rowmajor(n),
                        1.0,
                        gb,
                        View::rowmajor(n),
                    );
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let gv = slot(grads, nodes, v);
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let gv = slot(grads, nodes, v);
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = nodes[b.0].value.data();
                    let ga = slot(grads, nodes, *a);
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
                if wants(*b) {
                    let other = nodes[a.0].value.data();
                    let gb = slot(grads, nodes, *b);
                    for ((x, y), o) in gb.iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    let ga = slot(grads, nodes, *a);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddRow(x, b) => {
                let n = nodes[x.0].value.cols();
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if wants(*b) && n > 0 {
                    let gb = slot(grads, nodes, *b);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Gelu { x, dy } => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for ((a, y), d) in gx.iter_mut().zip(g).zip(dy) {
                        *a += y * d;
                    }
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let xs = nodes[x.0].value.data();
                    let gx = slot(grads, nodes, *x);
                    for ((a, y), &xv) in gx.iter_mut().zip(g).zip(xs) {
                        let s = sigmoid(xv);
                        *a += y * (s + xv * s * (1.0 - s));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[x.0].value.cols();
                let rows = nodes[x.0].value.rows();
                let gam = nodes[gamma.0].value.data();
                if wants(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let v = g[r * d + c] * gam[c];
                            dxhat[c] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (dxhat[c] - m1 - xhat[r * d + c] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let gx = slot(grads, nodes, *x);
                    for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gxr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads),
            Op::GatherRows { src, rows } => {
                if wants(*src) {
                    let c = nodes[src.0].value.cols();
                    let gs = slot(grads, nodes, *src);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gs[r * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, y)| *a += y);
                    }
                    off += len;
                }
            }
            Op::Permute { src, index } => {
                if wants(*src) {
                    let gs = slot(grads, nodes, *src);
                    for (i, &j) in index.iter().enumerate() {
                        gs[j] += g[i];
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = nodes[x.0].value.numel() as f64;
                    let gx = slot(grads, nodes, *x);
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let dm = tq.cols();
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (wq, wk, wv) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
        let mut take = |var: Var, want: bool| -> Vec<f64> {
            if want {
                grads[var.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[var.0].value.numel()])
            } else {
                Vec::new()
            }
        };
        let mut gq = take(q, wq);
        // q, k and v may alias the same node (self-attention from one
        // projection is not used, but guard anyway).
        let mut gk = if k == q { Vec::new() } else { take(k, wk) };
        let mut gv = if v == q || v == k { Vec::new() } else { take(v, wv) };
        let rm = View::rowmajor(dm);
        let mut off = 0;
        let mut dp = Vec::new();
        for s in segments {
            if s.q_len == 0 {
                continue;
            }
            let (lq, lk) = (s.q_len, s.k_len);
            for h in 0..heads {
                let p = &probs[off..off + lq * lk];
                off += lq * lk;
                let qb = s.q_start * dm + h * dh;
                let kb = s.k_start * dm + h * dh;
                let pv = View::rowmajor(lk);
                if wv {
                    let dst: &mut [f64] = if v == q {
                        &mut gq
                    } else if v == k {
                        &mut gk
                    } else {
                        &mut gv
                    };
                    gemm_strided(lk, lq, dh, 1.0, p, pv.transposed(), &g[qb..], rm, 1.0, &mut dst[kb..], rm);
                }
                if !(wq || wk) {
                    continue;
                }
                dp.clear();
                dp.resize(lq * lk, 0.0);
                gemm_strided(lq, dh, lk, 1.0, &g[qb..], rm, &tv.data()[kb..], rm.transposed(), 0.0, &mut dp, pv);
                for r in 0..lq {
                    let pr = &p[r * lk..(r + 1) * lk];
                    let dr = &mut dp[r * lk..(r + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..lk {
                        dr[c] = pr[c] * (dr[c] - dot) * scale;
                    }
                }
                if wq {
                    gemm_strided(lq, lk, dh, 1.0, &dp, pv, &tk.data()[kb..], rm, 1.0, &mut gq[qb..], rm);
                }
                if wk {
                    let dst: &mut [f64] = if k == q { &mut gq } else { &mut gk };
                    gemm_strided(lk, lq, dh, 1.0, &dp, pv.transposed(), &tq.data()[qb..], rm, 1.0, &mut dst[kb..], rm);
                }
            }
        }
        if wq {
            grads[q.0] = Some(gq);
        }
        if wk && k != q {
            grads[k.0] = Some(gk);
        }
        if wv && v != q && v != k {
            grads[v.0] = Some(gv);
        }
    }
}
