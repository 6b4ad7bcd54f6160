//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! replays the tape in reverse. Nodes only carry gradients when some input
//! requires them, so a frozen backbone costs no weight-gradient work.

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, softmax_row, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast { x: Var, v: Var },
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Linear { x: Var, w: Var, b: Option<Var>, m: usize, k: usize, n: usize },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, cols: usize, inv_std: Vec<T> },
    Modulate { x: Var, shift: Var, scale: Var, tokens: usize, dim: usize },
    GatedResidual { x: Var, gate: Var, y: Var, tokens: usize, dim: usize },
    WeightTokens { w: Var, x: Var, shared: bool, tokens: usize, dim: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, tq: usize, tk: usize, dim: usize, probs: Vec<T> },
    SliceLast { x: Var, start: usize, cols: usize },
    ConcatLast { parts: Vec<(Var, usize)> },
    ConcatTokens { a: Var, b: Var },
    DropTokens { x: Var, n: usize },
    GatherRows { table: Var, idx: Vec<usize>, dim: usize },
    Unpatchify { x: Var, grid: usize, patch: usize, channels: usize },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows { x: Var, rows: usize, cols: usize },
    Mse { a: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as `f32`, zero-filled when the node was not reached.
    pub fn to_single(&self, var: Var, numel: usize) -> Vec<f32> {
        match self.get(var) {
            Some(g) => g.iter().map(|v| v.to_single()).collect(),
            None => vec![0.0; numel],
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies a node value out as an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.to_single()).collect())
            .expect("node shapes are consistent")
    }

    /// Leaf for a stored tensor; tracks gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push(value, t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("constant", &shape, &[value.len()]));
        }
        Ok(self.push(value, shape, Op::Leaf, false))
    }

    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.push(value, t.shape().to_vec(), Op::Leaf, false)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let va = self.value(a);
        let vb = self.value(b);
        if sa == sb {
            Ok(va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 {
            let y = vb[0];
            Ok(va.iter().map(|&x| f(x, y)).collect())
        } else {
            Err(Error::shape(name, sa, sb))
        }
    }

    /// `a + b`; `b` may be a single-element tensor broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Div(a, b), rg))
    }

    /// `x + v` where `v` matches the trailing dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sv.len() > sx.len() || sx[sx.len() - sv.len()..] != *sv {
            return Err(Error::shape("add_broadcast", sx, sv));
        }
        let vv = self.value(v);
        let n = vv.len();
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBroadcast { x, v }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).iter().map(|&a| a * s).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).iter().map(|&a| a + c).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::AddScalar(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| a * a).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Square(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| sigmoid(a)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Sigmoid(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| a * sigmoid(a)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Silu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&a| gelu(a)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Gelu(x), rg)
    }

    // ---- linear algebra --------------------------------------------------

    /// `x[.., k] @ w[k, n] + b[n]`, leading dims of `x` flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.is_empty() || last(&sx) != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = numel(&sx) / k;
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        matmul_nn(self.value(x), self.value(w), &mut out, m, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, shape, Op::Linear { x, w, b, m, k, n }, rg))
    }

    /// Plain matrix product of two 2-D nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        self.linear(a, b, None)
    }

    /// Softmax over the last axis. Non-finite inputs are a domain error.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = last(&shape);
        let mut out = self.value(x).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "softmax",
                detail: "input contains NaN or Inf".into(),
            });
        }
        for row in out.chunks_mut(cols) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Softmax { x, cols }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = last(&shape);
        let mut out = self.value(x).to_vec();
        let inv_n = T::one() / T::of(cols as f64);
        let mut inv_std = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, shape, Op::LayerNorm { x, cols, inv_std }, rg)
    }

    fn btd(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [b, t, d] => Ok((b, t, d)),
            ref s => Err(Error::shape(op, s, &[0, 0, 0])),
        }
    }

    /// `x * (1 + scale) + shift` with per-sample `shift`, `scale` of shape `[B, D]`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let (b, t, d) = self.btd(x, "modulate")?;
        for v in [shift, scale] {
            if self.shape(v) != [b, d] {
                return Err(Error::shape("modulate", self.shape(x), self.shape(v)));
            }
        }
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            let shr = &sh[bi * d..(bi + 1) * d];
            let scr = &sc[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let o = (bi * t + ti) * d;
                for j in 0..d {
                    out[o + j] = xv[o + j] * (T::one() + scr[j]) + shr[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(shift) || self.rg(scale);
        Ok(self.push(out, vec![b, t, d], Op::Modulate { x, shift, scale, tokens: t, dim: d }, rg))
    }

    /// `x + gate * y` with a per-sample `gate` of shape `[B, D]`.
    pub fn gated_residual(&mut self, x: Var, gate: Var, y: Var) -> Result<Var> {
        let (b, t, d) = self.btd(x, "gated_residual")?;
        if self.shape(y) != self.shape(x) || self.shape(gate) != [b, d] {
            return Err(Error::shape("gated_residual", self.shape(x), self.shape(y)));
        }
        let (xv, gv, yv) = (self.value(x), self.value(gate), self.value(y));
        let mut out = xv.to_vec();
        for bi in 0..b {
            let gr = &gv[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let o = (bi * t + ti) * d;
                for j in 0..d {
                    out[o + j] += gr[j] * yv[o + j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gate) || self.rg(y);
        Ok(self.push(out, vec![b, t, d], Op::GatedResidual { x, gate, y, tokens: t, dim: d }, rg))
    }

    /// Scales token rows: `out[b, p, :] = w[b, p] * x[p, :]` (or `x[b, p, :]`).
    pub fn weight_tokens(&mut self, w: Var, x: Var) -> Result<Var> {
        let (b, p) = match *self.shape(w) {
            [b, p] => (b, p),
            ref s => return Err(Error::shape("weight_tokens", s, self.shape(x))),
        };
        let (shared, d) = match *self.shape(x) {
            [pp, d] if pp == p => (true, d),
            [bb, pp, d] if bb == b && pp == p => (false, d),
            ref s => return Err(Error::shape("weight_tokens", self.shape(w), s)),
        };
        let (wv, xv) = (self.value(w), self.value(x));
        let mut out = vec![T::zero(); b * p * d];
        for bi in 0..b {
            for pi in 0..p {
                let wt = wv[bi * p + pi];
                let src = if shared { pi * d } else { (bi * p + pi) * d };
                let dst = (bi * p + pi) * d;
                for j in 0..d {
                    out[dst + j] = wt * xv[src + j];
                }
            }
        }
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(out, vec![b, p, d], Op::WeightTokens { w, x, shared, tokens: p, dim: d }, rg))
    }

    /// Multi-head scaled dot-product attention. `q: [B, Tq, D]`, `k, v: [B, Tk, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (b, tq, d) = self.btd(q, "attention")?;
        let (bk, tk, dk) = self.btd(k, "attention")?;
        if bk != b || dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); b * heads * tq * tk];
        let mut out = vec![T::zero(); b * tq * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (bi * heads + h) * tq * tk;
                for i in 0..tq {
                    let qrow = &qv[(bi * tq + i) * d + off..][..dh];
                    let row = &mut probs[pbase + i * tk..pbase + (i + 1) * tk];
                    for (j, r) in row.iter_mut().enumerate() {
                        let krow = &kv[(bi * tk + j) * d + off..][..dh];
                        *r = super::tensor::dot(qrow, krow) * scale;
                    }
                    softmax_row(row);
                    let orow = &mut out[(bi * tq + i) * d + off..][..dh];
                    for (j, &a) in row.iter().enumerate() {
                        let vrow = &vv[(bi * tk + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            vec![b, tq, d],
            Op::Attention { q, k, v, heads, tq, tk, dim: d, probs },
            rg,
        ))
    }

    // ---- structural ------------------------------------------------------

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = last(&shape);
        if start + len > cols || len == 0 {
            return Err(Error::shape("slice_last", &shape, &[start, len]));
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(out, oshape, Op::SliceLast { x, start, cols }, rg))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::config("concat_last of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != *lead {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            widths.push(last(s));
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(out, shape, Op::ConcatLast { parts }, rg))
    }

    /// `[a ; b]` along the token axis of `[B, T, D]` tensors.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ta, da) = self.btd(a, "concat_tokens")?;
        let (bb, tb, db) = self.btd(b, "concat_tokens")?;
        if ba != bb || da != db {
            return Err(Error::shape("concat_tokens", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::with_capacity(ba * (ta + tb) * da);
        for bi in 0..ba {
            out.extend_from_slice(&self.value(a)[bi * ta * da..(bi + 1) * ta * da]);
            out.extend_from_slice(&self.value(b)[bi * tb * db..(bi + 1) * tb * db]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![ba, ta + tb, da], Op::ConcatTokens { a, b }, rg))
    }

    /// Drops the first `n` tokens of a `[B, T, D]` tensor.
    pub fn drop_tokens(&mut self, x: Var, n: usize) -> Result<Var> {
        let (b, t, d) = self.btd(x, "drop_tokens")?;
        if n >= t {
            return Err(Error::shape("drop_tokens", self.shape(x), &[n]));
        }
        let mut out = Vec::with_capacity(b * (t - n) * d);
        for bi in 0..b {
            out.extend_from_slice(&self.value(x)[(bi * t + n) * d..(bi + 1) * t * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, t - n, d], Op::DropTokens { x, n }, rg))
    }

    /// Embedding lookup: rows of a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = match *self.shape(table) {
            [v, d] => (v, d),
            ref s => return Err(Error::shape("gather_rows", s, &[idx.len()])),
        };
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::shape("gather_rows index", &[v, d], &[i]));
            }
            out.extend_from_slice(&self.value(table)[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(out, vec![idx.len(), d], Op::GatherRows { table, idx: idx.to_vec(), dim: d }, rg))
    }

    /// `[B, N, K*K*C]` decoded tokens to a `[B, H, W, C]` image grid.
    pub fn unpatchify(&mut self, x: Var, patch: usize, channels: usize) -> Result<Var> {
        let (b, n, f) = self.btd(x, "unpatchify")?;
        let grid = (n as f64).sqrt().round() as usize;
        if grid * grid != n || f != patch * patch * channels {
            return Err(Error::shape("unpatchify", self.shape(x), &[patch, patch, channels]));
        }
        let side = grid * patch;
        let mut out = vec![T::zero(); b * side * side * channels];
        let xv = self.value(x);
        for_each_patch_index(b, grid, patch, channels, |src, dst| out[dst] = xv[src]);
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, side, side, channels], Op::Unpatchify { x, grid, patch, channels }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Reshape(x), rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.value(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::MeanAll(x), rg)
    }

    /// Mean over the leading axis of a `[R, C]` tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match *self.shape(x) {
            [r, c] => (r, c),
            ref s => return Err(Error::shape("mean_rows", s, &[0, 0])),
        };
        let xv = self.value(x);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(rows as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(out, vec![cols], Op::MeanRows { x, rows, cols }, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let n = T::of(self.value(a).len() as f64);
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![s], vec![1], Op::Mse { a, b }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        // Accumulator for input `v`, created lazily; None if v needs no grad.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let scalar_b = val(*b).len() == 1 && val(*a).len() != 1;
                if let Some(gb) = acc!(*b) {
                    if scalar_b {
                        gb[0] += sign * g.iter().copied().sum::<T>();
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, &y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scalar_b = bv.len() == 1 && av.len() != 1;
                if let Some(ga) = acc!(*a) {
                    if scalar_b {
                        ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * bv[0]);
                    } else {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*b) {
                    if scalar_b {
                        gb[0] += g.iter().zip(av).map(|(&y, &x)| y * x).sum::<T>();
                    } else {
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scalar_b = bv.len() == 1 && av.len() != 1;
                let bj = |j: usize| if scalar_b { bv[0] } else { bv[j] };
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] / bj(j);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        let d = -g[j] * av[j] / (bj(j) * bj(j));
                        if scalar_b {
                            gb[0] += d;
                        } else {
                            gb[j] += d;
                        }
                    }
                }
            }
            Op::AddBroadcast { x, v } => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if let Some(gv) = acc!(*v) {
                    let n = gv.len();
                    for row in g.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Square(x) => {
                let xv = val(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += T::of(2.0) * xv[j] * g[j];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j] * (T::one() - y[j]);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        let s = sigmoid(xv[j]);
                        gx[j] += g[j] * s * (T::one() + xv[j] * (T::one() - s));
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                if let Some(gx) = acc!(*x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(gx) = acc!(*x) {
                    matmul_nt(g, val(*w), gx, m, n, k);
                }
                if let Some(gw) = acc!(*w) {
                    matmul_tn(val(*x), g, gw, m, k, n);
                }
                if let Some(b) = b {
                    if let Some(gb) = acc!(*b) {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let y = &node.value;
                if let Some(gx) = acc!(*x) {
                    for ((gr, yr), xr) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dotp: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..*cols {
                            xr[j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, cols, inv_std } => {
                let y = &node.value;
                let inv_n = T::one() / T::of(*cols as f64);
                if let Some(gx) = acc!(*x) {
                    for (r, ((gr, yr), xr)) in g
                        .chunks(*cols)
                        .zip(y.chunks(*cols))
                        .zip(gx.chunks_mut(*cols))
                        .enumerate()
                    {
                        let mg = gr.iter().copied().sum::<T>() * inv_n;
                        let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        for j in 0..*cols {
                            xr[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Modulate { x, shift, scale, tokens, dim } => {
                let (t, d) = (*tokens, *dim);
                let b = g.len() / (t * d);
                let (xv, sc) = (val(*x), val(*scale));
                if let Some(gx) = acc!(*x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * d;
                            for j in 0..d {
                                gx[o + j] += g[o + j] * (T::one() + sc[bi * d + j]);
                            }
                        }
                    }
                }
                if let Some(gs) = acc!(*shift) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * d;
                            for j in 0..d {
                                gs[bi * d + j] += g[o + j];
                            }
                        }
                    }
                }
                if let Some(gc) = acc!(*scale) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * d;
                            for j in 0..d {
                                gc[bi * d + j] += g[o + j] * xv[o + j];
                            }
                        }
                    }
                }
            }
            Op::GatedResidual { x, gate, y, tokens, dim } => {
                let (t, d) = (*tokens, *dim);
                let b = g.len() / (t * d);
                let (gv, yv) = (val(*gate), val(*y));
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                }
                if let Some(gg) = acc!(*gate) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * d;
                            for j in 0..d {
                                gg[bi * d + j] += g[o + j] * yv[o + j];
                            }
                        }
                    }
                }
                if let Some(gy) = acc!(*y) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let o = (bi * t + ti) * d;
                            for j in 0..d {
                                gy[o + j] += g[o + j] * gv[bi * d + j];
                            }
                        }
                    }
                }
            }
            Op::WeightTokens { w, x, shared, tokens, dim } => {
                let (p, d) = (*tokens, *dim);
                let b = g.len() / (p * d);
                let (wv, xv) = (val(*w), val(*x));
                let src = |bi: usize, pi: usize| if *shared { pi * d } else { (bi * p + pi) * d };
                if let Some(gw) = acc!(*w) {
                    for bi in 0..b {
                        for pi in 0..p {
                            let o = (bi * p + pi) * d;
                            let s = src(bi, pi);
                            gw[bi * p + pi] += super::tensor::dot(&g[o..o + d], &xv[s..s + d]);
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    for bi in 0..b {
                        for pi in 0..p {
                            let o = (bi * p + pi) * d;
                            let s = src(bi, pi);
                            let wt = wv[bi * p + pi];
                            for j in 0..d {
                                gx[s + j] += g[o + j] * wt;
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, tq, tk, dim, probs } => {
                self.attention_backward(
                    AttnArgs { q: *q, k: *k, v: *v, heads: *heads, tq: *tq, tk: *tk, d: *dim },
                    probs,
                    g,
                    grads,
                );
            }
            Op::SliceLast { x, start, cols } => {
                let len = last(&node.shape);
                if let Some(gx) = acc!(*x) {
                    for (r, row) in g.chunks(len).enumerate() {
                        let dst = &mut gx[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    if let Some(gp) = acc!(p) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatTokens { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (bsz, ta, d, tb) = (sa[0], sa[1], sa[2], sb[1]);
                let t = ta + tb;
                if let Some(ga) = acc!(*a) {
                    for bi in 0..bsz {
                        let src = &g[bi * t * d..(bi * t + ta) * d];
                        ga[bi * ta * d..(bi + 1) * ta * d].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for bi in 0..bsz {
                        let src = &g[(bi * t + ta) * d..(bi + 1) * t * d];
                        gb[bi * tb * d..(bi + 1) * tb * d].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::DropTokens { x, n } => {
                let sx = &self.nodes[x.0].shape;
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                if let Some(gx) = acc!(*x) {
                    for bi in 0..b {
                        let src = &g[bi * (t - n) * d..(bi + 1) * (t - n) * d];
                        let dst = &mut gx[(bi * t + n) * d..(bi + 1) * t * d];
                        dst.iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::GatherRows { table, idx, dim } => {
                if let Some(gt) = acc!(*table) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        gt[i * dim..(i + 1) * dim].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Unpatchify { x, grid, patch, channels } => {
                let b = node.shape[0];
                if let Some(gx) = acc!(*x) {
                    for_each_patch_index(b, *grid, *patch, *channels, |src, dst| gx[src] += g[dst]);
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = acc!(*x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::MeanRows { x, rows, cols } => {
                if let Some(gx) = acc!(*x) {
                    let inv = T::one() / T::of(*rows as f64);
                    for row in gx.chunks_mut(*cols) {
                        row.iter_mut().zip(g).for_each(|(a, &b)| *a += b * inv);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let s = T::of(2.0) * g[0] / T::of(av.len() as f64);
                if let Some(ga) = acc!(*a) {
                    for j in 0..av.len() {
                        ga[j] += s * (av[j] - bv[j]);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..av.len() {
                        gb[j] -= s * (av[j] - bv[j]);
                    }
                }
            }
        }
    }

    fn attention_backward(&self, a: AttnArgs, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let AttnArgs { q, k, v, heads, tq, tk, d } = a;
        let dh = d / heads;
        let b = g.len() / (tq * d);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = self.rg(q).then(|| vec![T::zero(); qv.len()]);
        let mut gk = self.rg(k).then(|| vec![T::zero(); kv.len()]);
        let mut gv = self.rg(v).then(|| vec![T::zero(); vv.len()]);
        let mut da = vec![T::zero(); tk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (bi * heads + h) * tq * tk;
                for i in 0..tq {
                    let p = &probs[pbase + i * tk..pbase + (i + 1) * tk];
                    let grow = &g[(bi * tq + i) * d + off..][..dh];
                    // dV += A^T dO
                    if let Some(gv) = gv.as_mut() {
                        for (j, &aij) in p.iter().enumerate() {
                            let dst = &mut gv[(bi * tk + j) * d + off..][..dh];
                            dst.iter_mut().zip(grow).for_each(|(x, &y)| *x += aij * y);
                        }
                    }
                    if gq.is_none() && gk.is_none() {
                        continue;
                    }
                    // dA = dO V^T ; dS = A * (dA - <dA, A>)
                    for (j, dv) in da.iter_mut().enumerate() {
                        *dv = super::tensor::dot(grow, &vv[(bi * tk + j) * d + off..][..dh]);
                    }
                    let inner: T = da.iter().zip(p).map(|(&x, &y)| x * y).sum();
                    for (j, dv) in da.iter_mut().enumerate() {
                        *dv = p[j] * (*dv - inner) * scale;
                    }
                    let qrow = &qv[(bi * tq + i) * d + off..][..dh];
                    if let Some(gq) = gq.as_mut() {
                        let dst = &mut gq[(bi * tq + i) * d + off..][..dh];
                        for (j, &ds) in da.iter().enumerate() {
                            let krow = &kv[(bi * tk + j) * d + off..][..dh];
                            dst.iter_mut().zip(krow).for_each(|(x, &y)| *x += ds * y);
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for (j, &ds) in da.iter().enumerate() {
                            let dst = &mut gk[(bi * tk + j) * d + off..][..dh];
                            dst.iter_mut().zip(qrow).for_each(|(x, &y)| *x += ds * y);
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                match grads[var.0].as_mut() {
                    Some(existing) => existing.iter_mut().zip(&local).for_each(|(a, &b)| *a += b),
                    None => grads[var.0] = Some(local),
                }
            }
        }
    }
}

struct AttnArgs {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    tq: usize,
    tk: usize,
    d: usize,
}

/// Visits `(token-layout index, image-layout index)` pairs for unpatchify.
pub(crate) fn for_each_patch_index(
    batch: usize,
    grid: usize,
    patch: usize,
    channels: usize,
    mut f: impl FnMut(usize, usize),
) {
    let side = grid * patch;
    let feat = patch * patch * channels;
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                let n = gy * grid + gx;
                for ky in 0..patch {
                    for kx in 0..patch {
                        let y = gy * patch + ky;
                        let x = gx * patch + kx;
                        for c in 0..channels {
                            let src = (b * grid * grid + n) * feat + (ky * patch + kx) * channels + c;
                            let dst = ((b * side + y) * side + x) * channels + c;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let u = c * (x + T::of(0.044715) * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}
