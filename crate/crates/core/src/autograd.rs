//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and what it needs for
//! the backward rule. Inputs always precede outputs, so the tape is already
//! in topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::rng::SeededStream;
use crate::tensor::{self, gelu, gelu_grad, gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        stats: Vec<(f64, f64)>,
    },
    Softmax {
        x: Var,
    },
    Gather {
        table: Var,
        idx: Vec<Option<usize>>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass; tapes are not shared
/// between threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, n: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; n])
}

/// Softmax attention of one query row over `n` key/value rows laid out
/// contiguously as `[n × d]`, plus an optional trailing row held apart
/// (the candidate's own key/value during decoding). Writes per-head
/// probabilities into `probs[h * stride ..]` when given.
///
/// The training tape and the decoding path both go through this function so
/// a row computes identically in either.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    extra: Option<(&[f64], &[f64])>,
    heads: usize,
    mut probs: Option<(&mut [f64], usize)>,
    scratch: &mut Vec<f64>,
    out: &mut [f64],
) {
    let d = q.len();
    let dh = d / heads;
    let n_prefix = keys.len() / d;
    let n = n_prefix + usize::from(extra.is_some());
    let scale = 1.0 / (dh as f64).sqrt();
    scratch.resize(n, 0.0);
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let key_at = |j: usize| -> &[f64] {
            if j < n_prefix {
                &keys[j * d + h * dh..j * d + (h + 1) * dh]
            } else {
                &extra.unwrap().0[h * dh..(h + 1) * dh]
            }
        };
        for (j, s) in scratch.iter_mut().enumerate() {
            let kj = key_at(j);
            let mut acc = 0.0;
            for t in 0..dh {
                acc += qh[t] * kj[t];
            }
            *s = acc * scale;
        }
        tensor::softmax_in_place(scratch);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|v| *v = 0.0);
        for (j, &p) in scratch.iter().enumerate() {
            let vj = if j < n_prefix {
                &values[j * d + h * dh..j * d + (h + 1) * dh]
            } else {
                &extra.unwrap().1[h * dh..(h + 1) * dh]
            };
            for t in 0..dh {
                oh[t] += p * vj[t];
            }
        }
        if let Some((buf, stride)) = probs.as_mut() {
            buf[h * *stride..h * *stride + n].copy_from_slice(scratch);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `x·W (+ b)` with `x: [r×k]`, `W: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(dim_err("linear", xv, wv));
        }
        let (r, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != n {
                    return Err(dim_err("linear bias", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = tensor::linear_rows(xv.data(), r, k, wv.data(), n, bias);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![r, n], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(g), self.value(b));
        if gv.len() != d || bv.len() != d {
            return Err(dim_err("layer_norm", xv, gv));
        }
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xv.rows());
        tensor::layer_norm_rows(xv.data(), d, gv.data(), bv.data(), eps, &mut out, Some(&mut stats));
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(g) || self.rg(b);
        Ok(self.push(value, Op::LayerNorm { x, g, b, stats }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = tensor::softmax_last(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Row gather from a `[rows × d]` table. `None` yields a zero row.
    pub fn gather(&mut self, table: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.last_dim());
        let mut out = vec![0.0; idx.len() * d];
        for (i, ix) in idx.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= rows {
                    return Err(Error::Index {
                        context: "gather",
                        index: r,
                        bound: rows,
                    });
                }
                out[i * d..(i + 1) * d].copy_from_slice(tv.row(r));
            }
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather { table, idx }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(dim_err("concat_cols", av, bv));
        }
        let (da, db) = (av.last_dim(), bv.last_dim());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new(vec![av.rows(), da + db], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols { a, b }, rg))
    }

    /// Inverted dropout. Identity when `p == 0` or not training.
    pub fn dropout(&mut self, x: Var, p: f64, stream: &mut SeededStream, training: bool) -> Result<Var> {
        check_dropout_p(p)?;
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if stream.uniform() < p { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Causal multi-head attention. `q`, `k`, `v` are `[r × d]` holding
    /// `r / seg` independent sequences of length `seg` stacked by rows.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(dim_err("attention", qv, kv));
        }
        let (r, d) = (qv.rows(), qv.last_dim());
        if heads == 0 || d % heads != 0 || seg == 0 || r % seg != 0 {
            return Err(Error::Parameter(format!(
                "attention with {r} rows, width {d}, {heads} heads, segment {seg}"
            )));
        }
        let nseg = r / seg;
        let mut out = vec![0.0; r * d];
        let mut probs = vec![0.0; nseg * heads * seg * seg];
        let mut scratch = Vec::with_capacity(seg);
        for s in 0..nseg {
            let base = s * seg;
            for i in 0..seg {
                let row = base + i;
                let pstart = ((s * seg + i) * heads) * seg;
                attention_row(
                    &qv.data()[row * d..(row + 1) * d],
                    &kv.data()[base * d..(row + 1) * d],
                    &vv.data()[base * d..(row + 1) * d],
                    None,
                    heads,
                    Some((&mut probs[pstart..pstart + heads * seg], seg)),
                    &mut scratch,
                    &mut out[row * d..(row + 1) * d],
                );
            }
        }
        let value = Tensor::new(vec![r, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg,
                probs,
            },
            rg,
        ))
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows that carry
    /// a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, weights: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, vocab) = (lv.rows(), lv.last_dim());
        if targets.len() != r || weights.len() != r {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; r * vocab];
        let mut total = 0.0;
        let mut total_weight = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Index {
                    context: "cross_entropy target",
                    index: t,
                    bound: vocab,
                });
            }
            let w = weights[i];
            if !(w >= 0.0) {
                return Err(Error::Parameter(format!("negative loss weight {w}")));
            }
            let row = lv.row(i);
            let lse = tensor::log_sum_exp(row);
            total += w * (lse - row[t]);
            total_weight += w;
            for (p, &z) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        if total_weight <= 0.0 {
            return Err(Error::Contract("cross_entropy with zero total weight".into()));
        }
        let value = Tensor::scalar(total / total_weight);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are then available
    /// through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, k, n) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.rg(*x) {
                    let gx = accumulate(&mut grads[x.0], r * k);
                    gemm(r, n, k, gout, false, wv.data(), true, gx, 1.0);
                }
                if self.rg(*w) {
                    let gw = accumulate(&mut grads[w.0], k * n);
                    gemm(k, r, n, xv.data(), true, gout, false, gw, 1.0);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb = accumulate(&mut grads[b.0], n);
                        for row in gout.chunks(n) {
                            for (g, v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, gout, false, bv.data(), true, ga, 1.0);
                }
                if self.rg(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, av.data(), true, gout, false, gb, 1.0);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let g = accumulate(&mut grads[v.0], gout.len());
                        for (g, d) in g.iter_mut().zip(gout) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.rg(*a) {
                    let g = accumulate(&mut grads[a.0], gout.len());
                    for j in 0..gout.len() {
                        g[j] += gout[j] * bv[j];
                    }
                }
                if self.rg(*b) {
                    let g = accumulate(&mut grads[b.0], gout.len());
                    for j in 0..gout.len() {
                        g[j] += gout[j] * av[j];
                    }
                }
            }
            Op::Scale { x, s } => {
                let g = accumulate(&mut grads[x.0], gout.len());
                for (g, d) in g.iter_mut().zip(gout) {
                    *g += d * s;
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x).data();
                let g = accumulate(&mut grads[x.0], gout.len());
                for j in 0..gout.len() {
                    g[j] += gout[j] * gelu_grad(xv[j]);
                }
            }
            Op::LayerNorm { x, g, b, stats } => {
                let xv = val(*x);
                let gv = val(*g).data();
                let d = xv.last_dim();
                let mut gx_local = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = xv.row(r);
                    let dy = &gout[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = dy[j] * gv[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        gx_local[j] = dxhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    if self.rg(*x) {
                        let gx = accumulate(&mut grads[x.0], xv.len());
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            gx[r * d + j] += rstd * (gx_local[j] - m1 - xhat * m2);
                        }
                    }
                    if self.rg(*g) {
                        let gg = accumulate(&mut grads[g.0], d);
                        for j in 0..d {
                            gg[j] += dy[j] * (xr[j] - mean) * rstd;
                        }
                    }
                    if self.rg(*b) {
                        let gb = accumulate(&mut grads[b.0], d);
                        for j in 0..d {
                            gb[j] += dy[j];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let d = y.last_dim();
                let g = accumulate(&mut grads[x.0], gout.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dy = &gout[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        g[r * d + j] += yr[j] * (dy[j] - dot);
                    }
                }
            }
            Op::Gather { table, idx } => {
                let tv = val(*table);
                let d = tv.last_dim();
                let g = accumulate(&mut grads[table.0], tv.len());
                for (i, ix) in idx.iter().enumerate() {
                    if let Some(r) = *ix {
                        for j in 0..d {
                            g[r * d + j] += gout[i * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (da, db) = (val(*a).last_dim(), val(*b).last_dim());
                let rows = val(*a).rows();
                if self.rg(*a) {
                    let g = accumulate(&mut grads[a.0], rows * da);
                    for r in 0..rows {
                        for j in 0..da {
                            g[r * da + j] += gout[r * (da + db) + j];
                        }
                    }
                }
                if self.rg(*b) {
                    let g = accumulate(&mut grads[b.0], rows * db);
                    for r in 0..rows {
                        for j in 0..db {
                            g[r * db + j] += gout[r * (da + db) + da + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let g = accumulate(&mut grads[x.0], gout.len());
                for j in 0..gout.len() {
                    g[j] += gout[j] * mask[j];
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seg,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *seg, probs, gout, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let lv = val(*logits);
                let vocab = lv.last_dim();
                let g = accumulate(&mut grads[logits.0], lv.len());
                let s = gout[0] / total_weight;
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let w = weights[i] * s;
                    for j in 0..vocab {
                        g[i * vocab + j] += w * probs[i * vocab + j];
                    }
                    g[i * vocab + t] -= w;
                }
            }
            Op::Sum { x } => {
                let n = val(*x).len();
                let g = accumulate(&mut grads[x.0], n);
                for v in g.iter_mut() {
                    *v += gout[0];
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
        seg: usize,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let d = self.nodes[q.0].value.last_dim();
        let r = qv.len() / d;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; r * d];
        let mut gk = vec![0.0; r * d];
        let mut gv = vec![0.0; r * d];
        let mut dp = vec![0.0; seg];
        for s in 0..r / seg {
            let base = s * seg;
            for i in 0..seg {
                let row = base + i;
                for h in 0..heads {
                    let p = &probs[((row * heads) + h) * seg..((row * heads) + h) * seg + i + 1];
                    let go = &gout[row * d + h * dh..row * d + (h + 1) * dh];
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &vv[(base + j) * d + h * dh..(base + j) * d + (h + 1) * dh];
                        let mut acc = 0.0;
                        for t in 0..dh {
                            acc += go[t] * vj[t];
                        }
                        dp[j] = acc;
                        dot += p[j] * acc;
                        let gvj = &mut gv[(base + j) * d + h * dh..(base + j) * d + (h + 1) * dh];
                        for t in 0..dh {
                            gvj[t] += p[j] * go[t];
                        }
                    }
                    let qi = &qv[row * d + h * dh..row * d + (h + 1) * dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv[(base + j) * d + h * dh..(base + j) * d + (h + 1) * dh];
                        let gqi = &mut gq[row * d + h * dh..row * d + (h + 1) * dh];
                        for t in 0..dh {
                            gqi[t] += ds * kj[t];
                        }
                        let gkj = &mut gk[(base + j) * d + h * dh..(base + j) * d + (h + 1) * dh];
                        for t in 0..dh {
                            gkj[t] += ds * qi[t];
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(var) {
                let acc = accumulate(&mut grads[var.0], g.len());
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Untracked inverted dropout.
pub fn dropout(x: &Tensor, p: f64, stream: &mut SeededStream, training: bool) -> Result<Tensor> {
    check_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let data = x
        .data()
        .iter()
        .map(|v| if stream.uniform() < p { 0.0 } else { v * keep })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Untracked weighted cross-entropy, see [`Tape::cross_entropy`].
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone(), false);
    let out = tape.cross_entropy(l, targets.iter().map(|&t| Some(t)).collect(), weights.to_vec())?;
    Ok(tape.value(out).item())
}
