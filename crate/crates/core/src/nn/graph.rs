//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward evaluation. Parameters are read in place
//! from a borrowed [`ParamStore`]; [`Graph::backward`] accumulates their
//! gradients into a [`Grads`] buffer. Fused kernels (layer norm, attention,
//! depthwise convolution, softmax cross-entropy) carry hand-derived
//! backward passes.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Node(usize),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        causal: bool,
        /// Per head, row-major T×T attention probabilities.
        probs: Vec<Vec<f64>>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        causal: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    SquaredError {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    training: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn training(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match v {
            Var::Node(i) => &self.nodes[i].value,
            Var::Param(p) => self.params.get(p),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var::Param(id)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1×m` row vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows, 1);
        assert_eq!(av.cols, rv.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert!(out.same_shape(self.value(b)), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v *= sigmoid(*v);
        }
        self.push(out, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(a))
    }

    /// Gated linear unit over columns: first half times sigmoid of second half.
    pub fn glu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(av.cols.is_multiple_of(2));
        let half = av.cols / 2;
        let mut out = Tensor::zeros(av.rows, half);
        for r in 0..av.rows {
            let row = av.row(r);
            for c in 0..half {
                out.set(r, c, row[c] * sigmoid(row[c + half]));
            }
        }
        self.push(out, Op::Glu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let d = xv.cols;
        let mut xhat = Tensor::zeros(xv.rows, d);
        let mut out = Tensor::zeros(xv.rows, d);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data[c] + b.data[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "embedding id {id} out of range {}", tv.rows);
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product self-attention with a learned
    /// relative-position bias of shape `heads × (2R+1)`. Offsets `j − i` are
    /// clipped to `[−R, R]`. With `causal`, row `i` attends to `j ≤ i` only and
    /// masked positions are skipped rather than added as zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv, bv) = (self.value(q), self.value(k), self.value(v), self.value(bias));
        let t = qv.rows;
        let d = qv.cols;
        assert!(d % heads == 0);
        assert_eq!(bv.rows, heads);
        let dk = d / heads;
        let radius = (bv.cols - 1) / 2;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Tensor::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dk;
            let mut p = vec![0.0; t * t];
            for i in 0..t {
                let qi = &qv.row(i)[off..off + dk];
                let last = if causal { i + 1 } else { t };
                let mut max = f64::NEG_INFINITY;
                for j in 0..last {
                    let kj = &kv.row(j)[off..off + dk];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let s = dot * scale + bv.get(h, rel_index(i, j, radius));
                    p[i * t + j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for j in 0..last {
                    let e = (p[i * t + j] - max).exp();
                    p[i * t + j] = e;
                    z += e;
                }
                let orow = &mut out.data[i * d + off..i * d + off + dk];
                for j in 0..last {
                    let w = p[i * t + j] / z;
                    p[i * t + j] = w;
                    let vj = &vv.row(j)[off..off + dk];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                causal,
                probs,
            },
        )
    }

    /// Per-channel 1-D convolution over time. `w` is `channels × kernel`, `b`
    /// is `1 × channels`. Non-causal uses symmetric zero padding (odd
    /// kernel); causal pads `kernel − 1` frames on the left.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, causal: bool) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (t, d) = (xv.rows, xv.cols);
        assert_eq!(wv.rows, d);
        let kern = wv.cols;
        let left = conv_left_pad(kern, causal);
        let mut out = Tensor::zeros(t, d);
        for ti in 0..t {
            for c in 0..d {
                let mut acc = bv.data[c];
                for j in 0..kern {
                    let src = ti as isize + j as isize - left as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += wv.get(c, j) * xv.get(src as usize, c);
                    }
                }
                out.set(ti, c, acc);
            }
        }
        self.push(out, Op::DepthwiseConv { x, w, b, causal })
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = xv.clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let mut probs = Tensor::zeros(lv.rows, lv.cols);
        let mut loss = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let ls = crate::tensor::log_softmax(lv.row(r));
            loss -= ls[tgt];
            for (p, l) in probs.row_mut(r).iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Summed squared error against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor) -> Var {
        let pv = self.value(pred);
        assert!(pv.same_shape(target));
        let loss: f64 = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::SquaredError {
                pred,
                target: target.clone(),
            },
        )
    }

    /// Sum of several `1×1` scalars.
    pub fn sum_scalars(&mut self, items: &[Var]) -> Var {
        let mut acc = items[0];
        for &it in &items[1..] {
            acc = self.add(acc, it);
        }
        acc
    }

    /// Back-propagates from the scalar `root` (seeded with `seed`) and
    /// accumulates parameter gradients into `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Grads) {
        let Var::Node(root_idx) = root else {
            panic!("backward root must be a computed node");
        };
        assert_eq!(self.nodes[root_idx].value.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Tensor>> = (0..=root_idx).map(|_| None).collect();
        adj[root_idx] = Some(Tensor::from_vec(1, 1, vec![seed]));

        for idx in (0..=root_idx).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    accumulate(&mut adj, grads, *a, ga);
                    accumulate(&mut adj, grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, grads, *row, gr);
                    accumulate(&mut adj, grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, grads, *b, g.clone());
                    accumulate(&mut adj, grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    accumulate(&mut adj, grads, *a, ga);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let mut ga = g;
                    for (gv, &x) in ga.data.iter_mut().zip(&av.data) {
                        let s = sigmoid(x);
                        *gv *= s * (1.0 + x * (1.0 - s));
                    }
                    accumulate(&mut adj, grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (gv, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *gv *= 1.0 - y * y;
                    }
                    accumulate(&mut adj, grads, *a, ga);
                }
                Op::Glu(a) => {
                    let av = self.value(*a);
                    let half = g.cols;
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        for c in 0..half {
                            let x1 = av.get(r, c);
                            let s = sigmoid(av.get(r, c + half));
                            let gv = g.get(r, c);
                            ga.set(r, c, gv * s);
                            ga.set(r, c + half, gv * x1 * s * (1.0 - s));
                        }
                    }
                    accumulate(&mut adj, grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gm = self.value(*gamma);
                    let d = g.cols;
                    let mut gg = Tensor::zeros(1, d);
                    let mut gb = Tensor::zeros(1, d);
                    let mut gx = Tensor::zeros(g.rows, d);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            gg.data[c] += gr[c] * hr[c];
                            gb.data[c] += gr[c];
                            let dh = gr[c] * gm.data[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let gxr = gx.row_mut(r);
                        for c in 0..d {
                            let dh = gr[c] * gm.data[c];
                            gxr[c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    accumulate(&mut adj, grads, *gamma, gg);
                    accumulate(&mut adj, grads, *beta, gb);
                    accumulate(&mut adj, grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, grads, *table, gt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    heads,
                    causal,
                    probs,
                } => {
                    let (qv, kv, vv, bv) =
                        (self.value(*q), self.value(*k), self.value(*v), self.value(*bias));
                    let t = qv.rows;
                    let d = qv.cols;
                    let dk = d / heads;
                    let radius = (bv.cols - 1) / 2;
                    let scale = 1.0 / (dk as f64).sqrt();
                    let mut gq = Tensor::zeros(t, d);
                    let mut gk = Tensor::zeros(t, d);
                    let mut gv = Tensor::zeros(t, d);
                    let mut gbias = Tensor::zeros(bv.rows, bv.cols);
                    let mut dp = vec![0.0; t];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dk;
                        for i in 0..t {
                            let last = if *causal { i + 1 } else { t };
                            let go = &g.row(i)[off..off + dk];
                            let mut dot_pd = 0.0;
                            for j in 0..last {
                                let vj = &vv.row(j)[off..off + dk];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot_pd += p[i * t + j] * dp[j];
                                let w = p[i * t + j];
                                let gvr = &mut gv.data[j * d + off..j * d + off + dk];
                                for (o, x) in gvr.iter_mut().zip(go) {
                                    *o += w * x;
                                }
                            }
                            for j in 0..last {
                                let ds = p[i * t + j] * (dp[j] - dot_pd);
                                if ds == 0.0 {
                                    continue;
                                }
                                let ri = rel_index(i, j, radius);
                                gbias.data[h * bv.cols + ri] += ds;
                                let dss = ds * scale;
                                for c in 0..dk {
                                    gq.data[i * d + off + c] += dss * kv.data[j * d + off + c];
                                    gk.data[j * d + off + c] += dss * qv.data[i * d + off + c];
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, grads, *q, gq);
                    accumulate(&mut adj, grads, *k, gk);
                    accumulate(&mut adj, grads, *v, gv);
                    accumulate(&mut adj, grads, *bias, gbias);
                }
                Op::DepthwiseConv { x, w, b, causal } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t, d) = (xv.rows, xv.cols);
                    let kern = wv.cols;
                    let left = conv_left_pad(kern, *causal);
                    let mut gx = Tensor::zeros(t, d);
                    let mut gw = Tensor::zeros(d, kern);
                    let mut gb = Tensor::zeros(1, d);
                    for ti in 0..t {
                        for c in 0..d {
                            let go = g.get(ti, c);
                            gb.data[c] += go;
                            for j in 0..kern {
                                let src = ti as isize + j as isize - left as isize;
                                if src >= 0 && (src as usize) < t {
                                    let s = src as usize;
                                    gw.data[c * kern + j] += go * xv.get(s, c);
                                    gx.data[s * d + c] += go * wv.get(c, j);
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, grads, *x, gx);
                    accumulate(&mut adj, grads, *w, gw);
                    accumulate(&mut adj, grads, *b, gb);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (gv, m) in gx.data.iter_mut().zip(mask) {
                        *gv *= m;
                    }
                    accumulate(&mut adj, grads, *x, gx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.data[0];
                    let mut gl = probs.clone();
                    for (r, &tgt) in targets.iter().enumerate() {
                        gl.data[r * gl.cols + tgt] -= 1.0;
                    }
                    gl.scale_assign(s);
                    accumulate(&mut adj, grads, *logits, gl);
                }
                Op::SquaredError { pred, target } => {
                    let s = g.data[0];
                    let pv = self.value(*pred);
                    let data = pv
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(a, b)| 2.0 * (a - b) * s)
                        .collect();
                    accumulate(&mut adj, grads, *pred, Tensor::from_vec(pv.rows, pv.cols, data));
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], grads: &mut Grads, v: Var, g: Tensor) {
    match v {
        Var::Node(i) => match &mut adj[i] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        },
        Var::Param(p) => grads.tensors[p.index()].add_assign(&g),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn rel_index(i: usize, j: usize, radius: usize) -> usize {
    let off = (j as isize - i as isize).clamp(-(radius as isize), radius as isize);
    (off + radius as isize) as usize
}

#[inline]
fn conv_left_pad(kernel: usize, causal: bool) -> usize {
    if causal {
        kernel - 1
    } else {
        (kernel - 1) / 2
    }
}
