//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Ops are coarse (a whole multi-head attention, a whole bilinear gather, a
//! whole compositing pass) with hand-written backward rules, so the tape for a
//! training batch holds a few hundred nodes rather than millions of scalars.
//! Every rule is checked against central finite differences in the tests
//! below and again end to end by `training::gradient_check`.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One bilinear (or nearest, or empty) read: up to four weighted source rows.
pub type Taps = [(u32, f64); 4];

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Vec<Var>),
    RepeatRows(Var, usize),
    GroupSum {
        x: Var,
        group: usize,
        weights: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        lq: usize,
        lk: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        src: Var,
        taps: Vec<Taps>,
    },
    Im2Col {
        x: Var,
        height: usize,
        width: usize,
    },
    Composite {
        sigma: Var,
        colour: Var,
        group: usize,
        deltas: Vec<f64>,
        trans_after: Vec<f64>,
        weights: Vec<f64>,
    },
    MeanSquaredError {
        pred: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// Tanh-approximate GELU, written with 1 + tanh(u) = 2 sigmoid(2u).
fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x))
}

fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x));
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (self.value(a), self.value(w));
        let (n, k) = (av.rows(), av.cols());
        assert_eq!(wv.rows(), k, "matmul inner dimension");
        let m = wv.cols();
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), false, wv.data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(w);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, w), ng)
    }

    /// `x[n, m] + b[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        assert_eq!(bv.len(), m, "bias length");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddRow(x, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| f(*v)).collect(),
        );
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), factors.len());
        let mut out = xv.clone();
        for (r, f) in factors.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RowScale(x, factors), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, m) = (xv.rows(), xv.cols());
        assert_eq!(gv.len(), m);
        assert_eq!(bv.len(), m);
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::matrix(n, m, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), n, "concat row mismatch");
            for r in 0..n {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::matrix(n, total, out),
            Op::Concat(parts.to_vec()),
            ng,
        )
    }

    /// `[g, c] -> [g * times, c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (g, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(g * times * c);
        for r in 0..g {
            for _ in 0..times {
                out.extend_from_slice(xv.row(r));
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(g * times, c, out),
            Op::RepeatRows(x, times),
            ng,
        )
    }

    /// Weighted sum over consecutive groups of `group` rows:
    /// `out[g] = sum_l weights[g*group + l] * x[g*group + l]`.
    pub fn group_sum(&mut self, x: Var, group: usize, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        assert_eq!(n % group, 0);
        assert_eq!(weights.len(), n);
        let g = n / group;
        let mut out = vec![0.0; g * c];
        for r in 0..n {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for (o, v) in dst.iter_mut().zip(xv.row(r)) {
                *o += w * v;
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(g, c, out),
            Op::GroupSum { x, group, weights },
            ng,
        )
    }

    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let n = self.value(x).rows();
        self.group_sum(x, group, vec![1.0 / group as f64; n])
    }

    /// Multi-head scaled dot-product attention over independent groups.
    ///
    /// `q` is `[groups*lq, c]`, `k`/`v` are `[groups*lk, c]`. `key_mask`, when
    /// given, has one flag per key row; masked keys get exactly zero weight,
    /// and a query whose group has no valid key outputs the zero vector.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        lq: usize,
        lk: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        assert_eq!(qv.rows(), groups * lq);
        assert_eq!(kv.rows(), groups * lk);
        assert_eq!(vv.rows(), groups * lk);
        assert_eq!(c % heads, 0);
        if let Some(m) = key_mask {
            assert_eq!(m.len(), groups * lk);
        }
        let dh = c / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * heads * lq * lk];
        let mut out = vec![0.0; groups * lq * c];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; lk];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(g * lq + i) * c + off..(g * lq + i) * c + off + dh];
                    let mut maxs = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let valid = key_mask.is_none_or(|m| m[g * lk + j]);
                        if !valid {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kd[(g * lk + j) * c + off..(g * lk + j) * c + off + dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * inv;
                        scores[j] = s;
                        maxs = maxs.max(s);
                    }
                    if maxs == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = if s.is_finite() {
                            (*s - maxs).exp()
                        } else {
                            0.0
                        };
                        z += *s;
                    }
                    let pbase = ((g * heads + h) * lq + i) * lk;
                    let orow = &mut out[(g * lq + i) * c + off..(g * lq + i) * c + off + dh];
                    for j in 0..lk {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(g * lk + j) * c + off..(g * lk + j) * c + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::matrix(groups * lq, c, out),
            Op::Attention {
                q,
                k,
                v,
                groups,
                lq,
                lk,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Per-head attention weights recorded by an [`Graph::attention`] node,
    /// laid out `[group][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[p] = sum_t w_t * src[row_t]` for each tap set.
    pub fn gather(&mut self, src: Var, taps: Vec<Taps>) -> Var {
        let sv = self.value(src);
        let c = sv.cols();
        let mut out = vec![0.0; taps.len() * c];
        for (p, t) in taps.iter().enumerate() {
            let dst = &mut out[p * c..(p + 1) * c];
            for &(row, w) in t {
                if w == 0.0 {
                    continue;
                }
                for (o, s) in dst.iter_mut().zip(sv.row(row as usize)) {
                    *o += w * s;
                }
            }
        }
        let ng = self.ng(src);
        let n = taps.len();
        self.push(Tensor::matrix(n, c, out), Op::Gather { src, taps }, ng)
    }

    /// 3×3 zero-padded patches of a stack of images stored as
    /// `[images*height*width, channels]`; the output column for tap
    /// `(dy, dx)` and channel `ch` is `((dy+1)*3 + dx+1)*channels + ch`.
    pub fn im2col3x3(&mut self, x: Var, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let n = xv.rows();
        assert_eq!(n % (height * width), 0);
        let mut out = vec![0.0; n * 9 * c];
        for r in 0..n {
            let img = r / (height * width);
            let y = (r / width) % height;
            let xx = r % width;
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = xx as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                        continue;
                    }
                    let src = img * height * width + sy as usize * width + sx as usize;
                    let col = (ky * 3 + kx) * c;
                    out[r * 9 * c + col..r * 9 * c + col + c].copy_from_slice(xv.row(src));
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::matrix(n, 9 * c, out),
            Op::Im2Col { x, height, width },
            ng,
        )
    }

    /// Front-to-back alpha compositing of `group` consecutive samples per ray.
    ///
    /// `sigma` is `[rays*group, 1]` (non-negative), `colour` is
    /// `[rays*group, ch]`; `deltas` holds one interval length per sample.
    pub fn composite(&mut self, sigma: Var, colour: Var, group: usize, deltas: Vec<f64>) -> Var {
        let (sv, cv) = (self.value(sigma), self.value(colour));
        let n = sv.len();
        assert_eq!(cv.rows(), n);
        assert_eq!(deltas.len(), n);
        let ch = cv.cols();
        let rays = n / group;
        let mut out = vec![0.0; rays * ch];
        let mut trans_after = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for r in 0..rays {
            let mut t = 1.0;
            for i in 0..group {
                let idx = r * group + i;
                let a = 1.0 - (-sv.data()[idx] * deltas[idx]).exp();
                let w = t * a;
                weights[idx] = w;
                t *= 1.0 - a;
                trans_after[idx] = t;
                for (o, cc) in out[r * ch..(r + 1) * ch].iter_mut().zip(cv.row(idx)) {
                    *o += w * cc;
                }
            }
        }
        let ng = self.ng(sigma) || self.ng(colour);
        self.push(
            Tensor::matrix(rays, ch, out),
            Op::Composite {
                sigma,
                colour,
                group,
                deltas,
                trans_after,
                weights,
            },
            ng,
        )
    }

    /// Mean over rows of the squared Euclidean row residual.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        let rows = pv.rows().max(1);
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(s / rows as f64),
            Op::MeanSquaredError { pred, target },
            ng,
        )
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.backward_from(vec![(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep seeded with upstream gradients for arbitrary nodes.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.step(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn step(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (n, k, m) = (av.rows(), av.cols(), wv.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, wv.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; k * m];
                    gemm(k, n, m, av.data(), true, g.data(), false, &mut dw, 0.0);
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw));
                }
            }
            Op::AddRow(x, b) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.ng(*b) {
                    let bv = self.value(*b);
                    let mut db = vec![0.0; bv.len()];
                    for r in 0..g.rows() {
                        for (d, gg) in db.iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    let mut n = g.clone();
                    n.scale(-1.0);
                    accumulate(grads, *b, n);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d));
                }
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale(*s);
                accumulate(grads, *x, d);
            }
            Op::RowScale(x, f) => {
                let mut d = g.clone();
                for (r, s) in f.iter().enumerate() {
                    for v in d.row_mut(r) {
                        *v *= s;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gg, v)| gg * gelu_grad(*v))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gg, s)| gg * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d));
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gg, v)| gg * sigmoid(*v))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (n, m) = (g.rows(), g.cols());
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; m];
                    let mut db = vec![0.0; m];
                    for r in 0..n {
                        for c in 0..m {
                            let gg = g.data()[r * m + c];
                            dg[c] += gg * xhat[r * m + c];
                            db[c] += gg;
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dg));
                    }
                    if self.ng(*beta) {
                        let bs = self.value(*beta).shape().to_vec();
                        accumulate(grads, *beta, Tensor::new(bs, db));
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * m];
                    for r in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..m {
                            let dh = g.data()[r * m + c] * gv.data()[c];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * m + c];
                        }
                        mean_d /= m as f64;
                        mean_dx /= m as f64;
                        for c in 0..m {
                            let dh = g.data()[r * m + c] * gv.data()[c];
                            dx[r * m + c] = rstd[r] * (dh - mean_d - xhat[r * m + c] * mean_dx);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    accumulate(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::Concat(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.ng(*p) {
                        let mut d = vec![0.0; n * w];
                        for r in 0..n {
                            d[r * w..(r + 1) * w].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::RepeatRows(x, times) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..g.rows() {
                    let dst = &mut d[(r / times) * c..(r / times + 1) * c];
                    for (o, gg) in dst.iter_mut().zip(g.row(r)) {
                        *o += gg;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::GroupSum { x, group, weights } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let src = g.row(r / group);
                    for (o, gg) in d[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *o = w * gg;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                lq,
                lk,
                heads,
                probs,
            } => {
                self.attention_backward(g, grads, (*q, *k, *v), (*groups, *lq, *lk, *heads), probs)
            }
            Op::Gather { src, taps } => {
                let sv = self.value(*src);
                let c = sv.cols();
                let mut d = vec![0.0; sv.len()];
                for (p, t) in taps.iter().enumerate() {
                    let gp = g.row(p);
                    for &(row, w) in t {
                        if w == 0.0 {
                            continue;
                        }
                        let row = row as usize;
                        for (o, gg) in d[row * c..(row + 1) * c].iter_mut().zip(gp) {
                            *o += w * gg;
                        }
                    }
                }
                accumulate(grads, *src, Tensor::new(sv.shape().to_vec(), d));
            }
            Op::Im2Col { x, height, width } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let (height, width) = (*height, *width);
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let img = r / (height * width);
                    let y = (r / width) % height;
                    let xx = r % width;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= height as isize || sx >= width as isize {
                                continue;
                            }
                            let src = img * height * width + sy as usize * width + sx as usize;
                            let col = (ky * 3 + kx) * c;
                            let gr = &g.data()[r * 9 * c + col..r * 9 * c + col + c];
                            for (o, gg) in d[src * c..(src + 1) * c].iter_mut().zip(gr) {
                                *o += gg;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::Composite {
                sigma,
                colour,
                group,
                deltas,
                trans_after,
                weights,
            } => {
                let (sv, cv) = (self.value(*sigma), self.value(*colour));
                let ch = cv.cols();
                let n = sv.len();
                if self.ng(*colour) {
                    let mut dc = vec![0.0; cv.len()];
                    for i in 0..n {
                        let gr = g.row(i / group);
                        for (o, gg) in dc[i * ch..(i + 1) * ch].iter_mut().zip(gr) {
                            *o = weights[i] * gg;
                        }
                    }
                    accumulate(grads, *colour, Tensor::new(cv.shape().to_vec(), dc));
                }
                if self.ng(*sigma) {
                    // dC/ds_i = T_{i+1} c_i - sum_{k>i} w_k c_k, with s_i = sigma_i * delta_i.
                    let mut ds = vec![0.0; n];
                    let mut suffix = vec![0.0; ch];
                    for r in 0..n / group {
                        suffix.iter_mut().for_each(|s| *s = 0.0);
                        let gr = g.row(r);
                        for i in (0..*group).rev() {
                            let idx = r * group + i;
                            let ci = cv.row(idx);
                            let mut acc = 0.0;
                            for c in 0..ch {
                                acc += gr[c] * (trans_after[idx] * ci[c] - suffix[c]);
                            }
                            ds[idx] = acc * deltas[idx];
                            for c in 0..ch {
                                suffix[c] += weights[idx] * ci[c];
                            }
                        }
                    }
                    accumulate(grads, *sigma, Tensor::new(sv.shape().to_vec(), ds));
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred);
                let s = 2.0 * g.data()[0] / pv.rows().max(1) as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| s * (p - t))
                    .collect();
                accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d));
            }
        }
    }

    fn attention_backward(
        &self,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        (q, k, v): (Var, Var, Var),
        (groups, lq, lk, heads): (usize, usize, usize, usize),
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        let dh = c / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dp = vec![0.0; lk];
        for gi in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let pbase = ((gi * heads + h) * lq + i) * lk;
                    let p = &probs[pbase..pbase + lk];
                    let qrow_i = (gi * lq + i) * c + off;
                    let grow = &gd[qrow_i..qrow_i + dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let krow_i = (gi * lk + j) * c + off;
                        let vrow = &vd[krow_i..krow_i + dh];
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += grow[t] * vrow[t];
                            dv[krow_i + t] += p[j] * grow[t];
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * inv;
                        let krow_i = (gi * lk + j) * c + off;
                        for t in 0..dh {
                            dq[qrow_i + t] += ds * kd[krow_i + t];
                            dk[krow_i + t] += ds * qd[qrow_i + t];
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            accumulate(grads, q, Tensor::new(qv.shape().to_vec(), dq));
        }
        if self.ng(k) {
            accumulate(grads, k, Tensor::new(kv.shape().to_vec(), dk));
        }
        if self.ng(v) {
            accumulate(grads, v, Tensor::new(vv.shape().to_vec(), dv));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
