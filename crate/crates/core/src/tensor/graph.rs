use std::rc::Rc;

use super::conv::{
    conv2d_backward, conv2d_direct, conv2d_im2col, conv_transpose2d_backward,
    conv_transpose2d_direct, conv_transpose2d_im2col,
};
use super::{ConvAlgo, Real, Tensor};
use crate::error::{Error, Result};
use crate::prob;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    LeakyRelu(Var, S),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    ClampMin(Var, S),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    WindowPartition {
        x: Var,
        m: usize,
    },
    WindowMerge {
        x: Var,
        m: usize,
    },
    EdgeLogits {
        q: Var,
        k: Var,
        edges: Rc<[u32]>,
        deg: usize,
    },
    EdgeAggregate {
        alpha: Var,
        v: Var,
        edges: Rc<[u32]>,
        deg: usize,
    },
    SteRound(Var),
    GaussianBits {
        v: Var,
        mu: Var,
        sigma: Var,
    },
    LogisticBits {
        z: Var,
        loc: Var,
        scale: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Dynamic tape: every op appends a node; [`Graph::backward`] walks it in
/// reverse. A fresh graph is built for each forward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    conv_algo: ConvAlgo,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn zip_map<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            conv_algo: ConvAlgo::default(),
        }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: receives a gradient on `backward`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Detached input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if `v` participated.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape matches value")
        })
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        self.unary(x, |v| if v > S::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::invalid("log of non-positive value"));
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| S::of(v.f64().max(0.0) + (-v.f64().abs()).exp().ln_1p()),
            Op::Softplus(x),
        )
    }

    /// `max(x, lo)`; the gradient passes only where `x >= lo`.
    pub fn clamp_min(&mut self, x: Var, lo: S) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / S::of(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let value = match self.conv_algo {
            ConvAlgo::Im2col => conv2d_im2col(self.value(x), self.value(w), bias, stride, pad)?,
            ConvAlgo::Direct => conv2d_direct(self.value(x), self.value(w), bias, stride, pad)?,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution; weight layout `[Cin, Cout, K, K]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let value = match self.conv_algo {
            ConvAlgo::Im2col => conv_transpose2d_im2col(self.value(x), self.value(w), bias, stride, pad)?,
            ConvAlgo::Direct => conv_transpose2d_direct(self.value(x), self.value(w), bias, stride, pad)?,
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(value, Op::ConvT2d { x, w, b, stride, pad }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).channels(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, start }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut ctot = 0;
        for &x in xs {
            let (n2, c, h2, w2) = self.value(x).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(*first), self.shape(x)),
                ));
            }
            ctot += c;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(&[n, ctot, h, w], data)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::NonFinite("softmax input"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let value = Tensor::new(&shape, softmax_forward(t.data(), outer, len, inner))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Batched matrix product: `a[B,n,k] * b[B,k,m]`, or `a * b^T` with
    /// `b[B,m,k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, n, k) = dims3(self.shape(a))?;
        let (bb, r, c) = dims3(self.shape(b))?;
        let (kb, m) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b={trans_b})", self.shape(a), self.shape(b)),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); ba * n * m];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (m as isize, 1) };
        for i in 0..ba {
            S::gemm(
                n, k, m, S::one(), &ad[i * n * k..(i + 1) * n * k], k as isize, 1,
                &bd[i * k * m..(i + 1) * k * m], rsb, csb, S::zero(),
                &mut out[i * n * m..(i + 1) * n * m], m as isize, 1,
            );
        }
        let value = Tensor::new(&[ba, n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, rg))
    }

    /// 2-D matrix product `a[n,k] * b[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.shape(a))?;
        let (k2, m) = dims2(self.shape(b))?;
        let a3 = self.reshape(a, &[1, n, k])?;
        let b3 = self.reshape(b, &[1, k2, m])?;
        let c = self.bmm(a3, b3, false)?;
        self.reshape(c, &[n, m])
    }

    /// `[N, C, H, W]` to `[N * (H/M) * (W/M), M*M, C]`: one row of node
    /// features per window position, windows ordered batch-major then
    /// row-major.
    pub fn window_partition(&mut self, x: Var, m: usize) -> Result<Var> {
        let value = partition(self.value(x), m)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::WindowPartition { x, m }, rg))
    }

    /// Inverse of [`Graph::window_partition`] back to `shape` (NCHW).
    pub fn window_merge(&mut self, x: Var, m: usize, shape: [usize; 4]) -> Result<Var> {
        let value = merge(self.value(x), m, shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::WindowMerge { x, m }, rg))
    }

    /// `out[b,i,t] = q[b,i,:] . k[b, edges[b,i,t], :]` for `deg` edges per node.
    pub fn edge_logits(&mut self, q: Var, k: Var, edges: Rc<[u32]>, deg: usize) -> Result<Var> {
        same_shape("edge_logits", self.shape(q), self.shape(k))?;
        let (bw, n, c) = dims3(self.shape(q))?;
        check_edges(&edges, bw, n, deg)?;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![S::zero(); bw * n * deg];
        for b in 0..bw {
            for i in 0..n {
                let qi = &qd[(b * n + i) * c..][..c];
                for t in 0..deg {
                    let j = edges[(b * n + i) * deg + t] as usize;
                    let kj = &kd[(b * n + j) * c..][..c];
                    out[(b * n + i) * deg + t] = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(&[bw, n, deg], out)?;
        let rg = self.rg(&[q, k]);
        Ok(self.push(value, Op::EdgeLogits { q, k, edges, deg }, rg))
    }

    /// `out[b,i,:] = sum_t alpha[b,i,t] * v[b, edges[b,i,t], :]`.
    pub fn edge_aggregate(&mut self, alpha: Var, v: Var, edges: Rc<[u32]>, deg: usize) -> Result<Var> {
        let (bw, n, c) = dims3(self.shape(v))?;
        if self.shape(alpha) != [bw, n, deg] {
            return Err(Error::shape(
                "edge_aggregate",
                format!("alpha {:?} for values {:?} and degree {deg}", self.shape(alpha), self.shape(v)),
            ));
        }
        check_edges(&edges, bw, n, deg)?;
        let (ad, vd) = (self.value(alpha).data(), self.value(v).data());
        let mut out = vec![S::zero(); bw * n * c];
        for b in 0..bw {
            for i in 0..n {
                let row = &mut out[(b * n + i) * c..][..c];
                for t in 0..deg {
                    let a = ad[(b * n + i) * deg + t];
                    let j = edges[(b * n + i) * deg + t] as usize;
                    let vj = &vd[(b * n + j) * c..][..c];
                    row.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + a * x);
                }
            }
        }
        let value = Tensor::new(&[bw, n, c], out)?;
        let rg = self.rg(&[alpha, v]);
        Ok(self.push(value, Op::EdgeAggregate { alpha, v, edges, deg }, rg))
    }

    /// `round(v - mu) + mu` with a straight-through gradient to `v`.
    pub fn ste_round(&mut self, v: Var, mu: Var) -> Result<Var> {
        same_shape("ste_round", self.shape(v), self.shape(mu))?;
        let data = zip_map(self.value(v).data(), self.value(mu).data(), |x, m| (x - m).round() + m);
        let value = Tensor::new(self.shape(v), data)?;
        let rg = self.rg(&[v]);
        Ok(self.push(value, Op::SteRound(v), rg))
    }

    /// Per-element `-log2 P` of the unit bin around `v` under `N(mu, sigma^2)`.
    pub fn gaussian_bits(&mut self, v: Var, mu: Var, sigma: Var) -> Result<Var> {
        same_shape("gaussian_bits", self.shape(v), self.shape(mu))?;
        same_shape("gaussian_bits", self.shape(v), self.shape(sigma))?;
        let (vd, md, sd) = (self.value(v).data(), self.value(mu).data(), self.value(sigma).data());
        if sd.iter().any(|&s| s <= S::zero()) {
            return Err(Error::invalid("gaussian_bits requires sigma > 0"));
        }
        let data = (0..vd.len())
            .map(|i| S::of(prob::gaussian_bits((vd[i] - md[i]).f64(), sd[i].f64())))
            .collect();
        let value = Tensor::new(self.shape(v), data)?;
        let rg = self.rg(&[v, mu, sigma]);
        Ok(self.push(value, Op::GaussianBits { v, mu, sigma }, rg))
    }

    /// Per-element bits of NCHW `z` under per-channel logistic densities
    /// (`loc`, `scale` of shape `[C]`).
    pub fn logistic_bits(&mut self, z: Var, loc: Var, scale: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(z).dims4()?;
        if self.shape(loc) != [c] || self.shape(scale) != [c] {
            return Err(Error::shape(
                "logistic_bits",
                format!("{c} channels vs loc {:?} scale {:?}", self.shape(loc), self.shape(scale)),
            ));
        }
        let (zd, ld, sd) = (self.value(z).data(), self.value(loc).data(), self.value(scale).data());
        if sd.iter().any(|&s| s <= S::zero()) {
            return Err(Error::invalid("logistic_bits requires scale > 0"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(zd.len());
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let v = zd[(b * c + ch) * hw + p];
                    data.push(S::of(prob::logistic_bits(v.f64(), ld[ch].f64(), sd[ch].f64())));
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], data)?;
        let rg = self.rg(&[z, loc, scale]);
        Ok(self.push(value, Op::LogisticBits { z, loc, scale }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out; earlier gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        fn val<S: Real>(gr: &Graph<S>, v: Var) -> &[S] {
            gr.nodes[v.0].value.data()
        }
        // Ops are matched by reference; gradients are computed into owned
        // buffers before being accumulated, so the borrow of `self.nodes`
        // ends before `accumulate` takes `&mut self`.
        let contributions: Vec<(Var, Vec<S>)> = match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(self, *b), |x, y| x * y)),
                (*b, zip_map(g, val(self, *a), |x, y| x * y)),
            ],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                zip_map(g, val(self, *a), |x, v| if v > S::zero() { x } else { x * *slope }),
            )],
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                vec![(*a, zip_map(g, y, |x, t| x * (S::one() - t * t)))]
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                vec![(*a, zip_map(g, y, |x, e| x * e))]
            }
            Op::Log(a) => vec![(*a, zip_map(g, val(self, *a), |x, v| x / v))],
            Op::Softplus(a) => vec![(
                *a,
                zip_map(g, val(self, *a), |x, v| x * S::of(prob::sigmoid(v.f64()))),
            )],
            Op::ClampMin(a, lo) => vec![(
                *a,
                zip_map(g, val(self, *a), |x, v| if v >= *lo { x } else { S::zero() }),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.len()])],
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                vec![(*a, vec![g[0] / S::of(n as f64); n])]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, g, *stride, *pad);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    conv_transpose2d_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, g, *stride, *pad);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, gb));
                }
                out
            }
            Op::SliceChannels { x, start } => {
                let src = &self.nodes[x.0].value;
                let (n, c, h, w) = src.dims4().expect("4-D");
                let len = self.nodes[i].value.shape()[1];
                let hw = h * w;
                let mut gx = vec![S::zero(); src.len()];
                for b in 0..n {
                    gx[(b * c + start) * hw..][..len * hw].copy_from_slice(&g[b * len * hw..][..len * hw]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatChannels(xs) => {
                let (n, ctot, h, w) = self.nodes[i].value.dims4().expect("4-D");
                let hw = h * w;
                let mut out: Vec<(Var, Vec<S>)> = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.shape()[1];
                    let mut gx = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        gx.extend_from_slice(&g[(b * ctot + offset) * hw..][..c * hw]);
                    }
                    offset += c;
                    out.push((x, gx));
                }
                out
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].value.data();
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..*outer {
                    for p in 0..*inner {
                        let idx = |t: usize| (o * len + t) * inner + p;
                        let dot: S = (0..*len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..*len {
                            gx[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Bmm { a, b, trans_b } => {
                let (ba, n, k) = dims3(self.nodes[a.0].value.shape()).expect("3-D");
                let m = self.nodes[i].value.shape()[2];
                let (ad, bd) = (val(self, *a), val(self, *b));
                let mut ga = vec![S::zero(); ad.len()];
                let mut gb = vec![S::zero(); bd.len()];
                for t in 0..ba {
                    let gt = &g[t * n * m..(t + 1) * n * m];
                    let at = &ad[t * n * k..(t + 1) * n * k];
                    let bt = &bd[t * k * m..(t + 1) * k * m];
                    let gat = &mut ga[t * n * k..(t + 1) * n * k];
                    let gbt = &mut gb[t * k * m..(t + 1) * k * m];
                    if *trans_b {
                        // c = a b^T with b[m,k]: ga = g b, gb = g^T a
                        S::gemm(n, m, k, S::one(), gt, m as isize, 1, bt, k as isize, 1, S::zero(), gat, k as isize, 1);
                        S::gemm(m, n, k, S::one(), gt, 1, m as isize, at, k as isize, 1, S::zero(), gbt, k as isize, 1);
                    } else {
                        // c = a b with b[k,m]: ga = g b^T, gb = a^T g
                        S::gemm(n, m, k, S::one(), gt, m as isize, 1, bt, 1, m as isize, S::zero(), gat, k as isize, 1);
                        S::gemm(k, n, m, S::one(), at, 1, k as isize, gt, m as isize, 1, S::zero(), gbt, m as isize, 1);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::WindowPartition { x, m } => {
                let shape = self.nodes[x.0].value.shape();
                let shape = [shape[0], shape[1], shape[2], shape[3]];
                let gt = Tensor::new(self.nodes[i].value.shape(), g.to_vec()).expect("grad shape");
                vec![(*x, merge(&gt, *m, shape).expect("inverse of forward").into_data())]
            }
            Op::WindowMerge { x, m } => {
                let gt = Tensor::new(self.nodes[i].value.shape(), g.to_vec()).expect("grad shape");
                vec![(*x, partition(&gt, *m).expect("inverse of forward").into_data())]
            }
            Op::EdgeLogits { q, k, edges, deg } => {
                let (bw, n, c) = dims3(self.nodes[q.0].value.shape()).expect("3-D");
                let (qd, kd) = (val(self, *q), val(self, *k));
                let mut gq = vec![S::zero(); qd.len()];
                let mut gk = vec![S::zero(); kd.len()];
                for b in 0..bw {
                    for i in 0..n {
                        for t in 0..*deg {
                            let e = (b * n + i) * deg + t;
                            let j = edges[e] as usize;
                            let gv = g[e];
                            let (qi, kj) = ((b * n + i) * c, (b * n + j) * c);
                            for ch in 0..c {
                                gq[qi + ch] = gq[qi + ch] + gv * kd[kj + ch];
                                gk[kj + ch] = gk[kj + ch] + gv * qd[qi + ch];
                            }
                        }
                    }
                }
                vec![(*q, gq), (*k, gk)]
            }
            Op::EdgeAggregate { alpha, v, edges, deg } => {
                let (bw, n, c) = dims3(self.nodes[v.0].value.shape()).expect("3-D");
                let (ad, vd) = (val(self, *alpha), val(self, *v));
                let mut ga = vec![S::zero(); ad.len()];
                let mut gv = vec![S::zero(); vd.len()];
                for b in 0..bw {
                    for i in 0..n {
                        let gi = &g[(b * n + i) * c..][..c];
                        for t in 0..*deg {
                            let e = (b * n + i) * deg + t;
                            let j = edges[e] as usize;
                            let vj = (b * n + j) * c;
                            let mut dot = S::zero();
                            for ch in 0..c {
                                dot = dot + gi[ch] * vd[vj + ch];
                                gv[vj + ch] = gv[vj + ch] + ad[e] * gi[ch];
                            }
                            ga[e] = dot;
                        }
                    }
                }
                vec![(*alpha, ga), (*v, gv)]
            }
            Op::SteRound(v) => vec![(*v, g.to_vec())],
            Op::GaussianBits { v, mu, sigma } => {
                let (vd, md, sd) = (val(self, *v), val(self, *mu), val(self, *sigma));
                let mut gv = vec![S::zero(); vd.len()];
                let mut gm = vec![S::zero(); vd.len()];
                let mut gs = vec![S::zero(); vd.len()];
                for e in 0..vd.len() {
                    let (_, dd, ds) = prob::gaussian_bits_grad((vd[e] - md[e]).f64(), sd[e].f64());
                    let ge = g[e].f64();
                    gv[e] = S::of(ge * dd);
                    gm[e] = S::of(-ge * dd);
                    gs[e] = S::of(ge * ds);
                }
                vec![(*v, gv), (*mu, gm), (*sigma, gs)]
            }
            Op::LogisticBits { z, loc, scale } => {
                let (n, c, h, w) = self.nodes[z.0].value.dims4().expect("4-D");
                let (zd, ld, sd) = (val(self, *z), val(self, *loc), val(self, *scale));
                let hw = h * w;
                let mut gz = vec![S::zero(); zd.len()];
                let mut gl = vec![0.0f64; c];
                let mut gs = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let e = (b * c + ch) * hw + p;
                            let (_, dd, ds) = prob::logistic_bits_grad(zd[e].f64() - ld[ch].f64(), sd[ch].f64());
                            let ge = g[e].f64();
                            gz[e] = S::of(ge * dd);
                            gl[ch] -= ge * dd;
                            gs[ch] += ge * ds;
                        }
                    }
                }
                vec![
                    (*z, gz),
                    (*loc, gl.into_iter().map(S::of).collect()),
                    (*scale, gs.into_iter().map(S::of).collect()),
                ]
            }
        };
        for (v, gv) in contributions {
            self.accumulate(v, gv);
        }
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape("matmul", format!("expected 2-D, got {shape:?}"))),
    }
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::shape("bmm", format!("expected 3-D, got {shape:?}"))),
    }
}

fn check_edges(edges: &[u32], bw: usize, n: usize, deg: usize) -> Result<()> {
    if edges.len() != bw * n * deg {
        return Err(Error::shape(
            "edges",
            format!("{} entries for {bw} windows x {n} nodes x degree {deg}", edges.len()),
        ));
    }
    if let Some(&bad) = edges.iter().find(|&&j| j as usize >= n) {
        return Err(Error::invalid(format!("edge target {bad} outside window of {n} nodes")));
    }
    Ok(())
}

pub(crate) fn softmax_forward<S: Real>(x: &[S], outer: usize, len: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for p in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + p;
            let max = (0..len).map(|t| x[idx(t)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for t in 0..len {
                let e = (x[idx(t)] - max).exp();
                out[idx(t)] = e;
                total = total + e;
            }
            for t in 0..len {
                out[idx(t)] = out[idx(t)] / total;
            }
        }
    }
    out
}

pub(crate) fn partition<S: Real>(x: &Tensor<S>, m: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("{h}x{w} not divisible into {m}x{m} windows"),
        ));
    }
    let (wh, ww) = (h / m, w / m);
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    for b in 0..n {
        for wy in 0..wh {
            for wx in 0..ww {
                for py in 0..m {
                    for px in 0..m {
                        let (y, xx) = (wy * m + py, wx * m + px);
                        for ch in 0..c {
                            out.push(xd[((b * c + ch) * h + y) * w + xx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n * wh * ww, m * m, c], out)
}

pub(crate) fn merge<S: Real>(x: &Tensor<S>, m: usize, [n, c, h, w]: [usize; 4]) -> Result<Tensor<S>> {
    if m == 0 || h % m != 0 || w % m != 0 || x.shape() != [n * (h / m) * (w / m), m * m, c] {
        return Err(Error::shape(
            "window_merge",
            format!("{:?} into [{n}, {c}, {h}, {w}] with window {m}", x.shape()),
        ));
    }
    let (wh, ww) = (h / m, w / m);
    let xd = x.data();
    let mut out = vec![S::zero(); xd.len()];
    let mut src = 0;
    for b in 0..n {
        for wy in 0..wh {
            for wx in 0..ww {
                for py in 0..m {
                    for px in 0..m {
                        let (y, xx) = (wy * m + py, wx * m + px);
                        for ch in 0..c {
                            out[((b * c + ch) * h + y) * w + xx] = xd[src];
                            src += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use crate::tensor::Rng;

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_grad_is_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[5], |i| i as f64 - 2.0));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-4.0, -2.0, 0.0, 2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_never_receive_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[3], 2.0));
        let c = g.constant(Tensor::full(&[3], 5.0));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.0; 3]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 1.0);
        assert!(d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = Rng::new(99);
        let x = Tensor::<f64>::randn(&[7], 2.0, &mut rng);
        let total: f64 = x.data().iter().map(|v| v.exp()).sum();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.softmax(xv, 0).unwrap();
        for (a, v) in g.value(y).data().iter().zip(x.data()) {
            assert!((a - v.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_f32() {
        let mut rng = Rng::new(4);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[3, 5, 4], 30.0, &mut rng));
        for axis in 0..3 {
            let y = g.softmax(x, axis).unwrap();
            let t = g.value(y).clone();
            let shape = t.shape().to_vec();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            for o in 0..outer {
                for p in 0..inner {
                    let s: f32 = (0..shape[axis]).map(|k| t.data()[(o * shape[axis] + k) * inner + p]).sum();
                    assert!((s - 1.0).abs() < 1e-6, "{s}");
                }
            }
        }
    }

    #[test]
    fn partition_merge_round_trip() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f32>::randn(&[2, 3, 8, 12], 1.0, &mut rng);
        let p = partition(&x, 4).unwrap();
        assert_eq!(p.shape(), &[2 * 2 * 3, 16, 3]);
        assert_eq!(merge(&p, 4, [2, 3, 8, 12]).unwrap(), x);
        assert!(partition(&x, 5).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 3.0));
        let a = g.scale(x, 2.0);
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    /// Builds a small function exercising one op; checked against central
    /// differences on several seeds.
    fn check_op(build: impl Fn(&mut Graph<f64>, Var) -> Var, shape: &[usize]) {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
            let err = finite_diff_check(
                |g, v| {
                    let y = build(g, v);
                    let w = g.constant(Tensor::from_fn(g.shape(y), |i| ((i * 7 % 5) as f64) - 1.7));
                    let p = g.mul(y, w).unwrap();
                    g.sum(p)
                },
                &x,
                1e-5,
                None,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn elementwise_ops_pass_gradcheck() {
        check_op(|g, x| g.tanh(x), &[4, 3]);
        check_op(|g, x| g.exp(x), &[4, 3]);
        check_op(|g, x| g.softplus(x), &[4, 3]);
        check_op(|g, x| g.leaky_relu(x, 0.1), &[4, 3]);
        check_op(|g, x| {
            let e = g.exp(x);
            g.log(e).unwrap()
        }, &[6]);
        check_op(|g, x| {
            let y = g.scale(x, -1.5);
            let y = g.add_scalar(y, 0.2);
            let z = g.mul(y, x).unwrap();
            g.sub(z, x).unwrap()
        }, &[5]);
        check_op(|g, x| {
            let m = g.mean(x);
            let s = g.sum(x);
            let p = g.mul(m, s).unwrap();
            g.reshape(p, &[1, 1]).unwrap()
        }, &[3, 2]);
    }

    #[test]
    fn structural_ops_pass_gradcheck() {
        check_op(|g, x| g.softmax(x, 1).unwrap(), &[2, 5, 3]);
        check_op(|g, x| g.slice_channels(x, 1, 2).unwrap(), &[2, 4, 3, 3]);
        check_op(|g, x| {
            let a = g.slice_channels(x, 0, 1).unwrap();
            let b = g.tanh(x);
            g.concat_channels(&[b, a, x]).unwrap()
        }, &[2, 3, 2, 2]);
        check_op(|g, x| {
            let p = g.window_partition(x, 2).unwrap();
            let t = g.tanh(p);
            g.window_merge(t, 2, [1, 3, 4, 6]).unwrap()
        }, &[1, 3, 4, 6]);
    }

    #[test]
    fn matmul_ops_pass_gradcheck() {
        let mut rng = Rng::new(1);
        let other = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let o2 = other.clone();
        check_op(move |g, x| {
            let b = g.leaf(o2.clone());
            g.bmm(x, b, false).unwrap()
        }, &[2, 5, 4]);
        check_op(move |g, x| {
            let b = g.leaf(other.clone());
            g.bmm(x, b, true).unwrap()
        }, &[2, 5, 3]);
        check_op(|g, x| {
            let y = g.tanh(x);
            g.bmm(y, x, true).unwrap()
        }, &[3, 4, 2]);
        check_op(|g, x| {
            let t = g.tanh(x);
            let r = g.reshape(t, &[2, 3]).unwrap();
            let rx = g.reshape(x, &[3, 2]).unwrap();
            g.matmul(r, rx).unwrap()
        }, &[6]);
    }

    #[test]
    fn conv_ops_pass_gradcheck() {
        let mut rng = Rng::new(2);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        let (w1, b1) = (w.clone(), b.clone());
        check_op(move |g, x| {
            let wv = g.leaf(w1.clone());
            let bv = g.leaf(b1.clone());
            g.conv2d(x, wv, Some(bv), 2, 1).unwrap()
        }, &[2, 2, 5, 5]);
        // Gradient with respect to the weight itself.
        let x0 = Tensor::<f64>::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        check_op(move |g, wv| {
            let xv = g.constant(x0.clone());
            g.conv2d(xv, wv, None, 1, 1).unwrap()
        }, &[3, 2, 3, 3]);
        let wt = Tensor::<f64>::randn(&[2, 3, 4, 4], 0.5, &mut rng);
        let wt2 = wt.clone();
        check_op(move |g, x| {
            let wv = g.leaf(wt.clone());
            let bv = g.leaf(b.clone());
            g.conv_transpose2d(x, wv, Some(bv), 2, 1).unwrap()
        }, &[2, 2, 3, 3]);
        let x1 = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let _ = wt2;
        check_op(move |g, wv| {
            let xv = g.constant(x1.clone());
            g.conv_transpose2d(xv, wv, None, 2, 1).unwrap()
        }, &[2, 3, 4, 4]);
    }

    #[test]
    fn edge_ops_pass_gradcheck() {
        let edges: Rc<[u32]> = vec![1, 2, 0, 2, 3, 0, 1, 3, 2, 0, 1, 2, 3, 1, 0, 3].into();
        let e1 = edges.clone();
        check_op(move |g, x| {
            let t = g.tanh(x);
            g.edge_logits(t, x, e1.clone(), 2).unwrap()
        }, &[2, 4, 3]);
        let mut rng = Rng::new(3);
        let v = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let e2 = edges.clone();
        check_op(move |g, a| {
            let vv = g.leaf(v.clone());
            g.edge_aggregate(a, vv, e2.clone(), 2).unwrap()
        }, &[2, 4, 2]);
        let alpha = Tensor::<f64>::randn(&[2, 4, 2], 1.0, &mut rng);
        check_op(move |g, x| {
            let av = g.constant(alpha.clone());
            g.edge_aggregate(av, x, edges.clone(), 2).unwrap()
        }, &[2, 4, 3]);
    }

    #[test]
    fn rate_ops_pass_gradcheck() {
        let mut rng = Rng::new(5);
        let mu = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let sig = Tensor::<f64>::uniform(&[1, 2, 2, 2], 0.3, 3.0, &mut rng);
        let (m1, s1) = (mu.clone(), sig.clone());
        check_op(move |g, x| {
            let m = g.constant(m1.clone());
            let s = g.constant(s1.clone());
            g.gaussian_bits(x, m, s).unwrap()
        }, &[1, 2, 2, 2]);
        check_op(move |g, x| {
            let v = g.constant(mu.clone());
            let s = g.softplus(x);
            let s = g.add_scalar(s, 0.2);
            let m = g.constant(sig.clone());
            g.gaussian_bits(v, m, s).unwrap()
        }, &[1, 2, 2, 2]);
        let z = Tensor::<f64>::randn(&[2, 3, 2, 2], 2.0, &mut rng);
        check_op(move |g, loc| {
            let zv = g.constant(z.clone());
            let sc = g.constant(Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap());
            g.logistic_bits(zv, loc, sc).unwrap()
        }, &[3]);
        check_op(|g, z| {
            let loc = g.constant(Tensor::new(&[2], vec![0.1, -0.3]).unwrap());
            let raw = g.constant(Tensor::new(&[2], vec![0.2, -0.4]).unwrap());
            let sc = g.exp(raw);
            g.logistic_bits(z, loc, sc).unwrap()
        }, &[1, 2, 3, 1]);
    }

    #[test]
    fn ste_round_passes_gradient_straight_through() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(Tensor::new(&[3], vec![2.4, 0.7, -0.5]).unwrap());
        let mu = g.leaf(Tensor::new(&[3], vec![0.4, 0.0, 0.0]).unwrap());
        let q = g.ste_round(v, mu).unwrap();
        assert_eq!(g.value(q).data(), &[2.4, 1.0, -1.0]);
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[1.0; 3]);
        assert!(g.grad(mu).is_none());
    }
}
