//! Graph-based window attention.
//!
//! A feature map is cut into non-overlapping `M x M` windows; every spatial
//! position of a window is a graph node. Each node is linked to its `k`
//! nearest neighbours in raw feature space (rebuilt on every forward pass),
//! and the node embedding is updated residually with softmax-weighted
//! messages from those neighbours:
//!
//! ```text
//! x_upd(i) = x(i) + W_z * sum_{j in N(i)} alpha(i, j) * W_g x(j)
//! alpha(i, j) = softmax_{j in N(i)} (W_theta x(i))^T (W_phi x(j))
//! ```
//!
//! With `N(i)` equal to the whole window this is ordinary window attention;
//! [`AttentionMode::Dense`] computes that case with dense matrix products so
//! the two routes can be checked against each other.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Attend over the `k` nearest neighbours of each node.
    Knn,
    /// Attend over every node of the window, self included.
    Dense,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Knn => "knn",
            AttentionMode::Dense => "dense",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(AttentionMode::Knn),
            "dense" => Ok(AttentionMode::Dense),
            other => Err(Error::invalid(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Static shape of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct GwamConfig {
    pub window: usize,
    pub k: usize,
    pub heads: usize,
    pub mode: AttentionMode,
    /// Let a node select itself as a neighbour. Off by default; turning it on
    /// with `k = M^2` makes the k-NN route sum over the same set as dense mode.
    pub include_self: bool,
}

impl GwamConfig {
    /// `k = M^2 / 2`, one head, k-NN mode.
    pub fn new(window: usize) -> Self {
        GwamConfig {
            window,
            k: (window * window / 2).max(1),
            heads: 1,
            mode: AttentionMode::Knn,
            include_self: false,
        }
    }

    pub fn nodes(&self) -> usize {
        self.window * self.window
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let n = self.nodes();
        if self.window < 2 {
            return Err(Error::invalid(format!(
                "window size {} leaves no neighbours",
                self.window
            )));
        }
        let max_k = if self.include_self { n } else { n - 1 };
        if self.mode == AttentionMode::Knn && (self.k == 0 || self.k > max_k) {
            return Err(Error::invalid(format!(
                "k = {} outside 1..={max_k} for a {}x{} window",
                self.k, self.window, self.window
            )));
        }
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{channels} channels cannot be split into {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// The four projection matrices of one head, each `[d, d]` with
/// `d = C / heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<S> {
    pub theta: Tensor<S>,
    pub phi: Tensor<S>,
    pub g: Tensor<S>,
    pub z: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwamParams<S> {
    pub config: GwamConfig,
    pub heads: Vec<HeadWeights<S>>,
}

impl<S: Real> GwamParams<S> {
    /// Random projections; `W_z` is scaled by `z_gain` so the block starts
    /// close to the identity.
    pub fn random(config: GwamConfig, channels: usize, z_gain: f64, rng: &mut Rng) -> Result<Self> {
        config.validate(channels)?;
        let d = channels / config.heads;
        let std = (1.0 / d as f64).sqrt();
        let heads = (0..config.heads)
            .map(|_| HeadWeights {
                theta: Tensor::randn(&[d, d], std, rng),
                phi: Tensor::randn(&[d, d], std, rng),
                g: Tensor::randn(&[d, d], std, rng),
                z: Tensor::randn(&[d, d], std * z_gain, rng),
            })
            .collect();
        Ok(GwamParams { config, heads })
    }
}

/// Tape handles of one head's matrices.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub theta: Var,
    pub phi: Var,
    pub g: Var,
    pub z: Var,
}

/// Per-window k-NN graph and its attention coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowGraph {
    pub nodes: usize,
    pub k: usize,
    /// `nodes * k` neighbour indices, row `i` holding the neighbours of `i`
    /// ordered by increasing distance.
    pub neighbors: Vec<u32>,
    /// `nodes * k` coefficients aligned with `neighbors`; empty until
    /// [`attention_coefficients`] fills them.
    pub alpha: Vec<f64>,
}

impl WindowGraph {
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn alpha(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.k..(i + 1) * self.k]
    }
}

/// Split an NCHW map into windows of `[M*M, C]` node features.
pub fn partition_windows<S: Real>(feature_map: &Tensor<S>, window: usize) -> Result<Vec<Tensor<S>>> {
    let parts = crate::tensor::graph_partition(feature_map, window)?;
    let (count, n, c) = (parts.shape()[0], parts.shape()[1], parts.shape()[2]);
    parts
        .data()
        .chunks(n * c)
        .take(count)
        .map(|chunk| Tensor::new(&[n, c], chunk.to_vec()))
        .collect()
}

/// Reassemble windows produced by [`partition_windows`].
pub fn merge_windows<S: Real>(windows: &[Tensor<S>], window: usize, shape: [usize; 4]) -> Result<Tensor<S>> {
    let n = window * window;
    let c = shape[1];
    let mut data = Vec::with_capacity(windows.len() * n * c);
    for w in windows {
        if w.shape() != [n, c] {
            return Err(Error::shape("merge_windows", format!("window {:?}, expected [{n}, {c}]", w.shape())));
        }
        data.extend_from_slice(w.data());
    }
    let stacked = Tensor::new(&[windows.len(), n, c], data)?;
    crate::tensor::graph_merge(&stacked, window, shape)
}

/// Neighbours of each node of one window: the `k` nodes at smallest squared
/// Euclidean distance, ties broken by lower index. `nodes` is row-major
/// `[n, c]`.
pub fn knn_edges<S: Real>(nodes: &[S], n: usize, c: usize, k: usize, include_self: bool) -> Result<Vec<u32>> {
    let max_k = if include_self { n } else { n.saturating_sub(1) };
    if k == 0 || k > max_k {
        return Err(Error::invalid(format!("k = {k} outside 1..={max_k} for {n} nodes")));
    }
    if nodes.len() != n * c {
        return Err(Error::shape("knn_graph", format!("{} values for {n} x {c} nodes", nodes.len())));
    }
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n);
    for i in 0..n {
        let xi = &nodes[i * c..(i + 1) * c];
        cand.clear();
        for j in 0..n {
            if j == i && !include_self {
                continue;
            }
            let xj = &nodes[j * c..(j + 1) * c];
            let d: f64 = xi
                .iter()
                .zip(xj)
                .map(|(&a, &b)| {
                    let t = a.f64() - b.f64();
                    t * t
                })
                .sum();
            cand.push((d, j as u32));
        }
        let by_dist = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist);
        edges.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(edges)
}

/// Build the k-NN graph of one window (`nodes` is `[M*M, C]`).
pub fn knn_graph<S: Real>(nodes: &Tensor<S>, k: usize) -> Result<WindowGraph> {
    let (n, c) = match nodes.shape()[..] {
        [n, c] => (n, c),
        _ => return Err(Error::shape("knn_graph", format!("expected [nodes, C], got {:?}", nodes.shape()))),
    };
    Ok(WindowGraph {
        nodes: n,
        k,
        neighbors: knn_edges(nodes.data(), n, c, k, false)?,
        alpha: Vec::new(),
    })
}

fn window_dims<S: Real>(nodes: &Tensor<S>, w: &Tensor<S>) -> Result<(usize, usize)> {
    match (nodes.shape(), w.shape()) {
        ([n, c], [a, b]) if a == c && b == c => Ok((*n, *c)),
        (ns, ws) => Err(Error::shape("window attention", format!("nodes {ns:?} with weight {ws:?}"))),
    }
}

/// Project rows `[n, c]` through `W` (`y_i = W x_i`) on the tape.
fn project<S: Real>(g: &mut Graph<S>, rows: Var, w: Var) -> Result<Var> {
    let wt = g.value(w).clone();
    let d = wt.shape()[0];
    let rows_shape = g.shape(rows).to_vec();
    let r3 = g.reshape(rows, &[1, rows_shape[0], rows_shape[1]])?;
    let w3 = g.reshape(w, &[1, d, d])?;
    let y = g.bmm(r3, w3, true)?;
    g.reshape(y, &rows_shape)
}

/// Fill `graph.alpha` with the neighbour-restricted softmax of
/// `(W_theta x_i)^T (W_phi x_j)`.
pub fn attention_coefficients<S: Real>(
    nodes: &Tensor<S>,
    graph: &mut WindowGraph,
    w_theta: &Tensor<S>,
    w_phi: &Tensor<S>,
) -> Result<()> {
    let (n, _) = window_dims(nodes, w_theta)?;
    window_dims(nodes, w_phi)?;
    if graph.nodes != n {
        return Err(Error::shape("attention_coefficients", format!("graph of {} nodes, window of {n}", graph.nodes)));
    }
    let mut g = Graph::new();
    let x = g.constant(nodes.clone());
    let (wt, wp) = (g.constant(w_theta.clone()), g.constant(w_phi.clone()));
    let alpha = neighbor_alpha(&mut g, x, wt, wp, graph.neighbors.clone().into(), graph.k)?;
    graph.alpha = g.value(alpha).data().iter().map(|v| v.f64()).collect();
    Ok(())
}

fn neighbor_alpha<S: Real>(g: &mut Graph<S>, x: Var, wt: Var, wp: Var, edges: Rc<[u32]>, k: usize) -> Result<Var> {
    let q = project(g, x, wt)?;
    let kk = project(g, x, wp)?;
    let [n, c] = [g.shape(x)[0], g.shape(x)[1]];
    let q3 = g.reshape(q, &[1, n, c])?;
    let k3 = g.reshape(kk, &[1, n, c])?;
    let logits = g.edge_logits(q3, k3, edges, k)?;
    g.softmax(logits, 2)
}

/// Residual message passing over the graph's edges with its coefficients.
pub fn gwam_update<S: Real>(
    nodes: &Tensor<S>,
    graph: &WindowGraph,
    w_g: &Tensor<S>,
    w_z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c) = window_dims(nodes, w_g)?;
    window_dims(nodes, w_z)?;
    if graph.alpha.len() != n * graph.k || graph.neighbors.len() != n * graph.k {
        return Err(Error::invalid("graph coefficients do not match its edges"));
    }
    let mut g = Graph::new();
    let x = g.constant(nodes.clone());
    let alpha = g.constant(Tensor::new(&[1, n, graph.k], graph.alpha.iter().map(|&a| S::of(a)).collect())?);
    let (wg, wz) = (g.constant(w_g.clone()), g.constant(w_z.clone()));
    let out = aggregate_update(&mut g, x, alpha, wg, wz, graph.neighbors.clone().into(), graph.k, n, c)?;
    Ok(g.value(out).clone())
}

#[allow(clippy::too_many_arguments)]
fn aggregate_update<S: Real>(
    g: &mut Graph<S>,
    x: Var,
    alpha: Var,
    wg: Var,
    wz: Var,
    edges: Rc<[u32]>,
    k: usize,
    n: usize,
    c: usize,
) -> Result<Var> {
    let v = project(g, x, wg)?;
    let v3 = g.reshape(v, &[1, n, c])?;
    let agg = g.edge_aggregate(alpha, v3, edges, k)?;
    let agg = g.reshape(agg, &[n, c])?;
    let upd = project(g, agg, wz)?;
    g.add(x, upd)
}

/// Conventional window attention: every node attends to the full window,
/// itself included.
pub fn dense_window_attention<S: Real>(
    nodes: &Tensor<S>,
    w_theta: &Tensor<S>,
    w_phi: &Tensor<S>,
    w_g: &Tensor<S>,
    w_z: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c) = window_dims(nodes, w_theta)?;
    for w in [w_phi, w_g, w_z] {
        window_dims(nodes, w)?;
    }
    let mut g = Graph::new();
    let x = g.constant(nodes.clone());
    let [wt, wp, wg, wz] = [w_theta, w_phi, w_g, w_z].map(|w| g.constant(w.clone()));
    let q = project(&mut g, x, wt)?;
    let kk = project(&mut g, x, wp)?;
    let v = project(&mut g, x, wg)?;
    let [q3, k3, v3] = [q, kk, v].map(|t| g.reshape(t, &[1, n, c]).expect("same element count"));
    let out = dense_attend(&mut g, q3, k3, v3)?;
    let out = g.reshape(out, &[n, c])?;
    let upd = project(&mut g, out, wz)?;
    let res = g.add(x, upd)?;
    Ok(g.value(res).clone())
}

fn dense_attend<S: Real>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let logits = g.bmm(q, k, true)?;
    let alpha = g.softmax(logits, 2)?;
    g.bmm(alpha, v, false)
}

/// Differentiable block over an NCHW map: partition, per-head graph build,
/// coefficients, update, merge. Edge selection is fixed structure; gradients
/// flow through the selected edges only.
pub fn gwam_forward<S: Real>(g: &mut Graph<S>, x: Var, config: &GwamConfig, heads: &[HeadVars]) -> Result<Var> {
    let (n, c, h, w) = g.value(x).dims4()?;
    config.validate(c)?;
    if heads.len() != config.heads {
        return Err(Error::invalid(format!("{} head weights for {} heads", heads.len(), config.heads)));
    }
    let m = config.window;
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape("gwam_forward", format!("{h}x{w} not divisible by window {m}")));
    }
    let d = c / config.heads;
    let nodes = m * m;
    let windows = n * (h / m) * (w / m);
    let mut outs = Vec::with_capacity(config.heads);
    for (hi, hv) in heads.iter().enumerate() {
        let xh = if config.heads == 1 { x } else { g.slice_channels(x, hi * d, d)? };
        let [q, kk, v] = [hv.theta, hv.phi, hv.g].map(|wv| conv1x1(g, xh, wv, d));
        let [q, kk, v] = [q?, kk?, v?];
        let [qp, kp, vp] = [q, kk, v].map(|t| g.window_partition(t, m));
        let [qp, kp, vp] = [qp?, kp?, vp?];
        let agg = match config.mode {
            AttentionMode::Dense => dense_attend(g, qp, kp, vp)?,
            AttentionMode::Knn => {
                let raw = crate::tensor::graph_partition(g.value(xh), m)?;
                let mut edges = Vec::with_capacity(windows * nodes * config.k);
                for win in raw.data().chunks(nodes * d) {
                    edges.extend(knn_edges(win, nodes, d, config.k, config.include_self)?);
                }
                let edges: Rc<[u32]> = edges.into();
                let logits = g.edge_logits(qp, kp, edges.clone(), config.k)?;
                let alpha = g.softmax(logits, 2)?;
                g.edge_aggregate(alpha, vp, edges, config.k)?
            }
        };
        let merged = g.window_merge(agg, m, [n, d, h, w])?;
        outs.push(conv1x1(g, merged, hv.z, d)?);
    }
    let upd = if outs.len() == 1 { outs[0] } else { g.concat_channels(&outs)? };
    g.add(x, upd)
}

fn conv1x1<S: Real>(g: &mut Graph<S>, x: Var, w: Var, d: usize) -> Result<Var> {
    let w4 = g.reshape(w, &[d, d, 1, 1])?;
    g.conv2d(x, w4, None, 1, 0)
}

/// Register a parameter set as tape leaves.
pub fn bind_params<S: Real>(g: &mut Graph<S>, params: &GwamParams<S>, trainable: bool) -> Vec<HeadVars> {
    params
        .heads
        .iter()
        .map(|h| {
            let mut put = |t: &Tensor<S>| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            HeadVars {
                theta: put(&h.theta),
                phi: put(&h.phi),
                g: put(&h.g),
                z: put(&h.z),
            }
        })
        .collect()
}
