//! Multi-head attention and the node/edge attention layers of the encoder.
//!
//! Node embeddings are carried as `[B, N, d]` and edge embeddings as
//! `[B, N*N, d]` (row `i*N + j` holds `e_ij`), so one graph can encode a
//! whole batch of equally sized instances.

use egam_tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;

/// Affine map `x W^T + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[out, inp], inp, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[out], inp, rng));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        Ok(g.linear(x, w, b)?)
    }
}

/// Multi-head attention: stacked per-head query/key/value projections and
/// the output projection. No biases.
#[derive(Debug, Clone, Copy)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, hd) = (cfg.d_model, cfg.heads * cfg.head_dim);
        Mha {
            q: Linear::new(store, &format!("{name}.q"), d, hd, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d, hd, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, hd, false, rng),
            o: Linear::new(store, &format!("{name}.o"), hd, d, false, rng),
            heads: cfg.heads,
        }
    }

    /// Key and value projections of `x`, shape preserved except the last axis.
    pub fn project_kv(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, x)?, self.v.forward(g, x)?))
    }

    /// Attention of `x: [G, M, d]` over projected keys/values `[G, S, h*dk]`.
    /// Returns `[G, M, d]` without residual.
    pub fn attend(&self, g: &mut Graph, x: Var, k: Var, v: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, a)
    }

    /// `MHA(x, yz)` for `x: [G, M, d]`, `yz: [G, S, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var, yz: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (k, v) = self.project_kv(g, yz)?;
        self.attend(g, x, k, v, mask)
    }
}

/// Two-layer ReLU network; used with a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, cfg.d_model, true, rng),
        }
    }

    /// `x + W2 relu(W1 x + b1) + b2`.
    pub fn residual(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        let y = self.outer.forward(g, h)?;
        Ok(g.add(x, y)?)
    }
}

/// Instance normalisation with a learned per-channel affine map.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    /// Normalises `x: [B, S, d]` over the set axis.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.instance_norm(x, gamma, beta)?)
    }
}

/// Each node attends over all nodes of its instance. `nodes: [B, N, d]`.
pub fn node_node(g: &mut Graph, mha: &Mha, nodes: Var, mask: Option<Vec<bool>>) -> Result<Var> {
    mha.forward(g, nodes, nodes, mask)
}

/// Each node `i` attends over its adjacent edges `e_i1..e_iN` (self-loop
/// included). `nodes: [B, N, d]`, `edges: [B, N*N, d]`; returns `[B, N, d]`.
pub fn node_edge(g: &mut Graph, mha: &Mha, nodes: Var, edges: Var) -> Result<Var> {
    let s = g.shape(nodes).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let q = g.reshape(nodes, &[b * n, 1, d])?;
    let e = g.reshape(edges, &[b * n, n, d])?;
    let out = mha.forward(g, q, e, None)?;
    Ok(g.reshape(out, &[b, n, d])?)
}

/// Separate source/target maps used by the directed Edge-Node variant.
#[derive(Debug, Clone, Copy)]
pub struct Orientation {
    pub source: Linear,
    pub target: Linear,
}

impl Orientation {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Orientation {
            source: Linear::new(store, &format!("{name}.src"), d, d, true, rng),
            target: Linear::new(store, &format!("{name}.dst"), d, d, true, rng),
        }
    }
}

/// Each edge `e_ij` attends over its endpoints. Undirected: keys are
/// `{n_i, n_j}`; directed: `{W_s n_i + b_s, W_e n_j + b_e}`.
/// `edges: [B, N*N, d]`, `nodes: [B, N, d]`; returns `[B, N*N, d]`.
pub fn edge_node(
    g: &mut Graph,
    mha: &Mha,
    edges: Var,
    nodes: Var,
    orientation: Option<&Orientation>,
) -> Result<Var> {
    let s = g.shape(nodes).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(nodes, &[b * n, d])?;
    let (ends, offset) = match orientation {
        None => (flat, 0),
        Some(o) => {
            let src = o.source.forward(g, flat)?;
            let dst = o.target.forward(g, flat)?;
            (g.concat(&[src, dst], 0)?, b * n)
        }
    };
    let (k, v) = mha.project_kv(g, ends)?;
    let hd = g.shape(k)[1];
    let mut index = Vec::with_capacity(b * n * n * 2);
    for bi in 0..b {
        for i in 0..n {
            for j in 0..n {
                index.push(bi * n + i);
                index.push(offset + bi * n + j);
            }
        }
    }
    let k = g.gather_rows(k, &[hd], index.clone())?;
    let k = g.reshape(k, &[b * n * n, 2, hd])?;
    let v = g.gather_rows(v, &[hd], index)?;
    let v = g.reshape(v, &[b * n * n, 2, hd])?;
    let q = g.reshape(edges, &[b * n * n, 1, d])?;
    let out = mha.attend(g, q, k, v, None)?;
    Ok(g.reshape(out, &[b, n * n, d])?)
}

/// One encoder layer. Edge-stream members are absent in node-only models.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub node_node: Mha,
    pub edge_node: Option<Mha>,
    pub orientation: Option<Orientation>,
    pub node_edge: Option<Mha>,
    pub node_ff: (Norm, FeedForward, Norm),
    pub edge_ff: Option<(Norm, FeedForward, Norm)>,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let node_node = Mha::new(store, &format!("{name}.nn"), cfg, rng);
        let with_edges = !cfg.node_only;
        let edge_node = with_edges.then(|| Mha::new(store, &format!("{name}.en"), cfg, rng));
        let orientation = (with_edges && cfg.directed)
            .then(|| Orientation::new(store, &format!("{name}.en"), d, rng));
        let node_edge = with_edges.then(|| Mha::new(store, &format!("{name}.ne"), cfg, rng));
        let block = |store: &mut ParamStore, rng: &mut R, s: &str| {
            (
                Norm::new(store, &format!("{name}.{s}.norm1"), d),
                FeedForward::new(store, &format!("{name}.{s}"), cfg, rng),
                Norm::new(store, &format!("{name}.{s}.norm2"), d),
            )
        };
        let node_ff = block(store, rng, "node");
        let edge_ff = with_edges.then(|| block(store, rng, "edge"));
        EncoderLayer {
            node_node,
            edge_node,
            orientation,
            node_edge,
            node_ff,
            edge_ff,
        }
    }

    /// Node-Node, Edge-Node and Node-Edge attention with residuals, then
    /// `Norm(FF_res(Norm(.)))` on each stream.
    pub fn forward(&self, g: &mut Graph, nodes: Var, edges: Option<Var>) -> Result<(Var, Option<Var>)> {
        let upd = node_node(g, &self.node_node, nodes, None)?;
        let mut nodes = g.add(upd, nodes)?;
        let mut edges = edges;
        if let (Some(en), Some(ne), Some(e)) = (&self.edge_node, &self.node_edge, edges) {
            let upd = edge_node(g, en, e, nodes, self.orientation.as_ref())?;
            let e = g.add(upd, e)?;
            let upd = node_edge(g, ne, nodes, e)?;
            nodes = g.add(upd, nodes)?;
            edges = Some(e);
        }
        let norm_ff = |g: &mut Graph, x: Var, (n1, ff, n2): &(Norm, FeedForward, Norm)| -> Result<Var> {
            let x = n1.forward(g, x)?;
            let x = ff.residual(g, x)?;
            n2.forward(g, x)
        };
        let nodes = norm_ff(g, nodes, &self.node_ff)?;
        let edges = match (edges, &self.edge_ff) {
            (Some(e), Some(block)) => Some(norm_ff(g, e, block)?),
            _ => None,
        };
        Ok((nodes, edges))
    }
}

/// Scale applied to query/key dot products in the output head.
pub fn inv_sqrt(d: usize) -> Real {
    1.0 / (d as Real).sqrt()
}
