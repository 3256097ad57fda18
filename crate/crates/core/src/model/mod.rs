//! The policy network: encoder, context embedding, decoder and output head.

mod checkpoint;
mod decode;

use egam_tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::attention::{inv_sqrt, EncoderLayer, FeedForward, Linear, Mha};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::problems::{Features, Instance, ProblemKind, EDGE_FEATURES};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use decode::{Job, Solution, StepRecord, Strategy, Decoded};

#[derive(Debug, Clone)]
struct DecoderLayer {
    node_node: Mha,
    node_edge: Option<Mha>,
    ff: FeedForward,
}

/// All trainable parameters of the model and their layout.
#[derive(Debug, Clone)]
pub struct Policy {
    config: ModelConfig,
    kind: ProblemKind,
    store: ParamStore,
    init_node: Linear,
    init_depot: Option<Linear>,
    init_edge: Option<Linear>,
    encoder: Vec<EncoderLayer>,
    context: Linear,
    decoder: Vec<DecoderLayer>,
    out_q: Linear,
    out_k: Linear,
}

/// Encoder output for a batch of equally sized instances, plus the
/// per-instance projections the decoder reuses at every step.
pub struct Encoding {
    batch: usize,
    n: usize,
    /// `[B*N, d]`.
    nodes: Var,
    /// `[B*N*N, d]`; absent for node-only models.
    edges: Option<Var>,
    layers: Vec<LayerCache>,
    /// Output-head keys: `[B*N, N, d]` (edge rows) or `[B, N, d]` (node-only).
    out_keys: Var,
}

struct LayerCache {
    /// `[B, N, h*dk]`.
    node_k: Var,
    node_v: Var,
    /// `[B*N, N, h*dk]`.
    edge_kv: Option<(Var, Var)>,
}

impl Encoding {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn nodes_per_instance(&self) -> usize {
        self.n
    }

    /// Final node embeddings `[B*N, d]`.
    pub fn nodes(&self) -> Var {
        self.nodes
    }

    /// Final edge embeddings `[B*N*N, d]`.
    pub fn edges(&self) -> Option<Var> {
        self.edges
    }
}

/// Per-trajectory inputs to one decoder evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    /// Index of the trajectory's instance within the encoding.
    pub instance: usize,
    pub current: usize,
    pub start: usize,
    /// Normalised scalar context (absent for TSP).
    pub scalar: Option<egam_tensor::Real>,
    /// `true` = node excluded.
    pub mask: Vec<bool>,
}

impl Policy {
    /// Freshly initialised parameters for `kind`.
    pub fn new<R: Rng>(config: ModelConfig, kind: ProblemKind, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let d = config.d_model;
        let f_n = kind.node_features();
        let init_node = Linear::new(&mut store, "init.node", f_n, d, true, rng);
        let init_depot = kind
            .has_depot()
            .then(|| Linear::new(&mut store, "init.depot", f_n, d, true, rng));
        let init_edge = (!config.node_only)
            .then(|| Linear::new(&mut store, "init.edge", EDGE_FEATURES, d, true, rng));
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("enc.{l}"), &config, rng))
            .collect();
        let d_c = if kind == ProblemKind::Tsp { 2 * d } else { d + 1 };
        let context = Linear::new(&mut store, "dec.context", d_c, d, true, rng);
        let decoder = (0..config.decoder_layers)
            .map(|k| DecoderLayer {
                node_node: Mha::new(&mut store, &format!("dec.{k}.nn"), &config, rng),
                node_edge: (!config.node_only)
                    .then(|| Mha::new(&mut store, &format!("dec.{k}.ne"), &config, rng)),
                ff: FeedForward::new(&mut store, &format!("dec.{k}"), &config, rng),
            })
            .collect();
        let out_q = Linear::new(&mut store, "out.q", d, d, false, rng);
        let out_k = Linear::new(&mut store, "out.k", d, d, false, rng);
        Ok(Policy {
            config,
            kind,
            store,
            init_node,
            init_depot,
            init_edge,
            encoder,
            context,
            decoder,
            out_q,
            out_k,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Runs the encoder on a batch of instances of equal size.
    pub fn encode(&self, g: &mut Graph, batch: &[&Instance]) -> Result<Encoding> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Config("empty encoder batch".into()))?;
        let n = first.len();
        let b = batch.len();
        let f_n = self.kind.node_features();
        let mut node_x = Vec::with_capacity(b * n * f_n);
        let mut edge_x = Vec::with_capacity(b * n * n * EDGE_FEATURES);
        for inst in batch {
            if inst.kind != self.kind || inst.len() != n {
                return Err(Error::Instance(format!(
                    "encoder batch mixes {}-{} with {}-{}",
                    self.kind,
                    n,
                    inst.kind,
                    inst.len()
                )));
            }
            let f = Features::of(inst);
            node_x.extend(f.nodes);
            edge_x.extend(f.edges);
        }
        let d = self.config.d_model;
        let x = g.constant(Tensor::new(vec![b * n, f_n], node_x)?)?;
        let mut nodes = self.init_node.forward(g, x)?;
        if let Some(depot) = &self.init_depot {
            let rows: Vec<usize> = (0..b).map(|i| i * n).collect();
            let xd = g.gather_rows(x, &[f_n], rows)?;
            let emb = depot.forward(g, xd)?;
            let all = g.concat(&[nodes, emb], 0)?;
            let index = (0..b * n)
                .map(|r| if r % n == 0 { b * n + r / n } else { r })
                .collect();
            nodes = g.gather_rows(all, &[d], index)?;
        }
        let mut edges = match &self.init_edge {
            Some(lin) => {
                let ex = g.constant(Tensor::new(vec![b * n * n, EDGE_FEATURES], edge_x)?)?;
                Some(lin.forward(g, ex)?)
            }
            None => None,
        };
        let mut nodes3 = g.reshape(nodes, &[b, n, d])?;
        if let Some(e) = edges {
            edges = Some(g.reshape(e, &[b, n * n, d])?);
        }
        for layer in &self.encoder {
            (nodes3, edges) = layer.forward(g, nodes3, edges)?;
        }
        let nodes = g.reshape(nodes3, &[b * n, d])?;
        let edges = match edges {
            Some(e) => Some(g.reshape(e, &[b * n * n, d])?),
            None => None,
        };
        let hd = self.config.heads * self.config.head_dim;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (k, v) = layer.node_node.project_kv(g, nodes)?;
            let node_k = g.reshape(k, &[b, n, hd])?;
            let node_v = g.reshape(v, &[b, n, hd])?;
            let edge_kv = match (&layer.node_edge, edges) {
                (Some(mha), Some(e)) => {
                    let (k, v) = mha.project_kv(g, e)?;
                    Some((g.reshape(k, &[b * n, n, hd])?, g.reshape(v, &[b * n, n, hd])?))
                }
                _ => None,
            };
            layers.push(LayerCache {
                node_k,
                node_v,
                edge_kv,
            });
        }
        let out_keys = match edges {
            Some(e) => {
                let k = self.out_k.forward(g, e)?;
                g.reshape(k, &[b * n, n, d])?
            }
            None => {
                let k = self.out_k.forward(g, nodes)?;
                g.reshape(k, &[b, n, d])?
            }
        };
        Ok(Encoding {
            batch: b,
            n,
            nodes,
            edges,
            layers,
            out_keys,
        })
    }

    /// Raw context `[A, d_c]`: current node embedding concatenated with the
    /// start node embedding (TSP) or the scalar state component.
    pub fn build_context(&self, g: &mut Graph, enc: &Encoding, inputs: &[StepInput]) -> Result<Var> {
        let n = enc.n;
        let d = self.config.d_model;
        let cur: Vec<usize> = inputs.iter().map(|s| s.instance * n + s.current).collect();
        let cur = g.gather_rows(enc.nodes, &[d], cur)?;
        let second = if self.kind == ProblemKind::Tsp {
            let first = inputs.iter().map(|s| s.instance * n + s.start).collect();
            g.gather_rows(enc.nodes, &[d], first)?
        } else {
            let vals = inputs
                .iter()
                .map(|s| {
                    s.scalar.ok_or_else(|| {
                        Error::Config(format!("{} context needs a scalar component", self.kind))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            g.constant(Tensor::new(vec![inputs.len(), 1], vals)?)?
        };
        Ok(g.concat(&[cur, second], 1)?)
    }

    /// Output-head logits `[A, N]` for a set of decoding states; masked
    /// entries hold unused values and must be excluded by the caller.
    pub fn step_logits(&self, g: &mut Graph, enc: &Encoding, inputs: &[StepInput]) -> Result<Var> {
        let a = inputs.len();
        let n = enc.n;
        let d = self.config.d_model;
        let hd = self.config.heads * self.config.head_dim;
        let mut mask = Vec::with_capacity(a * n);
        for s in inputs {
            if s.mask.len() != n {
                return Err(Error::Config(format!("mask of length {} for {n} nodes", s.mask.len())));
            }
            mask.extend_from_slice(&s.mask);
        }
        let inst: Vec<usize> = inputs.iter().map(|s| s.instance).collect();
        let row: Vec<usize> = inputs.iter().map(|s| s.instance * n + s.current).collect();
        let raw = self.build_context(g, enc, inputs)?;
        let mut ctx = self.context.forward(g, raw)?;
        for (layer, cache) in self.decoder.iter().zip(&enc.layers) {
            let x = g.reshape(ctx, &[a, 1, d])?;
            let k = g.gather_rows(cache.node_k, &[n, hd], inst.clone())?;
            let v = g.gather_rows(cache.node_v, &[n, hd], inst.clone())?;
            let upd = layer.node_node.attend(g, x, k, v, Some(mask.clone()))?;
            let mut x3 = g.add(upd, x)?;
            if let (Some(mha), Some((ek, ev))) = (&layer.node_edge, cache.edge_kv) {
                let k = g.gather_rows(ek, &[n, hd], row.clone())?;
                let v = g.gather_rows(ev, &[n, hd], row.clone())?;
                let upd = mha.attend(g, x3, k, v, Some(mask.clone()))?;
                x3 = g.add(upd, x3)?;
            }
            let x = g.reshape(x3, &[a, d])?;
            ctx = layer.ff.residual(g, x)?;
        }
        let q = self.out_q.forward(g, ctx)?;
        let keys = if enc.edges.is_some() {
            g.gather_rows(enc.out_keys, &[n, d], row)?
        } else {
            g.gather_rows(enc.out_keys, &[n, d], inst)?
        };
        let u = g.row_dot(q, keys)?;
        let u = g.scale(u, inv_sqrt(d))?;
        Ok(g.tanh_clip(u, self.config.clip)?)
    }

    /// Node probabilities `[A, N]` (masked entries exactly zero).
    pub fn decoder_step(&self, g: &mut Graph, enc: &Encoding, inputs: &[StepInput]) -> Result<Var> {
        let u = self.step_logits(g, enc, inputs)?;
        let mask = inputs.iter().flat_map(|s| s.mask.iter().copied()).collect();
        Ok(g.softmax_masked(u, mask)?)
    }
}
