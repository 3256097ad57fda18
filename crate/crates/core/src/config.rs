//! Model and training configuration, desk profiles and the flat key/value format.

use std::fmt::Write as _;
use std::str::FromStr;

use egam_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{ProblemKind, DEFAULT_BETA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Per-head query/key/value width.
    pub head_dim: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Output logits are `clip * tanh(.)`.
    pub clip: Real,
    /// Drop the edge stream (Edge-Node and Node-Edge attention) entirely.
    pub node_only: bool,
    /// Use separate source/target projections in Edge-Node attention.
    pub directed: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 8,
            head_dim: 16,
            d_ff: 512,
            encoder_layers: 4,
            decoder_layers: 1,
            clip: 10.0,
            node_only: false,
            directed: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "heads ({}) x head_dim ({}) must equal d_model ({})",
                self.heads, self.head_dim, self.d_model
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("at least one decoder layer is required".into()));
        }
        if self.d_ff == 0 || !(self.clip > 0.0) {
            return Err(Error::Config("d_ff and clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ProblemKind,
    pub nodes: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub lr: Real,
    /// The last `ceil(decay_fraction * epochs)` epochs run at `lr / 10`.
    pub decay_fraction: Real,
    /// Dihedral copies per instance (`m`).
    pub augmentations: usize,
    /// Sampled trajectories per copy (`n`).
    pub samples: usize,
    pub beta: Real,
    pub seed: u64,
    pub val_size: usize,
    pub val_seed: u64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Source instances per computation graph.
    pub chunk: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if !(1..=8).contains(&self.augmentations) {
            return err("augmentations must lie in 1..=8");
        }
        if self.samples == 0 || self.augmentations * self.samples < 2 {
            return err("augmentations x samples must be at least 2 for the baseline");
        }
        if self.nodes < 2 || self.batch_size == 0 || self.batches_per_epoch == 0 || self.chunk == 0 {
            return err("nodes >= 2 and positive batch sizes are required");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.decay_fraction) {
            return err("lr must be positive and decay_fraction in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> Real {
        let decayed = (self.decay_fraction * self.epochs as Real).ceil() as usize;
        if epoch + decayed > self.epochs {
            self.lr / 10.0
        } else {
            self.lr
        }
    }
}

/// A named pair of model and training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Profile {
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Profile::toy()),
            "small" => Ok(Profile::small()),
            "paper" => Ok(Profile::paper()),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }

    /// TSP-8 at desk scale.
    pub fn toy() -> Self {
        Profile {
            model: ModelConfig {
                d_model: 32,
                heads: 4,
                head_dim: 8,
                d_ff: 128,
                encoder_layers: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                kind: ProblemKind::Tsp,
                nodes: 8,
                batch_size: 64,
                batches_per_epoch: 200,
                epochs: 20,
                lr: 1e-3,
                decay_fraction: 0.1,
                augmentations: 4,
                samples: 4,
                beta: DEFAULT_BETA,
                seed: 1,
                val_size: 200,
                val_seed: 1_000_003,
                checkpoint_every: 0,
                chunk: 16,
            },
        }
    }

    pub fn small() -> Self {
        let toy = Profile::toy();
        Profile {
            model: ModelConfig {
                d_model: 64,
                heads: 4,
                head_dim: 16,
                d_ff: 256,
                encoder_layers: 3,
                ..toy.model
            },
            train: TrainConfig {
                nodes: 10,
                ..toy.train
            },
        }
    }

    /// The published setting; far beyond a single desktop CPU.
    pub fn paper() -> Self {
        Profile {
            model: ModelConfig::default(),
            train: TrainConfig {
                nodes: 50,
                batch_size: 128,
                batches_per_epoch: 2500,
                epochs: 100,
                lr: 1e-4,
                augmentations: 8,
                samples: 8,
                ..Profile::toy().train
            },
        }
    }

    /// Flat `key = value` listing of every field.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let rows: [(&str, String); 24] = [
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("head_dim", m.head_dim.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("encoder_layers", m.encoder_layers.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("clip", m.clip.to_string()),
            ("node_only", m.node_only.to_string()),
            ("directed", m.directed.to_string()),
            ("kind", t.kind.to_string()),
            ("nodes", t.nodes.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("batches_per_epoch", t.batches_per_epoch.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lr", t.lr.to_string()),
            ("decay_fraction", t.decay_fraction.to_string()),
            ("augmentations", t.augmentations.to_string()),
            ("samples", t.samples.to_string()),
            ("beta", t.beta.to_string()),
            ("seed", t.seed.to_string()),
            ("val_size", t.val_size.to_string()),
            ("val_seed", t.val_seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("chunk", t.chunk.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Overrides fields from `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "head_dim" => m.head_dim = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "clip" => m.clip = parse(key, value)?,
            "node_only" => m.node_only = parse(key, value)?,
            "directed" => m.directed = parse(key, value)?,
            "kind" => t.kind = value.parse()?,
            "nodes" => t.nodes = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "batches_per_epoch" => t.batches_per_epoch = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "decay_fraction" => t.decay_fraction = parse(key, value)?,
            "augmentations" => t.augmentations = parse(key, value)?,
            "samples" => t.samples = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "val_size" => t.val_size = parse(key, value)?,
            "val_seed" => t.val_seed = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "chunk" => t.chunk = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}
