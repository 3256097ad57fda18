//! REINFORCE with the symmetry baseline, and the training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use egam_tensor::{Adam, AdamConfig, Gradients, Graph, Real, TensorError};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::{Profile, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{draw_start, greedy_many};
use crate::io::write_atomic;
use crate::model::{save_checkpoint, Decoded, Job, Policy, Strategy};
use crate::problems::{dihedral_transform, generate_instance, Instance, DIHEDRAL_ORDER};
use crate::rng::{derive_seed, stream};

/// Sampling layout of one REINFORCE batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    /// Dihedral copies per instance (the first is always the identity).
    pub augmentations: usize,
    /// Trajectories per copy.
    pub samples: usize,
    pub beta: Real,
}

impl SampleSpec {
    pub fn of(cfg: &TrainConfig) -> Self {
        SampleSpec {
            augmentations: cfg.augmentations,
            samples: cfg.samples,
            beta: cfg.beta,
        }
    }

    pub fn per_instance(&self) -> usize {
        self.augmentations * self.samples
    }
}

/// Mean of the costs: the shared baseline of one instance's trajectories.
pub fn compute_baseline(costs: &[Real]) -> Real {
    costs.iter().sum::<Real>() / costs.len().max(1) as Real
}

/// `C - b(s)` with `b(s)` the mean over each consecutive group of `group` costs.
pub fn advantages(costs: &[Real], group: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(costs.len());
    for chunk in costs.chunks(group) {
        let b = compute_baseline(chunk);
        out.extend(chunk.iter().map(|c| c - b));
    }
    out
}

/// Sampled trajectories of a set of instances, kept with their graph so the
/// policy gradient can be taken once advantages are known.
pub struct BatchRollouts<'p> {
    graph: Graph<'p>,
    decoded: Decoded,
    spec: SampleSpec,
    instances: usize,
}

impl BatchRollouts<'_> {
    /// Costs ordered instance-major, then copy, then sample.
    pub fn costs(&self) -> Vec<Real> {
        self.decoded.solutions.iter().map(|s| s.cost()).collect()
    }

    pub fn feasible(&self) -> Vec<bool> {
        self.decoded.solutions.iter().map(|s| s.feasible()).collect()
    }

    pub fn decoded(&self) -> &Decoded {
        &self.decoded
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn spec(&self) -> SampleSpec {
        self.spec
    }

    /// Gradient of `scale * sum_j adv_j log p(route_j)`.
    pub fn gradient(&mut self, adv: &[Real], scale: Real) -> Result<Gradients> {
        if adv.len() != self.decoded.solutions.len() {
            return Err(Error::Config(format!(
                "{} advantages for {} trajectories",
                adv.len(),
                self.decoded.solutions.len()
            )));
        }
        if let Some(bad) = adv.iter().find(|a| !a.is_finite()) {
            return Err(Error::Tensor(TensorError::NonFinite {
                op: if bad.is_nan() { "advantage (NaN)" } else { "advantage" },
            }));
        }
        let w: Vec<Real> = adv.iter().map(|a| a * scale).collect();
        let loss = self.decoded.weighted_log_prob(&mut self.graph, &w)?;
        Ok(self.graph.backward(loss)?)
    }
}

/// Samples `spec.samples` trajectories on each of `spec.augmentations`
/// dihedral copies of every instance. Instance `i` uses random streams
/// derived from `(seed, first_index + i)`.
pub fn sample_rollouts<'p>(
    policy: &'p Policy,
    instances: &[Instance],
    spec: SampleSpec,
    seed: u64,
    first_index: usize,
) -> Result<BatchRollouts<'p>> {
    let m = spec.augmentations;
    let per = spec.per_instance();
    let mut copies = Vec::with_capacity(instances.len() * m);
    let mut jobs = Vec::with_capacity(instances.len() * per);
    let mut rngs = Vec::with_capacity(instances.len() * per);
    for (i, inst) in instances.iter().enumerate() {
        let base = ((first_index + i) * (per + 1)) as u64;
        let mut pick = stream(seed, base);
        let mut transforms = vec![0];
        transforms.extend(sample(&mut pick, DIHEDRAL_ORDER - 1, m - 1).into_iter().map(|k| k + 1));
        for (c, &k) in transforms.iter().enumerate() {
            let copy = dihedral_transform(inst, k);
            for s in 0..spec.samples {
                let mut rng = stream(seed, base + 1 + (c * spec.samples + s) as u64);
                let start = draw_start(copy.kind, copy.len(), &mut rng);
                jobs.push(Job {
                    instance: copies.len(),
                    start,
                });
                rngs.push(rng);
            }
            copies.push(copy);
        }
    }
    let refs: Vec<&Instance> = copies.iter().collect();
    let mut graph = Graph::new(policy.store());
    let enc = policy.encode(&mut graph, &refs)?;
    let decoded = policy.decode(&mut graph, &enc, &refs, &jobs, Strategy::Sample(&mut rngs), spec.beta)?;
    Ok(BatchRollouts {
        graph,
        decoded,
        spec,
        instances: instances.len(),
    })
}

/// Teacher-forced rollouts: `routes[i]` are replayed on `instances[i]`.
/// Every instance must carry the same number of routes.
pub fn replay_rollouts<'p>(
    policy: &'p Policy,
    instances: &[Instance],
    routes: &[Vec<Vec<usize>>],
    beta: Real,
) -> Result<BatchRollouts<'p>> {
    let per = routes.first().map_or(0, Vec::len);
    if routes.len() != instances.len() || per == 0 || routes.iter().any(|r| r.len() != per) {
        return Err(Error::Config("replay needs the same positive number of routes per instance".into()));
    }
    let mut jobs = Vec::with_capacity(instances.len() * per);
    let mut flat = Vec::with_capacity(instances.len() * per);
    for (i, rs) in routes.iter().enumerate() {
        for r in rs {
            let start = *r.first().ok_or_else(|| Error::Solution("empty route".into()))?;
            jobs.push(Job { instance: i, start });
            flat.push(r.clone());
        }
    }
    let refs: Vec<&Instance> = instances.iter().collect();
    let mut graph = Graph::new(policy.store());
    let enc = policy.encode(&mut graph, &refs)?;
    let decoded = policy.decode(&mut graph, &enc, &refs, &jobs, Strategy::Forced(&flat), beta)?;
    Ok(BatchRollouts {
        graph,
        decoded,
        spec: SampleSpec {
            augmentations: 1,
            samples: per,
            beta,
        },
        instances: instances.len(),
    })
}

/// Outcome of [`reinforce_grad`].
pub struct BatchResult {
    pub gradients: Gradients,
    pub costs: Vec<Real>,
    pub feasible: Vec<bool>,
    pub baselines: Vec<Real>,
}

/// Symmetry-baseline REINFORCE gradient of the mean cost over `instances`,
/// evaluated `chunk` instances per computation graph.
pub fn reinforce_grad(
    policy: &Policy,
    instances: &[Instance],
    spec: SampleSpec,
    seed: u64,
    chunk: usize,
) -> Result<BatchResult> {
    let per = spec.per_instance();
    let scale = 1.0 / (instances.len() * per) as Real;
    let mut gradients = Gradients::default();
    let mut costs = Vec::with_capacity(instances.len() * per);
    let mut feasible = Vec::with_capacity(instances.len() * per);
    let mut baselines = Vec::with_capacity(instances.len());
    for (c, part) in instances.chunks(chunk.max(1)).enumerate() {
        let mut roll = sample_rollouts(policy, part, spec, seed, c * chunk.max(1))?;
        let cs = roll.costs();
        let adv = advantages(&cs, per);
        gradients.merge(roll.gradient(&adv, scale)?);
        baselines.extend(cs.chunks(per).map(compute_baseline));
        feasible.extend(roll.feasible());
        costs.extend(cs);
    }
    Ok(BatchResult {
        gradients,
        costs,
        feasible,
        baselines,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub mean_cost: Real,
    pub baseline: Real,
    pub grad_norm: Real,
    pub feasible_rate: Real,
    pub wallclock_s: f64,
}

/// Greedy performance on the validation set; epoch 0 is before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationLog {
    pub epoch: usize,
    pub greedy_cost: Real,
    pub feasible_rate: Real,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_cost: Real,
    pub mean_baseline: Real,
    pub grad_norm: Real,
    pub feasible_rate: Real,
    pub skipped_batches: usize,
}

pub struct Trainer {
    policy: Policy,
    adam: Adam,
    cfg: TrainConfig,
    started: Instant,
    skipped: usize,
}

impl Trainer {
    pub fn new(policy: Policy, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if policy.kind() != cfg.kind {
            return Err(Error::Config(format!(
                "policy is for {} but training targets {}",
                policy.kind(),
                cfg.kind
            )));
        }
        Ok(Trainer {
            policy,
            adam: Adam::new(AdamConfig::default()),
            cfg,
            started: Instant::now(),
            skipped: 0,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Batches skipped because of non-finite values.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn batch_seed(&self, epoch: usize, batch: usize) -> u64 {
        let index = (epoch - 1) * self.cfg.batches_per_epoch + batch;
        derive_seed(self.cfg.seed, index as u64)
    }

    /// Fresh training instances of batch `batch` (0-based) in `epoch` (1-based).
    pub fn batch_instances(&self, epoch: usize, batch: usize) -> Result<Vec<Instance>> {
        let seed = self.batch_seed(epoch, batch);
        (0..self.cfg.batch_size)
            .map(|i| generate_instance(self.cfg.kind, self.cfg.nodes, derive_seed(seed, i as u64)))
            .collect()
    }

    /// One optimisation step. Returns `None` when the batch was skipped
    /// because of a non-finite loss or gradient.
    pub fn train_batch(&mut self, epoch: usize, batch: usize) -> Result<Option<BatchLog>> {
        let instances = self.batch_instances(epoch, batch)?;
        let seed = derive_seed(self.batch_seed(epoch, batch), u64::MAX);
        let spec = SampleSpec::of(&self.cfg);
        let result = match reinforce_grad(&self.policy, &instances, spec, seed, self.cfg.chunk) {
            Ok(r) => r,
            Err(Error::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::Divergence { .. }))) => {
                log::warn!("epoch {epoch} batch {batch}: skipped ({e})");
                self.skipped += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let grad_norm = result.gradients.sq_norm().sqrt();
        let store = self.policy.store_mut();
        store.accumulate(&result.gradients);
        if let Err(e) = self.adam.step(store, self.cfg.lr_at(epoch)) {
            log::warn!("epoch {epoch} batch {batch}: skipped ({e})");
            store.zero_grad();
            self.skipped += 1;
            return Ok(None);
        }
        let k = result.costs.len() as Real;
        Ok(Some(BatchLog {
            epoch,
            batch,
            mean_cost: result.costs.iter().sum::<Real>() / k,
            baseline: result.baselines.iter().sum::<Real>() / result.baselines.len() as Real,
            grad_norm,
            feasible_rate: result.feasible.iter().filter(|f| **f).count() as Real / k,
            wallclock_s: self.started.elapsed().as_secs_f64(),
        }))
    }

    /// Runs every batch of `epoch`, handing each log row to `sink`.
    pub fn train_epoch(&mut self, epoch: usize, sink: &mut dyn FnMut(&BatchLog)) -> Result<EpochStats> {
        let skipped_before = self.skipped;
        let mut rows = Vec::with_capacity(self.cfg.batches_per_epoch);
        for batch in 0..self.cfg.batches_per_epoch {
            if let Some(row) = self.train_batch(epoch, batch)? {
                sink(&row);
                rows.push(row);
            }
        }
        let k = rows.len().max(1) as Real;
        Ok(EpochStats {
            epoch,
            mean_cost: rows.iter().map(|r| r.mean_cost).sum::<Real>() / k,
            mean_baseline: rows.iter().map(|r| r.baseline).sum::<Real>() / k,
            grad_norm: rows.iter().map(|r| r.grad_norm).sum::<Real>() / k,
            feasible_rate: rows.iter().map(|r| r.feasible_rate).sum::<Real>() / k,
            skipped_batches: self.skipped - skipped_before,
        })
    }

    /// Held-out instances used for per-epoch validation.
    pub fn validation_set(&self) -> Result<Vec<Instance>> {
        validation_set(&self.cfg)
    }

    pub fn validate(&self, epoch: usize, instances: &[Instance]) -> Result<ValidationLog> {
        let sols = greedy_many(&self.policy, instances, self.cfg.beta)?;
        let k = sols.len().max(1) as Real;
        Ok(ValidationLog {
            epoch,
            greedy_cost: sols.iter().map(|s| s.cost()).sum::<Real>() / k,
            feasible_rate: sols.iter().filter(|s| s.feasible()).count() as Real / k,
            wallclock_s: self.started.elapsed().as_secs_f64(),
        })
    }
}

pub fn validation_set(cfg: &TrainConfig) -> Result<Vec<Instance>> {
    (0..cfg.val_size)
        .map(|i| generate_instance(cfg.kind, cfg.nodes, derive_seed(cfg.val_seed, i as u64)))
        .collect()
}

/// Where a training run writes its artefacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint_dir: PathBuf,
    pub log: PathBuf,
    pub validation_log: PathBuf,
}

impl TrainOutputs {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("final.ckpt")
    }
}

pub struct TrainReport {
    pub policy: Policy,
    pub epochs: Vec<EpochStats>,
    pub validation: Vec<ValidationLog>,
    pub skipped_batches: usize,
    pub wallclock_s: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Parameters a training run of `profile` starts from.
pub fn initial_policy(profile: &Profile) -> Result<Policy> {
    let mut init = stream(derive_seed(profile.train.seed, u64::MAX - 1), 0);
    Policy::new(profile.model.clone(), profile.train.kind, &mut init)
}

/// Full training run: validation before training and after every epoch,
/// logs rewritten atomically after each epoch, checkpoints per
/// `checkpoint_every` and at the end.
pub fn run_training(profile: &Profile, outputs: &TrainOutputs, progress: &mut dyn FnMut(&EpochStats, &ValidationLog)) -> Result<TrainReport> {
    let cfg = profile.train.clone();
    let policy = initial_policy(profile)?;
    let mut trainer = Trainer::new(policy, cfg.clone())?;
    std::fs::create_dir_all(&outputs.checkpoint_dir).map_err(|e| Error::io(&outputs.checkpoint_dir, e))?;
    let val = trainer.validation_set()?;
    let mut validation = vec![trainer.validate(0, &val)?];
    let mut log_rows = Vec::new();
    let mut epochs = Vec::new();
    write_csv(&outputs.validation_log, &validation)?;
    for epoch in 1..=cfg.epochs {
        let stats = trainer.train_epoch(epoch, &mut |row| log_rows.push(row.clone()))?;
        let v = trainer.validate(epoch, &val)?;
        progress(&stats, &v);
        validation.push(v);
        epochs.push(stats);
        write_csv(&outputs.log, &log_rows)?;
        write_csv(&outputs.validation_log, &validation)?;
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(
                trainer.policy(),
                outputs.checkpoint_dir.join(format!("epoch-{epoch:03}.ckpt")),
            )?;
        }
    }
    save_checkpoint(trainer.policy(), outputs.final_checkpoint())?;
    let wallclock_s = trainer.started.elapsed().as_secs_f64();
    let skipped_batches = trainer.skipped();
    Ok(TrainReport {
        policy: trainer.into_policy(),
        epochs,
        validation,
        skipped_batches,
        wallclock_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_examples() {
        assert_eq!(advantages(&[2.5; 4], 4), vec![0.0; 4]);
        assert_eq!(compute_baseline(&[1.0, 3.0]), 2.0);
        assert_eq!(advantages(&[1.0, 3.0], 2), vec![-1.0, 1.0]);
    }
}
