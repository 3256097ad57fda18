//! Greedy, sampling and augmented inference, and dataset metrics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use egam_tensor::{Graph, Real};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Job, Policy, Solution, Strategy};
use crate::oracle;
use crate::problems::{dihedral_transform, evaluate, Instance, ProblemKind, DIHEDRAL_ORDER};
use crate::rng::{derive_seed, stream};

/// Upper bound on trajectories decoded in one computation graph.
const MAX_JOBS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Greedy,
    /// Best of `k` sampled routes.
    Sample(usize),
    /// `n` samples on each of `m` dihedral copies.
    Augmented { m: usize, n: usize },
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Greedy => f.write_str("greedy"),
            Mode::Sample(k) => write!(f, "sample:{k}"),
            Mode::Augmented { m, n } => write!(f, "aug:{m}x{n}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("mode `{s}` is not greedy, sample:K or aug:MxN"));
        if s == "greedy" {
            return Ok(Mode::Greedy);
        }
        if let Some(k) = s.strip_prefix("sample:") {
            let k: usize = k.parse().map_err(|_| bad())?;
            return if k >= 1 { Ok(Mode::Sample(k)) } else { Err(bad()) };
        }
        if let Some(mn) = s.strip_prefix("aug:") {
            let (m, n) = mn.split_once('x').ok_or_else(bad)?;
            let (m, n): (usize, usize) = (m.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?);
            if !(1..=DIHEDRAL_ORDER).contains(&m) || n == 0 {
                return Err(bad());
            }
            return Ok(Mode::Augmented { m, n });
        }
        Err(bad())
    }
}

/// Best solution by [`Solution::better_than`]; the earliest wins ties.
pub fn best_of(solutions: Vec<Solution>) -> Option<Solution> {
    solutions.into_iter().reduce(|best, s| if s.better_than(&best) { s } else { best })
}

/// Greedy routes for many instances (TSP routes start at node 0).
pub fn greedy_many(policy: &Policy, insts: &[Instance], beta: Real) -> Result<Vec<Solution>> {
    let mut out = Vec::with_capacity(insts.len());
    for chunk in insts.chunks(64) {
        for group in same_size_runs(chunk) {
            let refs: Vec<&Instance> = group.iter().collect();
            let mut g = Graph::new(policy.store());
            let enc = policy.encode(&mut g, &refs)?;
            let jobs: Vec<Job> = (0..refs.len()).map(|i| Job { instance: i, start: 0 }).collect();
            let d = policy.decode(&mut g, &enc, &refs, &jobs, Strategy::Greedy, beta)?;
            out.extend(d.solutions);
        }
    }
    Ok(out)
}

fn same_size_runs(insts: &[Instance]) -> Vec<&[Instance]> {
    let mut runs = Vec::new();
    let mut begin = 0;
    for i in 1..=insts.len() {
        if i == insts.len() || insts[i].len() != insts[begin].len() {
            runs.push(&insts[begin..i]);
            begin = i;
        }
    }
    runs
}

pub fn greedy_solve(policy: &Policy, inst: &Instance, beta: Real) -> Result<Solution> {
    Ok(greedy_many(policy, std::slice::from_ref(inst), beta)?.remove(0))
}

/// A sampled trajectory on `copies[copy]` drawn from `stream(seed, stream)`.
#[derive(Debug, Clone, Copy)]
pub struct SampleJob {
    pub copy: usize,
    pub seed: u64,
    pub stream: u64,
}

/// The random start of a trajectory: uniform for TSP, node 0 otherwise.
pub fn draw_start(kind: ProblemKind, n: usize, rng: &mut ChaCha8Rng) -> usize {
    if kind.free_start() {
        rng.random_range(0..n)
    } else {
        0
    }
}

/// Decodes every sample job; `jobs` must be ordered by `copy`. Results are in
/// job order.
pub fn run_samples(policy: &Policy, copies: &[Instance], jobs: &[SampleJob], beta: Real) -> Result<Vec<Solution>> {
    if jobs.windows(2).any(|w| w[1].copy < w[0].copy) {
        return Err(Error::Config("sample jobs must be ordered by copy".into()));
    }
    let mut out = Vec::with_capacity(jobs.len());
    let mut begin = 0;
    while begin < jobs.len() {
        let first_copy = jobs[begin].copy;
        let n = copies[first_copy].len();
        let mut end = begin;
        while end < jobs.len() && end - begin < MAX_JOBS && copies[jobs[end].copy].len() == n {
            end += 1;
        }
        let slice = &jobs[begin..end];
        let last_copy = slice.last().expect("non-empty").copy;
        let batch: Vec<&Instance> = copies[first_copy..=last_copy].iter().collect();
        let mut rngs = Vec::with_capacity(slice.len());
        let mut dec_jobs = Vec::with_capacity(slice.len());
        for j in slice {
            let mut rng = stream(j.seed, j.stream);
            let start = draw_start(copies[j.copy].kind, n, &mut rng);
            dec_jobs.push(Job {
                instance: j.copy - first_copy,
                start,
            });
            rngs.push(rng);
        }
        let mut g = Graph::new(policy.store());
        let enc = policy.encode(&mut g, &batch)?;
        let d = policy.decode(&mut g, &enc, &batch, &dec_jobs, Strategy::Sample(&mut rngs), beta)?;
        out.extend(d.solutions);
        begin = end;
    }
    Ok(out)
}

/// All `k` samples for one instance, sample `i` drawn from `stream(seed, i)`.
pub fn sample_all(policy: &Policy, inst: &Instance, k: usize, seed: u64, beta: Real) -> Result<Vec<Solution>> {
    let jobs: Vec<SampleJob> = (0..k as u64).map(|s| SampleJob { copy: 0, seed, stream: s }).collect();
    run_samples(policy, std::slice::from_ref(inst), &jobs, beta)
}

/// Best of `k` sampled routes.
pub fn sample_solve(policy: &Policy, inst: &Instance, k: usize, seed: u64, beta: Real) -> Result<Solution> {
    best_of(sample_all(policy, inst, k, seed, beta)?).ok_or_else(|| Error::Config("k must be positive".into()))
}

/// `n` samples on each of the first `m` dihedral copies; the winner's cost is
/// recomputed on the original instance.
pub fn augmented_solve(policy: &Policy, inst: &Instance, m: usize, n: usize, seed: u64, beta: Real) -> Result<Solution> {
    if !(1..=DIHEDRAL_ORDER).contains(&m) || n == 0 {
        return Err(Error::Config(format!("augmentation {m}x{n} out of range")));
    }
    let copies: Vec<Instance> = (0..m).map(|k| dihedral_transform(inst, k)).collect();
    let jobs: Vec<SampleJob> = (0..m * n)
        .map(|i| SampleJob {
            copy: i / n,
            seed,
            stream: i as u64,
        })
        .collect();
    let best = best_of(run_samples(policy, &copies, &jobs, beta)?).expect("m*n >= 1");
    let outcome = evaluate(inst, &best.route, beta)?;
    Ok(Solution { outcome, ..best })
}

/// Solves every instance with `mode`; instance `i` samples with seed
/// `derive_seed(seed, i)`.
pub fn solve_dataset(policy: &Policy, insts: &[Instance], mode: Mode, seed: u64, beta: Real) -> Result<Vec<Solution>> {
    match mode {
        Mode::Greedy => greedy_many(policy, insts, beta),
        Mode::Sample(k) => {
            let mut out = Vec::with_capacity(insts.len());
            let per_graph = (MAX_JOBS / k).max(1);
            for (c, chunk) in insts.chunks(per_graph).enumerate() {
                let jobs: Vec<SampleJob> = (0..chunk.len() * k)
                    .map(|i| SampleJob {
                        copy: i / k,
                        seed: derive_seed(seed, (c * per_graph + i / k) as u64),
                        stream: (i % k) as u64,
                    })
                    .collect();
                let sols = run_samples(policy, chunk, &jobs, beta)?;
                let mut it = sols.into_iter();
                for _ in 0..chunk.len() {
                    out.push(best_of(it.by_ref().take(k).collect()).expect("k >= 1"));
                }
            }
            Ok(out)
        }
        Mode::Augmented { m, n } => insts
            .iter()
            .enumerate()
            .map(|(i, inst)| augmented_solve(policy, inst, m, n, derive_seed(seed, i as u64), beta))
            .collect(),
    }
}

/// Cost and feasibility of a reference solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub cost: Real,
    pub feasible: bool,
}

impl From<&Solution> for Reference {
    fn from(s: &Solution) -> Self {
        Reference {
            cost: s.cost(),
            feasible: s.feasible(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean_cost: Real,
    /// Mean of `(C - C_ref) / C_ref` over pairs where both are feasible and
    /// `C_ref > 0`; `None` without references or such pairs.
    pub gap: Option<Real>,
    pub gap_pairs: usize,
    pub infeasible_rate: Real,
}

pub fn summarize(costs: &[(Real, bool)], refs: Option<&[Reference]>) -> Result<Summary> {
    let count = costs.len().max(1) as Real;
    let mean_cost = costs.iter().map(|c| c.0).sum::<Real>() / count;
    let infeasible_rate = costs.iter().filter(|c| !c.1).count() as Real / count;
    let (mut sum, mut pairs) = (0.0, 0);
    if let Some(refs) = refs {
        if refs.len() != costs.len() {
            return Err(Error::Config(format!(
                "{} references for {} solutions",
                refs.len(),
                costs.len()
            )));
        }
        for (c, r) in costs.iter().zip(refs) {
            if c.1 && r.feasible && r.cost > 0.0 {
                sum += (c.0 - r.cost) / r.cost;
                pairs += 1;
            }
        }
    }
    Ok(Summary {
        mean_cost,
        gap: (pairs > 0).then(|| sum / pairs as Real),
        gap_pairs: pairs,
        infeasible_rate,
    })
}

/// What produces the evaluated solutions.
pub enum Method<'a> {
    Policy(&'a Policy),
    NearestNeighbor,
    Oracle,
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Policy(_) => "egam",
            Method::NearestNeighbor => "nearest-neighbor",
            Method::Oracle => "oracle",
        }
    }
}

pub struct Evaluation {
    pub solutions: Vec<Solution>,
    pub summary: Summary,
    pub wallclock_s: f64,
}

pub fn evaluate_dataset(
    method: &Method<'_>,
    insts: &[Instance],
    mode: Mode,
    refs: Option<&[Reference]>,
    seed: u64,
    beta: Real,
) -> Result<Evaluation> {
    let t0 = Instant::now();
    let solutions = match method {
        Method::Policy(p) => solve_dataset(p, insts, mode, seed, beta)?,
        Method::NearestNeighbor => insts
            .iter()
            .map(|i| oracle::nearest_neighbor(i, beta))
            .collect::<Result<_>>()?,
        Method::Oracle => insts.iter().map(|i| oracle::reference(i, beta)).collect::<Result<_>>()?,
    };
    let wallclock_s = t0.elapsed().as_secs_f64();
    let costs: Vec<(Real, bool)> = solutions.iter().map(|s| (s.cost(), s.feasible())).collect();
    let summary = summarize(&costs, refs)?;
    Ok(Evaluation {
        solutions,
        summary,
        wallclock_s,
    })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub kind: ProblemKind,
    pub n: usize,
    pub mode: String,
    pub mean_cost: Real,
    pub gap: Option<Real>,
    pub infeasible_rate: Real,
    pub wallclock_s: f64,
    pub seed: u64,
    pub checkpoint: String,
}

/// Appends `row` to the CSV at `path` (created with a header if missing).
pub fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut rows: Vec<MetricsRow> = Vec::new();
    if path.exists() {
        let mut rdr = csv::Reader::from_path(path)?;
        for r in rdr.deserialize() {
            rows.push(r?);
        }
    }
    rows.push(row.clone());
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}
