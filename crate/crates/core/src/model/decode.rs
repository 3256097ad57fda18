use egam_tensor::{Graph, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Encoding, Policy, StepInput};
use crate::error::{Error, Result};
use crate::problems::{Instance, Outcome, State};

/// One trajectory to decode: which encoded instance and where it starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Job {
    pub instance: usize,
    pub start: usize,
}

/// How the next node is chosen.
pub enum Strategy<'a> {
    /// Highest probability, lowest index on ties.
    Greedy,
    /// One random stream per job.
    Sample(&'a mut [ChaCha8Rng]),
    /// Replay the given routes (one per job).
    Forced(&'a [Vec<usize>]),
}

/// A finished route with its cost and per-move log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Node sequence from the start node to the closing depot/start visit.
    pub route: Vec<usize>,
    pub outcome: Outcome,
    /// `log p` of every move after the start; forced moves contribute 0.
    pub log_probs: Vec<Real>,
}

impl Solution {
    pub fn cost(&self) -> Real {
        self.outcome.cost
    }

    pub fn feasible(&self) -> bool {
        self.outcome.feasible
    }

    pub fn log_prob(&self) -> Real {
        self.log_probs.iter().sum()
    }

    /// Feasible routes beat infeasible ones; then lower cost wins.
    pub fn better_than(&self, other: &Solution) -> bool {
        match (self.feasible(), other.feasible()) {
            (true, false) => true,
            (false, true) => false,
            _ => self.cost() < other.cost(),
        }
    }
}

/// Log-probabilities of the choices made at one decoder evaluation.
pub struct StepRecord {
    /// `[jobs.len()]`.
    pub log_probs: Var,
    pub jobs: Vec<usize>,
}

pub struct Decoded {
    pub solutions: Vec<Solution>,
    pub steps: Vec<StepRecord>,
}

impl Decoded {
    /// Scalar `sum_j weights[j] * log p(route_j)` as a graph node.
    pub fn weighted_log_prob(&self, g: &mut Graph, weights: &[Real]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for step in &self.steps {
            let w = step.jobs.iter().map(|&j| weights[j]).collect();
            let s = g.weighted_sum(step.log_probs, w)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(g.constant(Tensor::scalar(0.0))?),
        }
    }
}

fn greedy_pick(logits: &[Real], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (j, (&u, &m)) in logits.iter().zip(mask).enumerate() {
        if !m && (best == usize::MAX || u > logits[best]) {
            best = j;
        }
    }
    best
}

fn sample_pick(logits: &[Real], mask: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| !**m)
        .map(|(u, _)| *u)
        .fold(Real::NEG_INFINITY, Real::max);
    let weights: Vec<Real> = logits
        .iter()
        .zip(mask)
        .map(|(u, m)| if *m { 0.0 } else { (u - max).exp() })
        .collect();
    let total: Real = weights.iter().sum();
    let mut r = rng.random::<f64>() as Real * total;
    let mut last = usize::MAX;
    for (j, w) in weights.iter().enumerate() {
        if mask[j] {
            continue;
        }
        if r < *w {
            return j;
        }
        r -= w;
        last = j;
    }
    last
}

impl Policy {
    /// Decodes every job to completion. `instances[j.instance]` must be the
    /// instance encoded at that position of `enc`. All trajectories advance
    /// together; moves with a single open node are taken without evaluating
    /// the decoder (their probability is exactly one).
    pub fn decode(
        &self,
        g: &mut Graph,
        enc: &Encoding,
        instances: &[&Instance],
        jobs: &[Job],
        mut strategy: Strategy<'_>,
        beta: Real,
    ) -> Result<Decoded> {
        if instances.len() != enc.batch {
            return Err(Error::Config(format!(
                "{} instances for an encoding of {}",
                instances.len(),
                enc.batch
            )));
        }
        match &strategy {
            Strategy::Sample(rngs) if rngs.len() != jobs.len() => {
                return Err(Error::Config("one random stream per job is required".into()))
            }
            Strategy::Forced(routes) if routes.len() != jobs.len() => {
                return Err(Error::Config("one route per job is required".into()))
            }
            _ => {}
        }
        let n = enc.n;
        let limit = State::step_limit(n);
        let mut states = jobs
            .iter()
            .map(|j| {
                let inst = instances
                    .get(j.instance)
                    .ok_or_else(|| Error::Config(format!("job refers to instance {}", j.instance)))?;
                State::new(inst, j.start)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Strategy::Forced(routes) = &strategy {
            for (r, j) in routes.iter().zip(jobs) {
                if r.first() != Some(&j.start) {
                    return Err(Error::Solution(format!("route {r:?} does not begin at {}", j.start)));
                }
            }
        }
        let mut routes: Vec<Vec<usize>> = jobs.iter().map(|j| vec![j.start]).collect();
        let mut log_probs: Vec<Vec<Real>> = vec![Vec::new(); jobs.len()];
        let mut steps = Vec::new();
        let mut mask = vec![false; n];
        loop {
            let mut inputs = Vec::new();
            let mut pending = Vec::new();
            let mut any_active = false;
            for (j, state) in states.iter_mut().enumerate() {
                if state.is_done() {
                    continue;
                }
                any_active = true;
                if state.steps() >= limit {
                    return Err(Error::Runaway { limit });
                }
                let inst = instances[jobs[j].instance];
                state.mask_into(inst, &mut mask);
                let open = mask.iter().filter(|m| !**m).count();
                if open == 0 {
                    return Err(Error::AllMasked { step: state.steps() });
                }
                let teacher = match &strategy {
                    Strategy::Forced(r) => Some(r[j].get(state.steps() + 1).copied().ok_or_else(|| {
                        Error::Solution(format!("route {:?} ends before the tour closes", r[j]))
                    })?),
                    _ => None,
                };
                if let Some(t) = teacher {
                    if t >= n || mask[t] {
                        return Err(Error::InvalidTransition {
                            step: state.steps(),
                            node: t,
                        });
                    }
                }
                if open == 1 {
                    let node = mask.iter().position(|m| !m).expect("one open node");
                    state.step(inst, node)?;
                    routes[j].push(node);
                    log_probs[j].push(0.0);
                    continue;
                }
                inputs.push(StepInput {
                    instance: jobs[j].instance,
                    current: state.current(),
                    start: state.start(),
                    scalar: state.context_scalar(inst),
                    mask: mask.clone(),
                });
                pending.push(j);
            }
            if !any_active {
                break;
            }
            if pending.is_empty() {
                continue;
            }
            let logits = self.step_logits(g, enc, &inputs)?;
            let values = g.value(logits).data().to_vec();
            let mut choices = Vec::with_capacity(pending.len());
            for (r, (&j, input)) in pending.iter().zip(&inputs).enumerate() {
                let row = &values[r * n..(r + 1) * n];
                let c = match &mut strategy {
                    Strategy::Greedy => greedy_pick(row, &input.mask),
                    Strategy::Sample(rngs) => sample_pick(row, &input.mask, &mut rngs[j]),
                    Strategy::Forced(r) => r[j][states[j].steps() + 1],
                };
                choices.push(c);
            }
            let flat_mask = inputs.iter().flat_map(|s| s.mask.iter().copied()).collect();
            let lp = g.pick_log_prob(logits, flat_mask, choices.clone())?;
            let lp_values = g.value(lp).data().to_vec();
            for (r, &j) in pending.iter().enumerate() {
                let inst = instances[jobs[j].instance];
                states[j].step(inst, choices[r])?;
                routes[j].push(choices[r]);
                log_probs[j].push(lp_values[r]);
            }
            steps.push(StepRecord {
                log_probs: lp,
                jobs: pending,
            });
        }
        if let Strategy::Forced(r) = &strategy {
            for (j, route) in r.iter().enumerate() {
                if route.len() != routes[j].len() {
                    return Err(Error::Solution(format!(
                        "route {route:?} continues after the tour closes"
                    )));
                }
            }
        }
        let solutions = states
            .iter()
            .zip(routes)
            .zip(log_probs)
            .zip(jobs)
            .map(|(((state, route), log_probs), job)| {
                Ok(Solution {
                    route,
                    outcome: state.outcome(instances[job.instance], beta)?,
                    log_probs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoded { solutions, steps })
    }

    /// `sum_t log p(route_t | route_<t)` recorded in `g` by teacher forcing.
    /// The choice of start node is not part of the sum.
    pub fn tour_log_prob(&self, g: &mut Graph, inst: &Instance, route: &[usize]) -> Result<Var> {
        let start = *route
            .first()
            .ok_or_else(|| Error::Solution("empty route".into()))?;
        let enc = self.encode(g, &[inst])?;
        let routes = [route.to_vec()];
        let decoded = self.decode(
            g,
            &enc,
            &[inst],
            &[Job { instance: 0, start }],
            Strategy::Forced(&routes),
            crate::problems::DEFAULT_BETA,
        )?;
        decoded.weighted_log_prob(g, &[1.0])
    }

    /// Value of [`Policy::tour_log_prob`], summed move by move.
    pub fn log_prob_of_tour(&self, inst: &Instance, route: &[usize]) -> Result<Real> {
        let mut g = Graph::new(self.store());
        let start = *route
            .first()
            .ok_or_else(|| Error::Solution("empty route".into()))?;
        let enc = self.encode(&mut g, &[inst])?;
        let routes = [route.to_vec()];
        let decoded = self.decode(
            &mut g,
            &enc,
            &[inst],
            &[Job { instance: 0, start }],
            Strategy::Forced(&routes),
            crate::problems::DEFAULT_BETA,
        )?;
        Ok(decoded.solutions[0].log_prob())
    }
}
