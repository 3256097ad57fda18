//! Exact and heuristic reference solvers.

use egam_tensor::Real;

use crate::error::{Error, Result};
use crate::model::Solution;
use crate::problems::{evaluate, Instance, ProblemKind, State};

pub const HELD_KARP_MAX: usize = 16;
pub const EXHAUSTIVE_MAX: usize = 9;

fn solution(inst: &Instance, route: Vec<usize>, beta: Real) -> Result<Solution> {
    let outcome = evaluate(inst, &route, beta)?;
    Ok(Solution {
        route,
        outcome,
        log_probs: Vec::new(),
    })
}

/// Optimal closed tour by dynamic programming over subsets, starting at node 0.
/// Only coordinates are used.
pub fn held_karp(inst: &Instance) -> Result<(Vec<usize>, Real)> {
    let n = inst.len();
    if n > HELD_KARP_MAX {
        return Err(Error::TooLarge {
            what: "held_karp",
            max: HELD_KARP_MAX,
            n,
        });
    }
    if n < 2 {
        return Err(Error::Instance("held_karp needs at least 2 nodes".into()));
    }
    let d = inst.distance_matrix();
    let m = n - 1;
    let full = 1usize << m;
    // best[S][j]: shortest path from 0 through subset S (of nodes 1..n) ending at j+1.
    let mut best = vec![Real::INFINITY; full * m];
    let mut parent = vec![usize::MAX; full * m];
    for j in 0..m {
        best[(1 << j) * m + j] = d[j + 1];
    }
    for set in 1..full {
        for j in 0..m {
            if set & (1 << j) == 0 {
                continue;
            }
            let here = best[set * m + j];
            if !here.is_finite() {
                continue;
            }
            for k in 0..m {
                if set & (1 << k) != 0 {
                    continue;
                }
                let next = set | (1 << k);
                let cand = here + d[(j + 1) * n + k + 1];
                if cand < best[next * m + k] {
                    best[next * m + k] = cand;
                    parent[next * m + k] = j;
                }
            }
        }
    }
    let last_set = full - 1;
    let (mut end, mut cost) = (0, Real::INFINITY);
    for j in 0..m {
        let c = best[last_set * m + j] + d[(j + 1) * n];
        if c < cost {
            cost = c;
            end = j;
        }
    }
    let mut route = vec![0];
    let mut set = last_set;
    let mut j = end;
    loop {
        route.push(j + 1);
        let p = parent[set * m + j];
        set &= !(1 << j);
        if p == usize::MAX {
            break;
        }
        j = p;
    }
    route.push(0);
    route[1..m + 1].reverse();
    Ok((route, cost))
}

/// Best route by exhaustive search through the environment's own
/// transitions: the cheapest feasible route if one exists, otherwise the
/// cheapest route overall (whose `feasible == false` certifies that no
/// feasible route exists).
pub fn exhaustive_constrained(inst: &Instance, beta: Real) -> Result<Solution> {
    let n = inst.len();
    if n > EXHAUSTIVE_MAX {
        return Err(Error::TooLarge {
            what: "exhaustive_constrained",
            max: EXHAUSTIVE_MAX,
            n,
        });
    }
    let mut search = Search {
        inst,
        beta,
        best: None,
        route: vec![0],
    };
    search.visit(State::new(inst, 0)?)?;
    let (route, _) = search.best.ok_or(Error::AllMasked { step: 0 })?;
    solution(inst, route, beta)
}

struct Search<'a> {
    inst: &'a Instance,
    beta: Real,
    best: Option<(Vec<usize>, (bool, Real))>,
    route: Vec<usize>,
}

impl Search<'_> {
    /// Lower bound on the cost of any completion of `state`, and whether the
    /// prefix is already infeasible.
    fn bound(&self, state: &State, mask: &[bool]) -> (bool, Real) {
        let inst = self.inst;
        match inst.kind {
            ProblemKind::Tsp | ProblemKind::Cvrp | ProblemKind::Pctsp => (false, state.length()),
            ProblemKind::Tsptw | ProblemKind::Tspdl => {
                let partial = state.partial_outcome(inst, self.beta);
                (!partial.feasible, partial.cost)
            }
            ProblemKind::Vrptw => {
                let unvisited = state.visited()[1..].iter().filter(|v| !**v).count();
                let reachable = mask[1..].iter().filter(|m| !**m).count();
                (false, (unvisited - reachable) as Real)
            }
        }
    }

    fn visit(&mut self, state: State) -> Result<()> {
        if state.is_done() {
            let out = state.outcome(self.inst, self.beta)?;
            let key = (!out.feasible, out.cost);
            if self.best.as_ref().is_none_or(|(_, b)| key < *b) {
                self.best = Some((self.route.clone(), key));
            }
            return Ok(());
        }
        let mask = state.mask(self.inst);
        if let Some((_, best)) = &self.best {
            if self.bound(&state, &mask) >= *best {
                return Ok(());
            }
        }
        for node in 0..mask.len() {
            if mask[node] {
                continue;
            }
            let mut next = state.clone();
            next.step(self.inst, node)?;
            self.route.push(node);
            self.visit(next)?;
            self.route.pop();
        }
        Ok(())
    }
}

/// Repeatedly moves to the nearest open non-depot node; the depot (or the
/// closing return) is taken only when nothing else is open. Ties go to the
/// lowest index.
pub fn nearest_neighbor(inst: &Instance, beta: Real) -> Result<Solution> {
    let mut state = State::new(inst, 0)?;
    let mut route = vec![0];
    while !state.is_done() {
        if state.steps() >= State::step_limit(inst.len()) {
            return Err(Error::Runaway {
                limit: State::step_limit(inst.len()),
            });
        }
        let mask = state.mask(inst);
        let cur = state.current();
        let home = state.start();
        let pick = (0..mask.len())
            .filter(|&j| !mask[j] && j != home)
            .min_by(|&a, &b| inst.dist(cur, a).total_cmp(&inst.dist(cur, b)).then(a.cmp(&b)))
            .or_else(|| (!mask[home]).then_some(home))
            .ok_or(Error::AllMasked { step: state.steps() })?;
        state.step(inst, pick)?;
        route.push(pick);
    }
    solution(inst, route, beta)
}

/// Reference solution used for optimality gaps: Held-Karp for TSP,
/// exhaustive search otherwise.
pub fn reference(inst: &Instance, beta: Real) -> Result<Solution> {
    match inst.kind {
        ProblemKind::Tsp => {
            let (route, _) = held_karp(inst)?;
            solution(inst, route, beta)
        }
        _ => exhaustive_constrained(inst, beta),
    }
}
