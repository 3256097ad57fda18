use egam_tensor::Real;

use super::{Instance, ProblemKind, FEAS_TOL};
use crate::error::{Error, Result};

/// Dynamic part of a partially built route.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    kind: ProblemKind,
    start: usize,
    current: usize,
    visited: Vec<bool>,
    /// Nodes visited other than the start/depot.
    served: usize,
    steps: usize,
    done: bool,
    clock: Real,
    load: Real,
    remaining: Real,
    collected: Real,
    length: Real,
    late: usize,
    tardiness: Real,
    overloaded: usize,
    overload: Real,
}

/// Cost breakdown of a completed route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    /// Raw travelled distance.
    pub length: Real,
    /// Training/evaluation cost including penalties.
    pub cost: Real,
    pub feasible: bool,
    pub late: usize,
    pub tardiness: Real,
    pub overloaded: usize,
    pub overload: Real,
    /// Customers never visited (PCTSP, VRPTW).
    pub unvisited: usize,
}

impl State {
    /// Fresh state positioned at `start`. Kinds with a depot must start at node 0.
    pub fn new(inst: &Instance, start: usize) -> Result<Self> {
        let n = inst.len();
        if start >= n || (inst.kind.has_depot() && start != 0) {
            return Err(Error::Solution(format!(
                "{} route cannot start at node {start}",
                inst.kind
            )));
        }
        let mut visited = vec![false; n];
        visited[start] = true;
        Ok(State {
            kind: inst.kind,
            start,
            current: start,
            visited,
            served: 0,
            steps: 0,
            done: false,
            clock: 0.0,
            load: 0.0,
            remaining: 1.0,
            collected: 0.0,
            length: 0.0,
            late: 0,
            tardiness: 0.0,
            overloaded: 0,
            overload: 0.0,
        })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Moves made so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    pub fn clock(&self) -> Real {
        self.clock
    }

    pub fn load(&self) -> Real {
        self.load
    }

    pub fn remaining_capacity(&self) -> Real {
        self.remaining
    }

    pub fn collected_prize(&self) -> Real {
        self.collected
    }

    pub fn length(&self) -> Real {
        self.length
    }

    /// Upper bound on the number of moves of any route over `n` nodes.
    pub fn step_limit(n: usize) -> usize {
        2 * n + 2
    }

    fn customers_left(&self) -> bool {
        self.visited.iter().any(|v| !v)
    }

    /// Writes the feasibility mask into `mask` (`true` = node excluded).
    pub fn mask_into(&self, inst: &Instance, mask: &mut [bool]) {
        let n = self.visited.len();
        debug_assert_eq!(mask.len(), n);
        for (m, v) in mask.iter_mut().zip(&self.visited) {
            *m = *v;
        }
        match self.kind {
            ProblemKind::Tsp | ProblemKind::Tsptw | ProblemKind::Tspdl => {
                mask[self.start] = self.served + 1 < n;
            }
            ProblemKind::Cvrp => {
                let d = inst.demand();
                for j in 1..n {
                    if d[j] > self.remaining + FEAS_TOL {
                        mask[j] = true;
                    }
                }
                mask[0] = self.current == 0 && self.customers_left();
            }
            ProblemKind::Pctsp => {
                let enough = self.collected + FEAS_TOL >= inst.threshold();
                mask[0] = !enough && self.customers_left();
            }
            ProblemKind::Vrptw => {
                let tw = inst.tw();
                let mut any = false;
                for j in 1..n {
                    if !mask[j] && self.clock + inst.dist(self.current, j) > tw[j][1] + FEAS_TOL {
                        mask[j] = true;
                    }
                    any |= !mask[j];
                }
                mask[0] = self.served == 0 && any;
            }
        }
    }

    pub fn mask(&self, inst: &Instance) -> Vec<bool> {
        let mut m = vec![false; self.visited.len()];
        self.mask_into(inst, &mut m);
        m
    }

    /// Applies the move to `node`, which must be unmasked.
    pub fn step(&mut self, inst: &Instance, node: usize) -> Result<()> {
        let n = self.visited.len();
        if self.done || node >= n || self.mask(inst)[node] {
            return Err(Error::InvalidTransition {
                step: self.steps,
                node,
            });
        }
        let d = inst.dist(self.current, node);
        self.length += d;
        self.steps += 1;
        let at_home = node == self.start;
        match self.kind {
            ProblemKind::Tsp => {}
            ProblemKind::Cvrp => {
                if node == 0 {
                    self.remaining = 1.0;
                } else {
                    self.remaining = (self.remaining - inst.demand()[node]).max(0.0);
                }
            }
            ProblemKind::Pctsp => {
                self.collected += inst.prize()[node];
            }
            ProblemKind::Tsptw | ProblemKind::Vrptw => {
                let w = inst.tw()[node];
                self.clock = (self.clock + d).max(w[0]);
                if self.kind == ProblemKind::Tsptw && !at_home && self.clock > w[1] {
                    self.late += 1;
                    self.tardiness += self.clock - w[1];
                }
            }
            ProblemKind::Tspdl => {
                if !at_home {
                    self.load += inst.demand()[node];
                    let draft = inst.draft()[node];
                    if self.load > draft + FEAS_TOL {
                        self.overloaded += 1;
                        self.overload += self.load - draft;
                    }
                }
            }
        }
        if !at_home {
            self.served += 1;
        }
        self.visited[node] = true;
        self.current = node;
        self.done = match self.kind {
            ProblemKind::Tsp | ProblemKind::Tsptw | ProblemKind::Tspdl => at_home,
            ProblemKind::Cvrp => at_home && !self.customers_left(),
            ProblemKind::Pctsp | ProblemKind::Vrptw => at_home,
        };
        Ok(())
    }

    /// Scalar context component, normalised to roughly `[0, 1]`.
    pub fn context_scalar(&self, inst: &Instance) -> Option<Real> {
        match self.kind {
            ProblemKind::Tsp => None,
            ProblemKind::Cvrp => Some(self.remaining),
            ProblemKind::Pctsp => Some((inst.threshold() - self.collected).max(0.0)),
            ProblemKind::Tsptw | ProblemKind::Vrptw => Some(self.clock / inst.horizon()),
            ProblemKind::Tspdl => Some(self.load),
        }
    }

    /// Cost of the finished route. `beta` weights TSPTW/TSPDL violations.
    pub fn outcome(&self, inst: &Instance, beta: Real) -> Result<Outcome> {
        if !self.done {
            return Err(Error::Solution("route is not complete".into()));
        }
        Ok(self.partial_outcome(inst, beta))
    }

    /// Cost terms accumulated so far, counting every unvisited customer as
    /// skipped. Equals [`State::outcome`] once the route is complete.
    pub fn partial_outcome(&self, inst: &Instance, beta: Real) -> Outcome {
        let unvisited_nodes = || (1..self.visited.len()).filter(|&j| !self.visited[j]);
        let unvisited = match self.kind {
            ProblemKind::Pctsp | ProblemKind::Vrptw => unvisited_nodes().count(),
            _ => 0,
        };
        let cost = match self.kind {
            ProblemKind::Tsp | ProblemKind::Cvrp => self.length,
            ProblemKind::Pctsp => {
                self.length + unvisited_nodes().map(|j| inst.penalty()[j]).sum::<Real>()
            }
            ProblemKind::Tsptw => self.length + beta * (self.late as Real + self.tardiness),
            ProblemKind::Tspdl => self.length + beta * (self.overloaded as Real + self.overload),
            ProblemKind::Vrptw => unvisited as Real,
        };
        Outcome {
            length: self.length,
            cost,
            feasible: self.late == 0 && self.overloaded == 0,
            late: self.late,
            tardiness: self.tardiness,
            overloaded: self.overloaded,
            overload: self.overload,
            unvisited,
        }
    }
}

/// Replays `route` (start node first, closing depot/start visit last) through
/// the environment and returns its cost. The single source of truth for costs.
pub fn evaluate(inst: &Instance, route: &[usize], beta: Real) -> Result<Outcome> {
    let (&first, rest) = route
        .split_first()
        .ok_or_else(|| Error::Solution("empty route".into()))?;
    let mut state = State::new(inst, first)?;
    for (i, &node) in rest.iter().enumerate() {
        if state.is_done() {
            return Err(Error::Solution(format!(
                "route continues after closing at position {i}"
            )));
        }
        state.step(inst, node)?;
    }
    state.outcome(inst, beta)
}
