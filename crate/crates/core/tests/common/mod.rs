#![allow(dead_code)]

use egam::problems::{evaluate, State, DEFAULT_BETA};
use egam::train::replay_rollouts;
use egam::{Instance, ModelConfig, Policy, ProblemKind};
use egam_tensor::{Gradients, Graph, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("check failed: {}", stringify!($cond)));
        }
    };
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {
        if $a != $b {
            return Err(format!("{} = {:?} != {:?}", stringify!($a), $a, $b));
        }
    };
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        head_dim: 4,
        d_ff: 16,
        encoder_layers: 2,
        decoder_layers: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_policy(kind: ProblemKind, seed: u64) -> Policy {
    Policy::new(tiny_config(), kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn walk(inst: &Instance, state: &State, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if state.is_done() {
        out.push(prefix.clone());
        return;
    }
    for (j, m) in state.mask(inst).into_iter().enumerate() {
        if !m {
            let mut next = state.clone();
            next.step(inst, j).unwrap();
            prefix.push(j);
            walk(inst, &next, prefix, out);
            prefix.pop();
        }
    }
}

/// Every complete route of `inst` over every admissible start.
pub fn all_routes(inst: &Instance) -> Vec<Vec<usize>> {
    let starts: Vec<usize> = if inst.kind.free_start() { (0..inst.len()).collect() } else { vec![0] };
    let mut out = Vec::new();
    for s in starts {
        walk(inst, &State::new(inst, s).unwrap(), &mut vec![s], &mut out);
    }
    out
}

/// Largest `|a - b| / max(floor, |a| + |b|)` over all parameter coordinates.
pub fn grad_rel_error(a: &Gradients, b: &Gradients, floor: Real) -> Real {
    let mut worst: Real = 0.0;
    let ids: std::collections::BTreeSet<_> = a.iter().chain(b.iter()).map(|(id, _)| id).collect();
    for id in ids {
        let (x, y) = (a.get(id), b.get(id));
        let len = x.or(y).unwrap().len();
        for k in 0..len {
            let u = x.map_or(0.0, |t| t.data()[k]);
            let v = y.map_or(0.0, |t| t.data()[k]);
            worst = worst.max((u - v).abs() / floor.max(u.abs() + v.abs()));
        }
    }
    worst
}

/// `(estimator, exact)` gradients of the expected cost under a uniform start.
/// The estimator weights every enumerated route's REINFORCE term by its exact
/// probability; the exact side differentiates `sum_r P(r) C(r)` directly.
pub fn estimator_and_exact(policy: &Policy, inst: &Instance) -> (Gradients, Gradients) {
    let routes = all_routes(inst);
    let starts = if inst.kind.free_start() { inst.len() } else { 1 } as Real;
    let costs: Vec<Real> = routes
        .iter()
        .map(|r| evaluate(inst, r, DEFAULT_BETA).unwrap().cost)
        .collect();
    let probs: Vec<Real> = routes
        .iter()
        .map(|r| policy.log_prob_of_tour(inst, r).unwrap().exp() / starts)
        .collect();
    let mean: Real = probs.iter().zip(&costs).map(|(p, c)| p * c).sum();

    let mut roll = replay_rollouts(policy, std::slice::from_ref(inst), &[routes.clone()], DEFAULT_BETA).unwrap();
    let adv: Vec<Real> = probs.iter().zip(&costs).map(|(p, c)| p * (c - mean)).collect();
    let estimator = roll.gradient(&adv, 1.0).unwrap();

    let mut g = Graph::new(policy.store());
    let mut total = None;
    for (r, c) in routes.iter().zip(&costs) {
        let lp = policy.tour_log_prob(&mut g, inst, r).unwrap();
        let p = g.exp(lp).unwrap();
        let term = g.scale(p, c / starts).unwrap();
        total = Some(match total {
            Some(t) => g.add(t, term).unwrap(),
            None => term,
        });
    }
    let exact = g.backward(total.unwrap()).unwrap();
    (estimator, exact)
}

pub const TOL: Real = 1e-9;

pub fn euclid(a: [Real; 2], b: [Real; 2]) -> Real {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn route_length(inst: &Instance, route: &[usize]) -> Real {
    route.windows(2).map(|w| euclid(inst.coords[w[0]], inst.coords[w[1]])).sum()
}

/// Clock after each move, waiting for window openings; `(clocks, late, tardiness)`.
pub fn simulate_clock(inst: &Instance, route: &[usize]) -> (Vec<Real>, usize, Real) {
    let tw = inst.tw();
    let mut t = 0.0;
    let mut clocks = vec![];
    let (mut late, mut tardiness) = (0, 0.0);
    for w in route.windows(2) {
        t = Real::max(t + euclid(inst.coords[w[0]], inst.coords[w[1]]), tw[w[1]][0]);
        if w[1] != route[0] && t > tw[w[1]][1] {
            late += 1;
            tardiness += t - tw[w[1]][1];
        }
        clocks.push(t);
    }
    (clocks, late, tardiness)
}

/// Load after each move for the pickup model; `(loads, overloaded, overload)`.
pub fn simulate_load(inst: &Instance, route: &[usize]) -> (Vec<Real>, usize, Real) {
    let mut load = 0.0;
    let mut loads = vec![];
    let (mut count, mut excess) = (0, 0.0);
    for &j in &route[1..] {
        if j != route[0] {
            load += inst.demand()[j];
            if load > inst.draft()[j] + TOL {
                count += 1;
                excess += load - inst.draft()[j];
            }
        }
        loads.push(load);
    }
    (loads, count, excess)
}

/// Follows uniformly random unmasked moves until the route closes.
pub fn random_rollout(inst: &Instance, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<State>) {
    let n = inst.len();
    let start = if inst.kind.free_start() { rng.random_range(0..n) } else { 0 };
    let mut state = State::new(inst, start).unwrap();
    let mut route = vec![start];
    let mut states = vec![state.clone()];
    while !state.is_done() {
        assert!(state.steps() < State::step_limit(n), "route did not close: {route:?}");
        let open: Vec<usize> = state
            .mask(inst)
            .iter()
            .enumerate()
            .filter(|(_, m)| !**m)
            .map(|(j, _)| j)
            .collect();
        assert!(!open.is_empty(), "every node masked at {route:?}");
        let j = open[rng.random_range(0..open.len())];
        state.step(inst, j).unwrap();
        route.push(j);
        states.push(state.clone());
    }
    (route, states)
}


/// Independent validity and cost check of a completed route.
pub fn check_route(inst: &Instance, route: &[usize]) -> Result<(), String> {
    let n = inst.len();
    let home = route[0];
    ensure_eq!(*route.last().unwrap(), home);
    let mut counts = vec![0usize; n];
    for &j in &route[1..route.len() - 1] {
        counts[j] += 1;
    }
    for j in (0..n).filter(|&j| j != home) {
        ensure!(counts[j] <= 1 || (j == 0 && inst.kind == ProblemKind::Cvrp), "node {j} repeated in {route:?}");
    }
    let out = evaluate(inst, route, DEFAULT_BETA).map_err(|e| e.to_string())?;
    let length = route_length(inst, route);
    ensure!((out.length - length).abs() < 1e-12);
    match inst.kind {
        ProblemKind::Tsp | ProblemKind::Tsptw | ProblemKind::Tspdl => {
            ensure_eq!(route.len(), n + 1);
            ensure!((0..n).all(|j| j == home || counts[j] == 1));
        }
        ProblemKind::Cvrp => {
            ensure!((1..n).all(|j| counts[j] == 1));
            let mut used = 0.0;
            for &j in &route[1..] {
                if j == 0 {
                    used = 0.0;
                } else {
                    used += inst.demand()[j];
                    ensure!(used <= 1.0 + TOL, "capacity exceeded in {route:?}");
                }
            }
            ensure!(route.windows(2).all(|w| w != [0, 0]), "empty trip in {route:?}");
        }
        ProblemKind::Pctsp => {
            let prize: Real = route.iter().map(|&j| inst.prize()[j]).sum();
            let all = (1..n).all(|j| counts[j] == 1);
            ensure!(prize + TOL >= inst.threshold() || all);
            let skipped: Real = (1..n).filter(|&j| counts[j] == 0).map(|j| inst.penalty()[j]).sum();
            ensure!((out.cost - (length + skipped)).abs() < 1e-12);
        }
        ProblemKind::Vrptw => {
            let (clocks, _, _) = simulate_clock(inst, route);
            for (t, &j) in clocks.iter().zip(&route[1..]) {
                if j != 0 {
                    ensure!(*t <= inst.tw()[j][1] + TOL, "node {j} served late in {route:?}");
                }
            }
            ensure_eq!(out.cost, (1..n).filter(|&j| counts[j] == 0).count() as Real);
        }
    }
    match inst.kind {
        ProblemKind::Tsp | ProblemKind::Cvrp => ensure_eq!(out.cost, out.length),
        ProblemKind::Tsptw => {
            let (_, late, tardiness) = simulate_clock(inst, route);
            ensure_eq!(out.late, late);
            let want = length + DEFAULT_BETA * (late as Real + tardiness);
            ensure!((out.cost - want).abs() < 1e-9);
            ensure_eq!(out.feasible, out.cost == out.length);
        }
        ProblemKind::Tspdl => {
            let (_, count, excess) = simulate_load(inst, route);
            ensure_eq!(out.overloaded, count);
            let want = length + DEFAULT_BETA * (count as Real + excess);
            ensure!((out.cost - want).abs() < 1e-9);
            ensure_eq!(out.feasible, out.cost == out.length);
        }
        _ => ensure!(out.feasible),
    }
    Ok(())
}
