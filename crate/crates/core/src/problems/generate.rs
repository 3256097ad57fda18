use egam_tensor::Real;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Instance, ProblemKind};
use crate::error::{Error, Result};

/// Deterministic instance of `kind` with `n` nodes (depot included).
pub fn generate_instance(kind: ProblemKind, n: usize, seed: u64) -> Result<Instance> {
    generate_with_witness(kind, n, seed).map(|(inst, _)| inst)
}

/// As [`generate_instance`], also returning the customer order the TSPTW
/// windows or TSPDL drafts were built around (a feasible service order).
pub fn generate_with_witness(kind: ProblemKind, n: usize, seed: u64) -> Result<(Instance, Option<Vec<usize>>)> {
    if n < 2 {
        return Err(Error::Config(format!("instances need at least 2 nodes, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<[Real; 2]> = (0..n).map(|_| [unit(&mut rng), unit(&mut rng)]).collect();
    let mut inst = Instance::with_coords(kind, coords);
    inst.seed = seed;
    let customers = n - 1;
    let mut witness = None;
    match kind {
        ProblemKind::Tsp => {}
        ProblemKind::Cvrp => {
            let cap = cvrp_capacity(customers);
            let mut demand = vec![0.0];
            demand.extend((1..n).map(|_| rng.random_range(1..=9) as Real / cap));
            inst.demand = Some(demand);
        }
        ProblemKind::Pctsp => {
            let max_prize = 4.0 / customers as Real;
            let max_len = match customers {
                0..=20 => 2.0,
                21..=50 => 3.0,
                _ => 4.0,
            };
            let max_penalty = 3.0 * max_len / customers as Real;
            let threshold: Real = 1.0;
            let prize = loop {
                let mut p = vec![0.0];
                p.extend((1..n).map(|_| unit(&mut rng) * max_prize));
                if p.iter().sum::<Real>() >= threshold {
                    break p;
                }
            };
            let mut penalty = vec![0.0];
            penalty.extend((1..n).map(|_| unit(&mut rng) * max_penalty));
            inst.prize = Some(prize);
            inst.penalty = Some(penalty);
            inst.threshold = Some(threshold);
        }
        ProblemKind::Tsptw => {
            let order = customer_order(&mut rng, n);
            let mut arrival = vec![0.0; n];
            let mut prev = 0;
            let mut t = 0.0;
            for &j in &order {
                t += inst.dist(prev, j);
                arrival[j] = t;
                prev = j;
            }
            let mean = arrival[1..].iter().sum::<Real>() / customers as Real;
            let slack = 0.2 * mean;
            let mut tw = vec![[0.0, 0.0]; n];
            for j in 1..n {
                let u = half_open(&mut rng) * slack;
                let v = half_open(&mut rng) * slack;
                tw[j] = [(arrival[j] - u).max(0.0), arrival[j] + v];
            }
            let close = (1..n)
                .map(|j| tw[j][1] + inst.dist(j, 0))
                .fold(0.0, Real::max);
            tw[0] = [0.0, close];
            inst.tw = Some(tw);
            witness = Some(order);
        }
        ProblemKind::Vrptw => {
            let span = 1.0 + 0.25 * n as Real;
            let mut tw = vec![[0.0, 0.0]; n];
            for (j, w) in tw.iter_mut().enumerate().skip(1) {
                let open = inst.dist(0, j) + unit(&mut rng) * 0.5 * span;
                let width = (0.1 + 0.2 * unit(&mut rng)) * span;
                *w = [open, open + width];
            }
            let close = (1..n)
                .map(|j| tw[j][1] + inst.dist(j, 0))
                .fold(0.0, Real::max);
            tw[0] = [0.0, close];
            inst.tw = Some(tw);
        }
        ProblemKind::Tspdl => {
            let raw: Vec<Real> = (1..n).map(|_| 0.1 + 0.9 * unit(&mut rng)).collect();
            let total: Real = raw.iter().sum();
            let mut demand = vec![0.0];
            demand.extend(raw.iter().map(|d| d / total));
            let order = customer_order(&mut rng, n);
            let mut draft = vec![1.0; n];
            let mut load = 0.0;
            let mut floor: Real = 0.0;
            for &j in &order {
                load += demand[j];
                let headroom = (1.0 - load).max(0.0);
                floor = floor.max(load + unit(&mut rng) * headroom);
                draft[j] = floor;
            }
            inst.demand = Some(demand);
            inst.draft = Some(draft);
            witness = Some(order);
        }
    }
    Ok((inst, witness))
}

/// Integer-demand capacity by customer count, as in the usual CVRP benchmarks.
fn cvrp_capacity(customers: usize) -> Real {
    match customers {
        0..=10 => 20.0,
        11..=20 => 30.0,
        21..=50 => 40.0,
        _ => 50.0,
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Real {
    rng.random::<f64>() as Real
}

/// Uniform on `(0, 1]`.
fn half_open(rng: &mut ChaCha8Rng) -> Real {
    1.0 - unit(rng)
}

fn customer_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (1..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        for kind in ProblemKind::ALL {
            for n in [2, 5, 9, 20] {
                let a = generate_instance(kind, n, 7).unwrap();
                let b = generate_instance(kind, n, 7).unwrap();
                assert_eq!(a, b);
                a.validate().unwrap();
            }
        }
    }

    #[test]
    fn cvrp_demands_fit() {
        let inst = generate_instance(ProblemKind::Cvrp, 51, 3).unwrap();
        assert!(inst.demand().iter().all(|&d| d <= 1.0));
        let largest = inst.demand()[1..].iter().map(|d| (d * 40.0).round()).fold(0.0, Real::max);
        assert!(largest <= 9.0);
    }
}
