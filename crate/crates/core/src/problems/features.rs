use egam_tensor::Real;

use super::{Instance, ProblemKind};

/// Width of the per-edge input features (Euclidean length).
pub const EDGE_FEATURES: usize = 1;

/// Encoder inputs for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub n: usize,
    /// `[n, F_n]`, row-major.
    pub nodes: Vec<Real>,
    /// `[n, n, F_e]`, row-major.
    pub edges: Vec<Real>,
}

impl Features {
    pub fn of(inst: &Instance) -> Self {
        Features {
            n: inst.len(),
            nodes: node_features(inst),
            edges: edge_features(inst),
        }
    }
}

pub fn node_features(inst: &Instance) -> Vec<Real> {
    let f = inst.kind.node_features();
    let mut out = Vec::with_capacity(inst.len() * f);
    let h = inst.horizon();
    for (i, c) in inst.coords.iter().enumerate() {
        out.extend_from_slice(c);
        match inst.kind {
            ProblemKind::Tsp => {}
            ProblemKind::Cvrp => out.push(inst.demand()[i]),
            ProblemKind::Pctsp => {
                let t = inst.threshold();
                let prize = if t > 0.0 { inst.prize()[i] / t } else { inst.prize()[i] };
                out.extend([prize, inst.penalty()[i]]);
            }
            ProblemKind::Tsptw | ProblemKind::Vrptw => {
                let w = inst.tw()[i];
                out.extend([w[0] / h, w[1] / h]);
            }
            ProblemKind::Tspdl => out.extend([inst.demand()[i], inst.draft()[i]]),
        }
    }
    out
}

pub fn edge_features(inst: &Instance) -> Vec<Real> {
    inst.distance_matrix()
}
