//! Routing problem definitions: instances, decode-state dynamics, masks and costs.

mod dataset;
mod dihedral;
mod features;
mod generate;
mod state;

use std::fmt;
use std::str::FromStr;

use egam_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{parse_jsonl, read_jsonl, to_jsonl, write_jsonl};
pub use dihedral::{dihedral_point, dihedral_transform, DIHEDRAL_ORDER};
pub use features::{edge_features, node_features, Features, EDGE_FEATURES};
pub use generate::{generate_instance, generate_with_witness};
pub use state::{evaluate, Outcome, State};

/// Slack used when comparing accumulated floating-point quantities against limits.
pub const FEAS_TOL: Real = 1e-9;

/// Default violation weight for the penalised TSPTW and TSPDL costs.
pub const DEFAULT_BETA: Real = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
    Pctsp,
    Tsptw,
    Tspdl,
    Vrptw,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 6] = [
        ProblemKind::Tsp,
        ProblemKind::Cvrp,
        ProblemKind::Pctsp,
        ProblemKind::Tsptw,
        ProblemKind::Tspdl,
        ProblemKind::Vrptw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
            ProblemKind::Pctsp => "pctsp",
            ProblemKind::Tsptw => "tsptw",
            ProblemKind::Tspdl => "tspdl",
            ProblemKind::Vrptw => "vrptw",
        }
    }

    /// Width of the per-node input features.
    pub fn node_features(self) -> usize {
        match self {
            ProblemKind::Tsp => 2,
            ProblemKind::Cvrp => 3,
            ProblemKind::Pctsp | ProblemKind::Tsptw | ProblemKind::Tspdl | ProblemKind::Vrptw => 4,
        }
    }

    /// Node 0 is a depot or fixed start with its own input embedding.
    pub fn has_depot(self) -> bool {
        self != ProblemKind::Tsp
    }

    /// The first node of a route may be any node (only plain TSP).
    pub fn free_start(self) -> bool {
        self == ProblemKind::Tsp
    }

    /// Every node must be visited once before the route closes.
    pub fn visits_all(self) -> bool {
        matches!(self, ProblemKind::Tsp | ProblemKind::Tsptw | ProblemKind::Tspdl)
    }

    /// Constraints enforced by penalty rather than by the mask.
    pub fn soft_constrained(self) -> bool {
        matches!(self, ProblemKind::Tsptw | ProblemKind::Tspdl)
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProblemKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown problem kind `{s}`")))
    }
}

/// One routing problem. Node 0 is the depot (or fixed start) for every kind
/// except plain TSP. Time is measured in distance units (speed 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub kind: ProblemKind,
    pub seed: u64,
    pub coords: Vec<[Real; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tw: Option<Vec<[Real; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draft: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prize: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<Vec<Real>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<Real>,
}

impl Instance {
    /// A bare instance of `kind` with only coordinates; attribute fields must
    /// be filled before [`Instance::validate`] passes for constrained kinds.
    pub fn with_coords(kind: ProblemKind, coords: Vec<[Real; 2]>) -> Self {
        Instance {
            kind,
            seed: 0,
            coords,
            demand: None,
            tw: None,
            draft: None,
            prize: None,
            penalty: None,
            threshold: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dist(&self, i: usize, j: usize) -> Real {
        let (a, b) = (self.coords[i], self.coords[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    pub fn distance_matrix(&self) -> Vec<Real> {
        let n = self.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = self.dist(i, j);
            }
        }
        d
    }

    pub fn demand(&self) -> &[Real] {
        self.demand.as_deref().unwrap_or(&[])
    }

    pub fn tw(&self) -> &[[Real; 2]] {
        self.tw.as_deref().unwrap_or(&[])
    }

    pub fn draft(&self) -> &[Real] {
        self.draft.as_deref().unwrap_or(&[])
    }

    pub fn prize(&self) -> &[Real] {
        self.prize.as_deref().unwrap_or(&[])
    }

    pub fn penalty(&self) -> &[Real] {
        self.penalty.as_deref().unwrap_or(&[])
    }

    pub fn threshold(&self) -> Real {
        self.threshold.unwrap_or(0.0)
    }

    /// Latest window end; the normalisation constant for clock values.
    pub fn horizon(&self) -> Real {
        self.tw().iter().map(|w| w[1]).fold(0.0, Real::max).max(1e-6)
    }

    /// Checks the instance against the schema of its kind.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let bad = |msg: String| Err(Error::Instance(format!("{}: {msg}", self.kind)));
        if n < 2 {
            return bad(format!("need at least 2 nodes, got {n}"));
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return bad(format!("node {i} coordinates {c:?} outside the unit square"));
            }
        }
        let kind = self.kind;
        let fields: [(&str, bool, bool); 6] = [
            ("demand", self.demand.is_some(), matches!(kind, ProblemKind::Cvrp | ProblemKind::Tspdl)),
            ("tw", self.tw.is_some(), matches!(kind, ProblemKind::Tsptw | ProblemKind::Vrptw)),
            ("draft", self.draft.is_some(), kind == ProblemKind::Tspdl),
            ("prize", self.prize.is_some(), kind == ProblemKind::Pctsp),
            ("penalty", self.penalty.is_some(), kind == ProblemKind::Pctsp),
            ("threshold", self.threshold.is_some(), kind == ProblemKind::Pctsp),
        ];
        for (name, present, wanted) in fields {
            if present != wanted {
                let what = if wanted { "missing" } else { "unexpected" };
                return bad(format!("{what} field `{name}`"));
            }
        }
        let lens = [
            ("demand", self.demand.as_ref().map(Vec::len)),
            ("tw", self.tw.as_ref().map(Vec::len)),
            ("draft", self.draft.as_ref().map(Vec::len)),
            ("prize", self.prize.as_ref().map(Vec::len)),
            ("penalty", self.penalty.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return bad(format!("`{name}` has {len} entries for {n} nodes"));
                }
            }
        }
        let nonneg = |v: &[Real]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        match kind {
            ProblemKind::Tsp => {}
            ProblemKind::Cvrp => {
                let d = self.demand();
                if !nonneg(d) || d.iter().any(|&x| x > 1.0) || d[0] != 0.0 {
                    return bad("demands must lie in [0, 1] with depot demand 0".into());
                }
            }
            ProblemKind::Pctsp => {
                if !nonneg(self.prize()) || !nonneg(self.penalty()) {
                    return bad("prizes and penalties must be non-negative".into());
                }
                let t = self.threshold();
                let total: Real = self.prize()[1..].iter().sum();
                if !t.is_finite() || t < 0.0 || total + FEAS_TOL < t {
                    return bad(format!("total prize {total} cannot reach threshold {t}"));
                }
            }
            ProblemKind::Tsptw | ProblemKind::Vrptw => {
                for (i, w) in self.tw().iter().enumerate() {
                    if !(w[0].is_finite() && w[1].is_finite() && 0.0 <= w[0] && w[0] <= w[1]) {
                        return bad(format!("node {i} window {w:?} is not an interval in [0, inf)"));
                    }
                }
            }
            ProblemKind::Tspdl => {
                if !nonneg(self.demand()) || !nonneg(self.draft()) || self.demand()[0] != 0.0 {
                    return bad("demands and drafts must be non-negative with depot demand 0".into());
                }
            }
        }
        Ok(())
    }
}
