use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use egam::eval::{append_metrics, solve_dataset, summarize, MetricsRow, Reference, Summary};
use egam::io::write_atomic;
use egam::model::load_checkpoint;
use egam::oracle::{nearest_neighbor, reference};
use egam::problems::{evaluate, generate_instance, read_jsonl, write_jsonl, Outcome, DEFAULT_BETA};
use egam::rng::{derive_seed, stream};
use egam::train::{run_training, TrainOutputs};
use egam::{Error, Instance, ModelConfig, Policy, Profile, Solution};
use egam_tensor::{grad_check_floor, Real, TensorError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Cli, Command, Failure};

/// Seed used when no `--seed` is given: `EGAM_SEED`, else 1.
fn default_seed() -> Result<u64, Failure> {
    match std::env::var("EGAM_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Data(format!("EGAM_SEED `{s}` is not an unsigned integer"))),
        Err(_) => Ok(1),
    }
}

fn seed_or_default(seed: Option<u64>) -> Result<u64, Failure> {
    seed.map_or_else(default_seed, Ok)
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    b.build().map_err(|e| Failure::Data(format!("thread pool: {e}")))
}

fn load_data(path: &Path) -> Result<Vec<Instance>, Failure> {
    let insts = read_jsonl(path)?;
    if insts.is_empty() {
        return Err(Failure::Data(format!("{}: no instances", path.display())));
    }
    Ok(insts)
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

/// One line of a route file written by `oracle` and read by `eval --solutions`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteRecord {
    index: usize,
    method: String,
    route: Vec<usize>,
    cost: Real,
    length: Real,
    feasible: bool,
}

fn read_routes(path: &Path) -> Result<Vec<RouteRecord>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: RouteRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.index != out.len() {
            return Err(Failure::Data(format!(
                "{}:{}: index {} out of order",
                path.display(),
                i + 1,
                rec.index
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn outcome_json(o: &Outcome) -> serde_json::Value {
    json!({
        "cost": o.cost,
        "length": o.length,
        "feasible": o.feasible,
        "late": o.late,
        "tardiness": o.tardiness,
        "overloaded": o.overloaded,
        "overload": o.overload,
        "unvisited": o.unvisited,
    })
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let pretty = cli.pretty;
    match cli.command {
        Command::Gen {
            kind,
            n,
            count,
            seed,
            out,
        } => {
            let seed = seed_or_default(seed)?;
            let insts = pool(cli.workers)?.install(|| {
                (0..count)
                    .into_par_iter()
                    .map(|i| generate_instance(kind, n, derive_seed(seed, i as u64)))
                    .collect::<egam::Result<Vec<_>>>()
            })?;
            write_jsonl(&out, &insts)?;
            if pretty {
                println!("wrote {count} {kind} instances (n = {n}) to {}", out.display());
            } else {
                print_json(&json!({"out": out, "kind": kind, "n": n, "count": count, "seed": seed}));
            }
            Ok(())
        }
        Command::Train {
            config,
            profile,
            out,
            log,
            val_log,
            kind,
            nodes,
            epochs,
            batches_per_epoch,
            batch_size,
            lr,
            seed,
            node_only,
            set,
        } => {
            let mut p = Profile::named(&profile)?;
            if std::env::var_os("EGAM_SEED").is_some() {
                p.train.seed = default_seed()?;
            }
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                p.apply_kv(&text)?;
            }
            let flags = [
                ("kind", kind.map(|k| k.to_string())),
                ("nodes", nodes.map(|v| v.to_string())),
                ("epochs", epochs.map(|v| v.to_string())),
                ("batches_per_epoch", batches_per_epoch.map(|v| v.to_string())),
                ("batch_size", batch_size.map(|v| v.to_string())),
                ("lr", lr.map(|v| v.to_string())),
                ("seed", seed.map(|v| v.to_string())),
                ("node_only", node_only.then(|| "true".to_string())),
            ];
            for (key, value) in flags {
                if let Some(v) = value {
                    p.set(key, &v)?;
                }
            }
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Failure::Data(format!("--set `{kv}` is not key=value")))?;
                p.set(k.trim(), v.trim())?;
            }
            p.model.validate()?;
            p.train.validate()?;
            let validation_log =
                val_log.unwrap_or_else(|| log.parent().unwrap_or(Path::new("")).join("validation.csv"));
            let outputs = TrainOutputs {
                checkpoint_dir: out.clone(),
                log,
                validation_log,
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_atomic(&out.join("config.kv"), p.to_kv().as_bytes())?;
            let report = run_training(&p, &outputs, &mut |s, v| {
                eprintln!(
                    "epoch {}: mean cost {:.4}, grad norm {:.3e}, validation greedy {:.4} (feasible {:.3}), {:.0}s",
                    s.epoch, s.mean_cost, s.grad_norm, v.greedy_cost, v.feasible_rate, v.wallclock_s
                );
            })?;
            let last = report.validation.last().map(|v| v.greedy_cost);
            if pretty {
                println!(
                    "trained {} epochs in {:.1}s; checkpoint {}",
                    report.epochs.len(),
                    report.wallclock_s,
                    outputs.final_checkpoint().display()
                );
            } else {
                print_json(&json!({
                    "checkpoint": outputs.final_checkpoint(),
                    "epochs": report.epochs.len(),
                    "validation_greedy_cost": last,
                    "skipped_batches": report.skipped_batches,
                    "wallclock_s": report.wallclock_s,
                }));
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            solutions,
            nearest_neighbor: nn,
            data,
            mode,
            reference: ref_spec,
            out,
            seed,
            beta,
        } => {
            let seed = seed_or_default(seed)?;
            let beta = beta.unwrap_or(DEFAULT_BETA);
            let insts = load_data(&data)?;
            let workers = pool(cli.workers)?;
            let t0 = Instant::now();
            let (method, checkpoint, results): (&str, String, Vec<Outcome>) = if let Some(path) = &ckpt {
                let policy = load_checkpoint(path)?;
                check_kind(&policy, &insts)?;
                let sols = solve_dataset(&policy, &insts, mode, seed, beta)?;
                ("egam", path.display().to_string(), sols.into_iter().map(|s| s.outcome).collect())
            } else if let Some(path) = &solutions {
                let recs = read_routes(path)?;
                if recs.len() != insts.len() {
                    return Err(Failure::Data(format!(
                        "{} routes for {} instances",
                        recs.len(),
                        insts.len()
                    )));
                }
                let outs = insts
                    .iter()
                    .zip(&recs)
                    .map(|(inst, r)| evaluate(inst, &r.route, beta))
                    .collect::<egam::Result<Vec<_>>>()?;
                ("solutions", path.display().to_string(), outs)
            } else {
                debug_assert!(nn);
                let sols = workers.install(|| {
                    insts
                        .par_iter()
                        .map(|i| nearest_neighbor(i, beta))
                        .collect::<egam::Result<Vec<Solution>>>()
                })?;
                ("nearest-neighbor", String::new(), sols.into_iter().map(|s| s.outcome).collect())
            };
            let wallclock_s = t0.elapsed().as_secs_f64();
            let refs = match ref_spec.as_deref() {
                None => None,
                Some("oracle") => Some(workers.install(|| {
                    insts
                        .par_iter()
                        .map(|i| reference(i, beta).map(|s| Reference::from(&s)))
                        .collect::<egam::Result<Vec<_>>>()
                })?),
                Some(path) => Some(
                    read_routes(Path::new(path))?
                        .into_iter()
                        .map(|r| Reference {
                            cost: r.cost,
                            feasible: r.feasible,
                        })
                        .collect(),
                ),
            };
            let costs: Vec<(Real, bool)> = results.iter().map(|o| (o.cost, o.feasible)).collect();
            let summary = summarize(&costs, refs.as_deref())?;
            let row = MetricsRow {
                method: method.into(),
                kind: insts[0].kind,
                n: insts[0].len(),
                mode: mode.to_string(),
                mean_cost: summary.mean_cost,
                gap: summary.gap,
                infeasible_rate: summary.infeasible_rate,
                wallclock_s,
                seed,
                checkpoint,
            };
            append_metrics(&out, &row)?;
            if pretty {
                print!("{}", summary_table(&row, &summary, insts.len()));
            } else {
                print_json(&json!({
                    "method": row.method,
                    "kind": row.kind,
                    "n": row.n,
                    "instances": insts.len(),
                    "mode": row.mode,
                    "mean_cost": summary.mean_cost,
                    "gap": summary.gap,
                    "gap_pairs": summary.gap_pairs,
                    "infeasible_rate": summary.infeasible_rate,
                    "wallclock_s": wallclock_s,
                    "seed": seed,
                }));
            }
            Ok(())
        }
        Command::Solve {
            ckpt,
            instance_json,
            instance_file,
            mode,
            seed,
            beta,
        } => {
            let seed = seed_or_default(seed)?;
            let beta = beta.unwrap_or(DEFAULT_BETA);
            let inst: Instance = match (instance_json, instance_file) {
                (Some(text), _) => serde_json::from_str(&text).map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?,
                (None, Some(path)) => {
                    let mut all = load_data(&path)?;
                    if all.len() != 1 {
                        return Err(Failure::Data(format!(
                            "{}: expected one instance, found {}",
                            path.display(),
                            all.len()
                        )));
                    }
                    all.remove(0)
                }
                (None, None) => unreachable!("clap requires an input"),
            };
            inst.validate()?;
            let policy = load_checkpoint(&ckpt)?;
            check_kind(&policy, std::slice::from_ref(&inst))?;
            let t0 = Instant::now();
            let sol = solve_dataset(&policy, std::slice::from_ref(&inst), mode, seed, beta)?.remove(0);
            let wallclock_s = t0.elapsed().as_secs_f64();
            if pretty {
                let route: Vec<String> = sol.route.iter().map(|j| j.to_string()).collect();
                println!("route: {}", route.join(" "));
                println!(
                    "cost {:.6}, length {:.6}, {}",
                    sol.cost(),
                    sol.outcome.length,
                    if sol.feasible() { "feasible" } else { "infeasible" }
                );
            } else {
                let mut v = outcome_json(&sol.outcome);
                v["route"] = json!(sol.route);
                v["mode"] = json!(mode.to_string());
                v["wallclock_s"] = json!(wallclock_s);
                print_json(&v);
            }
            Ok(())
        }
        Command::Gradcheck {
            kind,
            n,
            dm,
            heads,
            layers,
            node_only,
            seed,
            h,
            floor,
            tol,
        } => {
            let seed = seed_or_default(seed)?;
            if heads == 0 || dm % heads != 0 {
                return Err(Failure::Data(format!("--dm {dm} is not divisible by --heads {heads}")));
            }
            let cfg = ModelConfig {
                d_model: dm,
                heads,
                head_dim: dm / heads,
                d_ff: 4 * dm,
                encoder_layers: layers,
                decoder_layers: 1,
                node_only,
                ..ModelConfig::default()
            };
            let inst = generate_instance(kind, n, derive_seed(seed, 0))?;
            let route = nearest_neighbor(&inst, DEFAULT_BETA)?.route;
            let mut policy = Policy::new(cfg, kind, &mut stream(derive_seed(seed, 1), 0))?;
            let probe = policy.clone();
            probe.log_prob_of_tour(&inst, &route)?;
            let f = |g: &mut egam_tensor::Graph| {
                probe.tour_log_prob(g, &inst, &route).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => TensorError::Shape {
                        op: "tour_log_prob",
                        detail: other.to_string(),
                    },
                })
            };
            let ids: Vec<_> = policy.store().ids().collect();
            let t0 = Instant::now();
            let report = grad_check_floor(policy.store_mut(), &ids, h, floor, f).map_err(Error::from)?;
            let wallclock_s = t0.elapsed().as_secs_f64();
            let (wname, widx) = report.worst.clone().unwrap_or_default();
            let pass = report.max_rel_error <= tol;
            if pretty {
                println!(
                    "{} coordinates, max relative error {:.3e} (floor {floor:.0e}, tol {tol:.0e}), worst {wname}[{widx}] \
                     analytic {:.3e} numeric {:.3e}, {wallclock_s:.1}s",
                    report.coordinates, report.max_rel_error, report.analytic_at_worst, report.numeric_at_worst
                );
            } else {
                print_json(&json!({
                    "kind": kind,
                    "n": n,
                    "route": route,
                    "coordinates": report.coordinates,
                    "h": h,
                    "floor": floor,
                    "max_rel_error": report.max_rel_error,
                    "worst": format!("{wname}[{widx}]"),
                    "analytic_at_worst": report.analytic_at_worst,
                    "numeric_at_worst": report.numeric_at_worst,
                    "tol": tol,
                    "pass": pass,
                    "wallclock_s": wallclock_s,
                }));
            }
            if pass {
                Ok(())
            } else {
                Err(Failure::Numeric(format!(
                    "gradient check error {:.3e} exceeds {tol:.0e}",
                    report.max_rel_error
                )))
            }
        }
        Command::Oracle {
            data,
            out,
            nearest_neighbor: nn,
            beta,
        } => {
            let beta = beta.unwrap_or(DEFAULT_BETA);
            let insts = load_data(&data)?;
            let method = if nn { "nearest-neighbor" } else { "oracle" };
            let sols = pool(cli.workers)?.install(|| {
                insts
                    .par_iter()
                    .map(|i| if nn { nearest_neighbor(i, beta) } else { reference(i, beta) })
                    .collect::<egam::Result<Vec<_>>>()
            })?;
            let mut text = String::new();
            for (index, s) in sols.iter().enumerate() {
                let rec = RouteRecord {
                    index,
                    method: method.into(),
                    route: s.route.clone(),
                    cost: s.cost(),
                    length: s.outcome.length,
                    feasible: s.feasible(),
                };
                let line = serde_json::to_string(&rec).map_err(|e| Failure::Data(e.to_string()))?;
                text.push_str(&line);
                text.push('\n');
            }
            write_atomic(&out, text.as_bytes())?;
            let costs: Vec<(Real, bool)> = sols.iter().map(|s| (s.cost(), s.feasible())).collect();
            let summary = summarize(&costs, None)?;
            if pretty {
                println!(
                    "{} {method} solutions, mean cost {:.6}, infeasible {:.3}",
                    sols.len(),
                    summary.mean_cost,
                    summary.infeasible_rate
                );
            } else {
                print_json(&json!({
                    "out": out,
                    "method": method,
                    "instances": sols.len(),
                    "mean_cost": summary.mean_cost,
                    "infeasible_rate": summary.infeasible_rate,
                }));
            }
            Ok(())
        }
    }
}

fn check_kind(policy: &Policy, insts: &[Instance]) -> Result<(), Failure> {
    match insts.iter().find(|i| i.kind != policy.kind()) {
        Some(i) => Err(Failure::Data(format!(
            "checkpoint is for {} but the data holds {} instances",
            policy.kind(),
            i.kind
        ))),
        None => Ok(()),
    }
}

fn summary_table(row: &MetricsRow, s: &Summary, count: usize) -> String {
    let gap = s.gap.map_or("-".to_string(), |g| format!("{:.4}%", 100.0 * g));
    let mut t = String::new();
    let _ = writeln!(t, "{:<18} {:>8} {:>5} {:>12} {:>12} {:>10} {:>10}", "method", "kind", "n", "mode", "mean cost", "gap", "infeasible");
    let _ = writeln!(
        t,
        "{:<18} {:>8} {:>5} {:>12} {:>12.6} {:>10} {:>9.2}%",
        row.method,
        row.kind.to_string(),
        row.n,
        row.mode,
        s.mean_cost,
        gap,
        100.0 * s.infeasible_rate
    );
    let _ = writeln!(t, "{count} instances, {} gap pairs, {:.2}s", s.gap_pairs, row.wallclock_s);
    t
}
