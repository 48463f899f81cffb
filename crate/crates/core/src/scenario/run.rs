use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::{json, Value};

use super::{Scenario, ScenarioError};
use crate::experiments::{
    combine_digests, run_churn, run_convergence, run_recovery, run_startup, run_trees, ExperimentError, ExperimentKind,
};
use crate::metrics::{bin_means, mean, std_dev, to_csv, MetricSample};

/// A file to write under the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub path: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// One CSV per (experiment, seed), plus tree edge lists, sorted by path.
    pub files: Vec<OutputFile>,
    /// `experiment,seed,digest`, one per (experiment, seed), sorted.
    pub digests: Vec<String>,
    pub summary: Value,
}

/// Work that shares one simulation: the three tree figures come from the same run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Unit {
    Fig2,
    Trees,
    Startup,
    Recovery,
    Churn,
}

fn unit_of(k: ExperimentKind) -> Unit {
    match k {
        ExperimentKind::Fig2Convergence => Unit::Fig2,
        ExperimentKind::Fig3Stretch | ExperimentKind::Fig4Netload | ExperimentKind::Fig5StableVsNone => Unit::Trees,
        ExperimentKind::StartupDelay => Unit::Startup,
        ExperimentKind::RecoveryTiming => Unit::Recovery,
        ExperimentKind::ChurnInvariants => Unit::Churn,
    }
}

/// Output of one experiment for one seed.
#[derive(Debug, Clone)]
struct Piece {
    kind: ExperimentKind,
    seed: u64,
    csv: String,
    digest: String,
    samples: Vec<MetricSample>,
    fig2: Vec<(f64, f64)>,
    extra: Vec<OutputFile>,
    detail: Value,
}

fn piece(kind: ExperimentKind, seed: u64, samples: Vec<MetricSample>, digest: String, detail: Value) -> Piece {
    Piece { kind, seed, csv: to_csv(&samples), digest, samples, fig2: Vec::new(), extra: Vec::new(), detail }
}

fn edge_list(t: &crate::tree::SpanningTree<f64>) -> String {
    let mut s = String::from("from,to,length\n");
    for e in t.edges() {
        s.push_str(&format!("{},{},{}\n", e.from, e.to, e.length));
    }
    s
}

fn run_unit(sc: &Scenario, unit: Unit, seed: u64) -> Result<Vec<Piece>, ExperimentError> {
    let setup = sc.setup();
    let mut sub = setup.overlay(seed)?;
    let wanted: Vec<ExperimentKind> = sc.experiments.iter().copied().filter(|k| unit_of(*k) == unit).collect();
    let plans = sc.plans().map_err(ExperimentError::Setup)?;
    let mut out = Vec::new();
    match unit {
        Unit::Fig2 => {
            let r = run_convergence(&mut sub, &sc.fig2, seed)?;
            let csv = r.fig2_csv();
            let mut p = piece(ExperimentKind::Fig2Convergence, seed, r.metric_samples("fig2", seed), combine_digests(&[csv.as_str()]), json!({
                "max_inter_clique_hops": r.max_inter_hops,
            }));
            p.csv = csv;
            p.fig2 = r.samples;
            out.push(p);
        }
        Unit::Trees => {
            let r = run_trees(&setup, &sub, &sc.trees, seed)?;
            let runs: Vec<Value> = r
                .runs
                .iter()
                .map(|x| {
                    json!({
                        "group_size": x.group_size,
                        "relay_cliques": x.relay_cliques,
                        "inter_clique_edges": x.inter_clique_edges,
                        "clique_links_form_tree": x.clique_links_form_tree(),
                        "max_path_hops": x.max_path_hops,
                        "unreached": x.unreached,
                    })
                })
                .collect();
            let extra: Vec<OutputFile> = r
                .runs
                .iter()
                .map(|x| OutputFile { path: format!("trees/seed{seed}_g{}.edges.csv", x.group_size), contents: edge_list(&x.tree) })
                .collect();
            for k in wanted {
                let samples = match k {
                    ExperimentKind::Fig3Stretch => r.stretch_samples("fig3", seed),
                    ExperimentKind::Fig4Netload => r.load_samples("fig4", seed),
                    _ => r.stable_samples("fig5", seed),
                };
                let mut p = piece(k, seed, samples, r.digest.clone(), json!({ "runs": runs }));
                if k == extra_owner(sc) {
                    p.extra = extra.clone();
                }
                out.push(p);
            }
        }
        Unit::Startup => {
            let r = run_startup(&setup, &sub, &sc.startup, seed)?;
            let local: Vec<_> = r.joins.iter().filter(|j| j.local).collect();
            let detail = json!({
                "clique_count": r.clique_count,
                "message_bound": r.message_bound,
                "within_bound": r.within_bound(),
                "joins": r.joins.len(),
                "local_joins": local.len(),
                "local_single_message": local.iter().filter(|j| j.messages == 1).count(),
            });
            out.push(piece(ExperimentKind::StartupDelay, seed, r.metric_samples("startup", seed), r.digest.clone(), detail));
        }
        Unit::Recovery => {
            let r = run_recovery(&setup, &sub, &sc.recovery, &plans, seed)?;
            let detail = json!({
                "crashes": r.crashes.len(),
                "within_6_rtt": r.crashes.iter().filter(|c| c.within_rtt_bound(6.0)).count(),
                "within_control_bound": r.crashes.iter().filter(|c| c.control_messages <= c.control_bound()).count(),
                "mean_t_fr_ms": r.mean_t_fr_ms(),
                "double_failures": r.doubles,
            });
            out.push(piece(ExperimentKind::RecoveryTiming, seed, r.metric_samples("recovery", seed), r.digest.clone(), detail));
        }
        Unit::Churn => {
            let r = run_churn(&setup, &sub, &sc.churn_params(), &plans, seed)?;
            let detail = json!({
                "checkpoints": r.checkpoints.len(),
                "violations": r.total_violations(),
                "examples": r.examples,
                "settled": r.settled,
                "events": r.events,
            });
            out.push(piece(ExperimentKind::ChurnInvariants, seed, r.metric_samples("churn", seed), r.digest.clone(), detail));
        }
    }
    Ok(out)
}

/// The first listed tree figure carries the edge lists.
fn extra_owner(sc: &Scenario) -> ExperimentKind {
    sc.experiments.iter().copied().find(|k| unit_of(*k) == Unit::Trees).unwrap_or(ExperimentKind::Fig3Stretch)
}

#[derive(Serialize)]
struct Stat {
    scenario_tag: String,
    metric: String,
    group_size: usize,
    mean: f64,
    std: f64,
    n: usize,
}

fn aggregate(pieces: &[&Piece]) -> Vec<Stat> {
    let mut groups: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for p in pieces {
        for s in &p.samples {
            if s.value.is_finite() {
                groups.entry((s.scenario_tag.clone(), s.metric.to_string(), s.group_size)).or_default().push(s.value);
            }
        }
    }
    groups
        .into_iter()
        .map(|((scenario_tag, metric, group_size), xs)| Stat { scenario_tag, metric, group_size, mean: mean(&xs), std: std_dev(&xs), n: xs.len() })
        .collect()
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn summarize(sc: &Scenario, pieces: &[Piece]) -> Value {
    let mut exps = serde_json::Map::new();
    for k in &sc.experiments {
        let mine: Vec<&Piece> = pieces.iter().filter(|p| p.kind == *k).collect();
        let mut e = serde_json::Map::new();
        e.insert("metrics".into(), serde_json::to_value(aggregate(&mine)).unwrap_or(Value::Null));
        if *k == ExperimentKind::Fig2Convergence {
            let pooled: Vec<(f64, f64)> = mine.iter().flat_map(|p| p.fig2.iter().copied()).collect();
            let bins = bin_means(&pooled, sc.fig2.bins);
            let mut edges: Vec<f64> = bins.iter().map(|b| b.lo).collect();
            edges.extend(bins.last().map(|b| b.hi));
            e.insert("bin_edges".into(), json!(edges));
            e.insert("mean_C".into(), Value::Array(bins.iter().map(|b| finite_or_null(b.mean)).collect()));
            e.insert("n".into(), json!(bins.iter().map(|b| b.n).collect::<Vec<_>>()));
        }
        let per_seed: serde_json::Map<String, Value> = mine.iter().map(|p| (p.seed.to_string(), p.detail.clone())).collect();
        e.insert("per_seed".into(), Value::Object(per_seed));
        exps.insert(k.as_str().to_string(), Value::Object(e));
    }
    json!({ "scenario": sc.name, "seeds": sc.seeds, "experiments": exps })
}

/// Runs every (experiment, seed) pair. Independent simulations are spread
/// over `jobs` threads; each simulation stays single-threaded and the
/// results are sorted before they are returned.
pub fn run_scenario(sc: &Scenario, jobs: usize) -> Result<RunOutput, ScenarioError> {
    let mut units: Vec<(Unit, u64)> = Vec::new();
    for &seed in &sc.seeds {
        let mut seen = Vec::new();
        for k in &sc.experiments {
            let u = unit_of(*k);
            if !seen.contains(&u) {
                seen.push(u);
                units.push((u, seed));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Vec<Piece>, ExperimentError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, units.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(u, seed)) = units.get(i) else { break };
                let r = run_unit(sc, u, seed);
                results.lock().expect("no worker panics while holding the lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    results.sort_by_key(|(i, _)| *i);
    let mut pieces = Vec::new();
    for (i, r) in results {
        let (u, seed) = units[i];
        let name = sc.experiments.iter().find(|k| unit_of(**k) == u).map(|k| k.as_str()).unwrap_or("?").to_string();
        match r {
            Ok(p) => pieces.extend(p),
            Err(ExperimentError::EventCap(_)) => return Err(ScenarioError::EventCap { scenario: sc.name.clone(), experiment: name, seed }),
            Err(e) => return Err(ScenarioError::Experiment { scenario: sc.name.clone(), experiment: name, seed, message: e.to_string() }),
        }
    }
    pieces.sort_by(|a, b| a.kind.cmp(&b.kind).then(a.seed.cmp(&b.seed)));

    let mut files = Vec::new();
    let mut digests = Vec::new();
    for p in &pieces {
        files.push(OutputFile { path: format!("{}_seed{}.csv", p.kind.as_str(), p.seed), contents: p.csv.clone() });
        files.extend(p.extra.iter().cloned());
        digests.push(format!("{},{},{}", p.kind.as_str(), p.seed, p.digest));
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    digests.sort();
    Ok(RunOutput { files, digests, summary: summarize(sc, &pieces) })
}
