//! The experiment matrix: component ablations over several seeds, graph
//! depth and reference-count sweeps. Results are cached in
//! `runs/<name>/result.json` so an interrupted matrix resumes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::trainer::{evaluate, train};
use crate::error::{Error, Result};
use crate::eval::{AblationReport, EvalReport, TableRow};
use crate::model::{Ablation, GatConfig};
use crate::synth::{Dataset, Split};

pub const RESULT_FILE: &str = "result.json";

/// Component rows of the comparison table, in order.
pub const COMPONENT_ROWS: [Ablation; 5] = [
    Ablation::BASE,
    Ablation {
        gtp: true,
        vp: false,
        ram: false,
    },
    Ablation {
        gtp: true,
        vp: false,
        ram: true,
    },
    Ablation {
        gtp: false,
        vp: true,
        ram: true,
    },
    Ablation::FULL,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    /// Seeds of every component row.
    pub seeds: Vec<u64>,
    pub components: bool,
    /// Graph depths swept on the full model.
    pub gat_layers: Vec<usize>,
    /// Reference counts swept on the full model.
    pub refs: Vec<usize>,
    /// Seed of the depth and reference sweeps.
    pub sweep_seed: u64,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            seeds: vec![0, 1, 2],
            components: true,
            gat_layers: vec![3, 4, 5],
            refs: vec![1, 2, 3, 4],
            sweep_seed: 0,
        }
    }
}

/// Test metrics of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub run: RunConfig,
    pub test: EvalReport,
    pub seconds: f64,
}

/// Trains `run` on `data` and evaluates it on the test split.
pub fn train_and_test(name: &str, run: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<RunResult> {
    let t0 = Instant::now();
    let outcome = train(run, data, out)?;
    let test = data.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Eval("corpus has no test split".into()));
    }
    let report = evaluate(&outcome.model, Some(&outcome.bank), &test)?;
    Ok(RunResult {
        name: name.to_string(),
        run: run.clone(),
        test: report,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// A named run with the ablation flags, depth, reference count and seed
/// substituted into `base`.
fn variant(base: &RunConfig, ablation: Ablation, layers: usize, refs: usize, seed: u64) -> RunConfig {
    let mut run = base.clone();
    run.model.ablation = ablation;
    if run.model.gat.layers != layers {
        run.model.gat = GatConfig {
            layers,
            heads: GatConfig::with_layers(layers).heads,
            ..run.model.gat
        };
    }
    run.model.refs = refs;
    run.train.seed = seed;
    run
}

fn run_name(run: &RunConfig) -> String {
    let a = run.model.ablation;
    let mut s = String::new();
    for (on, tag) in [(a.gtp, "gtp"), (a.vp, "vp"), (a.ram, "ram")] {
        if on {
            s += tag;
            s.push('-');
        }
    }
    if s.is_empty() {
        s += "base-";
    }
    if a.gtp {
        s += &format!("l{}-", run.model.gat.layers);
    }
    if a.vp {
        s += &format!("k{}-", run.model.refs);
    }
    s + &format!("s{}", run.train.seed)
}

/// Loads a cached result for `run` from `dir`, if it matches exactly.
fn cached(dir: &Path, run: &RunConfig) -> Option<RunResult> {
    let text = std::fs::read_to_string(dir.join(RESULT_FILE)).ok()?;
    match serde_json::from_str::<RunResult>(&text) {
        Ok(r) if &r.run == run => Some(r),
        _ => {
            log::warn!("{}: stale result, retraining", dir.display());
            None
        }
    }
}

fn execute(name: &str, run: &RunConfig, data: &Dataset, out: &Path) -> Result<RunResult> {
    let dir = out.join("runs").join(name);
    if let Some(r) = cached(&dir, run) {
        log::info!("{name}: cached (mIoU {:.2})", r.test.miou);
        return Ok(r);
    }
    log::info!("{name}: training");
    let r = train_and_test(name, run, data, Some(&dir))?;
    let path = dir.join(RESULT_FILE);
    let text = serde_json::to_string_pretty(&r)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    log::info!("{name}: test mIoU {:.2} mAcc {:.2} ({:.0}s)", r.test.miou, r.test.macc, r.seconds);
    Ok(r)
}

/// Runs the matrix of `plan` around `base` and collects the tables. Every
/// distinct configuration trains once, in its own `runs/<name>` directory;
/// with `parallel` the runs execute concurrently. Results of every run are
/// returned alongside the report.
pub fn run_matrix(
    base: &RunConfig,
    data: &Dataset,
    plan: &AblationPlan,
    out: &Path,
    parallel: bool,
) -> Result<(AblationReport, Vec<RunResult>)> {
    base.validate()?;
    std::fs::create_dir_all(out.join("runs")).map_err(|e| Error::io(out, e))?;
    let (layers, refs) = (base.model.gat.layers, base.model.refs);
    let s = plan.sweep_seed;
    let mut wanted: BTreeMap<String, RunConfig> = BTreeMap::new();
    let mut want = |run: RunConfig| -> String {
        let name = run_name(&run);
        wanted.entry(name.clone()).or_insert(run);
        name
    };
    let components: Vec<(Ablation, Vec<(u64, String)>)> = if plan.components {
        COMPONENT_ROWS
            .iter()
            .map(|&ab| {
                let names = plan
                    .seeds
                    .iter()
                    .map(|&seed| (seed, want(variant(base, ab, layers, refs, seed))))
                    .collect();
                (ab, names)
            })
            .collect()
    } else {
        Vec::new()
    };
    let depth: Vec<(usize, String)> = plan
        .gat_layers
        .iter()
        .map(|&l| (l, want(variant(base, Ablation::FULL, l, refs, s))))
        .collect();
    let sweep: Vec<(usize, String)> = plan
        .refs
        .iter()
        .map(|&k| (k, want(variant(base, Ablation::FULL, layers, k, s))))
        .collect();

    let jobs: Vec<(&String, &RunConfig)> = wanted.iter().collect();
    let results: Vec<RunResult> = if parallel {
        jobs.par_iter()
            .map(|(name, run)| execute(name, run, data, out))
            .collect::<Result<_>>()?
    } else {
        jobs.iter()
            .map(|(name, run)| execute(name, run, data, out))
            .collect::<Result<_>>()?
    };
    let by_name: BTreeMap<&str, &RunResult> = results.iter().map(|r| (r.name.as_str(), r)).collect();
    let metrics = |name: &str, seed: u64| {
        let r = by_name[name];
        (seed, r.test.miou, r.test.macc)
    };

    let mut report = AblationReport::default();
    for (ab, names) in &components {
        let runs: Vec<_> = names.iter().map(|(seed, n)| metrics(n, *seed)).collect();
        report.components.push(TableRow::from_runs(ab.label(), &runs));
    }
    for (l, n) in &depth {
        report
            .gat_depth
            .push(TableRow::from_runs(&format!("{l} layers"), &[metrics(n, s)]));
    }
    for (k, n) in &sweep {
        report.refs.push((*k, TableRow::from_runs(&format!("k={k}"), &[metrics(n, s)])));
    }
    report.sort();
    Ok((report, results))
}
