use std::time::Instant;

use capiset::capi::{LevelResult, LevelSolver};
use capiset::erg::{simulate_erg, ErgConfig, Governor, LevelSource};
use capiset::estimator::{EstimatorConfig, EstimatorProblem};
use capiset::geometry::Polytope;
use capiset::io::{network_to_json, tree_to_json, ArtifactHeader, SCHEMA_VERSION};
use capiset::partition::build_annotated;
use capiset::systems::{check_lyapunov, train_lyapunov_fixture, TrainConfig};
use capiset::Error;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::inputs::{self, parse_list, write_artifact};
use crate::{
    BuildTreeArgs, CheckArgs, Cli, Command, GammaArgs, SimulateErgArgs, SourceKind, TrainEstimatorArgs,
    TrainFixtureArgs, VerifyArgs,
};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::BuildTree(a) => build_tree(cli, a),
        Command::Gamma(a) => gamma(cli, a),
        Command::TrainEstimator(a) => train_estimator(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::SimulateErg(a) => simulate(cli, a),
        Command::Bench(a) => crate::bench::run(cli, a),
        Command::CheckLyapunov(a) => check(cli, a),
        Command::TrainFixture(a) => train_fixture(cli, a),
    }
}

fn pretty(value: &serde_json::Value) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn build_tree(cli: &Cli, a: &BuildTreeArgs) -> CliResult<()> {
    let loaded = inputs::load(&a.sys, None)?;
    let start = Instant::now();
    let tree = build_annotated(&loaded.v_net, &loaded.system.domain())?;
    let seconds = start.elapsed().as_secs_f64();
    let meta = json!({
        "header": loaded.header.to_value(),
        "system": loaded.system.name,
        "weights_sha256": loaded.weights_hash,
        "stats": {
            "leaves": tree.num_leaves(),
            "nodes": tree.nodes().len(),
            "depth": tree.depth(),
            "seconds": seconds,
        },
    });
    write_artifact(cli.out.as_deref(), &tree_to_json(&tree, meta)?)?;
    eprintln!(
        "{} leaves, {} nodes in {seconds:.3} s",
        tree.num_leaves(),
        tree.nodes().len()
    );
    Ok(())
}

fn references(a: &GammaArgs, dim: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut refs = Vec::new();
    for text in &a.r {
        refs.push(parse_list(text)?);
    }
    if let Some(s) = &a.sweep {
        let lo: f64 = s[0]
            .parse()
            .map_err(|_| CliError::Usage(format!("sweep bound `{}`", s[0])))?;
        let hi: f64 = s[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("sweep bound `{}`", s[1])))?;
        let n: usize = s[2]
            .parse()
            .map_err(|_| CliError::Usage(format!("sweep count `{}`", s[2])))?;
        if dim != 1 || n == 0 || !(lo <= hi) {
            return Err(CliError::Usage(
                "--sweep needs a scalar reference, LO ≤ HI and N ≥ 1".into(),
            ));
        }
        refs.extend((0..n).map(|k| vec![lerp(lo, hi, k, n)]));
    }
    if refs.is_empty() {
        return Err(CliError::Usage("give at least one --r or a --sweep".into()));
    }
    if let Some(r) = refs.iter().find(|r| r.len() != dim) {
        return Err(Error::Input(format!("reference {r:?} should have {dim} entries")).into());
    }
    Ok(refs)
}

/// Solves every reference, fanning out over `workers` threads that each own a
/// solver clone; the output order follows `refs`.
pub fn solve_all(
    solver: &LevelSolver,
    refs: &[Vec<f64>],
    convex: Option<&(Vec<Vec<f64>>, Vec<f64>)>,
    opts: capiset::capi::LevelOptions,
    workers: usize,
) -> capiset::Result<Vec<LevelResult>> {
    let workers = workers.clamp(1, refs.len().max(1));
    let mut slots: Vec<Option<capiset::Result<LevelResult>>> = (0..refs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let mut local = solver.clone();
                s.spawn(move || {
                    refs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, r)| {
                            let res = match convex {
                                Some((a, b)) => local.max_admissible_level_convex(a, b, r, opts),
                                None => local.max_admissible_level(r, opts),
                            };
                            (i, res)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, res) in h.join().expect("level worker panicked") {
                slots[i] = Some(res);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every reference solved")).collect()
}

/// `k`-th of `n` evenly spaced points from `lo` to `hi`, hitting both ends exactly.
pub fn lerp(lo: f64, hi: f64, k: usize, n: usize) -> f64 {
    if n == 1 {
        return lo;
    }
    let t = k as f64 / (n - 1) as f64;
    lo * (1.0 - t) + hi * t
}

fn gamma(cli: &Cli, a: &GammaArgs) -> CliResult<()> {
    let mut loaded = inputs::load(&a.sys, Some(cli.seed))?;
    let tree = inputs::tree(&mut loaded, a.tree.as_deref())?;
    let set = loaded.constraints()?;
    let refs = references(a, loaded.system.reference_dim())?;
    let convex = match (a.convex, &set.convex) {
        (false, _) => None,
        (true, Some(c)) => Some(c),
        (true, None) => {
            return Err(Error::Input("--convex needs a `convex_polytope` in the constraint file".into()).into())
        }
    };
    let solver = LevelSolver::new(&tree, &loaded.v_net, &loaded.system.emap, &set.constraints)?;
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let results = solve_all(&solver, &refs, convex, a.prune.options(), workers)?;
    let mut csv = loaded.header.csv_lines();
    let nr = refs[0].len();
    let mut cols: Vec<String> = if nr == 1 {
        vec!["r".into()]
    } else {
        (1..=nr).map(|i| format!("r_{i}")).collect()
    };
    cols.extend(["gamma_star", "binding", "pair_lps", "setup_lps", "seconds"].map(String::from));
    csv.push_str(&cols.join(","));
    csv.push('\n');
    for (r, res) in refs.iter().zip(&results) {
        let mut row: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        row.push(res.gamma_star.to_string());
        row.push(res.binding.clone().unwrap_or_default().replace(',', ";"));
        row.push(res.stats.pair_lps.to_string());
        row.push(res.stats.setup_lps.to_string());
        row.push(format!("{:.6e}", res.seconds));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_artifact(cli.out.as_deref(), &csv)
}

fn widths(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&w| w > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CliError::Usage(format!("`{text}` is not a list of positive widths")))
}

fn train_estimator(cli: &Cli, a: &TrainEstimatorArgs) -> CliResult<()> {
    let mut loaded = inputs::load(&a.sys, Some(cli.seed))?;
    let tree = inputs::tree(&mut loaded, a.tree.as_deref())?;
    let set = loaded.constraints()?;
    let sys = &loaded.system;
    let lo: Vec<f64> = sys.ref_lo.iter().map(|v| v + a.reference_margin).collect();
    let hi: Vec<f64> = sys.ref_hi.iter().map(|v| v - a.reference_margin).collect();
    let r_domain = Polytope::from_box(&lo, &hi)?;
    let cfg = EstimatorConfig {
        hidden: widths(&a.hidden)?,
        n_pretrain: a.pretrain,
        max_iters: a.max_iters,
        learning_rate: a.learning_rate,
        pretrain_epochs: a.pretrain_epochs,
        epochs_per_iter: a.iter_epochs,
        seed: cli.seed,
        margin: a.margin,
        ..EstimatorConfig::default()
    };
    let start = Instant::now();
    let mut problem = EstimatorProblem::new(
        &tree,
        &loaded.v_net,
        &sys.emap,
        &set.constraints,
        &sys.state_domain(),
        &r_domain,
    )?;
    let e = problem.train(&cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let extra = json!({
        "header": loaded.header.to_value(),
        "system": sys.name,
        "reference_lo": lo,
        "reference_hi": hi,
        "config": cfg,
    });
    write_artifact(cli.out.as_deref(), &(e.to_json(extra)? + "\n"))?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "header": loaded.header.to_value(),
        "verified": e.verified,
        "iterations": e.iterations,
        "dataset_size": e.dataset_size,
        "dataset_hash": e.dataset_hash,
        "counterexamples": e.counterexamples,
        "seconds": seconds,
    });
    if let Some(path) = &a.report {
        write_artifact(Some(path), &pretty(&report)?)?;
    }
    eprintln!("verified after {} iterations in {seconds:.1} s", e.iterations);
    Ok(())
}

fn verify(cli: &Cli, a: &VerifyArgs) -> CliResult<()> {
    let mut loaded = inputs::load(&a.sys, None)?;
    let tree = inputs::tree(&mut loaded, a.tree.as_deref())?;
    let set = loaded.constraints()?;
    let (e, r_domain) = inputs::estimator(a.estimator.as_deref(), &loaded.system, &mut loaded.header)?;
    let sys = &loaded.system;
    let res = capiset::estimator::verify_estimator(
        &tree,
        &loaded.v_net,
        &sys.emap,
        &e,
        &set.constraints,
        &sys.state_domain(),
        &r_domain,
    )?;
    let (lo, hi) = r_domain.bounding_box()?;
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "header": loaded.header.to_value(),
        "reference_lo": lo,
        "reference_hi": hi,
        "result": res,
    });
    write_artifact(cli.out.as_deref(), &pretty(&doc)?)?;
    if !res.verified {
        return Err(CliError::Check(format!(
            "estimator not verified (constraint maximum {:?}, guard excess {:?})",
            res.opt_value, res.guard_excess
        )));
    }
    Ok(())
}

fn simulate(cli: &Cli, a: &SimulateErgArgs) -> CliResult<()> {
    let mut loaded = inputs::load(&a.sys, None)?;
    let set = loaded.constraints()?;
    let x0 = parse_list(&a.x0)?;
    let r = parse_list(&a.r)?;
    let v0 = a.v0.as_deref().map(parse_list).transpose()?;
    let tree;
    let (mut source, default_box) = match a.source {
        SourceKind::Estimator => {
            let (e, dom) = inputs::estimator(a.estimator.as_deref(), &loaded.system, &mut loaded.header)?;
            (LevelSource::Estimator(e), dom)
        }
        SourceKind::Exact => {
            tree = inputs::tree(&mut loaded, a.tree.as_deref())?;
            let solver = LevelSolver::new(&tree, &loaded.v_net, &loaded.system.emap, &set.constraints)?;
            (LevelSource::Exact(solver), loaded.system.reference_domain())
        }
    };
    let (dlo, dhi) = default_box.bounding_box()?;
    let v_lo = a.v_lo.as_deref().map(parse_list).transpose()?.unwrap_or(dlo);
    let v_hi = a.v_hi.as_deref().map(parse_list).transpose()?.unwrap_or(dhi);
    let mut cfg = ErgConfig::new(a.eta, a.dt.unwrap_or(loaded.system.tau()), a.horizon, v_lo, v_hi)?;
    if a.direct {
        cfg.governor = Governor::Direct;
    }
    let traj = simulate_erg(
        &loaded.system,
        &loaded.v_net,
        &mut source,
        &set.constraints,
        &x0,
        &r,
        v0,
        &cfg,
    )?;
    write_artifact(cli.out.as_deref(), &traj.to_csv(&loaded.header.csv_lines()))?;
    eprintln!(
        "{} steps, max constraint {:.3e}, min margin {:.3e}",
        traj.records.len(),
        traj.max_constraint(),
        traj.min_delta()
    );
    Ok(())
}

fn check(cli: &Cli, a: &CheckArgs) -> CliResult<()> {
    let loaded = inputs::load(&a.sys, Some(cli.seed))?;
    let report = check_lyapunov(&loaded.v_net, &loaded.system, a.samples, cli.seed)?;
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "header": loaded.header.to_value(),
        "clean": report.is_clean(),
        "report": report,
    });
    write_artifact(cli.out.as_deref(), &pretty(&doc)?)?;
    if !report.is_clean() {
        return Err(CliError::Check(format!(
            "{} sampled violations of the Lyapunov conditions",
            report.total_violations()
        )));
    }
    Ok(())
}

fn train_fixture(cli: &Cli, a: &TrainFixtureArgs) -> CliResult<()> {
    let system = match &a.sys.system_file {
        Some(path) => {
            serde_json::from_str(&inputs::read(path)?).map_err(|e| Error::Schema(format!("system file: {e}")))?
        }
        None => capiset::systems::SystemSpec::by_name(&a.sys.system)?,
    };
    let mut cfg = TrainConfig::new(widths(&a.hidden)?, a.zero_bias, cli.seed);
    cfg.max_rounds = a.max_rounds;
    cfg.check_samples = a.check_samples;
    let (net, report) = train_lyapunov_fixture(&system, &cfg)?;
    let meta = json!({
        "header": ArtifactHeader::new(Some(cli.seed)).to_value(),
        "kind": "lyapunov",
        "system": system.name,
        "domain_lo": system.domain_lo,
        "domain_hi": system.domain_hi,
        "trainer": cfg,
        "report": report,
    });
    write_artifact(cli.out.as_deref(), &(network_to_json(&net, meta)? + "\n"))
}
