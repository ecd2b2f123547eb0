//! Timing sweep: offline partition time, leaf count, level query time with and
//! without pruning, estimator training and inference time per constraint bound.

use std::time::Instant;

use capiset::capi::{LevelOptions, LevelSolver};
use capiset::estimator::{init_estimator, EstimatorConfig, EstimatorNet, EstimatorProblem};
use capiset::geometry::Polytope;
use capiset::io::ConstraintFile;
use capiset::partition::build_annotated;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};
use crate::inputs::{self, write_artifact};
use crate::{BenchArgs, Cli};

pub const COLUMNS: [&str; 12] = [
    "bound",
    "Comp. Time",
    "# of Partitions",
    "Alg 2. WP",
    "Alg 2. WP max",
    "Alg 2. WOP",
    "Alg 2. WOP max",
    "Alg 4. train",
    "Alg 4. iterations",
    "Inference",
    "Inference max",
    "Gamma mean",
];

/// Mean and max seconds of `reps` calls after `warmup` untimed ones.
fn time<F: FnMut(usize) -> capiset::Result<()>>(warmup: usize, reps: usize, mut f: F) -> capiset::Result<(f64, f64)> {
    for i in 0..warmup {
        f(i)?;
    }
    let mut total = 0.0;
    let mut max = 0.0f64;
    for i in 0..reps {
        let t = Instant::now();
        f(i)?;
        let s = t.elapsed().as_secs_f64();
        total += s;
        max = max.max(s);
    }
    Ok((total / reps as f64, max))
}

/// Bounds on the swept coordinates: angle and rate for the pendulum, position,
/// velocity and angle for the cart-pole.
fn swept_coords(system: &str) -> CliResult<Vec<usize>> {
    match system {
        "pendulum" => Ok(vec![0, 1]),
        "cartpole" => Ok(vec![0, 1, 2]),
        other => Err(CliError::Usage(format!("no bench sweep for `{other}`"))),
    }
}

pub fn run(cli: &Cli, a: &BenchArgs) -> CliResult<()> {
    if a.reps < 100 || a.points == 0 || !(a.lo > 0.0 && a.lo <= a.hi) {
        return Err(CliError::Usage(
            "bench needs --reps ≥ 100, --points ≥ 1 and 0 < LO ≤ HI".into(),
        ));
    }
    let mut loaded = inputs::load(&a.sys, Some(cli.seed))?;
    // the swept bounds replace the constraint file
    loaded.header.inputs.retain(|(label, _)| label != "constraints");
    let sys = &loaded.system;
    let coords = swept_coords(&sys.name)?;
    let start = Instant::now();
    let tree = build_annotated(&loaded.v_net, &sys.domain())?;
    let build = start.elapsed().as_secs_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let mut csv = loaded.header.csv_lines();
    csv.push_str(&format!("# reps={} warmup={} times in seconds\n", a.reps, a.warmup));
    csv.push_str(&COLUMNS.join(","));
    csv.push('\n');
    for k in 0..a.points {
        let b = crate::commands::lerp(a.lo, a.hi, k, a.points);
        let file = ConstraintFile::symmetric_boxes(&coords.iter().map(|&c| (c, b)).collect::<Vec<_>>());
        let cons = file.resolve(&sys.state_domain())?.constraints;
        // references whose equilibrium satisfies the swept bounds
        let lo: Vec<f64> = sys.ref_lo.iter().map(|&l| l.max(-b)).collect();
        let hi: Vec<f64> = sys.ref_hi.iter().map(|&h| h.min(b)).collect();
        let refs: Vec<Vec<f64>> = (0..a.reps + a.warmup)
            .map(|_| lo.iter().zip(&hi).map(|(&l, &h)| rng.gen_range(l..=h)).collect())
            .collect();
        let mut solver = LevelSolver::new(&tree, &loaded.v_net, &sys.emap, &cons)?;
        let mut gamma_sum = 0.0;
        let wp = time(a.warmup, a.reps, |i| {
            gamma_sum += solver
                .max_admissible_level(&refs[i], LevelOptions::default())?
                .gamma_star;
            Ok(())
        })?;
        let gamma_mean = gamma_sum / (a.reps + a.warmup) as f64;
        let wop = time(a.warmup, a.reps, |i| {
            solver
                .max_admissible_level(&refs[i], LevelOptions::unpruned())
                .map(|_| ())
        })?;
        let r_domain = Polytope::from_box(&lo, &hi)?;
        let cfg = EstimatorConfig {
            seed: cli.seed,
            ..EstimatorConfig::default()
        };
        let (estimator, train, iterations) = if a.train_estimator {
            let t = Instant::now();
            let mut problem =
                EstimatorProblem::new(&tree, &loaded.v_net, &sys.emap, &cons, &sys.state_domain(), &r_domain)?;
            let e = problem.train(&cfg)?;
            let iters = e.iterations.to_string();
            (e, format!("{:.6e}", t.elapsed().as_secs_f64()), iters)
        } else {
            // inference cost depends on the architecture only
            (
                EstimatorNet::new(init_estimator(&r_domain, &cfg)?)?,
                String::new(),
                String::new(),
            )
        };
        let mut sink = 0.0;
        let inf = time(a.warmup, a.reps, |i| {
            sink += std::hint::black_box(estimator.eval(std::hint::black_box(&refs[i])));
            Ok(())
        })?;
        std::hint::black_box(sink);
        let row = [
            b.to_string(),
            format!("{build:.6e}"),
            tree.num_leaves().to_string(),
            format!("{:.6e}", wp.0),
            format!("{:.6e}", wp.1),
            format!("{:.6e}", wop.0),
            format!("{:.6e}", wop.1),
            train,
            iterations,
            format!("{:.6e}", inf.0),
            format!("{:.6e}", inf.1),
            gamma_mean.to_string(),
        ];
        csv.push_str(&row.join(","));
        csv.push('\n');
        eprintln!("bound {b}: WP {:.2} ms, WOP {:.2} ms", wp.0 * 1e3, wop.0 * 1e3);
    }
    write_artifact(cli.out.as_deref(), &csv)
}
