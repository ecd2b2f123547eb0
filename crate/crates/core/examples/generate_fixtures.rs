//! Regenerates the committed fixtures under `crates/core/fixtures/`.
//!
//! Run with `cargo run --release -p capiset --example generate_fixtures`.

use std::fs;
use std::path::Path;

use capiset::capi::{grid_oracle_gamma, GridOracle, LevelOptions, LevelSolver};
use capiset::estimator::{EstimatorConfig, EstimatorProblem};
use capiset::fixtures::CARTPOLE_REFERENCE_MARGIN as REFERENCE_MARGIN;
use capiset::geometry::Polytope;
use capiset::io::{network_to_json, ConstraintFile, SCHEMA_VERSION};
use capiset::partition::build_annotated;
use capiset::systems::{check_lyapunov, train_lyapunov_fixture, SystemSpec, TrainConfig};
use serde_json::json;

const LYAPUNOV_SEED: u64 = 7;
const CHECK_SEED: u64 = 20_000;
const ESTIMATOR_SEED: u64 = 0;

fn main() -> capiset::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir)?;

    let pendulum = SystemSpec::pendulum();
    let cartpole = SystemSpec::cartpole();
    let mut nets = Vec::new();
    for (sys, cfg, file) in [
        (
            &pendulum,
            TrainConfig::new(vec![8], false, LYAPUNOV_SEED),
            "pendulum_lyapunov.json",
        ),
        (
            &cartpole,
            TrainConfig::new(vec![12, 12], true, LYAPUNOV_SEED),
            "cartpole_lyapunov.json",
        ),
    ] {
        let (net, _) = train_lyapunov_fixture(sys, &cfg)?;
        let report = check_lyapunov(&net, sys, 10_000, CHECK_SEED)?;
        assert!(report.is_clean(), "{file}: {report:?}");
        let meta = json!({
            "kind": "lyapunov",
            "system": sys.name,
            "domain_lo": sys.domain_lo,
            "domain_hi": sys.domain_hi,
            "trainer": cfg,
            "check_seed": CHECK_SEED,
            "report": report,
        });
        fs::write(dir.join(file), network_to_json(&net, meta)?)?;
        nets.push(net);
        println!("wrote {file}");
    }

    let pc = ConstraintFile::symmetric_boxes(&[(0, 0.5), (1, 0.5)]);
    fs::write(dir.join("pendulum_constraints.json"), pc.to_json()?)?;
    let mut cc = ConstraintFile::symmetric_boxes(&[(1, 0.3), (2, 0.1)]);
    cc.boxes.insert(
        0,
        capiset::io::BoxBound {
            coord: 0,
            upper: None,
            lower: Some(-0.7),
        },
    );
    cc.boxes.insert(
        0,
        capiset::io::BoxBound {
            coord: 0,
            upper: Some(0.4),
            lower: None,
        },
    );
    fs::write(dir.join("cartpole_constraints.json"), cc.to_json()?)?;

    // golden level of the pendulum fixture from the grid oracle
    let pcons = pc.resolve(&pendulum.state_domain())?.constraints;
    let golden = grid_oracle_gamma(
        &nets[0],
        &pendulum.emap,
        &pcons,
        &[0.0],
        &pendulum.domain_lo,
        &pendulum.domain_hi,
        GridOracle::new(400),
    )?;

    let ccons = cc.resolve(&cartpole.state_domain())?.constraints;
    let tree = build_annotated(&nets[1], &cartpole.domain())?;
    let r_domain = Polytope::from_box(
        &[cartpole.ref_lo[0] + REFERENCE_MARGIN],
        &[cartpole.ref_hi[0] - REFERENCE_MARGIN],
    )?;
    let ecfg = EstimatorConfig {
        seed: ESTIMATOR_SEED,
        ..EstimatorConfig::default()
    };
    let mut problem = EstimatorProblem::new(
        &tree,
        &nets[1],
        &cartpole.emap,
        &ccons,
        &cartpole.state_domain(),
        &r_domain,
    )?;
    let est = problem.train(&ecfg)?;
    let extra = json!({
        "system": "cartpole",
        "reference_lo": [cartpole.ref_lo[0] + REFERENCE_MARGIN],
        "reference_hi": [cartpole.ref_hi[0] - REFERENCE_MARGIN],
        "config": ecfg,
    });
    fs::write(dir.join("cartpole_estimator.json"), est.to_json(extra)?)?;
    println!("wrote cartpole_estimator.json after {} iterations", est.iterations);

    let mut solver = LevelSolver::new(&tree, &nets[1], &cartpole.emap, &ccons)?;
    let cart_r0 = solver.max_admissible_level(&[0.0], LevelOptions::default())?.gamma_star;
    let goldens = json!({
        "schema_version": SCHEMA_VERSION,
        "pendulum_gamma_r0": golden,
        "pendulum_gamma_r0_source": "grid oracle, 400 cells per axis with local refinement",
        "cartpole_gamma_r0": cart_r0,
        "cartpole_leaves": tree.num_leaves(),
    });
    fs::write(dir.join("golden.json"), serde_json::to_string_pretty(&goldens)?)?;
    println!(
        "pendulum golden {golden}, cartpole r=0 level {cart_r0}, {} leaves",
        tree.num_leaves()
    );
    Ok(())
}
