mod common;

use capiset::capi::{
    box_constraints, find_inactive_hyperplanes, grid_oracle_gamma, max_admissible_level, max_admissible_level_convex,
    pair_lp, ConstraintPiece, GridOracle, LevelOptions, LevelSolver, PwaConstraint,
};
use capiset::fixtures;
use capiset::geometry::{Hyperplane, LpStatus, Polytope};
use capiset::partition::build_annotated;
use capiset::pwanet::{Activation, AffinePiece, Layer, PwaNetwork, ReferenceMap};
use capiset::systems::SystemSpec;
use capiset::Error;
use proptest::prelude::*;

fn abs_net() -> PwaNetwork {
    PwaNetwork::new(
        1,
        vec![
            Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0]),
            Layer::new(vec![vec![1.0, 1.0]], vec![0.0]),
        ],
        Activation::Relu,
    )
    .unwrap()
}

fn unit() -> Polytope {
    Polytope::from_box(&[-1.0], &[1.0]).unwrap()
}

fn shift_map() -> ReferenceMap {
    ReferenceMap::new(vec![vec![1.0]]).unwrap()
}

#[test]
fn pair_lp_examples() {
    let leaf = Polytope::from_box(&[0.0], &[1.0]).unwrap();
    let v = AffinePiece::new(vec![1.0], 0.0);
    let c = AffinePiece::new(vec![1.0], -0.5);
    let r = pair_lp(&v, &leaf, &c, &unit(), &[0.0]).unwrap();
    assert_eq!(r.status, LpStatus::Optimal);
    assert!((r.value - 0.5).abs() < 1e-12);
    assert!((r.point.unwrap()[0] - 0.5).abs() < 1e-12);
    let r = pair_lp(&v, &leaf, &c, &unit(), &[0.2]).unwrap();
    assert!((r.value - 0.3).abs() < 1e-12);
    let inner = Polytope::from_box(&[0.0], &[0.2]).unwrap();
    assert_eq!(
        pair_lp(&v, &inner, &c, &unit(), &[0.0]).unwrap().status,
        LpStatus::Infeasible
    );
}

#[test]
fn box_constraint_shapes() {
    let dom = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
    let cs = box_constraints(&[Some(-1.0), None], &[Some(1.0), None], &dom).unwrap();
    assert_eq!(cs.len(), 2);
    assert_eq!(cs[0].eval(&[0.5, 0.0]), Some(-0.5));
    assert_eq!(cs[1].eval(&[0.5, 0.0]), Some(-1.5));
    let cart = Polytope::from_box(&[-2.0; 4], &[2.0; 4]).unwrap();
    let cs = box_constraints(&[Some(-0.7), None, None, None], &[Some(0.4), None, None, None], &cart).unwrap();
    assert_eq!(cs[0].eval(&[0.0; 4]), Some(-0.4));
    assert_eq!(cs[1].eval(&[0.0; 4]), Some(-0.7));
    assert!(box_constraints(&[None, None], &[None, None], &dom).unwrap().is_empty());
    assert!(matches!(
        box_constraints(&[Some(1.0), None], &[Some(0.0), None], &dom),
        Err(Error::Input(_))
    ));
}

#[test]
fn inactive_hyperplane_examples() {
    let plane = Hyperplane::new(vec![1.0], 0.0).unwrap();
    let pc = Polytope::from_box(&[0.5], &[1.0]).unwrap();
    let s = find_inactive_hyperplanes(&[Some(plane.clone())], &pc).unwrap();
    assert_eq!(s.pairs, vec![(0, false)]);
    let s = find_inactive_hyperplanes(&[Some(plane)], &unit()).unwrap();
    assert!(s.pairs.is_empty());
}

#[test]
fn abs_levels() {
    let net = abs_net();
    let tree = build_annotated(&net, &unit()).unwrap();
    let half = PwaConstraint::affine("x <= 0.5", AffinePiece::new(vec![1.0], -0.5), &unit()).unwrap();
    let opts = LevelOptions::default();
    let e = ReferenceMap::zero(1, 1);
    let r = max_admissible_level(&tree, &net, std::slice::from_ref(&half), &[0.0], &e, opts).unwrap();
    assert!((r.gamma_star - 0.5).abs() < 1e-12);
    assert_eq!(r.binding.as_deref(), Some("x <= 0.5"));
    // equilibrium on the boundary
    let r = max_admissible_level(&tree, &net, std::slice::from_ref(&half), &[0.5], &shift_map(), opts).unwrap();
    assert_eq!(r.gamma_star, 0.0);
    // inadmissible equilibrium
    assert!(matches!(
        max_admissible_level(&tree, &net, std::slice::from_ref(&half), &[0.7], &shift_map(), opts),
        Err(Error::InfeasibleReference { .. })
    ));
    // unconstrained without the guard
    let free = LevelOptions {
        domain_guard: false,
        ..opts
    };
    assert!(max_admissible_level(&tree, &net, &[], &[0.0], &e, free)
        .unwrap()
        .is_unbounded());
    // the guard caps at min |x| on {-1, 1}
    assert!(
        (max_admissible_level(&tree, &net, &[], &[0.0], &e, opts)
            .unwrap()
            .gamma_star
            - 1.0)
            .abs()
            < 1e-12
    );
    // two constraints: min rule and declaration-order binding
    let low = PwaConstraint::affine("x >= -0.3", AffinePiece::new(vec![-1.0], -0.3), &unit()).unwrap();
    let r = max_admissible_level(&tree, &net, &[half, low], &[0.0], &e, opts).unwrap();
    assert!((r.gamma_star - 0.3).abs() < 1e-12);
    assert_eq!(r.binding_index, Some(1));
}

#[test]
fn convex_half_space() {
    let net = abs_net();
    let tree = build_annotated(&net, &unit()).unwrap();
    let e = ReferenceMap::zero(1, 1);
    let r =
        max_admissible_level_convex(&tree, &net, &[vec![1.0]], &[0.5], &[0.0], &e, LevelOptions::default()).unwrap();
    assert!((r.gamma_star - 0.5).abs() < 1e-12);
    let r = max_admissible_level_convex(
        &tree,
        &net,
        &[vec![1.0]],
        &[0.5],
        &[0.5],
        &shift_map(),
        LevelOptions::default(),
    )
    .unwrap();
    assert_eq!(r.gamma_star, 0.0);
}

#[test]
fn grid_oracle_abs() {
    let net = abs_net();
    let c = PwaConstraint::affine("x <= 0.5", AffinePiece::new(vec![1.0], -0.5), &unit()).unwrap();
    let e = ReferenceMap::zero(1, 1);
    let g = grid_oracle_gamma(&net, &e, &[c], &[0.0], &[-1.0], &[1.0], GridOracle::coarse_only(10_000)).unwrap();
    assert!((g - 0.5).abs() < 2e-4);
    let cfg = GridOracle {
        domain_guard: false,
        ..GridOracle::new(100)
    };
    assert_eq!(
        grid_oracle_gamma(&net, &e, &[], &[0.0], &[-1.0], &[1.0], cfg).unwrap(),
        f64::INFINITY
    );
}

#[test]
fn piecewise_constraint_pieces() {
    // c(x) = |x| - 0.4 as two pieces
    let left = Polytope::from_box(&[-1.0], &[0.0]).unwrap();
    let right = Polytope::from_box(&[0.0], &[1.0]).unwrap();
    let c = PwaConstraint::new(
        "|x| <= 0.4",
        vec![
            ConstraintPiece {
                region: left,
                piece: AffinePiece::new(vec![-1.0], -0.4),
            },
            ConstraintPiece {
                region: right,
                piece: AffinePiece::new(vec![1.0], -0.4),
            },
        ],
    )
    .unwrap();
    let net = abs_net();
    let tree = build_annotated(&net, &unit()).unwrap();
    let r = max_admissible_level(&tree, &net, &[c], &[0.1], &shift_map(), LevelOptions::default()).unwrap();
    assert!((r.gamma_star - 0.3).abs() < 1e-12);
}

fn option_variants() -> Vec<LevelOptions> {
    let mut v = vec![LevelOptions::default(), LevelOptions::unpruned()];
    for (a, b) in [(true, false), (false, true), (false, false)] {
        v.push(LevelOptions::with_ps(a, b));
    }
    v.push(LevelOptions {
        bbox_screen: false,
        ..LevelOptions::default()
    });
    v
}

fn assert_options_agree(solver: &mut LevelSolver, r: &[f64]) {
    let base = solver
        .max_admissible_level(r, LevelOptions::unpruned())
        .unwrap()
        .gamma_star;
    for opts in option_variants() {
        let g = solver.max_admissible_level(r, opts).unwrap().gamma_star;
        assert!(
            (g - base).abs() <= 1e-9 * (1.0 + base.abs()),
            "{opts:?} at r = {r:?}: {g} vs {base}"
        );
    }
}

#[test]
fn pruning_is_exact_on_the_pendulum_fixture() {
    let sys = SystemSpec::pendulum();
    let net = fixtures::pendulum_lyapunov();
    let cons = fixtures::constraints("pendulum")
        .unwrap()
        .resolve(&sys.state_domain())
        .unwrap()
        .constraints;
    let tree = build_annotated(&net, &sys.domain()).unwrap();
    let mut solver = LevelSolver::new(&tree, &net, &sys.emap, &cons).unwrap();
    for r in [-1.0, -0.3, 0.0, 0.6] {
        assert_options_agree(&mut solver, &[r]);
    }
}

#[test]
fn pruning_is_exact_on_the_cartpole_fixture() {
    let sys = SystemSpec::cartpole();
    let net = fixtures::cartpole_lyapunov();
    let cons = fixtures::constraints("cartpole")
        .unwrap()
        .resolve(&sys.state_domain())
        .unwrap()
        .constraints;
    let tree = build_annotated(&net, &sys.domain()).unwrap();
    assert_eq!(tree.num_leaves(), fixtures::golden().cartpole_leaves);
    let mut solver = LevelSolver::new(&tree, &net, &sys.emap, &cons).unwrap();
    for r in [-0.6, 0.0, 0.35] {
        assert_options_agree(&mut solver, &[r]);
    }
    let g = solver
        .max_admissible_level(&[0.0], LevelOptions::default())
        .unwrap()
        .gamma_star;
    assert!((g - fixtures::golden().cartpole_gamma_r0).abs() <= 1e-9);
}

#[test]
fn pendulum_level_matches_golden() {
    let sys = SystemSpec::pendulum();
    let net = fixtures::pendulum_lyapunov();
    let cons = fixtures::constraints("pendulum")
        .unwrap()
        .resolve(&sys.state_domain())
        .unwrap()
        .constraints;
    let tree = build_annotated(&net, &sys.domain()).unwrap();
    let g = LevelSolver::new(&tree, &net, &sys.emap, &cons)
        .unwrap()
        .max_admissible_level(&[0.0], LevelOptions::default())
        .unwrap()
        .gamma_star;
    let golden = fixtures::golden().pendulum_gamma_r0;
    assert!((g - golden).abs() <= 0.02 * golden, "{g} vs {golden}");
    // the grid value is attained at grid points, so it can only overestimate
    assert!(g <= golden + 1e-12);
}

/// Halfspaces `a·x ≤ b` as a convex set and as separate affine constraints.
fn convex_vs_general(net: &PwaNetwork, a: &[Vec<f64>], b: &[f64], r: &[f64]) -> (f64, f64) {
    let n = net.input_dim();
    let dom = Polytope::from_box(&vec![-1.0; n], &vec![1.0; n]).unwrap();
    let tree = build_annotated(net, &dom).unwrap();
    let e = ReferenceMap::new((0..n).map(|i| vec![if i == 0 { 1.0 } else { 0.0 }]).collect()).unwrap();
    let cons: Vec<PwaConstraint> = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (row, &off))| {
            let domain = Polytope::from_box(&vec![-2.0; n], &vec![2.0; n]).unwrap();
            PwaConstraint::affine(format!("h{i}"), AffinePiece::new(row.clone(), -off), &domain).unwrap()
        })
        .collect();
    let mut solver = LevelSolver::new(&tree, net, &e, &cons).unwrap();
    let general = solver
        .max_admissible_level(r, LevelOptions::default())
        .unwrap()
        .gamma_star;
    let convex = solver
        .max_admissible_level_convex(a, b, r, LevelOptions::default())
        .unwrap()
        .gamma_star;
    (general, convex)
}

#[test]
fn convex_path_matches_general_path() {
    let net = common::random_net(2, &[6, 4], 3, false, Activation::Relu);
    let net = common::with_positive_output(net);
    let a = vec![vec![1.0, 0.5], vec![-0.3, 1.0], vec![-1.0, -1.0]];
    let b = vec![0.6, 0.5, 0.7];
    for r in [0.0, 0.2, -0.1] {
        let (g, c) = convex_vs_general(&net, &a, &b, &[r]);
        assert!((g - c).abs() <= 1e-9 * (1.0 + g.abs()), "r = {r}: {g} vs {c}");
    }
}

/// Brute-force level on a grid over `[-1, 1]²` without the domain guard;
/// the grid value can only overestimate the exact one.
fn grid_level(net: &PwaNetwork, a: &[f64; 2], b: f64, steps: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            let x = [
                -1.0 + 2.0 * i as f64 / steps as f64,
                -1.0 + 2.0 * j as f64 / steps as f64,
            ];
            if a[0] * x[0] + a[1] * x[1] > b {
                best = best.min(common::ref_eval(net, &x));
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn level_brackets_grid_oracle(seed in 0u64..500, ang in 0.0f64..std::f64::consts::TAU, b in 0.2f64..0.8) {
        let net = common::with_positive_output(common::random_net(2, &[5, 3], seed, false, Activation::Relu));
        let dom = Polytope::from_box(&[-1.0; 2], &[1.0; 2]).unwrap();
        let tree = build_annotated(&net, &dom).unwrap();
        let a = [ang.cos(), ang.sin()];
        let c = PwaConstraint::affine("h", AffinePiece::new(a.to_vec(), -b), &dom).unwrap();
        let free = LevelOptions { domain_guard: false, ..LevelOptions::default() };
        let e = ReferenceMap::zero(2, 1);
        let g = max_admissible_level(&tree, &net, &[c], &[0.0], &e, free).unwrap().gamma_star;
        let steps = 400;
        let grid = grid_level(&net, &a, b, steps);
        let lip = common::lipschitz_bound(&net);
        prop_assert!(g <= grid + 1e-9);
        prop_assert!(grid - g <= lip * 2.0 * 2.0f64.sqrt() / steps as f64 + 1e-9, "{} vs {}", g, grid);
    }
}
