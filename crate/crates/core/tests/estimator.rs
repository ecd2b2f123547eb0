mod common;

use capiset::capi::PwaConstraint;
use capiset::estimator::{
    init_estimator, mse_loss, pretrain_dataset, EstimatorConfig, EstimatorNet, EstimatorProblem, Verifier, VERIFY_TOL,
};
use capiset::fixtures;
use capiset::geometry::Polytope;
use capiset::partition::{build_annotated, PartitionTree};
use capiset::pwanet::{Activation, AffinePiece, Layer, PwaNetwork, ReferenceMap};
use capiset::systems::SystemSpec;
use capiset::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const R_LO: f64 = -0.4;
const R_HI: f64 = 0.4;

/// `V(y) = |y₁| + |y₂|`
fn l1_net() -> PwaNetwork {
    PwaNetwork::new(
        2,
        vec![
            Layer::new(
                vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
                vec![0.0; 4],
            ),
            Layer::new(vec![vec![1.0; 4]], vec![0.0]),
        ],
        Activation::Relu,
    )
    .unwrap()
}

fn constant(level: f64) -> EstimatorNet {
    let net = PwaNetwork::new(
        1,
        vec![
            Layer::new(vec![vec![0.0]], vec![0.0]),
            Layer::new(vec![vec![0.0]], vec![level]),
        ],
        Activation::Relu,
    )
    .unwrap();
    EstimatorNet::new(net).unwrap()
}

fn lifted(net: PwaNetwork, by: f64) -> PwaNetwork {
    let mut layers = net.layers().to_vec();
    layers.last_mut().unwrap().bias[0] += by;
    PwaNetwork::new(net.input_dim(), layers, net.activation()).unwrap()
}

struct Problem {
    v: PwaNetwork,
    tree: PartitionTree,
    emap: ReferenceMap,
    cons: Vec<PwaConstraint>,
    x_domain: Polytope,
    r_domain: Polytope,
}

/// `x = y + (r, 0)`, `y ∈ [-1, 1]²`, constraint `x₁ ≤ 0.5`, so the level is
/// `0.5 − r` when the reference moves the equilibrium and `0.5` when it does not.
fn problem(moving: bool) -> Problem {
    let v = l1_net();
    let tree = build_annotated(&v, &Polytope::from_box(&[-1.0; 2], &[1.0; 2]).unwrap()).unwrap();
    let emap = if moving {
        ReferenceMap::new(vec![vec![1.0], vec![0.0]]).unwrap()
    } else {
        ReferenceMap::zero(2, 1)
    };
    let x_domain = Polytope::from_box(&[-1.5; 2], &[1.5; 2]).unwrap();
    let cons = vec![PwaConstraint::affine("x1 <= 0.5", AffinePiece::new(vec![1.0, 0.0], -0.5), &x_domain).unwrap()];
    let r_domain = Polytope::from_box(&[R_LO], &[R_HI]).unwrap();
    Problem {
        v,
        tree,
        emap,
        cons,
        x_domain,
        r_domain,
    }
}

impl Problem {
    fn verifier(&self) -> Verifier<'_> {
        Verifier::new(
            &self.tree,
            &self.emap,
            &self.cons,
            &self.x_domain,
            &self.r_domain,
            Some(1.0),
        )
        .unwrap()
    }

    fn estimator_problem(&self) -> EstimatorProblem<'_> {
        EstimatorProblem::new(
            &self.tree,
            &self.v,
            &self.emap,
            &self.cons,
            &self.x_domain,
            &self.r_domain,
        )
        .unwrap()
    }

    /// Largest `x₁ − 0.5` over grid points of the verified set.
    fn brute_opt(&self, e: &EstimatorNet, nr: usize, nx: usize) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..=nr {
            let r = R_LO + (R_HI - R_LO) * i as f64 / nr as f64;
            let level = e.eval(&[r]);
            for j in 0..=nx {
                for k in 0..=nx {
                    let x = [-1.5 + 3.0 * j as f64 / nx as f64, -1.5 + 3.0 * k as f64 / nx as f64];
                    let y = self.emap.shift(&x, &[r]);
                    if y.iter().any(|c| c.abs() > 1.0) || common::ref_eval(&self.v, &y) > level {
                        continue;
                    }
                    let c = x[0] - 0.5;
                    best = Some(best.map_or(c, |b: f64| b.max(c)));
                }
            }
        }
        best
    }
}

#[test]
fn zero_estimator_is_verified() {
    let p = problem(true);
    let res = p.verifier().verify(&constant(0.0)).unwrap();
    assert!(res.verified);
    // the verified set is the equilibrium line, whose worst point is r = 0.4
    assert!((res.opt_value.unwrap() - (R_HI - 0.5)).abs() <= 1e-9);
    assert!(res.guard_excess.unwrap() <= 0.0);
}

#[test]
fn large_constant_yields_a_witness() {
    let p = problem(true);
    let res = p.verifier().verify(&constant(0.7)).unwrap();
    assert!(!res.verified);
    // max over r of r + 0.7 − 0.5
    assert!((res.opt_value.unwrap() - 0.6).abs() <= 1e-9);
    let (x, r) = (res.witness_x.unwrap(), res.witness_r.unwrap());
    assert!((r[0] - R_HI).abs() <= 1e-9);
    let y = p.emap.shift(&x, &r);
    assert!(common::ref_eval(&p.v, &y) <= 0.7 + 1e-9);
    assert!((x[0] - 0.5 - 0.6).abs() <= 1e-9);
    assert_eq!(res.binding.as_deref(), Some("x1 <= 0.5"));
}

#[test]
fn guard_catches_levels_beyond_the_domain() {
    // constraint far away, so only the guard can fail
    let mut p = problem(false);
    p.cons = vec![PwaConstraint::affine("x1 <= 1.4", AffinePiece::new(vec![1.0, 0.0], -1.4), &p.x_domain).unwrap()];
    let res = p.verifier().verify(&constant(1.2)).unwrap();
    assert!(!res.verified);
    assert!((res.guard_excess.unwrap() - 0.2).abs() <= 1e-9);
    assert!(p.verifier().verify(&constant(0.9)).unwrap().verified);
}

#[test]
fn verifier_matches_brute_force() {
    let p = problem(true);
    let verifier = p.verifier();
    for seed in 0..4 {
        let net = common::random_net(1, &[4, 3], seed, true, Activation::Relu);
        let e = EstimatorNet::new(net).unwrap();
        let res = verifier.verify(&e).unwrap();
        let brute = p.brute_opt(&e, 160, 240);
        match (res.opt_value, brute) {
            (Some(opt), Some(b)) => {
                assert!(opt >= b - 1e-9, "seed {seed}: exact {opt} below grid {b}");
                // grid spacing in x is 0.0125; in r it is 0.005 with slope at most |E'| + 1
                assert!(
                    opt - b <= 0.0125 + 0.005 * (1.0 + common::lipschitz_bound(&e.net)),
                    "seed {seed}: {opt} vs {b}"
                );
            }
            (a, b) => panic!("seed {seed}: {a:?} vs {b:?}"),
        }
        assert_eq!(
            res.verified,
            res.opt_value.unwrap() <= VERIFY_TOL && res.guard_excess.unwrap() <= 0.0
        );
    }
}

fn fast_config(seed: u64) -> EstimatorConfig {
    EstimatorConfig {
        hidden: vec![4],
        n_pretrain: 30,
        pretrain_epochs: 800,
        epochs_per_iter: 200,
        max_iters: 40,
        seed,
        ..EstimatorConfig::default()
    }
}

#[test]
fn constant_level_trains_quickly() {
    let p = problem(false);
    let mut ep = p.estimator_problem();
    assert!((ep.level(&[0.1]).unwrap() - 0.5).abs() <= 1e-12);
    let e = ep.train(&fast_config(1)).unwrap();
    assert!(e.verified);
    assert!(e.iterations <= 5, "{} iterations", e.iterations);
    assert!(p.verifier().verify(&e).unwrap().verified);
}

#[test]
fn moving_level_trains_and_stays_below_the_exact_level() {
    let p = problem(true);
    let mut ep = p.estimator_problem();
    let e = ep.train(&fast_config(2)).unwrap();
    assert!(e.verified);
    assert_eq!(e.dataset_size, 30 + 5 * e.counterexamples.len());
    for i in 0..=100 {
        let r = R_LO + (R_HI - R_LO) * i as f64 / 100.0;
        assert!(e.eval(&[r]) <= 0.5 - r + 1e-9, "r = {r}");
    }
}

#[test]
fn adversarial_start_recovers_through_counterexamples() {
    let p = problem(true);
    let mut ep = p.estimator_problem();
    let mut cfg = fast_config(3);
    cfg.pretrain_epochs = 0;
    // a normal init lifted far above the exact level everywhere
    let init = lifted(init_estimator(&p.r_domain, &cfg).unwrap(), 3.0);
    let e = ep.train_from(init, &cfg).unwrap();
    assert!(e.verified);
    assert!(!e.counterexamples.is_empty());
    assert!(e.counterexamples.iter().all(|c| c.violation > 0.0));
}

#[test]
fn exhausted_budget_reports_unverified() {
    let p = problem(true);
    let mut ep = p.estimator_problem();
    let mut cfg = fast_config(4);
    cfg.pretrain_epochs = 0;
    cfg.epochs_per_iter = 0;
    cfg.max_iters = 2;
    let err = ep.train_from(constant(3.0).net, &cfg).unwrap_err();
    assert!(matches!(err, Error::Unverified { iterations: 2, .. }), "{err}");
    assert!(err.is_numerical());
}

#[test]
fn pretrain_set_is_deterministic_and_nonnegative() {
    let dom = Polytope::from_box(&[R_LO], &[R_HI]).unwrap();
    let mut oracle = |r: &[f64]| -> capiset::Result<f64> { Ok(0.5 - r[0]) };
    let a = pretrain_dataset(&mut oracle, &dom, 50, 9).unwrap();
    let b = pretrain_dataset(&mut oracle, &dom, 50, 9).unwrap();
    let c = pretrain_dataset(&mut oracle, &dom, 50, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert!(a.samples.iter().all(|s| s.gamma >= 0.0 && dom.contains(&s.r, 0.0)));
    let mut negative = |_: &[f64]| -> capiset::Result<f64> { Ok(-1.0) };
    assert!(matches!(
        pretrain_dataset(&mut negative, &dom, 5, 0),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        pretrain_dataset(&mut oracle, &dom, 0, 0),
        Err(Error::Input(_))
    ));
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let dom = Polytope::from_box(&[R_LO], &[R_HI]).unwrap();
    let mut net = init_estimator(&dom, &EstimatorConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<(Vec<f64>, f64)> = (0..20)
        .map(|_| (vec![rng.gen_range(R_LO..R_HI)], rng.gen_range(0.0..1.0)))
        .collect();
    let mut grad = vec![0.0; net.num_params()];
    mse_loss(&net, &data, &mut grad);
    let p0 = net.params();
    let mut scratch = vec![0.0; p0.len()];
    let h = 1e-5;
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += h;
        net.set_params(&p);
        let up = mse_loss(&net, &data, &mut scratch);
        p[i] -= 2.0 * h;
        net.set_params(&p);
        let down = mse_loss(&net, &data, &mut scratch);
        let fd = (up - down) / (2.0 * h);
        assert!(
            (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1.0),
            "param {i}: {fd} vs {}",
            grad[i]
        );
    }
}

#[test]
fn committed_cartpole_estimator_is_verified_and_safe() {
    let sys = SystemSpec::cartpole();
    let v = fixtures::cartpole_lyapunov();
    let e = fixtures::cartpole_estimator();
    let cons = fixtures::constraints("cartpole")
        .unwrap()
        .resolve(&sys.state_domain())
        .unwrap()
        .constraints;
    let tree = build_annotated(&v, &sys.domain()).unwrap();
    let r_domain = fixtures::cartpole_estimator_domain();
    let res =
        capiset::estimator::verify_estimator(&tree, &v, &sys.emap, &e, &cons, &sys.state_domain(), &r_domain).unwrap();
    assert!(res.verified, "{res:?}");
    // sampled sublevel sets stay admissible; V is positively homogeneous, so
    // scaling a direction by level / V(direction) reaches the level set
    let (lo, hi) = r_domain.bounding_box().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut inside = 0;
    for _ in 0..100_000 {
        let r = [rng.gen_range(lo[0]..=hi[0])];
        let u = sys.sample_domain(&mut rng);
        let s = rng.gen_range(0.0..=1.0) * e.eval(&r) / common::ref_eval(&v, &u);
        let y: Vec<f64> = u.iter().map(|c| c * s).collect();
        let in_domain = y
            .iter()
            .zip(sys.domain_lo.iter().zip(&sys.domain_hi))
            .all(|(c, (a, b))| a <= c && c <= b);
        if !in_domain || common::ref_eval(&v, &y) > e.eval(&r) {
            continue;
        }
        inside += 1;
        let x: Vec<f64> = y.iter().zip(sys.emap.equilibrium(&r)).map(|(a, b)| a + b).collect();
        for c in &cons {
            assert!(c.eval_extended(&x) <= 1e-9, "{} violated at {x:?}, r = {r:?}", c.name);
        }
    }
    assert!(inside > 50_000, "only {inside} samples landed in sublevel sets");
}
