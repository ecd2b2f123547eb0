//! Benchmark plants, saturating linear policies and sampled Lyapunov checks.

mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::pwanet::{PwaNetwork, ReferenceMap};

pub use train::{modal_gauge, train_lyapunov_fixture, ModalGauge, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub b: f64,
    pub tau: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            g: 9.81,
            m: 0.15,
            l: 0.5,
            b: 0.1,
            tau: 0.05,
        }
    }
}

/// `θ̈` of the pendulum for state `[θ, θ̇]` and torque `u`.
pub fn pendulum_accel(x: &[f64], u: f64, p: &PendulumParams) -> f64 {
    (p.m * p.g * p.l * x[0].sin() + u - p.b * x[1]) / (p.m * p.l * p.l)
}

/// Explicit Euler step of the pendulum.
pub fn pendulum_step(x: &[f64], u: f64, p: &PendulumParams) -> Vec<f64> {
    let acc = pendulum_accel(x, u, p);
    vec![x[0] + p.tau * x[1], x[1] + p.tau * acc]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub m_cart: f64,
    pub m_pole: f64,
    pub l: f64,
    pub g: f64,
    pub tau: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            m_cart: 1.0,
            m_pole: 0.1,
            l: 1.0,
            g: 9.81,
            tau: 0.05,
        }
    }
}

/// `(ẍ, θ̈)` of the cart-pole for state `[x, ẋ, θ, θ̇]` and force `f`.
pub fn cartpole_accels(x: &[f64], f: f64, p: &CartPoleParams) -> (f64, f64) {
    let (s, c) = x[2].sin_cos();
    let thd = x[3];
    let den = p.m_cart + p.m_pole * s * s;
    let xdd = (f + p.m_pole * s * (p.l * thd * thd - p.g * c)) / den;
    let thdd = (-(f + p.m_pole * p.l * thd * thd * s) * c + (p.m_cart + p.m_pole) * p.g * s) / (p.l * den);
    (xdd, thdd)
}

/// Explicit Euler step of the cart-pole.
pub fn cartpole_step(x: &[f64], f: f64, p: &CartPoleParams) -> Vec<f64> {
    let (xdd, thdd) = cartpole_accels(x, f, p);
    vec![
        x[0] + p.tau * x[1],
        x[1] + p.tau * xdd,
        x[2] + p.tau * x[3],
        x[3] + p.tau * thdd,
    ]
}

/// `u = sat(K·(x - x̄))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub gain: Vec<f64>,
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
}

impl LinearPolicy {
    pub fn new(gain: Vec<f64>, u_min: Option<f64>, u_max: Option<f64>) -> Result<Self> {
        if let (Some(a), Some(b)) = (u_min, u_max) {
            if !(a < b) {
                return Err(Error::Input(format!("input bounds [{a}, {b}] are empty")));
            }
        }
        Ok(LinearPolicy { gain, u_min, u_max })
    }

    pub fn saturate(&self, u: f64) -> f64 {
        let u = self.u_min.map_or(u, |m| u.max(m));
        self.u_max.map_or(u, |m| u.min(m))
    }

    pub fn control(&self, x: &[f64], x_bar: &[f64]) -> f64 {
        let u: f64 = self
            .gain
            .iter()
            .zip(x.iter().zip(x_bar))
            .map(|(k, (a, b))| k * (a - b))
            .sum();
        self.saturate(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Plant {
    Pendulum(PendulumParams),
    CartPole(CartPoleParams),
}

/// A plant with its policy, reference map and the boxes everything lives on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub plant: Plant,
    pub policy: LinearPolicy,
    pub emap: ReferenceMap,
    /// Box `D` in shifted coordinates on which the Lyapunov network is valid.
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
    /// Reference box `R`.
    pub ref_lo: Vec<f64>,
    pub ref_hi: Vec<f64>,
}

impl SystemSpec {
    /// Pendulum with the reference as a dummy scalar (`E = 0`).
    pub fn pendulum() -> Self {
        SystemSpec {
            name: "pendulum".into(),
            plant: Plant::Pendulum(PendulumParams::default()),
            policy: LinearPolicy {
                gain: vec![-2.20, -0.638],
                u_min: Some(-6.0),
                u_max: Some(6.0),
            },
            emap: ReferenceMap::zero(2, 1),
            domain_lo: vec![-1.2, -1.2],
            domain_hi: vec![1.2, 1.2],
            ref_lo: vec![-1.0],
            ref_hi: vec![1.0],
        }
    }

    /// Cart-pole tracking a cart position reference (`E = e₁`).
    pub fn cartpole() -> Self {
        SystemSpec {
            name: "cartpole".into(),
            plant: Plant::CartPole(CartPoleParams::default()),
            policy: LinearPolicy {
                gain: vec![1.09, 1.81, 34.6, 11.3],
                u_min: None,
                u_max: None,
            },
            emap: ReferenceMap::new(vec![vec![1.0], vec![0.0], vec![0.0], vec![0.0]]).unwrap(),
            domain_lo: vec![-1.0, -1.0, -0.3, -1.0],
            domain_hi: vec![1.0, 1.0, 0.3, 1.0],
            ref_lo: vec![-0.7],
            ref_hi: vec![0.4],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pendulum" => Ok(Self::pendulum()),
            "cartpole" | "cart-pole" => Ok(Self::cartpole()),
            other => Err(Error::Input(format!("unknown system `{other}`"))),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.emap.state_dim()
    }

    pub fn reference_dim(&self) -> usize {
        self.emap.reference_dim()
    }

    pub fn tau(&self) -> f64 {
        match &self.plant {
            Plant::Pendulum(p) => p.tau,
            Plant::CartPole(p) => p.tau,
        }
    }

    pub fn step(&self, x: &[f64], u: f64) -> Vec<f64> {
        match &self.plant {
            Plant::Pendulum(p) => pendulum_step(x, u, p),
            Plant::CartPole(p) => cartpole_step(x, u, p),
        }
    }

    pub fn control(&self, x: &[f64], r: &[f64]) -> f64 {
        self.policy.control(x, &self.emap.equilibrium(r))
    }

    /// `f_cl(x, r)`
    pub fn closed_loop(&self, x: &[f64], r: &[f64]) -> Vec<f64> {
        self.step(x, self.control(x, r))
    }

    /// `D` as a polytope (shifted coordinates).
    pub fn domain(&self) -> Polytope {
        Polytope::from_box(&self.domain_lo, &self.domain_hi).expect("valid domain box")
    }

    pub fn reference_domain(&self) -> Polytope {
        Polytope::from_box(&self.ref_lo, &self.ref_hi).expect("valid reference box")
    }

    /// Interval hull of `D ⊕ E·R`, the states constraints are evaluated on.
    pub fn state_box(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.state_dim();
        let mut lo = self.domain_lo.clone();
        let mut hi = self.domain_hi.clone();
        for i in 0..n {
            for (j, &e) in self.emap.matrix[i].iter().enumerate() {
                let (a, b) = (e * self.ref_lo[j], e * self.ref_hi[j]);
                lo[i] += a.min(b);
                hi[i] += a.max(b);
            }
        }
        (lo, hi)
    }

    pub fn state_domain(&self) -> Polytope {
        let (lo, hi) = self.state_box();
        Polytope::from_box(&lo, &hi).expect("valid state box")
    }

    pub fn sample_domain<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        sample_box(rng, &self.domain_lo, &self.domain_hi)
    }

    pub fn sample_reference<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        sample_box(rng, &self.ref_lo, &self.ref_hi)
    }
}

pub fn sample_box<R: Rng>(rng: &mut R, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(&a, &b)| if a < b { rng.gen_range(a..b) } else { a })
        .collect()
}

/// Worst sampled violation of one Lyapunov condition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub violations: usize,
    /// Largest violation magnitude (`0` when none).
    pub worst: f64,
    pub witness: Option<Vec<f64>>,
    pub witness_r: Option<Vec<f64>>,
}

impl ConditionReport {
    fn record(&mut self, amount: f64, x: &[f64], r: &[f64]) {
        self.violations += 1;
        if amount > self.worst || self.witness.is_none() {
            self.worst = amount;
            self.witness = Some(x.to_vec());
            self.witness_r = Some(r.to_vec());
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub samples: usize,
    pub references: usize,
    /// `V(x̄_r, r) = 0`
    pub equilibrium: ConditionReport,
    /// `V(x, r) > 0` for `x ≠ x̄_r`
    pub positivity: ConditionReport,
    /// `V(f_cl(x, r), r) - V(x, r) ≤ 0`
    pub decrease: ConditionReport,
}

impl LyapunovReport {
    pub fn total_violations(&self) -> usize {
        self.equilibrium.violations + self.positivity.violations + self.decrease.violations
    }

    pub fn is_clean(&self) -> bool {
        self.total_violations() == 0
    }
}

/// Number of references each state sample is paired with.
pub const CHECK_REFERENCES: usize = 4;

/// Samples the three Lyapunov conditions on `D + x̄_r` for random references.
pub fn check_lyapunov(net: &PwaNetwork, system: &SystemSpec, n_samples: usize, seed: u64) -> Result<LyapunovReport> {
    let n = system.state_dim();
    if net.input_dim() != n {
        return Err(Error::Input(format!(
            "network input {} ≠ state dimension {n}",
            net.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<Vec<f64>> = (0..CHECK_REFERENCES)
        .map(|_| system.sample_reference(&mut rng))
        .collect();
    let mut rep = LyapunovReport {
        samples: n_samples,
        references: refs.len(),
        ..Default::default()
    };
    for r in &refs {
        let x_bar = system.emap.equilibrium(r);
        let v0 = net.eval(&system.emap.shift(&x_bar, r));
        if v0 != 0.0 {
            rep.equilibrium.record(v0.abs(), &x_bar, r);
        }
    }
    for k in 0..n_samples {
        let r = &refs[k % refs.len()];
        let x_bar = system.emap.equilibrium(r);
        let y = system.sample_domain(&mut rng);
        let x: Vec<f64> = y.iter().zip(&x_bar).map(|(a, b)| a + b).collect();
        let v = net.eval(&system.emap.shift(&x, r));
        if v <= 0.0 && y.iter().any(|&c| c != 0.0) {
            rep.positivity.record(-v, &x, r);
        }
        let next = system.closed_loop(&x, r);
        let dv = net.eval(&system.emap.shift(&next, r)) - v;
        if dv > 0.0 {
            rep.decrease.record(dv, &x, r);
        }
    }
    Ok(rep)
}
