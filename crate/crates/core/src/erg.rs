//! Explicit reference governor driven by the maximal admissible level.
//!
//! At every step the applied reference `v` moves toward the target `r` at a
//! rate proportional to the dynamic safety margin `Δ = η (Γ*(v) − V(x, v))`,
//! so the state never leaves the current invariant sublevel set.

use serde::{Deserialize, Serialize};

use crate::capi::{LevelOptions, LevelSolver, PwaConstraint};
use crate::error::{Error, Result};
use crate::estimator::EstimatorNet;
use crate::pwanet::{rdlf_value, PwaNetwork};
use crate::systems::SystemSpec;

/// Constraint values above this count as violations during simulation.
pub const VIOLATION_TOL: f64 = 1e-8;

/// Dynamic safety margin `η (Γ* − V)`; non-negative iff the state is inside the sublevel set.
pub fn dsm(gamma_star: f64, v_value: f64, eta: f64) -> f64 {
    eta * (gamma_star - v_value)
}

/// Sign of `r − v`.
pub fn navigation_field(r: f64, v: f64) -> f64 {
    if r > v {
        1.0
    } else if r < v {
        -1.0
    } else {
        0.0
    }
}

/// Where `Γ*(v)` comes from at each step.
#[allow(clippy::large_enum_variant)]
pub enum LevelSource<'a> {
    /// Exact level from the partition tree.
    Exact(LevelSolver<'a>),
    /// Learned under-approximation.
    Estimator(EstimatorNet),
}

impl LevelSource<'_> {
    pub fn level(&mut self, v: &[f64]) -> Result<f64> {
        match self {
            LevelSource::Exact(s) => Ok(s.max_admissible_level(v, LevelOptions::default())?.gamma_star),
            LevelSource::Estimator(e) => Ok(e.eval(v)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LevelSource::Exact(_) => "exact",
            LevelSource::Estimator(_) => "estimator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Governor {
    /// Reference governed by the safety margin.
    Erg,
    /// Target applied from the first step.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgConfig {
    pub eta: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Box the applied reference is clamped to.
    pub v_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
    pub governor: Governor,
    /// Grid points per reference axis for choosing the initial reference.
    pub v0_grid: usize,
}

impl ErgConfig {
    pub fn new(eta: f64, dt: f64, horizon: usize, v_lo: Vec<f64>, v_hi: Vec<f64>) -> Result<Self> {
        if !(eta > 0.0) || !(dt > 0.0) {
            return Err(Error::Input("ERG needs positive eta and dt".into()));
        }
        if v_lo.len() != v_hi.len() || v_lo.iter().zip(&v_hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Input("ERG reference box is invalid".into()));
        }
        Ok(ErgConfig {
            eta,
            dt,
            horizon,
            v_lo,
            v_hi,
            governor: Governor::Erg,
            v0_grid: 101,
        })
    }

    fn clamp(&self, v: &mut [f64]) {
        for (i, x) in v.iter_mut().enumerate() {
            *x = x.clamp(self.v_lo[i], self.v_hi[i]);
        }
    }
}

/// Margin, Lyapunov value and level behind one reference update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub delta: f64,
    pub value: f64,
    pub gamma: f64,
}

/// `v + dt·max(Δ, 0)·ρ(r, v)` per axis, without passing `r` and inside the reference box.
pub fn erg_step(
    x: &[f64],
    v: &[f64],
    r: &[f64],
    v_net: &PwaNetwork,
    system: &SystemSpec,
    source: &mut LevelSource<'_>,
    cfg: &ErgConfig,
) -> Result<(Vec<f64>, StepInfo)> {
    let value = rdlf_value(v_net, &system.emap, x, v)?;
    let gamma = source.level(v)?;
    let delta = dsm(gamma, value, cfg.eta);
    Ok((advance(v, r, delta, cfg), StepInfo { delta, value, gamma }))
}

fn advance(v: &[f64], r: &[f64], delta: f64, cfg: &ErgConfig) -> Vec<f64> {
    let rate = cfg.dt * delta.max(0.0);
    let mut out: Vec<f64> = v
        .iter()
        .zip(r)
        .map(|(&vi, &ri)| {
            let next = vi + rate * navigation_field(ri, vi);
            // no overshoot past the target
            if (next - ri) * (vi - ri) < 0.0 {
                ri
            } else {
                next
            }
        })
        .collect();
    cfg.clamp(&mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: f64,
    pub v: Vec<f64>,
    pub delta: f64,
    pub value: f64,
    pub gamma: f64,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgTrajectory {
    pub records: Vec<ErgRecord>,
    pub constraint_names: Vec<String>,
    pub source: String,
}

impl ErgTrajectory {
    /// CSV with columns `t, x_1…x_n, u, v…, Delta, V, Gamma, c_1…c_k`.
    pub fn to_csv(&self, header: &str) -> String {
        let mut s = header.to_string();
        for (k, name) in self.constraint_names.iter().enumerate() {
            s.push_str(&format!("# c_{} = {}\n", k + 1, name));
        }
        let n = self.records.first().map_or(0, |r| r.x.len());
        let nr = self.records.first().map_or(1, |r| r.v.len());
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=n).map(|i| format!("x_{i}")));
        cols.push("u".into());
        if nr == 1 {
            cols.push("v".into());
        } else {
            cols.extend((1..=nr).map(|i| format!("v_{i}")));
        }
        cols.extend(["Delta", "V", "Gamma"].map(String::from));
        cols.extend((1..=self.constraint_names.len()).map(|k| format!("c_{k}")));
        s.push_str(&cols.join(","));
        s.push('\n');
        for r in &self.records {
            let mut row = vec![r.t.to_string()];
            row.extend(r.x.iter().map(|v| v.to_string()));
            row.push(r.u.to_string());
            row.extend(r.v.iter().map(|v| v.to_string()));
            row.extend([r.delta, r.value, r.gamma].map(|v| v.to_string()));
            row.extend(r.c.iter().map(|v| v.to_string()));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn max_constraint(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.c.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_delta(&self) -> f64 {
        self.records.iter().map(|r| r.delta).fold(f64::INFINITY, f64::min)
    }
}

/// Reference that minimises `V(x₀, v)` subject to `V(x₀, v) ≤ Γ*(v)` over a grid
/// of the reference box plus the least-squares fit of `x₀` by `E·v`.
pub fn initial_reference(
    x0: &[f64],
    v_net: &PwaNetwork,
    system: &SystemSpec,
    source: &mut LevelSource<'_>,
    cfg: &ErgConfig,
) -> Result<Vec<f64>> {
    let nr = system.reference_dim();
    let m = cfg.v0_grid.max(2);
    let total = m
        .checked_pow(nr as u32)
        .ok_or_else(|| Error::Input("reference grid too large".into()))?;
    let mut cands: Vec<Vec<f64>> = Vec::with_capacity(total + 1);
    for flat in 0..total {
        let mut k = flat;
        let v: Vec<f64> = (0..nr)
            .map(|i| {
                let idx = k % m;
                k /= m;
                cfg.v_lo[i] + (cfg.v_hi[i] - cfg.v_lo[i]) * idx as f64 / (m - 1) as f64
            })
            .collect();
        cands.push(v);
    }
    if let Some(mut v) = least_squares_reference(system, x0) {
        cfg.clamp(&mut v);
        cands.push(v);
    }
    let mut scored: Vec<(f64, Vec<f64>)> = cands
        .into_iter()
        .map(|v| Ok((rdlf_value(v_net, &system.emap, x0, &v)?, v)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (value, v) in scored {
        // the grid may contain references whose equilibrium is inadmissible
        let gamma = match source.level(&v) {
            Ok(g) => g,
            Err(Error::InfeasibleReference { .. }) => continue,
            Err(e) => return Err(e),
        };
        if value <= gamma {
            return Ok(v);
        }
    }
    Err(Error::Input(format!(
        "no reference admits x0 = {x0:?} in its sublevel set"
    )))
}

/// `argmin_v ‖x − E v‖` through the normal equations.
fn least_squares_reference(system: &SystemSpec, x: &[f64]) -> Option<Vec<f64>> {
    let e = &system.emap.matrix;
    let n = e.len();
    let nr = system.reference_dim();
    let gram = nalgebra::DMatrix::from_fn(nr, nr, |a, b| (0..n).map(|i| e[i][a] * e[i][b]).sum::<f64>());
    let rhs = nalgebra::DVector::from_fn(nr, |a, _| (0..n).map(|i| e[i][a] * x[i]).sum::<f64>());
    gram.lu().solve(&rhs).map(|v| v.iter().copied().collect())
}

fn constraint_values(constraints: &[PwaConstraint], x: &[f64]) -> Vec<f64> {
    constraints.iter().map(|c| c.eval_extended(x)).collect()
}

/// Closed-loop run toward `r`; aborts with `ConstraintViolated` at the first
/// logged state that violates a constraint.
#[allow(clippy::too_many_arguments)]
pub fn simulate_erg(
    system: &SystemSpec,
    v_net: &PwaNetwork,
    source: &mut LevelSource<'_>,
    constraints: &[PwaConstraint],
    x0: &[f64],
    r: &[f64],
    v0: Option<Vec<f64>>,
    cfg: &ErgConfig,
) -> Result<ErgTrajectory> {
    if x0.len() != system.state_dim() || r.len() != system.reference_dim() || cfg.v_lo.len() != r.len() {
        return Err(Error::Input("simulate_erg: dimension mismatch".into()));
    }
    let mut v = match (cfg.governor, v0) {
        (Governor::Direct, _) => r.to_vec(),
        (Governor::Erg, Some(v)) => v,
        (Governor::Erg, None) => initial_reference(x0, v_net, system, source, cfg)?,
    };
    let mut x = x0.to_vec();
    let mut traj = ErgTrajectory {
        records: Vec::with_capacity(cfg.horizon + 1),
        constraint_names: constraints.iter().map(|c| c.name.clone()).collect(),
        source: source.name().to_string(),
    };
    let x_target = system.emap.equilibrium(r);
    for step in 0..=cfg.horizon {
        let c = constraint_values(constraints, &x);
        if let Some((k, &val)) = c
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > VIOLATION_TOL)
            .max_by(|a, b| a.1.total_cmp(b.1))
        {
            return Err(Error::ConstraintViolated {
                step,
                constraint: constraints[k].name.clone(),
                value: val,
                state: x,
            });
        }
        let (next_v, info) = erg_step(&x, &v, r, v_net, system, source, cfg)?;
        let u = system.control(&x, &v);
        traj.records.push(ErgRecord {
            t: step as f64 * cfg.dt,
            x: x.clone(),
            u,
            v: v.clone(),
            delta: info.delta,
            value: info.value,
            gamma: info.gamma,
            c,
        });
        let settled = v.iter().zip(r).all(|(a, b)| (a - b).abs() < 1e-4)
            && x.iter()
                .zip(&x_target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                < 1e-3;
        if step == cfg.horizon || settled {
            break;
        }
        x = system.step(&x, u);
        if cfg.governor == Governor::Erg {
            v = next_v;
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ErgConfig {
        ErgConfig::new(2.0, 0.05, 10, vec![-1.0], vec![1.0]).unwrap()
    }

    #[test]
    fn margin_arithmetic() {
        assert!((dsm(1.0, 0.4, 2.0) - 1.2).abs() < 1e-15);
        assert_eq!(dsm(0.7, 0.7, 2.0), 0.0);
        assert!(dsm(0.5, 0.7, 2.0) < 0.0);
    }

    #[test]
    fn field_signs() {
        assert_eq!(navigation_field(0.399, -0.4), 1.0);
        assert_eq!(navigation_field(0.2, 0.2), 0.0);
        assert_eq!(navigation_field(-0.1, 0.2), -1.0);
    }

    #[test]
    fn euler_update_and_clipping() {
        let c = cfg();
        assert_eq!(advance(&[0.1], &[0.5], 0.0, &c), vec![0.1]);
        assert!((advance(&[0.1], &[0.5], 1.2, &c)[0] - 0.16).abs() < 1e-15);
        // unclipped Euler would reach 0.1 + 0.05·20 = 1.1
        assert_eq!(advance(&[0.1], &[0.5], 20.0, &c), vec![0.5]);
        assert_eq!(advance(&[0.1], &[0.5], -3.0, &c), vec![0.1]);
        let narrow = ErgConfig::new(2.0, 0.05, 10, vec![-0.2], vec![0.2]).unwrap();
        assert_eq!(advance(&[0.1], &[0.5], 20.0, &narrow), vec![0.2]);
    }

    #[test]
    fn invalid_config() {
        assert!(ErgConfig::new(0.0, 0.05, 1, vec![0.0], vec![1.0]).is_err());
        assert!(ErgConfig::new(1.0, -0.05, 1, vec![0.0], vec![1.0]).is_err());
        assert!(ErgConfig::new(1.0, 0.05, 1, vec![1.0], vec![0.0]).is_err());
    }
}
