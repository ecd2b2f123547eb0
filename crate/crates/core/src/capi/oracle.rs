//! Sampling estimate of `Γ*(r)` that shares no code with the LP path.
//!
//! Every grid edge along which a constraint changes sign contributes the
//! linearly interpolated crossing; with the domain guard, every grid node on
//! the outer faces contributes too. The smallest values are then refined on
//! local grids around the best candidates.

use crate::error::{Error, Result};
use crate::pwanet::{PwaNetwork, ReferenceMap};

use super::PwaConstraint;

/// Upper bound on grid nodes per scan.
pub const MAX_GRID_NODES: usize = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOracle {
    /// Cells per axis of the coarse grid.
    pub resolution: usize,
    /// Local refinement passes around the best candidates.
    pub refine_rounds: usize,
    /// Candidates refined per pass.
    pub candidates: usize,
    /// Cells per axis of each local grid.
    pub local_resolution: usize,
    /// Include the domain boundary as an implicit constraint.
    pub domain_guard: bool,
}

impl GridOracle {
    pub fn new(resolution: usize) -> Self {
        GridOracle {
            resolution,
            refine_rounds: 3,
            candidates: 8,
            local_resolution: 16,
            domain_guard: true,
        }
    }

    pub fn coarse_only(resolution: usize) -> Self {
        GridOracle {
            refine_rounds: 0,
            ..Self::new(resolution)
        }
    }
}

struct Scan<'a> {
    net: &'a PwaNetwork,
    constraints: &'a [PwaConstraint],
    x_bar: Vec<f64>,
    /// Box of `D + x̄`.
    lo: Vec<f64>,
    hi: Vec<f64>,
    guard: bool,
}

impl Scan<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let y: Vec<f64> = x.iter().zip(&self.x_bar).map(|(a, b)| a - b).collect();
        self.net.eval(&y)
    }

    fn on_outer_face(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .any(|(v, (l, h))| v == l || v == h)
    }

    /// Candidate `(V, x)` pairs on the grid over `[lo, hi]` with `m` cells per axis.
    fn run(&self, lo: &[f64], hi: &[f64], m: usize) -> Result<Vec<(f64, Vec<f64>)>> {
        let n = lo.len();
        let per = m + 1;
        let total = per
            .checked_pow(n as u32)
            .filter(|&t| t <= MAX_GRID_NODES)
            .ok_or_else(|| Error::Input(format!("grid of {per}^{n} nodes exceeds {MAX_GRID_NODES}")))?;
        let coord = |idx: &[usize]| -> Vec<f64> {
            idx.iter()
                .enumerate()
                .map(|(i, &k)| {
                    if k == m {
                        hi[i]
                    } else {
                        lo[i] + (hi[i] - lo[i]) * k as f64 / m as f64
                    }
                })
                .collect()
        };
        let k = self.constraints.len();
        let mut cvals = vec![0.0; total * k];
        let mut idx = vec![0usize; n];
        for flat in 0..total {
            let x = coord(&idx);
            for (j, c) in self.constraints.iter().enumerate() {
                cvals[flat * k + j] = c.eval_extended(&x);
            }
            increment(&mut idx, per);
        }
        let mut out = Vec::new();
        let mut stride = vec![1usize; n];
        for i in 1..n {
            stride[i] = stride[i - 1] * per;
        }
        idx.iter_mut().for_each(|v| *v = 0);
        for flat in 0..total {
            let x = coord(&idx);
            if self.guard && self.on_outer_face(&x) {
                out.push((self.value(&x), x.clone()));
            }
            for axis in 0..n {
                if idx[axis] == m {
                    continue;
                }
                let nb = flat + stride[axis];
                for j in 0..k {
                    let (c0, c1) = (cvals[flat * k + j], cvals[nb * k + j]);
                    let crosses = (c0 <= 0.0 && c1 >= 0.0) || (c0 >= 0.0 && c1 <= 0.0);
                    if !crosses {
                        continue;
                    }
                    let t = if c0 == c1 { 0.0 } else { c0 / (c0 - c1) };
                    let mut p = x.clone();
                    let step = if idx[axis] + 1 == m {
                        hi[axis] - x[axis]
                    } else {
                        (hi[axis] - lo[axis]) / m as f64
                    };
                    p[axis] += t * step;
                    out.push((self.value(&p), p));
                }
            }
            increment(&mut idx, per);
        }
        Ok(out)
    }
}

fn increment(idx: &mut [usize], per: usize) {
    for v in idx.iter_mut() {
        *v += 1;
        if *v < per {
            return;
        }
        *v = 0;
    }
}

fn best_distinct(mut cands: Vec<(f64, Vec<f64>)>, count: usize, sep: &[f64]) -> Vec<(f64, Vec<f64>)> {
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kept: Vec<(f64, Vec<f64>)> = Vec::new();
    for c in cands {
        if kept.len() >= count {
            break;
        }
        let far = kept
            .iter()
            .all(|k| k.1.iter().zip(&c.1).zip(sep).any(|((a, b), s)| (a - b).abs() > *s));
        if far {
            kept.push(c);
        }
    }
    kept
}

/// Grid estimate of `Γ*(r)` over `D + E·r`, where `D = [domain_lo, domain_hi]`
/// is the box the Lyapunov network is valid on. Returns `+∞` when no
/// candidate exists.
pub fn grid_oracle_gamma(
    net: &PwaNetwork,
    emap: &ReferenceMap,
    constraints: &[PwaConstraint],
    r: &[f64],
    domain_lo: &[f64],
    domain_hi: &[f64],
    cfg: GridOracle,
) -> Result<f64> {
    let n = net.input_dim();
    if domain_lo.len() != n || domain_hi.len() != n || emap.state_dim() != n {
        return Err(Error::Input("grid oracle: dimension mismatch".into()));
    }
    if cfg.resolution == 0 {
        return Err(Error::Input("grid oracle: resolution must be positive".into()));
    }
    let x_bar = emap.equilibrium(r);
    let lo: Vec<f64> = domain_lo.iter().zip(&x_bar).map(|(a, b)| a + b).collect();
    let hi: Vec<f64> = domain_hi.iter().zip(&x_bar).map(|(a, b)| a + b).collect();
    let scan = Scan {
        net,
        constraints,
        x_bar,
        lo: lo.clone(),
        hi: hi.clone(),
        guard: cfg.domain_guard,
    };
    let mut cands = scan.run(&lo, &hi, cfg.resolution)?;
    let mut best = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let mut h: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| (b - a) / cfg.resolution as f64)
        .collect();
    for _ in 0..cfg.refine_rounds {
        let seeds = best_distinct(std::mem::take(&mut cands), cfg.candidates, &h);
        for (_, p) in &seeds {
            let llo: Vec<f64> = (0..n).map(|i| (p[i] - 2.0 * h[i]).max(lo[i])).collect();
            let lhi: Vec<f64> = (0..n).map(|i| (p[i] + 2.0 * h[i]).min(hi[i])).collect();
            let local = scan.run(&llo, &lhi, cfg.local_resolution)?;
            cands.extend(local);
        }
        best = cands.iter().map(|c| c.0).fold(best, f64::min);
        h.iter_mut().for_each(|v| *v *= 4.0 / cfg.local_resolution as f64);
    }
    Ok(best)
}
