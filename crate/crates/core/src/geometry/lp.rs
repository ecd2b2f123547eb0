//! Seidel's randomized incremental linear programming for small dimensions.
//!
//! The kernel minimizes `c·x` subject to `A x ≤ b` and `E x = f`. Equalities are
//! eliminated up front by Gaussian elimination with partial pivoting; the
//! remaining inequality problem is solved by the recursive incremental algorithm
//! inside an artificial bounding box `|x_j| ≤ BIG`. An optimum that rests on the
//! artificial box is reported as [`LpStatus::Unbounded`].
//!
//! Constraint order is shuffled with a seeded ChaCha stream, so a given seed
//! gives bit-identical results across runs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Feasibility tolerance applied to normalized constraint rows.
pub const FEAS_TOL: f64 = 1e-9;
/// Tolerance used to accept the final point against the original constraints.
const ACCEPT_TOL: f64 = 1e-6;
/// Half-width of the artificial bounding box.
const BIG: f64 = 1e6;
/// Rows whose norm falls below this after projection are treated as `0·x ≤ b`.
const ZERO_ROW: f64 = 1e-11;
/// Default shuffle seed.
pub const DEFAULT_SEED: u64 = 0x5eed_1d31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Outcome of a linear program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpResult {
    pub status: LpStatus,
    /// Objective value; `+inf` when infeasible, `-inf` when unbounded.
    pub value: f64,
    /// Minimizer, present iff `status == Optimal`.
    pub point: Option<Vec<f64>>,
}

impl LpResult {
    fn infeasible() -> Self {
        LpResult {
            status: LpStatus::Infeasible,
            value: f64::INFINITY,
            point: None,
        }
    }

    fn unbounded() -> Self {
        LpResult {
            status: LpStatus::Unbounded,
            value: f64::NEG_INFINITY,
            point: None,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// A linear program in flat row-major storage.
///
/// Built incrementally and reusable: [`Lp::clear`] keeps the allocations, which
/// matters in loops that solve thousands of tiny problems.
#[derive(Clone, Debug, Default)]
pub struct Lp {
    dim: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    eq_a: Vec<f64>,
    eq_b: Vec<f64>,
}

impl Lp {
    pub fn new(dim: usize) -> Self {
        Lp {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clear(&mut self, dim: usize) {
        self.dim = dim;
        self.a.clear();
        self.b.clear();
        self.eq_a.clear();
        self.eq_b.clear();
    }

    pub fn num_inequalities(&self) -> usize {
        self.b.len()
    }

    /// Adds `row·x ≤ rhs`.
    pub fn push_le(&mut self, row: &[f64], rhs: f64) {
        debug_assert_eq!(row.len(), self.dim);
        self.a.extend_from_slice(row);
        self.b.push(rhs);
    }

    /// Adds `row·x ≤ rhs` where the row is produced by an iterator.
    pub fn push_le_iter<I: IntoIterator<Item = f64>>(&mut self, row: I, rhs: f64) {
        let start = self.a.len();
        self.a.extend(row);
        debug_assert_eq!(self.a.len() - start, self.dim);
        self.b.push(rhs);
    }

    /// Adds `row·x = rhs`.
    pub fn push_eq(&mut self, row: &[f64], rhs: f64) {
        debug_assert_eq!(row.len(), self.dim);
        self.eq_a.extend_from_slice(row);
        self.eq_b.push(rhs);
    }

    pub fn push_eq_iter<I: IntoIterator<Item = f64>>(&mut self, row: I, rhs: f64) {
        let start = self.eq_a.len();
        self.eq_a.extend(row);
        debug_assert_eq!(self.eq_a.len() - start, self.dim);
        self.eq_b.push(rhs);
    }

    /// Minimizes `objective·x` with the default seed.
    pub fn minimize(&self, objective: &[f64]) -> Result<LpResult, GeometryError> {
        self.minimize_seeded(objective, DEFAULT_SEED)
    }

    pub fn maximize(&self, objective: &[f64]) -> Result<LpResult, GeometryError> {
        let neg: Vec<f64> = objective.iter().map(|v| -v).collect();
        let mut res = self.minimize(&neg)?;
        res.value = -res.value;
        Ok(res)
    }

    pub fn minimize_seeded(&self, objective: &[f64], seed: u64) -> Result<LpResult, GeometryError> {
        if objective.len() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                found: objective.len(),
            });
        }
        if objective.iter().any(|v| !v.is_finite())
            || self
                .a
                .iter()
                .chain(&self.b)
                .chain(&self.eq_a)
                .chain(&self.eq_b)
                .any(|v| !v.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        solve(self, objective, &mut rng)
    }
}

/// Affine substitution `x = T z + t` produced by equality elimination.
struct Substitution {
    d: usize,
    free: usize,
    /// d × free, row-major.
    t_mat: Vec<f64>,
    t_vec: Vec<f64>,
}

impl Substitution {
    fn identity(d: usize) -> Self {
        let mut t_mat = vec![0.0; d * d];
        for i in 0..d {
            t_mat[i * d + i] = 1.0;
        }
        Substitution {
            d,
            free: d,
            t_mat,
            t_vec: vec![0.0; d],
        }
    }

    /// Pulls a row `a·x` back to `(Tᵀa)·z + a·t`.
    fn pull_back(&self, row: &[f64], out: &mut Vec<f64>) -> f64 {
        out.clear();
        out.resize(self.free, 0.0);
        let mut constant = 0.0;
        for i in 0..self.d {
            let ai = row[i];
            if ai == 0.0 {
                continue;
            }
            constant += ai * self.t_vec[i];
            let trow = &self.t_mat[i * self.free..(i + 1) * self.free];
            for (o, t) in out.iter_mut().zip(trow) {
                *o += ai * t;
            }
        }
        constant
    }

    /// Applies `g·z = rhs` by eliminating the pivot coordinate.
    /// Returns `Ok(false)` if the row is redundant, `Err(())` if contradictory.
    fn eliminate(&mut self, g: &[f64], rhs: f64) -> Result<bool, ()> {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (k, gk) = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, v)| (k, *v))
            .unwrap_or((0, 0.0));
        if norm < ZERO_ROW || gk.abs() < ZERO_ROW {
            let scale = norm.max(1.0);
            return if rhs.abs() <= FEAS_TOL * scale {
                Ok(false)
            } else {
                Err(())
            };
        }
        // z_k = (rhs - Σ_{j≠k} g_j z_j) / g_k ; new coordinates drop k.
        let nf = self.free - 1;
        let mut t_mat = vec![0.0; self.d * nf];
        let mut t_vec = self.t_vec.clone();
        for i in 0..self.d {
            let row = &self.t_mat[i * self.free..(i + 1) * self.free];
            let tik = row[k];
            t_vec[i] += tik * rhs / gk;
            let mut col = 0;
            for j in 0..self.free {
                if j == k {
                    continue;
                }
                t_mat[i * nf + col] = row[j] - tik * g[j] / gk;
                col += 1;
            }
        }
        self.t_mat = t_mat;
        self.t_vec = t_vec;
        self.free = nf;
        Ok(true)
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.d)
            .map(|i| {
                let row = &self.t_mat[i * self.free..(i + 1) * self.free];
                self.t_vec[i] + row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

fn solve(lp: &Lp, objective: &[f64], rng: &mut ChaCha8Rng) -> Result<LpResult, GeometryError> {
    let d = lp.dim;
    let mut sub = Substitution::identity(d);
    let mut scratch = Vec::with_capacity(d);
    for (e, &rhs) in lp.eq_a.chunks_exact(d.max(1)).zip(&lp.eq_b) {
        if d == 0 {
            break;
        }
        let constant = sub.pull_back(e, &mut scratch);
        let g = scratch.clone();
        if sub.eliminate(&g, rhs - constant).is_err() {
            return Ok(LpResult::infeasible());
        }
    }
    if d == 0 {
        if lp.eq_b.iter().any(|v| v.abs() > FEAS_TOL) || lp.b.iter().any(|v| *v < -FEAS_TOL) {
            return Ok(LpResult::infeasible());
        }
        return Ok(LpResult {
            status: LpStatus::Optimal,
            value: 0.0,
            point: Some(Vec::new()),
        });
    }

    let free = sub.free;
    let mut c_red = Vec::new();
    sub.pull_back(objective, &mut c_red);

    // Reduced, normalized inequality rows.
    let m = lp.b.len();
    let mut rows: Vec<f64> = Vec::with_capacity(m * free);
    let mut rhs: Vec<f64> = Vec::with_capacity(m);
    for (row, &bi) in lp.a.chunks_exact(d).zip(&lp.b) {
        let constant = sub.pull_back(row, &mut scratch);
        let r = bi - constant;
        let norm = scratch.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_ROW {
            let scale = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            if r < -FEAS_TOL * scale {
                return Ok(LpResult::infeasible());
            }
            continue;
        }
        rows.extend(scratch.iter().map(|v| v / norm));
        rhs.push(r / norm);
    }

    let z = if free == 0 {
        if rhs.iter().any(|v| *v < -FEAS_TOL) {
            return Ok(LpResult::infeasible());
        }
        Vec::new()
    } else {
        let mut order: Vec<usize> = (0..rhs.len()).collect();
        order.shuffle(rng);
        let cons = Constraints::gather(free, &rows, &rhs, &order);
        match seidel(free, &c_red, &cons, rng) {
            Some(z) => z,
            None => return Ok(LpResult::infeasible()),
        }
    };

    if z.iter().any(|v| v.abs() >= BIG * (1.0 - 1e-9)) {
        // The optimum sits on the artificial box, so the objective decreases
        // without bound along a feasible ray.
        return Ok(LpResult::unbounded());
    }

    let x = sub.apply(&z);
    // Acceptance check against the original data.
    for (row, &bi) in lp.a.chunks_exact(d).zip(&lp.b) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let slack = (dot(row, &x) - bi) / norm;
        if slack > ACCEPT_TOL * (1.0 + bi.abs() / norm) {
            return Err(GeometryError::NumericalFailure(format!(
                "inequality violated by {slack:e} at the returned point"
            )));
        }
    }
    for (row, &fi) in lp.eq_a.chunks_exact(d).zip(&lp.eq_b) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let slack = ((dot(row, &x) - fi) / norm).abs();
        if slack > ACCEPT_TOL * (1.0 + fi.abs() / norm) {
            return Err(GeometryError::NumericalFailure(format!(
                "equality violated by {slack:e} at the returned point"
            )));
        }
    }
    let value = dot(objective, &x);
    Ok(LpResult {
        status: LpStatus::Optimal,
        value,
        point: Some(x),
    })
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized constraints `rows[i]·z ≤ rhs[i]` in processing order.
struct Constraints {
    d: usize,
    rows: Vec<f64>,
    rhs: Vec<f64>,
}

impl Constraints {
    fn gather(d: usize, rows: &[f64], rhs: &[f64], order: &[usize]) -> Self {
        let mut out = Constraints {
            d,
            rows: Vec::with_capacity(order.len() * d),
            rhs: Vec::with_capacity(order.len()),
        };
        for &i in order {
            out.rows.extend_from_slice(&rows[i * d..(i + 1) * d]);
            out.rhs.push(rhs[i]);
        }
        out
    }

    fn len(&self) -> usize {
        self.rhs.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }
}

/// Optimum of `c·z` over the artificial box alone.
fn box_optimum(c: &[f64]) -> Vec<f64> {
    c.iter()
        .map(|&ci| {
            if ci > 0.0 {
                -BIG
            } else if ci < 0.0 {
                BIG
            } else {
                0.0
            }
        })
        .collect()
}

/// Recursive incremental step. `None` means infeasible.
fn seidel(d: usize, c: &[f64], cons: &Constraints, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if d == 1 {
        return solve_1d(c[0], cons);
    }
    let mut z = box_optimum(c);
    for i in 0..cons.len() {
        let ai = cons.row(i);
        let bi = cons.rhs[i];
        if dot(ai, &z) <= bi + FEAS_TOL {
            continue;
        }
        // The new optimum lies on a_i·z = b_i. Eliminate the pivot coordinate.
        let (k, ak) = ai
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, v)| (k, *v))
            .unwrap();
        let nd = d - 1;
        let project = |row: &[f64], r: f64, out_row: &mut Vec<f64>| -> f64 {
            let f = row[k] / ak;
            out_row.clear();
            for j in 0..d {
                if j != k {
                    out_row.push(row[j] - f * ai[j]);
                }
            }
            r - f * bi
        };
        let mut rows = Vec::with_capacity((i + 2) * nd);
        let mut rhs = Vec::with_capacity(i + 2);
        let mut tmp = Vec::with_capacity(nd);
        let push = |row: &[f64], r: f64, rows: &mut Vec<f64>, rhs: &mut Vec<f64>| -> bool {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < ZERO_ROW {
                return r >= -FEAS_TOL;
            }
            rows.extend(row.iter().map(|v| v / norm));
            rhs.push(r / norm);
            true
        };
        // Box of the eliminated coordinate: ±z_k ≤ BIG with
        // z_k = (b_i - Σ_{j≠k} a_ij z_j) / a_ik.
        for sign in [1.0f64, -1.0] {
            tmp.clear();
            for j in 0..d {
                if j != k {
                    tmp.push(-sign * ai[j] / ak);
                }
            }
            let r = BIG - sign * bi / ak;
            if !push(&tmp, r, &mut rows, &mut rhs) {
                return None;
            }
        }
        let mut order: Vec<usize> = (0..i).collect();
        order.shuffle(rng);
        for &h in &order {
            let r = project(cons.row(h), cons.rhs[h], &mut tmp);
            if !push(&tmp, r, &mut rows, &mut rhs) {
                return None;
            }
        }
        let f = c[k] / ak;
        let c_red: Vec<f64> = (0..d).filter(|&j| j != k).map(|j| c[j] - f * ai[j]).collect();
        let sub = Constraints { d: nd, rows, rhs };
        let zr = seidel(nd, &c_red, &sub, rng)?;
        let mut lifted = Vec::with_capacity(d);
        let mut acc = bi;
        let mut it = zr.iter();
        for j in 0..d {
            if j == k {
                lifted.push(0.0);
            } else {
                let v = *it.next().unwrap();
                acc -= ai[j] * v;
                lifted.push(v);
            }
        }
        lifted[k] = acc / ak;
        z = lifted;
    }
    Some(z)
}

fn solve_1d(c: f64, cons: &Constraints) -> Option<Vec<f64>> {
    let mut lo = -BIG;
    let mut hi = BIG;
    for i in 0..cons.len() {
        let a = cons.rows[i];
        let b = cons.rhs[i];
        if a.abs() < ZERO_ROW {
            if b < -FEAS_TOL {
                return None;
            }
            continue;
        }
        let bound = b / a;
        if a > 0.0 {
            hi = hi.min(bound);
        } else {
            lo = lo.max(bound);
        }
    }
    if lo > hi {
        if lo - hi > FEAS_TOL {
            return None;
        }
        let mid = 0.5 * (lo + hi);
        return Some(vec![mid]);
    }
    let z = if c > 0.0 {
        lo
    } else if c < 0.0 {
        hi
    } else {
        0.0f64.clamp(lo, hi)
    };
    Some(vec![z])
}
