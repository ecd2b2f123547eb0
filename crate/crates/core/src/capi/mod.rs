//! Maximal admissible Lyapunov levels.
//!
//! For a reference `r` with equilibrium `x̄ = E·r`, the level `Γ*(r)` is the
//! smallest value of `V(x, r) = V'(x - x̄)` on the boundary `{c = 0}` of any
//! constraint. It is found by one small LP per pair of Lyapunov leaf and
//! constraint piece; the leaf region lives in shifted coordinates and is
//! translated by `x̄` before intersecting with the constraint piece.
//!
//! Pairs are skipped without changing the result by
//! * PS1: a first-layer neuron hyperplane that misses a constraint piece fixes
//!   the bit every intersecting leaf must carry;
//! * PS2: a subtree whose lower bound exceeds the best level found so far;
//! * the box screen: interval bounds of a subtree and a piece that cannot meet.
//!
//! The network is only known on the tree domain `D`, so by default the level
//! is also capped by the minimum of `V'` on `∂D` (the domain guard), keeping
//! the certified sublevel set inside `D + x̄`.

mod oracle;

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, hyperplane_cuts, Halfspace, Hyperplane, Lp, LpStatus, Polytope, Side, FEAS_TOL};
use crate::partition::PartitionTree;
use crate::pwanet::{pack_bits, AffinePiece, PwaNetwork, ReferenceMap};

pub use oracle::{grid_oracle_gamma, GridOracle};

/// `|c(x̄)|` below this counts as the equilibrium sitting on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;
/// Constraint membership tolerance for [`PwaConstraint::eval`].
pub const EVAL_TOL: f64 = 1e-9;
/// Binding name reported when the domain guard is the active limit.
pub const DOMAIN_GUARD: &str = "domain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintPiece {
    pub region: Polytope,
    pub piece: AffinePiece,
}

/// Continuous PWA constraint `c(x) ≤ 0` given piece by piece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PwaConstraint {
    pub name: String,
    pub pieces: Vec<ConstraintPiece>,
}

impl PwaConstraint {
    pub fn new(name: impl Into<String>, pieces: Vec<ConstraintPiece>) -> Result<Self> {
        let name = name.into();
        let Some(first) = pieces.first() else {
            return Err(Error::Input(format!("constraint `{name}` has no pieces")));
        };
        let n = first.region.dim();
        for p in &pieces {
            if p.region.dim() != n || p.piece.dim() != n {
                return Err(Error::Input(format!(
                    "constraint `{name}`: pieces disagree on dimension"
                )));
            }
            if p.piece
                .c
                .iter()
                .chain(std::iter::once(&p.piece.d))
                .any(|v| !v.is_finite())
            {
                return Err(Error::Input(format!("constraint `{name}`: non-finite coefficient")));
            }
        }
        Ok(PwaConstraint { name, pieces })
    }

    /// A single affine piece over `domain`.
    pub fn affine(name: impl Into<String>, piece: AffinePiece, domain: &Polytope) -> Result<Self> {
        Self::new(
            name,
            vec![ConstraintPiece {
                region: domain.clone(),
                piece,
            }],
        )
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].region.dim()
    }

    /// `c(x)` from the first piece containing `x`; `None` outside every piece.
    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        self.pieces
            .iter()
            .find(|p| p.region.contains(x, EVAL_TOL))
            .map(|p| p.piece.eval(x))
    }

    /// `c(x)`, extending by the nearest piece outside the constraint domain.
    pub fn eval_extended(&self, x: &[f64]) -> f64 {
        if let Some(v) = self.eval(x) {
            return v;
        }
        let worst = |p: &Polytope| {
            p.halfspaces()
                .iter()
                .map(|h| h.slack(x) / h.norm())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        self.pieces
            .iter()
            .min_by(|a, b| worst(&a.region).total_cmp(&worst(&b.region)))
            .unwrap()
            .piece
            .eval(x)
    }

    /// Maximum of `c` over all pieces (one LP per piece).
    pub fn max_value(&self) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for (k, p) in self.pieces.iter().enumerate() {
            let r = p
                .region
                .to_lp()
                .maximize(&p.piece.c)
                .map_err(|e| Error::lp(format!("max of `{}` piece {k}", self.name), e))?;
            match r.status {
                LpStatus::Optimal => best = best.max(r.value + p.piece.d),
                LpStatus::Unbounded => return Ok(f64::INFINITY),
                LpStatus::Infeasible => {}
            }
        }
        Ok(best)
    }
}

fn bound_constraint(domain: &Polytope, i: usize, bound: f64, upper: bool) -> Result<PwaConstraint> {
    let n = domain.dim();
    let mut c = vec![0.0; n];
    c[i] = if upper { 1.0 } else { -1.0 };
    let piece = AffinePiece::new(c.clone(), if upper { -bound } else { bound });
    let name = if upper {
        format!("x{i} <= {bound}")
    } else {
        format!("x{i} >= {bound}")
    };
    let plane = Hyperplane::new(c, -piece.d)?;
    let pieces = match hyperplane_cuts(domain, &plane)? {
        Side::Cuts => vec![
            ConstraintPiece {
                region: domain.clone().with(plane.above())?,
                piece: piece.clone(),
            },
            ConstraintPiece {
                region: domain.clone().with(plane.below())?,
                piece,
            },
        ],
        _ => vec![ConstraintPiece {
            region: domain.clone(),
            piece,
        }],
    };
    PwaConstraint::new(name, pieces)
}

/// One constraint per present bound, `x_i - upper_i ≤ 0` or `lower_i - x_i ≤ 0`.
///
/// Each bound is split into its inadmissible and admissible part of `domain`
/// (the state region the constraints are evaluated on); both parts carry the
/// same affine function.
pub fn box_constraints(lower: &[Option<f64>], upper: &[Option<f64>], domain: &Polytope) -> Result<Vec<PwaConstraint>> {
    let n = domain.dim();
    if lower.len() != n || upper.len() != n {
        return Err(Error::Input(format!("bounds must have {n} entries")));
    }
    let mut out = Vec::new();
    for i in 0..n {
        if let (Some(l), Some(u)) = (lower[i], upper[i]) {
            if !(l < u) {
                return Err(Error::Input(format!("inverted bounds on x{i}: {l} ≥ {u}")));
            }
        }
        if let Some(u) = upper[i] {
            out.push(bound_constraint(domain, i, u, true)?);
        }
        if let Some(l) = lower[i] {
            out.push(bound_constraint(domain, i, l, false)?);
        }
    }
    Ok(out)
}

/// First-layer bits that no leaf meeting a given constraint piece can carry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InactiveSet {
    /// `(neuron, forbidden bit)`
    pub pairs: Vec<(usize, bool)>,
}

impl InactiveSet {
    /// True iff the first-layer bits match a recorded pair.
    pub fn excludes(&self, bits: &[bool]) -> bool {
        self.pairs.iter().any(|&(j, b)| bits[j] == b)
    }

    fn masks(&self, width: usize) -> (Vec<u64>, Vec<u64>) {
        let mut on = vec![false; width];
        let mut off = vec![false; width];
        for &(j, b) in &self.pairs {
            if b {
                on[j] = true;
            } else {
                off[j] = true;
            }
        }
        (pack_bits(&on), pack_bits(&off))
    }
}

/// Records `(j, ¬side)` for every first-layer plane that does not cut `pc`.
pub fn find_inactive_hyperplanes(planes: &[Option<Hyperplane>], pc: &Polytope) -> Result<InactiveSet> {
    let mut pairs = Vec::new();
    for (j, h) in planes.iter().enumerate() {
        let Some(h) = h else { continue };
        match hyperplane_cuts(pc, h)? {
            Side::Above => pairs.push((j, false)),
            Side::Below => pairs.push((j, true)),
            Side::Cuts => {}
        }
    }
    Ok(InactiveSet { pairs })
}

/// Minimizes `V` over `(region_v + x̄) ∩ region_c ∩ {c = 0}`; the value
/// includes the shift, i.e. it is `C_V (x - x̄) + d_V` at the optimum.
pub fn pair_lp(
    piece_v: &AffinePiece,
    region_v: &Polytope,
    piece_c: &AffinePiece,
    region_c: &Polytope,
    x_bar: &[f64],
) -> Result<crate::geometry::LpResult> {
    let mut lp = Lp::new(region_v.dim());
    let neg: Vec<f64> = x_bar.iter().map(|v| -v).collect();
    region_v.push_rows(&mut lp, Some(&neg));
    region_c.push_rows(&mut lp, None);
    lp.push_eq(&piece_c.c, -piece_c.d);
    let mut r = lp.minimize(&piece_v.c)?;
    if r.is_optimal() {
        r.value += piece_v.d - dot(&piece_v.c, x_bar);
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelOptions {
    pub use_ps1: bool,
    pub use_ps2: bool,
    /// Skip pairs whose interval hulls cannot meet.
    pub bbox_screen: bool,
    /// Cap the level by the minimum of `V'` on the domain boundary.
    pub domain_guard: bool,
}

impl Default for LevelOptions {
    fn default() -> Self {
        LevelOptions {
            use_ps1: true,
            use_ps2: true,
            bbox_screen: true,
            domain_guard: true,
        }
    }
}

impl LevelOptions {
    /// No pruning of any kind; the domain guard stays on.
    pub fn unpruned() -> Self {
        LevelOptions {
            use_ps1: false,
            use_ps2: false,
            bbox_screen: false,
            domain_guard: true,
        }
    }

    pub fn with_ps(use_ps1: bool, use_ps2: bool) -> Self {
        LevelOptions {
            use_ps1,
            use_ps2,
            ..Self::unpruned()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    /// Leaf × piece pairs considered.
    pub pairs: usize,
    /// Pair LPs solved.
    pub pair_lps: usize,
    /// LPs spent on query-dependent setup (PS1 hyperplane tests).
    pub setup_lps: usize,
    /// First-layer hyperplanes found inactive on some constraint piece (PS1 only).
    pub inactive_hyperplanes: usize,
    pub pruned_ps1: usize,
    pub pruned_ps2: usize,
    pub pruned_bbox: usize,
    pub infeasible: usize,
}

impl LevelStats {
    pub fn total_lps(&self) -> usize {
        self.pair_lps + self.setup_lps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    /// `+∞` when no constraint or guard limits the level.
    pub gamma_star: f64,
    pub argmin: Option<Vec<f64>>,
    pub binding: Option<String>,
    /// Index of the binding constraint (`None` for the domain guard).
    pub binding_index: Option<usize>,
    pub stats: LevelStats,
    pub seconds: f64,
}

impl LevelResult {
    pub fn is_unbounded(&self) -> bool {
        self.gamma_star == f64::INFINITY
    }

    fn start() -> Self {
        LevelResult {
            gamma_star: f64::INFINITY,
            argmin: None,
            binding: None,
            binding_index: None,
            stats: LevelStats::default(),
            seconds: 0.0,
        }
    }

    fn offer(&mut self, value: f64, x: Vec<f64>, name: &str, index: Option<usize>) {
        let better = value < self.gamma_star
            || (value == self.gamma_star
                && match (index, self.binding_index) {
                    (Some(a), Some(b)) => a < b,
                    _ => false,
                });
        if better {
            self.gamma_star = value;
            self.argmin = Some(x);
            self.binding = Some(name.to_string());
            self.binding_index = index;
        }
    }
}

/// Constraint piece that has at least one inadmissible state.
#[derive(Clone, Debug)]
struct ActivePiece {
    constraint: usize,
    region: Polytope,
    piece: AffinePiece,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Interval-hull test: can `{c·x + d = 0}` meet the box `[lo, hi]`?
fn affine_meets_box(c: &[f64], d: f64, lo: &[f64], hi: &[f64]) -> bool {
    let (mut mn, mut mx) = (d, d);
    for ((&ci, &l), &h) in c.iter().zip(lo).zip(hi) {
        if ci >= 0.0 {
            mn += ci * l;
            mx += ci * h;
        } else {
            mn += ci * h;
            mx += ci * l;
        }
    }
    let slack = FEAS_TOL * (1.0 + c.iter().map(|v| v.abs()).sum::<f64>());
    mn <= slack && mx >= -slack
}

/// One pass of interval propagation of `c·x + d = 0` through the box; a
/// coordinate is only tightened, never emptied.
fn tighten_on_plane(c: &[f64], d: f64, lo: &mut [f64], hi: &mut [f64]) {
    let (mut smin, mut smax) = (d, d);
    for i in 0..c.len() {
        smin += (c[i] * lo[i]).min(c[i] * hi[i]);
        smax += (c[i] * lo[i]).max(c[i] * hi[i]);
    }
    for j in 0..c.len() {
        if c[j].abs() < 1e-12 {
            continue;
        }
        // rest = c·x + d - c_j x_j lies in [smin - min_j, smax - max_j]
        let (mj, xj) = ((c[j] * lo[j]).min(c[j] * hi[j]), (c[j] * lo[j]).max(c[j] * hi[j]));
        let (rmin, rmax) = (smin - mj, smax - xj);
        let (a, b) = (-rmax / c[j], -rmin / c[j]);
        let (nl, nh) = if a <= b { (a, b) } else { (b, a) };
        let (nl, nh) = (lo[j].max(nl), hi[j].min(nh));
        if nl <= nh {
            lo[j] = nl;
            hi[j] = nh;
        }
    }
}

fn boxes_meet(alo: &[f64], ahi: &[f64], blo: &[f64], bhi: &[f64], shift: &[f64]) -> bool {
    (0..alo.len()).all(|i| alo[i] + shift[i] <= bhi[i] + FEAS_TOL && blo[i] <= ahi[i] + shift[i] + FEAS_TOL)
}

#[derive(Clone, Debug)]
struct Ps1Cache {
    x_bar: Vec<f64>,
    /// Per active piece: (forbid bit 1, forbid bit 0).
    masks: Vec<(Vec<u64>, Vec<u64>)>,
    /// Total (hyperplane, side) exclusions over the active pieces.
    inactive: usize,
}

#[derive(Clone, Debug)]
struct GuardLevel {
    value: f64,
    /// Minimizer in shifted coordinates.
    argmin: Vec<f64>,
}

/// Answers repeated level queries against one tree and constraint set.
///
/// Everything independent of the reference (constraint filtering, interval
/// hulls of the tree nodes, the domain guard) is computed once here.
#[derive(Clone, Debug)]
pub struct LevelSolver<'a> {
    tree: &'a PartitionTree,
    emap: ReferenceMap,
    constraints: Vec<PwaConstraint>,
    active: Vec<ActivePiece>,
    first_planes: Vec<Option<Hyperplane>>,
    first_width: usize,
    /// First-layer mask per node (empty for the root).
    node_masks: Vec<Vec<u64>>,
    node_lo: Vec<Vec<f64>>,
    node_hi: Vec<Vec<f64>>,
    leaf_counts: Vec<usize>,
    guard: Option<GuardLevel>,
    /// LPs solved during construction.
    pub construction_lps: usize,
    ps1_cache: Option<Ps1Cache>,
    lp: Lp,
}

impl<'a> LevelSolver<'a> {
    pub fn new(
        tree: &'a PartitionTree,
        net: &PwaNetwork,
        emap: &ReferenceMap,
        constraints: &[PwaConstraint],
    ) -> Result<Self> {
        let n = tree.dim();
        if net.input_dim() != n || emap.state_dim() != n {
            return Err(Error::Input(format!(
                "tree, network and reference map disagree on the state dimension ({n}, {}, {})",
                net.input_dim(),
                emap.state_dim()
            )));
        }
        if tree.num_leaves() == 0 {
            return Err(Error::Input("partition tree has no leaves".into()));
        }
        if !tree.is_annotated() {
            return Err(Error::Input("partition tree is not annotated".into()));
        }
        let mut construction_lps = 0;
        let mut active = Vec::new();
        for (ci, c) in constraints.iter().enumerate() {
            if c.dim() != n {
                return Err(Error::Input(format!(
                    "constraint `{}` has dimension {}, expected {n}",
                    c.name,
                    c.dim()
                )));
            }
            for (k, p) in c.pieces.iter().enumerate() {
                let lp = p.region.to_lp();
                let mx = lp
                    .maximize(&p.piece.c)
                    .map_err(|e| Error::lp(format!("filtering `{}` piece {k}", c.name), e))?;
                construction_lps += 1;
                let violated = match mx.status {
                    LpStatus::Optimal => mx.value + p.piece.d > FEAS_TOL,
                    LpStatus::Unbounded => true,
                    LpStatus::Infeasible => false,
                };
                if !violated {
                    continue;
                }
                let region = p
                    .region
                    .without_redundant()
                    .map_err(|e| Error::lp(format!("reducing `{}` piece {k}", c.name), e))?;
                construction_lps += p.region.halfspaces().len();
                let (lo, hi) = region.bounding_box()?;
                construction_lps += 2 * n;
                active.push(ActivePiece {
                    constraint: ci,
                    region,
                    piece: p.piece.clone(),
                    lo,
                    hi,
                });
            }
        }
        let first_planes: Vec<Option<Hyperplane>> = net.first_layer_planes().into_iter().map(|h| h.ok()).collect();
        let first_width = first_planes.len();
        let nodes = tree.nodes();
        let node_masks = nodes
            .iter()
            .map(|nd| nd.ap_prefix.first().map_or_else(Vec::new, |b| pack_bits(b)))
            .collect();
        let mut node_lo = vec![vec![f64::INFINITY; n]; nodes.len()];
        let mut node_hi = vec![vec![f64::NEG_INFINITY; n]; nodes.len()];
        let mut leaf_counts = vec![0usize; nodes.len()];
        for &id in tree.leaf_ids() {
            let (lo, hi) = nodes[id].region.bounding_box()?;
            construction_lps += 2 * n;
            node_lo[id] = lo;
            node_hi[id] = hi;
            leaf_counts[id] = 1;
        }
        for id in (0..nodes.len()).rev() {
            if nodes[id].is_leaf() {
                continue;
            }
            for &c in &nodes[id].children {
                leaf_counts[id] += leaf_counts[c];
                for i in 0..n {
                    node_lo[id][i] = node_lo[id][i].min(node_lo[c][i]);
                    node_hi[id][i] = node_hi[id][i].max(node_hi[c][i]);
                }
            }
        }
        let mut solver = LevelSolver {
            tree,
            emap: emap.clone(),
            constraints: constraints.to_vec(),
            active,
            first_planes,
            first_width,
            node_masks,
            node_lo,
            node_hi,
            leaf_counts,
            guard: None,
            construction_lps,
            ps1_cache: None,
            lp: Lp::new(n),
        };
        solver.guard = solver.domain_guard_level()?;
        Ok(solver)
    }

    pub fn tree(&self) -> &PartitionTree {
        self.tree
    }

    pub fn constraints(&self) -> &[PwaConstraint] {
        &self.constraints
    }

    pub fn emap(&self) -> &ReferenceMap {
        &self.emap
    }

    /// Minimum of `V'` over the domain boundary, `None` if the domain has no facets.
    pub fn guard_level(&self) -> Option<f64> {
        self.guard.as_ref().map(|g| g.value)
    }

    fn domain_guard_level(&mut self) -> Result<Option<GuardLevel>> {
        let tree = self.tree;
        let n = tree.dim();
        let mut best: Option<GuardLevel> = None;
        for h in tree.domain().halfspaces() {
            for &id in tree.leaf_ids() {
                let (lo, hi) = (&self.node_lo[id], &self.node_hi[id]);
                if !affine_meets_box(&h.normal, -h.offset, lo, hi) {
                    continue;
                }
                let node = tree.node(id);
                let piece = &node.leaf.as_ref().unwrap().piece;
                self.lp.clear(n);
                node.region.push_rows(&mut self.lp, None);
                self.lp.push_eq(&h.normal, h.offset);
                let r = self
                    .lp
                    .minimize(&piece.c)
                    .map_err(|e| Error::lp(format!("domain guard on leaf {id}"), e))?;
                self.construction_lps += 1;
                if let (LpStatus::Optimal, Some(x)) = (r.status, r.point) {
                    let v = r.value + piece.d;
                    if best.as_ref().is_none_or(|b| v < b.value) {
                        best = Some(GuardLevel { value: v, argmin: x });
                    }
                }
            }
        }
        Ok(best)
    }

    fn equilibrium(&self, r: &[f64]) -> Result<Vec<f64>> {
        if r.len() != self.emap.reference_dim() {
            return Err(Error::Input(format!(
                "reference has {} entries, expected {}",
                r.len(),
                self.emap.reference_dim()
            )));
        }
        Ok(self.emap.equilibrium(r))
    }

    /// `Some(0)` when the equilibrium is on a constraint boundary, an error when it is inadmissible.
    fn check_equilibrium(&self, x_bar: &[f64]) -> Result<Option<(usize, f64)>> {
        let mut on_boundary = None;
        for (ci, c) in self.constraints.iter().enumerate() {
            let v = c.eval(x_bar).ok_or_else(|| {
                Error::Input(format!(
                    "equilibrium {x_bar:?} lies outside the domain of constraint `{}`",
                    c.name
                ))
            })?;
            if v > BOUNDARY_TOL {
                return Err(Error::InfeasibleReference {
                    constraint: c.name.clone(),
                    value: v,
                });
            }
            if v.abs() <= BOUNDARY_TOL && on_boundary.is_none() {
                on_boundary = Some((ci, v));
            }
        }
        Ok(on_boundary)
    }

    fn ps1_masks(&mut self, x_bar: &[f64], stats: &mut LevelStats) -> Result<()> {
        if let Some(c) = self.ps1_cache.as_ref().filter(|c| c.x_bar == x_bar) {
            stats.inactive_hyperplanes = c.inactive;
            return Ok(());
        }
        let planes: Vec<Option<Hyperplane>> = self
            .first_planes
            .iter()
            .map(|h| h.as_ref().map(|h| h.translated(x_bar)))
            .collect();
        let live = planes.iter().filter(|h| h.is_some()).count();
        let mut masks = Vec::with_capacity(self.active.len());
        let mut inactive = 0;
        for p in &self.active {
            let set = find_inactive_hyperplanes(&planes, &p.region)?;
            stats.setup_lps += 2 * live;
            inactive += set.pairs.len();
            masks.push(set.masks(self.first_width));
        }
        stats.inactive_hyperplanes = inactive;
        self.ps1_cache = Some(Ps1Cache {
            x_bar: x_bar.to_vec(),
            masks,
            inactive,
        });
        Ok(())
    }

    /// Computes `Γ*(r)` over the solver's constraints.
    pub fn max_admissible_level(&mut self, r: &[f64], opts: LevelOptions) -> Result<LevelResult> {
        let start = Instant::now();
        let x_bar = self.equilibrium(r)?;
        let mut out = LevelResult::start();
        if let Some((ci, _)) = self.check_equilibrium(&x_bar)? {
            out.gamma_star = 0.0;
            out.argmin = Some(x_bar);
            out.binding = Some(self.constraints[ci].name.clone());
            out.binding_index = Some(ci);
            out.seconds = start.elapsed().as_secs_f64();
            return Ok(out);
        }
        self.seed_guard(&mut out, &x_bar, opts);
        if !self.active.is_empty() {
            if opts.use_ps1 {
                self.ps1_masks(&x_bar, &mut out.stats)?;
            }
            self.traverse(&x_bar, opts, &mut out, Target::Pieces)?;
        }
        out.seconds = start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Level for the convex admissible set `{a·x ≤ b}` with one LP per leaf
    /// and facet, each restricted to the admissible polytope.
    pub fn max_admissible_level_convex(
        &mut self,
        a_c: &[Vec<f64>],
        b_c: &[f64],
        r: &[f64],
        opts: LevelOptions,
    ) -> Result<LevelResult> {
        let start = Instant::now();
        let n = self.tree.dim();
        if a_c.len() != b_c.len() || a_c.iter().any(|row| row.len() != n) {
            return Err(Error::Input(
                "admissible polytope rows do not match the state dimension".into(),
            ));
        }
        let x_bar = self.equilibrium(r)?;
        let mut out = LevelResult::start();
        for (f, (row, &b)) in a_c.iter().zip(b_c).enumerate() {
            let v = dot(row, &x_bar) - b;
            if v > BOUNDARY_TOL {
                return Err(Error::InfeasibleReference {
                    constraint: format!("facet {f}"),
                    value: v,
                });
            }
        }
        if let Some(f) = a_c
            .iter()
            .zip(b_c)
            .position(|(row, &b)| (dot(row, &x_bar) - b).abs() <= BOUNDARY_TOL)
        {
            out.gamma_star = 0.0;
            out.argmin = Some(x_bar);
            out.binding = Some(format!("facet {f}"));
            out.binding_index = Some(f);
            out.seconds = start.elapsed().as_secs_f64();
            return Ok(out);
        }
        self.seed_guard(&mut out, &x_bar, opts);
        self.traverse(&x_bar, opts, &mut out, Target::Facets { a: a_c, b: b_c })?;
        out.seconds = start.elapsed().as_secs_f64();
        Ok(out)
    }

    fn seed_guard(&self, out: &mut LevelResult, x_bar: &[f64], opts: LevelOptions) {
        if let (true, Some(g)) = (opts.domain_guard, &self.guard) {
            let x = g.argmin.iter().zip(x_bar).map(|(y, s)| y + s).collect();
            out.offer(g.value, x, DOMAIN_GUARD, None);
        }
    }

    fn traverse(&mut self, x_bar: &[f64], opts: LevelOptions, out: &mut LevelResult, target: Target<'_>) -> Result<()> {
        let tree = self.tree;
        let n = tree.dim();
        let neg: Vec<f64> = x_bar.iter().map(|v| -v).collect();
        let all: Vec<usize> = match target {
            Target::Pieces => (0..self.active.len()).collect(),
            Target::Facets { a, .. } => (0..a.len()).collect(),
        };
        out.stats.pairs += tree.num_leaves() * all.len();
        let mut level: Vec<(usize, Vec<usize>)> = vec![(0, all)];
        let mut queue: VecDeque<(usize, Vec<usize>)> = VecDeque::new();
        while !level.is_empty() {
            if opts.use_ps2 {
                level.sort_by(|a, b| {
                    tree.node(a.0)
                        .v_lower
                        .unwrap()
                        .total_cmp(&tree.node(b.0).v_lower.unwrap())
                });
            }
            queue.extend(level.drain(..));
            while let Some((id, mut pieces)) = queue.pop_front() {
                let node = tree.node(id);
                let count = self.leaf_counts[id];
                if opts.use_ps2 && node.v_lower.unwrap() > out.gamma_star {
                    out.stats.pruned_ps2 += count * pieces.len();
                    continue;
                }
                if id != 0 {
                    if opts.bbox_screen {
                        let before = pieces.len();
                        pieces.retain(|&k| self.box_meets(id, k, x_bar, &target));
                        out.stats.pruned_bbox += count * (before - pieces.len());
                    }
                    if opts.use_ps1 && node.layer == 1 {
                        if let Target::Pieces = target {
                            let cache = self.ps1_cache.as_ref().expect("PS1 masks prepared");
                            let mask = &self.node_masks[id];
                            let before = pieces.len();
                            pieces.retain(|&k| {
                                let (on, off) = &cache.masks[k];
                                !mask
                                    .iter()
                                    .zip(on)
                                    .zip(off)
                                    .any(|((m, on), off)| m & on != 0 || !m & off != 0)
                            });
                            out.stats.pruned_ps1 += count * (before - pieces.len());
                        }
                    }
                }
                if pieces.is_empty() {
                    continue;
                }
                if !node.is_leaf() {
                    for &c in &node.children {
                        level.push((c, pieces.clone()));
                    }
                    continue;
                }
                let vpiece = &node.leaf.as_ref().unwrap().piece;
                let shift = dot(&vpiece.c, x_bar);
                for &k in &pieces {
                    if opts.use_ps2 && node.v_lower.unwrap() > out.gamma_star {
                        out.stats.pruned_ps2 += 1;
                        continue;
                    }
                    if opts.bbox_screen && self.box_value_bound(id, k, x_bar, &target) > out.gamma_star {
                        out.stats.pruned_bbox += 1;
                        continue;
                    }
                    self.lp.clear(n);
                    node.region.push_rows(&mut self.lp, Some(&neg));
                    let (name_idx, name) = match target {
                        Target::Pieces => {
                            let p = &self.active[k];
                            p.region.push_rows(&mut self.lp, None);
                            self.lp.push_eq(&p.piece.c, -p.piece.d);
                            (Some(p.constraint), self.constraints[p.constraint].name.clone())
                        }
                        Target::Facets { a, b } => {
                            for (row, &bb) in a.iter().zip(b) {
                                self.lp.push_le(row, bb);
                            }
                            self.lp.push_eq(&a[k], b[k]);
                            (Some(k), format!("facet {k}"))
                        }
                    };
                    let res = self
                        .lp
                        .minimize(&vpiece.c)
                        .map_err(|e| Error::lp(format!("pair LP (leaf {id}, {name})"), e))?;
                    out.stats.pair_lps += 1;
                    match (res.status, res.point) {
                        (LpStatus::Optimal, Some(x)) => {
                            let v = res.value - shift + vpiece.d;
                            out.offer(v, x, &name, name_idx);
                        }
                        _ => out.stats.infeasible += 1,
                    }
                }
            }
        }
        Ok(())
    }

    /// Interval lower bound of the leaf's `V` over its box intersected with the
    /// piece box and the boundary plane of the pair LP.
    fn box_value_bound(&self, id: usize, k: usize, x_bar: &[f64], target: &Target<'_>) -> f64 {
        let piece = &self.tree.node(id).leaf.as_ref().unwrap().piece;
        let n = piece.c.len();
        let mut lo: Vec<f64> = (0..n).map(|i| self.node_lo[id][i] + x_bar[i]).collect();
        let mut hi: Vec<f64> = (0..n).map(|i| self.node_hi[id][i] + x_bar[i]).collect();
        let (c, d) = match target {
            Target::Pieces => {
                let p = &self.active[k];
                for i in 0..n {
                    lo[i] = lo[i].max(p.lo[i]);
                    hi[i] = hi[i].min(p.hi[i]);
                }
                (&p.piece.c, p.piece.d)
            }
            Target::Facets { a, b } => (&a[k], -b[k]),
        };
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            // boxes touch only within tolerance
            return f64::NEG_INFINITY;
        }
        tighten_on_plane(c, d, &mut lo, &mut hi);
        let mut bound = piece.d;
        for i in 0..n {
            let (l, h) = (lo[i] - x_bar[i], hi[i] - x_bar[i]);
            bound += (piece.c[i] * l).min(piece.c[i] * h);
        }
        bound - FEAS_TOL * (1.0 + bound.abs())
    }

    fn box_meets(&self, id: usize, k: usize, x_bar: &[f64], target: &Target<'_>) -> bool {
        let lo: Vec<f64> = self.node_lo[id].iter().zip(x_bar).map(|(a, s)| a + s).collect();
        let hi: Vec<f64> = self.node_hi[id].iter().zip(x_bar).map(|(a, s)| a + s).collect();
        match target {
            Target::Pieces => {
                let p = &self.active[k];
                boxes_meet(&self.node_lo[id], &self.node_hi[id], &p.lo, &p.hi, x_bar)
                    && affine_meets_box(&p.piece.c, p.piece.d, &lo, &hi)
            }
            Target::Facets { a, b } => affine_meets_box(&a[k], -b[k], &lo, &hi),
        }
    }
}

#[derive(Clone, Copy)]
enum Target<'t> {
    Pieces,
    Facets { a: &'t [Vec<f64>], b: &'t [f64] },
}

/// One-shot `Γ*(r)`; builds a [`LevelSolver`] internally.
pub fn max_admissible_level(
    tree: &PartitionTree,
    net: &PwaNetwork,
    constraints: &[PwaConstraint],
    r: &[f64],
    emap: &ReferenceMap,
    opts: LevelOptions,
) -> Result<LevelResult> {
    LevelSolver::new(tree, net, emap, constraints)?.max_admissible_level(r, opts)
}

/// One-shot convex-set level; see [`LevelSolver::max_admissible_level_convex`].
pub fn max_admissible_level_convex(
    tree: &PartitionTree,
    net: &PwaNetwork,
    a_c: &[Vec<f64>],
    b_c: &[f64],
    r: &[f64],
    emap: &ReferenceMap,
    opts: LevelOptions,
) -> Result<LevelResult> {
    LevelSolver::new(tree, net, emap, &[])?.max_admissible_level_convex(a_c, b_c, r, opts)
}

/// The halfspaces of `poly` as `(A, b)`.
pub fn halfspace_matrix(poly: &Polytope) -> (Vec<Vec<f64>>, Vec<f64>) {
    poly.halfspaces()
        .iter()
        .map(|h: &Halfspace| (h.normal.clone(), h.offset))
        .unzip()
}
