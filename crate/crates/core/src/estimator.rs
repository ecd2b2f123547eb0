//! Learned level estimator `E(r)` with exact verification and a
//! counterexample-guided training loop.
//!
//! Verification enumerates every triple (Lyapunov leaf, estimator leaf,
//! constraint piece) and solves one LP in `z = (x, r)`: the Lyapunov leaf
//! constrains the pullback `y = x − E·r`, the estimator leaf constrains `r`,
//! and the sublevel condition `V(y) ≤ E(r)` is affine on the triple. The
//! maximum of the constraint over all feasible triples is the exact worst case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::capi::{LevelOptions, LevelSolver, PwaConstraint};
use crate::error::{Error, Result};
use crate::geometry::{Lp, LpStatus, Polytope, FEAS_TOL};
use crate::io::{network_from_json, network_to_json, sha256_hex};
use crate::optim::Adam;
use crate::partition::{build_partition_tree, PartitionTree};
use crate::pwanet::{Activation, AffinePiece, Layer, PwaNetwork, ReferenceMap};

/// Largest worst-case constraint value still reported as verified.
pub const VERIFY_TOL: f64 = 1e-9;

/// Level network `r ↦ max(net(r), 0)` with its training record.
#[derive(Clone, Debug)]
pub struct EstimatorNet {
    pub net: PwaNetwork,
    pub iterations: usize,
    pub dataset_size: usize,
    pub dataset_hash: String,
    pub verified: bool,
    pub counterexamples: Vec<Counterexample>,
}

/// A reference returned by the verifier together with the violation it certified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub iteration: usize,
    pub r: Vec<f64>,
    pub violation: f64,
}

impl EstimatorNet {
    /// Wraps an untrained network; the flag stays false until verification.
    pub fn new(net: PwaNetwork) -> Result<Self> {
        if net.layers().last().map(|l| l.out_dim()) != Some(1) {
            return Err(Error::Input("estimator must have a scalar output".into()));
        }
        Ok(EstimatorNet {
            net,
            iterations: 0,
            dataset_size: 0,
            dataset_hash: String::new(),
            verified: false,
            counterexamples: Vec::new(),
        })
    }

    pub fn reference_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Clamped level; never negative.
    pub fn eval(&self, r: &[f64]) -> f64 {
        self.net.eval(r).max(0.0)
    }

    pub fn metadata(&self) -> Value {
        json!({
            "kind": "level_estimator",
            "verified": self.verified,
            "iterations": self.iterations,
            "dataset_size": self.dataset_size,
            "dataset_hash": self.dataset_hash,
            "counterexamples": self.counterexamples,
        })
    }

    pub fn to_json(&self, extra: Value) -> Result<String> {
        let mut meta = self.metadata();
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        network_to_json(&self.net, meta)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let (net, meta) = network_from_json(text)?;
        let mut e = EstimatorNet::new(net)?;
        e.verified = meta["verified"].as_bool().unwrap_or(false);
        e.iterations = meta["iterations"].as_u64().unwrap_or(0) as usize;
        e.dataset_size = meta["dataset_size"].as_u64().unwrap_or(0) as usize;
        e.dataset_hash = meta["dataset_hash"].as_str().unwrap_or_default().to_string();
        if let Some(c) = meta.get("counterexamples") {
            e.counterexamples = serde_json::from_value(c.clone()).unwrap_or_default();
        }
        Ok(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Pretrain,
    Counterexample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub r: Vec<f64>,
    /// Maximal admissible level at `r`.
    pub gamma: f64,
    pub source: SampleSource,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn push(&mut self, r: Vec<f64>, gamma: f64, source: SampleSource) -> Result<()> {
        if !(gamma >= 0.0) {
            return Err(Error::Input(format!("level oracle returned {gamma} at r = {r:?}")));
        }
        self.samples.push(Sample { r, gamma, source });
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.samples)
                .expect("samples serialize")
                .as_bytes(),
        )
    }
}

fn box_hull(poly: &Polytope) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lo, hi) = poly.bounding_box()?;
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return Err(Error::Input("reference domain is unbounded".into()));
    }
    Ok((lo, hi))
}

/// `n` uniform references over the box hull of `r_domain`, rejecting those
/// outside it, labelled by `oracle`. Deterministic per seed.
pub fn pretrain_dataset(
    oracle: &mut dyn FnMut(&[f64]) -> Result<f64>,
    r_domain: &Polytope,
    n: usize,
    seed: u64,
) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::Input("pretrain set needs at least one sample".into()));
    }
    let (lo, hi) = box_hull(r_domain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainingSet::default();
    let mut tries = 0usize;
    while set.len() < n {
        tries += 1;
        if tries > 1000 * n {
            return Err(Error::Input(
                "reference domain has negligible volume in its box hull".into(),
            ));
        }
        let r: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { rng.gen_range(l..=h) } else { l })
            .collect();
        if !r_domain.contains(&r, FEAS_TOL) {
            continue;
        }
        let g = oracle(&r)?;
        set.push(r, g, SampleSource::Pretrain)?;
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    /// Largest constraint value in the verified set; `None` when no
    /// constraint piece with inadmissible states meets it.
    pub opt_value: Option<f64>,
    pub witness_x: Option<Vec<f64>>,
    pub witness_r: Option<Vec<f64>>,
    /// Name of the constraint attaining `opt_value`.
    pub binding: Option<String>,
    /// `max_r E(r) − Γ_D`, where `Γ_D` is the smallest `V` on the domain
    /// boundary; positive values let the sublevel set leave the domain.
    pub guard_excess: Option<f64>,
    /// Reference attaining `guard_excess`.
    pub guard_r: Option<Vec<f64>>,
    pub verified: bool,
    pub triples: usize,
    pub lps: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug)]
struct ActivePiece {
    constraint: usize,
    region: Polytope,
    piece: AffinePiece,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Sub-region of one estimator leaf on which the clamped output is affine.
#[derive(Clone, Debug)]
struct LevelPiece {
    region: Polytope,
    /// Level `c·r + d` (zero on the clamped side).
    level: AffinePiece,
    /// `Some(true)` restricts to `raw ≥ 0`, `Some(false)` to `raw ≤ 0`.
    side: Option<(AffinePiece, bool)>,
    max_level: f64,
    argmax: Vec<f64>,
}

/// Reusable verifier for one Lyapunov tree and constraint set.
#[derive(Clone, Debug)]
pub struct Verifier<'a> {
    tree: &'a PartitionTree,
    emap: ReferenceMap,
    constraints: Vec<PwaConstraint>,
    x_domain: Polytope,
    r_domain: Polytope,
    active: Vec<ActivePiece>,
    leaf_lo: Vec<Vec<f64>>,
    leaf_hi: Vec<Vec<f64>>,
    /// Interval hull of `E·r` over the reference domain.
    er_lo: Vec<f64>,
    er_hi: Vec<f64>,
    guard: Option<f64>,
}

impl<'a> Verifier<'a> {
    /// `guard` is the smallest Lyapunov value on the domain boundary, if the
    /// estimator must also keep its sublevel sets inside the domain.
    pub fn new(
        tree: &'a PartitionTree,
        emap: &ReferenceMap,
        constraints: &[PwaConstraint],
        x_domain: &Polytope,
        r_domain: &Polytope,
        guard: Option<f64>,
    ) -> Result<Self> {
        let n = tree.dim();
        if emap.state_dim() != n || x_domain.dim() != n || r_domain.dim() != emap.reference_dim() {
            return Err(Error::Input("verifier: dimension mismatch".into()));
        }
        let (xl, xh) = x_domain.bounding_box()?;
        if xl.iter().chain(&xh).any(|v| !v.is_finite()) {
            return Err(Error::Input("state domain is unbounded".into()));
        }
        let (rl, rh) = box_hull(r_domain)?;
        let mut active = Vec::new();
        for (ci, c) in constraints.iter().enumerate() {
            if c.dim() != n {
                return Err(Error::Input(format!("constraint `{}` has the wrong dimension", c.name)));
            }
            for p in &c.pieces {
                let region = p.region.intersect(x_domain)?;
                let mx = region
                    .to_lp()
                    .maximize(&p.piece.c)
                    .map_err(|e| Error::lp(format!("filtering `{}`", c.name), e))?;
                let violated = match mx.status {
                    LpStatus::Optimal => mx.value + p.piece.d > FEAS_TOL,
                    LpStatus::Unbounded => true,
                    LpStatus::Infeasible => false,
                };
                if !violated {
                    continue;
                }
                let region = region.without_redundant()?;
                let (lo, hi) = region.bounding_box()?;
                active.push(ActivePiece {
                    constraint: ci,
                    region,
                    piece: p.piece.clone(),
                    lo,
                    hi,
                });
            }
        }
        let mut leaf_lo = Vec::with_capacity(tree.num_leaves());
        let mut leaf_hi = Vec::with_capacity(tree.num_leaves());
        for leaf in tree.leaves() {
            let (lo, hi) = leaf.region.bounding_box()?;
            leaf_lo.push(lo);
            leaf_hi.push(hi);
        }
        let mut er_lo = vec![0.0; n];
        let mut er_hi = vec![0.0; n];
        for i in 0..n {
            for (k, &m) in emap.matrix[i].iter().enumerate() {
                er_lo[i] += (m * rl[k]).min(m * rh[k]);
                er_hi[i] += (m * rl[k]).max(m * rh[k]);
            }
        }
        Ok(Verifier {
            tree,
            emap: emap.clone(),
            constraints: constraints.to_vec(),
            x_domain: x_domain.clone(),
            r_domain: r_domain.clone(),
            active,
            leaf_lo,
            leaf_hi,
            er_lo,
            er_hi,
            guard,
        })
    }

    /// Number of constraint pieces that contain inadmissible states.
    pub fn active_pieces(&self) -> usize {
        self.active.len()
    }

    fn level_pieces(&self, e: &EstimatorNet) -> Result<(Vec<LevelPiece>, usize)> {
        let nr = self.emap.reference_dim();
        let etree = build_partition_tree(&e.net, &self.r_domain)?;
        let mut lps = 0;
        let mut out = Vec::new();
        for leaf in etree.leaves() {
            let raw = &leaf.leaf.as_ref().unwrap().piece;
            let lp = leaf.region.to_lp();
            let mx = lp
                .maximize(&raw.c)
                .map_err(|e| Error::lp("estimator leaf maximum", e))?;
            let mn = lp
                .minimize(&raw.c)
                .map_err(|e| Error::lp("estimator leaf minimum", e))?;
            lps += 2;
            let (Some(px), Some(pn)) = (mx.point, mn.point) else {
                continue;
            };
            let (hi, lo) = (mx.value + raw.d, mn.value + raw.d);
            let zero = AffinePiece {
                c: vec![0.0; nr],
                d: 0.0,
            };
            if lo >= 0.0 {
                out.push(LevelPiece {
                    region: leaf.region.clone(),
                    level: raw.clone(),
                    side: None,
                    max_level: hi,
                    argmax: px,
                });
            } else if hi <= 0.0 {
                out.push(LevelPiece {
                    region: leaf.region.clone(),
                    level: zero,
                    side: None,
                    max_level: 0.0,
                    argmax: pn,
                });
            } else {
                out.push(LevelPiece {
                    region: leaf.region.clone(),
                    level: raw.clone(),
                    side: Some((raw.clone(), true)),
                    max_level: hi,
                    argmax: px,
                });
                out.push(LevelPiece {
                    region: leaf.region.clone(),
                    level: zero,
                    side: Some((raw.clone(), false)),
                    max_level: 0.0,
                    argmax: pn,
                });
            }
        }
        Ok((out, lps))
    }

    /// Rows shared by every triple of one Lyapunov leaf and constraint piece.
    fn push_pair(&self, lp: &mut Lp, leaf: usize, k: usize) {
        let n = self.tree.dim();
        let nr = self.emap.reference_dim();
        let node = self.tree.node(self.tree.leaf_ids()[leaf]);
        let em = &self.emap.matrix;
        lp.clear(n + nr);
        // y = x − E r in the leaf
        let pull = |a: &[f64]| -> Vec<f64> {
            let mut row = a.to_vec();
            row.extend((0..nr).map(|j| -(0..n).map(|i| a[i] * em[i][j]).sum::<f64>()));
            row
        };
        for h in node.region.halfspaces() {
            lp.push_le(&pull(&h.normal), h.offset);
        }
        for h in node.region.equalities() {
            lp.push_eq(&pull(&h.normal), h.offset);
        }
        let on_x = |a: &[f64]| -> Vec<f64> { a.iter().copied().chain(std::iter::repeat_n(0.0, nr)).collect() };
        let p = &self.active[k];
        for h in p.region.halfspaces() {
            lp.push_le(&on_x(&h.normal), h.offset);
        }
        for h in p.region.equalities() {
            lp.push_eq(&on_x(&h.normal), h.offset);
        }
        let on_r = |a: &[f64]| -> Vec<f64> { std::iter::repeat_n(0.0, n).chain(a.iter().copied()).collect() };
        for h in self.r_domain.halfspaces() {
            lp.push_le(&on_r(&h.normal), h.offset);
        }
    }

    /// `V(x − E r) ≤ level(r)` as a row in `z`.
    fn push_level(&self, lp: &mut Lp, v: &AffinePiece, level: &AffinePiece) {
        let n = self.tree.dim();
        let nr = self.emap.reference_dim();
        let em = &self.emap.matrix;
        let mut row = v.c.clone();
        row.extend((0..nr).map(|j| -(0..n).map(|i| v.c[i] * em[i][j]).sum::<f64>() - level.c[j]));
        lp.push_le(&row, level.d - v.d);
    }

    fn objective(&self, k: usize) -> Vec<f64> {
        let nr = self.emap.reference_dim();
        self.active[k]
            .piece
            .c
            .iter()
            .copied()
            .chain(std::iter::repeat_n(0.0, nr))
            .collect()
    }

    /// Interval lower bound of the leaf's `V` on states that can reach piece `k`.
    fn value_bound(&self, leaf: usize, k: usize) -> f64 {
        let node = self.tree.node(self.tree.leaf_ids()[leaf]);
        let v = &node.leaf.as_ref().unwrap().piece;
        let p = &self.active[k];
        let mut bound = v.d;
        for i in 0..v.c.len() {
            // y = x − E r with x in the piece box
            let lo = self.leaf_lo[leaf][i].max(p.lo[i] - self.er_hi[i]);
            let hi = self.leaf_hi[leaf][i].min(p.hi[i] - self.er_lo[i]);
            if lo > hi + FEAS_TOL {
                return f64::INFINITY;
            }
            let (lo, hi) = (lo.min(hi), hi.max(lo));
            bound += (v.c[i] * lo).min(v.c[i] * hi);
        }
        bound - FEAS_TOL * (1.0 + bound.abs())
    }

    pub fn verify(&self, e: &EstimatorNet) -> Result<VerifyResult> {
        if e.reference_dim() != self.emap.reference_dim() {
            return Err(Error::Input(
                "estimator input does not match the reference dimension".into(),
            ));
        }
        let n = self.tree.dim();
        let (levels, mut lps) = self.level_pieces(e)?;
        let e_max = levels.iter().map(|l| l.max_level).fold(0.0f64, f64::max);
        let mut out = VerifyResult {
            opt_value: None,
            witness_x: None,
            witness_r: None,
            binding: None,
            guard_excess: None,
            guard_r: None,
            verified: false,
            triples: 0,
            lps: 0,
            pruned: 0,
        };
        if let Some(g) = self.guard {
            if let Some(l) = levels.iter().max_by(|a, b| a.max_level.total_cmp(&b.max_level)) {
                out.guard_excess = Some(l.max_level - g);
                out.guard_r = Some(l.argmax.clone());
            }
        }
        let mut lp = Lp::new(n + self.emap.reference_dim());
        // relaxed pair bounds: any reference, level at most e_max
        let cap = AffinePiece {
            c: vec![0.0; self.emap.reference_dim()],
            d: e_max,
        };
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for leaf in 0..self.tree.num_leaves() {
            let v = &self.tree.node(self.tree.leaf_ids()[leaf]).leaf.as_ref().unwrap().piece;
            for k in 0..self.active.len() {
                out.triples += levels.len();
                if self.value_bound(leaf, k) > e_max {
                    out.pruned += levels.len();
                    continue;
                }
                self.push_pair(&mut lp, leaf, k);
                self.push_level(&mut lp, v, &cap);
                let res = lp
                    .maximize(&self.objective(k))
                    .map_err(|err| Error::lp(format!("relaxed pair (leaf {leaf}, piece {k})"), err))?;
                lps += 1;
                match res.status {
                    LpStatus::Optimal => pairs.push((res.value + self.active[k].piece.d, leaf, k)),
                    LpStatus::Unbounded => pairs.push((f64::INFINITY, leaf, k)),
                    LpStatus::Infeasible => out.pruned += levels.len(),
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut best = f64::NEG_INFINITY;
        for &(bound, leaf, k) in &pairs {
            if bound <= best {
                out.pruned += levels.len();
                continue;
            }
            let v = &self.tree.node(self.tree.leaf_ids()[leaf]).leaf.as_ref().unwrap().piece;
            for lvl in &levels {
                self.push_pair(&mut lp, leaf, k);
                let on_r = |a: &[f64]| -> Vec<f64> { std::iter::repeat_n(0.0, n).chain(a.iter().copied()).collect() };
                for h in lvl.region.halfspaces() {
                    lp.push_le(&on_r(&h.normal), h.offset);
                }
                if let Some((raw, positive)) = &lvl.side {
                    // raw ≥ 0 ⇔ −c·r ≤ d; raw ≤ 0 ⇔ c·r ≤ −d
                    if *positive {
                        let neg: Vec<f64> = raw.c.iter().map(|v| -v).collect();
                        lp.push_le(&on_r(&neg), raw.d);
                    } else {
                        lp.push_le(&on_r(&raw.c), -raw.d);
                    }
                }
                self.push_level(&mut lp, v, &lvl.level);
                let res = lp
                    .maximize(&self.objective(k))
                    .map_err(|err| Error::lp(format!("triple (leaf {leaf}, piece {k})"), err))?;
                lps += 1;
                if let (LpStatus::Optimal, Some(z)) = (res.status, res.point) {
                    let val = res.value + self.active[k].piece.d;
                    if val > best {
                        best = val;
                        out.opt_value = Some(val);
                        out.witness_x = Some(z[..n].to_vec());
                        out.witness_r = Some(z[n..].to_vec());
                        out.binding = Some(self.constraints[self.active[k].constraint].name.clone());
                    }
                } else if res.status == LpStatus::Unbounded {
                    return Err(Error::Input(format!("triple (leaf {leaf}, piece {k}) is unbounded")));
                }
            }
        }
        out.lps = lps;
        out.verified = out.opt_value.is_none_or(|v| v <= VERIFY_TOL) && out.guard_excess.is_none_or(|g| g <= 0.0);
        Ok(out)
    }

    /// Whether `(x, r)` lies in the set the verifier reasons about.
    pub fn in_problem_domain(&self, x: &[f64], r: &[f64]) -> bool {
        let y: Vec<f64> = self.emap.shift(x, r);
        self.x_domain.contains(x, FEAS_TOL)
            && self.r_domain.contains(r, FEAS_TOL)
            && self.tree.domain().contains(&y, FEAS_TOL)
    }
}

/// One-shot verification; the domain guard is taken from the Lyapunov tree.
pub fn verify_estimator(
    tree: &PartitionTree,
    v_net: &PwaNetwork,
    emap: &ReferenceMap,
    e: &EstimatorNet,
    constraints: &[PwaConstraint],
    x_domain: &Polytope,
    r_domain: &Polytope,
) -> Result<VerifyResult> {
    let guard = LevelSolver::new(tree, v_net, emap, &[])?.guard_level();
    Verifier::new(tree, emap, constraints, x_domain, r_domain, guard)?.verify(e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub hidden: Vec<usize>,
    pub n_pretrain: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Full-batch steps before the first verification.
    pub pretrain_epochs: usize,
    /// Full-batch steps after each counterexample.
    pub epochs_per_iter: usize,
    pub seed: u64,
    /// Targets are `Q(r)·(1 − margin)`.
    pub margin: f64,
    /// Jittered copies added around each counterexample.
    pub neighbours: usize,
    pub jitter: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            hidden: vec![8, 4],
            n_pretrain: 200,
            max_iters: 50,
            learning_rate: 1e-2,
            pretrain_epochs: 3000,
            epochs_per_iter: 500,
            seed: 0,
            margin: 0.02,
            neighbours: 4,
            jitter: 1e-3,
        }
    }
}

/// Random estimator whose first-layer kinks are spread over the box hull of
/// `r_domain` and whose deeper units start active.
pub fn init_estimator(r_domain: &Polytope, cfg: &EstimatorConfig) -> Result<PwaNetwork> {
    let (lo, hi) = box_hull(r_domain)?;
    let nr = lo.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut layers = Vec::new();
    let mut prev = nr;
    for (l, &w) in cfg.hidden.iter().chain(std::iter::once(&1)).enumerate() {
        let mut weights = Vec::with_capacity(w);
        let mut bias = Vec::with_capacity(w);
        for _ in 0..w {
            if l == 0 {
                let dir: Vec<f64> = (0..nr).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let at: Vec<f64> = lo
                    .iter()
                    .zip(&hi)
                    .map(|(&a, &b)| if b > a { rng.gen_range(a..=b) } else { a })
                    .collect();
                bias.push(-dir.iter().zip(&at).map(|(d, x)| d * x).sum::<f64>());
                weights.push(dir);
            } else {
                let s = 1.0 / (prev as f64).sqrt();
                weights.push((0..prev).map(|_| rng.gen_range(-s..s)).collect());
                bias.push(if l < cfg.hidden.len() {
                    rng.gen_range(0.0..0.1)
                } else {
                    0.0
                });
            }
        }
        layers.push(Layer::new(weights, bias));
        prev = w;
    }
    Ok(PwaNetwork::new(nr, layers, Activation::Relu)?)
}

/// Mean squared error of the raw output against `targets`, and its gradient.
pub fn mse_loss(net: &PwaNetwork, data: &[(Vec<f64>, f64)], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let inv = 1.0 / data.len() as f64;
    let mut loss = 0.0;
    for (r, t) in data {
        let err = net.eval(r) - t;
        loss += err * err * inv;
        net.backprop(r, 2.0 * err * inv, grad);
    }
    loss
}

fn fit(net: &mut PwaNetwork, data: &[(Vec<f64>, f64)], epochs: usize, opt: &mut Adam) {
    let mask = vec![true; net.num_params()];
    let mut grad = vec![0.0; net.num_params()];
    let mut p = net.params();
    for _ in 0..epochs {
        mse_loss(net, data, &mut grad);
        opt.step(&mut p, &grad, &mask);
        net.set_params(&p);
    }
}

/// Counterexample-guided training from an explicit initial network.
pub fn train_estimator_from(
    init: PwaNetwork,
    oracle: &mut dyn FnMut(&[f64]) -> Result<f64>,
    verifier: &mut dyn FnMut(&EstimatorNet) -> Result<VerifyResult>,
    r_domain: &Polytope,
    cfg: &EstimatorConfig,
) -> Result<EstimatorNet> {
    if !(cfg.margin >= 0.0 && cfg.margin < 1.0) || cfg.learning_rate <= 0.0 || cfg.max_iters == 0 {
        return Err(Error::Input("estimator config out of range".into()));
    }
    let (lo, hi) = box_hull(r_domain)?;
    let mut data = pretrain_dataset(oracle, r_domain, cfg.n_pretrain, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut e = EstimatorNet::new(init)?;
    let targets = |d: &TrainingSet| -> Vec<(Vec<f64>, f64)> {
        d.samples
            .iter()
            .map(|s| (s.r.clone(), s.gamma * (1.0 - cfg.margin)))
            .collect()
    };
    let mut opt = Adam::new(e.net.num_params(), cfg.learning_rate);
    fit(&mut e.net, &targets(&data), cfg.pretrain_epochs, &mut opt);
    let mut last = None;
    for it in 1..=cfg.max_iters {
        let res = verifier(&e)?;
        e.iterations = it;
        if res.verified {
            e.verified = true;
            e.dataset_size = data.len();
            e.dataset_hash = data.hash();
            return Ok(e);
        }
        // prefer a constraint witness; otherwise the reference where the guard is exceeded
        let (r_star, violation) = match (&res.opt_value, &res.witness_r) {
            (Some(v), Some(r)) if *v > VERIFY_TOL => (r.clone(), *v),
            _ => (
                res.guard_r.clone().expect("unverified without witness"),
                res.guard_excess.unwrap_or(0.0),
            ),
        };
        e.counterexamples.push(Counterexample {
            iteration: it,
            r: r_star.clone(),
            violation,
        });
        let g = oracle(&r_star)?;
        data.push(r_star.clone(), g, SampleSource::Counterexample)?;
        let mut added = 0;
        while added < cfg.neighbours {
            let r: Vec<f64> = r_star
                .iter()
                .enumerate()
                .map(|(i, v)| (v + rng.gen_range(-cfg.jitter..=cfg.jitter)).clamp(lo[i], hi[i]))
                .collect();
            if !r_domain.contains(&r, FEAS_TOL) {
                continue;
            }
            let g = oracle(&r)?;
            data.push(r, g, SampleSource::Counterexample)?;
            added += 1;
        }
        fit(&mut e.net, &targets(&data), cfg.epochs_per_iter, &mut opt);
        last = Some((violation, r_star, res.witness_x.unwrap_or_default()));
    }
    let (violation, witness_r, witness_x) = last.unwrap_or_default();
    Err(Error::Unverified {
        iterations: cfg.max_iters,
        violation,
        witness_r,
        witness_x,
    })
}

/// Level estimation problem for one Lyapunov network and constraint set.
pub struct EstimatorProblem<'a> {
    pub solver: LevelSolver<'a>,
    pub verifier: Verifier<'a>,
    pub r_domain: Polytope,
}

impl<'a> EstimatorProblem<'a> {
    pub fn new(
        tree: &'a PartitionTree,
        v_net: &PwaNetwork,
        emap: &ReferenceMap,
        constraints: &[PwaConstraint],
        x_domain: &Polytope,
        r_domain: &Polytope,
    ) -> Result<Self> {
        let solver = LevelSolver::new(tree, v_net, emap, constraints)?;
        let verifier = Verifier::new(tree, emap, constraints, x_domain, r_domain, solver.guard_level())?;
        Ok(EstimatorProblem {
            solver,
            verifier,
            r_domain: r_domain.clone(),
        })
    }

    /// `Γ*(r)`, finite because the domain guard is on.
    pub fn level(&mut self, r: &[f64]) -> Result<f64> {
        let res = self.solver.max_admissible_level(r, LevelOptions::default())?;
        if !res.gamma_star.is_finite() {
            return Err(Error::Input(format!("no finite level at r = {r:?}")));
        }
        Ok(res.gamma_star)
    }

    pub fn train(&mut self, cfg: &EstimatorConfig) -> Result<EstimatorNet> {
        let init = init_estimator(&self.r_domain, cfg)?;
        self.train_from(init, cfg)
    }

    pub fn train_from(&mut self, init: PwaNetwork, cfg: &EstimatorConfig) -> Result<EstimatorNet> {
        let EstimatorProblem {
            solver,
            verifier,
            r_domain,
        } = self;
        let mut oracle = |r: &[f64]| -> Result<f64> {
            let res = solver.max_admissible_level(r, LevelOptions::default())?;
            Ok(res.gamma_star)
        };
        let mut verify = |e: &EstimatorNet| verifier.verify(e);
        train_estimator_from(init, &mut oracle, &mut verify, r_domain, cfg)
    }
}

/// Trains a verified estimator with a fresh random initialisation.
pub fn train_estimator(
    tree: &PartitionTree,
    v_net: &PwaNetwork,
    emap: &ReferenceMap,
    constraints: &[PwaConstraint],
    x_domain: &Polytope,
    r_domain: &Polytope,
    cfg: &EstimatorConfig,
) -> Result<EstimatorNet> {
    EstimatorProblem::new(tree, v_net, emap, constraints, x_domain, r_domain)?.train(cfg)
}

/// Largest value at `x` over the constraints defined there.
pub fn constraint_max(constraints: &[PwaConstraint], x: &[f64]) -> f64 {
    constraints
        .iter()
        .filter_map(|c| c.eval(x))
        .fold(f64::NEG_INFINITY, f64::max)
}
