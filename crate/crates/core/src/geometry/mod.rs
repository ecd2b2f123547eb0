//! Halfspace polytopes and the low-dimensional LP kernel.

mod lp;

pub(crate) use lp::dot;
pub use lp::{Lp, LpResult, LpStatus, DEFAULT_SEED, FEAS_TOL};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Strict-interior tolerance separating genuine cuts from face tangency.
pub const STRICT_TOL: f64 = 1e-7;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero normal vector")]
    ZeroNormal,
    #[error("non-finite coefficient in LP data")]
    NonFinite,
    #[error("empty polytope")]
    EmptyPolytope,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}

fn check_normal(normal: &[f64]) -> Result<(), GeometryError> {
    if normal.iter().all(|v| *v == 0.0) {
        return Err(GeometryError::ZeroNormal);
    }
    if normal.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    Ok(())
}

/// `{x : normal·x ≤ offset}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self, GeometryError> {
        check_normal(&normal)?;
        Ok(Halfspace { normal, offset })
    }

    /// Signed slack `normal·x - offset` (≤ 0 inside).
    pub fn slack(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }

    pub fn norm(&self) -> f64 {
        self.normal.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `{x : normal·x = offset}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Hyperplane {
    pub fn new(normal: Vec<f64>, offset: f64) -> Result<Self, GeometryError> {
        check_normal(&normal)?;
        Ok(Hyperplane { normal, offset })
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }

    /// `{normal·x ≤ offset}`
    pub fn below(&self) -> Halfspace {
        Halfspace {
            normal: self.normal.clone(),
            offset: self.offset,
        }
    }

    /// `{normal·x ≥ offset}`
    pub fn above(&self) -> Halfspace {
        Halfspace {
            normal: self.normal.iter().map(|v| -v).collect(),
            offset: -self.offset,
        }
    }

    /// The same plane after the substitution `x ↦ x - shift`.
    pub fn translated(&self, shift: &[f64]) -> Hyperplane {
        Hyperplane {
            normal: self.normal.clone(),
            offset: self.offset + dot(&self.normal, shift),
        }
    }
}

/// Position of a polytope relative to a hyperplane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Entirely in `normal·x ≥ offset` (up to faces).
    Above,
    /// Entirely in `normal·x ≤ offset` (up to faces).
    Below,
    /// Both open sides contain points of the polytope.
    Cuts,
}

/// Intersection of finitely many halfspaces and hyperplanes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    dim: usize,
    halfspaces: Vec<Halfspace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    equalities: Vec<Hyperplane>,
}

impl Polytope {
    /// The whole space `R^dim`.
    pub fn whole(dim: usize) -> Self {
        Polytope {
            dim,
            halfspaces: Vec::new(),
            equalities: Vec::new(),
        }
    }

    pub fn from_halfspaces(dim: usize, halfspaces: Vec<Halfspace>) -> Result<Self, GeometryError> {
        let mut p = Polytope::whole(dim);
        for h in halfspaces {
            p.push(h)?;
        }
        Ok(p)
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self, GeometryError> {
        if lo.len() != hi.len() {
            return Err(GeometryError::DimensionMismatch {
                expected: lo.len(),
                found: hi.len(),
            });
        }
        let d = lo.len();
        let mut p = Polytope::whole(d);
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            p.halfspaces.push(Halfspace {
                normal: e.clone(),
                offset: hi[i],
            });
            e[i] = -1.0;
            p.halfspaces.push(Halfspace {
                normal: e,
                offset: -lo[i],
            });
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn equalities(&self) -> &[Hyperplane] {
        &self.equalities
    }

    pub fn push(&mut self, h: Halfspace) -> Result<(), GeometryError> {
        if h.normal.len() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                found: h.normal.len(),
            });
        }
        check_normal(&h.normal)?;
        self.halfspaces.push(h);
        Ok(())
    }

    pub fn push_equality(&mut self, h: Hyperplane) -> Result<(), GeometryError> {
        if h.normal.len() != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                found: h.normal.len(),
            });
        }
        check_normal(&h.normal)?;
        self.equalities.push(h);
        Ok(())
    }

    pub fn with(mut self, h: Halfspace) -> Result<Self, GeometryError> {
        self.push(h)?;
        Ok(self)
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope, GeometryError> {
        if other.dim != self.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut p = self.clone();
        p.halfspaces.extend(other.halfspaces.iter().cloned());
        p.equalities.extend(other.equalities.iter().cloned());
        Ok(p)
    }

    /// The image of the polytope under `x ↦ x + shift`.
    pub fn translated(&self, shift: &[f64]) -> Polytope {
        Polytope {
            dim: self.dim,
            halfspaces: self
                .halfspaces
                .iter()
                .map(|h| Halfspace {
                    normal: h.normal.clone(),
                    offset: h.offset + dot(&h.normal, shift),
                })
                .collect(),
            equalities: self
                .equalities
                .iter()
                .map(|h| Hyperplane {
                    normal: h.normal.clone(),
                    offset: h.offset + dot(&h.normal, shift),
                })
                .collect(),
        }
    }

    /// Membership with a slack tolerance measured on normalized rows.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.halfspaces.iter().all(|h| h.slack(x) <= tol * h.norm())
            && self
                .equalities
                .iter()
                .all(|h| h.eval(x).abs() <= tol * h.normal.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Appends this polytope's rows to `lp`, substituting `x = y + shift`
    /// (i.e. constraining `y` such that `y + shift` lies in the polytope) when a
    /// shift is given.
    pub(crate) fn push_rows(&self, lp: &mut Lp, offset_shift: Option<&[f64]>) {
        for h in &self.halfspaces {
            let off = match offset_shift {
                Some(s) => h.offset - dot(&h.normal, s),
                None => h.offset,
            };
            lp.push_le(&h.normal, off);
        }
        for h in &self.equalities {
            let off = match offset_shift {
                Some(s) => h.offset - dot(&h.normal, s),
                None => h.offset,
            };
            lp.push_eq(&h.normal, off);
        }
    }

    pub fn to_lp(&self) -> Lp {
        let mut lp = Lp::new(self.dim);
        self.push_rows(&mut lp, None);
        lp
    }

    /// Drops halfspaces implied by the remaining rows (one LP per halfspace).
    /// The result differs from `self` by at most `FEAS_TOL` along any row.
    pub fn without_redundant(&self) -> Result<Polytope, GeometryError> {
        let mut keep = vec![true; self.halfspaces.len()];
        let mut lp = Lp::new(self.dim);
        for i in 0..self.halfspaces.len() {
            lp.clear(self.dim);
            for (j, h) in self.halfspaces.iter().enumerate() {
                if j != i && keep[j] {
                    lp.push_le(&h.normal, h.offset);
                }
            }
            for h in &self.equalities {
                lp.push_eq(&h.normal, h.offset);
            }
            let h = &self.halfspaces[i];
            let r = lp.maximize(&h.normal)?;
            if r.status == LpStatus::Infeasible {
                return Err(GeometryError::EmptyPolytope);
            }
            if r.is_optimal() && r.value <= h.offset + FEAS_TOL * h.norm() {
                keep[i] = false;
            }
        }
        Ok(Polytope {
            dim: self.dim,
            halfspaces: self
                .halfspaces
                .iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(h, _)| h.clone())
                .collect(),
            equalities: self.equalities.clone(),
        })
    }

    /// Interval hull `[lo, hi]` per coordinate (2·dim LPs).
    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>), GeometryError> {
        let lp = self.to_lp();
        let mut lo = Vec::with_capacity(self.dim);
        let mut hi = Vec::with_capacity(self.dim);
        let mut e = vec![0.0; self.dim];
        for i in 0..self.dim {
            e[i] = 1.0;
            let mn = lp.minimize(&e)?;
            let mx = lp.maximize(&e)?;
            e[i] = 0.0;
            if mn.status == LpStatus::Infeasible {
                return Err(GeometryError::EmptyPolytope);
            }
            lo.push(if mn.is_optimal() { mn.value } else { f64::NEG_INFINITY });
            hi.push(if mx.is_optimal() { mx.value } else { f64::INFINITY });
        }
        Ok((lo, hi))
    }
}

/// Minimizes `objective·x` over `poly ∩ extra_equalities`.
pub fn solve_lp(
    objective: &[f64],
    poly: &Polytope,
    extra_equalities: &[Hyperplane],
) -> Result<LpResult, GeometryError> {
    solve_lp_seeded(objective, poly, extra_equalities, DEFAULT_SEED)
}

pub fn solve_lp_seeded(
    objective: &[f64],
    poly: &Polytope,
    extra_equalities: &[Hyperplane],
    seed: u64,
) -> Result<LpResult, GeometryError> {
    if objective.len() != poly.dim {
        return Err(GeometryError::DimensionMismatch {
            expected: poly.dim,
            found: objective.len(),
        });
    }
    let mut lp = poly.to_lp();
    for h in extra_equalities {
        if h.dim() != poly.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: poly.dim,
                found: h.dim(),
            });
        }
        lp.push_eq(&h.normal, h.offset);
    }
    lp.minimize_seeded(objective, seed)
}

pub fn is_empty(poly: &Polytope) -> Result<bool, GeometryError> {
    let zero = vec![0.0; poly.dim];
    Ok(solve_lp(&zero, poly, &[])?.status == LpStatus::Infeasible)
}

/// Which side of `h` the polytope occupies, using strict-interior tests.
pub fn hyperplane_cuts(poly: &Polytope, h: &Hyperplane) -> Result<Side, GeometryError> {
    if h.dim() != poly.dim {
        return Err(GeometryError::DimensionMismatch {
            expected: poly.dim,
            found: h.dim(),
        });
    }
    let lp = poly.to_lp();
    side_of(&lp, h)
}

pub(crate) fn side_of(lp: &Lp, h: &Hyperplane) -> Result<Side, GeometryError> {
    let norm = h.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let hi = lp.maximize(&h.normal)?;
    if hi.status == LpStatus::Infeasible {
        return Err(GeometryError::EmptyPolytope);
    }
    let lo = lp.minimize(&h.normal)?;
    let above = hi.status == LpStatus::Unbounded || hi.value - h.offset > STRICT_TOL * norm;
    let below = lo.status == LpStatus::Unbounded || h.offset - lo.value > STRICT_TOL * norm;
    Ok(match (above, below) {
        (true, true) => Side::Cuts,
        (true, false) => Side::Above,
        // flat against the plane: boundary points belong to the inactive side
        _ => Side::Below,
    })
}

/// One cell of a hyperplane arrangement restricted to a polytope.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub region: Polytope,
    /// Per hyperplane: `true` if the cell lies on the `normal·x ≥ offset` side.
    pub signs: Vec<bool>,
}

/// Splits `poly` by every hyperplane in `hs`, keeping cells with nonempty interior.
pub fn split_by_hyperplanes(poly: &Polytope, hs: &[Hyperplane]) -> Result<Vec<Cell>, GeometryError> {
    for h in hs {
        if h.dim() != poly.dim {
            return Err(GeometryError::DimensionMismatch {
                expected: poly.dim,
                found: h.dim(),
            });
        }
    }
    let mut cells = vec![Cell {
        region: poly.clone(),
        signs: Vec::with_capacity(hs.len()),
    }];
    for h in hs {
        let mut next = Vec::with_capacity(cells.len() * 2);
        for mut cell in cells {
            match hyperplane_cuts(&cell.region, h)? {
                Side::Above => {
                    cell.signs.push(true);
                    next.push(cell);
                }
                Side::Below => {
                    cell.signs.push(false);
                    next.push(cell);
                }
                Side::Cuts => {
                    let mut lower = cell.clone();
                    lower.region.halfspaces.push(h.below());
                    lower.signs.push(false);
                    cell.region.halfspaces.push(h.above());
                    cell.signs.push(true);
                    next.push(lower);
                    next.push(cell);
                }
            }
        }
        cells = next;
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(lo: f64, hi: f64) -> Polytope {
        Polytope::from_box(&[lo, lo], &[hi, hi]).unwrap()
    }

    fn plane(n: &[f64], off: f64) -> Hyperplane {
        Hyperplane::new(n.to_vec(), off).unwrap()
    }

    #[test]
    fn emptiness() {
        let p = Polytope::from_box(&[1.0], &[0.0]).unwrap();
        assert!(is_empty(&p).unwrap());
        assert!(!is_empty(&square(0.0, 1.0)).unwrap());
        let p = Polytope::from_halfspaces(
            2,
            vec![
                Halfspace::new(vec![1.0, 1.0], 1.0).unwrap(),
                Halfspace::new(vec![-1.0, 0.0], -1.0).unwrap(),
                Halfspace::new(vec![0.0, -1.0], -1.0).unwrap(),
            ],
        )
        .unwrap();
        assert!(is_empty(&p).unwrap());
    }

    #[test]
    fn degenerate_face_is_nonempty() {
        // a segment: measure zero but nonempty
        let p = Polytope::from_box(&[0.0, 0.5], &[1.0, 0.5]).unwrap();
        assert!(!is_empty(&p).unwrap());
    }

    #[test]
    fn cut_sides() {
        let sq = square(0.0, 1.0);
        assert_eq!(hyperplane_cuts(&sq, &plane(&[1.0, 0.0], 0.5)).unwrap(), Side::Cuts);
        assert_eq!(hyperplane_cuts(&sq, &plane(&[1.0, 0.0], 2.0)).unwrap(), Side::Below);
        let upper = square(0.5, 1.0);
        assert_eq!(hyperplane_cuts(&upper, &plane(&[1.0, 0.0], 0.5)).unwrap(), Side::Above);
        let empty = Polytope::from_box(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(
            hyperplane_cuts(&empty, &plane(&[1.0, 0.0], 0.5)),
            Err(GeometryError::EmptyPolytope)
        );
    }

    #[test]
    fn zero_normal_rejected() {
        assert_eq!(Hyperplane::new(vec![0.0, 0.0], 1.0), Err(GeometryError::ZeroNormal));
        assert_eq!(Halfspace::new(vec![0.0], 1.0), Err(GeometryError::ZeroNormal));
    }

    #[test]
    fn split_counts() {
        let sq = square(0.0, 1.0);
        let v = plane(&[1.0, 0.0], 0.5);
        let h = plane(&[0.0, 1.0], 0.5);
        let d = plane(&[1.0, 1.0], 0.3);
        assert_eq!(split_by_hyperplanes(&sq, std::slice::from_ref(&v)).unwrap().len(), 2);
        assert_eq!(split_by_hyperplanes(&sq, &[v.clone(), h.clone()]).unwrap().len(), 4);
        assert_eq!(split_by_hyperplanes(&sq, &[v, h, d]).unwrap().len(), 5);
    }

    #[test]
    fn seeded_reproducibility() {
        let sq = square(-1.0, 2.0);
        let a = solve_lp_seeded(&[0.3, -0.7], &sq, &[], 7).unwrap();
        let b = solve_lp_seeded(&[0.3, -0.7], &sq, &[], 7).unwrap();
        assert_eq!(a, b);
    }

    /// Strict-feasibility oracle: a sign vector is a cell iff the open
    /// region has points at distance > STRICT_TOL from every plane.
    fn sign_vector_feasible(poly: &Polytope, hs: &[Hyperplane], signs: &[bool]) -> bool {
        let d = poly.dim();
        // variables (x, t): maximize t subject to margins ≥ t
        let mut lp = Lp::new(d + 1);
        for h in poly.halfspaces() {
            let mut row = h.normal.clone();
            row.push(0.0);
            lp.push_le(&row, h.offset);
        }
        for (h, &s) in hs.iter().zip(signs) {
            let norm = h.normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sg = if s { -1.0 } else { 1.0 };
            let mut row: Vec<f64> = h.normal.iter().map(|v| sg * v / norm).collect();
            row.push(1.0);
            lp.push_le(&row, sg * h.offset / norm);
        }
        let mut t = vec![0.0; d + 1];
        t[d] = 1.0;
        let mut cap = vec![0.0; d + 1];
        cap[d] = 1.0;
        lp.push_le(&cap, 10.0);
        let r = lp.maximize(&t).unwrap();
        r.is_optimal() && r.value > STRICT_TOL
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_matches_sign_enumeration(
            raw in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -0.8f64..0.8), 1..8)
        ) {
            let sq = square(-1.0, 1.0);
            let hs: Vec<Hyperplane> = raw
                .iter()
                .filter(|(a, b, _)| a.abs() + b.abs() > 0.1)
                .map(|(a, b, c)| plane(&[*a, *b], *c))
                .collect();
            let cells = split_by_hyperplanes(&sq, &hs).unwrap();
            let mut got: Vec<Vec<bool>> = cells.iter().map(|c| c.signs.clone()).collect();
            got.sort();
            let mut want = Vec::new();
            for mask in 0u32..(1 << hs.len()) {
                let signs: Vec<bool> = (0..hs.len()).map(|i| mask >> i & 1 == 1).collect();
                if sign_vector_feasible(&sq, &hs, &signs) {
                    want.push(signs);
                }
            }
            want.sort();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn nonempty_implies_feasible(
            lo in proptest::collection::vec(-2.0f64..0.0, 3),
            w in proptest::collection::vec(0.0f64..2.0, 3),
            obj in proptest::collection::vec(-1.0f64..1.0, 3),
            cut in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&w).map(|(a, b)| a + b).collect();
            let mut p = Polytope::from_box(&lo, &hi).unwrap();
            if cut.0.abs() + cut.1.abs() + cut.2.abs() > 0.1 {
                p.push(Halfspace::new(vec![cut.0, cut.1, cut.2], cut.3).unwrap()).unwrap();
            }
            let empty = is_empty(&p).unwrap();
            let r = solve_lp(&obj, &p, &[]).unwrap();
            prop_assert_eq!(empty, r.status == LpStatus::Infeasible);
            if let Some(x) = r.point {
                prop_assert!(p.contains(&x, 1e-7));
                // optimality against random feasible points from the box corners
                for mask in 0..8u32 {
                    let c: Vec<f64> = (0..3).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }).collect();
                    if p.contains(&c, 0.0) {
                        prop_assert!(dot(&obj, &c) >= r.value - 1e-9);
                    }
                }
            }
        }
    }
}
