//! Linear-region enumeration of a PWA network as a layer-by-layer partition tree.
//!
//! The root is the domain. Every node at depth `l` is split by the
//! pre-activation hyperplanes of hidden layer `l + 1`, which are affine on the
//! node because the earlier activation bits are fixed there. Leaves sit at
//! depth equal to the number of hidden layers and carry the network's affine
//! piece on their region.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, split_by_hyperplanes, LpStatus, Polytope};
use crate::pwanet::{ActivationPattern, AffinePiece, PwaNetwork};

/// Tolerance used by [`PartitionTree::locate`] for boundary membership.
pub const LOCATE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LeafData {
    pub piece: AffinePiece,
    pub pattern: ActivationPattern,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionNode {
    pub region: Polytope,
    /// Number of hidden layers whose bits are fixed on this node.
    pub layer: usize,
    pub ap_prefix: Vec<Vec<bool>>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub leaf: Option<LeafData>,
    /// Minimum of the network over the region, once annotated.
    pub v_lower: Option<f64>,
    /// Maximum of the network over the region, once annotated.
    pub v_upper: Option<f64>,
}

impl PartitionNode {
    pub fn is_leaf(&self) -> bool {
        self.leaf.is_some()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TreeStats {
    pub nodes: usize,
    pub leaves: usize,
    pub build_seconds: f64,
    pub annotate_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionTree {
    /// Node 0 is the root.
    nodes: Vec<PartitionNode>,
    leaves: Vec<usize>,
    domain: Polytope,
    depth: usize,
    pub stats: TreeStats,
    #[serde(skip)]
    by_pattern: HashMap<ActivationPattern, usize>,
}

impl PartitionTree {
    pub fn root(&self) -> &PartitionNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &PartitionNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[PartitionNode] {
        &self.nodes
    }

    /// Node ids of the leaves, in construction order.
    pub fn leaf_ids(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaves(&self) -> impl Iterator<Item = &PartitionNode> + '_ {
        self.leaves.iter().map(move |&i| &self.nodes[i])
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn domain(&self) -> &Polytope {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Number of hidden layers; every leaf sits at this depth.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn is_annotated(&self) -> bool {
        self.nodes.iter().all(|n| n.v_lower.is_some())
    }

    fn reindex(&mut self) {
        self.by_pattern = self
            .leaves
            .iter()
            .map(|&i| (self.nodes[i].leaf.as_ref().unwrap().pattern.clone(), i))
            .collect();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut t: PartitionTree = serde_json::from_str(s)?;
        if t.nodes.is_empty()
            || t.leaves
                .iter()
                .any(|&i| t.nodes.get(i).and_then(|n| n.leaf.as_ref()).is_none())
        {
            return Err(Error::Schema("partition tree has missing leaves".into()));
        }
        t.reindex();
        Ok(t)
    }

    /// The leaf whose region contains `x`.
    pub fn locate(&self, net: &PwaNetwork, x: &[f64]) -> Result<&PartitionNode> {
        if x.len() != self.dim() {
            return Err(Error::Geometry(crate::geometry::GeometryError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            }));
        }
        if !self.domain.contains(x, LOCATE_TOL) {
            return Err(Error::NotInDomain(x.to_vec()));
        }
        if let Ok(ap) = net.activation_pattern(x) {
            if let Some(&i) = self.by_pattern.get(&ap) {
                return Ok(&self.nodes[i]);
            }
        }
        // boundary point whose pattern labels a lower-dimensional cell
        let mut id = 0;
        while !self.nodes[id].is_leaf() {
            let node = &self.nodes[id];
            id = node
                .children
                .iter()
                .copied()
                .find(|&c| self.nodes[c].region.contains(x, LOCATE_TOL))
                .or_else(|| {
                    node.children.iter().copied().min_by(|&a, &b| {
                        violation(&self.nodes[a].region, x).total_cmp(&violation(&self.nodes[b].region, x))
                    })
                })
                .ok_or_else(|| Error::NotInDomain(x.to_vec()))?;
        }
        Ok(&self.nodes[id])
    }
}

fn violation(p: &Polytope, x: &[f64]) -> f64 {
    p.halfspaces().iter().map(|h| h.slack(x) / h.norm()).fold(0.0, f64::max)
}

fn check_bounded(domain: &Polytope) -> Result<()> {
    let (lo, hi) = domain.bounding_box()?;
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return Err(Error::Input("partition domain must be bounded".into()));
    }
    Ok(())
}

/// Enumerates the linear regions of `net` inside `domain`.
pub fn build_partition_tree(net: &PwaNetwork, domain: &Polytope) -> Result<PartitionTree> {
    let start = Instant::now();
    if domain.dim() != net.input_dim() {
        return Err(Error::Input(format!(
            "domain dimension {} does not match network input {}",
            domain.dim(),
            net.input_dim()
        )));
    }
    match domain.bounding_box() {
        Err(crate::geometry::GeometryError::EmptyPolytope) => {
            return Err(Error::Input("partition domain is empty".into()))
        }
        Err(e) => return Err(e.into()),
        Ok(_) => check_bounded(domain)?,
    }
    let depth = net.num_hidden();
    let mut nodes = vec![PartitionNode {
        region: domain.clone(),
        layer: 0,
        ap_prefix: Vec::new(),
        parent: None,
        children: Vec::new(),
        leaf: None,
        v_lower: None,
        v_upper: None,
    }];
    let mut frontier = vec![0usize];
    for layer in 0..depth {
        let mut next = Vec::new();
        for &id in &frontier {
            let map = net.layer_pre_activation_map(&nodes[id].ap_prefix, layer)?;
            let mut planes = Vec::new();
            let mut plane_of = Vec::with_capacity(map.offset.len());
            let mut fixed = Vec::with_capacity(map.offset.len());
            for (j, (row, &c)) in map.matrix.iter().zip(&map.offset).enumerate() {
                match crate::pwanet::pre_activation_plane(row, c, layer, j) {
                    Ok(h) => {
                        plane_of.push(Some(planes.len()));
                        planes.push(h);
                        fixed.push(false);
                    }
                    Err(_) => {
                        plane_of.push(None);
                        fixed.push(c > 0.0);
                    }
                }
            }
            let cells = split_by_hyperplanes(&nodes[id].region, &planes)
                .map_err(|e| Error::lp(format!("splitting node {id} at layer {layer}"), e))?;
            for cell in cells {
                let bits: Vec<bool> = plane_of
                    .iter()
                    .zip(&fixed)
                    .map(|(p, &f)| p.map_or(f, |k| cell.signs[k]))
                    .collect();
                let mut prefix = nodes[id].ap_prefix.clone();
                prefix.push(bits);
                let child = nodes.len();
                let region = cell
                    .region
                    .without_redundant()
                    .map_err(|e| Error::lp(format!("reducing a child of node {id}"), e))?;
                nodes.push(PartitionNode {
                    region,
                    layer: layer + 1,
                    ap_prefix: prefix,
                    parent: Some(id),
                    children: Vec::new(),
                    leaf: None,
                    v_lower: None,
                    v_upper: None,
                });
                nodes[id].children.push(child);
                next.push(child);
            }
        }
        frontier = next;
    }
    for &id in &frontier {
        let pattern = ActivationPattern {
            layers: nodes[id].ap_prefix.clone(),
        };
        let piece = net.affine_piece(&pattern)?;
        nodes[id].leaf = Some(LeafData { piece, pattern });
    }
    let mut tree = PartitionTree {
        stats: TreeStats {
            nodes: nodes.len(),
            leaves: frontier.len(),
            build_seconds: 0.0,
            annotate_seconds: 0.0,
        },
        nodes,
        leaves: frontier,
        domain: domain.clone(),
        depth,
        by_pattern: HashMap::new(),
    };
    tree.reindex();
    tree.stats.build_seconds = start.elapsed().as_secs_f64();
    Ok(tree)
}

/// Fills `v_lower` / `v_upper` with one min-LP and one max-LP per leaf, then
/// propagates child minima and maxima up the tree.
pub fn annotate_lower_bounds(tree: &mut PartitionTree) -> Result<()> {
    let start = Instant::now();
    for k in 0..tree.leaves.len() {
        let id = tree.leaves[k];
        let node = &tree.nodes[id];
        let piece = &node.leaf.as_ref().unwrap().piece;
        let lp = node.region.to_lp();
        let lo = lp
            .minimize(&piece.c)
            .map_err(|e| Error::lp(format!("lower bound of leaf {id}"), e))?;
        let hi = lp
            .maximize(&piece.c)
            .map_err(|e| Error::lp(format!("upper bound of leaf {id}"), e))?;
        if lo.status != LpStatus::Optimal || hi.status != LpStatus::Optimal {
            return Err(Error::lp(
                format!("bounds of leaf {id}"),
                crate::geometry::GeometryError::NumericalFailure(format!("{:?}/{:?}", lo.status, hi.status)),
            ));
        }
        let (lo, hi) = (lo.value + piece.d, hi.value + piece.d);
        let node = &mut tree.nodes[id];
        node.v_lower = Some(lo);
        node.v_upper = Some(hi);
    }
    // children always have larger ids than their parent
    for id in (0..tree.nodes.len()).rev() {
        if tree.nodes[id].is_leaf() {
            continue;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &c in &tree.nodes[id].children {
            lo = lo.min(tree.nodes[c].v_lower.unwrap());
            hi = hi.max(tree.nodes[c].v_upper.unwrap());
        }
        tree.nodes[id].v_lower = Some(lo);
        tree.nodes[id].v_upper = Some(hi);
    }
    tree.stats.annotate_seconds = start.elapsed().as_secs_f64();
    Ok(())
}

/// Builds and annotates in one call.
pub fn build_annotated(net: &PwaNetwork, domain: &Polytope) -> Result<PartitionTree> {
    let mut t = build_partition_tree(net, domain)?;
    annotate_lower_bounds(&mut t)?;
    Ok(t)
}

/// Evaluates the leaf piece at `x` (no containment check).
pub fn leaf_value(node: &PartitionNode, x: &[f64]) -> f64 {
    let p = &node.leaf.as_ref().expect("leaf node").piece;
    dot(&p.c, x) + p.d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwanet::tests::{abs_net, random_net};
    use crate::pwanet::{Activation, Layer};

    #[test]
    fn abs_tree() {
        let net = abs_net();
        let dom = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let tree = build_annotated(&net, &dom).unwrap();
        assert_eq!(tree.num_leaves(), 2);
        let mut cs: Vec<f64> = tree.leaves().map(|l| l.leaf.as_ref().unwrap().piece.c[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![-1.0, 1.0]);
        assert!(tree
            .leaves()
            .all(|l| l.v_lower == Some(0.0) || l.v_lower.unwrap().abs() < 1e-12));
        assert!(tree.root().v_lower.unwrap().abs() < 1e-12);
        let leaf = tree.locate(&net, &[0.5]).unwrap();
        assert_eq!(leaf.leaf.as_ref().unwrap().piece.c, vec![1.0]);
        let b = tree.locate(&net, &[0.0]).unwrap();
        assert_eq!(leaf_value(b, &[0.0]), 0.0);
        assert!(matches!(tree.locate(&net, &[1.5]), Err(Error::NotInDomain(_))));
    }

    #[test]
    fn two_crossing_neurons_give_four_leaves() {
        let net = PwaNetwork::new(
            2,
            vec![
                Layer::new(vec![vec![1.0, 0.3], vec![-0.2, 1.0]], vec![0.1, -0.1]),
                Layer::new(vec![vec![1.0, 1.0]], vec![0.0]),
            ],
            Activation::Relu,
        )
        .unwrap();
        let dom = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(build_partition_tree(&net, &dom).unwrap().num_leaves(), 4);
    }

    #[test]
    fn unbounded_domain_rejected() {
        let net = abs_net();
        assert!(matches!(
            build_partition_tree(&net, &Polytope::whole(1)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn json_roundtrip_preserves_lookup() {
        let net = random_net(&[4, 3], 2, 7, true);
        let dom = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let tree = build_annotated(&net, &dom).unwrap();
        let back = PartitionTree::from_json(&tree.to_json().unwrap()).unwrap();
        assert_eq!(back.num_leaves(), tree.num_leaves());
        let x = [0.31, -0.42];
        assert_eq!(
            leaf_value(back.locate(&net, &x).unwrap(), &x),
            leaf_value(tree.locate(&net, &x).unwrap(), &x)
        );
    }
}
