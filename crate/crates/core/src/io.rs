//! File formats: network weights, constraint sets, tree caches and artifact headers.
//!
//! Every JSON document carries `"schema_version": 1`. Reals go through
//! `serde_json`'s shortest round-trip formatting, so a weight file written and
//! read back reproduces the network bit for bit.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::capi::{box_constraints, ConstraintPiece, PwaConstraint};
use crate::error::{Error, Result};
use crate::geometry::{Halfspace, Polytope};
use crate::partition::PartitionTree;
use crate::pwanet::{Activation, AffinePiece, Layer, PwaNetwork};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "capiset";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// On-disk form of a [`PwaNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub input_dim: usize,
    pub activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_slope: Option<f64>,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub metadata: Value,
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

fn check_version(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported schema_version {found}, expected {SCHEMA_VERSION}"
        )));
    }
    Ok(())
}

impl WeightFile {
    pub fn from_network(net: &PwaNetwork, metadata: Value) -> Self {
        let (activation, negative_slope) = match net.activation() {
            Activation::Relu => ("relu".to_string(), None),
            Activation::LeakyRelu(s) => ("leaky_relu".to_string(), Some(s)),
        };
        WeightFile {
            schema_version: SCHEMA_VERSION,
            input_dim: net.input_dim(),
            activation,
            negative_slope,
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
            metadata,
        }
    }

    pub fn to_network(&self) -> Result<PwaNetwork> {
        check_version(self.schema_version)?;
        let activation = match (self.activation.as_str(), self.negative_slope) {
            ("relu", None) => Activation::Relu,
            ("leaky_relu", Some(s)) => Activation::LeakyRelu(s),
            ("leaky_relu", None) => return Err(Error::Schema("leaky_relu requires negative_slope".into())),
            (a, _) => return Err(Error::Schema(format!("unknown activation `{a}`"))),
        };
        let layers = self
            .layers
            .iter()
            .map(|l| Layer::new(l.weights.clone(), l.bias.clone()))
            .collect();
        Ok(PwaNetwork::new(self.input_dim, layers, activation)?)
    }
}

pub fn network_to_json(net: &PwaNetwork, metadata: Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(&WeightFile::from_network(net, metadata))?)
}

/// Parses a weight file into the network and its metadata block.
pub fn network_from_json(text: &str) -> Result<(PwaNetwork, Value)> {
    let file: WeightFile = serde_json::from_str(text).map_err(|e| Error::Schema(format!("weight file: {e}")))?;
    Ok((file.to_network()?, file.metadata))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBound {
    pub coord: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfspaceRecord {
    pub normal: Vec<f64>,
    pub offset: f64,
}

/// One affine piece `C·x + d` on a region; pieces sharing a name form one constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwaPieceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub halfspaces: Vec<HalfspaceRecord>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexRecord {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub boxes: Vec<BoxBound>,
    #[serde(default)]
    pub pwa: Vec<PwaPieceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convex_polytope: Option<ConvexRecord>,
}

/// Constraints of a file resolved against the state box `domain`.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    /// Box bounds followed by PWA constraints, in file order.
    pub constraints: Vec<PwaConstraint>,
    /// The convex admissible set `{A x ≤ b}`, if given.
    pub convex: Option<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl ConstraintFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: ConstraintFile =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("constraint file: {e}")))?;
        check_version(f.schema_version)?;
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Box bounds with `|coord| ≤ bound[coord]` for every present entry.
    pub fn symmetric_boxes(bounds: &[(usize, f64)]) -> Self {
        ConstraintFile {
            schema_version: SCHEMA_VERSION,
            boxes: bounds
                .iter()
                .flat_map(|&(coord, b)| {
                    [
                        BoxBound {
                            coord,
                            upper: Some(b),
                            lower: None,
                        },
                        BoxBound {
                            coord,
                            upper: None,
                            lower: Some(-b),
                        },
                    ]
                })
                .collect(),
            ..Default::default()
        }
    }

    pub fn resolve(&self, domain: &Polytope) -> Result<ConstraintSet> {
        let n = domain.dim();
        let mut constraints = Vec::new();
        for b in &self.boxes {
            if b.coord >= n {
                return Err(Error::Schema(format!(
                    "box coord {} out of range for dimension {n}",
                    b.coord
                )));
            }
            if b.upper.is_some() == b.lower.is_some() {
                return Err(Error::Schema(format!(
                    "box entry for coord {} needs exactly one of `upper` and `lower`",
                    b.coord
                )));
            }
            let mut lo = vec![None; n];
            let mut hi = vec![None; n];
            lo[b.coord] = b.lower;
            hi[b.coord] = b.upper;
            constraints.extend(box_constraints(&lo, &hi, domain)?);
        }
        let mut groups: Vec<(String, Vec<ConstraintPiece>)> = Vec::new();
        for (k, p) in self.pwa.iter().enumerate() {
            if p.c.len() != n || p.halfspaces.iter().any(|h| h.normal.len() != n) {
                return Err(Error::Schema(format!("pwa piece {k} does not match dimension {n}")));
            }
            let mut region = domain.clone();
            for h in &p.halfspaces {
                region.push(Halfspace::new(h.normal.clone(), h.offset)?)?;
            }
            let piece = ConstraintPiece {
                region,
                piece: AffinePiece { c: p.c.clone(), d: p.d },
            };
            let name = p.name.clone().unwrap_or_else(|| format!("pwa {k}"));
            match groups.iter_mut().find(|g| g.0 == name) {
                Some(g) => g.1.push(piece),
                None => groups.push((name, vec![piece])),
            }
        }
        for (name, pieces) in groups {
            constraints.push(PwaConstraint::new(name, pieces)?);
        }
        let convex = match &self.convex_polytope {
            Some(c) => {
                if c.a.len() != c.b.len() || c.a.iter().any(|r| r.len() != n) {
                    return Err(Error::Schema("convex_polytope rows do not match".into()));
                }
                Some((c.a.clone(), c.b.clone()))
            }
            None => None,
        };
        Ok(ConstraintSet { constraints, convex })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDocument {
    schema_version: u32,
    #[serde(default)]
    metadata: Value,
    tree: Value,
}

/// Tree cache document; `metadata` carries the header and build statistics.
pub fn tree_to_json(tree: &PartitionTree, metadata: Value) -> Result<String> {
    let doc = TreeDocument {
        schema_version: SCHEMA_VERSION,
        metadata,
        tree: serde_json::from_str(&tree.to_json()?)?,
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn tree_from_json(text: &str) -> Result<(PartitionTree, Value)> {
    let doc: TreeDocument = serde_json::from_str(text).map_err(|e| Error::Schema(format!("tree file: {e}")))?;
    check_version(doc.schema_version)?;
    Ok((PartitionTree::from_json(&doc.tree.to_string())?, doc.metadata))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance block embedded in every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub seed: Option<u64>,
    /// `(label, sha256)` per input file.
    pub inputs: Vec<(String, String)>,
}

impl ArtifactHeader {
    pub fn new(seed: Option<u64>) -> Self {
        ArtifactHeader {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            schema_version: SCHEMA_VERSION,
            seed,
            inputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, label: impl Into<String>, bytes: &[u8]) -> Self {
        self.inputs.push((label.into(), sha256_hex(bytes)));
        self
    }

    /// Comment lines for a CSV file, each starting with `# `.
    pub fn csv_lines(&self) -> String {
        let mut s = format!(
            "# {} {} schema_version={}\n",
            self.tool, self.version, self.schema_version
        );
        match self.seed {
            Some(seed) => s.push_str(&format!("# seed={seed}\n")),
            None => s.push_str("# seed=none\n"),
        }
        for (label, hash) in &self.inputs {
            s.push_str(&format!("# input {label} sha256={hash}\n"));
        }
        s
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("header serializes")
    }
}

/// Strips `# ` comment lines from a CSV body.
pub fn csv_body(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pwanet::tests::random_net;

    #[test]
    fn weights_round_trip_bit_exact() {
        let net = random_net(&[5, 3], 2, 11, true);
        let text = network_to_json(&net, serde_json::json!({"k": 1})).unwrap();
        let (back, meta) = network_from_json(&text).unwrap();
        assert_eq!(back.layers(), net.layers());
        assert_eq!(meta["k"], 1);
    }

    #[test]
    fn weight_schema_errors() {
        let bad = r#"{"input_dim": 1, "activation": "tanh", "layers": [{"weights": [[1.0]], "bias": [0.0]}]}"#;
        assert!(matches!(network_from_json(bad), Err(Error::Schema(_))));
        let bad = r#"{"schema_version": 2, "input_dim": 1, "activation": "relu", "layers": []}"#;
        assert!(matches!(network_from_json(bad), Err(Error::Schema(_))));
        let bad = r#"{"input_dim": 1, "activation": "relu", "layers": [], "extra": 0}"#;
        assert!(matches!(network_from_json(bad), Err(Error::Schema(_))));
    }

    #[test]
    fn constraint_file_resolves_boxes_and_pwa() {
        let text = r#"{
            "boxes": [{"coord": 0, "upper": 0.5}, {"coord": 1, "lower": -0.25}],
            "pwa": [
                {"name": "abs", "halfspaces": [{"normal": [-1.0, 0.0], "offset": 0.0}], "C": [1.0, 0.0], "d": -0.3},
                {"name": "abs", "halfspaces": [{"normal": [1.0, 0.0], "offset": 0.0}], "C": [-1.0, 0.0], "d": -0.3}
            ],
            "convex_polytope": {"A": [[1.0, 0.0]], "b": [0.5]}
        }"#;
        let f = ConstraintFile::from_json(text).unwrap();
        let dom = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let set = f.resolve(&dom).unwrap();
        assert_eq!(set.constraints.len(), 3);
        assert_eq!(set.constraints[2].name, "abs");
        assert_eq!(set.constraints[2].eval(&[-0.5, 0.0]), Some(0.2));
        assert_eq!(set.constraints[0].eval(&[0.75, 0.0]), Some(0.25));
        assert!(set.convex.is_some());
        let bad = r#"{"boxes": [{"coord": 0, "upper": 1.0, "lower": 0.0}]}"#;
        assert!(ConstraintFile::from_json(bad).unwrap().resolve(&dom).is_err());
        let bad = r#"{"boxes": [{"coord": 5, "upper": 1.0}]}"#;
        assert!(ConstraintFile::from_json(bad).unwrap().resolve(&dom).is_err());
    }

    #[test]
    fn header_lines() {
        let h = ArtifactHeader::new(Some(3)).with_input("w", b"abc");
        let s = h.csv_lines();
        assert!(s.contains("# seed=3"));
        assert!(s.contains("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"));
        assert_eq!(
            csv_body(&format!("{s}a,b\n1,2\n")).collect::<Vec<_>>(),
            vec!["a,b", "1,2"]
        );
    }
}
