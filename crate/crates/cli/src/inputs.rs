//! Loading of systems, networks, constraint sets and tree caches, with the
//! hashes that go into artifact headers.

use std::fs;
use std::path::{Path, PathBuf};

use capiset::estimator::EstimatorNet;
use capiset::fixtures;
use capiset::geometry::Polytope;
use capiset::io::{network_from_json, tree_from_json, ArtifactHeader, ConstraintFile, ConstraintSet};
use capiset::partition::{build_annotated, PartitionTree};
use capiset::pwanet::PwaNetwork;
use capiset::systems::SystemSpec;
use capiset::Error;
use clap::Args;
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Args, Clone, Debug)]
pub struct SystemArgs {
    /// Built-in system: `pendulum` or `cartpole`.
    #[arg(long, default_value = "pendulum")]
    pub system: String,
    /// JSON system description replacing the built-in parameters.
    #[arg(long)]
    pub system_file: Option<PathBuf>,
    /// Lyapunov network weights (defaults to the committed fixture).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Constraint file (defaults to the committed fixture).
    #[arg(long)]
    pub constraints: Option<PathBuf>,
}

pub fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_artifact(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|source| CliError::File {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Reads `path` or falls back to a committed fixture, recording the hash.
fn source_text(
    path: Option<&Path>,
    fallback: impl FnOnce() -> capiset::Result<&'static str>,
    label: &str,
    header: &mut ArtifactHeader,
) -> CliResult<String> {
    let text = match path {
        Some(p) => read(p)?,
        None => fallback()
            .map_err(|e| CliError::Usage(format!("--{label} is required here ({e})")))?
            .to_string(),
    };
    header
        .inputs
        .push((label.to_string(), capiset::io::sha256_hex(text.as_bytes())));
    Ok(text)
}

pub struct Loaded {
    pub system: SystemSpec,
    pub v_net: PwaNetwork,
    pub weights_hash: String,
    pub constraint_file: ConstraintFile,
    pub header: ArtifactHeader,
}

impl Loaded {
    pub fn constraints(&self) -> CliResult<ConstraintSet> {
        Ok(self.constraint_file.resolve(&self.system.state_domain())?)
    }
}

/// System, Lyapunov network and constraint file for a command.
pub fn load(args: &SystemArgs, seed: Option<u64>) -> CliResult<Loaded> {
    let mut header = ArtifactHeader::new(seed);
    let (system, name) = match &args.system_file {
        Some(path) => {
            let text = read(path)?;
            header = header.with_input("system", text.as_bytes());
            let spec: SystemSpec =
                serde_json::from_str(&text).map_err(|e| Error::Schema(format!("system file: {e}")))?;
            let name = spec.name.clone();
            (spec, name)
        }
        None => (SystemSpec::by_name(&args.system)?, args.system.clone()),
    };
    let fixture = if args.system_file.is_some() {
        String::new()
    } else {
        name
    };
    let wtext = source_text(
        args.weights.as_deref(),
        || fixtures::lyapunov_json(&fixture),
        "weights",
        &mut header,
    )?;
    let weights_hash = header.inputs.last().expect("just pushed").1.clone();
    let (v_net, _) = network_from_json(&wtext)?;
    if v_net.input_dim() != system.state_dim() {
        return Err(Error::Input(format!(
            "weights take {} inputs but `{}` has {} states",
            v_net.input_dim(),
            system.name,
            system.state_dim()
        ))
        .into());
    }
    let ctext = source_text(
        args.constraints.as_deref(),
        || fixtures::constraints_json(&fixture),
        "constraints",
        &mut header,
    )?;
    let constraint_file = ConstraintFile::from_json(&ctext)?;
    Ok(Loaded {
        system,
        v_net,
        weights_hash,
        constraint_file,
        header,
    })
}

/// Partition tree from a cache written by `build-tree`, or built afresh.
pub fn tree(loaded: &mut Loaded, cache: Option<&Path>) -> CliResult<PartitionTree> {
    match cache {
        Some(path) => {
            let text = read(path)?;
            loaded.header = loaded.header.clone().with_input("tree", text.as_bytes());
            let (tree, meta) = tree_from_json(&text)?;
            let built_from = meta.get("weights_sha256").and_then(Value::as_str);
            if built_from != Some(loaded.weights_hash.as_str()) {
                return Err(Error::Schema(format!(
                    "tree cache {} was not built from these weights",
                    path.display()
                ))
                .into());
            }
            Ok(tree)
        }
        None => Ok(build_annotated(&loaded.v_net, &loaded.system.domain())?),
    }
}

/// Estimator weights with the reference box they were trained on.
pub fn estimator(
    path: Option<&Path>,
    system: &SystemSpec,
    header: &mut ArtifactHeader,
) -> CliResult<(EstimatorNet, Polytope)> {
    let text = source_text(
        path,
        || match system.name.as_str() {
            "cartpole" => Ok(fixtures::CARTPOLE_ESTIMATOR_JSON),
            other => Err(Error::Input(format!("no estimator fixture for `{other}`"))),
        },
        "estimator",
        header,
    )?;
    let e = EstimatorNet::from_json(&text)?;
    let (_, meta) = network_from_json(&text)?;
    let bound = |key: &str| -> Option<Vec<f64>> { serde_json::from_value(meta.get(key)?.clone()).ok() };
    let domain = match (bound("reference_lo"), bound("reference_hi")) {
        (Some(lo), Some(hi)) => Polytope::from_box(&lo, &hi)?,
        _ => system.reference_domain(),
    };
    if e.reference_dim() != system.reference_dim() {
        return Err(Error::Input(format!(
            "estimator takes {} inputs but `{}` has {} references",
            e.reference_dim(),
            system.name,
            system.reference_dim()
        ))
        .into());
    }
    Ok((e, domain))
}

pub fn parse_list(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("`{t}` in `{text}` is not a number")))
        })
        .collect()
}
