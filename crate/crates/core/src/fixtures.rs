//! Committed networks, constraint sets and golden values.
//!
//! Regenerate with `cargo run --release -p capiset --example generate_fixtures`.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimator::EstimatorNet;
use crate::geometry::Polytope;
use crate::io::{network_from_json, ConstraintFile};
use crate::pwanet::PwaNetwork;
use crate::systems::SystemSpec;

pub const PENDULUM_LYAPUNOV_JSON: &str = include_str!("../fixtures/pendulum_lyapunov.json");
pub const CARTPOLE_LYAPUNOV_JSON: &str = include_str!("../fixtures/cartpole_lyapunov.json");
pub const CARTPOLE_ESTIMATOR_JSON: &str = include_str!("../fixtures/cartpole_estimator.json");
pub const PENDULUM_CONSTRAINTS_JSON: &str = include_str!("../fixtures/pendulum_constraints.json");
pub const CARTPOLE_CONSTRAINTS_JSON: &str = include_str!("../fixtures/cartpole_constraints.json");
pub const GOLDEN_JSON: &str = include_str!("../fixtures/golden.json");

/// Gap between the cart-pole estimator's reference box and the position bounds;
/// the maximal level vanishes at the bounds themselves.
pub const CARTPOLE_REFERENCE_MARGIN: f64 = 0.005;

/// Lyapunov network for `system` (`"pendulum"` or `"cartpole"`).
pub fn lyapunov_json(system: &str) -> Result<&'static str> {
    match system {
        "pendulum" => Ok(PENDULUM_LYAPUNOV_JSON),
        "cartpole" => Ok(CARTPOLE_LYAPUNOV_JSON),
        other => Err(Error::Input(format!("no fixture for system `{other}`"))),
    }
}

pub fn constraints_json(system: &str) -> Result<&'static str> {
    match system {
        "pendulum" => Ok(PENDULUM_CONSTRAINTS_JSON),
        "cartpole" => Ok(CARTPOLE_CONSTRAINTS_JSON),
        other => Err(Error::Input(format!("no fixture for system `{other}`"))),
    }
}

pub fn lyapunov(system: &str) -> Result<PwaNetwork> {
    Ok(network_from_json(lyapunov_json(system)?)?.0)
}

pub fn constraints(system: &str) -> Result<ConstraintFile> {
    ConstraintFile::from_json(constraints_json(system)?)
}

pub fn pendulum_lyapunov() -> PwaNetwork {
    lyapunov("pendulum").expect("committed fixture parses")
}

pub fn cartpole_lyapunov() -> PwaNetwork {
    lyapunov("cartpole").expect("committed fixture parses")
}

pub fn cartpole_estimator() -> EstimatorNet {
    EstimatorNet::from_json(CARTPOLE_ESTIMATOR_JSON).expect("committed fixture parses")
}

/// Reference box the cart-pole estimator was trained and verified on.
pub fn cartpole_estimator_domain() -> Polytope {
    let s = SystemSpec::cartpole();
    Polytope::from_box(
        &[s.ref_lo[0] + CARTPOLE_REFERENCE_MARGIN],
        &[s.ref_hi[0] - CARTPOLE_REFERENCE_MARGIN],
    )
    .expect("valid box")
}

#[derive(Clone, Debug, Deserialize)]
pub struct Golden {
    pub pendulum_gamma_r0: f64,
    pub cartpole_gamma_r0: f64,
    pub cartpole_leaves: usize,
}

pub fn golden() -> Golden {
    serde_json::from_str(GOLDEN_JSON).expect("committed golden values parse")
}
