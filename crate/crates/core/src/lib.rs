pub mod capi;
pub mod erg;
pub mod error;
pub mod estimator;
pub mod fixtures;
pub mod geometry;
pub mod io;
mod optim;
pub mod partition;
pub mod pwanet;
pub mod systems;

pub use error::{Error, Result};

/// Book chapters compiled as doctests so their examples stay in sync.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/partition.md")]
    pub struct Partition;
    #[doc = include_str!("../../../book/src/levels.md")]
    pub struct Levels;
    #[doc = include_str!("../../../book/src/estimator.md")]
    pub struct Estimator;
    #[doc = include_str!("../../../book/src/erg.md")]
    pub struct Erg;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
