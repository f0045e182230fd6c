//! The three benchmark systems and their reference formulas.

mod brownian;
mod cellular;
mod runaway;

pub use brownian::{exit_prob_series_1d, Brownian1D};
pub use cellular::{cellular_velocity, CellularFlow2D};
pub use runaway::{
    chandrasekhar, from_parallel_perp, pitch_angle, sample_truncated_maxwell, to_parallel_perp, Collisions, RunawayElectron3D,
};

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMap;
use crate::error::Result;
use crate::sde::{Boundary, DomainSpec, SdeSystem, TimeGrid};

/// Benchmark selection, as it appears in the `[problem]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Problem {
    Brownian1d(Brownian1D),
    Cellular2d(CellularFlow2D),
    Runaway3d(RunawayElectron3D),
}

impl Problem {
    pub fn name(&self) -> &'static str {
        match self {
            Problem::Brownian1d(_) => "brownian1d",
            Problem::Cellular2d(_) => "cellular2d",
            Problem::Runaway3d(_) => "runaway3d",
        }
    }

    /// Re-validates parameters and rebuilds derived state after
    /// deserialization.
    pub fn finish(self) -> Result<Self> {
        Ok(match self {
            Problem::Brownian1d(p) => Problem::Brownian1d(p.finish()?),
            Problem::Cellular2d(p) => Problem::Cellular2d(p.finish()?),
            Problem::Runaway3d(p) => Problem::Runaway3d(p.finish()?),
        })
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        match self {
            Problem::Brownian1d(p) => p.time_grid(),
            Problem::Cellular2d(p) => p.time_grid(),
            Problem::Runaway3d(p) => p.time_grid(),
        }
    }

    pub fn system(&self) -> &dyn SdeSystem {
        match self {
            Problem::Brownian1d(p) => p,
            Problem::Cellular2d(p) => p,
            Problem::Runaway3d(p) => p,
        }
    }

    pub fn dim(&self) -> usize {
        self.system().dim()
    }

    /// Coordinates the learned models operate in.
    pub fn feature_map(&self) -> FeatureMap {
        match self {
            Problem::Runaway3d(_) => FeatureMap::ParallelPerp,
            _ => FeatureMap::Identity,
        }
    }

    /// Domain expressed in feature coordinates; only its absorbing and
    /// periodic structure is used downstream.
    pub fn feature_domain(&self) -> DomainSpec {
        match self {
            Problem::Runaway3d(p) => DomainSpec::new(
                vec![-p.p_max, 0.0, 0.0],
                vec![p.p_max, p.p_max, 1.0],
                vec![Boundary::Free, Boundary::Free, Boundary::AbsorbingUpper],
            )
            .expect("valid by construction"),
            other => other.system().domain().clone(),
        }
    }
}
