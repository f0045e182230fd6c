use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{Boundary, DomainSpec, SdeSystem, TimeGrid};

/// Steady two-cell flow field `(v1, v2)` at `(x1, x2)` with wave number `n`.
pub fn cellular_velocity(x1: f64, x2: f64, n: f64) -> (f64, f64) {
    let (s2, c2) = (PI * x2).sin_cos();
    let (s1, c1) = (n * x1).sin_cos();
    (-PI * c2 * s1, n * s2 * c1)
}

/// Advection–diffusion in a cellular flow: periodic in `x1 ∈ [−π, π)`,
/// absorbing at `x2 ∈ {0, L}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellularFlow2D {
    pub peclet: f64,
    pub n: u32,
    pub length: f64,
    pub t_max: f64,
    pub dt_sim: f64,
    pub dt_obs: f64,
    /// Point-mass initial condition used for distribution comparisons.
    pub x0: [f64; 2],
    #[serde(skip)]
    domain: Option<DomainSpec>,
}

impl Default for CellularFlow2D {
    fn default() -> Self {
        Self {
            peclet: 5.0,
            n: 2,
            length: 2.0,
            t_max: 1.0,
            dt_sim: 5e-4,
            dt_obs: 0.05,
            x0: [0.0, 1.0],
            domain: None,
        }
        .finish()
        .expect("default parameters are valid")
    }
}

impl CellularFlow2D {
    pub fn finish(mut self) -> Result<Self> {
        if !(self.peclet > 0.0) || self.n == 0 || !(self.length > 0.0) {
            return Err(Error::config(format!(
                "need Pe > 0, n >= 1 and L > 0 (Pe={}, n={}, L={})",
                self.peclet, self.n, self.length
            )));
        }
        self.time_grid()?;
        let domain = DomainSpec::new(vec![-PI, 0.0], vec![PI, self.length], vec![Boundary::Periodic, Boundary::AbsorbingBoth])?;
        if !domain.is_inside(&self.x0) {
            return Err(Error::config(format!("x0={:?} is not inside the domain", self.x0)));
        }
        self.domain = Some(domain);
        Ok(self)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.dt_sim, self.dt_obs, self.t_max)
    }
}

impl SdeSystem for CellularFlow2D {
    fn domain(&self) -> &DomainSpec {
        self.domain.as_ref().expect("CellularFlow2D::finish was not called")
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (v1, v2) = cellular_velocity(x[0], x[1], f64::from(self.n));
        out[0] = self.peclet * v1;
        out[1] = self.peclet * v2;
    }

    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = 1.0;
    }
}
