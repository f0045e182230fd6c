use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{Boundary, DomainSpec, SdeSystem, TimeGrid};

/// Standard Brownian motion on `[0, L]` with absorbing ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Brownian1D {
    pub length: f64,
    pub t_max: f64,
    pub dt_sim: f64,
    pub dt_obs: f64,
    pub x0: f64,
    #[serde(skip)]
    domain: Option<DomainSpec>,
}

impl Default for Brownian1D {
    fn default() -> Self {
        Self {
            length: 6.0,
            t_max: 3.0,
            dt_sim: 5e-4,
            dt_obs: 0.05,
            x0: 1.0,
            domain: None,
        }
        .finish()
        .expect("default parameters are valid")
    }
}

impl Brownian1D {
    pub fn new(length: f64, x0: f64) -> Result<Self> {
        Self {
            length,
            x0,
            ..Self::default()
        }
        .finish()
    }

    /// Validates the parameters and builds the domain; call after
    /// deserializing or editing fields.
    pub fn finish(mut self) -> Result<Self> {
        if !(self.length > 0.0) {
            return Err(Error::config(format!("length must be positive, got {}", self.length)));
        }
        if !(self.x0 > 0.0 && self.x0 < self.length) {
            return Err(Error::config(format!("x0={} must lie in (0, {})", self.x0, self.length)));
        }
        self.time_grid()?;
        self.domain = Some(DomainSpec::new(vec![0.0], vec![self.length], vec![Boundary::AbsorbingBoth])?);
        Ok(self)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.dt_sim, self.dt_obs, self.t_max)
    }
}

impl SdeSystem for Brownian1D {
    fn domain(&self) -> &DomainSpec {
        self.domain.as_ref().expect("Brownian1D::finish was not called")
    }

    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn diffusion(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// Probability that standard Brownian motion started at `x` leaves `[0, L]`
/// within time `dt`, from the truncated eigenfunction series.
pub fn exit_prob_series_1d(x: f64, dt: f64, length: f64, n_terms: usize) -> Result<f64> {
    if !(0.0..=length).contains(&x) {
        return Err(Error::Domain(format!("x={x} is outside [0, {length}]")));
    }
    if !(dt > 0.0) || n_terms == 0 {
        return Err(Error::config(format!("need dt > 0 and at least one term (dt={dt}, n_terms={n_terms})")));
    }
    let mut survival = 0.0;
    for k in 0..n_terms {
        let m = (2 * k + 1) as f64 * PI;
        let decay = (-0.5 * (m / length).powi(2) * dt).exp();
        if decay == 0.0 {
            break;
        }
        survival += 4.0 / m * (m * x / length).sin() * decay;
    }
    Ok((1.0 - survival).clamp(0.0, 1.0))
}
