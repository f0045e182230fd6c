//! Euler–Maruyama simulation of autonomous SDEs with diagonal noise in a
//! box-shaped domain.
//!
//! Exit detection is discrete: a particle exits iff the state after a full
//! simulation step violates an absorbing bound. Reflecting bounds fold the
//! state back (`x' = 2·bound − x`, repeated for large overshoots) and periodic
//! dimensions wrap into `[lower, upper)`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, StreamRng};

/// Per-dimension boundary behavior.
///
/// `AbsorbingUpper` absorbs at the upper bound and reflects at the lower one;
/// `AbsorbingLower` is the mirror image. `Free` ignores both bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    AbsorbingBoth,
    AbsorbingUpper,
    AbsorbingLower,
    Reflecting,
    Periodic,
    Free,
}

impl Boundary {
    fn absorbs_lower(self) -> bool {
        matches!(self, Boundary::AbsorbingBoth | Boundary::AbsorbingLower)
    }

    fn absorbs_upper(self) -> bool {
        matches!(self, Boundary::AbsorbingBoth | Boundary::AbsorbingUpper)
    }

    pub fn is_absorbing(self) -> bool {
        self.absorbs_lower() || self.absorbs_upper()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    behavior: Vec<Boundary>,
}

impl DomainSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, behavior: Vec<Boundary>) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || behavior.len() != d {
            return Err(Error::config(format!(
                "domain needs matching non-empty bounds, got lower={} upper={} behavior={}",
                lower.len(),
                upper.len(),
                behavior.len()
            )));
        }
        for i in 0..d {
            if behavior[i] != Boundary::Free && !(lower[i] < upper[i]) {
                return Err(Error::config(format!(
                    "dimension {i}: lower bound {} must be below upper bound {}",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            behavior,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn behavior(&self) -> &[Boundary] {
        &self.behavior
    }

    pub fn has_absorbing(&self) -> bool {
        self.behavior.iter().any(|b| b.is_absorbing())
    }

    /// True iff `x` lies strictly inside every absorbing bound.
    pub fn is_inside(&self, x: &[f64]) -> bool {
        !self.violates_absorbing(x)
    }

    /// True iff `x` has reached or crossed an absorbing bound.
    pub fn violates_absorbing(&self, x: &[f64]) -> bool {
        self.behavior.iter().enumerate().any(|(i, b)| {
            (b.absorbs_lower() && x[i] <= self.lower[i]) || (b.absorbs_upper() && x[i] >= self.upper[i])
        })
    }

    /// Wraps periodic dimensions and folds reflecting sides, then reports
    /// whether an absorbing bound is violated.
    pub fn apply(&self, x: &mut [f64]) -> bool {
        for i in 0..x.len() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            x[i] = match self.behavior[i] {
                Boundary::Periodic => wrap(x[i], lo, hi),
                Boundary::Reflecting => fold_between(x[i], lo, hi),
                Boundary::AbsorbingUpper if x[i] < lo => 2.0 * lo - x[i],
                Boundary::AbsorbingLower if x[i] > hi => 2.0 * hi - x[i],
                _ => x[i],
            };
        }
        self.violates_absorbing(x)
    }

    /// Like [`apply`](Self::apply) but treats absorbing bounds as reflecting,
    /// so the result is always strictly inside. Returns whether any absorbing
    /// bound had to be folded.
    pub fn apply_confining(&self, x: &mut [f64]) -> bool {
        let mut clamped = false;
        for i in 0..x.len() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            x[i] = match self.behavior[i] {
                Boundary::Periodic => wrap(x[i], lo, hi),
                Boundary::Free => x[i],
                b => {
                    if (b.absorbs_lower() && x[i] <= lo) || (b.absorbs_upper() && x[i] >= hi) {
                        clamped = true;
                    }
                    let mut y = fold_between(x[i], lo, hi);
                    if b.absorbs_lower() && y <= lo {
                        y = next_up(lo);
                    }
                    if b.absorbs_upper() && y >= hi {
                        y = next_down(hi);
                    }
                    y
                }
            };
        }
        clamped
    }

    /// Minimal-image increment for periodic dimensions, `[−period/2, period/2)`.
    pub fn minimal_image(&self, dx: &mut [f64]) {
        for i in 0..dx.len() {
            if self.behavior[i] == Boundary::Periodic {
                let period = self.upper[i] - self.lower[i];
                dx[i] = wrap(dx[i], -0.5 * period, 0.5 * period);
            }
        }
    }
}

fn wrap(x: f64, lo: f64, hi: f64) -> f64 {
    let period = hi - lo;
    let y = lo + (x - lo).rem_euclid(period);
    if y >= hi {
        lo
    } else {
        y
    }
}

fn fold_between(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let w = hi - lo;
    if x < lo && lo - x <= w {
        return lo + (lo - x);
    }
    if x > hi && x - hi <= w {
        return hi - (x - hi);
    }
    let y = (x - lo).rem_euclid(2.0 * w);
    lo + if y > w { 2.0 * w - y } else { y }
}

fn next_up(x: f64) -> f64 {
    x + f64::EPSILON * x.abs().max(1.0)
}

fn next_down(x: f64) -> f64 {
    x - f64::EPSILON * x.abs().max(1.0)
}

/// Autonomous SDE `dX = a(X) dt + diag(b(X)) dW` in a domain.
pub trait SdeSystem: Sync {
    fn domain(&self) -> &DomainSpec;

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Diagonal of the diffusion matrix.
    fn diffusion(&self, x: &[f64], out: &mut [f64]);

    fn dim(&self) -> usize {
        self.domain().dim()
    }
}

/// SDE assembled from closures, mostly for tests and small experiments.
pub struct FnSystem<A, B> {
    pub domain: DomainSpec,
    pub drift: A,
    pub diffusion: B,
}

impl<A, B> SdeSystem for FnSystem<A, B>
where
    A: Fn(&[f64], &mut [f64]) + Sync,
    B: Fn(&[f64], &mut [f64]) + Sync,
{
    fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
}

/// Reusable Euler–Maruyama stepper holding scratch buffers.
pub struct Stepper<'a, S: ?Sized> {
    sys: &'a S,
    drift: Vec<f64>,
    diff: Vec<f64>,
}

impl<'a, S: SdeSystem + ?Sized> Stepper<'a, S> {
    pub fn new(sys: &'a S) -> Self {
        let d = sys.dim();
        Self {
            sys,
            drift: vec![0.0; d],
            diff: vec![0.0; d],
        }
    }

    /// Advances `x` in place and returns whether it exited.
    pub fn step(&mut self, x: &mut [f64], dt: f64, noise: &[f64]) -> Result<bool> {
        self.sys.drift(x, &mut self.drift);
        self.sys.diffusion(x, &mut self.diff);
        if self.drift.iter().chain(self.diff.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite drift or diffusion", x));
        }
        let sq = dt.sqrt();
        for i in 0..x.len() {
            x[i] += self.drift[i] * dt + self.diff[i] * sq * noise[i];
        }
        Ok(self.sys.domain().apply(x))
    }
}

/// One Euler–Maruyama step. The crossing state is returned unmodified when
/// the step exits.
pub fn step_euler_maruyama<S: SdeSystem + ?Sized>(
    sys: &S,
    x: &[f64],
    dt: f64,
    noise: &[f64],
) -> Result<(Vec<f64>, bool)> {
    if !(dt > 0.0) {
        return Err(Error::config(format!("time step must be positive, got {dt}")));
    }
    if x.len() != sys.dim() || noise.len() != sys.dim() {
        return Err(Error::Shape(format!(
            "state/noise width {}/{} does not match system dimension {}",
            x.len(),
            noise.len(),
            sys.dim()
        )));
    }
    if !sys.domain().is_inside(x) {
        return Err(Error::Domain(format!("state {x:?} is not inside the domain")));
    }
    let mut next = x.to_vec();
    let exited = Stepper::new(sys).step(&mut next, dt, noise)?;
    Ok((next, exited))
}

/// Time stepping of a simulation run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt_sim: f64,
    pub dt_obs: f64,
    pub t_max: f64,
}

impl TimeGrid {
    pub fn new(dt_sim: f64, dt_obs: f64, t_max: f64) -> Result<Self> {
        let grid = Self {
            dt_sim,
            dt_obs,
            t_max,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_sim > 0.0 && self.dt_obs > 0.0 && self.t_max > 0.0) {
            return Err(Error::config(format!("time grid must be positive: {self:?}")));
        }
        integer_ratio(self.dt_obs, self.dt_sim, "dt_obs", "dt_sim")?;
        integer_ratio(self.t_max, self.dt_obs, "t_max", "dt_obs")?;
        Ok(())
    }

    /// Simulation steps per observation interval.
    pub fn substeps(&self) -> usize {
        (self.dt_obs / self.dt_sim).round() as usize
    }

    /// Number of observation intervals up to `t_max`.
    pub fn n_obs(&self) -> usize {
        (self.t_max / self.dt_obs).round() as usize
    }

    /// Observation index of time `t`, if `t` lies on the observation mesh.
    pub fn obs_index(&self, t: f64) -> Result<usize> {
        let k = integer_ratio(t, self.dt_obs, "time", "dt_obs")?;
        if k > self.n_obs() {
            return Err(Error::config(format!("time {t} is beyond t_max {}", self.t_max)));
        }
        Ok(k)
    }
}

fn integer_ratio(num: f64, den: f64, a: &str, b: &str) -> Result<usize> {
    let r = num / den;
    let k = r.round();
    if k < 0.0 || (r - k).abs() > 1e-9 * r.abs().max(1.0) {
        return Err(Error::config(format!("{a}={num} is not an integer multiple of {b}={den}")));
    }
    Ok(k as usize)
}

/// Exit event of a trajectory: it left the domain during the observation
/// interval ending at `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitEvent {
    pub step: usize,
    /// State at the simulation step that crossed the bound; empty when the
    /// exit was decided without a crossing state (surrogate trajectories).
    pub crossing: Vec<f64>,
}

/// States recorded on the observation mesh.
///
/// `states` holds the in-domain states at indices `0..=n` (flattened). If the
/// trajectory exited, `exit.step == n + 1` is its final index `L`; otherwise
/// the final index is `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub dt_obs: f64,
    pub states: Vec<f64>,
    pub exit: Option<ExitEvent>,
}

impl Trajectory {
    pub fn new(dim: usize, dt_obs: f64, x0: &[f64]) -> Self {
        Self {
            dim,
            dt_obs,
            states: x0.to_vec(),
            exit: None,
        }
    }

    pub fn n_states(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.n_states() - 1)
    }

    pub fn push(&mut self, x: &[f64]) {
        self.states.extend_from_slice(x);
    }

    pub fn exited(&self) -> bool {
        self.exit.is_some()
    }

    /// Final (stopping) index `L`: the number of recorded transitions.
    pub fn final_index(&self) -> usize {
        match &self.exit {
            Some(e) => e.step,
            None => self.n_states() - 1,
        }
    }

    /// Whether the particle is still in the domain at observation index `k`.
    pub fn confined_at(&self, k: usize) -> bool {
        match &self.exit {
            Some(e) => k < e.step,
            None => true,
        }
    }

    /// Position at observation index `k` if the particle is still confined
    /// and the index was recorded.
    pub fn position_at(&self, k: usize) -> Option<&[f64]> {
        (self.confined_at(k) && k < self.n_states()).then(|| self.state(k))
    }
}

/// Simulates one trajectory, recording every `dt_obs` and stopping at the
/// first exit or at `t_max`.
pub fn simulate_trajectory<S, R>(sys: &S, x0: &[f64], grid: &TimeGrid, rng: &mut R) -> Result<Trajectory>
where
    S: SdeSystem + ?Sized,
    R: Rng + ?Sized,
{
    grid.validate()?;
    let d = sys.dim();
    if x0.len() != d {
        return Err(Error::Shape(format!("initial state has width {}, expected {d}", x0.len())));
    }
    if !sys.domain().is_inside(x0) {
        return Err(Error::Domain(format!("initial state {x0:?} is not inside the domain")));
    }
    let mut traj = Trajectory::new(d, grid.dt_obs, x0);
    traj.states.reserve(grid.n_obs() * d);
    let mut stepper = Stepper::new(sys);
    let mut x = x0.to_vec();
    let mut noise = vec![0.0; d];
    let sub = grid.substeps();
    for k in 1..=grid.n_obs() {
        for _ in 0..sub {
            for n in noise.iter_mut() {
                *n = rng.sample(StandardNormal);
            }
            if stepper.step(&mut x, grid.dt_sim, &noise)? {
                traj.exit = Some(ExitEvent {
                    step: k,
                    crossing: x,
                });
                return Ok(traj);
            }
        }
        traj.push(&x);
    }
    Ok(traj)
}

/// `n_traj` independent trajectories; trajectory `i` draws its initial state
/// and noise from stream `i` of `seed`.
pub fn simulate_ensemble<S, F>(sys: &S, x0_sampler: F, n_traj: usize, grid: &TimeGrid, seed: u64) -> Result<Vec<Trajectory>>
where
    S: SdeSystem + ?Sized,
    F: Fn(&mut StreamRng) -> Vec<f64> + Sync,
{
    if n_traj == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    grid.validate()?;
    (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let x0 = x0_sampler(&mut rng);
            simulate_trajectory(sys, &x0, grid, &mut rng)
        })
        .collect()
}

/// Fraction of trajectories still confined at observation index `k`.
pub fn confined_fraction(trajs: &[Trajectory], k: usize) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    trajs.iter().filter(|t| t.confined_at(k)).count() as f64 / trajs.len() as f64
}
