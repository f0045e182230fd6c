//! Runaway-electron kinetics in `(p, ξ, r)`: relativistic momentum, pitch
//! cosine and minor radius, with electric acceleration, synchrotron damping,
//! Coulomb collisions and momentum-dependent radial diffusion.
//!
//! Momentum and pitch bounds reflect; only `r ≥ 1` removes a particle, and
//! `r = 0` reflects.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::{Boundary, DomainSpec, SdeSystem, TimeGrid};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunawayElectron3D {
    /// Effective ion charge.
    pub z: f64,
    /// Synchrotron time scale in collision times.
    pub tau: f64,
    pub e0: f64,
    /// Reference temperature.
    pub t_ref: f64,
    /// Post-quench temperature.
    pub t_final: f64,
    pub mc2: f64,
    pub d0: f64,
    pub r_m: f64,
    pub l_d: f64,
    pub delta_p: f64,
    /// Ratio of the post-quench to reference Coulomb logarithms.
    pub coulomb_log_ratio: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub dt_sim: f64,
    pub dt_obs: f64,
    pub t_max: f64,
    /// Initial radii are drawn uniformly from `(0, r_init_max)`.
    pub r_init_max: f64,
    #[serde(skip)]
    domain: Option<DomainSpec>,
}

impl Default for RunawayElectron3D {
    fn default() -> Self {
        Self {
            z: 1.0,
            tau: 6e3,
            e0: 1.0 / 2000.0,
            t_ref: 3.0,
            t_final: 0.05,
            mc2: 500.0,
            d0: 0.01,
            r_m: 0.5,
            l_d: 0.1,
            delta_p: 2.5,
            coulomb_log_ratio: 1.0,
            p_min: 0.5,
            p_max: 5.0,
            dt_sim: 0.005,
            dt_obs: 0.2,
            t_max: 20.0,
            r_init_max: 0.95,
            domain: None,
        }
        .finish()
        .expect("default parameters are valid")
    }
}

/// Collision coefficients at one momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Collisions {
    pub c_a: f64,
    pub c_f: f64,
    pub c_b: f64,
    pub dc_a_dp: f64,
}

impl RunawayElectron3D {
    pub fn finish(mut self) -> Result<Self> {
        let positive = [
            ("z", self.z),
            ("tau", self.tau),
            ("e0", self.e0),
            ("t_ref", self.t_ref),
            ("t_final", self.t_final),
            ("mc2", self.mc2),
            ("d0", self.d0),
            ("r_m", self.r_m),
            ("l_d", self.l_d),
            ("delta_p", self.delta_p),
            ("coulomb_log_ratio", self.coulomb_log_ratio),
            ("p_min", self.p_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.p_max > self.p_min) || !(self.r_init_max > 0.0 && self.r_init_max <= 1.0) {
            return Err(Error::config("need p_max > p_min and r_init_max in (0, 1]"));
        }
        self.time_grid()?;
        self.domain = Some(DomainSpec::new(
            vec![self.p_min, -1.0, 0.0],
            vec![self.p_max, 1.0, 1.0],
            vec![Boundary::Reflecting, Boundary::Reflecting, Boundary::AbsorbingUpper],
        )?);
        Ok(self)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.dt_sim, self.dt_obs, self.t_max)
    }

    /// `sqrt(2 T̃ / mc²)`
    pub fn delta_ref(&self) -> f64 {
        (2.0 * self.t_ref / self.mc2).sqrt()
    }

    /// `sqrt(2 T̂_f / mc²)`
    pub fn delta(&self) -> f64 {
        (2.0 * self.t_final / self.mc2).sqrt()
    }

    /// Thermal speed ratio `sqrt(T̂_f / T̃)`.
    pub fn vt_bar(&self) -> f64 {
        (self.t_final / self.t_ref).sqrt()
    }

    pub fn nu_ee(&self) -> f64 {
        (self.t_ref / self.t_final).powf(1.5) * self.coulomb_log_ratio
    }

    pub fn e_field(&self) -> f64 {
        self.e0 * (self.t_ref / self.t_final).powf(1.5)
    }

    pub fn gamma(&self, p: f64) -> f64 {
        (1.0 + (self.delta_ref() * p).powi(2)).sqrt()
    }

    pub fn collision_coefficients(&self, p: f64) -> Result<Collisions> {
        if !(p > 0.0) {
            return Err(Error::Domain(format!("momentum must be positive, got {p}")));
        }
        Ok(self.collisions_unchecked(p))
    }

    fn collisions_unchecked(&self, p: f64) -> Collisions {
        let nu = self.nu_ee();
        let vt = self.vt_bar();
        let gamma = self.gamma(p);
        let y = p / (gamma * vt);
        let phi = libm::erf(y);
        let dphi = FRAC_2_SQRT_PI * (-y * y).exp();
        let psi = chandrasekhar(y);
        let d4 = self.delta().powi(4);
        let c_a = nu * vt * vt * psi / y;
        let c_f = 2.0 * nu * vt * psi;
        let c_b = 0.5 * nu * vt * vt / y * (self.z + phi - psi + 0.5 * y * y * d4);
        // ψ'(y) = φ'(y) − 2ψ/y and dy/dp = 1/(v̄_T γ³)
        let dc_a_dp = nu * vt * (dphi - 3.0 * psi / y) / (y * gamma.powi(3));
        Collisions {
            c_a,
            c_f,
            c_b,
            dc_a_dp,
        }
    }

    /// `D_r` and `∂D_r/∂r`.
    pub fn radial_diffusivity(&self, r: f64, p: f64) -> (f64, f64) {
        let s = (r - self.r_m) / self.l_d;
        let t = s.tanh();
        let g = (-(p / self.delta_p).powi(2)).exp();
        let d = self.d0 * 0.5 * (1.0 + t) * g;
        let dd = self.d0 * g * (1.0 - t * t) / (2.0 * self.l_d);
        (d, dd)
    }

    /// Draws `(p, ξ, r)`: `p` from `p² exp(−(p/p0)²)` truncated to
    /// `[p_min, p_max]` with `p0 = sqrt(T̂0/T̃)`, `ξ` uniform on `(−1, 1)`, `r`
    /// uniform on `(0, r_init_max)`.
    pub fn sample_maxwellian<R: Rng + ?Sized>(&self, t0: f64, rng: &mut R) -> Result<[f64; 3]> {
        if !(t0 > 0.0) {
            return Err(Error::config(format!("initial temperature must be positive, got {t0}")));
        }
        let p = sample_truncated_maxwell((t0 / self.t_ref).sqrt(), self.p_min, self.p_max, rng)?;
        let xi = rng.random_range(-1.0..1.0);
        let r = rng.random::<f64>() * self.r_init_max;
        Ok([p, xi, r])
    }

    /// Uniform draw over the momentum/pitch box and the initial radial range.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        [
            rng.random_range(self.p_min..self.p_max),
            rng.random_range(-1.0..1.0),
            rng.random::<f64>() * self.r_init_max,
        ]
    }
}

const MAX_REJECTIONS: usize = 100_000;

/// Speed of an isotropic Gaussian velocity with per-axis variance `p0²/2`,
/// rejected until it falls in `[lo, hi]`.
pub fn sample_truncated_maxwell<R: Rng + ?Sized>(p0: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    let s = p0 / 2f64.sqrt();
    for _ in 0..MAX_REJECTIONS {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let p = s * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (lo..=hi).contains(&p) {
            return Ok(p);
        }
    }
    Err(Error::numeric(
        format!("Maxwellian truncation [{lo}, {hi}] rejected {MAX_REJECTIONS} draws at p0={p0}"),
        &[p0, lo, hi],
    ))
}

/// `ψ(y) = (φ(y) − y φ'(y)) / (2y²)` with `φ = erf`; series near zero.
pub fn chandrasekhar(y: f64) -> f64 {
    if y < 0.25 {
        // Σ_{n≥1} (−1)^{n+1} n y^{2n−1} / (n! (2n+1)), times 2/√π
        let y2 = y * y;
        let mut term = y; // y^{2n−1}
        let mut fact = 1.0;
        let mut sum = 0.0;
        for n in 1..12 {
            let nf = n as f64;
            fact *= nf;
            let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
            sum += sign * nf * term / (fact * (2.0 * nf + 1.0));
            term *= y2;
        }
        FRAC_2_SQRT_PI * sum
    } else {
        let phi = libm::erf(y);
        let dphi = FRAC_2_SQRT_PI * (-y * y).exp();
        (phi - y * dphi) / (2.0 * y * y)
    }
}

impl SdeSystem for RunawayElectron3D {
    fn domain(&self) -> &DomainSpec {
        self.domain.as_ref().expect("RunawayElectron3D::finish was not called")
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let (p, xi, r) = (x[0], x[1], x[2]);
        let c = self.collisions_unchecked(p);
        let gamma = self.gamma(p);
        let e = self.e_field();
        let one_m = 1.0 - xi * xi;
        // (1/p²) ∂(p² C_A)/∂p = 2 C_A / p + ∂C_A/∂p
        out[0] = e * xi - gamma * p / self.tau * one_m - c.c_f + 2.0 * c.c_a / p + c.dc_a_dp;
        out[1] = e * one_m / p + xi * one_m / (self.tau * gamma) - 2.0 * xi * c.c_b / (p * p);
        out[2] = self.radial_diffusivity(r, p).1;
    }

    fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let (p, xi, r) = (x[0], x[1], x[2]);
        let c = self.collisions_unchecked(p);
        out[0] = (2.0 * c.c_a).sqrt();
        out[1] = (2.0 * c.c_b).sqrt() / p * (1.0 - xi * xi).max(0.0).sqrt();
        out[2] = (2.0 * self.radial_diffusivity(r, p).0).sqrt();
    }
}

/// `(p, ξ) → (p∥, p⊥)`.
pub fn to_parallel_perp(p: f64, xi: f64) -> (f64, f64) {
    (p * xi, p * (1.0 - xi * xi).max(0.0).sqrt())
}

/// `(p∥, p⊥) → (p, ξ)`; `ξ = 0` at `p = 0`.
pub fn from_parallel_perp(p_par: f64, p_perp: f64) -> (f64, f64) {
    let p = p_par.hypot(p_perp);
    if p == 0.0 {
        (0.0, 0.0)
    } else {
        (p, (p_par / p).clamp(-1.0, 1.0))
    }
}

/// Pitch angle in radians from the pitch cosine.
pub fn pitch_angle(xi: f64) -> f64 {
    xi.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn log_grid(n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| 0.5 * 10f64.powf(i as f64 / (n - 1) as f64))
    }

    #[test]
    fn error_function_limits() {
        assert_eq!(libm::erf(0.0), 0.0);
        assert!((libm::erf(10.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psi_small_argument_limit() {
        let y = 1e-4;
        let expected = 2.0 / (3.0 * PI.sqrt());
        assert!(((chandrasekhar(y) / y) / expected - 1.0).abs() < 1e-3);
    }

    #[test]
    fn psi_series_and_closed_form_agree_at_switch() {
        let y = 0.25;
        let eps = 1e-9;
        let below = chandrasekhar(y - eps);
        let phi = libm::erf(y);
        let closed = (phi - y * FRAC_2_SQRT_PI * (-y * y).exp()) / (2.0 * y * y);
        assert!((below - closed).abs() < 1e-9);
    }

    #[test]
    fn coefficients_positive_on_momentum_range() {
        let re = RunawayElectron3D::default();
        for p in log_grid(200) {
            let c = re.collision_coefficients(p).unwrap();
            assert!(c.c_a > 0.0 && c.c_f > 0.0 && c.c_b > 0.0, "p={p}: {c:?}");
        }
    }

    #[test]
    fn momentum_derivative_matches_finite_difference() {
        let re = RunawayElectron3D::default();
        for p in log_grid(50).chain([0.01, 0.05, 0.1]) {
            let h = 1e-6 * p;
            let fd = (re.collision_coefficients(p + h).unwrap().c_a - re.collision_coefficients(p - h).unwrap().c_a) / (2.0 * h);
            let an = re.collision_coefficients(p).unwrap().dc_a_dp;
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-8), "p={p}: fd={fd} analytic={an}");
        }
    }

    #[test]
    fn non_positive_momentum_is_rejected() {
        let re = RunawayElectron3D::default();
        assert!(matches!(re.collision_coefficients(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn radial_diffusivity_at_stochastic_boundary() {
        let re = RunawayElectron3D::default();
        for p in [0.5, 1.0, 3.0] {
            let g = (-(p / re.delta_p).powi(2)).exp();
            assert!((re.radial_diffusivity(re.r_m, p).0 - 0.5 * re.d0 * g).abs() < 1e-15);
        }
    }

    #[test]
    fn low_momentum_diffuses_faster() {
        let re = RunawayElectron3D::default();
        for i in 0..=20 {
            let r = i as f64 / 20.0;
            assert!(re.radial_diffusivity(r, 0.5).0 > re.radial_diffusivity(r, 5.0).0);
        }
    }

    #[test]
    fn radial_derivative_matches_finite_difference() {
        let re = RunawayElectron3D::default();
        let mut rng = stream_rng(2, 0);
        let h = 1e-6;
        for _ in 0..100 {
            let r = rng.random_range(0.0..1.0);
            let p = rng.random_range(0.5..5.0);
            let fd = (re.radial_diffusivity(r + h, p).0 - re.radial_diffusivity(r - h, p).0) / (2.0 * h);
            assert!((fd - re.radial_diffusivity(r, p).1).abs() < 1e-8);
        }
    }

    #[test]
    fn coefficients_finite_over_domain_box() {
        let re = RunawayElectron3D::default();
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        for p in log_grid(20) {
            for xi in [-1.0, -0.999999, -0.5, 0.0, 0.5, 0.999999, 1.0] {
                for r in [0.0, 0.25, 0.5, 0.75, 0.999999] {
                    re.drift(&[p, xi, r], &mut a);
                    re.diffusion(&[p, xi, r], &mut b);
                    assert!(a.iter().chain(b.iter()).all(|v| v.is_finite()));
                    assert!(b.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn maxwellian_samples_respect_truncation_and_mean() {
        let re = RunawayElectron3D::default();
        let mut rng = stream_rng(8, 0);
        let n = 100_000;
        let (mut sum, mut sq, mut xi_sum) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let [p, xi, r] = re.sample_maxwellian(10.0, &mut rng).unwrap();
            assert!((0.5..=5.0).contains(&p));
            assert!((0.0..0.95).contains(&r));
            sum += p;
            sq += p * p;
            xi_sum += xi;
        }
        // truncated density ∝ p² exp(−p²/p0²) on [0.5, 5], by midpoint quadrature
        let p0sq = 10.0 / 3.0;
        let (mut z, mut m1) = (0.0, 0.0);
        let h = 4.5 / 200_000.0;
        for i in 0..200_000 {
            let p = 0.5 + (i as f64 + 0.5) * h;
            let w = p * p * (-p * p / p0sq).exp();
            z += w;
            m1 += w * p;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - m1 / z).abs() < 4.0 * se, "mean {mean} vs {}", m1 / z);
        // ξ ~ U(−1, 1): σ of the mean is 1/sqrt(3n)
        assert!((xi_sum / n as f64).abs() < 4.0 / (3.0 * n as f64).sqrt());
    }

    #[test]
    fn impossible_truncation_fails_cleanly() {
        let mut rng = stream_rng(1, 0);
        assert!(matches!(sample_truncated_maxwell(0.01, 4.0, 5.0, &mut rng), Err(Error::Numeric { .. })));
    }

    #[test]
    fn parallel_perp_examples() {
        let (a, b) = to_parallel_perp(2.0, 1.0);
        assert_eq!((a, b), (2.0, 0.0));
        assert_eq!(from_parallel_perp(0.0, 0.0), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn parallel_perp_round_trip(p in 0.0f64..10.0, xi in -1.0f64..=1.0) {
            let (a, b) = to_parallel_perp(p, xi);
            prop_assert!((a * a + b * b - p * p).abs() <= 1e-12 * p.max(1.0).powi(2));
            let (p2, xi2) = from_parallel_perp(a, b);
            prop_assert!((p2 - p).abs() < 1e-12);
            if p > 1e-6 {
                prop_assert!((xi2 - xi).abs() < 1e-10);
            }
        }
    }
}
