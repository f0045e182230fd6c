//! Training-free conditional diffusion labels.
//!
//! For a state `x` the increments `Δx` of its nearest non-exiting neighbours
//! define an empirical conditional law. Noising it with `α = 1 − τ`,
//! `β² = τ` gives a Gaussian mixture whose score is exact; integrating the
//! probability-flow ODE from `τ ≈ 1` to `τ ≈ 0` turns a standard normal `z`
//! into a sample `y` of that law, smoothly in `z`.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSet, ObservationSet};
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::rng::stream_rng;
use crate::sde::{Boundary, DomainSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta2: f64,
    /// `d log α / dτ`
    pub b: f64,
    /// `dβ²/dτ − 2 b β²`
    pub sigma2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub eps_clip: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { eps_clip: 1e-4 }
    }
}

impl NoiseSchedule {
    pub fn new(eps_clip: f64) -> Result<Self> {
        if !(eps_clip > 0.0 && eps_clip < 0.5) {
            return Err(Error::config(format!("eps_clip must be in (0, 0.5), got {eps_clip}")));
        }
        Ok(Self { eps_clip })
    }

    pub fn coeffs(&self, tau: f64) -> Result<Coeffs> {
        if !(tau >= self.eps_clip && tau <= 1.0 - self.eps_clip) {
            return Err(Error::Domain(format!("τ={tau} outside [{}, {}]", self.eps_clip, 1.0 - self.eps_clip)));
        }
        Ok(Coeffs {
            alpha: 1.0 - tau,
            beta2: tau,
            b: -1.0 / (1.0 - tau),
            sigma2: (1.0 + tau) / (1.0 - tau),
        })
    }
}

/// Score of `Σ_j N(α·dx_j, β² I)` (uniform weights) at `z`, written into
/// `out`. `weights` is scratch of length `K`.
pub fn estimate_score(neighbors: &[f64], dim: usize, z: &[f64], c: &Coeffs, weights: &mut Vec<f64>, out: &mut [f64]) -> Result<()> {
    let k = neighbors.len() / dim;
    if k == 0 {
        return Err(Error::config("score needs at least one neighbour"));
    }
    weights.clear();
    let inv = 0.5 / c.beta2;
    let mut max = f64::NEG_INFINITY;
    for dx in neighbors.chunks_exact(dim) {
        let mut s = 0.0;
        for i in 0..dim {
            let r = z[i] - c.alpha * dx[i];
            s += r * r;
        }
        let e = -s * inv;
        max = max.max(e);
        weights.push(e);
    }
    let mut total = 0.0;
    out.fill(0.0);
    for (w, dx) in weights.iter_mut().zip(neighbors.chunks_exact(dim)) {
        let e = *w - max;
        // exp(−40) ≈ 4e-18 is below double resolution relative to the top weight
        if e < -40.0 {
            continue;
        }
        let v = e.exp();
        total += v;
        for i in 0..dim {
            out[i] += v * c.alpha * dx[i];
        }
    }
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::numeric("all mixture weights underflowed", z));
    }
    for i in 0..dim {
        out[i] = (out[i] / total - z[i]) / c.beta2;
    }
    Ok(())
}

/// Explicit Euler for `dZ/dτ = b Z − ½σ² S(Z, τ)` from `τ = 1 − ε` down to
/// `τ = ε` in `k_steps` uniform steps.
pub fn reverse_ode_solve(neighbors: &[f64], dim: usize, z1: &[f64], sched: &NoiseSchedule, k_steps: usize) -> Result<Vec<f64>> {
    if k_steps == 0 {
        return Err(Error::config("reverse ODE needs at least one step"));
    }
    if z1.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite initial noise", z1));
    }
    let (hi, lo) = (1.0 - sched.eps_clip, sched.eps_clip);
    let h = (hi - lo) / k_steps as f64;
    let mut z = z1.to_vec();
    let mut score = vec![0.0; dim];
    let mut weights = Vec::with_capacity(neighbors.len() / dim);
    for k in 0..k_steps {
        // clamp guards the last evaluation against rounding below ε
        let tau = (hi - k as f64 * h).max(lo);
        let c = sched.coeffs(tau)?;
        estimate_score(neighbors, dim, &z, &c, &mut weights, &mut score)?;
        for i in 0..dim {
            let f = c.b * z[i] - 0.5 * c.sigma2 * score[i];
            z[i] -= h * f;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("reverse ODE diverged at step {k} (τ={tau})"), &z));
        }
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub k_nn: usize,
    pub k_steps: usize,
    pub eps_clip: f64,
    pub labels_per_x: usize,
    /// Label at most this many (randomly chosen) rows; `None` labels all.
    pub max_rows: Option<usize>,
    /// Use exiting transitions too, both as neighbours and as rows to label.
    pub include_exits: bool,
    /// Periodic dimensions get ghost copies of points within this fraction
    /// of the period from either end so neighbourhoods wrap around.
    pub periodic_margin: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            k_nn: 2048,
            k_steps: 5000,
            eps_clip: 1e-4,
            labels_per_x: 1,
            max_rows: None,
            include_exits: false,
            periodic_margin: 0.25,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_nn == 0 || self.k_steps == 0 || self.labels_per_x == 0 {
            return Err(Error::config("k_nn, k_steps and labels_per_x must be positive"));
        }
        if !(0.0..=0.5).contains(&self.periodic_margin) {
            return Err(Error::config("periodic_margin must be in [0, 0.5]"));
        }
        NoiseSchedule::new(self.eps_clip).map(|_| ())
    }
}

/// Neighbour lookup over the pool rows in std-normalized coordinates.
pub struct NeighborIndex {
    tree: KdTree,
    /// Original pool row of every tree point (ghosts included).
    source: Vec<usize>,
    scale: Vec<f64>,
    dim: usize,
    n_rows: usize,
}

impl NeighborIndex {
    pub fn new(obs: &ObservationSet, pool: &[usize], domain: &DomainSpec, margin: f64) -> Result<Self> {
        let d = obs.dim;
        if pool.is_empty() {
            return Err(Error::config("neighbour pool is empty"));
        }
        let mut scale = vec![0.0; d];
        let mut mean = vec![0.0; d];
        for &m in pool {
            for (s, v) in mean.iter_mut().zip(obs.x_row(m)) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= pool.len() as f64);
        for &m in pool {
            for i in 0..d {
                scale[i] += (obs.x_row(m)[i] - mean[i]).powi(2);
            }
        }
        for s in &mut scale {
            let sd = (*s / pool.len() as f64).sqrt();
            *s = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
        let mut pts = Vec::with_capacity(pool.len() * d);
        let mut source = Vec::with_capacity(pool.len());
        for &m in pool {
            pts.extend(obs.x_row(m).iter().zip(&scale).map(|(v, s)| v * s));
            source.push(m);
        }
        for i in 0..d {
            if domain.behavior()[i] != Boundary::Periodic {
                continue;
            }
            let (lo, hi) = (domain.lower()[i], domain.upper()[i]);
            let period = hi - lo;
            let n = source.len();
            for p in 0..n {
                let m = source[p];
                let v = obs.x_row(m)[i];
                let shift = if v - lo < margin * period {
                    period
                } else if hi - v < margin * period {
                    -period
                } else {
                    continue;
                };
                let mut row: Vec<f64> = pts[p * d..(p + 1) * d].to_vec();
                row[i] = (v + shift) * scale[i];
                pts.extend(row);
                source.push(m);
            }
        }
        Ok(Self {
            tree: KdTree::new(pts, d),
            source,
            scale,
            dim: d,
            n_rows: pool.len(),
        })
    }

    /// Pool rows of the `k` nearest neighbours of `x`, each row at most
    /// once even when a ghost copy is also near.
    pub fn nearest(&self, x: &[f64], k: usize) -> Vec<usize> {
        let q: Vec<f64> = x.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        let k = k.min(self.n_rows);
        let mut want = k;
        loop {
            let mut seen = HashSet::with_capacity(want);
            let rows: Vec<usize> = self
                .tree
                .nearest(&q, want)
                .into_iter()
                .map(|i| self.source[i])
                .filter(|m| seen.insert(*m))
                .take(k)
                .collect();
            if rows.len() == k || want >= self.tree.len() {
                return rows;
            }
            want = (want * 2).min(self.tree.len());
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Reverse-ODE labels for the (interior) rows of `obs`.
pub fn build_labeled_set(obs: &ObservationSet, domain: &DomainSpec, cfg: &LabelConfig, seed: u64) -> Result<LabeledSet> {
    cfg.validate()?;
    let sched = NoiseSchedule::new(cfg.eps_clip)?;
    let pool: Vec<usize> = if cfg.include_exits {
        (0..obs.len()).collect()
    } else {
        obs.interior_rows()
    };
    if pool.is_empty() {
        return Err(Error::config("no γ=0 rows to label"));
    }
    if pool.len() < cfg.k_nn {
        log::warn!("only {} pool rows; neighbour count shrinks from {}", pool.len(), cfg.k_nn);
    }
    let mut rows = pool.clone();
    if let Some(max) = cfg.max_rows {
        if max < rows.len() {
            // partial Fisher-Yates for a deterministic subset, kept in data order
            let mut rng = stream_rng(seed, u64::MAX);
            for i in 0..max {
                let j = rng.random_range(i..rows.len());
                rows.swap(i, j);
            }
            rows.truncate(max);
            rows.sort_unstable();
        }
    }
    let index = NeighborIndex::new(obs, &pool, domain, cfg.periodic_margin)?;
    let d = obs.dim;
    let start = std::time::Instant::now();
    let labels: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>>> = rows
        .par_iter()
        .enumerate()
        .map(|(r, &m)| {
            let x = obs.x_row(m);
            let nb = index.nearest(x, cfg.k_nn);
            let mut dx = Vec::with_capacity(nb.len() * d);
            for &j in &nb {
                dx.extend_from_slice(obs.dx_row(j));
            }
            let mut rng = stream_rng(seed, r as u64);
            (0..cfg.labels_per_x)
                .map(|_| {
                    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let y = reverse_ode_solve(&dx, d, &z, &sched, cfg.k_steps)?;
                    Ok((z, y))
                })
                .collect()
        })
        .collect();
    let mut set = LabeledSet::new(d, obs.dt_obs);
    for (&m, out) in rows.iter().zip(labels) {
        for (z, y) in out? {
            set.x.extend_from_slice(obs.x_row(m));
            set.z.extend(z);
            set.y.extend(y);
        }
    }
    log::info!(
        "labeled {} rows ({} labels) with K_nn={} K_steps={} in {:.1}s",
        rows.len(),
        set.len(),
        cfg.k_nn,
        cfg.k_steps,
        start.elapsed().as_secs_f64()
    );
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = NoiseSchedule::default();
        let c = s.coeffs(0.5).unwrap();
        assert_eq!((c.alpha, c.beta2, c.b, c.sigma2), (0.5, 0.5, -2.0, 3.0));
        let c = s.coeffs(1e-4).unwrap();
        assert!((c.b + 1.0).abs() < 2e-4 && (c.sigma2 - 1.0).abs() < 3e-4);
        assert!((c.alpha - 1.0).abs() < 2e-4 && c.beta2 < 2e-4);
        let c = s.coeffs(1.0 - 1e-4).unwrap();
        assert!(c.alpha < 2e-4 && (c.beta2 - 1.0).abs() < 2e-4);
        assert!(matches!(s.coeffs(0.0), Err(Error::Domain(_))));
        assert!(matches!(s.coeffs(1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_identities_hold_under_finite_differences() {
        let s = NoiseSchedule::default();
        let h = 1e-6;
        for i in 0..100 {
            let tau = 0.01 + 0.98 * i as f64 / 99.0;
            let c = s.coeffs(tau).unwrap();
            let dlog_alpha = ((1.0 - tau - h).ln() - (1.0 - tau + h).ln()) / (2.0 * h);
            let dbeta2 = ((tau + h) - (tau - h)) / (2.0 * h);
            assert!((c.b - dlog_alpha).abs() < 1e-6 * c.b.abs().max(1.0), "b at {tau}");
            let rhs = dbeta2 - 2.0 * dlog_alpha * c.beta2;
            assert!((c.sigma2 - rhs).abs() < 1e-6 * c.sigma2.max(1.0), "σ² at {tau}");
        }
    }

    #[test]
    fn single_neighbor_score_is_gaussian_score() {
        let s = NoiseSchedule::default();
        let c = s.coeffs(0.3).unwrap();
        let mut out = [0.0; 2];
        estimate_score(&[0.4, -1.0], 2, &[1.0, 2.0], &c, &mut Vec::new(), &mut out).unwrap();
        assert!((out[0] - (0.7 * 0.4 - 1.0) / 0.3).abs() < 1e-12);
        assert!((out[1] - (0.7 * -1.0 - 2.0) / 0.3).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_origin() {
        let s = NoiseSchedule::default();
        for tau in [1e-4, 0.2, 0.9] {
            let mut out = [1.0];
            estimate_score(&[-1.0, 1.0], 1, &[0.0], &s.coeffs(tau).unwrap(), &mut Vec::new(), &mut out).unwrap();
            assert_eq!(out[0], 0.0);
        }
    }

    #[test]
    fn terminal_score_is_standard_normal() {
        let s = NoiseSchedule::default();
        let c = s.coeffs(1.0 - 1e-4).unwrap();
        let mut out = [0.0];
        estimate_score(&[0.5, 2.0, -3.0], 1, &[1.3], &c, &mut Vec::new(), &mut out).unwrap();
        assert!((out[0] + 1.3).abs() < 1e-3);
    }

    #[test]
    fn far_queries_do_not_underflow() {
        let c = NoiseSchedule::default().coeffs(1e-4).unwrap();
        let mut out = [0.0];
        estimate_score(&[0.0, 1.0], 1, &[50.0], &c, &mut Vec::new(), &mut out).unwrap();
        assert!(out[0].is_finite());
    }

    /// Exact flow for one neighbour: `z(τ) = α dx + β (z(τ₁) − α₁ dx) / β₁`.
    fn exact_single(dx: f64, z1: f64, eps: f64) -> f64 {
        let (a1, b1) = (eps, (1.0 - eps).sqrt());
        (1.0 - eps) * dx + eps.sqrt() * (z1 - a1 * dx) / b1
    }

    #[test]
    fn single_neighbor_flow_collapses_to_data() {
        // the exact flow stops at β(ε)·z1 = 0.01·z1 from dx, and Euler with
        // h = 2ε adds a further ~25%, so 1e-2 holds for |z1| up to about 0.8
        let s = NoiseSchedule::default();
        for (dx, z1) in [(0.3, 0.75), (-1.2, -0.5), (0.0, 0.0), (2.0, -0.75)] {
            let y = reverse_ode_solve(&[dx], 1, &[z1], &s, 5000).unwrap()[0];
            assert!((y - dx).abs() < 1e-2, "dx {dx}, z1 {z1}: {y}");
        }
    }

    #[test]
    fn euler_converges_at_first_order() {
        let s = NoiseSchedule::default();
        let (dx, z1) = (0.7, 1.5);
        let exact = exact_single(dx, z1, s.eps_clip);
        let err = |k| (reverse_ode_solve(&[dx], 1, &[z1], &s, k).unwrap()[0] - exact).abs();
        let (e1, e2, e3) = (err(40_000), err(80_000), err(160_000));
        for r in [e1 / e2, e2 / e3] {
            assert!((r - 2.0).abs() < 0.4, "ratios {} {}", e1 / e2, e2 / e3);
        }
    }

    #[test]
    fn single_neighbor_flow_is_scale_equivariant() {
        let s = NoiseSchedule::default();
        let y1 = reverse_ode_solve(&[0.5, -0.25], 2, &[0.3, -0.6], &s, 5000).unwrap();
        let y2 = reverse_ode_solve(&[1.5, -0.75], 2, &[0.3, -0.6], &s, 5000).unwrap();
        for i in 0..2 {
            assert!((y2[i] - 3.0 * y1[i]).abs() < 3e-2, "{y1:?} {y2:?}");
        }
    }

    /// Two-sample-free KS statistic against the standard normal CDF.
    fn ks_normal(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
                (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gaussian_neighbors_give_gaussian_outputs() {
        let s = NoiseSchedule::default();
        let mut rng = stream_rng(21, 0);
        let nb: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
        let n = 1000;
        let zs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let out: Vec<f64> = zs.par_iter().map(|&z| reverse_ode_solve(&nb, 1, &[z], &s, 400).unwrap()[0]).collect();
        // 1% critical value of the one-sample KS statistic
        let crit = 1.628 / (n as f64).sqrt();
        let d = ks_normal(out);
        assert!(d < crit, "KS {d} >= {crit}");
    }

    fn obs_with(dx: impl Fn(usize) -> f64, gamma: impl Fn(usize) -> u8, n: usize) -> ObservationSet {
        ObservationSet {
            dim: 1,
            dt_obs: 0.05,
            n_trajectories: n,
            x: (0..n).map(|i| 0.1 + 5.8 * i as f64 / n as f64).collect(),
            dx: (0..n).map(&dx).collect(),
            gamma: (0..n).map(gamma).collect(),
            side: None,
            skipped: 0,
        }
    }

    fn quick() -> LabelConfig {
        LabelConfig {
            k_nn: 16,
            k_steps: 200,
            ..LabelConfig::default()
        }
    }

    fn line() -> DomainSpec {
        DomainSpec::new(vec![0.0], vec![6.0], vec![Boundary::AbsorbingBoth]).unwrap()
    }

    #[test]
    fn label_count_and_interior_only() {
        let obs = obs_with(|i| i as f64 * 1e-3, |i| u8::from(i % 5 == 0), 100);
        let cfg = LabelConfig {
            labels_per_x: 2,
            ..quick()
        };
        let set = build_labeled_set(&obs, &line(), &cfg, 3).unwrap();
        assert_eq!(set.len(), 2 * 80);
        for m in 0..set.len() {
            let x = set.x[m];
            let row = obs.x.iter().position(|&v| v == x).unwrap();
            assert_eq!(obs.gamma[row], 0);
        }
    }

    #[test]
    fn constant_increments_are_reproduced() {
        let obs = obs_with(|_| 0.25, |_| 0, 60);
        let cfg = LabelConfig {
            k_steps: 2000,
            ..quick()
        };
        let set = build_labeled_set(&obs, &line(), &cfg, 1).unwrap();
        assert!(set.y.iter().all(|y| (y - 0.25).abs() < 0.05), "{:?}", &set.y[..5]);
    }

    #[test]
    fn exits_only_is_refused() {
        let obs = obs_with(|_| 0.0, |_| 1, 10);
        assert!(build_labeled_set(&obs, &line(), &quick(), 0).is_err());
    }

    #[test]
    fn labeling_is_deterministic() {
        let obs = obs_with(|i| ((i * 7919) % 13) as f64 * 0.01, |_| 0, 80);
        let cfg = LabelConfig {
            max_rows: Some(30),
            ..quick()
        };
        let a = build_labeled_set(&obs, &line(), &cfg, 4).unwrap();
        let b = build_labeled_set(&obs, &line(), &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
    }

    #[test]
    fn periodic_neighbours_wrap() {
        use std::f64::consts::PI;
        let dom = DomainSpec::new(vec![-PI], vec![PI], vec![Boundary::Periodic]).unwrap();
        let obs = ObservationSet {
            x: vec![-PI + 0.01, 0.0, PI - 0.02, 1.0],
            ..obs_with(|_| 0.0, |_| 0, 4)
        };
        let idx = NeighborIndex::new(&obs, &[0, 1, 2, 3], &dom, 0.25).unwrap();
        assert_eq!(idx.nearest(&[PI - 0.001], 2), vec![0, 2]);
        assert_eq!(idx.nearest(&[0.1], 10).len(), 4);
    }

    proptest! {
        #[test]
        fn score_is_finite_and_bounded(tau in 1e-4f64..0.9999, z in -10.0f64..10.0, seed in 0u64..50) {
            let mut rng = stream_rng(seed, 0);
            let nb: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c = NoiseSchedule::default().coeffs(tau).unwrap();
            let mut out = [0.0];
            estimate_score(&nb, 1, &[z], &c, &mut Vec::new(), &mut out).unwrap();
            // the score is a convex combination of single-component scores
            let lo = nb.iter().map(|d| (c.alpha * d - z) / c.beta2).fold(f64::INFINITY, f64::min);
            let hi = nb.iter().map(|d| (c.alpha * d - z) / c.beta2).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[0] >= lo - 1e-9 * lo.abs().max(1.0) && out[0] <= hi + 1e-9 * hi.abs().max(1.0));
        }
    }
}


