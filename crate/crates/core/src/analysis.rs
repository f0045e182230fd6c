//! Evaluation metrics: exit-probability grids, confinement tables,
//! histograms, KS statistics, runaway fraction, and CSV/SVG output.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exit_model::ExitModel;
use crate::problems::exit_prob_series_1d;
use crate::sde::{simulate_ensemble, SdeSystem, TimeGrid, Trajectory};

/// Where exit probabilities come from.
pub enum ExitSource<'a> {
    /// Eigenfunction series for 1D Brownian motion on `[0, length]`.
    Series { length: f64, dt: f64, n_terms: usize },
    Model(&'a ExitModel),
    /// Fresh one-interval simulations started at each point.
    MonteCarlo {
        system: &'a dyn SdeSystem,
        dt_sim: f64,
        dt_obs: f64,
        n_samples: usize,
        seed: u64,
    },
}

/// Regular grid with `n[i]` points from `lower[i]` to `upper[i]` inclusive,
/// enumerated with the last dimension fastest.
pub fn grid_points(lower: &[f64], upper: &[f64], n: &[usize]) -> Result<Vec<Vec<f64>>> {
    if lower.len() != upper.len() || lower.len() != n.len() || n.contains(&0) {
        return Err(Error::Shape("grid bounds and counts must agree and be non-empty".into()));
    }
    let mut pts = vec![Vec::new()];
    for i in 0..n.len() {
        let axis: Vec<f64> = (0..n[i])
            .map(|k| if n[i] == 1 { lower[i] } else { lower[i] + (upper[i] - lower[i]) * k as f64 / (n[i] - 1) as f64 })
            .collect();
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    Ok(pts)
}

/// Exit probability over one observation interval at every point.
pub fn exit_prob_grid(source: &ExitSource<'_>, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    match source {
        ExitSource::Series { length, dt, n_terms } => points.iter().map(|p| exit_prob_series_1d(p[0], *dt, *length, *n_terms)).collect(),
        ExitSource::Model(m) => {
            let flat: Vec<f64> = points.iter().flatten().copied().collect();
            m.predict_batch(&flat)
        }
        ExitSource::MonteCarlo {
            system,
            dt_sim,
            dt_obs,
            n_samples,
            seed,
        } => {
            if *n_samples == 0 {
                return Err(Error::config("Monte Carlo exit estimate needs at least one sample"));
            }
            let grid = TimeGrid::new(*dt_sim, *dt_obs, *dt_obs)?;
            points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let trajs = simulate_ensemble(*system, |_| p.clone(), *n_samples, &grid, seed.wrapping_add(i as u64))?;
                    Ok(trajs.iter().filter(|t| t.exited()).count() as f64 / *n_samples as f64)
                })
                .collect()
        }
    }
}

/// Observation index of `t` for trajectories recorded every `dt_obs`.
pub fn obs_index(t: f64, dt_obs: f64, t_max: f64) -> Result<usize> {
    TimeGrid::new(dt_obs, dt_obs, t_max)?.obs_index(t)
}

fn common_dt(trajs: &[Trajectory]) -> Result<f64> {
    let dt = trajs.first().ok_or_else(|| Error::config("trajectory set is empty"))?.dt_obs;
    if trajs.iter().any(|t| t.dt_obs != dt) {
        return Err(Error::config("trajectories do not share dt_obs"));
    }
    Ok(dt)
}

pub fn confined_fraction_at(trajs: &[Trajectory], k: usize) -> f64 {
    crate::sde::confined_fraction(trajs, k)
}

pub fn escaped_fraction_at(trajs: &[Trajectory], k: usize) -> f64 {
    1.0 - confined_fraction_at(trajs, k)
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub times: Vec<f64>,
    /// `(method, confined fraction per time)`
    pub methods: Vec<(String, Vec<f64>)>,
}

impl ComparisonReport {
    pub fn get(&self, method: &str) -> Option<&[f64]> {
        self.methods.iter().find(|(m, _)| m == method).map(|(_, v)| v.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time");
        for (m, _) in &self.methods {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            let _ = write!(s, "{t}");
            for (_, v) in &self.methods {
                let _ = write!(s, ",{:.6}", v[i]);
            }
            s.push('\n');
        }
        s
    }
}

/// Confined fraction of every method's trajectories at each time.
pub fn confinement_table(sets: &[(&str, &[Trajectory])], times: &[f64], t_max: f64) -> Result<ComparisonReport> {
    let mut dt = None;
    let mut methods = Vec::new();
    for (name, trajs) in sets {
        let d = common_dt(trajs)?;
        if dt.is_some_and(|x| x != d) {
            return Err(Error::config(format!("method {name} uses a different dt_obs")));
        }
        dt = Some(d);
        let fr = times
            .iter()
            .map(|&t| Ok(confined_fraction_at(trajs, obs_index(t, d, t_max)?)))
            .collect::<Result<Vec<_>>>()?;
        methods.push((name.to_string(), fr));
    }
    Ok(ComparisonReport {
        times: times.to_vec(),
        methods,
    })
}

/// Coordinate `dim` of every particle confined at index `k`.
pub fn confined_positions(trajs: &[Trajectory], k: usize, dim: usize) -> Vec<f64> {
    trajs.iter().filter_map(|t| t.position_at(k).map(|x| x[dim])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram1D {
    pub lower: f64,
    pub upper: f64,
    pub counts: Vec<u64>,
    /// Ensemble size the density is normalized by (exited particles
    /// included), so the density integrates to the confined fraction.
    pub total: usize,
}

impl Histogram1D {
    pub fn new(lower: f64, upper: f64, bins: usize, total: usize) -> Result<Self> {
        if !(upper > lower) || bins == 0 {
            return Err(Error::config(format!("invalid histogram range [{lower}, {upper}] with {bins} bins")));
        }
        Ok(Self {
            lower,
            upper,
            counts: vec![0; bins],
            total,
        })
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.counts.len() as f64
    }

    pub fn bin(&self, v: f64) -> Option<usize> {
        if !(v >= self.lower && v <= self.upper) {
            return None;
        }
        Some((((v - self.lower) / self.width()) as usize).min(self.counts.len() - 1))
    }

    pub fn add(&mut self, v: f64) {
        if let Some(b) = self.bin(v) {
            self.counts[b] += 1;
        }
    }

    pub fn density(&self) -> Vec<f64> {
        let norm = self.total.max(1) as f64 * self.width();
        self.counts.iter().map(|&c| c as f64 / norm).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.lower + (i as f64 + 0.5) * self.width()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram2D {
    pub x: Histogram1D,
    pub y: Histogram1D,
    /// Row-major `[x bin][y bin]`.
    pub counts: Vec<u64>,
    pub total: usize,
}

impl Histogram2D {
    pub fn density(&self, log10: bool) -> Vec<f64> {
        let norm = self.total.max(1) as f64 * self.x.width() * self.y.width();
        self.counts
            .iter()
            .map(|&c| {
                let d = c as f64 / norm;
                if log10 {
                    if d > 0.0 {
                        d.log10()
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    d
                }
            })
            .collect()
    }

    /// Sums over the second axis, reproducing the first-axis marginal.
    pub fn marginal_x(&self) -> Vec<u64> {
        let ny = self.y.counts.len();
        self.counts.chunks_exact(ny).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<u64> {
        let ny = self.y.counts.len();
        (0..ny).map(|j| self.counts.iter().skip(j).step_by(ny).sum()).collect()
    }
}

/// Histogram of every requested dimension over the particles confined at
/// index `k`.
pub fn marginal_pdfs(trajs: &[Trajectory], k: usize, ranges: &[(usize, f64, f64)], bins: usize) -> Result<Vec<Histogram1D>> {
    let confined = trajs.iter().filter(|t| t.position_at(k).is_some()).count();
    if confined == 0 {
        return Err(Error::config(format!("no particle is confined at index {k} (of {})", trajs.len())));
    }
    ranges
        .iter()
        .map(|&(d, lo, hi)| {
            let mut h = Histogram1D::new(lo, hi, bins, trajs.len())?;
            for v in confined_positions(trajs, k, d) {
                h.add(v);
            }
            Ok(h)
        })
        .collect()
}

pub fn joint_pdf(trajs: &[Trajectory], k: usize, a: (usize, f64, f64), b: (usize, f64, f64), bins: (usize, usize)) -> Result<Histogram2D> {
    let mut hx = Histogram1D::new(a.1, a.2, bins.0, trajs.len())?;
    let mut hy = Histogram1D::new(b.1, b.2, bins.1, trajs.len())?;
    let mut counts = vec![0u64; bins.0 * bins.1];
    let mut n = 0;
    for t in trajs {
        if let Some(x) = t.position_at(k) {
            n += 1;
            if let (Some(i), Some(j)) = (hx.bin(x[a.0]), hy.bin(x[b.0])) {
                counts[i * bins.1 + j] += 1;
                hx.counts[i] += 1;
                hy.counts[j] += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::config(format!("no particle is confined at index {k} (of {})", trajs.len())));
    }
    Ok(Histogram2D {
        x: hx,
        y: hy,
        counts,
        total: trajs.len(),
    })
}

/// Confined particles with momentum `p ≥ p_star` at index `k`, relative to
/// the initial ensemble size.
pub fn runaway_fraction(trajs: &[Trajectory], k: usize, p_star: f64) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::config("trajectory set is empty"));
    }
    if trajs.iter().any(|t| t.dim != 3) {
        return Err(Error::Shape("runaway fraction needs (p, ξ, r) trajectories".into()));
    }
    let n = trajs.iter().filter(|t| t.position_at(k).is_some_and(|x| x[0] >= p_star)).count();
    Ok(n as f64 / trajs.len() as f64)
}

/// Escaped fraction at index `k` for each initial position; `run` produces
/// the trajectories for one start.
pub fn exit_rate_vs_initial<F>(positions: &[Vec<f64>], k: usize, run: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &[f64]) -> Result<Vec<Trajectory>> + Sync,
{
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| Ok(escaped_fraction_at(&run(i, p)?, k)))
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("KS statistic needs two non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample Kolmogorov–Smirnov statistic against `cdf`.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::config("KS statistic needs a non-empty sample"));
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Ok(v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max))
}

/// Writes a CSV file whose first line names the manifest it belongs to.
pub fn write_csv(path: &Path, manifest_ref: Option<&str>, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut s = String::new();
    if let Some(m) = manifest_ref {
        let _ = writeln!(s, "# manifest: {m}");
    }
    s.push_str(&header.join(","));
    s.push('\n');
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Shape(format!("row has {} values for {} columns", r.len(), header.len())));
        }
        let line: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#555555"];

/// Minimal SVG line plot.
pub fn svg_lines(title: &str, x_label: &str, series: &[(&str, &[f64], &[f64])]) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let finite = |v: &&f64| v.is_finite();
    let xs = series.iter().flat_map(|s| s.1.iter()).filter(finite);
    let ys = series.iter().flat_map(|s| s.2.iter()).filter(finite);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(y1 > y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{m}\" y=\"{}\" text-anchor=\"middle\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x1:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>\n",
        w / 2.0,
        escape(title),
        w - 2.0 * m,
        h - 2.0 * m,
        w / 2.0,
        h - 12.0,
        escape(x_label),
        h - m + 16.0,
        w - m,
        h - m + 16.0,
        m - 4.0,
        h - m,
        m - 4.0,
        m + 4.0,
    );
    for (i, (name, x, y)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(y.iter())
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(&a, &b)| format!("{:.2},{:.2}", px(a), py(b)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>",
            w - m - 150.0,
            m + 16.0 + 16.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Minimal SVG heatmap of a row-major `nx × ny` grid (x horizontal).
pub fn svg_heatmap(title: &str, values: &[f64], nx: usize, ny: usize) -> String {
    let (w, h, m) = (520.0, 520.0, 40.0);
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (cw, ch) = ((w - 2.0 * m) / nx as f64, (h - 2.0 * m) / ny as f64);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{} [{lo:.3e}, {hi:.3e}]</text>\n",
        w / 2.0,
        escape(title)
    );
    for i in 0..nx {
        for j in 0..ny {
            let v = values[i * ny + j];
            if !v.is_finite() {
                continue;
            }
            let t = (v - lo) / span;
            let (r, g, b) = ((255.0 * t) as u8, (64.0 + 96.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8);
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({r},{g},{b})\"/>",
                m + i as f64 * cw,
                h - m - (j + 1) as f64 * ch,
                cw + 0.2,
                ch + 0.2
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
