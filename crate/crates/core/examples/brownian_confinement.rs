//! Monte Carlo confined fractions of 1D Brownian motion started at x0 = 1.
//!
//! cargo run --release --example brownian_confinement -- [n] [dt_sim]

use exitflow::analysis;
use exitflow::config::InitSpec;
use exitflow::pipeline;
use exitflow::problems::{Brownian1D, Problem};

fn main() -> exitflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let mut p = Brownian1D::default();
    if let Some(dt) = args.get(2).and_then(|s| s.parse().ok()) {
        p.dt_sim = dt;
    }
    let problem = Problem::Brownian1d(p.finish()?);
    let trajs = pipeline::simulate(&problem, &InitSpec::Start, n, 1)?;
    let grid = problem.time_grid()?;
    println!("{n} trajectories, dt_sim {}", grid.dt_sim);
    for t in [0.5, 1.0, 2.0, 3.0] {
        let f = analysis::confined_fraction_at(&trajs, grid.obs_index(t)?);
        let se = (f * (1.0 - f) / n as f64).sqrt();
        println!("T={t:<4} confined {:6.2}% ± {:.2}", 100.0 * f, 100.0 * se);
    }
    Ok(())
}
