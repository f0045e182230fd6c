//! One-step exit probability of Brownian motion on [0, 6]: eigenfunction
//! series against a brute-force Monte Carlo estimate.
//!
//! cargo run --release --example series_oracle -- [samples_per_point] [dt_sim]

use exitflow::analysis::{exit_prob_grid, ExitSource};
use exitflow::problems::{exit_prob_series_1d, Brownian1D};

fn main() -> exitflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let dt_sim = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let p = Brownian1D::default();
    let points: Vec<Vec<f64>> = [0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0, 3.0].iter().map(|&x| vec![x]).collect();
    let mc = exit_prob_grid(
        &ExitSource::MonteCarlo {
            system: &p,
            dt_sim,
            dt_obs: p.dt_obs,
            n_samples: n,
            seed: 9,
        },
        &points,
    )?;
    println!("{:>5} {:>10} {:>10} {:>8}", "x", "series", "mc", "se");
    for (x, m) in points.iter().zip(mc) {
        let s = exit_prob_series_1d(x[0], p.dt_obs, p.length, 200)?;
        println!("{:5.2} {s:10.6} {m:10.6} {:8.5}", x[0], (s * (1.0 - s) / n as f64).sqrt());
    }
    Ok(())
}
