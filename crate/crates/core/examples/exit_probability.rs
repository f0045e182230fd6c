//! Trains the exit model on 1D Brownian trajectories and compares it with
//! the analytic series and with binned exit frequencies of the training set.
//!
//! cargo run --release --example exit_probability -- [n_train] [epochs] [final_lr_factor]

use exitflow::pipeline;
use exitflow::problems::{exit_prob_series_1d, Problem};

fn main() -> exitflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = pipeline::builtin_config("brownian1d")?;
    cfg.simulation.n_train = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    if let Some(e) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.exit.train.epochs = e;
    }
    if let Some(f) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.exit.train.final_lr_factor = f;
    }
    let Problem::Brownian1d(p) = &cfg.problem else { unreachable!() };
    let obs = pipeline::build_dataset(&cfg)?;
    let model = pipeline::fit_exit(&cfg, &obs)?;

    let bins = 40;
    let width = 1.0 / bins as f64;
    let mut hits = vec![(0usize, 0usize); bins];
    for m in 0..obs.len() {
        let x = obs.x[m].min(p.length - obs.x[m]);
        if x < 1.0 {
            let b = (x / width) as usize;
            hits[b].0 += 1;
            hits[b].1 += obs.gamma[m] as usize;
        }
    }
    println!("{:>6} {:>9} {:>9} {:>9} {:>7}", "x", "model", "series", "data", "rows");
    for (b, (n, e)) in hits.iter().enumerate() {
        let x = (b as f64 + 0.5) * width;
        let freq = *e as f64 / (*n).max(1) as f64;
        let series = exit_prob_series_1d(x, p.dt_obs, p.length, 200)?;
        println!("{x:6.3} {:9.5} {series:9.5} {freq:9.5} {n:7}", model.predict(&[x]));
    }
    Ok(())
}
