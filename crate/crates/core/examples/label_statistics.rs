//! Labels 1D Brownian transitions with the reverse ODE and compares the
//! binned mean and spread of the labels with those of the observed
//! confined increments, then does the same for a trained generator.
//!
//! cargo run --release --example label_statistics -- [n_train] [k_nn] [k_steps]

use exitflow::generator::IncrementOracle;
use exitflow::pipeline;
use exitflow::rng::stream_rng;
use rand_distr::{Distribution, StandardNormal};

fn stats(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn main() -> exitflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let mut cfg = pipeline::builtin_config("brownian1d")?;
    cfg.simulation.n_train = args.first().copied().unwrap_or(20_000);
    if let Some(&k) = args.get(1) {
        cfg.label.k_nn = k;
    }
    if let Some(&k) = args.get(2) {
        cfg.label.k_steps = k;
    }
    let obs = pipeline::build_dataset(&cfg)?;
    let labeled = pipeline::label(&cfg, &obs)?;
    let generator = pipeline::fit_generator(&cfg, &labeled)?;

    let edges = [0.0, 0.1, 0.2, 0.4, 0.7, 1.0, 2.0, 3.0];
    println!("{:>10} {:>17} {:>17} {:>17}", "x band", "data mean/std", "label mean/std", "G mean/std");
    let mut rng = stream_rng(9, 0);
    for w in edges.windows(2) {
        let band = |x: f64| {
            let d = x.min(6.0 - x);
            d >= w[0] && d < w[1]
        };
        let sign = |x: f64| if x < 3.0 { 1.0 } else { -1.0 };
        let data: Vec<f64> = (0..obs.len())
            .filter(|&m| obs.gamma[m] == 0 && band(obs.x[m]))
            .map(|m| sign(obs.x[m]) * obs.dx[m])
            .collect();
        let rows: Vec<usize> = (0..labeled.len()).filter(|&m| band(labeled.x[m])).collect();
        let labels: Vec<f64> = rows.iter().map(|&m| sign(labeled.x[m]) * labeled.y[m]).collect();
        let xs: Vec<f64> = rows.iter().map(|&m| labeled.x[m]).collect();
        let z: Vec<f64> = xs.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
        let g: Vec<f64> = generator.increments(&xs, &z, 1)?.iter().zip(&xs).map(|(y, &x)| sign(x) * y).collect();
        let (a, b, c) = (stats(&data), stats(&labels), stats(&g));
        println!(
            "{:>4}-{:<5} {:8.4} {:8.4} {:8.4} {:8.4} {:8.4} {:8.4}",
            w[0], w[1], a.0, a.1, b.0, b.1, c.0, c.1
        );
    }
    Ok(())
}
