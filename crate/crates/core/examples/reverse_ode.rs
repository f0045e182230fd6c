//! The training-free labeler on toy neighbour sets: a single neighbour is
//! recovered, and a bimodal set of increments is reproduced in
//! distribution.
//!
//! cargo run --release --example reverse_ode -- [k_steps]

use rand::Rng;
use rand_distr::StandardNormal;

use exitflow::diffusion::{reverse_ode_solve, NoiseSchedule};
use exitflow::rng::stream_rng;

fn main() -> exitflow::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let sched = NoiseSchedule::default();

    for z1 in [-1.0, 0.0, 1.0] {
        let y = reverse_ode_solve(&[0.4], 1, &[z1], &sched, k)?;
        println!("one neighbour at 0.4, z1={z1:+.1} -> {:.5}", y[0]);
    }

    let mut rng = stream_rng(4, 0);
    let neighbours: Vec<f64> = (0..400)
        .map(|i| {
            let centre = if i % 4 == 0 { 1.0 } else { -0.5 };
            centre + 0.1 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let out: Vec<f64> = (0..2000)
        .map(|_| reverse_ode_solve(&neighbours, 1, &[rng.sample(StandardNormal)], &sched, k).map(|y| y[0]))
        .collect::<exitflow::Result<_>>()?;
    let upper = out.iter().filter(|&&y| y > 0.25).count() as f64 / out.len() as f64;
    println!("bimodal neighbours (25% near 1.0): {:.1}% of labels above 0.25", 100.0 * upper);
    Ok(())
}
