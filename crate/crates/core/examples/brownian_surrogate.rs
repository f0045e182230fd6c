//! End-to-end 1D surrogate: trains the exit model and generator, then
//! compares confined fractions with Monte Carlo, including the two
//! ablation baselines.
//!
//! cargo run --release --example brownian_surrogate -- [scale]

use exitflow::analysis::confined_fraction_at;
use exitflow::pipeline::{self, Variant};

fn main() -> exitflow::Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let scale = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let cfg = pipeline::builtin_config("brownian1d")?.scaled(scale)?;
    let truth = pipeline::simulate_truth(&cfg)?;
    let (obs, m) = pipeline::train_all(&cfg)?;
    let seed = pipeline::surrogate_seed(&cfg);
    let init = cfg.sampler_init();
    let (full, _) = pipeline::generate(&cfg, Some(&m.exit), &m.generator, init, cfg.sampler.n, seed)?;
    let (confined, _) = pipeline::generate(&cfg, None, &m.generator, init, cfg.sampler.n, seed)?;
    let all_cfg = Variant::AllTrajectories.apply(cfg.clone());
    let all_gen = pipeline::fit_generator(&all_cfg, &pipeline::label(&all_cfg, &obs)?)?;
    let (all, _) = pipeline::generate(&all_cfg, None, &all_gen, init, cfg.sampler.n, seed)?;

    let grid = cfg.problem.time_grid()?;
    println!("{:>3} {:>8} {:>10} {:>10} {:>14}", "T", "MC", "surrogate", "all-traj", "only-confined");
    for t in [1.0, 2.0, 3.0] {
        let k = grid.obs_index(t)?;
        let f = |s: &[_]| 100.0 * confined_fraction_at(s, k);
        println!("{t:>3} {:8.2} {:10.2} {:10.2} {:14.2}", f(&truth), f(&full), f(&all), f(&confined));
    }
    Ok(())
}
