//! Escaped fraction at t = 1 versus the starting x1 (x2 = 1) in the
//! cellular flow, Monte Carlo against the trained surrogate.
//!
//! cargo run --release --example cellular_exit_curve -- [scale] [trajectories_per_point]

use exitflow::pipeline;

fn main() -> exitflow::Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let args: Vec<String> = std::env::args().collect();
    let scale = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let n = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2_000);
    let cfg = pipeline::builtin_config("cellular2d")?.scaled(scale)?;
    let (_, m) = pipeline::train_all(&cfg)?;
    let c = pipeline::exit_rate_curves(&cfg, Some(&m.exit), &m.generator, 1.0, 17, n)?;
    println!("{:>7} {:>7} {:>9}", "x1", "mc", "surrogate");
    for i in 0..c.x1.len() {
        println!("{:7.3} {:7.4} {:9.4}", c.x1[i], c.mc[i], c.surrogate[i]);
    }
    Ok(())
}
