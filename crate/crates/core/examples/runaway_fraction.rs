//! Runaway-electron fraction at t = 20 for Maxwellian starts of several
//! temperatures, Monte Carlo against the surrogate, plus the escape
//! fraction by initial momentum.
//!
//! cargo run --release --example runaway_fraction -- [scale] [trajectories]

use exitflow::pipeline;

fn main() -> exitflow::Result<()> {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let args: Vec<String> = std::env::args().collect();
    let scale = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let n = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5_000);
    let cfg = pipeline::builtin_config("runaway3d")?.scaled(scale)?;
    let (_, m) = pipeline::train_all(&cfg)?;
    for r in pipeline::runaway_fractions(&cfg, Some(&m.exit), &m.generator, &[2.0, 6.0, 10.0], n)? {
        println!("T0={:<3} n_RE mc {:.4} surrogate {:.4}", r.t0, r.mc, r.surrogate);
    }
    for (lo, hi, count, f) in pipeline::escape_by_momentum(&cfg, n)? {
        println!("p0 in [{lo:.2}, {hi:.2}): {count:5} particles, {:.1}% escaped", 100.0 * f);
    }
    Ok(())
}
