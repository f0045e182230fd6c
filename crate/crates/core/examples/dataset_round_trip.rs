//! Segments simulated trajectories into transition triples, writes them
//! to disk and rebuilds the trajectories from the file.
//!
//! cargo run --release --example dataset_round_trip -- [benchmark] [n]

use exitflow::analysis::confined_fraction_at;
use exitflow::dataset::{load_observations, save_observations};
use exitflow::pipeline;

fn main() -> exitflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map_or("cellular2d", String::as_str);
    let mut cfg = pipeline::builtin_config(name)?;
    cfg.simulation.n_train = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let trajs = pipeline::training_trajectories(&cfg)?;
    let obs = pipeline::build_dataset(&cfg)?;
    println!("{} trajectories -> {} triples, {} exits, {} skipped", trajs.len(), obs.len(), obs.n_exits(), obs.skipped);

    let dir = std::env::temp_dir().join("exitflow-dataset-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("train.bflow");
    save_observations(&obs, &path)?;
    let back = load_observations(&path, Some(obs.dim))?;
    println!("{} bytes on disk, identical after reload: {}", std::fs::metadata(&path)?.len(), back == obs);

    let p = dir.join("traj.bflow");
    pipeline::write_trajectories(&cfg.problem, &trajs, &p)?;
    let rebuilt = pipeline::read_trajectories(&cfg.problem, &p)?;
    let k = cfg.problem.time_grid()?.n_obs();
    println!("confined at the end: {:.4} original, {:.4} rebuilt", confined_fraction_at(&trajs, k), confined_fraction_at(&rebuilt, k));
    Ok(())
}
