use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[problem]
kind = "brownian1d"
t_max = 1.0
dt_sim = 1e-3
x0 = 1.0

[simulation]
n_train = 400
n_truth = 400

[exit]
hidden = [8]
dropout = 0.0
[exit.train]
epochs = 2
batch_size = 256

[label]
k_nn = 16
k_steps = 20
max_rows = 300

[generator]
hidden = [8]
[generator.train]
epochs = 2
batch_size = 64

[sampler]
n = 400

[evaluation]
times = [0.5, 1.0]
grid_points = 11
"#;

fn exitflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitflow"))
        .current_dir(dir)
        .env_remove("EXITFLOW_OUT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = exitflow(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path, out: &str) {
    let common = ["--config", "tiny.toml", "--out-dir", out];
    for stage in ["simulate-truth", "build-dataset", "train-exit", "label", "train-generator", "generate"] {
        let mut args = vec![stage];
        args.extend(common);
        ok(dir, &args);
    }
    for spec in ["table1", "exit-grid"] {
        let mut args = vec!["evaluate", "--spec", spec];
        args.extend(common);
        ok(dir, &args);
    }
}

#[test]
fn stages_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    pipeline(dir, "a");
    pipeline(dir, "b");
    for f in ["train.bflow", "exit.bfnn", "labels.bflow", "generator.bfnn", "surrogate.bflow", "table1.csv", "exit_grid.csv", "truth.confinement.csv"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let table = std::fs::read_to_string(dir.join("a/table1.csv")).unwrap();
    assert!(table.starts_with("# manifest: "), "{table}");
    assert_eq!(table.lines().count(), 4, "{table}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();

    let missing = exitflow(dir, &["simulate-truth", "--config", "absent.toml"]);
    assert_eq!(missing.status.code(), Some(4));

    let bad_variant = exitflow(dir, &["generate", "--config", "tiny.toml", "--variant", "half"]);
    assert_eq!(bad_variant.status.code(), Some(2));

    std::fs::write(dir.join("bad.toml"), TINY.replace("x0 = 1.0", "x0 = 9.0")).unwrap();
    assert_eq!(exitflow(dir, &["simulate-truth", "--config", "bad.toml"]).status.code(), Some(2));

    let no_data = exitflow(dir, &["train-exit", "--config", "tiny.toml", "--out-dir", "c"]);
    assert_eq!(no_data.status.code(), Some(4));

    ok(dir, &["build-dataset", "--config", "tiny.toml", "--out-dir", "c"]);
    std::fs::write(dir.join("other.toml"), TINY.replace("n_train = 400", "n_train = 401")).unwrap();
    let stale = exitflow(dir, &["train-exit", "--config", "other.toml", "--out-dir", "c"]);
    assert_eq!(stale.status.code(), Some(4), "{}", String::from_utf8_lossy(&stale.stderr));
}

#[test]
fn default_output_root_follows_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_exitflow"))
        .current_dir(dir)
        .env("EXITFLOW_OUT", "elsewhere")
        .env("RUST_LOG", "warn")
        .args(["simulate-truth", "--config", "tiny.toml", "--n", "10"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("elsewhere/brownian1d/truth.bflow").exists());
}
