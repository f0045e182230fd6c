//! Fits a small network to sin(x) with the built-in trainer.
//!
//! cargo run --release --example fit_network -- [epochs]

use ndarray::Array2;

use exitflow::neural::{Activation, Loss, Mlp, MlpSpec, Output, TrainOptions};

fn main() -> exitflow::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let x = Array2::from_shape_fn((1024, 1), |(i, _)| -3.0 + 6.0 * i as f64 / 1023.0);
    let y = x.mapv(f64::sin);
    let mut net = Mlp::new(
        MlpSpec {
            n_in: 1,
            hidden: vec![32, 32],
            n_out: 1,
            activation: Activation::Tanh,
            output: Output::Identity,
            dropout: 0.0,
        },
        1,
    )?;
    let opts = TrainOptions {
        epochs,
        batch_size: 64,
        learning_rate: 3e-3,
        ..TrainOptions::default()
    };
    let report = net.train(x.view(), y.view(), Loss::Mse, &opts)?;
    println!("final loss {:.2e} after {:.1}s", report.epoch_loss.last().copied().unwrap_or(f64::NAN), report.seconds);
    for v in [-2.5, -1.0, 0.0, 1.0, 2.5] {
        println!("sin({v:+.1}) = {:+.4}, net {:+.4}", f64::sin(v), net.predict_row(&[v])?[0]);
    }
    Ok(())
}
