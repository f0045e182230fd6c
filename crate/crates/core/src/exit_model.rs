//! Per-observation-step exit probability `F(x) ≈ P(exit within Δt | x)`,
//! learned from the γ indicators by binary cross-entropy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ObservationSet;
use crate::error::{Error, Result};
use crate::neural::{column, Activation, Loss, Mlp, MlpSpec, Normalizer, Output, TrainOptions, TrainReport};

/// Probabilities are floored here before taking logarithms.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub train: TrainOptions,
}

impl Default for ExitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            activation: Activation::LeakyRelu,
            dropout: 0.2,
            train: TrainOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExitModel {
    pub net: Mlp,
    pub normalizer: Normalizer,
    pub dt_obs: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    role: String,
    normalizer: Normalizer,
    dt_obs: f64,
}

const ROLE: &str = "exit";

/// Fits `F` on every row of `obs`, γ=1 rows included.
pub fn train_exit(obs: &ObservationSet, cfg: &ExitConfig, seed: u64) -> Result<(ExitModel, TrainReport)> {
    let exits = obs.n_exits();
    if exits == 0 || exits == obs.len() {
        return Err(Error::config(format!(
            "exit training needs both classes; dataset has {} rows of which {exits} exit",
            obs.len()
        )));
    }
    let normalizer = Normalizer::fit(&obs.x, obs.dim)?;
    let x = normalizer.matrix(&obs.x);
    let y = column(obs.gamma.iter().map(|&g| f64::from(g)));
    let mut net = Mlp::new(
        MlpSpec {
            n_in: obs.dim,
            hidden: cfg.hidden.clone(),
            n_out: 1,
            activation: cfg.activation,
            output: Output::Sigmoid,
            dropout: cfg.dropout,
        },
        seed,
    )?;
    let opts = TrainOptions {
        seed: cfg.train.seed ^ seed,
        ..cfg.train.clone()
    };
    let report = net.train(x.view(), y.view(), Loss::Bce, &opts)?;
    log::info!(
        "exit model: {} rows, {exits} exits, final loss {:.5} in {:.1}s",
        obs.len(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.seconds
    );
    Ok((
        ExitModel {
            net,
            normalizer,
            dt_obs: obs.dt_obs,
        },
        report,
    ))
}

impl ExitModel {
    pub fn dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.dim()];
        self.normalizer.apply(x, &mut z);
        self.net.predict_row(&z).expect("dimension checked by caller")[0]
    }

    /// Predictions for a row-major batch.
    pub fn predict_batch(&self, rows: &[f64]) -> Result<Vec<f64>> {
        if rows.len() % self.dim() != 0 {
            return Err(Error::Shape(format!("batch length {} is not a multiple of {}", rows.len(), self.dim())));
        }
        let x = self.normalizer.matrix(rows);
        Ok(self.net.predict(x.view())?.into_raw_vec_and_offset().0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            role: ROLE.into(),
            normalizer: self.normalizer.clone(),
            dt_obs: self.dt_obs,
        };
        self.net.save(path, &serde_json::to_value(meta).map_err(|e| Error::config(e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = Mlp::load(path)?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| Error::load("meta", e.to_string()))?;
        if meta.role != ROLE {
            return Err(Error::load("meta", format!("checkpoint holds a {} model, not an exit model", meta.role)));
        }
        if net.spec().n_in != meta.normalizer.dim() || net.spec().n_out != 1 || net.spec().output != Output::Sigmoid {
            return Err(Error::load("spec", "network shape does not match an exit model"));
        }
        Ok(Self {
            net,
            normalizer: meta.normalizer,
            dt_obs: meta.dt_obs,
        })
    }
}

/// `Σ w·p_ref·log(p_ref / p_model)` with both probabilities floored at
/// [`KL_FLOOR`]. Unit weights when `weights` is `None`.
pub fn kl_divergence(p_ref: &[f64], p_model: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if p_ref.len() != p_model.len() || weights.is_some_and(|w| w.len() != p_ref.len()) {
        return Err(Error::Shape(format!(
            "grids differ: reference {}, model {}, weights {:?}",
            p_ref.len(),
            p_model.len(),
            weights.map(<[f64]>::len)
        )));
    }
    let mut total = 0.0;
    for (i, (&p, &q)) in p_ref.iter().zip(p_model).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("reference probability {p} at index {i} is outside [0, 1]")));
        }
        let p = p.max(KL_FLOOR);
        let q = q.max(KL_FLOOR);
        total += weights.map_or(1.0, |w| w[i]) * p * (p / q).ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ObservationSet;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn small() -> ExitConfig {
        ExitConfig {
            hidden: vec![16, 16],
            activation: Activation::LeakyRelu,
            dropout: 0.0,
            train: TrainOptions {
                epochs: 15,
                batch_size: 256,
                learning_rate: 5e-3,
                weight_decay: 1e-5,
                final_lr_factor: 0.1,
                seed: 1,
            },
        }
    }

    fn synthetic(n: usize, seed: u64, p: impl Fn(f64) -> f64) -> ObservationSet {
        let mut rng = stream_rng(seed, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..6.0)).collect();
        let gamma = x.iter().map(|&v| u8::from(rng.random::<f64>() < p(v))).collect();
        ObservationSet {
            dim: 1,
            dt_obs: 0.05,
            n_trajectories: n,
            dx: vec![0.0; n],
            x,
            gamma,
            side: None,
            skipped: 0,
        }
    }

    #[test]
    fn single_class_is_refused() {
        let obs = synthetic(100, 1, |_| 0.0);
        assert!(matches!(train_exit(&obs, &small(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn independent_labels_give_constant_rate() {
        let obs = synthetic(20_000, 2, |_| 0.3);
        let (model, _) = train_exit(&obs, &small(), 3).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| 0.06 + 0.12 * i as f64).collect();
        for (x, p) in grid.iter().zip(model.predict_batch(&grid).unwrap()) {
            assert!((p - 0.3).abs() < 0.02, "F({x}) = {p}");
        }
    }

    #[test]
    fn batched_matches_pointwise_and_is_bounded() {
        let obs = synthetic(2_000, 4, |x| if x < 1.0 { 0.5 } else { 0.01 });
        let (model, _) = train_exit(&obs, &small(), 5).unwrap();
        let mut rng = stream_rng(6, 0);
        let pts: Vec<f64> = (0..100_000).map(|_| rng.random_range(0.0..6.0)).collect();
        let batch = model.predict_batch(&pts).unwrap();
        assert!(batch.iter().all(|p| (0.0..=1.0).contains(p)));
        for i in (0..pts.len()).step_by(997) {
            assert!((model.predict(&pts[i..i + 1]) - batch[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let obs = synthetic(1_000, 7, |x| x / 6.0);
        let mut cfg = small();
        cfg.train.epochs = 3;
        cfg.dropout = 0.2;
        let (a, _) = train_exit(&obs, &cfg, 9).unwrap();
        let (b, _) = train_exit(&obs, &cfg, 9).unwrap();
        assert_eq!(a.net.params(), b.net.params());
    }

    #[test]
    fn checkpoint_keeps_normalization() {
        let obs = synthetic(1_000, 8, |x| x / 6.0);
        let mut cfg = small();
        cfg.train.epochs = 2;
        let (model, _) = train_exit(&obs, &cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exit.bfnn");
        model.save(&path).unwrap();
        let back = ExitModel::load(&path).unwrap();
        assert_eq!(back.normalizer, model.normalizer);
        assert_eq!(back.predict(&[2.5]), model.predict(&[2.5]));
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = [0.1, 0.5, 0.0, 1.0];
        assert_eq!(kl_divergence(&p, &p, None).unwrap(), 0.0);
    }

    #[test]
    fn kl_against_floor_is_large_and_finite() {
        let p = [0.2, 0.4, 0.6];
        let kl = kl_divergence(&p, &[0.0; 3], None).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
    }

    #[test]
    fn kl_hand_computed() {
        let p = [0.2, 0.5, 0.3];
        let q = [0.1, 0.6, 0.3];
        let hand = 0.2 * 2f64.ln() + 0.5 * (5.0f64 / 6.0).ln();
        assert!((kl_divergence(&p, &q, None).unwrap() - hand).abs() < 1e-15);
        let w = [2.0, 0.0, 1.0];
        assert!((kl_divergence(&p, &q, Some(&w)).unwrap() - 0.4 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(matches!(kl_divergence(&[0.1, 0.2], &[0.1], None), Err(Error::Shape(_))));
    }
}
