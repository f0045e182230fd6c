//! One-step generator `G(x, z)` and the hybrid sampler that combines it with
//! the exit model.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMap, LabeledSet};
use crate::error::{Error, Result};
use crate::exit_model::ExitModel;
use crate::neural::{Activation, Loss, Mlp, MlpSpec, Normalizer, Output, TrainOptions, TrainReport};
use crate::rng::{stream_rng, StreamRng};
use crate::sde::{DomainSpec, ExitEvent, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainOptions,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            activation: Activation::Relu,
            train: TrainOptions {
                epochs: 5000,
                learning_rate: 1e-3,
                weight_decay: 0.0,
                ..TrainOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub net: Mlp,
    /// Input scaling of `x`; `z` enters unscaled.
    pub x_norm: Normalizer,
    /// Output scaling: the network predicts standardized increments.
    pub y_norm: Normalizer,
    pub dt_obs: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    role: String,
    x_norm: Normalizer,
    y_norm: Normalizer,
    dt_obs: f64,
}

const ROLE: &str = "generator";

pub fn train_generator(labeled: &LabeledSet, cfg: &GeneratorConfig, seed: u64) -> Result<(GeneratorModel, TrainReport)> {
    if labeled.is_empty() {
        return Err(Error::config("labeled set is empty"));
    }
    let d = labeled.dim;
    let x_norm = Normalizer::fit(&labeled.x, d)?;
    let y_norm = Normalizer::fit(&labeled.y, d)?;
    let n = labeled.len();
    let mut input = ndarray::Array2::zeros((n, 2 * d));
    let xs = x_norm.matrix(&labeled.x);
    input.slice_mut(ndarray::s![.., ..d]).assign(&xs);
    for (m, z) in labeled.z.chunks_exact(d).enumerate() {
        for i in 0..d {
            input[[m, d + i]] = z[i];
        }
    }
    let target = y_norm.matrix(&labeled.y);
    let mut net = Mlp::new(
        MlpSpec {
            n_in: 2 * d,
            hidden: cfg.hidden.clone(),
            n_out: d,
            activation: cfg.activation,
            output: Output::Identity,
            dropout: 0.0,
        },
        seed,
    )?;
    let opts = TrainOptions {
        seed: cfg.train.seed ^ seed,
        ..cfg.train.clone()
    };
    let report = net.train(input.view(), target.view(), Loss::Mse, &opts)?;
    log::info!(
        "generator: {n} labels, final loss {:.5} (standardized) in {:.1}s",
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        report.seconds
    );
    Ok((
        GeneratorModel {
            net,
            x_norm,
            y_norm,
            dt_obs: labeled.dt_obs,
        },
        report,
    ))
}

impl GeneratorModel {
    pub fn dim(&self) -> usize {
        self.x_norm.dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            role: ROLE.into(),
            x_norm: self.x_norm.clone(),
            y_norm: self.y_norm.clone(),
            dt_obs: self.dt_obs,
        };
        self.net.save(path, &serde_json::to_value(meta).map_err(|e| Error::config(e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = Mlp::load(path)?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| Error::load("meta", e.to_string()))?;
        if meta.role != ROLE {
            return Err(Error::load("meta", format!("checkpoint holds a {} model, not a generator", meta.role)));
        }
        let d = meta.x_norm.dim();
        if net.spec().n_in != 2 * d || net.spec().n_out != d || meta.y_norm.dim() != d {
            return Err(Error::load("spec", "network shape does not match a generator"));
        }
        Ok(Self {
            net,
            x_norm: meta.x_norm,
            y_norm: meta.y_norm,
            dt_obs: meta.dt_obs,
        })
    }
}

/// Batched per-step exit probability.
pub trait ExitOracle: Sync {
    /// `feats` holds one row of features per particle.
    fn exit_probs(&self, feats: &[f64], dim: usize) -> Result<Vec<f64>>;
}

/// Batched one-step increment `G(x, z)` in feature coordinates.
pub trait IncrementOracle: Sync {
    fn increments(&self, feats: &[f64], z: &[f64], dim: usize) -> Result<Vec<f64>>;
}

impl ExitOracle for ExitModel {
    fn exit_probs(&self, feats: &[f64], _dim: usize) -> Result<Vec<f64>> {
        self.predict_batch(feats)
    }
}

impl IncrementOracle for GeneratorModel {
    fn increments(&self, feats: &[f64], z: &[f64], dim: usize) -> Result<Vec<f64>> {
        let n = feats.len() / dim;
        let mut input = ndarray::Array2::zeros((n, 2 * dim));
        for m in 0..n {
            let mut row = input.row_mut(m);
            let row = row.as_slice_mut().expect("standard layout");
            self.x_norm.apply(&feats[m * dim..(m + 1) * dim], &mut row[..dim]);
            row[dim..].copy_from_slice(&z[m * dim..(m + 1) * dim]);
        }
        let out = self.net.predict(input.view())?;
        let mut y = vec![0.0; n * dim];
        for (m, row) in out.rows().into_iter().enumerate() {
            self.y_norm.invert(row.as_slice().expect("standard layout"), &mut y[m * dim..(m + 1) * dim]);
        }
        Ok(y)
    }
}

/// Exit probability that does not depend on the state.
#[derive(Clone, Copy, Debug)]
pub struct ConstantExit(pub f64);

impl ExitOracle for ConstantExit {
    fn exit_probs(&self, feats: &[f64], dim: usize) -> Result<Vec<f64>> {
        Ok(vec![self.0; feats.len() / dim])
    }
}

/// Closure-backed increment oracle, evaluated row by row.
pub struct FnIncrement<F>(pub F);

impl<F: Fn(&[f64], &[f64], &mut [f64]) + Sync> IncrementOracle for FnIncrement<F> {
    fn increments(&self, feats: &[f64], z: &[f64], dim: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; feats.len()];
        for ((x, z), o) in feats.chunks_exact(dim).zip(z.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
            (self.0)(x, z, o);
        }
        Ok(out)
    }
}

/// How a surrogate particle leaves the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    /// The exit model alone decides; generated states beyond absorbing
    /// bounds are folded back inside and counted.
    Model,
    /// No exit model: a particle exits when a generated state crosses an
    /// absorbing bound (the ablation baselines).
    Crossing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SamplerStats {
    pub exit_evaluations: usize,
    pub generator_evaluations: usize,
    pub clamps: usize,
}

impl std::ops::AddAssign for SamplerStats {
    fn add_assign(&mut self, o: Self) {
        self.exit_evaluations += o.exit_evaluations;
        self.generator_evaluations += o.generator_evaluations;
        self.clamps += o.clamps;
    }
}

pub struct Sampler<'a> {
    pub exit: Option<&'a dyn ExitOracle>,
    pub generator: &'a dyn IncrementOracle,
    /// Domain in simulation coordinates.
    pub domain: &'a DomainSpec,
    pub map: FeatureMap,
    pub dt_obs: f64,
    pub n_steps_max: usize,
    /// Trajectories advanced together in one batch.
    pub batch: usize,
}

impl Sampler<'_> {
    pub fn mode(&self) -> ExitMode {
        if self.exit.is_some() {
            ExitMode::Model
        } else {
            ExitMode::Crossing
        }
    }

    pub fn generate_trajectory(&self, x0: &[f64], rng: &mut StreamRng) -> Result<(Trajectory, SamplerStats)> {
        let mut out = self.run_batch(vec![x0.to_vec()], vec![rng.clone()])?;
        let (t, s, r) = out.pop().expect("one trajectory");
        *rng = r;
        Ok((t, s))
    }

    /// `n_traj` trajectories; trajectory `i` draws its start and all its
    /// randomness from stream `i` of `seed`.
    pub fn generate_ensemble<S>(&self, x0_sampler: S, n_traj: usize, seed: u64) -> Result<(Vec<Trajectory>, SamplerStats)>
    where
        S: Fn(&mut StreamRng) -> Vec<f64> + Sync,
    {
        if n_traj == 0 {
            return Err(Error::config("ensemble size must be positive"));
        }
        let batch = self.batch.max(1);
        let chunks: Vec<Result<Vec<(Trajectory, SamplerStats, StreamRng)>>> = (0..n_traj.div_ceil(batch))
            .into_par_iter()
            .map(|c| {
                let ids = c * batch..((c + 1) * batch).min(n_traj);
                let mut rngs: Vec<StreamRng> = ids.clone().map(|i| stream_rng(seed, i as u64)).collect();
                let x0: Vec<Vec<f64>> = rngs.iter_mut().map(&x0_sampler).collect();
                self.run_batch(x0, rngs)
            })
            .collect();
        let mut trajs = Vec::with_capacity(n_traj);
        let mut stats = SamplerStats::default();
        for chunk in chunks {
            for (t, s, _) in chunk? {
                trajs.push(t);
                stats += s;
            }
        }
        Ok((trajs, stats))
    }

    fn run_batch(&self, x0: Vec<Vec<f64>>, mut rngs: Vec<StreamRng>) -> Result<Vec<(Trajectory, SamplerStats, StreamRng)>> {
        let d = self.domain.dim();
        let mut trajs = Vec::with_capacity(x0.len());
        for x in &x0 {
            if x.len() != d || !self.domain.is_inside(x) {
                return Err(Error::Domain(format!("start {x:?} is not inside the domain")));
            }
            trajs.push(Trajectory::new(d, self.dt_obs, x));
        }
        let mut stats = vec![SamplerStats::default(); x0.len()];
        let mut state = x0;
        let mut active: Vec<usize> = (0..state.len()).collect();
        let mut feats = Vec::new();
        let mut z = Vec::new();
        let mut buf = vec![0.0; d];
        for step in 0..self.n_steps_max {
            if active.is_empty() {
                break;
            }
            feats.clear();
            for &i in &active {
                let off = feats.len();
                feats.resize(off + d, 0.0);
                self.map.to_features(&state[i], &mut feats[off..]);
            }
            if let Some(f) = self.exit {
                let probs = f.exit_probs(&feats, d)?;
                let mut keep = Vec::with_capacity(active.len());
                let mut kept_feats = Vec::with_capacity(feats.len());
                for (k, &i) in active.iter().enumerate() {
                    stats[i].exit_evaluations += 1;
                    let nu: f64 = rngs[i].random();
                    if nu < probs[k] {
                        trajs[i].exit = Some(ExitEvent {
                            step: step + 1,
                            crossing: Vec::new(),
                        });
                    } else {
                        keep.push(i);
                        kept_feats.extend_from_slice(&feats[k * d..(k + 1) * d]);
                    }
                }
                active = keep;
                feats = kept_feats;
            }
            z.clear();
            for &i in &active {
                for _ in 0..d {
                    z.push(rngs[i].sample::<f64, _>(StandardNormal));
                }
            }
            let inc = self.generator.increments(&feats, &z, d)?;
            let mut keep = Vec::with_capacity(active.len());
            for (k, &i) in active.iter().enumerate() {
                stats[i].generator_evaluations += 1;
                for j in 0..d {
                    buf[j] = feats[k * d + j] + inc[k * d + j];
                }
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!("generated state is not finite at step {step}"), &buf));
                }
                let x = &mut state[i];
                self.map.to_state(&buf, x);
                match self.mode() {
                    ExitMode::Model => {
                        if self.domain.apply_confining(x) {
                            stats[i].clamps += 1;
                        }
                        trajs[i].push(x);
                        keep.push(i);
                    }
                    ExitMode::Crossing => {
                        if self.domain.apply(x) {
                            trajs[i].exit = Some(ExitEvent {
                                step: step + 1,
                                crossing: x.clone(),
                            });
                        } else {
                            trajs[i].push(x);
                            keep.push(i);
                        }
                    }
                }
            }
            active = keep;
        }
        Ok(trajs.into_iter().zip(stats).zip(rngs).map(|((t, s), r)| (t, s, r)).collect())
    }
}
