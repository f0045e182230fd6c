//! Run configuration: one TOML file per run, validated before any stage
//! starts.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::LabelConfig;
use crate::error::{Error, Result};
use crate::exit_model::ExitConfig;
use crate::generator::GeneratorConfig;
use crate::problems::Problem;
use crate::rng::StreamRng;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "EXITFLOW_OUT";

/// Initial-state distribution, in simulation coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// The problem's configured start point.
    Start,
    Fixed { x: Vec<f64> },
    /// Uniform over a box, by default the domain's bounding box. Points on
    /// an absorbing face are redrawn.
    Uniform {
        #[serde(default)]
        lower: Option<Vec<f64>>,
        #[serde(default)]
        upper: Option<Vec<f64>>,
    },
    /// Truncated Maxwellian of the runaway-electron problem.
    Maxwellian { t0: f64 },
}

pub type InitSampler = Box<dyn Fn(&mut StreamRng) -> Vec<f64> + Sync + Send>;

impl InitSpec {
    pub fn validate(&self, problem: &Problem) -> Result<()> {
        let domain = problem.system().domain();
        let d = domain.dim();
        match self {
            InitSpec::Start => {
                if matches!(problem, Problem::Runaway3d(_)) {
                    return Err(Error::config("runaway3d has no point start; use a maxwellian or uniform init"));
                }
            }
            InitSpec::Fixed { x } => {
                if x.len() != d {
                    return Err(Error::config(format!("fixed start has {} coordinates, problem has {d}", x.len())));
                }
                if !domain.is_inside(x) || x.iter().zip(domain.lower().iter().zip(domain.upper())).any(|(v, (l, u))| v < l || v > u) {
                    return Err(Error::config(format!("fixed start {x:?} is outside the domain")));
                }
            }
            InitSpec::Uniform { lower, upper } => {
                let lo = lower.as_deref().unwrap_or(domain.lower());
                let hi = upper.as_deref().unwrap_or(domain.upper());
                if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
                    return Err(Error::config(format!("uniform init box {lo:?}..{hi:?} is invalid for dimension {d}")));
                }
                if lo.iter().zip(domain.lower()).any(|(a, b)| a < b) || hi.iter().zip(domain.upper()).any(|(a, b)| a > b) {
                    return Err(Error::config("uniform init box leaves the domain"));
                }
            }
            InitSpec::Maxwellian { t0 } => {
                if !matches!(problem, Problem::Runaway3d(_)) {
                    return Err(Error::config("maxwellian init is only defined for runaway3d"));
                }
                if !(*t0 > 0.0 && t0.is_finite()) {
                    return Err(Error::config(format!("maxwellian t0 must be positive, got {t0}")));
                }
            }
        }
        Ok(())
    }

    pub fn sampler(&self, problem: &Problem) -> Result<InitSampler> {
        self.validate(problem)?;
        let domain = problem.system().domain().clone();
        Ok(match (self, problem) {
            (InitSpec::Start, Problem::Brownian1d(p)) => {
                let x = p.x0;
                Box::new(move |_| vec![x])
            }
            (InitSpec::Start, Problem::Cellular2d(p)) => {
                let x = p.x0.to_vec();
                Box::new(move |_| x.clone())
            }
            (InitSpec::Fixed { x }, _) => {
                let x = x.clone();
                Box::new(move |_| x.clone())
            }
            (InitSpec::Uniform { lower, upper }, _) => {
                let lo = lower.clone().unwrap_or_else(|| domain.lower().to_vec());
                let hi = upper.clone().unwrap_or_else(|| domain.upper().to_vec());
                Box::new(move |rng| loop {
                    let x: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..*b)).collect();
                    if domain.is_inside(&x) {
                        break x;
                    }
                })
            }
            (InitSpec::Maxwellian { t0 }, Problem::Runaway3d(p)) => {
                let (p, t0) = (p.clone(), *t0);
                Box::new(move |rng| p.sample_maxwellian(t0, rng).expect("acceptance region checked by validate").to_vec())
            }
            _ => unreachable!("rejected by validate"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Trajectories simulated for the training set.
    pub n_train: usize,
    pub train_init: InitSpec,
    /// Ground-truth ensemble size.
    pub n_truth: usize,
    pub truth_init: InitSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_train: 100_000,
            train_init: InitSpec::Uniform { lower: None, upper: None },
            n_truth: 200_000,
            truth_init: InitSpec::Start,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n: usize,
    /// Defaults to the truth ensemble's initial distribution.
    pub init: Option<InitSpec>,
    /// Without the exit model a particle exits only when a generated step
    /// leaves the domain.
    pub use_exit_model: bool,
    pub batch: usize,
    /// Observation steps to generate; defaults to the problem horizon.
    pub n_steps: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n: 200_000,
            init: None,
            use_exit_model: true,
            batch: 4096,
            n_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Times of the confinement table and the distribution comparisons.
    pub times: Vec<f64>,
    pub bins: usize,
    pub joint_bins: usize,
    /// Uniform evaluation points for the KL divergence.
    pub kl_points: usize,
    pub kl_budgets: Vec<usize>,
    pub kl_seeds: usize,
    /// Points per axis of the exit-probability grid.
    pub grid_points: usize,
    /// MC samples per grid point when no analytic reference exists.
    pub grid_mc_samples: usize,
    /// Starting positions of the exit-rate curve.
    pub curve_positions: usize,
    pub curve_trajectories: usize,
    pub t0_values: Vec<f64>,
    pub runaway_trajectories: usize,
    pub p_star: f64,
    /// Ensemble sizes of the timing report.
    pub timing_sizes: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            times: vec![1.0, 2.0, 3.0],
            bins: 100,
            joint_bins: 100,
            kl_points: 10_000,
            kl_budgets: vec![10_000, 100_000],
            kl_seeds: 3,
            grid_points: 101,
            grid_mc_samples: 2_000,
            curve_positions: 17,
            curve_trajectories: 20_000,
            t0_values: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            runaway_trajectories: 20_000,
            p_star: 1.75,
            timing_sizes: vec![50_000, 200_000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub problem: Problem,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub exit: ExitConfig,
    #[serde(default)]
    pub label: LabelConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    pub fn new(problem: Problem) -> Self {
        Self {
            seed: 0,
            out_dir: None,
            problem,
            simulation: SimulationConfig::default(),
            exit: ExitConfig::default(),
            label: LabelConfig::default(),
            generator: GeneratorConfig::default(),
            sampler: SamplerConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Rebuilds derived problem state and checks every section.
    pub fn finish(mut self) -> Result<Self> {
        self.problem = self.problem.finish()?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.simulation;
        if s.n_train == 0 || s.n_truth == 0 || self.sampler.n == 0 {
            return Err(Error::config("simulation and sampler budgets must be positive"));
        }
        s.train_init.validate(&self.problem)?;
        s.truth_init.validate(&self.problem)?;
        self.sampler_init().validate(&self.problem)?;
        if self.exit.hidden.contains(&0) || !(0.0..1.0).contains(&self.exit.dropout) {
            return Err(Error::config("exit model needs non-zero layer widths and dropout in [0, 1)"));
        }
        self.exit.train.validate()?;
        self.label.validate()?;
        if self.generator.hidden.contains(&0) {
            return Err(Error::config("generator layer widths must be positive"));
        }
        self.generator.train.validate()?;
        if self.sampler.batch == 0 {
            return Err(Error::config("sampler batch must be positive"));
        }
        let e = &self.evaluation;
        let grid = self.problem.time_grid()?;
        for &t in &e.times {
            grid.obs_index(t)?;
        }
        if e.bins == 0 || e.joint_bins == 0 || e.kl_points == 0 || e.kl_seeds == 0 || e.grid_points < 2 || e.curve_positions < 2 {
            return Err(Error::config("evaluation counts must be positive (grids need at least two points)"));
        }
        if e.kl_budgets.contains(&0) || e.timing_sizes.contains(&0) || e.grid_mc_samples == 0 || e.curve_trajectories == 0 || e.runaway_trajectories == 0 {
            return Err(Error::config("evaluation budgets must be positive"));
        }
        if e.t0_values.iter().any(|t| !(*t > 0.0)) || !(e.p_star > 0.0) {
            return Err(Error::config("t0 values and p_star must be positive"));
        }
        Ok(())
    }

    pub fn sampler_init(&self) -> &InitSpec {
        self.sampler.init.as_ref().unwrap_or(&self.simulation.truth_init)
    }

    /// `out_dir`, else `$EXITFLOW_OUT/<problem>`, else `runs/<problem>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.problem.name())
    }

    /// Shrinks every sample budget by `scale` (at least one sample each).
    pub fn scaled(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::config(format!("scale must lie in (0, 1], got {scale}")));
        }
        let f = |n: &mut usize| *n = ((*n as f64 * scale).round() as usize).max(1);
        f(&mut self.simulation.n_train);
        f(&mut self.simulation.n_truth);
        f(&mut self.sampler.n);
        if let Some(m) = self.label.max_rows.as_mut() {
            f(m);
        }
        let e = &mut self.evaluation;
        f(&mut e.kl_points);
        e.kl_budgets.iter_mut().for_each(f);
        f(&mut e.grid_mc_samples);
        f(&mut e.curve_trajectories);
        f(&mut e.runaway_trajectories);
        e.timing_sizes.iter_mut().for_each(f);
        Ok(self)
    }
}

/// Tolerance of an MC-limited check run at reduced `scale`: standard errors
/// grow like `1/√n`, so the tolerance widens by `1/√scale`.
pub fn scaled_tolerance(tol: f64, scale: f64) -> f64 {
    tol / scale.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    const MINIMAL: &str = r#"
seed = 7
[problem]
kind = "brownian1d"
x0 = 2.0
"#;

    #[test]
    fn minimal_file_uses_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.label.k_nn, 2048);
        assert_eq!(c.exit.hidden, vec![256, 256, 256]);
        let Problem::Brownian1d(p) = &c.problem else { panic!() };
        assert_eq!((p.x0, p.length), (2.0, 6.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[label]\nknn = 3\n")).is_err());
        assert!(PipelineConfig::from_toml("[problem]\nkind = \"brownian1d\"\nlenght = 3.0\n").is_err());
        assert!(PipelineConfig::from_toml("bogus = 1\n[problem]\nkind = \"brownian1d\"\n").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(PipelineConfig::from_toml("[problem]\nkind = \"brownian1d\"\nx0 = 7.0\n").is_err());
        assert!(PipelineConfig::from_toml(&format!("{MINIMAL}\n[evaluation]\ntimes = [4.0]\n")).is_err());
        let bad_init = format!("{MINIMAL}\n[simulation]\ntruth_init = {{ kind = \"maxwellian\", t0 = 4.0 }}\n");
        assert!(PipelineConfig::from_toml(&bad_init).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn scale_shrinks_budgets() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap().scaled(0.25).unwrap();
        assert_eq!((c.simulation.n_train, c.simulation.n_truth, c.sampler.n), (25_000, 50_000, 50_000));
        assert_eq!(c.evaluation.kl_budgets, vec![2_500, 25_000]);
        assert!(PipelineConfig::from_toml(MINIMAL).unwrap().scaled(0.0).is_err());
        assert!((scaled_tolerance(0.7, 0.25) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn uniform_init_stays_inside() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        let s = c.simulation.train_init.sampler(&c.problem).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..1000 {
            let x = s(&mut rng);
            assert!(x[0] > 0.0 && x[0] < 6.0);
        }
    }

    #[test]
    fn checked_in_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        for name in ["brownian1d", "cellular2d", "runaway3d"] {
            let c = PipelineConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
            assert_eq!(c.problem.name(), name);
        }
    }
}
