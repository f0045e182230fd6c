//! Stage orchestration: in-memory stage functions, on-disk artifacts with
//! manifests, evaluations and the per-benchmark reproduction runs.
//!
//! Every artifact `a.ext` is accompanied by `a.ext.manifest.json` recording
//! the stage, a hash of the configuration that produced it (including all
//! upstream sections), the seed, and SHA-256 digests of its inputs and
//! outputs. Downstream stages refuse inputs whose manifest does not match
//! the current configuration or whose contents changed since they were
//! written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{self, ExitSource};
use crate::config::{InitSpec, PipelineConfig};
use crate::dataset::{self, FeatureMap, LabeledSet, ObservationSet};
use crate::diffusion::build_labeled_set;
use crate::error::{Error, Result};
use crate::exit_model::{kl_divergence, train_exit, ExitModel};
use crate::generator::{train_generator, ExitOracle, GeneratorModel, Sampler, SamplerStats};
use crate::problems::Problem;
use crate::rng::{derive_seed, stream_rng};
use crate::sde::{simulate_ensemble, Trajectory};

// ---------------------------------------------------------------------------
// in-memory stages

/// MC ensemble of `n` trajectories from `init`.
pub fn simulate(problem: &Problem, init: &InitSpec, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let sampler = init.sampler(problem)?;
    simulate_ensemble(problem.system(), sampler, n, &problem.time_grid()?, seed)
}

pub fn simulate_truth(cfg: &PipelineConfig) -> Result<Vec<Trajectory>> {
    let s = &cfg.simulation;
    simulate(&cfg.problem, &s.truth_init, s.n_truth, derive_seed(cfg.seed, "truth"))
}

/// Transition triples in the problem's feature coordinates.
pub fn observations(problem: &Problem, trajs: &[Trajectory]) -> Result<ObservationSet> {
    let map = problem.feature_map();
    if map == FeatureMap::Identity {
        return dataset::segment(trajs, problem.system().domain(), map);
    }
    dataset::segment(trajs, &problem.feature_domain(), map)
}

pub fn training_trajectories(cfg: &PipelineConfig) -> Result<Vec<Trajectory>> {
    let s = &cfg.simulation;
    simulate(&cfg.problem, &s.train_init, s.n_train, derive_seed(cfg.seed, "train"))
}

pub fn build_dataset(cfg: &PipelineConfig) -> Result<ObservationSet> {
    observations(&cfg.problem, &training_trajectories(cfg)?)
}

pub fn fit_exit(cfg: &PipelineConfig, obs: &ObservationSet) -> Result<ExitModel> {
    Ok(train_exit(obs, &cfg.exit, derive_seed(cfg.seed, "exit"))?.0)
}

pub fn label(cfg: &PipelineConfig, obs: &ObservationSet) -> Result<LabeledSet> {
    build_labeled_set(obs, &cfg.problem.feature_domain(), &cfg.label, derive_seed(cfg.seed, "label"))
}

pub fn fit_generator(cfg: &PipelineConfig, labeled: &LabeledSet) -> Result<GeneratorModel> {
    Ok(train_generator(labeled, &cfg.generator, derive_seed(cfg.seed, "generator"))?.0)
}

/// Surrogate ensemble; `exit = None` runs the crossing-only sampler.
pub fn generate(
    cfg: &PipelineConfig,
    exit: Option<&ExitModel>,
    generator: &GeneratorModel,
    init: &InitSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, SamplerStats)> {
    let grid = cfg.problem.time_grid()?;
    let sampler = Sampler {
        exit: exit.map(|m| m as &dyn ExitOracle),
        generator,
        domain: cfg.problem.system().domain(),
        map: cfg.problem.feature_map(),
        dt_obs: grid.dt_obs,
        n_steps_max: cfg.sampler.n_steps.unwrap_or(grid.n_obs()),
        batch: cfg.sampler.batch,
    };
    sampler.generate_ensemble(init.sampler(&cfg.problem)?, n, seed)
}

pub fn surrogate_seed(cfg: &PipelineConfig) -> u64 {
    derive_seed(cfg.seed, "surrogate")
}

/// Trained models of one run.
pub struct Models {
    pub exit: ExitModel,
    pub generator: GeneratorModel,
}

/// Runs dataset → exit model → labels → generator in memory.
pub fn train_all(cfg: &PipelineConfig) -> Result<(ObservationSet, Models)> {
    let obs = build_dataset(cfg)?;
    let exit = fit_exit(cfg, &obs)?;
    let generator = fit_generator(cfg, &label(cfg, &obs)?)?;
    Ok((obs, Models { exit, generator }))
}

// ---------------------------------------------------------------------------
// variants, artifacts and manifests

/// The surrogate and the two ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Exiting transitions are labeled too; no exit model.
    AllTrajectories,
    /// Only confined transitions are labeled; no exit model.
    OnlyConfined,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "all-trajectories" => Ok(Variant::AllTrajectories),
            "only-confined" => Ok(Variant::OnlyConfined),
            _ => Err(Error::config(format!("unknown variant {s:?} (full, all-trajectories, only-confined)"))),
        }
    }

    pub fn apply(self, mut cfg: PipelineConfig) -> PipelineConfig {
        match self {
            Variant::Full => {}
            Variant::AllTrajectories => {
                cfg.label.include_exits = true;
                cfg.sampler.use_exit_model = false;
            }
            Variant::OnlyConfined => {
                cfg.label.include_exits = false;
                cfg.sampler.use_exit_model = false;
            }
        }
        cfg
    }

    fn surrogate_suffix(self) -> &'static str {
        match self {
            Variant::Full => "",
            Variant::AllTrajectories => "_all",
            Variant::OnlyConfined => "_confined",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Artifact {
    Truth,
    Dataset,
    ExitModel,
    Labels,
    Generator,
    Surrogate,
}

impl Artifact {
    pub fn stage(self) -> &'static str {
        match self {
            Artifact::Truth => "simulate-truth",
            Artifact::Dataset => "build-dataset",
            Artifact::ExitModel => "train-exit",
            Artifact::Labels => "label",
            Artifact::Generator => "train-generator",
            Artifact::Surrogate => "generate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub key: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub seconds: f64,
    #[serde(default)]
    pub report: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn hash_json(v: &serde_json::Value) -> String {
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_hash(p: &Path) -> Result<FileHash> {
    Ok(FileHash {
        file: file_name(p),
        sha256: sha256_file(p)?,
    })
}

pub fn read_manifest(artifact: &Path) -> Result<Manifest> {
    let mp = manifest_path(artifact);
    let text = std::fs::read_to_string(&mp).map_err(|_| Error::StaleArtifact {
        path: artifact.to_path_buf(),
        reason: format!("no manifest at {}", mp.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::StaleArtifact {
        path: artifact.to_path_buf(),
        reason: format!("unreadable manifest: {e}"),
    })
}

/// Checks that `path` exists, was produced under configuration key `key`
/// and is unchanged since; returns its digest.
pub fn check_input(path: &Path, key: &str) -> Result<FileHash> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let m = read_manifest(path)?;
    if m.key != key {
        return Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            reason: format!(
                "written by `{}` under configuration {}, but the current configuration hashes to {}; rerun that stage",
                m.stage,
                &m.key[..12.min(m.key.len())],
                &key[..12]
            ),
        });
    }
    let h = file_hash(path)?;
    if !m.outputs.iter().any(|o| o.file == h.file && o.sha256 == h.sha256) {
        return Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            reason: "contents differ from the digest recorded in its manifest".into(),
        });
    }
    Ok(h)
}

/// One configured run rooted at an output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
    pub variant: Variant,
}

impl Run {
    pub fn new(cfg: PipelineConfig, variant: Variant) -> Self {
        let dir = cfg.output_dir();
        Self {
            cfg: variant.apply(cfg),
            dir,
            variant,
        }
    }

    pub fn with_dir(mut self, dir: PathBuf) -> Self {
        self.dir = dir;
        self
    }

    fn variant_run(&self, v: Variant) -> Run {
        Run {
            cfg: v.apply(self.cfg.clone()),
            dir: self.dir.clone(),
            variant: v,
        }
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        let labels_suffix = if self.cfg.label.include_exits { "_all" } else { "" };
        let name = match a {
            Artifact::Truth => "truth.bflow".to_string(),
            Artifact::Dataset => "train.bflow".to_string(),
            Artifact::ExitModel => "exit.bfnn".to_string(),
            Artifact::Labels => format!("labels{labels_suffix}.bflow"),
            Artifact::Generator => format!("generator{labels_suffix}.bfnn"),
            Artifact::Surrogate => format!("surrogate{}.bflow", self.variant.surrogate_suffix()),
        };
        self.dir.join(name)
    }

    /// Configuration hash of the stage producing `a`, covering every
    /// section it depends on.
    pub fn key(&self, a: Artifact) -> String {
        let c = &self.cfg;
        let v = match a {
            Artifact::Truth => json!({"stage": a.stage(), "problem": c.problem, "seed": c.seed,
                "n": c.simulation.n_truth, "init": c.simulation.truth_init}),
            Artifact::Dataset => json!({"stage": a.stage(), "problem": c.problem, "seed": c.seed,
                "n": c.simulation.n_train, "init": c.simulation.train_init}),
            Artifact::ExitModel => json!({"stage": a.stage(), "up": self.key(Artifact::Dataset), "exit": c.exit}),
            Artifact::Labels => json!({"stage": a.stage(), "up": self.key(Artifact::Dataset), "label": c.label}),
            Artifact::Generator => json!({"stage": a.stage(), "up": self.key(Artifact::Labels), "generator": c.generator}),
            Artifact::Surrogate => json!({"stage": a.stage(),
                "exit": c.sampler.use_exit_model.then(|| self.key(Artifact::ExitModel)),
                "generator": self.key(Artifact::Generator), "sampler": c.sampler,
                "init": c.sampler_init()}),
        };
        hash_json(&v)
    }

    fn ensure_dir(&self, out: &Path) -> Result<()> {
        if let Some(p) = out.parent() {
            std::fs::create_dir_all(p)?;
        }
        Ok(())
    }

    fn write_manifest(&self, a: Artifact, inputs: Vec<FileHash>, outputs: &[PathBuf], t: Instant, report: serde_json::Value) -> Result<Manifest> {
        let m = Manifest {
            stage: a.stage().into(),
            key: self.key(a),
            seed: self.cfg.seed,
            inputs,
            outputs: outputs.iter().map(|p| file_hash(p)).collect::<Result<_>>()?,
            seconds: t.elapsed().as_secs_f64(),
            report,
        };
        std::fs::write(manifest_path(&outputs[0]), serde_json::to_string_pretty(&m).expect("manifest serializes"))?;
        Ok(m)
    }

    fn manifest_ref(&self, a: Artifact, artifact: &Path) -> String {
        format!("{} key={}", file_name(&manifest_path(artifact)), self.key(a))
    }

    fn confinement_csv(&self, a: Artifact, artifact: &Path, trajs: &[Trajectory]) -> Result<PathBuf> {
        let grid = self.cfg.problem.time_grid()?;
        let rows: Vec<Vec<f64>> = (0..=grid.n_obs())
            .map(|k| vec![k as f64 * grid.dt_obs, analysis::confined_fraction_at(trajs, k)])
            .collect();
        let csv = artifact.with_extension("confinement.csv");
        analysis::write_csv(&csv, Some(&self.manifest_ref(a, artifact)), &["time", "confined_fraction"], &rows)?;
        Ok(csv)
    }

    pub fn load_trajectories(&self, path: &Path, key: &str) -> Result<Vec<Trajectory>> {
        check_input(path, key)?;
        read_trajectories(&self.cfg.problem, path)
    }

    pub fn simulate_truth(&self, out: Option<&Path>) -> Result<PathBuf> {
        let t = Instant::now();
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Truth));
        self.ensure_dir(&out)?;
        let trajs = simulate_truth(&self.cfg)?;
        write_trajectories(&self.cfg.problem, &trajs, &out)?;
        let csv = self.confinement_csv(Artifact::Truth, &out, &trajs)?;
        self.write_manifest(Artifact::Truth, vec![], &[out.clone(), csv], t, json!({"trajectories": trajs.len()}))?;
        Ok(out)
    }

    /// Simulates the training ensemble, or segments the trajectory file
    /// `input` instead when given.
    pub fn build_dataset(&self, input: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
        let t = Instant::now();
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Dataset));
        self.ensure_dir(&out)?;
        let (trajs, inputs) = match input {
            Some(p) => {
                let m = read_manifest(p)?;
                let h = check_input(p, &m.key)?;
                (read_trajectories(&self.cfg.problem, p)?, vec![h])
            }
            None => (training_trajectories(&self.cfg)?, vec![]),
        };
        let obs = observations(&self.cfg.problem, &trajs)?;
        dataset::save_observations(&obs, &out)?;
        let report = json!({"trajectories": trajs.len(), "rows": obs.len(), "exits": obs.n_exits()});
        self.write_manifest(Artifact::Dataset, inputs, &[out.clone()], t, report)?;
        Ok(out)
    }

    fn load_dataset(&self, data: Option<&Path>) -> Result<(ObservationSet, FileHash)> {
        let p = data.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Dataset));
        let h = check_input(&p, &self.key(Artifact::Dataset))?;
        Ok((dataset::load_observations(&p, Some(self.cfg.problem.dim()))?, h))
    }

    pub fn train_exit(&self, data: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
        let t = Instant::now();
        let (obs, h) = self.load_dataset(data)?;
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::ExitModel));
        self.ensure_dir(&out)?;
        let (model, rep) = train_exit(&obs, &self.cfg.exit, derive_seed(self.cfg.seed, "exit"))?;
        model.save(&out)?;
        let report = json!({"final_loss": rep.epoch_loss.last(), "train_seconds": rep.seconds});
        self.write_manifest(Artifact::ExitModel, vec![h], &[out.clone()], t, report)?;
        Ok(out)
    }

    pub fn label(&self, data: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
        let t = Instant::now();
        let (obs, h) = self.load_dataset(data)?;
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Labels));
        self.ensure_dir(&out)?;
        let labeled = label(&self.cfg, &obs)?;
        dataset::save_labeled(&labeled, &out)?;
        self.write_manifest(Artifact::Labels, vec![h], &[out.clone()], t, json!({"rows": labeled.len()}))?;
        Ok(out)
    }

    pub fn train_generator(&self, data: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
        let t = Instant::now();
        let p = data.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Labels));
        let h = check_input(&p, &self.key(Artifact::Labels))?;
        let labeled = dataset::load_labeled(&p, Some(self.cfg.problem.dim()))?;
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Generator));
        self.ensure_dir(&out)?;
        let (model, rep) = train_generator(&labeled, &self.cfg.generator, derive_seed(self.cfg.seed, "generator"))?;
        model.save(&out)?;
        let report = json!({"final_loss": rep.epoch_loss.last(), "train_seconds": rep.seconds});
        self.write_manifest(Artifact::Generator, vec![h], &[out.clone()], t, report)?;
        Ok(out)
    }

    pub fn load_models(&self, exit: Option<&Path>, generator: Option<&Path>) -> Result<(Option<ExitModel>, GeneratorModel, Vec<FileHash>)> {
        let mut inputs = Vec::new();
        let exit_model = if self.cfg.sampler.use_exit_model {
            let p = exit.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::ExitModel));
            inputs.push(check_input(&p, &self.key(Artifact::ExitModel))?);
            Some(ExitModel::load(&p)?)
        } else {
            None
        };
        let p = generator.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Generator));
        inputs.push(check_input(&p, &self.key(Artifact::Generator))?);
        let gen = GeneratorModel::load(&p)?;
        let d = self.cfg.problem.dim();
        if gen.dim() != d || exit_model.as_ref().is_some_and(|m| m.dim() != d) {
            return Err(Error::Shape(format!("model dimension does not match problem dimension {d}")));
        }
        Ok((exit_model, gen, inputs))
    }

    pub fn generate(&self, exit: Option<&Path>, generator: Option<&Path>, out: Option<&Path>) -> Result<PathBuf> {
        let t = Instant::now();
        let (exit_model, gen, inputs) = self.load_models(exit, generator)?;
        let out = out.map(Path::to_path_buf).unwrap_or_else(|| self.path(Artifact::Surrogate));
        self.ensure_dir(&out)?;
        let (trajs, stats) = generate(&self.cfg, exit_model.as_ref(), &gen, self.cfg.sampler_init(), self.cfg.sampler.n, surrogate_seed(&self.cfg))?;
        write_trajectories(&self.cfg.problem, &trajs, &out)?;
        let csv = self.confinement_csv(Artifact::Surrogate, &out, &trajs)?;
        let report = json!({"trajectories": trajs.len(), "stats": stats, "generate_seconds": t.elapsed().as_secs_f64()});
        self.write_manifest(Artifact::Surrogate, inputs, &[out.clone(), csv], t, report)?;
        Ok(out)
    }
}

/// Trajectory files store transition triples in simulation coordinates
/// with the trajectory side channel.
pub fn write_trajectories(problem: &Problem, trajs: &[Trajectory], path: &Path) -> Result<()> {
    dataset::save_observations(&dataset::segment(trajs, problem.system().domain(), FeatureMap::Identity)?, path)
}

pub fn read_trajectories(problem: &Problem, path: &Path) -> Result<Vec<Trajectory>> {
    let obs = dataset::load_observations(path, Some(problem.dim()))?;
    let trajs = obs.reconstruct(problem.system().domain())?;
    if trajs.len() != obs.n_trajectories {
        return Err(Error::load("traj_id", format!("{} trajectories recorded, {} rebuilt", obs.n_trajectories, trajs.len())));
    }
    Ok(trajs)
}

// ---------------------------------------------------------------------------
// evaluations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSpec {
    Table1,
    KlDecay,
    ExitGrid,
    ExitRateCurve,
    Distributions,
    Runaway,
    Timing,
}

impl EvalSpec {
    pub const ALL: [EvalSpec; 7] = [
        EvalSpec::Table1,
        EvalSpec::KlDecay,
        EvalSpec::ExitGrid,
        EvalSpec::ExitRateCurve,
        EvalSpec::Distributions,
        EvalSpec::Runaway,
        EvalSpec::Timing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalSpec::Table1 => "table1",
            EvalSpec::KlDecay => "kl-decay",
            EvalSpec::ExitGrid => "exit-grid",
            EvalSpec::ExitRateCurve => "exit-rate-curve",
            EvalSpec::Distributions => "distributions",
            EvalSpec::Runaway => "runaway",
            EvalSpec::Timing => "timing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::config(format!("unknown evaluation {s:?}; one of {:?}", Self::ALL.map(|e| e.name()))))
    }
}

/// Files written by one evaluation plus its summary numbers.
#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalOutput {
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

struct EvalCtx<'a> {
    run: &'a Run,
    inputs: Vec<FileHash>,
    files: Vec<PathBuf>,
    manifest_ref: String,
}

impl EvalCtx<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let p = self.run.dir.join(name);
        analysis::write_csv(&p, Some(&self.manifest_ref), header, rows)?;
        self.files.push(p);
        Ok(())
    }

    fn svg(&mut self, name: &str, body: String) -> Result<()> {
        let p = self.run.dir.join(name);
        std::fs::write(&p, format!("<!-- manifest: {} -->\n{body}", self.manifest_ref))?;
        self.files.push(p);
        Ok(())
    }

    fn trajectories(&mut self, a: Artifact, run: &Run) -> Result<Vec<Trajectory>> {
        let p = run.path(a);
        self.inputs.push(check_input(&p, &run.key(a))?);
        read_trajectories(&run.cfg.problem, &p)
    }

    fn models(&mut self) -> Result<(Option<ExitModel>, GeneratorModel)> {
        let (e, g, h) = self.run.load_models(None, None)?;
        self.inputs.extend(h);
        Ok((e, g))
    }
}

impl Run {
    fn eval_key(&self, spec: EvalSpec) -> String {
        hash_json(&json!({"evaluate": spec.name(), "config": self.cfg}))
    }

    /// Runs one evaluation against the artifacts in the run directory.
    pub fn evaluate(&self, spec: EvalSpec) -> Result<EvalOutput> {
        std::fs::create_dir_all(&self.dir)?;
        let t = Instant::now();
        let manifest_file = self.dir.join(format!("{}.manifest.json", spec.name()));
        let key = self.eval_key(spec);
        let mut ctx = EvalCtx {
            run: self,
            inputs: Vec::new(),
            files: Vec::new(),
            manifest_ref: format!("{} key={key}", file_name(&manifest_file)),
        };
        let summary = match spec {
            EvalSpec::Table1 => self.eval_table1(&mut ctx)?,
            EvalSpec::KlDecay => self.eval_kl_decay(&mut ctx)?,
            EvalSpec::ExitGrid => self.eval_exit_grid(&mut ctx)?,
            EvalSpec::ExitRateCurve => self.eval_exit_rate_curve(&mut ctx)?,
            EvalSpec::Distributions => self.eval_distributions(&mut ctx)?,
            EvalSpec::Runaway => self.eval_runaway(&mut ctx)?,
            EvalSpec::Timing => self.eval_timing(&mut ctx)?,
        };
        let m = Manifest {
            stage: format!("evaluate {}", spec.name()),
            key,
            seed: self.cfg.seed,
            inputs: ctx.inputs,
            outputs: ctx.files.iter().map(|p| file_hash(p)).collect::<Result<_>>()?,
            seconds: t.elapsed().as_secs_f64(),
            report: summary.clone(),
        };
        std::fs::write(&manifest_file, serde_json::to_string_pretty(&m).expect("manifest serializes"))?;
        Ok(EvalOutput { files: ctx.files, summary })
    }

    fn eval_table1(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        let grid = self.cfg.problem.time_grid()?;
        let truth = ctx.trajectories(Artifact::Truth, self)?;
        let full = self.variant_run(Variant::Full);
        let mut sets = vec![("ground_truth", truth), ("surrogate", ctx.trajectories(Artifact::Surrogate, &full)?)];
        for (name, v) in [("all_trajectories", Variant::AllTrajectories), ("only_confined", Variant::OnlyConfined)] {
            let r = self.variant_run(v);
            if r.path(Artifact::Surrogate).exists() {
                sets.push((name, ctx.trajectories(Artifact::Surrogate, &r)?));
            }
        }
        let refs: Vec<(&str, &[Trajectory])> = sets.iter().map(|(n, t)| (*n, t.as_slice())).collect();
        let report = analysis::confinement_table(&refs, &self.cfg.evaluation.times, grid.t_max)?;
        let mut header = vec!["time"];
        header.extend(report.methods.iter().map(|(m, _)| m.as_str()));
        let rows: Vec<Vec<f64>> = report
            .times
            .iter()
            .enumerate()
            .map(|(i, &t)| std::iter::once(t).chain(report.methods.iter().map(|(_, v)| 100.0 * v[i])).collect())
            .collect();
        ctx.csv("table1.csv", &header, &rows)?;
        Ok(serde_json::to_value(&report).expect("report serializes"))
    }

    fn eval_kl_decay(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        let Problem::Brownian1d(p) = &self.cfg.problem else {
            return Err(Error::config("kl-decay needs the analytic series of brownian1d"));
        };
        let e = &self.cfg.evaluation;
        let (points, reference) = kl_reference(p.length, p.dt_obs, e.kl_points, derive_seed(self.cfg.seed, "kl-points"))?;
        let mut rows = Vec::new();
        let mut means = Vec::new();
        for &n in &e.kl_budgets {
            let mut sum = 0.0;
            for s in 0..e.kl_seeds {
                let kl = kl_for_budget(&self.cfg, n, s as u64, &points, &reference)?;
                log::info!("kl-decay: n_train={n} seed={s} KL={kl:.4e}");
                rows.push(vec![n as f64, s as f64, kl]);
                sum += kl;
            }
            means.push((n, sum / e.kl_seeds as f64));
        }
        ctx.csv("kl_decay.csv", &["n_train", "seed", "kl"], &rows)?;
        let xs: Vec<f64> = means.iter().map(|m| (m.0 as f64).log10()).collect();
        let ys: Vec<f64> = means.iter().map(|m| m.1.log10()).collect();
        ctx.svg("kl_decay.svg", analysis::svg_lines("log10 KL vs log10 training trajectories", "log10 n_train", &[("mean KL", &xs, &ys)]))?;
        Ok(json!({"mean_kl": means}))
    }

    fn eval_exit_grid(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        let model_path = self.path(Artifact::ExitModel);
        ctx.inputs.push(check_input(&model_path, &self.key(Artifact::ExitModel))?);
        let model = ExitModel::load(&model_path)?;
        let e = &self.cfg.evaluation;
        let problem = &self.cfg.problem;
        let domain = problem.system().domain();
        let n = e.grid_points;
        let mc = |points: &[Vec<f64>]| {
            let grid = problem.time_grid()?;
            analysis::exit_prob_grid(
                &ExitSource::MonteCarlo {
                    system: problem.system(),
                    dt_sim: grid.dt_sim,
                    dt_obs: grid.dt_obs,
                    n_samples: e.grid_mc_samples,
                    seed: derive_seed(self.cfg.seed, "exit-grid"),
                },
                points,
            )
        };
        let predict = |points: &[Vec<f64>]| -> Result<Vec<f64>> {
            let map = problem.feature_map();
            let mut f = vec![0.0; problem.dim()];
            let feats: Vec<Vec<f64>> = points
                .iter()
                .map(|x| {
                    map.to_features(x, &mut f);
                    f.clone()
                })
                .collect();
            analysis::exit_prob_grid(&ExitSource::Model(&model), &feats)
        };
        let (points, reference, header): (Vec<Vec<f64>>, Vec<f64>, Vec<&str>) = match problem {
            Problem::Brownian1d(p) => {
                let pts: Vec<Vec<f64>> = analysis::grid_points(&[0.0], &[p.length], &[n])?;
                let r = analysis::exit_prob_grid(&ExitSource::Series { length: p.length, dt: p.dt_obs, n_terms: 200 }, &pts)?;
                (pts, r, vec!["x", "model", "series"])
            }
            Problem::Cellular2d(_) => {
                let (lo, hi) = (domain.lower(), domain.upper());
                let pts = analysis::grid_points(&[lo[0], lo[1]], &[hi[0], hi[1]], &[n, n])?;
                let inner: Vec<Vec<f64>> = pts.into_iter().filter(|x| domain.is_inside(x)).collect();
                let r = mc(&inner)?;
                (inner, r, vec!["x1", "x2", "model", "mc"])
            }
            Problem::Runaway3d(p) => {
                // (p, r) slice at ξ = 0
                let pts: Vec<Vec<f64>> = analysis::grid_points(&[p.p_min, 0.0], &[p.p_max, 1.0], &[n, n])?
                    .into_iter()
                    .map(|v| vec![v[0], 0.0, v[1]])
                    .filter(|x| domain.is_inside(x))
                    .collect();
                let r = mc(&pts)?;
                (pts, r, vec!["p", "xi", "r", "model", "mc"])
            }
        };
        let model_p = predict(&points)?;
        let rows: Vec<Vec<f64>> = points
            .iter()
            .zip(model_p.iter().zip(&reference))
            .map(|(x, (m, r))| x.iter().copied().chain([*m, *r]).collect())
            .collect();
        ctx.csv("exit_grid.csv", &header, &rows)?;
        if problem.dim() == 1 {
            let xs: Vec<f64> = points.iter().map(|x| x[0]).collect();
            ctx.svg("exit_grid.svg", analysis::svg_lines("exit probability per observation step", "x", &[("model", &xs, &model_p), ("series", &xs, &reference)]))?;
        }
        let max_dev = model_p.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok(json!({"points": points.len(), "max_abs_deviation": max_dev}))
    }

    fn eval_exit_rate_curve(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        let Problem::Cellular2d(p) = &self.cfg.problem else {
            return Err(Error::config("exit-rate-curve is defined for cellular2d"));
        };
        let (exit, gen) = ctx.models()?;
        let e = &self.cfg.evaluation;
        let curve = exit_rate_curves(&self.cfg, exit.as_ref(), &gen, p.length / 2.0, e.curve_positions, e.curve_trajectories)?;
        let rows: Vec<Vec<f64>> = curve.x1.iter().enumerate().map(|(i, &x)| vec![x, curve.mc[i], curve.surrogate[i]]).collect();
        ctx.csv("exit_rate_curve.csv", &["x1", "mc", "surrogate"], &rows)?;
        ctx.svg(
            "exit_rate_curve.svg",
            analysis::svg_lines("escaped fraction at t_max", "x1", &[("MC", &curve.x1, &curve.mc), ("surrogate", &curve.x1, &curve.surrogate)]),
        )?;
        Ok(serde_json::to_value(&curve).expect("curve serializes"))
    }

    fn eval_distributions(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        let truth = ctx.trajectories(Artifact::Truth, self)?;
        let surrogate = ctx.trajectories(Artifact::Surrogate, self)?;
        let grid = self.cfg.problem.time_grid()?;
        let e = &self.cfg.evaluation;
        let domain = self.cfg.problem.system().domain();
        let d = self.cfg.problem.dim();
        let ranges: Vec<(usize, f64, f64)> = (0..d).map(|i| (i, domain.lower()[i], domain.upper()[i])).collect();
        let mut ks_rows = Vec::new();
        for &t in &e.times {
            let k = grid.obs_index(t)?;
            let cmp = compare_distributions(&truth, &surrogate, k, &ranges, e.bins)?;
            let mut header = Vec::new();
            for i in 0..d {
                header.extend([format!("x{i}"), format!("mc_x{i}"), format!("surrogate_x{i}")]);
            }
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<f64>> = (0..e.bins)
                .map(|b| (0..d).flat_map(|i| [cmp.mc[i].centers()[b], cmp.mc[i].density()[b], cmp.surrogate[i].density()[b]]).collect())
                .collect();
            ctx.csv(&format!("marginals_t{t}.csv"), &header, &rows)?;
            for i in 0..d {
                ks_rows.push(vec![t, i as f64, cmp.ks[i], cmp.mc_confined as f64, cmp.surrogate_confined as f64]);
            }
            if d >= 2 {
                let log10 = matches!(self.cfg.problem, Problem::Runaway3d(_));
                let nb = e.joint_bins;
                for (name, set) in [("mc", &truth), ("surrogate", &surrogate)] {
                    let j = analysis::joint_pdf(set, k, ranges[0], ranges[1], (nb, nb))?;
                    let dens = j.density(log10);
                    let centers = (j.x.centers(), j.y.centers());
                    let rows: Vec<Vec<f64>> = (0..nb * nb).map(|c| vec![centers.0[c / nb], centers.1[c % nb], dens[c]]).collect();
                    ctx.csv(&format!("joint_t{t}_{name}.csv"), &["x0", "x1", if log10 { "log10_density" } else { "density" }], &rows)?;
                    ctx.svg(&format!("joint_t{t}_{name}.svg"), analysis::svg_heatmap(&format!("{name} t={t}"), &dens, nb, nb))?;
                }
            }
        }
        ctx.csv("ks.csv", &["time", "dim", "ks", "mc_confined", "surrogate_confined"], &ks_rows)?;
        Ok(json!({"ks": ks_rows}))
    }

    fn eval_runaway(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        if !matches!(self.cfg.problem, Problem::Runaway3d(_)) {
            return Err(Error::config("runaway evaluation is defined for runaway3d"));
        }
        let (exit, gen) = ctx.models()?;
        let e = &self.cfg.evaluation;
        let rows = runaway_fractions(&self.cfg, exit.as_ref(), &gen, &e.t0_values, e.runaway_trajectories)?;
        let csv_rows: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.t0, r.mc, r.surrogate]).collect();
        ctx.csv("runaway.csv", &["t0", "mc", "surrogate"], &csv_rows)?;
        let band = escape_by_momentum(&self.cfg, e.runaway_trajectories)?;
        ctx.csv(
            "escape_by_momentum.csv",
            &["p_low", "p_high", "n", "escaped_fraction"],
            &band.iter().map(|b| vec![b.0, b.1, b.2 as f64, b.3]).collect::<Vec<_>>(),
        )?;
        Ok(json!({"n_re": rows, "escape_by_momentum": band}))
    }

    fn eval_timing(&self, ctx: &mut EvalCtx<'_>) -> Result<serde_json::Value> {
        let (exit, gen) = ctx.models()?;
        let mut out = Vec::new();
        for &n in &self.cfg.evaluation.timing_sizes {
            let t = Instant::now();
            simulate(&self.cfg.problem, self.cfg.sampler_init(), n, derive_seed(self.cfg.seed, "timing-mc"))?;
            let mc = t.elapsed().as_secs_f64();
            let t = Instant::now();
            generate(&self.cfg, exit.as_ref(), &gen, self.cfg.sampler_init(), n, derive_seed(self.cfg.seed, "timing-surrogate"))?;
            let sur = t.elapsed().as_secs_f64();
            log::info!("timing: n={n} mc={mc:.2}s surrogate={sur:.2}s");
            out.push(json!({"n": n, "mc_seconds": mc, "surrogate_seconds": sur}));
        }
        // wall times are not reproducible, so they live only in the manifest
        Ok(json!({"timing": out}))
    }
}

/// Uniform evaluation points on `(0, length)` and the series exit
/// probabilities there.
pub fn kl_reference(length: f64, dt: f64, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = stream_rng(seed, 0);
    let pts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..length)).collect();
    let r = pts.iter().map(|&x| crate::problems::exit_prob_series_1d(x, dt, length, 200)).collect::<Result<_>>()?;
    Ok((pts, r))
}

/// KL divergence between the series and an exit model trained on `n`
/// uniform-start trajectories with replicate seed `s`.
pub fn kl_for_budget(cfg: &PipelineConfig, n: usize, s: u64, points: &[f64], reference: &[f64]) -> Result<f64> {
    let mut c = cfg.clone();
    c.simulation.n_train = n;
    c.seed = derive_seed(cfg.seed, &format!("kl/{n}/{s}"));
    let obs = build_dataset(&c)?;
    let model = fit_exit(&c, &obs)?;
    kl_divergence(reference, &model.predict_batch(points)?, None)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExitRateCurve {
    pub x1: Vec<f64>,
    pub mc: Vec<f64>,
    pub surrogate: Vec<f64>,
}

/// Escaped fraction at `t_max` versus the starting `x1` on `[−π, π]` at
/// fixed `x2`, for MC and the surrogate.
pub fn exit_rate_curves(cfg: &PipelineConfig, exit: Option<&ExitModel>, gen: &GeneratorModel, x2: f64, positions: usize, n: usize) -> Result<ExitRateCurve> {
    use std::f64::consts::PI;
    let x1: Vec<f64> = (0..positions).map(|i| -PI + 2.0 * PI * i as f64 / (positions - 1) as f64).collect();
    let starts: Vec<Vec<f64>> = x1.iter().map(|&a| vec![a, x2]).collect();
    let k = cfg.problem.time_grid()?.n_obs();
    let mc = analysis::exit_rate_vs_initial(&starts, k, |i, x| {
        simulate(&cfg.problem, &InitSpec::Fixed { x: x.to_vec() }, n, derive_seed(cfg.seed, &format!("curve-mc/{i}")))
    })?;
    let surrogate = analysis::exit_rate_vs_initial(&starts, k, |i, x| {
        Ok(generate(cfg, exit, gen, &InitSpec::Fixed { x: x.to_vec() }, n, derive_seed(cfg.seed, &format!("curve-surrogate/{i}")))?.0)
    })?;
    Ok(ExitRateCurve { x1, mc, surrogate })
}

pub struct DistributionComparison {
    pub mc: Vec<analysis::Histogram1D>,
    pub surrogate: Vec<analysis::Histogram1D>,
    pub ks: Vec<f64>,
    pub mc_confined: usize,
    pub surrogate_confined: usize,
}

pub fn compare_distributions(mc: &[Trajectory], surrogate: &[Trajectory], k: usize, ranges: &[(usize, f64, f64)], bins: usize) -> Result<DistributionComparison> {
    let ks = ranges
        .iter()
        .map(|&(d, _, _)| analysis::ks_two_sample(&analysis::confined_positions(mc, k, d), &analysis::confined_positions(surrogate, k, d)))
        .collect::<Result<_>>()?;
    Ok(DistributionComparison {
        mc: analysis::marginal_pdfs(mc, k, ranges, bins)?,
        surrogate: analysis::marginal_pdfs(surrogate, k, ranges, bins)?,
        ks,
        mc_confined: mc.iter().filter(|t| t.confined_at(k)).count(),
        surrogate_confined: surrogate.iter().filter(|t| t.confined_at(k)).count(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunawayRow {
    pub t0: f64,
    pub mc: f64,
    pub surrogate: f64,
}

/// Runaway fraction at the end of the horizon for Maxwellian starts.
pub fn runaway_fractions(cfg: &PipelineConfig, exit: Option<&ExitModel>, gen: &GeneratorModel, t0s: &[f64], n: usize) -> Result<Vec<RunawayRow>> {
    let k = cfg.problem.time_grid()?.n_obs();
    let p_star = cfg.evaluation.p_star;
    t0s.iter()
        .map(|&t0| {
            let init = InitSpec::Maxwellian { t0 };
            let mc = simulate(&cfg.problem, &init, n, derive_seed(cfg.seed, &format!("runaway-mc/{t0}")))?;
            let (sur, _) = generate(cfg, exit, gen, &init, n, derive_seed(cfg.seed, &format!("runaway-surrogate/{t0}")))?;
            let row = RunawayRow {
                t0,
                mc: analysis::runaway_fraction(&mc, k, p_star)?,
                surrogate: analysis::runaway_fraction(&sur, k, p_star)?,
            };
            log::info!("runaway: T0={t0} MC={:.4} surrogate={:.4}", row.mc, row.surrogate);
            Ok(row)
        })
        .collect()
}

/// MC escaped fraction by the end of the horizon for uniform starts,
/// split into initial-momentum bands `(low, high, count, fraction)`.
pub fn escape_by_momentum(cfg: &PipelineConfig, n: usize) -> Result<Vec<(f64, f64, usize, f64)>> {
    let Problem::Runaway3d(p) = &cfg.problem else {
        return Err(Error::config("momentum bands are defined for runaway3d"));
    };
    let init = InitSpec::Uniform {
        lower: Some(vec![p.p_min, -1.0, 0.0]),
        upper: Some(vec![p.p_max, 1.0, p.r_init_max]),
    };
    let trajs = simulate(&cfg.problem, &init, n, derive_seed(cfg.seed, "escape-bands"))?;
    let k = cfg.problem.time_grid()?.n_obs();
    let bands = [(p.p_min, 1.5), (1.5, 3.0), (3.0, p.p_max)];
    Ok(bands
        .iter()
        .map(|&(lo, hi)| {
            let sel: Vec<&Trajectory> = trajs.iter().filter(|t| t.state(0)[0] >= lo && t.state(0)[0] < hi).collect();
            let esc = sel.iter().filter(|t| !t.confined_at(k)).count();
            (lo, hi, sel.len(), esc as f64 / sel.len().max(1) as f64)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// reproduction runs

/// Checked-in configuration of a benchmark.
pub fn builtin_config(benchmark: &str) -> Result<PipelineConfig> {
    let text = match benchmark {
        "brownian1d" => include_str!("../configs/brownian1d.toml"),
        "cellular2d" => include_str!("../configs/cellular2d.toml"),
        "runaway3d" => include_str!("../configs/runaway3d.toml"),
        _ => return Err(Error::config(format!("unknown benchmark {benchmark:?} (brownian1d, cellular2d, runaway3d)"))),
    };
    PipelineConfig::from_toml(text)
}

pub fn benchmark_evaluations(problem: &Problem) -> &'static [EvalSpec] {
    match problem {
        Problem::Brownian1d(_) => &[EvalSpec::Table1, EvalSpec::KlDecay, EvalSpec::ExitGrid, EvalSpec::Timing],
        Problem::Cellular2d(_) => &[EvalSpec::ExitGrid, EvalSpec::ExitRateCurve, EvalSpec::Distributions, EvalSpec::Timing],
        Problem::Runaway3d(_) => &[EvalSpec::ExitGrid, EvalSpec::Distributions, EvalSpec::Runaway, EvalSpec::Timing],
    }
}

/// Chains every stage for `cfg` and its benchmark's evaluations, writing
/// `repro.manifest.json` with per-stage timings.
pub fn repro(cfg: PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let t = Instant::now();
    let run = Run::new(cfg, Variant::Full).with_dir(dir.to_path_buf());
    let mut stages = Vec::new();
    let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t = Instant::now();
        log::info!("repro: {name}");
        f()?;
        stages.push(json!({"stage": name, "seconds": t.elapsed().as_secs_f64()}));
        Ok(())
    };
    timed("simulate-truth", &mut || run.simulate_truth(None).map(drop))?;
    timed("build-dataset", &mut || run.build_dataset(None, None).map(drop))?;
    timed("train-exit", &mut || run.train_exit(None, None).map(drop))?;
    timed("label", &mut || run.label(None, None).map(drop))?;
    timed("train-generator", &mut || run.train_generator(None, None).map(drop))?;
    timed("generate", &mut || run.generate(None, None, None).map(drop))?;
    if matches!(run.cfg.problem, Problem::Brownian1d(_)) {
        let all = run.variant_run(Variant::AllTrajectories);
        timed("label all-trajectories", &mut || all.label(None, None).map(drop))?;
        timed("train-generator all-trajectories", &mut || all.train_generator(None, None).map(drop))?;
        timed("generate all-trajectories", &mut || all.generate(None, None, None).map(drop))?;
        let conf = run.variant_run(Variant::OnlyConfined);
        timed("generate only-confined", &mut || conf.generate(None, None, None).map(drop))?;
    }
    let mut files = Vec::new();
    let mut reports = serde_json::Map::new();
    for &spec in benchmark_evaluations(&run.cfg.problem) {
        let mut out = EvalOutput::default();
        timed(&format!("evaluate {}", spec.name()), &mut || {
            out = run.evaluate(spec)?;
            Ok(())
        })?;
        reports.insert(spec.name().into(), out.summary);
        files.extend(out.files);
    }
    let m = json!({
        "benchmark": run.cfg.problem.name(),
        "config": run.cfg,
        "stages": stages,
        "evaluations": reports,
        "outputs": files.iter().map(|p| file_hash(p)).collect::<Result<Vec<_>>>()?,
        "seconds": t.elapsed().as_secs_f64(),
    });
    std::fs::write(dir.join("repro.manifest.json"), serde_json::to_string_pretty(&m).expect("manifest serializes"))?;
    Ok(files)
}
