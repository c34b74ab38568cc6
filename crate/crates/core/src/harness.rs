//! Experiment orchestration: config files, fine-tuning sweeps, guidance
//! Pareto reports, adapter merging and deviation diagnostics.
//!
//! Output layout under the experiment's output directory:
//!
//! ```text
//! base.ckpt, base.toml
//! runs/<label>/seed-<s>/{run.toml, loss.csv, adapter.ckpt, wall_clock.txt}
//! samples/<label>/seed-<s>.csv
//! sweep/{pareto.csv, frontier.csv, dominance.csv, dominance_summary.csv, trends.csv, pareto.svg}
//! merge/<label>/seed-<s>/merged.ckpt, merge/report.csv
//! diagnose/{profile.csv, summary.csv}
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::adapters::{merge, AdaptedModel, LoraAdapter, MergeSpec, TokenEmbedding};
use crate::checkpoint::{load_model, save_model, AdapterFile};
use crate::error::{Error, Result};
use crate::model::{Condition, EpsModel, EpsPredictor, ModelSpec};
use crate::objectives::{delta_estimate, stratified_grid, DcoConfig};
use crate::oracle::{consistency_score, prompt_fidelity, GaussianConceptWorld};
use crate::process::ConditionedSample;
use crate::rng;
use crate::sampling::{
    sample, write_samples_csv, CfgPredictor, ConsistencyPredictor, GuidanceConfig, SampleRecord, SamplerConfig,
};
use crate::training::{
    finetune, noise_distance_profile, pretrain_base, synthesize_prior, DeviationReport, ObjectiveKind,
    PretrainConfig, RunRecord, TrainConfig,
};

/// Base pretraining block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseBlock {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub hidden: Vec<usize>,
}

impl Default for BaseBlock {
    fn default() -> Self {
        let p = PretrainConfig::default();
        BaseBlock {
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.lr,
            cond_dropout: p.cond_dropout,
            hidden: ModelSpec::default().hidden,
        }
    }
}

impl BaseBlock {
    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            cond_dropout: self.cond_dropout,
            seed,
        }
    }

    pub fn model_spec(&self, data_dim: usize) -> ModelSpec {
        ModelSpec {
            data_dim,
            hidden: self.hidden.clone(),
            ..ModelSpec::default()
        }
    }
}

/// One fine-tuning recipe run once per seed. `train.seed` is replaced by
/// each entry of `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneBlock {
    pub label: String,
    /// Name of a reference set in the world file.
    pub reference: String,
    pub seeds: Vec<u64>,
    /// Size of the prior set drawn from the base model for `dm-prior`.
    #[serde(default = "default_prior_samples")]
    pub prior_samples: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_prior_samples() -> usize {
    64
}

impl FinetuneBlock {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// Condition the references are trained under: the learned token when
    /// one is configured, the reference set's own condition otherwise.
    pub fn condition(&self, world: &GaussianConceptWorld) -> Result<String> {
        Ok(match &self.train.token {
            Some(t) => t.name.clone(),
            None => world.reference(&self.reference)?.condition.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub omega_text: f64,
    pub omega_con: Vec<f64>,
    pub samples: usize,
    /// Also evaluate plain guidance on the fine-tuned model at `omega_text`.
    pub plain_cfg: bool,
    /// Fine-tune labels to include; empty means all.
    pub methods: Vec<String>,
    pub sampler: SamplerConfig,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock {
            omega_text: 7.5,
            omega_con: vec![2.0, 3.0, 4.0, 5.0],
            samples: 256,
            plain_cfg: true,
            methods: Vec::new(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Merges the runs of two fine-tune blocks seed by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeBlock {
    pub label: String,
    pub subject: String,
    pub style: String,
    #[serde(default = "default_tau")]
    pub tau: [f64; 2],
    /// Conditions whose embeddings are averaged into the sampling prompt.
    /// Empty means the learned tokens of both runs.
    #[serde(default)]
    pub condition: Vec<String>,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default = "default_merge_samples")]
    pub samples: usize,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

fn default_tau() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_merge_samples() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseBlock {
    pub grid_points: usize,
    pub n_noise: usize,
    /// Noise draws per sample and time for the deviation estimate.
    pub n_draws: usize,
}

impl Default for DiagnoseBlock {
    fn default() -> Self {
        DiagnoseBlock {
            grid_points: 20,
            n_noise: crate::training::DEFAULT_NOISE_DRAWS,
            n_draws: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// World file, relative to the config file's directory.
    pub world: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub base: BaseBlock,
    #[serde(default)]
    pub finetune: Vec<FinetuneBlock>,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub merge: Vec<MergeBlock>,
    #[serde(default)]
    pub diagnose: DiagnoseBlock,
}

impl ExperimentConfig {
    /// Parses `text`; relative paths are resolved against `origin`'s
    /// directory and the world file must exist.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let dir = origin.parent().unwrap_or(Path::new("."));
        if cfg.world.is_relative() {
            cfg.world = dir.join(&cfg.world);
        }
        if let Some(out) = &cfg.out {
            if out.is_relative() {
                cfg.out = Some(dir.join(out));
            }
        }
        if !cfg.world.is_file() {
            return Err(Error::MissingFile(cfg.world.clone()));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_toml_str(&text, path)
    }

    pub fn load_world(&self) -> Result<GaussianConceptWorld> {
        GaussianConceptWorld::from_file(&self.world)
    }

    /// Checks labels, seeds and every name against `world`.
    pub fn validate(&self, world: &GaussianConceptWorld) -> Result<()> {
        let bad = |m: String| Error::Config {
            path: self.world.clone(),
            message: m,
        };
        if self.base.steps == 0 || self.base.hidden.contains(&0) {
            return Err(bad("base block needs steps >= 1 and nonzero hidden widths".into()));
        }
        let mut labels = BTreeSet::new();
        for b in &self.finetune {
            if !labels.insert(b.label.as_str()) {
                return Err(bad(format!("duplicate fine-tune label `{}`", b.label)));
            }
            if b.seeds.is_empty() {
                return Err(bad(format!("block `{}` lists no seeds", b.label)));
            }
            let distinct: BTreeSet<_> = b.seeds.iter().collect();
            if distinct.len() != b.seeds.len() {
                return Err(bad(format!("block `{}` repeats a seed", b.label)));
            }
            world.reference(&b.reference)?;
            if let Some(t) = &b.train.token {
                if !world.condition_names().contains(&t.initializer) {
                    return Err(Error::UnknownCondition(t.initializer.clone()));
                }
            }
            if b.train.objective == ObjectiveKind::DmPrior && b.prior_samples == 0 {
                return Err(bad(format!("block `{}` needs prior_samples > 0", b.label)));
            }
            b.train.validate()?;
        }
        if let Some(s) = &self.sweep {
            if s.omega_con.is_empty() || s.samples == 0 {
                return Err(bad("sweep needs omega_con values and samples > 0".into()));
            }
            for m in &s.methods {
                if !labels.contains(m.as_str()) {
                    return Err(bad(format!("sweep method `{m}` is not a fine-tune label")));
                }
            }
            for &w in &s.omega_con {
                GuidanceConfig::consistency(s.omega_text, w).validate()?;
            }
            s.sampler.time_grid()?;
        }
        for m in &self.merge {
            let find = |l: &str| {
                self.finetune
                    .iter()
                    .find(|b| b.label == l)
                    .ok_or_else(|| bad(format!("merge `{}` names unknown block `{l}`", m.label)))
            };
            let (a, b) = (find(&m.subject)?, find(&m.style)?);
            if a.seeds.len() != b.seeds.len() {
                return Err(bad(format!("merge `{}` pairs blocks with different seed counts", m.label)));
            }
            if m.samples == 0 || m.tau.iter().any(|t| !t.is_finite()) {
                return Err(bad(format!("merge `{}` needs samples > 0 and finite tau", m.label)));
            }
            m.guidance.validate()?;
        }
        if self.diagnose.grid_points == 0 || self.diagnose.n_noise == 0 || self.diagnose.n_draws == 0 {
            return Err(bad("diagnose block needs positive counts".into()));
        }
        Ok(())
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    /// Sets a constant `beta_t = beta` on every block.
    pub fn override_beta(&mut self, beta: f64) {
        for b in &mut self.finetune {
            b.train.dco = DcoConfig {
                beta,
                beta_t: beta,
                ..b.train.dco
            };
        }
    }

    pub fn override_objective(&mut self, objective: ObjectiveKind) {
        for b in &mut self.finetune {
            b.train.objective = objective;
        }
    }

    pub fn override_omega_con(&mut self, omega_con: Vec<f64>) {
        self.sweep.get_or_insert_with(SweepBlock::default).omega_con = omega_con;
    }
}

/// A finished fine-tuning run.
#[derive(Clone, Debug)]
pub struct FinetunedRun {
    pub label: String,
    pub seed: u64,
    /// Condition the references were trained under.
    pub condition: String,
    pub reference: String,
    pub model: AdaptedModel,
    pub record: RunRecord,
}

/// A loaded config bound to its world, output directory and worker count.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub world: GaussianConceptWorld,
    pub out: PathBuf,
    pub workers: usize,
}

/// Seed of the sampler for `(experiment seed, run seed, slot)`.
pub fn sample_seed(experiment_seed: u64, run_seed: u64, slot: u64) -> u64 {
    let mut r = rng::derived(experiment_seed ^ run_seed.rotate_left(32), 100 + slot);
    r.random()
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: PathBuf, workers: usize) -> Result<Self> {
        let world = config.load_world()?;
        config.validate(&world)?;
        Ok(Experiment {
            config,
            world,
            out,
            workers: workers.max(1),
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))
    }

    fn base_fingerprint(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            seed: u64,
            world_sha256: String,
            base: &'a BaseBlock,
        }
        let world = std::fs::read(&self.config.world)?;
        toml::to_string(&Fingerprint {
            seed: self.config.seed,
            world_sha256: hex::encode(Sha256::digest(&world)),
            base: &self.config.base,
        })
        .map_err(|e| Error::invalid(e.to_string()))
    }

    /// Loads `base.ckpt` when its fingerprint matches the config, otherwise
    /// pretrains and writes it.
    pub fn base(&self) -> Result<Arc<EpsModel>> {
        let ckpt = self.out.join("base.ckpt");
        let meta = self.out.join("base.toml");
        let fp = self.base_fingerprint()?;
        if ckpt.is_file() && std::fs::read_to_string(&meta).ok().as_deref() == Some(fp.as_str()) {
            log::info!("reusing base model {}", ckpt.display());
            return Ok(Arc::new(load_model(&ckpt)?));
        }
        let spec = self.config.base.model_spec(self.world.dim());
        let model = pretrain_base(&self.world, &spec, &self.config.base.pretrain_config(self.config.seed))?;
        std::fs::create_dir_all(&self.out)?;
        save_model(&model, &ckpt)?;
        std::fs::write(&meta, fp)?;
        Ok(Arc::new(model))
    }

    pub fn run_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.out.join("runs").join(label).join(format!("seed-{seed}"))
    }

    fn jobs(&self) -> Vec<(&FinetuneBlock, u64)> {
        self.config
            .finetune
            .iter()
            .flat_map(|b| b.seeds.iter().map(move |&s| (b, s)))
            .collect()
    }

    fn cached_run(&self, base: &Arc<EpsModel>, block: &FinetuneBlock, seed: u64) -> Option<FinetunedRun> {
        let dir = self.run_dir(&block.label, seed);
        let record = RunRecord::load(&dir).ok()?;
        if record.config != block.train_config(seed) || record.base_checksum != base.checksum() {
            return None;
        }
        let file = AdapterFile::load(record.checkpoint.as_ref()?).ok()?;
        let model = file.attach(base.clone()).ok()?;
        Some(FinetunedRun {
            label: block.label.clone(),
            seed,
            condition: block.condition(&self.world).ok()?,
            reference: block.reference.clone(),
            model,
            record,
        })
    }

    fn train_run(&self, base: &Arc<EpsModel>, block: &FinetuneBlock, seed: u64) -> Result<FinetunedRun> {
        let cfg = block.train_config(seed);
        let refs = self.world.reference(&block.reference)?;
        let condition = block.condition(&self.world)?;
        let prior = if cfg.objective == ObjectiveKind::DmPrior {
            let sampler = SamplerConfig {
                seed: sample_seed(self.config.seed, seed, u64::MAX),
                ..SamplerConfig::default()
            };
            synthesize_prior(base, &refs.condition, block.prior_samples, &sampler)?
        } else {
            Vec::new()
        };
        let mut out = finetune(base.clone(), &refs.points, &condition, &prior, &cfg)?;
        out.record.save(&self.run_dir(&block.label, seed), &out.model)?;
        log::info!("finished {} seed {seed} in {:.2}s", block.label, out.record.wall_clock_secs);
        Ok(FinetunedRun {
            label: block.label.clone(),
            seed,
            condition,
            reference: block.reference.clone(),
            model: out.model,
            record: out.record,
        })
    }

    /// Every (block, seed) run, reusing stored runs whose config and base
    /// match and training the rest concurrently.
    pub fn runs(&self, base: &Arc<EpsModel>) -> Result<Vec<FinetunedRun>> {
        let jobs = self.jobs();
        self.pool()?.install(|| {
            jobs.par_iter()
                .map(|&(b, s)| match self.cached_run(base, b, s) {
                    Some(r) => Ok(r),
                    None => self.train_run(base, b, s),
                })
                .collect()
        })
    }

    /// Stored runs only; a missing run is an error.
    pub fn load_runs(&self, base: &Arc<EpsModel>) -> Result<Vec<FinetunedRun>> {
        self.jobs()
            .into_iter()
            .map(|(b, s)| {
                self.cached_run(base, b, s)
                    .ok_or_else(|| Error::MissingFile(self.run_dir(&b.label, s).join("adapter.ckpt")))
            })
            .collect()
    }

    fn sweep_block(&self) -> SweepBlock {
        self.config.sweep.clone().unwrap_or_default()
    }

    /// Consistency-guided samples of every run at every `omega_con`, written
    /// under `samples/`.
    pub fn sample_runs(&self, base: &Arc<EpsModel>, runs: &[FinetunedRun]) -> Result<()> {
        let sw = self.sweep_block();
        self.pool()?.install(|| {
            runs.par_iter().try_for_each(|run| -> Result<()> {
                let c = run.model.condition(&run.condition)?;
                let mut records = Vec::new();
                for (k, &w) in sw.omega_con.iter().enumerate() {
                    let seed = sample_seed(self.config.seed, run.seed, k as u64);
                    let xs = guided_samples(&run.model, base, c, GuidanceConfig::consistency(sw.omega_text, w), &sw, seed)?;
                    records.extend(xs.into_iter().map(|x| SampleRecord {
                        seed,
                        condition: run.condition.clone(),
                        omega_text: sw.omega_text,
                        omega_con: w,
                        x,
                    }));
                }
                let dir = self.out.join("samples").join(&run.label);
                std::fs::create_dir_all(&dir)?;
                write_samples_csv(&dir.join(format!("seed-{}.csv", run.seed)), &records)
            })
        })
    }

    /// Pareto points of every included run; writes the report under `sweep/`.
    pub fn sweep(&self, base: &Arc<EpsModel>, runs: &[FinetunedRun]) -> Result<(Vec<ParetoPoint>, ParetoReport)> {
        let sw = self.sweep_block();
        let chosen: Vec<&FinetunedRun> = runs
            .iter()
            .filter(|r| sw.methods.is_empty() || sw.methods.contains(&r.label))
            .collect();
        let per_run: Vec<Vec<ParetoPoint>> = self.pool()?.install(|| {
            chosen
                .par_iter()
                .map(|run| self.pareto_points(base, run, &sw))
                .collect::<Result<_>>()
        })?;
        let points: Vec<ParetoPoint> = per_run.into_iter().flatten().collect();
        let report = pareto_report(&points)?;
        write_pareto_outputs(&self.out.join("sweep"), &points, &report)?;
        Ok((points, report))
    }

    /// One point per `omega_con`, plus a plain-guidance point if enabled.
    pub fn pareto_points(&self, base: &Arc<EpsModel>, run: &FinetunedRun, sw: &SweepBlock) -> Result<Vec<ParetoPoint>> {
        let refs = self.world.reference(&run.reference)?;
        let c = run.model.condition(&run.condition)?;
        let score = |xs: &[Vec<f64>]| -> Result<(f64, f64)> {
            Ok((consistency_score(xs, &refs.points)?, prompt_fidelity(xs, &refs.condition, &self.world)?))
        };
        let mut out = Vec::new();
        for (k, &w) in sw.omega_con.iter().enumerate() {
            let seed = sample_seed(self.config.seed, run.seed, k as u64);
            let xs = guided_samples(&run.model, base, c, GuidanceConfig::consistency(sw.omega_text, w), sw, seed)?;
            let (consistency, fidelity) = score(&xs)?;
            out.push(ParetoPoint {
                method: run.label.clone(),
                omega_con: w,
                plain_cfg: false,
                consistency,
                fidelity,
                seed: run.seed,
            });
        }
        if sw.plain_cfg {
            let seed = sample_seed(self.config.seed, run.seed, sw.omega_con.len() as u64);
            let xs = guided_samples(&run.model, base, c, GuidanceConfig::plain(sw.omega_text), sw, seed)?;
            let (consistency, fidelity) = score(&xs)?;
            out.push(ParetoPoint {
                method: run.label.clone(),
                omega_con: 0.0,
                plain_cfg: true,
                consistency,
                fidelity,
                seed: run.seed,
            });
        }
        Ok(out)
    }

    /// Every merge block, seed by seed; writes merged checkpoints and
    /// `merge/report.csv`.
    pub fn merges(&self, base: &Arc<EpsModel>, runs: &[FinetunedRun]) -> Result<Vec<MergeRow>> {
        let find = |label: &str, seed: u64| {
            runs.iter()
                .find(|r| r.label == label && r.seed == seed)
                .ok_or_else(|| Error::MissingFile(self.run_dir(label, seed)))
        };
        let mut rows = Vec::new();
        for m in &self.config.merge {
            let blocks = |l: &str| self.config.finetune.iter().find(|b| b.label == l).expect("validated");
            let (sb, tb) = (blocks(&m.subject), blocks(&m.style));
            for (&s1, &s2) in sb.seeds.iter().zip(&tb.seeds) {
                let (subj, style) = (find(&m.subject, s1)?, find(&m.style, s2)?);
                let eval = MergeEval {
                    world: &self.world,
                    subject: self.world.reference(&subj.reference)?,
                    style: self.world.reference(&style.reference)?,
                    condition: if m.condition.is_empty() {
                        let mut c = vec![subj.condition.clone()];
                        if style.condition != subj.condition {
                            c.push(style.condition.clone());
                        }
                        c
                    } else {
                        m.condition.clone()
                    },
                    guidance: m.guidance,
                    sampler: SamplerConfig {
                        seed: sample_seed(self.config.seed, s1, 1000),
                        ..m.sampler
                    },
                    samples: m.samples,
                };
                let (merged, scores) = my_subject_my_style(
                    base.clone(),
                    &AdapterFile::from_model(&subj.model),
                    &AdapterFile::from_model(&style.model),
                    m.tau,
                    &eval,
                )?;
                let dir = self.out.join("merge").join(&m.label).join(format!("seed-{s1}"));
                std::fs::create_dir_all(&dir)?;
                AdapterFile::from_model(&merged).save(&dir.join("merged.ckpt"))?;
                rows.push(MergeRow {
                    method: m.label.clone(),
                    seed: s1,
                    subject: scores.subject,
                    style: scores.style,
                    text: scores.text,
                });
            }
        }
        write_merge_csv(&self.out.join("merge").join("report.csv"), &rows)?;
        Ok(rows)
    }

    /// Noise-distance profile and deviation estimate of every run against
    /// the base; writes `diagnose/`.
    pub fn diagnose(&self, base: &Arc<EpsModel>, runs: &[FinetunedRun]) -> Result<Vec<Diagnosis>> {
        let dg = &self.config.diagnose;
        let out: Vec<Diagnosis> = self.pool()?.install(|| {
            runs.par_iter()
                .map(|run| {
                    let refs = self.world.reference(&run.reference)?;
                    diagnose_model(&run.model, base.as_ref(), &run.condition, &refs.points, dg, run.seed)
                        .map(|d| Diagnosis {
                            label: run.label.clone(),
                            ..d
                        })
                })
                .collect::<Result<_>>()
        })?;
        write_diagnosis(&self.out.join("diagnose"), &out)?;
        Ok(out)
    }
}

fn guided_samples(
    theta: &AdaptedModel,
    base: &Arc<EpsModel>,
    c: Condition,
    guidance: GuidanceConfig,
    sw: &SweepBlock,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let sampler = SamplerConfig { seed, ..sw.sampler };
    if guidance.plain_cfg {
        let p = CfgPredictor {
            model: theta,
            condition: c,
            omega: guidance.omega_text,
        };
        sample(&p, &sampler, sw.samples)
    } else {
        let p = ConsistencyPredictor {
            theta,
            phi: base.as_ref(),
            condition: c,
            guidance,
        };
        sample(&p, &sampler, sw.samples)
    }
}

/// Deviation diagnostics of one fine-tuned model.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub label: String,
    pub seed: u64,
    pub profile: DeviationReport,
    pub delta: f64,
    pub delta_std_err: f64,
}

pub fn diagnose_model(
    theta: &AdaptedModel,
    phi: &EpsModel,
    condition: &str,
    refs: &[Vec<f64>],
    cfg: &DiagnoseBlock,
    seed: u64,
) -> Result<Diagnosis> {
    let c = theta.condition(condition)?;
    let batch: Vec<ConditionedSample> = refs.iter().map(|x| ConditionedSample::new(x.clone(), c)).collect();
    let mut r = rng::derived(seed, 7);
    let profile = noise_distance_profile(theta, phi, &batch, &stratified_grid(cfg.grid_points), cfg.n_noise, &mut r)?;
    let delta = delta_estimate(theta, phi, &batch, cfg.n_draws, &mut r)?;
    Ok(Diagnosis {
        label: String::new(),
        seed,
        profile,
        delta: delta.value,
        delta_std_err: delta.std_err,
    })
}

pub fn write_diagnosis(dir: &Path, rows: &[Diagnosis]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("profile.csv"))?;
    w.write_record(["label", "seed", "t", "mean", "std_err"])?;
    for d in rows {
        for i in 0..d.profile.grid.len() {
            w.write_record([
                d.label.clone(),
                d.seed.to_string(),
                d.profile.grid[i].to_string(),
                d.profile.mean[i].to_string(),
                d.profile.std_err[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["label", "seed", "mean_noise_distance", "delta", "delta_std_err"])?;
    for d in rows {
        w.write_record([
            d.label.clone(),
            d.seed.to_string(),
            d.profile.overall.to_string(),
            d.delta.to_string(),
            d.delta_std_err.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- Pareto

/// One guidance setting of one run, scored on both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub method: String,
    pub omega_con: f64,
    /// Plain guidance on the fine-tuned model; `omega_con` is then 0.
    pub plain_cfg: bool,
    pub consistency: f64,
    pub fidelity: f64,
    pub seed: u64,
}

impl ParetoPoint {
    /// At least as good on both axes and better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.consistency >= other.consistency
            && self.fidelity >= other.fidelity
            && (self.consistency > other.consistency || self.fidelity > other.fidelity)
    }

    fn same_scores(&self, other: &ParetoPoint) -> bool {
        self.consistency == other.consistency && self.fidelity == other.fidelity
    }
}

fn canonical_order(a: &ParetoPoint, b: &ParetoPoint) -> std::cmp::Ordering {
    a.consistency
        .total_cmp(&b.consistency)
        .then(b.fidelity.total_cmp(&a.fidelity))
        .then_with(|| a.method.cmp(&b.method))
        .then(a.seed.cmp(&b.seed))
        .then(a.plain_cfg.cmp(&b.plain_cfg))
        .then(a.omega_con.total_cmp(&b.omega_con))
}

/// Non-dominated points under maximize-both, in increasing consistency.
/// The result does not depend on input order.
pub fn frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| b.consistency.total_cmp(&a.consistency).then(b.fidelity.total_cmp(&a.fidelity)));
    let mut out = Vec::new();
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].consistency;
        let group_max = sorted[i].fidelity;
        let mut j = i;
        while j < sorted.len() && sorted[j].consistency == c {
            let p = sorted[j];
            if p.fidelity == group_max && p.fidelity > best_above {
                out.push(p.clone());
            }
            j += 1;
        }
        best_above = best_above.max(group_max);
        i = j;
    }
    out.sort_by(canonical_order);
    out
}

/// Share of comparable cross pairs between the frontiers of `a` and `b`
/// won by `a`. A pair is comparable when one point dominates the other or
/// both are equal; equal pairs count 1/2 to each side. With no comparable
/// pair the result is 1/2.
pub fn dominance_fraction(a: &[ParetoPoint], b: &[ParetoPoint]) -> f64 {
    let (fa, fb) = (frontier(a), frontier(b));
    let (mut win, mut total) = (0.0, 0.0);
    for p in &fa {
        for q in &fb {
            if p.dominates(q) {
                win += 1.0;
                total += 1.0;
            } else if q.dominates(p) {
                total += 1.0;
            } else if p.same_scores(q) {
                win += 0.5;
                total += 1.0;
            }
        }
    }
    if total == 0.0 {
        0.5
    } else {
        win / total
    }
}

/// Dominance of method `a` over method `b`, per shared seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DominanceSummary {
    pub a: String,
    pub b: String,
    /// `(seed, fraction)`; a single entry with seed `None` when the two
    /// methods share no seed and were compared as pooled sets.
    pub per_seed: Vec<(Option<u64>, f64)>,
    pub mean: f64,
    /// Two-sided 95% Student-t interval over seeds, clipped to [0, 1].
    pub ci: (f64, f64),
}

/// Spearman correlations of the consistency-guided points of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendRow {
    pub method: String,
    pub seed: u64,
    pub rho_consistency: f64,
    pub rho_fidelity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParetoReport {
    pub frontiers: BTreeMap<String, Vec<ParetoPoint>>,
    pub dominance: Vec<DominanceSummary>,
    pub trends: Vec<TrendRow>,
}

impl ParetoReport {
    pub fn dominance_of(&self, a: &str, b: &str) -> Option<&DominanceSummary> {
        self.dominance.iter().find(|d| d.a == a && d.b == b)
    }

    /// Mean over seeds of the two correlations for `method`.
    pub fn mean_trend(&self, method: &str) -> Option<(f64, f64)> {
        let rows: Vec<&TrendRow> = self.trends.iter().filter(|t| t.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|t| t.rho_consistency).sum::<f64>() / n,
            rows.iter().map(|t| t.rho_fidelity).sum::<f64>() / n,
        ))
    }
}

const T975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
    2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

fn mean_ci(xs: &[f64]) -> (f64, (f64, f64)) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, (0.0, 1.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = T975.get(n - 2).copied().unwrap_or(1.96);
    let h = t * (var / n as f64).sqrt();
    (mean, ((mean - h).max(0.0), (mean + h).min(1.0)))
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Frontiers, pairwise dominance and guidance trends. Needs at least two
/// methods with at least two points each.
pub fn pareto_report(points: &[ParetoPoint]) -> Result<ParetoReport> {
    if points.iter().any(|p| !p.consistency.is_finite() || !p.fidelity.is_finite()) {
        return Err(Error::NonFinite("pareto score"));
    }
    let mut by_method: BTreeMap<String, Vec<ParetoPoint>> = BTreeMap::new();
    for p in points {
        by_method.entry(p.method.clone()).or_default().push(p.clone());
    }
    if by_method.len() < 2 || by_method.values().any(|v| v.len() < 2) {
        return Err(Error::invalid("a Pareto report needs at least two methods with two points each"));
    }
    let frontiers = by_method.iter().map(|(m, v)| (m.clone(), frontier(v))).collect();
    let seeds_of = |v: &[ParetoPoint]| v.iter().map(|p| p.seed).collect::<BTreeSet<_>>();
    let mut dominance = Vec::new();
    for (a, va) in &by_method {
        for (b, vb) in &by_method {
            if a == b {
                continue;
            }
            let shared: Vec<u64> = seeds_of(va).intersection(&seeds_of(vb)).copied().collect();
            let per_seed: Vec<(Option<u64>, f64)> = if shared.is_empty() {
                vec![(None, dominance_fraction(va, vb))]
            } else {
                shared
                    .iter()
                    .map(|&s| {
                        let pa: Vec<ParetoPoint> = va.iter().filter(|p| p.seed == s).cloned().collect();
                        let pb: Vec<ParetoPoint> = vb.iter().filter(|p| p.seed == s).cloned().collect();
                        (Some(s), dominance_fraction(&pa, &pb))
                    })
                    .collect()
            };
            let fr: Vec<f64> = per_seed.iter().map(|x| x.1).collect();
            let (mean, ci) = mean_ci(&fr);
            dominance.push(DominanceSummary {
                a: a.clone(),
                b: b.clone(),
                per_seed,
                mean,
                ci,
            });
        }
    }
    let mut trends = Vec::new();
    for (m, v) in &by_method {
        for s in seeds_of(v) {
            let mut pts: Vec<&ParetoPoint> = v.iter().filter(|p| p.seed == s && !p.plain_cfg).collect();
            if pts.len() < 2 {
                continue;
            }
            pts.sort_by(|a, b| a.omega_con.total_cmp(&b.omega_con));
            let w: Vec<f64> = pts.iter().map(|p| p.omega_con).collect();
            let c: Vec<f64> = pts.iter().map(|p| p.consistency).collect();
            let f: Vec<f64> = pts.iter().map(|p| p.fidelity).collect();
            trends.push(TrendRow {
                method: m.clone(),
                seed: s,
                rho_consistency: spearman(&w, &c),
                rho_fidelity: spearman(&w, &f),
            });
        }
    }
    Ok(ParetoReport {
        frontiers,
        dominance,
        trends,
    })
}

const POINT_HEADER: [&str; 6] = ["method", "seed", "omega_con", "plain_cfg", "consistency", "fidelity"];

fn write_points(path: &Path, points: &[ParetoPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(POINT_HEADER)?;
    for p in points {
        w.write_record([
            p.method.clone(),
            p.seed.to_string(),
            p.omega_con.to_string(),
            p.plain_cfg.to_string(),
            p.consistency.to_string(),
            p.fidelity.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_points_csv(path: &Path, points: &[ParetoPoint]) -> Result<()> {
    write_points(path, points)
}

/// Reads a file written by [`write_points_csv`].
pub fn read_points_csv(path: &Path) -> Result<Vec<ParetoPoint>> {
    let mut rd = csv::Reader::from_path(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if rd.headers()?.iter().collect::<Vec<_>>() != POINT_HEADER {
        return Err(Error::invalid(format!("{} is not a Pareto point table", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let bad = || Error::invalid(format!("{}: malformed row {}", path.display(), i + 2));
        let f = |k: usize| rec.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        out.push(ParetoPoint {
            method: rec.get(0).ok_or_else(bad)?.to_string(),
            seed: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            omega_con: f(2)?,
            plain_cfg: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            consistency: f(4)?,
            fidelity: f(5)?,
        });
    }
    Ok(out)
}

/// Writes the point table, frontiers, dominance, trends and plot.
pub fn write_pareto_outputs(dir: &Path, points: &[ParetoPoint], report: &ParetoReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_points(&dir.join("pareto.csv"), points)?;
    let all: Vec<ParetoPoint> = report.frontiers.values().flatten().cloned().collect();
    write_points(&dir.join("frontier.csv"), &all)?;

    let mut w = csv::Writer::from_path(dir.join("dominance.csv"))?;
    w.write_record(["a", "b", "seed", "fraction"])?;
    for d in &report.dominance {
        for (s, f) in &d.per_seed {
            let seed = s.map_or_else(|| "pooled".to_string(), |s| s.to_string());
            w.write_record([d.a.clone(), d.b.clone(), seed, f.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("dominance_summary.csv"))?;
    w.write_record(["a", "b", "seeds", "mean", "ci_low", "ci_high"])?;
    for d in &report.dominance {
        w.write_record([
            d.a.clone(),
            d.b.clone(),
            d.per_seed.len().to_string(),
            d.mean.to_string(),
            d.ci.0.to_string(),
            d.ci.1.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("trends.csv"))?;
    w.write_record(["method", "seed", "spearman_consistency", "spearman_fidelity"])?;
    for t in &report.trends {
        w.write_record([
            t.method.clone(),
            t.seed.to_string(),
            t.rho_consistency.to_string(),
            t.rho_fidelity.to_string(),
        ])?;
    }
    w.flush()?;
    std::fs::write(dir.join("pareto.svg"), render_svg(points))?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scatter of all points, one polyline per method through the per-`omega_con`
/// means over seeds, and a diamond at each method's mean plain-guidance
/// point. Axes are the toy surrogates of reference and prompt fidelity.
pub fn render_svg(points: &[ParetoPoint]) -> String {
    let (w, h, m) = (640.0, 480.0, 60.0);
    let px = |c: f64| m + c.clamp(0.0, 1.0) * (w - 2.0 * m);
    let py = |f: f64| h - m - f.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{m}" y1="{y0}" x2="{m}" y2="{m}" stroke="black"/>"#,
        y0 = h - m,
        x1 = w - m
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            px(v),
            h - m + 16.0,
            m - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">consistency score (surrogate reference fidelity)</text>"#,
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">prompt fidelity (surrogate)</text>"#,
        h / 2.0
    );
    let methods: BTreeSet<&str> = points.iter().map(|p| p.method.as_str()).collect();
    for (i, method) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mine: Vec<&ParetoPoint> = points.iter().filter(|p| p.method == *method).collect();
        for p in &mine {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" fill-opacity="0.35"/>"#,
                px(p.consistency),
                py(p.fidelity)
            );
        }
        let mut groups: BTreeMap<u64, (f64, f64, f64, usize)> = BTreeMap::new();
        let (mut pc, mut pf, mut pn) = (0.0, 0.0, 0usize);
        for p in &mine {
            if p.plain_cfg {
                pc += p.consistency;
                pf += p.fidelity;
                pn += 1;
            } else {
                let e = groups.entry(p.omega_con.to_bits()).or_insert((p.omega_con, 0.0, 0.0, 0));
                e.1 += p.consistency;
                e.2 += p.fidelity;
                e.3 += 1;
            }
        }
        let mut means: Vec<(f64, f64, f64)> =
            groups.values().map(|&(wc, c, f, n)| (wc, c / n as f64, f / n as f64)).collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = means.iter().map(|&(_, c, f)| format!("{:.2},{:.2}", px(c), py(f))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(wc, c, f) in &means {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"><title>{method} omega_con={wc}</title></circle>"#,
                px(c),
                py(f)
            );
        }
        if pn > 0 {
            let (cx, cy) = (px(pc / pn as f64), py(pf / pn as f64));
            let _ = writeln!(
                s,
                r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="{color}" stroke="black"><title>{method} plain guidance</title></polygon>"#,
                cx,
                cy - 7.0,
                cx + 7.0,
                cy,
                cx,
                cy + 7.0,
                cx - 7.0,
                cy
            );
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{method}</text>"#,
            w - m - 110.0,
            w - m - 90.0,
            w - m - 84.0,
            ly + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}">diamond: plain guidance</text>"#,
        w - m - 110.0,
        m + 16.0 * methods.len() as f64 + 4.0
    );
    s.push_str("</svg>\n");
    s
}

// ---------------------------------------------------------------- merging

/// Sampling and scoring setup of a merged model.
pub struct MergeEval<'a> {
    pub world: &'a GaussianConceptWorld,
    pub subject: &'a crate::oracle::ReferenceSet,
    pub style: &'a crate::oracle::ReferenceSet,
    /// Conditions averaged into the prompt embedding.
    pub condition: Vec<String>,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub samples: usize,
}

/// Subject consistency, style consistency and prompt fidelity. These are
/// toy surrogates and are not comparable to embedding-based metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeScores {
    pub subject: f64,
    pub style: f64,
    pub text: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeRow {
    pub method: String,
    pub seed: u64,
    pub subject: f64,
    pub style: f64,
    pub text: f64,
}

/// Attaches the weighted sum of the adapters in `parts` to `base`, with
/// every learned token. Each adapter must have been trained against `base`.
pub fn merge_adapters(base: Arc<EpsModel>, parts: &[(&AdapterFile, f64)]) -> Result<AdaptedModel> {
    for (f, _) in parts {
        if !f.base_matches(&base) {
            return Err(Error::Checkpoint(format!(
                "adapter was trained against base {}, not {}",
                f.base_checksum,
                base.checksum()
            )));
        }
    }
    let spec = MergeSpec::new(parts.iter().map(|(f, tau)| (f.adapter.clone(), *tau)).collect());
    let mut model = AdaptedModel::attach(base, merge(&spec)?)?;
    for (f, _) in parts {
        for t in &f.tokens {
            model.push_token(t.clone())?;
        }
    }
    Ok(model)
}

/// Adds (if needed) the prompt condition: a single existing name is used
/// as is, several names are averaged into a new token whose reference
/// branch uses the first name's reference condition.
pub fn prompt_condition(model: &mut AdaptedModel, names: &[String]) -> Result<Condition> {
    match names {
        [] => Err(Error::invalid("empty prompt")),
        [one] => model.condition(one),
        _ => {
            let joined = names.join("+");
            if let Ok(c) = model.condition(&joined) {
                return Ok(c);
            }
            let mut vector = vec![0.0; crate::model::COND_DIM];
            let mut first = None;
            for n in names {
                let c = model.condition(n)?;
                first.get_or_insert(c);
                let row = match model.tokens().iter().find(|t| &t.name == n) {
                    Some(t) => t.vector.clone(),
                    None => model.base().conditions().row(c)?.to_vec(),
                };
                for (v, r) in vector.iter_mut().zip(row) {
                    *v += r / names.len() as f64;
                }
            }
            let initializer = model.reference_condition(first.expect("nonempty"));
            model.push_token(TokenEmbedding {
                name: joined,
                vector,
                initializer,
            })
        }
    }
}

/// Scores consistency-guided samples of `model` against both reference
/// sets and the subject's class condition.
pub fn evaluate_joint(base: &Arc<EpsModel>, model: &AdaptedModel, eval: &MergeEval<'_>) -> Result<MergeScores> {
    let mut m = model.clone();
    let c = prompt_condition(&mut m, &eval.condition)?;
    let p = ConsistencyPredictor {
        theta: &m,
        phi: base.as_ref(),
        condition: c,
        guidance: eval.guidance,
    };
    let xs = if eval.guidance.plain_cfg {
        let p = CfgPredictor {
            model: &m,
            condition: c,
            omega: eval.guidance.omega_text,
        };
        sample(&p, &eval.sampler, eval.samples)?
    } else {
        sample(&p, &eval.sampler, eval.samples)?
    };
    Ok(MergeScores {
        subject: consistency_score(&xs, &eval.subject.points)?,
        style: consistency_score(&xs, &eval.style.points)?,
        text: prompt_fidelity(&xs, &eval.subject.condition, eval.world)?,
    })
}

/// Merges a subject and a style adapter with weights `tau` and scores the
/// merged model.
pub fn my_subject_my_style(
    base: Arc<EpsModel>,
    subject: &AdapterFile,
    style: &AdapterFile,
    tau: [f64; 2],
    eval: &MergeEval<'_>,
) -> Result<(AdaptedModel, MergeScores)> {
    let merged = merge_adapters(base.clone(), &[(subject, tau[0]), (style, tau[1])])?;
    let scores = evaluate_joint(&base, &merged, eval)?;
    Ok((merged, scores))
}

/// An adapter file with zero delta and no tokens, for `base`.
pub fn zero_adapter_file(base: &EpsModel, rank: usize) -> Result<AdapterFile> {
    Ok(AdapterFile {
        adapter: LoraAdapter::zeros(&base.spec().layer_shapes(), rank)?,
        tokens: Vec::new(),
        base_checksum: base.checksum(),
    })
}

const MERGE_HEADER: [&str; 5] = ["method", "seed", "subject", "style", "text"];

pub fn write_merge_csv(path: &Path, rows: &[MergeRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MERGE_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.seed.to_string(),
            r.subject.to_string(),
            r.style.to_string(),
            r.text.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_merge_csv(path: &Path) -> Result<Vec<MergeRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if rd.headers()?.iter().collect::<Vec<_>>() != MERGE_HEADER {
        return Err(Error::invalid(format!("{} is not a merge report", path.display())));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let bad = || Error::invalid(format!("{}: malformed row", path.display()));
        let f = |k: usize| rec.get(k).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        out.push(MergeRow {
            method: rec.get(0).ok_or_else(bad)?.to_string(),
            seed: rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            subject: f(2)?,
            style: f(3)?,
            text: f(4)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(method: &str, seed: u64, w: f64, c: f64, f: f64) -> ParetoPoint {
        ParetoPoint {
            method: method.into(),
            omega_con: w,
            plain_cfg: false,
            consistency: c,
            fidelity: f,
            seed,
        }
    }

    fn brute_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
        let mut out: Vec<ParetoPoint> = points
            .iter()
            .filter(|p| !points.iter().any(|q| q.dominates(p)))
            .cloned()
            .collect();
        out.sort_by(canonical_order);
        out
    }

    #[test]
    fn pointwise_better_method_dominates() {
        let b = vec![pt("b", 0, 2.0, 0.1, 0.9), pt("b", 0, 3.0, 0.4, 0.6), pt("b", 0, 4.0, 0.7, 0.2)];
        let a: Vec<ParetoPoint> = b
            .iter()
            .map(|p| pt("a", 0, p.omega_con, p.consistency + 0.05, p.fidelity + 0.05))
            .collect();
        assert_eq!(dominance_fraction(&a, &b), 1.0);
        assert_eq!(dominance_fraction(&b, &a), 0.0);
    }

    #[test]
    fn identical_sets_tie() {
        let a = vec![pt("a", 0, 2.0, 0.1, 0.9), pt("a", 0, 3.0, 0.5, 0.5)];
        assert_eq!(dominance_fraction(&a, &a.clone()), 0.5);
        let far = vec![pt("b", 0, 2.0, 0.95, 0.0), pt("b", 0, 3.0, 0.0, 0.95)];
        // Mutually incomparable frontiers: no comparable pair.
        assert_eq!(dominance_fraction(&a, &far), 0.5);
    }

    #[test]
    fn four_point_frontier_matches_brute_force() {
        let sets = [
            vec![(0.1, 0.9), (0.5, 0.5), (0.4, 0.4), (0.9, 0.1)],
            vec![(0.5, 0.5), (0.5, 0.5), (0.5, 0.4), (0.6, 0.1)],
            vec![(0.2, 0.2), (0.2, 0.3), (0.1, 0.3), (0.3, 0.1)],
        ];
        for s in sets {
            let pts: Vec<ParetoPoint> = s.iter().enumerate().map(|(i, &(c, f))| pt("m", i as u64, 1.0, c, f)).collect();
            assert_eq!(frontier(&pts), brute_frontier(&pts));
        }
    }

    proptest! {
        #[test]
        fn frontier_agrees_with_brute_force(raw in prop::collection::vec((0u8..6, 0u8..6), 1..24)) {
            let pts: Vec<ParetoPoint> = raw
                .iter()
                .enumerate()
                .map(|(i, &(c, f))| pt("m", i as u64, 1.0, c as f64 / 5.0, f as f64 / 5.0))
                .collect();
            prop_assert_eq!(frontier(&pts), brute_frontier(&pts));
        }

        #[test]
        fn frontier_is_order_invariant(raw in prop::collection::vec((0u8..8, 0u8..8), 2..20), rot in 0usize..20) {
            let pts: Vec<ParetoPoint> = raw
                .iter()
                .enumerate()
                .map(|(i, &(c, f))| pt("m", i as u64, 1.0, c as f64 / 7.0, f as f64 / 7.0))
                .collect();
            let mut shuffled = pts.clone();
            shuffled.rotate_left(rot % pts.len());
            shuffled.reverse();
            prop_assert_eq!(frontier(&pts), frontier(&shuffled));
            let other: Vec<ParetoPoint> = pts.iter().map(|p| pt("o", p.seed, 1.0, p.fidelity, p.consistency)).collect();
            prop_assert_eq!(dominance_fraction(&pts, &other), dominance_fraction(&shuffled, &other));
        }
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.5, 0.9]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 0.0);
        // Ties take average ranks: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 2.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
    }

    #[test]
    fn report_rejects_degenerate_input() {
        let one = vec![pt("a", 0, 2.0, 0.1, 0.2), pt("a", 0, 3.0, 0.2, 0.1)];
        assert!(pareto_report(&one).is_err());
        let mut two = one.clone();
        two.push(pt("b", 0, 2.0, 0.3, 0.3));
        assert!(pareto_report(&two).is_err());
        two.push(pt("b", 0, 3.0, f64::NAN, 0.3));
        assert!(pareto_report(&two).is_err());
    }

    #[test]
    fn report_per_seed_dominance_and_trends() {
        let mut pts = Vec::new();
        for s in 0..3u64 {
            for (k, w) in [2.0, 3.0, 4.0, 5.0].into_iter().enumerate() {
                let c = 0.2 * k as f64;
                pts.push(pt("dco", s, w, c + 0.1, 0.9 - c));
                pts.push(pt("dm", s, w, c, 0.8 - c));
            }
        }
        let r = pareto_report(&pts).unwrap();
        let d = r.dominance_of("dco", "dm").unwrap();
        assert_eq!(d.per_seed.len(), 3);
        assert_eq!(d.mean, 1.0);
        assert_eq!(r.dominance_of("dm", "dco").unwrap().mean, 0.0);
        assert_eq!(r.mean_trend("dco"), Some((1.0, -1.0)));
        let svg = render_svg(&pts);
        assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);
    }

    #[test]
    fn points_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pts = vec![pt("dco", 1, 2.0, 0.123456789012345, 1.0 / 3.0), pt("dm", 2, 5.0, 0.0, 1e-300)];
        pts[1].plain_cfg = true;
        let path = dir.path().join("p.csv");
        write_points_csv(&path, &pts).unwrap();
        assert_eq!(read_points_csv(&path).unwrap(), pts);
        let rows = vec![MergeRow {
            method: "dco".into(),
            seed: 3,
            subject: 0.1,
            style: 0.2,
            text: 0.7,
        }];
        let mp = dir.path().join("m.csv");
        write_merge_csv(&mp, &rows).unwrap();
        assert_eq!(read_merge_csv(&mp).unwrap(), rows);
        assert!(read_points_csv(&mp).is_err());
    }

    #[test]
    fn config_errors_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("exp.toml");
        let e = ExperimentConfig::from_toml_str("world = \"w.toml\"\nseed = \"x\"\n", &cfg).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = ExperimentConfig::from_toml_str("world = \"missing.toml\"\n", &cfg).unwrap_err();
        assert!(matches!(e, Error::MissingFile(_)));
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("w.toml"),
            "dim = 1\nseed = 0\n[[conditions]]\nname = \"a\"\ncomponents = [{ mean = [0.0], std = 1.0 }]\n\
             [[references]]\nname = \"r\"\ncondition = \"a\"\ncount = 3\nmean = [1.0]\nstd = 0.1\n",
        )
        .unwrap();
        let origin = dir.path().join("exp.toml");
        let load = |extra: &str| {
            let c = ExperimentConfig::from_toml_str(&format!("world = \"w.toml\"\n{extra}"), &origin).unwrap();
            let w = c.load_world().unwrap();
            c.validate(&w)
        };
        assert!(load("[[finetune]]\nlabel = \"x\"\nreference = \"r\"\nseeds = [1, 2]\n").is_ok());
        assert!(load("[[finetune]]\nlabel = \"x\"\nreference = \"r\"\nseeds = [1, 1]\n").is_err());
        assert!(load("[[finetune]]\nlabel = \"x\"\nreference = \"nope\"\nseeds = [1]\n").is_err());
        assert!(load(
            "[[finetune]]\nlabel = \"x\"\nreference = \"r\"\nseeds = [1]\n[finetune.train]\nsteps = 0\n"
        )
        .is_err());
        assert!(load(
            "[[finetune]]\nlabel = \"x\"\nreference = \"r\"\nseeds = [1]\n[sweep]\nmethods = [\"y\"]\n"
        )
        .is_err());
    }
}
