//! Training loops: base-model pretraining and adapter fine-tuning.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::adapters::{AdaptedModel, LoraAdapter};
use crate::checkpoint::AdapterFile;
use crate::error::{Error, Result};
use crate::model::{Condition, EpsModel, EpsPredictor, ModelSpec, ParamGroup, Trainable};
use crate::objectives::{
    objective_gradients, stratified_grid, DcoConfig, Draws, LossInputs, Objective, PriorPreservationConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::oracle::GaussianConceptWorld;
use crate::process::ConditionedSample;
use crate::rng::{self, LabRng};
use crate::sampling::{sample, CfgPredictor, SamplerConfig};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Dm,
    DmPrior,
    #[default]
    Dco,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dm" => Ok(ObjectiveKind::Dm),
            "dm-prior" => Ok(ObjectiveKind::DmPrior),
            "dco" => Ok(ObjectiveKind::Dco),
            _ => Err(Error::invalid(format!("unknown objective `{s}` (dm, dm-prior, dco)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Dm => "dm",
            ObjectiveKind::DmPrior => "dm-prior",
            ObjectiveKind::Dco => "dco",
        }
    }
}

/// A learned token added to the condition table before fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenConfig {
    pub name: String,
    pub initializer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub steps: usize,
    pub batch_size: usize,
    pub adapter_lr: f64,
    pub embedding_lr: f64,
    pub rank: usize,
    pub dco: DcoConfig,
    pub prior: PriorPreservationConfig,
    pub offset_noise: f64,
    pub seed: u64,
    /// Stop after this many steps instead of `steps`.
    pub early_stop: Option<usize>,
    pub token: Option<TokenConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Dco,
            steps: 2000,
            batch_size: 1,
            adapter_lr: 5e-5,
            embedding_lr: 5e-4,
            rank: 32,
            dco: DcoConfig::default(),
            prior: PriorPreservationConfig::default(),
            offset_noise: 0.0,
            seed: 0,
            early_stop: None,
            token: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for style-like runs: rank 64 and offset noise 0.1.
    pub fn style() -> Self {
        TrainConfig {
            rank: 64,
            offset_noise: 0.1,
            ..TrainConfig::default()
        }
    }

    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Dm => Objective::Dm,
            ObjectiveKind::DmPrior => Objective::DmPrior(self.prior),
            ObjectiveKind::Dco => Objective::Dco(self.dco),
        }
    }

    pub fn effective_steps(&self) -> usize {
        self.early_stop.map_or(self.steps, |e| e.min(self.steps))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.early_stop == Some(0) {
            return Err(Error::invalid("training needs at least one step"));
        }
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::invalid("batch size and rank must be positive"));
        }
        for (name, v) in [("adapter_lr", self.adapter_lr), ("embedding_lr", self.embedding_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.offset_noise >= 0.0) {
            return Err(Error::invalid("offset noise must be >= 0"));
        }
        self.objective().validate()
    }
}

/// Base pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing a sample's condition by NULL.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch_size: 64,
            lr: 2e-3,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

/// Trains a fresh model on samples from every world condition with the
/// noise-prediction loss and returns it frozen.
pub fn pretrain_base(world: &GaussianConceptWorld, spec: &ModelSpec, cfg: &PretrainConfig) -> Result<EpsModel> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("pretraining needs at least one step and a nonempty batch"));
    }
    if !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::invalid("pretraining needs lr > 0 and dropout in [0, 1]"));
    }
    if spec.data_dim != world.dim() {
        return Err(Error::invalid("model and world dimensions differ"));
    }
    let mut model = EpsModel::new(spec.clone(), &world.condition_names(), &mut rng::derived(cfg.seed, 1))?;
    let mut r = rng::derived(cfg.seed, 2);
    let mut params = model.parameters();
    let mut opt = Adam::new(&params, AdamConfig::default());
    let lrs = vec![cfg.lr; params.len()];
    for step in 0..cfg.steps {
        let mut batch = world.sample_training(cfg.batch_size, &mut r);
        for s in &mut batch {
            if rng::uniform(&mut r) < cfg.cond_dropout {
                s.c = Condition::NULL;
            }
        }
        let draws = Draws::sample(&mut r, cfg.batch_size, spec.data_dim, 0.0)?;
        let inputs = LossInputs {
            batch: &batch,
            draws: &draws,
            prior: None,
            reference: None,
        };
        let (loss, grads) = objective_gradients(&model, &Objective::Dm, &inputs)?;
        if !loss.is_finite() {
            log::error!("pretraining diverged at step {step}");
        }
        check_finite(step, loss)?;
        opt.step(&mut params, &grads, &lrs)?;
        model.set_parameters(params.clone())?;
        if step % 1000 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.5}");
        }
    }
    model.freeze();
    Ok(model)
}

/// Samples from a base model under plain conditional sampling, used as the
/// prior set of the prior preservation loss.
pub fn synthesize_prior(
    base: &EpsModel,
    condition: &str,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<ConditionedSample>> {
    let c = base.condition(condition)?;
    let p = CfgPredictor {
        model: base,
        condition: c,
        omega: 1.0,
    };
    Ok(sample(&p, sampler, n)?
        .into_iter()
        .map(|x| ConditionedSample::new(x, c))
        .collect())
}

/// Outcome of one fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Loss before each update, one entry per executed step.
    pub losses: Vec<f64>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub base_checksum: String,
    pub checkpoint: Option<PathBuf>,
}

pub struct FinetuneOutput {
    pub model: AdaptedModel,
    pub record: RunRecord,
}

fn pick(rng: &mut LabRng, set: &[ConditionedSample], n: usize) -> Vec<ConditionedSample> {
    (0..n).map(|_| set[rng.random_range(0..set.len())].clone()).collect()
}

/// Fine-tunes a LoRA adapter (and optional token) on `references`, all
/// carrying the condition named `condition`. Only adapter and token
/// parameters change; the base is checked before and after.
pub fn finetune(
    base: Arc<EpsModel>,
    references: &[Vec<f64>],
    condition: &str,
    prior: &[ConditionedSample],
    cfg: &TrainConfig,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if references.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if cfg.objective == ObjectiveKind::DmPrior && prior.is_empty() {
        return Err(Error::invalid("prior preservation needs a nonempty prior set"));
    }
    let start = Instant::now();
    let base_checksum = base.checksum();
    let adapter = LoraAdapter::for_model(&base, cfg.rank, &mut rng::derived(cfg.seed, 1))?;
    let mut model = AdaptedModel::attach(base.clone(), adapter)?;
    if let Some(tok) = &cfg.token {
        model.add_token(&tok.name, &tok.initializer)?;
    }
    let c = model.condition(condition)?;
    let refs: Vec<ConditionedSample> = references.iter().map(|x| ConditionedSample::new(x.clone(), c)).collect();
    let d = base.spec().data_dim;
    let objective = cfg.objective();
    let mut params = model.parameters();
    let lrs: Vec<f64> = model
        .parameter_groups()
        .iter()
        .map(|g| match g {
            ParamGroup::Embedding => cfg.embedding_lr,
            _ => cfg.adapter_lr,
        })
        .collect();
    let mut opt = Adam::new(&params, AdamConfig::default());
    let mut r = rng::derived(cfg.seed, 2);
    let mut pr = rng::derived(cfg.seed, 3);
    let steps = cfg.effective_steps();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = pick(&mut r, &refs, cfg.batch_size);
        let draws = Draws::sample(&mut r, cfg.batch_size, d, cfg.offset_noise)?;
        let prior_pair = if cfg.objective == ObjectiveKind::DmPrior {
            let pb = pick(&mut pr, prior, cfg.batch_size);
            let pd = Draws::sample(&mut pr, cfg.batch_size, d, cfg.offset_noise)?;
            Some((pb, pd))
        } else {
            None
        };
        let inputs = LossInputs {
            batch: &batch,
            draws: &draws,
            prior: prior_pair.as_ref().map(|(b, d)| (b.as_slice(), d)),
            reference: Some(&base),
        };
        let (loss, grads) = objective_gradients(&model, &objective, &inputs)?;
        check_finite(step, loss)?;
        losses.push(loss);
        opt.step(&mut params, &grads, &lrs)?;
        model.set_parameters(params.clone())?;
    }
    if base.checksum() != base_checksum {
        return Err(Error::FrozenBaseModified);
    }
    Ok(FinetuneOutput {
        model,
        record: RunRecord {
            config: cfg.clone(),
            losses,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
            base_checksum,
            checkpoint: None,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    seed: u64,
    base_checksum: String,
    steps_run: usize,
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    run: RunMeta,
    config: TrainConfig,
}

impl RunRecord {
    /// Writes `run.toml`, `loss.csv` and `adapter.ckpt` under `dir`. The
    /// wall-clock time goes to `wall_clock.txt` so that the other files
    /// depend only on config and seed.
    pub fn save(&mut self, dir: &Path, model: &AdaptedModel) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = RunFile {
            run: RunMeta {
                seed: self.seed,
                base_checksum: self.base_checksum.clone(),
                steps_run: self.losses.len(),
            },
            config: self.config.clone(),
        };
        let text = toml::to_string(&file).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(dir.join("run.toml"), text)?;
        std::fs::write(dir.join("wall_clock.txt"), format!("{}\n", self.wall_clock_secs))?;
        write_loss_csv(&dir.join("loss.csv"), &self.losses)?;
        let ckpt = dir.join("adapter.ckpt");
        AdapterFile::from_model(model).save(&ckpt)?;
        self.checkpoint = Some(ckpt);
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("run.toml");
        let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
        let file: RunFile = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let losses = read_loss_csv(&dir.join("loss.csv"))?;
        if losses.len() != file.run.steps_run {
            return Err(Error::invalid("loss trace length differs from the recorded step count"));
        }
        let ckpt = dir.join("adapter.ckpt");
        Ok(RunRecord {
            config: file.config,
            losses,
            wall_clock_secs: std::fs::read_to_string(dir.join("wall_clock.txt"))
                .ok()
                .and_then(|s| s.trim().parse().ok())
                .unwrap_or(0.0),
            seed: file.run.seed,
            base_checksum: file.run.base_checksum,
            checkpoint: ckpt.exists().then_some(ckpt),
        })
    }
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rd = csv::Reader::from_path(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        out.push(
            rec.get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid("malformed loss row"))?,
        );
    }
    Ok(out)
}

/// Per-time mean squared distance between two models' noise predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Mean of `mean` over the grid.
    pub overall: f64,
}

pub const DEFAULT_NOISE_DRAWS: usize = 100;

/// Default time grid of [`noise_distance_profile`]: 20 stratum midpoints.
pub fn default_profile_grid() -> Vec<f64> {
    stratified_grid(20)
}

/// For every `t` in `grid`, the mean of `|eps_theta(z_t; c, t) -
/// eps_phi(z_t; c', t)|^2` over `n_noise` draws per reference sample, where
/// `c'` is `theta.reference_condition(c)`.
pub fn noise_distance_profile(
    theta: &dyn EpsPredictor,
    phi: &dyn EpsPredictor,
    refs: &[ConditionedSample],
    grid: &[f64],
    n_noise: usize,
    rng: &mut impl Rng,
) -> Result<DeviationReport> {
    if n_noise == 0 {
        return Err(Error::invalid("n_noise must be at least 1"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("empty time grid"));
    }
    if refs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sched = theta.schedule();
    let d = theta.data_dim();
    let rows = refs.len() * n_noise;
    let mut mean = Vec::with_capacity(grid.len());
    let mut std_err = Vec::with_capacity(grid.len());
    for &t in grid {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let eps = rng::normal_vec(rng, rows * d);
        let mut z = Vec::with_capacity(rows * d);
        let mut ct = Vec::with_capacity(rows);
        let mut cp = Vec::with_capacity(rows);
        for (i, r) in refs.iter().enumerate() {
            for j in 0..n_noise {
                let k = (i * n_noise + j) * d;
                z.extend(r.x.iter().zip(&eps[k..k + d]).map(|(x, e)| a * x + s * e));
                ct.push(r.c);
                cp.push(theta.reference_condition(r.c));
            }
        }
        let z = Tensor::new(vec![rows, d], z)?;
        let times = vec![t; rows];
        let et = theta.predict_batch(&z, &times, &ct)?;
        let ep = phi.predict_batch(&z, &times, &cp)?;
        let dist: Vec<f64> = (0..rows)
            .map(|i| et.row(i).iter().zip(ep.row(i)).map(|(u, v)| (u - v) * (u - v)).sum())
            .collect();
        let m = dist.iter().sum::<f64>() / rows as f64;
        let var = if rows > 1 {
            dist.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (rows - 1) as f64
        } else {
            0.0
        };
        mean.push(m);
        std_err.push((var / rows as f64).sqrt());
    }
    let overall = mean.iter().sum::<f64>() / mean.len() as f64;
    Ok(DeviationReport {
        grid: grid.to_vec(),
        mean,
        std_err,
        overall,
    })
}
