//! Fine-tuning objectives: the regular noise-prediction loss, the prior
//! preservation loss and the DCO loss, plus Monte-Carlo estimates of the
//! deviation `Delta` between a fine-tuned and a reference model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Ops, Tape};
use crate::error::{Error, Result};
use crate::model::{forward, Condition, EpsModel, EpsPredictor, Trainable};
use crate::process::{apply_offset_noise, ConditionedSample};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMode {
    /// `beta_t` is the fixed `DcoConfig::beta_t`.
    #[default]
    Constant,
    /// `beta_t = -1/2 beta lambda'_t`.
    Theoretical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcoConfig {
    pub beta: f64,
    pub beta_mode: BetaMode,
    pub beta_t: f64,
}

impl Default for DcoConfig {
    fn default() -> Self {
        DcoConfig {
            beta: 1000.0,
            beta_mode: BetaMode::Constant,
            beta_t: 1000.0,
        }
    }
}

impl DcoConfig {
    /// Constant mode with `beta = beta_t = b`.
    pub fn constant(b: f64) -> Self {
        DcoConfig {
            beta: b,
            beta_mode: BetaMode::Constant,
            beta_t: b,
        }
    }

    pub fn theoretical(beta: f64) -> Self {
        DcoConfig {
            beta,
            beta_mode: BetaMode::Theoretical,
            beta_t: beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.beta_mode == BetaMode::Constant && (!(self.beta_t > 0.0) || !self.beta_t.is_finite()) {
            return Err(Error::invalid(format!("beta_t must be positive, got {}", self.beta_t)));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: f64, sched: &NoiseSchedule) -> f64 {
        match self.beta_mode {
            BetaMode::Constant => self.beta_t,
            BetaMode::Theoretical => -0.5 * self.beta * sched.log_snr_derivative(t),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorPreservationConfig {
    pub lambda_prior: f64,
}

impl Default for PriorPreservationConfig {
    fn default() -> Self {
        PriorPreservationConfig { lambda_prior: 1.0 }
    }
}

impl PriorPreservationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_prior >= 0.0) || !self.lambda_prior.is_finite() {
            return Err(Error::invalid(format!("lambda_prior must be >= 0, got {}", self.lambda_prior)));
        }
        Ok(())
    }
}

/// One `(t, eps)` draw per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub times: Vec<f64>,
    /// `[batch, d]`.
    pub eps: Tensor,
}

impl Draws {
    pub fn new(times: Vec<f64>, eps: Tensor) -> Result<Self> {
        if eps.shape().len() != 2 || eps.rows() != times.len() {
            return Err(Error::Shape {
                op: "draws",
                left: vec![times.len()],
                right: eps.shape().to_vec(),
            });
        }
        if times.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::invalid("draw times must lie in (0, 1)"));
        }
        Ok(Draws { times, eps })
    }

    /// `t ~ U(0, 1)`, `eps ~ N(0, I)` plus optional offset noise.
    pub fn sample(rng: &mut impl Rng, n: usize, d: usize, offset_noise: f64) -> Result<Self> {
        let mut times = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n * d);
        for _ in 0..n {
            let mut t = rng::uniform(rng);
            while t == 0.0 {
                t = rng::uniform(rng);
            }
            times.push(t);
            let e = rng::normal_vec(rng, d);
            if offset_noise > 0.0 {
                eps.extend(apply_offset_noise(&e, offset_noise, rng::normal(rng))?);
            } else {
                eps.extend(e);
            }
        }
        Draws::new(times, Tensor::new(vec![n, d], eps)?)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn check_batch(batch: &[ConditionedSample], draws: &Draws, d: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if draws.len() != batch.len() || draws.eps.cols() != d {
        return Err(Error::Shape {
            op: "loss_batch",
            left: vec![batch.len(), d],
            right: draws.eps.shape().to_vec(),
        });
    }
    if batch.iter().any(|s| s.x.len() != d) {
        return Err(Error::Shape {
            op: "loss_batch",
            left: vec![d],
            right: vec![batch.iter().map(|s| s.x.len()).find(|&l| l != d).unwrap_or(0)],
        });
    }
    Ok(())
}

/// `z_t` for every row, `[batch, d]`.
pub fn noised_batch(batch: &[ConditionedSample], draws: &Draws, sched: &NoiseSchedule) -> Result<Tensor> {
    let d = draws.eps.cols();
    check_batch(batch, draws, d)?;
    let mut out = Vec::with_capacity(batch.len() * d);
    for (i, s) in batch.iter().enumerate() {
        let (a, sg) = (sched.alpha(draws.times[i]), sched.sigma(draws.times[i]));
        out.extend(s.x.iter().zip(draws.eps.row(i)).map(|(x, e)| a * x + sg * e));
    }
    Tensor::new(vec![batch.len(), d], out)
}

fn conditions(batch: &[ConditionedSample]) -> Vec<Condition> {
    batch.iter().map(|s| s.c).collect()
}

/// Per-row `|pred - eps|^2` as `[batch, 1]`.
fn row_errors<O: Ops>(ops: &mut O, pred: &O::Value, eps: &Tensor) -> Result<O::Value> {
    let e = ops.constant(eps.clone());
    let diff = ops.sub(pred, &e)?;
    let sq = ops.square(&diff)?;
    ops.sum_last(&sq)
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::from_parts(vec![n, 1], values)
}

fn dm_from_pred<O: Ops>(
    ops: &mut O,
    pred: &O::Value,
    eps: &Tensor,
    times: &[f64],
    sched: &NoiseSchedule,
) -> Result<O::Value> {
    let err = row_errors(ops, pred, eps)?;
    let w = ops.constant(column(times.iter().map(|&t| sched.loss_weight(t)).collect()));
    let weighted = ops.mul(&err, &w)?;
    ops.mean(&weighted)
}

fn dco_from_pred<O: Ops>(
    ops: &mut O,
    pred: &O::Value,
    eps: &Tensor,
    ref_errors: &[f64],
    betas: &[f64],
) -> Result<O::Value> {
    let err = row_errors(ops, pred, eps)?;
    let lref = ops.constant(column(ref_errors.to_vec()));
    let diff = ops.sub(&err, &lref)?;
    let nb = ops.constant(column(betas.iter().map(|b| -b).collect()));
    let u = ops.mul(&diff, &nb)?;
    let ls = ops.log_sigmoid(&u)?;
    let m = ops.mean(&ls)?;
    ops.scale(&m, -1.0)
}

/// Per-row `|eps_ref(z_t; c', t) - eps|^2` with `c'` the reference
/// condition, evaluated off the tape on the given `z_t`.
fn reference_errors(
    reference: &dyn EpsPredictor,
    z: &Tensor,
    times: &[f64],
    conds: &[Condition],
    eps: &Tensor,
) -> Result<Vec<f64>> {
    let pred = reference.predict_batch(z, times, conds)?;
    if pred.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "dco_reference",
            left: eps.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    Ok(row_errors(&mut Eval, &pred, eps)?.into_data())
}

/// `-log sigmoid(-beta_t (l_theta - l_phi))` for one draw.
pub fn dco_term(l_theta: f64, l_phi: f64, beta_t: f64) -> f64 {
    -tensor::log_sigmoid(-beta_t * (l_theta - l_phi))
}

/// Mean over the batch of `(-1/2 w_t lambda'_t) |eps_hat - eps|^2`.
pub fn dm_loss(model: &dyn EpsPredictor, batch: &[ConditionedSample], draws: &Draws) -> Result<f64> {
    let sched = model.schedule();
    let z = noised_batch(batch, draws, &sched)?;
    let pred = model.predict_batch(&z, &draws.times, &conditions(batch))?;
    dm_from_pred(&mut Eval, &pred, &draws.eps, &draws.times, &sched)?.item()
}

/// `dm_loss(ref) + lambda_prior * dm_loss(prior)`.
pub fn prior_preservation_loss(
    model: &dyn EpsPredictor,
    ref_batch: &[ConditionedSample],
    ref_draws: &Draws,
    prior_batch: &[ConditionedSample],
    prior_draws: &Draws,
    cfg: &PriorPreservationConfig,
) -> Result<f64> {
    cfg.validate()?;
    let a = dm_loss(model, ref_batch, ref_draws)?;
    let b = dm_loss(model, prior_batch, prior_draws)?;
    Ok(a + cfg.lambda_prior * b)
}

fn require_frozen(reference: &EpsModel) -> Result<()> {
    if reference.is_frozen() {
        Ok(())
    } else {
        Err(Error::NotFrozen)
    }
}

/// Mean over the batch of `-log sigmoid(-beta_t (l_theta - l_phi))`. Both
/// models see the same `z_t`; the reference model sees
/// `model.reference_condition(c)`.
pub fn dco_loss(
    model: &dyn EpsPredictor,
    reference: &EpsModel,
    batch: &[ConditionedSample],
    draws: &Draws,
    cfg: &DcoConfig,
) -> Result<f64> {
    require_frozen(reference)?;
    cfg.validate()?;
    let sched = model.schedule();
    let z = noised_batch(batch, draws, &sched)?;
    let conds = conditions(batch);
    let ref_conds: Vec<Condition> = conds.iter().map(|&c| model.reference_condition(c)).collect();
    let lref = reference_errors(reference, &z, &draws.times, &ref_conds, &draws.eps)?;
    let pred = model.predict_batch(&z, &draws.times, &conds)?;
    if pred.shape() != draws.eps.shape() {
        return Err(Error::Shape {
            op: "dco_loss",
            left: draws.eps.shape().to_vec(),
            right: pred.shape().to_vec(),
        });
    }
    let betas: Vec<f64> = draws.times.iter().map(|&t| cfg.beta_at(t, &sched)).collect();
    dco_from_pred(&mut Eval, &pred, &draws.eps, &lref, &betas)?.item()
}

/// `l_theta`, `l_phi`, `beta_t` for one sample and draw.
fn single_terms(
    model: &dyn EpsPredictor,
    reference: &EpsModel,
    sample: &ConditionedSample,
    t: f64,
    eps: &[f64],
    cfg: &DcoConfig,
) -> Result<(f64, f64, f64)> {
    require_frozen(reference)?;
    cfg.validate()?;
    let draws = Draws::new(vec![t], Tensor::new(vec![1, eps.len()], eps.to_vec())?)?;
    let sched = model.schedule();
    let batch = std::slice::from_ref(sample);
    let z = noised_batch(batch, &draws, &sched)?;
    let lref = reference_errors(reference, &z, &draws.times, &[model.reference_condition(sample.c)], &draws.eps)?;
    let lth = reference_errors(model, &z, &draws.times, &[sample.c], &draws.eps)?;
    Ok((lth[0], lref[0], cfg.beta_at(t, &sched)))
}

/// `1 - sigmoid(d_t)` with `d_t = -beta_t (l_theta - l_phi)`: the factor by
/// which the DCO gradient rescales the plain noise-prediction gradient
/// (up to `beta_t`).
pub fn dco_gradient_scale(
    model: &dyn EpsPredictor,
    reference: &EpsModel,
    sample: &ConditionedSample,
    t: f64,
    eps: &[f64],
    cfg: &DcoConfig,
) -> Result<f64> {
    let (lt, lp, b) = single_terms(model, reference, sample, t, eps, cfg)?;
    Ok(1.0 - tensor::sigmoid(-b * (lt - lp)))
}

/// Outcome of comparing the autodiff DCO gradient to
/// `beta_t (1 - sigmoid(d_t)) grad l_theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizationCheck {
    pub scale: f64,
    pub beta_t: f64,
    pub max_relative_error: f64,
}

/// Checks the DCO gradient factorization for one sample and draw.
pub fn check_gradient_factorization<M: Trainable>(
    model: &M,
    reference: &EpsModel,
    sample: &ConditionedSample,
    t: f64,
    eps: &[f64],
    cfg: &DcoConfig,
) -> Result<FactorizationCheck> {
    let (lt, lp, b) = single_terms(model, reference, sample, t, eps, cfg)?;
    let scale = 1.0 - tensor::sigmoid(-b * (lt - lp));
    let draws = Draws::new(vec![t], Tensor::new(vec![1, eps.len()], eps.to_vec())?)?;
    let batch = std::slice::from_ref(sample);
    let inputs = LossInputs {
        batch,
        draws: &draws,
        prior: None,
        reference: Some(reference),
    };
    let (_, g_dco) = objective_gradients(model, &Objective::Dco(*cfg), &inputs)?;
    let (_, g_err) = objective_gradients(model, &Objective::Dm, &inputs)?;
    // With epsilon weighting the dm loss of one row is exactly l_theta;
    // other weightings multiply it by a known factor.
    let w = model.schedule().loss_weight(t);
    let mut worst: f64 = 0.0;
    let mut norm: f64 = 0.0;
    for (gd, ge) in g_dco.iter().zip(&g_err) {
        for (x, y) in gd.data().iter().zip(ge.data()) {
            let want = b * scale * y / w;
            worst = worst.max((x - want).abs());
            norm = norm.max(want.abs());
        }
    }
    Ok(FactorizationCheck {
        scale,
        beta_t: b,
        max_relative_error: if norm > 0.0 { worst / norm } else { worst },
    })
}

/// Which loss a fine-tuning run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    Dm,
    DmPrior(PriorPreservationConfig),
    Dco(DcoConfig),
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Dm => "dm",
            Objective::DmPrior(_) => "dm-prior",
            Objective::Dco(_) => "dco",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Dm => Ok(()),
            Objective::DmPrior(p) => p.validate(),
            Objective::Dco(d) => d.validate(),
        }
    }
}

/// Everything one objective evaluation consumes.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub batch: &'a [ConditionedSample],
    pub draws: &'a Draws,
    /// Prior batch and its own draws, for the prior preservation loss.
    pub prior: Option<(&'a [ConditionedSample], &'a Draws)>,
    /// Frozen reference model, for the DCO loss.
    pub reference: Option<&'a EpsModel>,
}

fn objective_on<M: Trainable, O: Ops>(
    ops: &mut O,
    model: &M,
    params: &[O::Value],
    objective: &Objective,
    inputs: &LossInputs<'_>,
) -> Result<O::Value> {
    objective.validate()?;
    let spec = model.model_spec();
    let sched = spec.schedule;
    let net = model.bind(ops, params)?;
    let predict = |ops: &mut O, batch: &[ConditionedSample], draws: &Draws| -> Result<(Tensor, O::Value)> {
        let z = noised_batch(batch, draws, &sched)?;
        let zc = ops.constant(z.clone());
        let pred = forward(ops, spec, &net, &zc, &draws.times, &conditions(batch))?;
        Ok((z, pred))
    };
    match objective {
        Objective::Dm => {
            let (_, pred) = predict(ops, inputs.batch, inputs.draws)?;
            dm_from_pred(ops, &pred, &inputs.draws.eps, &inputs.draws.times, &sched)
        }
        Objective::DmPrior(cfg) => {
            let (prior_batch, prior_draws) = inputs
                .prior
                .ok_or_else(|| Error::invalid("prior preservation needs a prior batch"))?;
            let (_, pred) = predict(ops, inputs.batch, inputs.draws)?;
            let a = dm_from_pred(ops, &pred, &inputs.draws.eps, &inputs.draws.times, &sched)?;
            let (_, pred_p) = predict(ops, prior_batch, prior_draws)?;
            let b = dm_from_pred(ops, &pred_p, &prior_draws.eps, &prior_draws.times, &sched)?;
            let b = ops.scale(&b, cfg.lambda_prior)?;
            ops.add(&a, &b)
        }
        Objective::Dco(cfg) => {
            let reference = inputs
                .reference
                .ok_or_else(|| Error::invalid("the DCO loss needs a reference model"))?;
            require_frozen(reference)?;
            let (z, pred) = predict(ops, inputs.batch, inputs.draws)?;
            let conds = conditions(inputs.batch);
            let ref_conds: Vec<Condition> = conds.iter().map(|&c| model.reference_condition(c)).collect();
            let lref = reference_errors(reference, &z, &inputs.draws.times, &ref_conds, &inputs.draws.eps)?;
            let betas: Vec<f64> = inputs.draws.times.iter().map(|&t| cfg.beta_at(t, &sched)).collect();
            dco_from_pred(ops, &pred, &inputs.draws.eps, &lref, &betas)
        }
    }
}

/// Objective value without building a tape.
pub fn evaluate_objective<M: Trainable>(model: &M, objective: &Objective, inputs: &LossInputs<'_>) -> Result<f64> {
    let params = model.parameters();
    objective_on(&mut Eval, model, &params, objective, inputs)?.item()
}

/// Objective value and its gradient with respect to every trainable
/// parameter, in [`Trainable::parameters`] order.
pub fn objective_gradients<M: Trainable>(
    model: &M,
    objective: &Objective,
    inputs: &LossInputs<'_>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let leaves: Vec<_> = model.parameters().into_iter().map(|p| tape.leaf(p)).collect();
    let loss = objective_on(&mut tape, model, &leaves, objective, inputs)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, leaves.iter().map(|&v| grads.get(v)).collect()))
}

/// Mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// Number of stratified time points used by default.
pub const DEFAULT_GRID_POINTS: usize = 64;

/// Midpoints `(i + 1/2) / n` of `n` equal strata of `(0, 1)`.
pub fn stratified_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Monte-Carlo estimates sharing one set of draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeviationEstimates {
    /// `Delta = 1/2 E[lambda'_t (l_theta - l_phi)]`.
    pub delta: Estimate,
    /// Mean DCO loss on the same draws, if a DCO config was given.
    pub dco_loss: Option<Estimate>,
}

/// Stratified estimates over `grid`: for every sample and grid time,
/// `n_draws` noise draws shared by both models.
pub fn deviation_estimates(
    model: &dyn EpsPredictor,
    reference: &dyn EpsPredictor,
    batch: &[ConditionedSample],
    grid: &[f64],
    n_draws: usize,
    dco: Option<&DcoConfig>,
    rng: &mut impl Rng,
) -> Result<DeviationEstimates> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be at least 1"));
    }
    if batch.is_empty() || grid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(cfg) = dco {
        cfg.validate()?;
    }
    let sched = model.schedule();
    let d = model.data_dim();
    if reference.data_dim() != d {
        return Err(Error::Shape {
            op: "delta_estimate",
            left: vec![d],
            right: vec![reference.data_dim()],
        });
    }
    let strata = (batch.len() * grid.len()) as f64;
    let mut acc_delta = Moments::default();
    let mut acc_dco = Moments::default();
    let mut all_delta = Vec::new();
    let mut all_dco = Vec::new();
    for s in batch {
        let rc = model.reference_condition(s.c);
        for &t in grid {
            let rows: Vec<ConditionedSample> = vec![s.clone(); n_draws];
            let draws = Draws::new(vec![t; n_draws], rng::normal_tensor(rng, &[n_draws, d]))?;
            let z = noised_batch(&rows, &draws, &sched)?;
            let lt = reference_errors(model, &z, &draws.times, &vec![s.c; n_draws], &draws.eps)?;
            let lp = reference_errors(reference, &z, &draws.times, &vec![rc; n_draws], &draws.eps)?;
            let lam = sched.log_snr_derivative(t);
            let dv: Vec<f64> = lt.iter().zip(&lp).map(|(a, b)| 0.5 * lam * (a - b)).collect();
            acc_delta.push_stratum(&dv);
            all_delta.extend_from_slice(&dv);
            if let Some(cfg) = dco {
                let b = cfg.beta_at(t, &sched);
                let gv: Vec<f64> = lt.iter().zip(&lp).map(|(a, c)| dco_term(*a, *c, b)).collect();
                acc_dco.push_stratum(&gv);
                all_dco.extend_from_slice(&gv);
            }
        }
    }
    let finish = |m: &Moments, all: &[f64]| -> Estimate {
        let value = m.sum_means / strata;
        let std_err = if n_draws > 1 {
            m.sum_var_of_mean.sqrt() / strata
        } else {
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len().max(2) - 1) as f64;
            (var / all.len() as f64).sqrt()
        };
        Estimate { value, std_err }
    };
    Ok(DeviationEstimates {
        delta: finish(&acc_delta, &all_delta),
        dco_loss: dco.map(|_| finish(&acc_dco, &all_dco)),
    })
}

#[derive(Default)]
struct Moments {
    sum_means: f64,
    sum_var_of_mean: f64,
}

impl Moments {
    fn push_stratum(&mut self, v: &[f64]) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        self.sum_means += mean;
        if v.len() > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            self.sum_var_of_mean += var / n;
        }
    }
}

/// `Delta` estimate on the default 64-point stratified grid with `n_draws`
/// noise draws per sample and grid time.
pub fn delta_estimate(
    model: &dyn EpsPredictor,
    reference: &dyn EpsPredictor,
    batch: &[ConditionedSample],
    n_draws: usize,
    rng: &mut impl Rng,
) -> Result<Estimate> {
    let grid = stratified_grid(DEFAULT_GRID_POINTS);
    Ok(deviation_estimates(model, reference, batch, &grid, n_draws, None, rng)?.delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdaptedModel, LoraAdapter};
    use crate::model::ModelSpec;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn base() -> Arc<EpsModel> {
        let mut m = EpsModel::new(
            ModelSpec {
                hidden: vec![8],
                ..ModelSpec::default()
            },
            &["a".into(), "b".into()],
            &mut rng::seeded(1),
        )
        .unwrap();
        m.randomize_output_layer(0.3, &mut rng::seeded(2)).unwrap();
        m.freeze();
        Arc::new(m)
    }

    fn batch() -> Vec<ConditionedSample> {
        vec![
            ConditionedSample::new(vec![0.5, -1.0], Condition(1)),
            ConditionedSample::new(vec![-0.2, 0.8], Condition(2)),
        ]
    }

    fn draws() -> Draws {
        Draws::new(vec![0.3, 0.7], Tensor::new(vec![2, 2], vec![0.1, -0.4, 1.2, 0.3]).unwrap()).unwrap()
    }

    struct Fixed(Vec<f64>);

    impl EpsPredictor for Fixed {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn schedule(&self) -> NoiseSchedule {
            NoiseSchedule::cosine()
        }
        fn predict_batch(&self, z: &Tensor, _: &[f64], _: &[Condition]) -> Result<Tensor> {
            let mut out = Vec::new();
            for _ in 0..z.rows() {
                out.extend_from_slice(&self.0);
            }
            Tensor::new(z.shape().to_vec(), out)
        }
    }

    #[test]
    fn dm_loss_trivial_cases() {
        let s = vec![ConditionedSample::new(vec![0.0, 0.0], Condition(1))];
        let d = Draws::new(vec![0.5], Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(dm_loss(&Fixed(vec![1.0, 0.0]), &s, &d).unwrap(), 1.0);
        assert_eq!(dm_loss(&Fixed(vec![0.0, 0.0]), &s, &d).unwrap(), 0.0);
        assert!(matches!(dm_loss(&Fixed(vec![0.0, 0.0]), &[], &d), Err(Error::EmptyBatch)));
    }

    #[test]
    fn dm_loss_matches_scalar_recomputation() {
        let b = base();
        let sched = NoiseSchedule::cosine();
        let got = dm_loss(b.as_ref(), &batch(), &draws()).unwrap();
        let mut total = 0.0;
        for (i, s) in batch().iter().enumerate() {
            let t = draws().times[i];
            let e = draws().eps.row(i).to_vec();
            let z: Vec<f64> = (0..2).map(|k| sched.alpha(t) * s.x[k] + sched.sigma(t) * e[k]).collect();
            let p = b.predict_eps(&z, s.c, t).unwrap();
            total += (0..2).map(|k| (p[k] - e[k]).powi(2)).sum::<f64>();
        }
        assert!((got - total / 2.0).abs() < 1e-10);
    }

    #[test]
    fn prior_preservation_arithmetic() {
        let b = base();
        let l = dm_loss(b.as_ref(), &batch(), &draws()).unwrap();
        let cfg0 = PriorPreservationConfig { lambda_prior: 0.0 };
        let p0 = prior_preservation_loss(b.as_ref(), &batch(), &draws(), &batch(), &draws(), &cfg0).unwrap();
        assert_eq!(p0, l);
        let cfg1 = PriorPreservationConfig { lambda_prior: 1.0 };
        let p1 = prior_preservation_loss(b.as_ref(), &batch(), &draws(), &batch(), &draws(), &cfg1).unwrap();
        assert_eq!(p1, 2.0 * l);
        let bad = PriorPreservationConfig { lambda_prior: -1.0 };
        assert!(prior_preservation_loss(b.as_ref(), &batch(), &draws(), &batch(), &draws(), &bad).is_err());
        assert!((0.2 + 0.5 * 0.4 - 0.4f64).abs() < 1e-15);
    }

    #[test]
    fn dco_scalar_cases() {
        assert_eq!(dco_term(0.3, 0.3, 1000.0), std::f64::consts::LN_2);
        assert!((dco_term(1.0, 0.0, 1.0) - 1.313_261_687_518_222_8).abs() < 1e-15);
        let v = dco_term(0.0, 0.01, 1000.0);
        assert!((v - 4.539_889_921_686_465e-5).abs() < 1e-18, "{v}");
    }

    #[test]
    fn dco_identity_point() {
        let b = base();
        let a = LoraAdapter::for_model(&b, 4, &mut rng::seeded(3)).unwrap();
        let m = AdaptedModel::attach(b.clone(), a).unwrap();
        let l = dco_loss(&m, &b, &batch(), &draws(), &DcoConfig::default()).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let est = delta_estimate(&m, b.as_ref(), &batch(), 2, &mut rng::seeded(4)).unwrap();
        assert_eq!(est.value, 0.0);
        let scale = dco_gradient_scale(&m, &b, &batch()[0], 0.4, &[0.2, 0.1], &DcoConfig::default()).unwrap();
        assert_eq!(scale, 0.5);
    }

    #[test]
    fn dco_requires_frozen_reference() {
        let b = base();
        let unfrozen = EpsModel::from_parts(b.spec().clone(), b.layers().to_vec(), b.conditions().clone()).unwrap();
        assert!(matches!(
            dco_loss(b.as_ref(), &unfrozen, &batch(), &draws(), &DcoConfig::default()),
            Err(Error::NotFrozen)
        ));
    }

    #[test]
    fn swapped_draws_change_the_loss() {
        let b = base();
        let mut a = LoraAdapter::for_model(&b, 4, &mut rng::seeded(3)).unwrap();
        a = a.with_scale(1.0);
        let mut m = AdaptedModel::attach(b.clone(), a).unwrap();
        let params: Vec<Tensor> = m
            .parameters()
            .into_iter()
            .map(|p| p.map("t", |v| v + 0.05).unwrap())
            .collect();
        m.set_parameters(params).unwrap();
        let cfg = DcoConfig::constant(1.0);
        let same = dco_loss(&m, &b, &batch(), &draws(), &cfg).unwrap();
        // Decoupled: theta on one draw set, phi on another.
        let other = Draws::new(vec![0.6, 0.2], Tensor::new(vec![2, 2], vec![-0.5, 0.9, 0.0, -1.1]).unwrap()).unwrap();
        let sched = NoiseSchedule::cosine();
        let zt = noised_batch(&batch(), &draws(), &sched).unwrap();
        let zp = noised_batch(&batch(), &other, &sched).unwrap();
        let conds = conditions(&batch());
        let lt = reference_errors(&m, &zt, &draws().times, &conds, &draws().eps).unwrap();
        let lp = reference_errors(b.as_ref(), &zp, &other.times, &conds, &other.eps).unwrap();
        let decoupled = (dco_term(lt[0], lp[0], 1.0) + dco_term(lt[1], lp[1], 1.0)) / 2.0;
        assert!((same - decoupled).abs() > 1e-6);
    }

    #[test]
    fn gradient_scale_saturates() {
        let b = base();
        let worse = Fixed(vec![50.0, 50.0]);
        let s = dco_gradient_scale(&worse, &b, &batch()[0], 0.5, &[0.1, 0.2], &DcoConfig::default()).unwrap();
        assert!(s > 1.0 - 1e-12);
    }

    #[test]
    fn factorization_holds() {
        let b = base();
        let mut m = AdaptedModel::attach(b.clone(), LoraAdapter::for_model(&b, 4, &mut rng::seeded(5)).unwrap()).unwrap();
        let mut r = rng::seeded(6);
        let params: Vec<Tensor> = m
            .parameters()
            .into_iter()
            .map(|p| {
                let n = p.numel();
                Tensor::new(p.shape().to_vec(), rng::normal_vec(&mut r, n).iter().map(|v| 0.1 * v).collect()).unwrap()
            })
            .collect();
        m.set_parameters(params).unwrap();
        for cfg in [DcoConfig::constant(1.0), DcoConfig::constant(20.0), DcoConfig::theoretical(0.5)] {
            let c = check_gradient_factorization(&m, &b, &batch()[1], 0.35, &[0.4, -0.9], &cfg).unwrap();
            assert!(c.max_relative_error < 1e-8, "{c:?}");
            assert!(c.scale > 0.0 && c.scale < 1.0);
        }
    }

    #[test]
    fn tape_and_eval_objectives_agree() {
        let b = base();
        let m = AdaptedModel::attach(b.clone(), LoraAdapter::for_model(&b, 4, &mut rng::seeded(5)).unwrap()).unwrap();
        let d = draws();
        let inputs = LossInputs {
            batch: &batch(),
            draws: &d,
            prior: Some((&batch(), &d)),
            reference: Some(&b),
        };
        for obj in [
            Objective::Dm,
            Objective::DmPrior(PriorPreservationConfig::default()),
            Objective::Dco(DcoConfig::default()),
        ] {
            let v = evaluate_objective(&m, &obj, &inputs).unwrap();
            let (g, _) = objective_gradients(&m, &obj, &inputs).unwrap();
            assert_eq!(v, g);
        }
        assert_eq!(
            evaluate_objective(&m, &Objective::Dm, &inputs).unwrap(),
            dm_loss(&m, &batch(), &d).unwrap()
        );
    }

    #[test]
    fn delta_rejects_zero_draws() {
        let b = base();
        assert!(delta_estimate(b.as_ref(), b.as_ref(), &batch(), 0, &mut rng::seeded(1)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DcoConfig::constant(0.0).validate().is_err());
        assert!(DcoConfig::default().validate().is_ok());
        let s = NoiseSchedule::cosine();
        let th = DcoConfig::theoretical(2.0);
        for i in 1..100 {
            assert!(th.beta_at(i as f64 / 100.0, &s) > 0.0);
        }
        assert_eq!(DcoConfig::default().beta_at(0.3, &s), 1000.0);
    }

    proptest! {
        #[test]
        fn dco_is_monotone_in_theta_error(
            lp in 0.0f64..10.0,
            a in 0.0f64..10.0,
            step in 1e-6f64..1.0,
            beta in 0.1f64..2000.0,
        ) {
            let lo = dco_term(a, lp, beta);
            let hi = dco_term(a + step, lp, beta);
            prop_assert!(hi >= lo);
        }
    }
}
