//! Deterministic DDIM sampling with classifier-free and consistency
//! guidance.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Condition, EpsPredictor};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Guidance scales. With `plain_cfg` set, sampling uses classifier-free
/// guidance on the fine-tuned model alone with scale `omega_text`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega_text: f64,
    pub omega_con: f64,
    pub plain_cfg: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega_text: 7.5,
            omega_con: 3.0,
            plain_cfg: false,
        }
    }
}

impl GuidanceConfig {
    pub fn consistency(omega_text: f64, omega_con: f64) -> Self {
        GuidanceConfig {
            omega_text,
            omega_con,
            plain_cfg: false,
        }
    }

    pub fn plain(omega: f64) -> Self {
        GuidanceConfig {
            omega_text: omega,
            omega_con: 0.0,
            plain_cfg: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("omega_text", self.omega_text), ("omega_con", self.omega_con)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Step count, time range, and seed of the initial draw.
///
/// The grid starts at `t_max = 0.98` by default: under the cosine schedule
/// `alpha_t` falls to about 1.6e-3 at `t = 0.999`, and the first update then
/// multiplies any error in the predicted noise by `alpha_s / alpha_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            t_max: 0.98,
            t_min: 1e-3,
            seed: 0,
        }
    }
}

/// Below this `alpha_t` the data estimate `(z - sigma eps) / alpha` is
/// treated as undefined.
pub const MIN_ALPHA: f64 = 1e-9;

impl SamplerConfig {
    /// `steps + 1` times, uniform in `t`, from `t_max` down to `t_min`.
    pub fn time_grid(&self) -> Result<Vec<f64>> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < t_min < t_max <= 1, got {} and {}",
                self.t_min, self.t_max
            )));
        }
        let n = self.steps as f64;
        Ok((0..=self.steps)
            .map(|i| self.t_max + (self.t_min - self.t_max) * (i as f64 / n))
            .collect())
    }
}

fn combine(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let (w0, t0) = terms[0];
    let mut acc = t0.scale(w0)?;
    for (w, t) in &terms[1..] {
        acc = acc.add(&t.scale(*w)?)?;
    }
    Ok(acc)
}

/// `omega eps(z; c) + (1 - omega) eps(z; NULL)`. Exactly the conditional
/// prediction at `omega = 1` and the unconditional one at `omega = 0`.
pub fn cfg_eps(model: &dyn EpsPredictor, z: &Tensor, c: Condition, t: f64, omega: f64) -> Result<Tensor> {
    let ec = model.predict(z, c, t)?;
    let en = model.predict(z, Condition::NULL, t)?;
    combine(&[(omega, &ec), (1.0 - omega, &en)])
}

/// `eps_phi(NULL) + omega_text (eps_phi(c') - eps_phi(NULL))
///  + omega_con (eps_theta(c) - eps_phi(c'))` with
/// `c' = theta.reference_condition(c)`.
///
/// Evaluated as `omega_con eps_theta + (omega_text - omega_con) eps_phi(c')
/// + (1 - omega_text) eps_phi(NULL)`, which returns `eps_theta` exactly at
/// `omega_text = omega_con = 1`; at `omega_con = 0` it defers to
/// [`cfg_eps`] on `phi`.
pub fn consistency_guided_eps(
    theta: &dyn EpsPredictor,
    phi: &dyn EpsPredictor,
    z: &Tensor,
    c: Condition,
    t: f64,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if theta.data_dim() != phi.data_dim() {
        return Err(Error::Shape {
            op: "consistency_guided_eps",
            left: vec![theta.data_dim()],
            right: vec![phi.data_dim()],
        });
    }
    let cp = theta.reference_condition(c);
    if cfg.omega_con == 0.0 {
        return cfg_eps(phi, z, cp, t, cfg.omega_text);
    }
    let et = theta.predict(z, c, t)?;
    let ec = phi.predict(z, cp, t)?;
    let en = phi.predict(z, Condition::NULL, t)?;
    combine(&[
        (cfg.omega_con, &et),
        (cfg.omega_text - cfg.omega_con, &ec),
        (1.0 - cfg.omega_text, &en),
    ])
}

/// A noise predictor with its condition and guidance already fixed.
pub trait GuidedPredictor: Send + Sync {
    fn data_dim(&self) -> usize;

    fn schedule(&self) -> NoiseSchedule;

    /// `z` is `[n, d]`.
    fn eps(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

/// Plain classifier-free guidance on one model.
pub struct CfgPredictor<'a> {
    pub model: &'a dyn EpsPredictor,
    pub condition: Condition,
    pub omega: f64,
}

impl GuidedPredictor for CfgPredictor<'_> {
    fn data_dim(&self) -> usize {
        self.model.data_dim()
    }

    fn schedule(&self) -> NoiseSchedule {
        self.model.schedule()
    }

    fn eps(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        cfg_eps(self.model, z, self.condition, t, self.omega)
    }
}

/// Consistency guidance between a fine-tuned and a reference model.
pub struct ConsistencyPredictor<'a> {
    pub theta: &'a dyn EpsPredictor,
    pub phi: &'a dyn EpsPredictor,
    pub condition: Condition,
    pub guidance: GuidanceConfig,
}

impl GuidedPredictor for ConsistencyPredictor<'_> {
    fn data_dim(&self) -> usize {
        self.theta.data_dim()
    }

    fn schedule(&self) -> NoiseSchedule {
        self.theta.schedule()
    }

    fn eps(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        consistency_guided_eps(self.theta, self.phi, z, self.condition, t, &self.guidance)
    }
}

/// Predictor selected by `guidance`: plain CFG on `theta`, or consistency
/// guidance against `phi`.
pub fn guided<'a>(
    theta: &'a dyn EpsPredictor,
    phi: &'a dyn EpsPredictor,
    condition: Condition,
    guidance: GuidanceConfig,
) -> Box<dyn GuidedPredictor + 'a> {
    if guidance.plain_cfg {
        Box::new(CfgPredictor {
            model: theta,
            condition,
            omega: guidance.omega_text,
        })
    } else {
        Box::new(ConsistencyPredictor {
            theta,
            phi,
            condition,
            guidance,
        })
    }
}

/// Deterministic DDIM from `z ~ N(0, I)` drawn with `cfg.seed`:
/// `x_hat = (z_t - sigma_t eps_hat) / alpha_t`,
/// `z_s = alpha_s x_hat + sigma_s eps_hat`, then the final `x_hat` at
/// `t_min`. Returns `n` rows of length `d`.
pub fn sample(eps_fn: &dyn GuidedPredictor, cfg: &SamplerConfig, n: usize) -> Result<Vec<Vec<f64>>> {
    let d = eps_fn.data_dim();
    let mut r = rng::seeded(cfg.seed);
    let z0 = rng::normal_tensor(&mut r, &[n.max(1), d]);
    if n == 0 {
        return Ok(Vec::new());
    }
    let x = sample_from(eps_fn, cfg, z0)?;
    Ok((0..n).map(|i| x.row(i).to_vec()).collect())
}

/// DDIM starting from a given `[n, d]` latent at `t_max`.
pub fn sample_from(eps_fn: &dyn GuidedPredictor, cfg: &SamplerConfig, z: Tensor) -> Result<Tensor> {
    let sched = eps_fn.schedule();
    let grid = cfg.time_grid()?;
    let x_hat = |z: &Tensor, t: f64| -> Result<(Tensor, Tensor)> {
        let a = sched.alpha(t);
        if !(a > MIN_ALPHA) {
            return Err(Error::invalid(format!("alpha_t vanishes at t = {t}")));
        }
        let e = eps_fn.eps(z, t)?;
        let x = z.sub(&e.scale(sched.sigma(t))?)?.scale(1.0 / a)?;
        Ok((x, e))
    };
    let mut z = z;
    for w in grid.windows(2) {
        let (x, e) = x_hat(&z, w[0])?;
        z = x.scale(sched.alpha(w[1]))?.add(&e.scale(sched.sigma(w[1]))?)?;
    }
    Ok(x_hat(&z, *grid.last().expect("nonempty grid"))?.0)
}

/// One row of a sample dump.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub seed: u64,
    pub condition: String,
    pub omega_text: f64,
    pub omega_con: f64,
    pub x: Vec<f64>,
}

/// CSV with columns `seed, condition, omega_text, omega_con, x0, x1, ...`.
pub fn write_samples_csv(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let d = records.first().map_or(0, |r| r.x.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string(), "condition".into(), "omega_text".into(), "omega_con".into()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for r in records {
        if r.x.len() != d {
            return Err(Error::invalid("sample rows differ in dimension"));
        }
        let mut row = vec![r.seed.to_string(), r.condition.clone(), r.omega_text.to_string(), r.omega_con.to_string()];
        row.extend(r.x.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::invalid(format!("bad number `{s}`"))) };
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(Error::invalid("sample row has too few columns"));
        }
        out.push(SampleRecord {
            seed: rec[0].parse().map_err(|_| Error::invalid("bad seed"))?,
            condition: rec[1].to_string(),
            omega_text: parse(&rec[2])?,
            omega_con: parse(&rec[3])?,
            x: (4..rec.len()).map(|i| parse(&rec[i])).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
