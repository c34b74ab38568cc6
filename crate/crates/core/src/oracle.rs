//! Closed-form ground truth for Gaussian concept worlds.
//!
//! Every condition of a world is a Gaussian mixture, so the forward-noised
//! marginals, the optimal noise predictor and all KL divergences between
//! Gaussians are available exactly. The rest of the crate is checked
//! against these.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Deserialize;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Condition, EpsPredictor};
use crate::process::ConditionedSample;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    m.clone().cholesky().ok_or(Error::NotPositiveDefinite(what))
}

fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape {
            op: what,
            left: vec![m.nrows(), m.nrows()],
            right: vec![m.nrows(), m.ncols()],
        });
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::invalid(format!("{what} must be symmetric")));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&cov, "covariance")?;
        if cov.nrows() != mean.len() {
            return Err(Error::Shape {
                op: "gaussian",
                left: vec![mean.len()],
                right: vec![cov.nrows(), cov.ncols()],
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        let chol = cholesky(&cov, "covariance")?.l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Gaussian {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    pub fn isotropic(mean: &[f64], std: f64) -> Result<Self> {
        let d = mean.len();
        Gaussian::new(DVector::from_column_slice(mean), DMatrix::identity(d, d) * (std * std))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let n = self.dim();
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("cholesky factor is invertible");
        linv.transpose() * linv
    }

    /// `(x - m)^T S^-1 (x - m)`.
    pub fn mahalanobis2(&self, x: &DVector<f64>) -> f64 {
        let r = self
            .chol
            .solve_lower_triangular(&(x - &self.mean))
            .expect("cholesky factor is invertible");
        r.norm_squared()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis2(&x))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let e = DVector::from_vec(rng::normal_vec(rng, self.dim()));
        (&self.mean + &self.chol * e).iter().copied().collect()
    }
}

/// Closed-form `KL(N(m1, s1) || N(m2, s2))`.
pub fn gaussian_kl(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let p = Gaussian::new(m1.clone(), s1.clone())?;
    let q = Gaussian::new(m2.clone(), s2.clone())?;
    if p.dim() != q.dim() {
        return Err(Error::Shape {
            op: "gaussian_kl",
            left: vec![p.dim()],
            right: vec![q.dim()],
        });
    }
    let d = p.dim() as f64;
    let prec2 = q.precision();
    let trace = (&prec2 * s1).trace();
    let kl = 0.5 * (trace + q.mahalanobis2(m1) - d + q.log_det - p.log_det);
    Ok(kl.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid("mixture needs one weight per component"));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("mixture components differ in dimension"));
        }
        Ok(Mixture {
            weights,
            components,
        })
    }

    pub fn single(g: Gaussian) -> Self {
        Mixture {
            weights: vec![1.0],
            components: vec![g],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, g)| w.ln() + g.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.components[k].sample(rng)
    }

    /// Marginal of `z_t = alpha x + sigma eps`: components
    /// `N(alpha mu, alpha^2 S + sigma^2 I)`.
    pub fn noised(&self, t: f64, sched: &NoiseSchedule) -> Result<Mixture> {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let d = self.dim();
        let components = self
            .components
            .iter()
            .map(|g| Gaussian::new(g.mean() * a, g.cov() * (a * a) + DMatrix::identity(d, d) * (s * s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mixture {
            weights: self.weights.clone(),
            components,
        })
    }

    /// Optimal noise prediction
    /// `sigma_t sum_k r_k(z) C_k^-1 (z - alpha_t mu_k)` with responsibilities
    /// `r_k` under the noised marginal.
    pub fn optimal_eps(&self, z: &[f64], t: f64, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Shape {
                op: "optimal_eps",
                left: vec![self.dim()],
                right: vec![z.len()],
            });
        }
        let sigma = sched.sigma(t);
        let noised = self.noised(t, sched)?;
        let zv = DVector::from_column_slice(z);
        let logs: Vec<f64> = noised
            .weights
            .iter()
            .zip(&noised.components)
            .map(|(w, g)| w.ln() + g.log_density(z))
            .collect();
        let lse = log_sum_exp(&logs);
        let mut out = DVector::zeros(self.dim());
        for (lr, g) in logs.iter().zip(&noised.components) {
            let r = (lr - lse).exp();
            if r == 0.0 {
                continue;
            }
            let solved = cholesky(g.cov(), "noised covariance")?.solve(&(&zv - g.mean()));
            out += solved * r;
        }
        Ok((out * sigma).iter().copied().collect())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    #[serde(default = "one")]
    weight: f64,
    mean: Vec<f64>,
    std: Option<f64>,
    cov_factor: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionFile {
    name: String,
    components: Vec<ComponentFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    name: String,
    condition: String,
    count: usize,
    mean: Vec<f64>,
    std: Option<f64>,
    cov_factor: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    dim: usize,
    seed: u64,
    fidelity_radius: Option<f64>,
    conditions: Vec<ConditionFile>,
    #[serde(default)]
    references: Vec<ReferenceFile>,
}

fn component_gaussian(dim: usize, mean: &[f64], std: Option<f64>, factor: Option<&Vec<Vec<f64>>>) -> Result<Gaussian> {
    if mean.len() != dim {
        return Err(Error::invalid(format!("mean has {} entries, world dim is {dim}", mean.len())));
    }
    let cov = match (std, factor) {
        (Some(s), None) => DMatrix::identity(dim, dim) * (s * s),
        (None, Some(rows)) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::invalid(format!("cov_factor must be {dim}x{dim}")));
            }
            let f = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            &f * f.transpose()
        }
        _ => return Err(Error::invalid("give exactly one of `std` or `cov_factor`")),
    };
    Gaussian::new(DVector::from_column_slice(mean), cov)
}

/// A named set of reference points drawn from a subject distribution that
/// sits near one of the world's conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub name: String,
    pub condition: String,
    pub distribution: Gaussian,
    pub points: Vec<Vec<f64>>,
}

/// Conditions mapped to Gaussian mixtures, plus reference sets.
///
/// Condition `i` of the world corresponds to row `i + 1` of a model's
/// condition table built from [`GaussianConceptWorld::condition_names`];
/// row 0 (NULL) is the equal-weight mixture over all conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianConceptWorld {
    dim: usize,
    seed: u64,
    fidelity_radius: f64,
    conditions: Vec<(String, Mixture)>,
    references: Vec<ReferenceSet>,
}

pub const DEFAULT_FIDELITY_RADIUS: f64 = 4.0;

impl GaussianConceptWorld {
    pub fn new(dim: usize, seed: u64, conditions: Vec<(String, Mixture)>) -> Result<Self> {
        if dim == 0 || conditions.is_empty() {
            return Err(Error::invalid("world needs a positive dimension and at least one condition"));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, m) in &conditions {
            if !seen.insert(name.as_str()) || name == crate::model::NULL_NAME {
                return Err(Error::invalid(format!("duplicate or reserved condition name `{name}`")));
            }
            if m.dim() != dim {
                return Err(Error::invalid(format!("condition `{name}` has the wrong dimension")));
            }
        }
        Ok(GaussianConceptWorld {
            dim,
            seed,
            fidelity_radius: DEFAULT_FIDELITY_RADIUS,
            conditions,
            references: Vec::new(),
        })
    }

    /// Adds a reference set of `count` points drawn deterministically from
    /// `distribution` with a stream derived from the world seed.
    pub fn add_reference(&mut self, name: &str, condition: &str, distribution: Gaussian, count: usize) -> Result<()> {
        self.mixture(condition)?;
        if count == 0 {
            return Err(Error::invalid(format!("reference set `{name}` is empty")));
        }
        if distribution.dim() != self.dim {
            return Err(Error::invalid(format!("reference set `{name}` has the wrong dimension")));
        }
        if self.references.iter().any(|r| r.name == name) {
            return Err(Error::invalid(format!("duplicate reference set `{name}`")));
        }
        let mut r = rng::derived(self.seed, 1000 + self.references.len() as u64);
        let points = (0..count).map(|_| distribution.sample(&mut r)).collect();
        self.references.push(ReferenceSet {
            name: name.to_string(),
            condition: condition.to_string(),
            distribution,
            points,
        });
        Ok(())
    }

    pub fn with_fidelity_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid("fidelity radius must be positive"));
        }
        self.fidelity_radius = radius;
        Ok(self)
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg_err = |message: String| Error::Config {
            path: origin.to_path_buf(),
            message,
        };
        let file: WorldFile = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        let build = || -> Result<Self> {
            let mut conditions = Vec::new();
            for c in &file.conditions {
                let mut weights = Vec::new();
                let mut comps = Vec::new();
                for comp in &c.components {
                    weights.push(comp.weight);
                    comps.push(component_gaussian(file.dim, &comp.mean, comp.std, comp.cov_factor.as_ref())?);
                }
                conditions.push((c.name.clone(), Mixture::new(weights, comps)?));
            }
            let mut world = GaussianConceptWorld::new(file.dim, file.seed, conditions)?;
            if let Some(r) = file.fidelity_radius {
                world = world.with_fidelity_radius(r)?;
            }
            for r in &file.references {
                let g = component_gaussian(file.dim, &r.mean, r.std, r.cov_factor.as_ref())?;
                world.add_reference(&r.name, &r.condition, g, r.count)?;
            }
            Ok(world)
        };
        build().map_err(|e| cfg_err(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_toml_str(&text, path)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn condition_names(&self) -> Vec<String> {
        self.conditions.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn mixture(&self, name: &str) -> Result<&Mixture> {
        self.conditions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    /// Equal-weight mixture over every condition.
    pub fn unconditional(&self) -> Mixture {
        let k = self.conditions.len() as f64;
        let mut weights = Vec::new();
        let mut comps = Vec::new();
        for (_, m) in &self.conditions {
            for (w, g) in m.weights.iter().zip(&m.components) {
                weights.push(w / k);
                comps.push(g.clone());
            }
        }
        Mixture {
            weights,
            components: comps,
        }
    }

    /// Mixture for a table row: 0 is NULL, `i` is condition `i - 1`.
    pub fn mixture_for(&self, c: Condition) -> Result<Mixture> {
        if c.is_null() {
            return Ok(self.unconditional());
        }
        self.conditions
            .get(c.0 - 1)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| Error::UnknownCondition(format!("#{}", c.0)))
    }

    pub fn references(&self) -> &[ReferenceSet] {
        &self.references
    }

    pub fn reference(&self, name: &str) -> Result<&ReferenceSet> {
        self.references
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown reference set `{name}`")))
    }

    pub fn sample(&self, condition: &str, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let m = self.mixture(condition)?;
        Ok((0..n).map(|_| m.sample(rng)).collect())
    }

    /// `n` samples with conditions drawn uniformly, as table rows.
    pub fn sample_training(&self, n: usize, rng: &mut impl Rng) -> Vec<ConditionedSample> {
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..self.conditions.len());
                ConditionedSample::new(self.conditions[k].1.sample(rng), Condition(k + 1))
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64], condition: &str) -> Result<f64> {
        Ok(self.mixture(condition)?.log_density(x))
    }

    /// `(lo, hi)` log-density band used by [`prompt_fidelity`]: `hi` is the
    /// largest density at a component mean, `lo` sits `radius^2 / 2` below.
    pub fn fidelity_band(&self, condition: &str) -> Result<(f64, f64)> {
        let m = self.mixture(condition)?;
        let hi = m
            .components
            .iter()
            .map(|g| m.log_density(g.mean().as_slice()))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((hi - 0.5 * self.fidelity_radius * self.fidelity_radius, hi))
    }
}

/// Exact optimal noise predictor of a world, usable wherever a trained
/// model is.
#[derive(Clone, Debug)]
pub struct OraclePredictor {
    world: GaussianConceptWorld,
    schedule: NoiseSchedule,
}

impl OraclePredictor {
    pub fn new(world: GaussianConceptWorld, schedule: NoiseSchedule) -> Self {
        OraclePredictor { world, schedule }
    }
}

impl EpsPredictor for OraclePredictor {
    fn data_dim(&self) -> usize {
        self.world.dim
    }

    fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    fn predict_batch(&self, z: &Tensor, times: &[f64], conds: &[Condition]) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.world.dim || times.len() != z.rows() || conds.len() != z.rows() {
            return Err(Error::Shape {
                op: "oracle_predict",
                left: vec![times.len(), self.world.dim],
                right: z.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(z.numel());
        for i in 0..z.rows() {
            let m = self.world.mixture_for(conds[i])?;
            out.extend(m.optimal_eps(z.row(i), times[i], &self.schedule)?);
        }
        Tensor::new(z.shape().to_vec(), out)
    }
}

/// Quadratic consistency function `f(x) = x^T Q x + b^T x + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyFunction {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub k: f64,
}

impl ConsistencyFunction {
    pub fn new(q: DMatrix<f64>, b: DVector<f64>, k: f64) -> Result<Self> {
        check_symmetric(&q, "consistency matrix")?;
        if q.nrows() != b.len() {
            return Err(Error::invalid("consistency function: Q and b disagree in dimension"));
        }
        Ok(ConsistencyFunction { q, b, k })
    }

    pub fn zero(d: usize) -> Self {
        ConsistencyFunction {
            q: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
            k: 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + self.b.dot(x) + self.k
    }

    /// `E_g[f] = tr(Q S) + m^T Q m + b^T m + k`.
    pub fn expectation(&self, g: &Gaussian) -> f64 {
        (&self.q * g.cov()).trace() + self.eval(g.mean())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tilted {
    pub distribution: Gaussian,
    /// `log E_base[exp(f / beta)]`.
    pub log_z: f64,
}

/// Exact tilt `p(x) ∝ base(x) exp(f(x) / beta)` of a Gaussian by a
/// quadratic function.
pub fn tilted_distribution(base: &Gaussian, f: &ConsistencyFunction, beta: f64) -> Result<Tilted> {
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if f.b.len() != base.dim() {
        return Err(Error::invalid("consistency function and base disagree in dimension"));
    }
    let p0 = base.precision();
    let p1 = &p0 - &f.q * (2.0 / beta);
    let p1 = (&p1 + p1.transpose()) * 0.5;
    let chol = cholesky(&p1, "tilted precision")?;
    let h = &p0 * base.mean() + &f.b / beta;
    let m1 = chol.solve(&h);
    let n = base.dim();
    let cov1 = chol.solve(&DMatrix::identity(n, n));
    let cov1 = (&cov1 + cov1.transpose()) * 0.5;
    let tilted = Gaussian::new(m1.clone(), cov1)?;
    let log_z = f.k / beta + 0.5 * m1.dot(&(&p1 * &m1)) - 0.5 * base.mean().dot(&(&p0 * base.mean()))
        + 0.5 * tilted.log_det()
        - 0.5 * base.log_det();
    Ok(Tilted {
        distribution: tilted,
        log_z,
    })
}

/// Median pairwise squared distance between reference points; 1 when
/// fewer than two distinct points exist.
pub fn median_bandwidth(refs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..refs.len() {
        for j in i + 1..refs.len() {
            d.push(sq_dist(&refs[i], &refs[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if med > 0.0 {
        med * med
    } else {
        1.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over samples of `exp(-min_r |x - r|^2 / h)` with `h` from
/// [`median_bandwidth`].
pub fn consistency_score(samples: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<f64> {
    consistency_score_with_bandwidth(samples, refs, median_bandwidth(refs))
}

pub fn consistency_score_with_bandwidth(samples: &[Vec<f64>], refs: &[Vec<f64>], h: f64) -> Result<f64> {
    if samples.is_empty() || refs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(h > 0.0) {
        return Err(Error::invalid("bandwidth must be positive"));
    }
    let total: f64 = samples
        .iter()
        .map(|x| {
            let m = refs.iter().map(|r| sq_dist(x, r)).fold(f64::INFINITY, f64::min);
            (-m / h).exp()
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Mean of `log q(x | c)` per sample, clamped to the world's band and
/// mapped to `[0, 1]`.
pub fn prompt_fidelity(samples: &[Vec<f64>], condition: &str, world: &GaussianConceptWorld) -> Result<f64> {
    let (lo, hi) = world.fidelity_band(condition)?;
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = world.mixture(condition)?;
    let total: f64 = samples
        .iter()
        .map(|x| ((m.log_density(x).clamp(lo, hi)) - lo) / (hi - lo))
        .sum();
    Ok(total / samples.len() as f64)
}

/// Noise prediction `A z + b` of a model that is affine in `z`, recovered
/// by probing.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineEps {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineEps {
    /// Probes `model` at `z = 0` and the unit vectors.
    pub fn probe(model: &dyn EpsPredictor, c: Condition, t: f64) -> Result<Self> {
        let d = model.data_dim();
        let mut z = vec![0.0; (d + 1) * d];
        for i in 0..d {
            z[(i + 1) * d + i] = 1.0;
        }
        let z = Tensor::new(vec![d + 1, d], z)?;
        let out = model.predict_batch(&z, &vec![t; d + 1], &vec![c; d + 1])?;
        let b = DVector::from_column_slice(out.row(0));
        let a = DMatrix::from_fn(d, d, |i, j| out.row(j + 1)[i] - b[i]);
        Ok(AffineEps { a, b })
    }

    /// `E_eps |A (alpha x + sigma eps) + b - eps|^2
    ///  = |alpha A x + b|^2 + |sigma A - I|_F^2`.
    pub fn expected_error(&self, x: &[f64], alpha: f64, sigma: f64) -> f64 {
        let d = self.b.len();
        let x = DVector::from_column_slice(x);
        let mean = &self.a * x * alpha + &self.b;
        let spread = &self.a * sigma - DMatrix::identity(d, d);
        mean.norm_squared() + spread.norm_squared()
    }
}

/// Closed-form `1/2 E_t[lambda'_t (E|eps_theta - eps|^2 - E|eps_phi - eps|^2)]`
/// on `grid`, averaged over `batch`, for models affine in `z`. The
/// reference model sees `theta.reference_condition(c)`.
pub fn affine_delta(
    theta: &dyn EpsPredictor,
    phi: &dyn EpsPredictor,
    batch: &[ConditionedSample],
    grid: &[f64],
) -> Result<f64> {
    if batch.is_empty() || grid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sched = theta.schedule();
    let mut total = 0.0;
    for s in batch {
        for &t in grid {
            let th = AffineEps::probe(theta, s.c, t)?;
            let ph = AffineEps::probe(phi, theta.reference_condition(s.c), t)?;
            let (a, sg) = (sched.alpha(t), sched.sigma(t));
            let diff = th.expected_error(&s.x, a, sg) - ph.expected_error(&s.x, a, sg);
            total += 0.5 * sched.log_snr_derivative(t) * diff;
        }
    }
    Ok(total / (batch.len() * grid.len()) as f64)
}

/// KL between the forward posterior `q(z_s | z_t, x)` and the model step
/// `p(z_s | z_t)` that substitutes `x_hat = (z_t - sigma_t eps_hat) / alpha_t`,
/// for `s < t`, with `z_t = alpha_t x + sigma_t eps`.
pub fn reverse_step_kl(x: &[f64], eps: &[f64], eps_hat: &[f64], t: f64, s: f64, sched: &NoiseSchedule) -> Result<f64> {
    if !(s < t) {
        return Err(Error::invalid("reverse step needs s < t"));
    }
    let d = x.len();
    if eps.len() != d || eps_hat.len() != d {
        return Err(Error::Shape {
            op: "reverse_step_kl",
            left: vec![d],
            right: vec![eps.len(), eps_hat.len()],
        });
    }
    let (at, st) = (sched.alpha(t), sched.sigma(t));
    let (as_, ss) = (sched.alpha(s), sched.sigma(s));
    let ats = at / as_;
    let var_ts = st * st - ats * ats * ss * ss;
    let c_z = ats * ss * ss / (st * st);
    let c_x = as_ * var_ts / (st * st);
    let var = var_ts * ss * ss / (st * st);
    let x = DVector::from_column_slice(x);
    let z = &x * at + DVector::from_column_slice(eps) * st;
    let x_hat = (&z - DVector::from_column_slice(eps_hat) * st) / at;
    let cov = DMatrix::identity(d, d) * var;
    let mq = &z * c_z + &x * c_x;
    let mp = &z * c_z + &x_hat * c_x;
    gaussian_kl(&mq, &cov, &mp, &cov)
}
