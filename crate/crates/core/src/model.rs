//! Conditional noise-prediction networks.
//!
//! The network sees `[z | time features | condition embedding]`. Condition
//! embeddings live in a learned table whose row 0 is the NULL condition
//! used for unconditional predictions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

use crate::autodiff::{Eval, Ops};
use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const TIME_DIM: usize = 8;
pub const COND_DIM: usize = 8;
pub const NULL_NAME: &str = "<null>";

/// Sinusoidal features `sin(k pi t / 2), cos(k pi t / 2)` for `k = 1..=4`.
pub fn time_embedding(t: f64) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    for k in 0..TIME_DIM / 2 {
        let u = (k + 1) as f64 * 0.5 * PI * t;
        out[2 * k] = u.sin();
        out[2 * k + 1] = u.cos();
    }
    out
}

/// Row index into a condition table. Row 0 is NULL.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition(pub usize);

impl Condition {
    pub const NULL: Condition = Condition(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Output is the network applied to `[z | t | c]`.
    #[default]
    Mlp,
    /// `eps = s(t, c) * z + h(t, c)` with `[s | h]` produced by the network
    /// from `[t | c]`. Affine in `z`, so Gaussian marginals stay Gaussian.
    AffineInZ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub schedule: NoiseSchedule,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            data_dim: 2,
            hidden: vec![64, 64],
            architecture: Architecture::Mlp,
            schedule: NoiseSchedule::cosine(),
        }
    }
}

impl ModelSpec {
    pub fn linear(data_dim: usize) -> Self {
        ModelSpec {
            data_dim,
            hidden: vec![],
            architecture: Architecture::AffineInZ,
            schedule: NoiseSchedule::cosine(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => self.data_dim + TIME_DIM + COND_DIM,
            Architecture::AffineInZ => TIME_DIM + COND_DIM,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => self.data_dim,
            Architecture::AffineInZ => 2 * self.data_dim,
        }
    }

    /// `(fan_in, fan_out)` of every linear layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in, fan_out]`.
    pub weight: Tensor,
    /// `[1, fan_out]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTable {
    names: Vec<String>,
    embeddings: Tensor,
}

impl ConditionTable {
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if names.first().map(String::as_str) != Some(NULL_NAME) {
            return Err(Error::invalid("condition table row 0 must be the NULL condition"));
        }
        if embeddings.shape() != [names.len(), COND_DIM] {
            return Err(Error::Shape {
                op: "condition_table",
                left: vec![names.len(), COND_DIM],
                right: embeddings.shape().to_vec(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        if !names.iter().all(|n| seen.insert(n)) {
            return Err(Error::invalid("duplicate condition name"));
        }
        Ok(ConditionTable { names, embeddings })
    }

    fn random(names: &[String], rng: &mut impl Rng) -> Self {
        let mut all = vec![NULL_NAME.to_string()];
        all.extend(names.iter().cloned());
        let embeddings = rng::normal_tensor(rng, &[all.len(), COND_DIM]);
        ConditionTable {
            names: all,
            embeddings,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn lookup(&self, name: &str) -> Result<Condition> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(Condition)
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    pub fn name(&self, c: Condition) -> Result<&str> {
        self.names
            .get(c.0)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownCondition(format!("#{}", c.0)))
    }

    pub fn row(&self, c: Condition) -> Result<&[f64]> {
        if c.0 >= self.len() {
            return Err(Error::UnknownCondition(format!("#{}", c.0)));
        }
        Ok(self.embeddings.row(c.0))
    }
}

/// Network parameters in whichever value space an [`Ops`] backend uses.
#[derive(Clone, Debug)]
pub struct NetParams<V> {
    pub weights: Vec<V>,
    pub biases: Vec<V>,
    pub table: V,
}

/// Shared forward pass. `z` is `[batch, data_dim]`; `times` and `conds`
/// give one entry per row.
pub fn forward<O: Ops>(
    ops: &mut O,
    spec: &ModelSpec,
    params: &NetParams<O::Value>,
    z: &O::Value,
    times: &[f64],
    conds: &[Condition],
) -> Result<O::Value> {
    let zt = ops.value(z);
    let batch = zt.rows();
    if zt.shape().len() != 2 || zt.cols() != spec.data_dim {
        return Err(Error::Shape {
            op: "predict_eps",
            left: vec![batch, spec.data_dim],
            right: zt.shape().to_vec(),
        });
    }
    if times.len() != batch || conds.len() != batch {
        return Err(Error::invalid("times/conditions must match the batch size"));
    }
    let rows = ops.value(&params.table).rows();
    let mut onehot = vec![0.0; batch * rows];
    for (i, c) in conds.iter().enumerate() {
        if c.0 >= rows {
            return Err(Error::UnknownCondition(format!("#{}", c.0)));
        }
        onehot[i * rows + c.0] = 1.0;
    }
    let mut temb = Vec::with_capacity(batch * TIME_DIM);
    for &t in times {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        temb.extend_from_slice(&time_embedding(t));
    }
    let onehot = ops.constant(Tensor::from_parts(vec![batch, rows], onehot));
    let temb = ops.constant(Tensor::from_parts(vec![batch, TIME_DIM], temb));
    let cemb = ops.matmul(&onehot, &params.table)?;

    let mut h = match spec.architecture {
        Architecture::Mlp => ops.concat(&[z.clone(), temb, cemb], 1)?,
        Architecture::AffineInZ => ops.concat(&[temb, cemb], 1)?,
    };
    let last = params.weights.len() - 1;
    for (i, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        h = ops.matmul(&h, w)?;
        h = ops.add_row(&h, b)?;
        if i < last {
            h = ops.silu(&h)?;
        }
    }
    match spec.architecture {
        Architecture::Mlp => Ok(h),
        Architecture::AffineInZ => {
            let d = spec.data_dim;
            let s = ops.narrow_cols(&h, 0, d)?;
            let shift = ops.narrow_cols(&h, d, 2 * d)?;
            let sz = ops.mul(&s, z)?;
            ops.add(&sz, &shift)
        }
    }
}

/// Anything that predicts noise for a batch of latents.
pub trait EpsPredictor: Send + Sync {
    fn data_dim(&self) -> usize;

    fn schedule(&self) -> NoiseSchedule;

    fn predict_batch(&self, z: &Tensor, times: &[f64], conds: &[Condition]) -> Result<Tensor>;

    /// `z` is `[batch, d]` or a single `[d]` vector; the output has the
    /// same shape.
    fn predict(&self, z: &Tensor, c: Condition, t: f64) -> Result<Tensor> {
        let single = z.shape().len() == 1;
        let z2 = if single {
            z.reshape(vec![1, z.numel()])?
        } else {
            z.clone()
        };
        let n = z2.rows();
        let out = self.predict_batch(&z2, &vec![t; n], &vec![c; n])?;
        if single {
            out.reshape(vec![out.numel()])
        } else {
            Ok(out)
        }
    }

    /// Condition the frozen reference model should see when this model is
    /// queried with `c`. Identity unless the model carries learned tokens.
    fn reference_condition(&self, c: Condition) -> Condition {
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsModel {
    spec: ModelSpec,
    layers: Vec<Linear>,
    conditions: ConditionTable,
    frozen: bool,
}

impl EpsModel {
    /// Fresh model: hidden weights `N(0, 1/fan_in)`, zero biases, random
    /// condition embeddings, and a zero output layer so `eps_hat = 0`.
    pub fn new(spec: ModelSpec, condition_names: &[String], rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(fin, fout))| {
                let weight = if i == last {
                    Tensor::zeros(&[fin, fout])
                } else {
                    let std = 1.0 / (fin as f64).sqrt();
                    let w = rng::normal_vec(rng, fin * fout).into_iter().map(|v| v * std).collect();
                    Tensor::from_parts(vec![fin, fout], w)
                };
                Linear {
                    weight,
                    bias: Tensor::zeros(&[1, fout]),
                }
            })
            .collect();
        let drawn = ConditionTable::random(condition_names, rng);
        let conditions = ConditionTable::new(drawn.names, drawn.embeddings)?;
        Ok(EpsModel {
            spec,
            layers,
            conditions,
            frozen: false,
        })
    }

    pub fn from_parts(spec: ModelSpec, layers: Vec<Linear>, conditions: ConditionTable) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::invalid("layer count does not match spec"));
        }
        for (&(fin, fout), l) in shapes.iter().zip(&layers) {
            if l.weight.shape() != [fin, fout] || l.bias.shape() != [1, fout] {
                return Err(Error::Shape {
                    op: "from_parts",
                    left: vec![fin, fout],
                    right: l.weight.shape().to_vec(),
                });
            }
        }
        Ok(EpsModel {
            spec,
            layers,
            conditions,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn conditions(&self) -> &ConditionTable {
        &self.conditions
    }

    pub fn condition(&self, name: &str) -> Result<Condition> {
        self.conditions.lookup(name)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum::<usize>()
            + self.conditions.embeddings.numel()
    }

    /// Test hook: overwrite the output layer so predictions are nonzero.
    #[doc(hidden)]
    pub fn randomize_output_layer(&mut self, scale: f64, rng: &mut impl Rng) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenBaseModified);
        }
        let last = self.layers.last_mut().expect("at least one layer");
        let shape = last.weight.shape().to_vec();
        let w = rng::normal_vec(rng, last.weight.numel()).into_iter().map(|v| v * scale).collect();
        last.weight = Tensor::from_parts(shape, w);
        let bshape = last.bias.shape().to_vec();
        let b = rng::normal_vec(rng, last.bias.numel()).into_iter().map(|v| v * scale).collect();
        last.bias = Tensor::from_parts(bshape, b);
        Ok(())
    }

    pub(crate) fn eval_params(&self) -> NetParams<Tensor> {
        NetParams {
            weights: self.layers.iter().map(|l| l.weight.clone()).collect(),
            biases: self.layers.iter().map(|l| l.bias.clone()).collect(),
            table: self.conditions.embeddings.clone(),
        }
    }

    /// SHA-256 over the model spec, condition names and every parameter value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for n in &self.conditions.names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        for l in &self.layers {
            h.update(l.weight.to_le_bytes());
            h.update(l.bias.to_le_bytes());
        }
        h.update(self.conditions.embeddings.to_le_bytes());
        hex::encode(h.finalize())
    }

    /// Convenience for a single latent vector.
    pub fn predict_eps(&self, z: &[f64], c: Condition, t: f64) -> Result<Vec<f64>> {
        let zt = Tensor::vector(z.to_vec())?;
        Ok(self.predict(&zt, c, t)?.into_data())
    }
}

impl EpsPredictor for EpsModel {
    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn schedule(&self) -> NoiseSchedule {
        self.spec.schedule
    }

    fn predict_batch(&self, z: &Tensor, times: &[f64], conds: &[Condition]) -> Result<Tensor> {
        forward(&mut Eval, &self.spec, &self.eval_params(), z, times, conds)
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Adapter,
    Embedding,
}

/// A model whose trainable parameters can be listed, replaced, and bound
/// into the shared forward pass on any [`Ops`] backend.
pub trait Trainable: EpsPredictor {
    fn model_spec(&self) -> &ModelSpec;

    fn parameters(&self) -> Vec<Tensor>;

    /// One entry per tensor of [`Trainable::parameters`].
    fn parameter_groups(&self) -> Vec<ParamGroup>;

    fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()>;

    /// Network parameters built from `params` (same order as
    /// [`Trainable::parameters`]) plus whatever frozen state the model holds.
    fn bind<O: Ops>(&self, ops: &mut O, params: &[O::Value]) -> Result<NetParams<O::Value>>;
}

pub(crate) fn check_parameters(expected: &[Tensor], given: &[Tensor]) -> Result<()> {
    if expected.len() != given.len() {
        return Err(Error::invalid(format!(
            "expected {} parameter tensors, got {}",
            expected.len(),
            given.len()
        )));
    }
    for (e, g) in expected.iter().zip(given) {
        if e.shape() != g.shape() {
            return Err(Error::Shape {
                op: "set_parameters",
                left: e.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl Trainable for EpsModel {
    fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `w0, b0, w1, b1, ..., condition table`.
    fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out.push(self.conditions.embeddings.clone());
        out
    }

    fn parameter_groups(&self) -> Vec<ParamGroup> {
        vec![ParamGroup::Base; 2 * self.layers.len() + 1]
    }

    fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenBaseModified);
        }
        check_parameters(&self.parameters(), &params)?;
        let mut it = params.into_iter();
        for l in &mut self.layers {
            l.weight = it.next().expect("checked length");
            l.bias = it.next().expect("checked length");
        }
        self.conditions.embeddings = it.next().expect("checked length");
        Ok(())
    }

    fn bind<O: Ops>(&self, _ops: &mut O, params: &[O::Value]) -> Result<NetParams<O::Value>> {
        let n = self.layers.len();
        if params.len() != 2 * n + 1 {
            return Err(Error::invalid("wrong number of bound parameters"));
        }
        Ok(NetParams {
            weights: (0..n).map(|i| params[2 * i].clone()).collect(),
            biases: (0..n).map(|i| params[2 * i + 1].clone()).collect(),
            table: params[2 * n].clone(),
        })
    }
}
