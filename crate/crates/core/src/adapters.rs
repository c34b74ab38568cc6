//! Low-rank adapters, learned condition tokens, arithmetic merging.

use rand::Rng;
use std::sync::Arc;

use crate::autodiff::{Eval, Ops};
use crate::error::{Error, Result};
use crate::model::{
    check_parameters, forward, Condition, ConditionTable, EpsModel, EpsPredictor, Linear, ModelSpec, NetParams,
    ParamGroup, Trainable, COND_DIM,
};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Standard deviation of the `A` factor at initialization.
pub const LORA_INIT_STD: f64 = 0.02;

/// Factors of one wrapped layer: `A` is `[n, r]`, `B` is `[r, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraLayer {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }
}

/// `W_eff = W + scale * A B` on every linear layer of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    layers: Vec<LoraLayer>,
    rank: usize,
    scale: f64,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02^2)`, `B = 0`; per-layer rank `min(rank, n, m)`.
    pub fn new(shapes: &[(usize, usize)], rank: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        let layers = shapes
            .iter()
            .map(|&(n, m)| {
                let r = rank.min(n).min(m);
                let a = rng::normal_vec(rng, n * r).into_iter().map(|v| v * LORA_INIT_STD).collect();
                LoraLayer {
                    a: Tensor::from_parts(vec![n, r], a),
                    b: Tensor::zeros(&[r, m]),
                }
            })
            .collect();
        Ok(LoraAdapter {
            layers,
            rank,
            scale: 1.0,
        })
    }

    pub fn for_model(model: &EpsModel, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(&model.spec().layer_shapes(), rank, rng)
    }

    /// Both factors zero.
    pub fn zeros(shapes: &[(usize, usize)], rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        let layers = shapes
            .iter()
            .map(|&(n, m)| {
                let r = rank.min(n).min(m);
                LoraLayer {
                    a: Tensor::zeros(&[n, r]),
                    b: Tensor::zeros(&[r, m]),
                }
            })
            .collect();
        Ok(LoraAdapter {
            layers,
            rank,
            scale: 1.0,
        })
    }

    pub fn from_layers(layers: Vec<LoraLayer>, rank: usize, scale: f64) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::NonFinite("adapter scale"));
        }
        for l in &layers {
            if l.a.shape().len() != 2 || l.b.shape().len() != 2 || l.a.cols() != l.b.rows() {
                return Err(Error::Shape {
                    op: "lora_layer",
                    left: l.a.shape().to_vec(),
                    right: l.b.shape().to_vec(),
                });
            }
        }
        Ok(LoraAdapter { layers, rank, scale })
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    /// Nominal rank before per-layer clamping.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(LoraLayer::shape).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.numel() + l.b.numel()).sum()
    }

    /// Dense `scale * A B` of layer `i`.
    pub fn delta(&self, i: usize) -> Result<Tensor> {
        let l = self
            .layers
            .get(i)
            .ok_or_else(|| Error::invalid(format!("adapter has no layer {i}")))?;
        l.a.matmul(&l.b)?.scale(self.scale)
    }

    pub fn deltas(&self) -> Result<Vec<Tensor>> {
        (0..self.layers.len()).map(|i| self.delta(i)).collect()
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.b = l.b.scale(-1.0).expect("negation keeps values finite");
        }
        out
    }

    fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        if self.layer_shapes() != spec.layer_shapes() {
            return Err(Error::Shape {
                op: "attach",
                left: spec.layer_shapes().iter().flat_map(|&(n, m)| [n, m]).collect(),
                right: self.layer_shapes().iter().flat_map(|&(n, m)| [n, m]).collect(),
            });
        }
        Ok(())
    }
}

/// A new condition row learned on top of the base table, initialized as a
/// copy of an existing row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedding {
    pub name: String,
    pub vector: Vec<f64>,
    pub initializer: Condition,
}

/// Weighted adapters to combine into one.
#[derive(Clone, Debug, Default)]
pub struct MergeSpec {
    pub entries: Vec<(LoraAdapter, f64)>,
}

impl MergeSpec {
    pub fn new(entries: Vec<(LoraAdapter, f64)>) -> Self {
        MergeSpec { entries }
    }
}

/// Adapter whose delta is exactly `sum_i tau_i delta_i`, built by stacking
/// `[tau_1 s_1 A_1 | tau_2 s_2 A_2 | ...]` over `[B_1; B_2; ...]`.
pub fn merge(spec: &MergeSpec) -> Result<LoraAdapter> {
    let first = spec
        .entries
        .first()
        .ok_or_else(|| Error::invalid("merge needs at least one adapter"))?;
    let shapes = first.0.layer_shapes();
    for (a, tau) in &spec.entries {
        if a.layer_shapes() != shapes {
            return Err(Error::invalid("merged adapters wrap different layer sets"));
        }
        if !tau.is_finite() {
            return Err(Error::NonFinite("merge coefficient"));
        }
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for i in 0..shapes.len() {
        let scaled: Vec<Tensor> = spec
            .entries
            .iter()
            .map(|(a, tau)| a.layers[i].a.scale(tau * a.scale))
            .collect::<Result<_>>()?;
        let a_parts: Vec<&Tensor> = scaled.iter().collect();
        let b_parts: Vec<&Tensor> = spec.entries.iter().map(|(a, _)| &a.layers[i].b).collect();
        layers.push(LoraLayer {
            a: Tensor::concat(&a_parts, 1)?,
            b: Tensor::concat(&b_parts, 0)?,
        });
    }
    let rank = spec.entries.iter().map(|(a, _)| a.rank).sum();
    LoraAdapter::from_layers(layers, rank, 1.0)
}

/// Per layer, the mean over columns of the cosine similarity between the
/// two dense deltas. A column that is zero in either delta contributes 0.
pub fn adapter_alignment(a: &LoraAdapter, b: &LoraAdapter) -> Result<Vec<f64>> {
    if a.layer_shapes() != b.layer_shapes() {
        return Err(Error::invalid("alignment needs adapters over the same layers"));
    }
    let mut out = Vec::with_capacity(a.layers.len());
    for i in 0..a.layers.len() {
        let (da, db) = (a.delta(i)?, b.delta(i)?);
        let (n, m) = (da.rows(), da.cols());
        let mut total = 0.0;
        for j in 0..m {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for r in 0..n {
                let (x, y) = (da.data()[r * m + j], db.data()[r * m + j]);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na > 0.0 && nb > 0.0 {
                total += (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
            }
        }
        out.push(total / m as f64);
    }
    Ok(out)
}

/// A frozen base model seen through an adapter and optional learned tokens.
/// Only the adapter factors and token vectors are trainable.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    base: Arc<EpsModel>,
    adapter: LoraAdapter,
    tokens: Vec<TokenEmbedding>,
}

impl AdaptedModel {
    pub fn attach(base: Arc<EpsModel>, adapter: LoraAdapter) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::NotFrozen);
        }
        adapter.check_model(base.spec())?;
        Ok(AdaptedModel {
            base,
            adapter,
            tokens: Vec::new(),
        })
    }

    /// Appends a token row initialized from the base row `initializer`.
    pub fn add_token(&mut self, name: &str, initializer: &str) -> Result<Condition> {
        if self.condition(name).is_ok() {
            return Err(Error::invalid(format!("condition `{name}` already exists")));
        }
        let init = self.base.condition(initializer)?;
        let vector = self.base.conditions().row(init)?.to_vec();
        self.tokens.push(TokenEmbedding {
            name: name.to_string(),
            vector,
            initializer: init,
        });
        Ok(Condition(self.base.conditions().len() + self.tokens.len() - 1))
    }

    /// Adds an already-learned token, e.g. one loaded from disk.
    pub fn push_token(&mut self, token: TokenEmbedding) -> Result<Condition> {
        if self.condition(&token.name).is_ok() {
            return Err(Error::invalid(format!("condition `{}` already exists", token.name)));
        }
        if token.vector.len() != COND_DIM || token.initializer.0 >= self.base.conditions().len() {
            return Err(Error::invalid(format!("token `{}` does not fit the base model", token.name)));
        }
        self.tokens.push(token);
        Ok(Condition(self.base.conditions().len() + self.tokens.len() - 1))
    }

    pub fn base(&self) -> &Arc<EpsModel> {
        &self.base
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn tokens(&self) -> &[TokenEmbedding] {
        &self.tokens
    }

    pub fn condition(&self, name: &str) -> Result<Condition> {
        if let Ok(c) = self.base.condition(name) {
            return Ok(c);
        }
        self.tokens
            .iter()
            .position(|t| t.name == name)
            .map(|i| Condition(self.base.conditions().len() + i))
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    /// Dense model with `W + scale * A B` folded in and token rows appended.
    pub fn materialize(&self) -> Result<EpsModel> {
        let params = self.parameters();
        let net = self.bind(&mut Eval, &params)?;
        let layers = net
            .weights
            .into_iter()
            .zip(net.biases)
            .map(|(weight, bias)| Linear { weight, bias })
            .collect();
        let mut names = self.base.conditions().names().to_vec();
        names.extend(self.tokens.iter().map(|t| t.name.clone()));
        EpsModel::from_parts(self.base.spec().clone(), layers, ConditionTable::new(names, net.table)?)
    }
}

impl EpsPredictor for AdaptedModel {
    fn data_dim(&self) -> usize {
        self.base.spec().data_dim
    }

    fn schedule(&self) -> NoiseSchedule {
        self.base.spec().schedule
    }

    fn predict_batch(&self, z: &Tensor, times: &[f64], conds: &[Condition]) -> Result<Tensor> {
        let params = self.parameters();
        let net = self.bind(&mut Eval, &params)?;
        forward(&mut Eval, self.base.spec(), &net, z, times, conds)
    }

    fn reference_condition(&self, c: Condition) -> Condition {
        let k = self.base.conditions().len();
        if c.0 >= k {
            if let Some(t) = self.tokens.get(c.0 - k) {
                return t.initializer;
            }
        }
        c
    }
}

impl Trainable for AdaptedModel {
    fn model_spec(&self) -> &ModelSpec {
        self.base.spec()
    }

    /// `A0, B0, A1, B1, ..., token rows as [1, COND_DIM]`.
    fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.adapter.layers.len() + self.tokens.len());
        for l in &self.adapter.layers {
            out.push(l.a.clone());
            out.push(l.b.clone());
        }
        for t in &self.tokens {
            out.push(Tensor::from_parts(vec![1, COND_DIM], t.vector.clone()));
        }
        out
    }

    fn parameter_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Adapter; 2 * self.adapter.layers.len()];
        g.extend(std::iter::repeat_n(ParamGroup::Embedding, self.tokens.len()));
        g
    }

    fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()> {
        check_parameters(&self.parameters(), &params)?;
        let mut it = params.into_iter();
        for l in &mut self.adapter.layers {
            l.a = it.next().expect("checked length");
            l.b = it.next().expect("checked length");
        }
        for t in &mut self.tokens {
            t.vector = it.next().expect("checked length").into_data();
        }
        Ok(())
    }

    fn bind<O: Ops>(&self, ops: &mut O, params: &[O::Value]) -> Result<NetParams<O::Value>> {
        let n = self.adapter.layers.len();
        if params.len() != 2 * n + self.tokens.len() {
            return Err(Error::invalid("wrong number of bound parameters"));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (i, layer) in self.base.layers().iter().enumerate() {
            let w = ops.constant(layer.weight.clone());
            let ab = ops.matmul(&params[2 * i], &params[2 * i + 1])?;
            let ab = ops.scale(&ab, self.adapter.scale)?;
            weights.push(ops.add(&w, &ab)?);
            biases.push(ops.constant(layer.bias.clone()));
        }
        let base_table = ops.constant(self.base.conditions().embeddings().clone());
        let table = if self.tokens.is_empty() {
            base_table
        } else {
            let mut parts = vec![base_table];
            parts.extend(params[2 * n..].iter().cloned());
            ops.concat(&parts, 0)?
        };
        Ok(NetParams {
            weights,
            biases,
            table,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn base() -> Arc<EpsModel> {
        let mut m = EpsModel::new(
            ModelSpec {
                hidden: vec![16, 16],
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

    fn randomized(shapes: &[(usize, usize)], rank: usize, seed: u64) -> LoraAdapter {
        let mut a = LoraAdapter::new(shapes, rank, &mut rng::seeded(seed)).unwrap();
        let mut r = rng::seeded(seed + 100);
        for l in &mut a.layers {
            let shape = l.b.shape().to_vec();
            l.b = Tensor::new(shape, rng::normal_vec(&mut r, l.b.numel())).unwrap();
        }
        a
    }

    fn batch() -> Tensor {
        Tensor::new(vec![3, 2], vec![0.3, -1.0, 2.0, 0.1, -0.7, 0.4]).unwrap()
    }

    #[test]
    fn fresh_adapter_is_bit_identical_to_base() {
        let b = base();
        let a = LoraAdapter::for_model(&b, 4, &mut rng::seeded(3)).unwrap();
        let m = AdaptedModel::attach(b.clone(), a).unwrap();
        for c in [Condition::NULL, Condition(1), Condition(2)] {
            let p = m.predict_batch(&batch(), &[0.1, 0.5, 0.9], &[c; 3]).unwrap();
            let q = b.predict_batch(&batch(), &[0.1, 0.5, 0.9], &[c; 3]).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn zero_scale_is_bit_identical_to_base() {
        let b = base();
        let a = randomized(&b.spec().layer_shapes(), 4, 5).with_scale(0.0);
        let m = AdaptedModel::attach(b.clone(), a).unwrap();
        let p = m.predict_batch(&batch(), &[0.2; 3], &[Condition(1); 3]).unwrap();
        assert_eq!(p, b.predict_batch(&batch(), &[0.2; 3], &[Condition(1); 3]).unwrap());
    }

    #[test]
    fn attach_requires_frozen_matching_base() {
        let b = base();
        let unfrozen = Arc::new(EpsModel::from_parts(b.spec().clone(), b.layers().to_vec(), b.conditions().clone()).unwrap());
        let a = LoraAdapter::for_model(&b, 4, &mut rng::seeded(3)).unwrap();
        assert!(matches!(AdaptedModel::attach(unfrozen, a.clone()), Err(Error::NotFrozen)));
        let wrong = LoraAdapter::new(&[(3, 3)], 2, &mut rng::seeded(3)).unwrap();
        assert!(matches!(AdaptedModel::attach(b, wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn rank_is_clamped() {
        let a = LoraAdapter::new(&[(18, 64), (64, 2)], 32, &mut rng::seeded(1)).unwrap();
        assert_eq!(a.layers()[0].rank(), 18);
        assert_eq!(a.layers()[1].rank(), 2);
        assert!(a.deltas().unwrap().iter().all(|d| d.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn full_rank_represents_any_delta() {
        let (n, m) = (6, 4);
        let mut r = rng::seeded(9);
        let target = DMatrix::from_vec(n, m, rng::normal_vec(&mut r, n * m));
        let svd = target.clone().svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let k = n.min(m);
        let a = u.columns(0, k) * DMatrix::from_diagonal(&svd.singular_values.rows(0, k).into_owned());
        let b = v_t.rows(0, k).into_owned();
        let to_tensor = |x: &DMatrix<f64>| {
            Tensor::new(vec![x.nrows(), x.ncols()], x.transpose().iter().copied().collect()).unwrap()
        };
        let adapter = LoraAdapter::from_layers(
            vec![LoraLayer {
                a: to_tensor(&a),
                b: to_tensor(&b),
            }],
            k,
            1.0,
        )
        .unwrap();
        let d = adapter.delta(0).unwrap();
        let want = to_tensor(&target);
        let mse = d.sub(&want).unwrap().squared_norm() / (n * m) as f64;
        assert!(mse < 1e-6, "{mse}");
    }

    #[test]
    fn merge_cases() {
        let shapes = [(5, 4), (4, 3)];
        let a = randomized(&shapes, 2, 1);
        let b = randomized(&shapes, 2, 2).with_scale(0.5);
        let only_a = merge(&MergeSpec::new(vec![(a.clone(), 1.0), (b.clone(), 0.0)])).unwrap();
        assert_eq!(only_a.deltas().unwrap(), a.deltas().unwrap());
        let zero = merge(&MergeSpec::new(vec![(a.clone(), 1.0), (a.negated(), 1.0)])).unwrap();
        assert!(zero.deltas().unwrap().iter().all(|d| d.data().iter().all(|v| v.abs() < 1e-15)));
        for (x, y) in [(1.0, 1.0), (0.3, -2.0), (2.5, 0.7)] {
            let m = merge(&MergeSpec::new(vec![(a.clone(), x), (b.clone(), y)])).unwrap();
            for i in 0..shapes.len() {
                let want = a.delta(i).unwrap().scale(x).unwrap().add(&b.delta(i).unwrap().scale(y).unwrap()).unwrap();
                assert!(m.delta(i).unwrap().max_abs_diff(&want) < 1e-12);
            }
        }
        let other = randomized(&[(5, 4)], 2, 3);
        assert!(merge(&MergeSpec::new(vec![(a, 1.0), (other, 1.0)])).is_err());
        assert!(merge(&MergeSpec::default()).is_err());
    }

    #[test]
    fn merged_attach_matches_dense_delta() {
        let bm = base();
        let shapes = bm.spec().layer_shapes();
        let a = randomized(&shapes, 3, 4).with_scale(0.05);
        let b = randomized(&shapes, 2, 6).with_scale(0.05);
        let merged = merge(&MergeSpec::new(vec![(a.clone(), 1.0), (b.clone(), 1.0)])).unwrap();
        let view = AdaptedModel::attach(bm.clone(), merged).unwrap();
        let layers = bm
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| Linear {
                weight: l.weight.add(&a.delta(i).unwrap()).unwrap().add(&b.delta(i).unwrap()).unwrap(),
                bias: l.bias.clone(),
            })
            .collect();
        let dense = EpsModel::from_parts(bm.spec().clone(), layers, bm.conditions().clone()).unwrap();
        let p = view.predict_batch(&batch(), &[0.3; 3], &[Condition(2); 3]).unwrap();
        let q = dense.predict_batch(&batch(), &[0.3; 3], &[Condition(2); 3]).unwrap();
        assert!(p.max_abs_diff(&q) < 1e-10);
    }

    #[test]
    fn alignment_cases() {
        let shapes = [(5, 4)];
        let a = randomized(&shapes, 2, 1);
        let al = adapter_alignment(&a, &a).unwrap();
        assert!((al[0] - 1.0).abs() < 1e-12);

        let e = |rows: usize, cols: usize, v: Vec<f64>| Tensor::new(vec![rows, cols], v).unwrap();
        // delta_x has only column 0, delta_y only column 1: orthogonal columns.
        let x = LoraAdapter::from_layers(vec![LoraLayer { a: e(2, 1, vec![1.0, 2.0]), b: e(1, 2, vec![1.0, 0.0]) }], 1, 1.0)
            .unwrap();
        let y = LoraAdapter::from_layers(vec![LoraLayer { a: e(2, 1, vec![3.0, 1.0]), b: e(1, 2, vec![0.0, 1.0]) }], 1, 1.0)
            .unwrap();
        assert_eq!(adapter_alignment(&x, &y).unwrap(), vec![0.0]);

        let p = randomized(&shapes, 1, 7);
        let q = randomized(&shapes, 1, 8);
        let (dp, dq) = (p.delta(0).unwrap(), q.delta(0).unwrap());
        let mut brute = 0.0;
        for j in 0..4 {
            let cp: Vec<f64> = (0..5).map(|i| dp.data()[i * 4 + j]).collect();
            let cq: Vec<f64> = (0..5).map(|i| dq.data()[i * 4 + j]).collect();
            let dot: f64 = cp.iter().zip(&cq).map(|(u, v)| u * v).sum();
            let n1: f64 = cp.iter().map(|u| u * u).sum::<f64>().sqrt();
            let n2: f64 = cq.iter().map(|u| u * u).sum::<f64>().sqrt();
            brute += dot / (n1 * n2);
        }
        brute /= 4.0;
        assert!((adapter_alignment(&p, &q).unwrap()[0] - brute).abs() < 1e-12);
    }

    #[test]
    fn token_is_copied_from_initializer() {
        let b = base();
        let a = LoraAdapter::for_model(&b, 2, &mut rng::seeded(3)).unwrap();
        let mut m = AdaptedModel::attach(b.clone(), a).unwrap();
        let tok = m.add_token("sks", "a").unwrap();
        assert_eq!(tok, Condition(3));
        assert_eq!(m.reference_condition(tok), Condition(1));
        assert_eq!(m.reference_condition(Condition(2)), Condition(2));
        assert_eq!(m.tokens()[0].vector, b.conditions().row(Condition(1)).unwrap());
        // Untrained token predicts exactly like its initializer.
        let p = m.predict_batch(&batch(), &[0.4; 3], &[tok; 3]).unwrap();
        let q = b.predict_batch(&batch(), &[0.4; 3], &[Condition(1); 3]).unwrap();
        assert_eq!(p, q);
        assert!(m.add_token("sks", "a").is_err());
        assert!(m.add_token("x", "missing").is_err());
        let dense = m.materialize().unwrap();
        assert_eq!(dense.condition("sks").unwrap(), tok);
        assert_eq!(dense.predict_batch(&batch(), &[0.4; 3], &[tok; 3]).unwrap(), p);
    }

    #[test]
    fn set_parameters_updates_only_trainables() {
        let b = base();
        let before = b.checksum();
        let a = LoraAdapter::for_model(&b, 2, &mut rng::seeded(3)).unwrap();
        let mut m = AdaptedModel::attach(b.clone(), a).unwrap();
        m.add_token("sks", "b").unwrap();
        let mut params = m.parameters();
        assert_eq!(m.parameter_groups().len(), params.len());
        assert_eq!(*m.parameter_groups().last().unwrap(), ParamGroup::Embedding);
        params[1] = params[1].map("test", |_| 0.5).unwrap();
        m.set_parameters(params.clone()).unwrap();
        assert_eq!(m.parameters(), params);
        assert_eq!(b.checksum(), before);
        params.pop();
        assert!(m.set_parameters(params).is_err());
    }
}
