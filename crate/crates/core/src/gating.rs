//! Per-frame utilization gate.
//!
//! The gate maps encoded features (`[T, F]`, frame-major) to a categorical
//! distribution over the utilization levels at every frame. Inference picks
//! the most probable level; training perturbs the logits with Gumbel noise
//! and uses a straight-through one-hot so the choice stays differentiable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_lower, window_stats, Graph, Var};
use crate::dualpath::{fold_frames, unfold_frames, ChunkSpec};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{self, block_forward, graph_block, LayerDims, MacMeter};

pub const POOL_EPS: f64 = 1e-8;
const LEVEL_TOL: f64 = 1e-12;

/// Strictly increasing utilization levels in (0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UtilizationSet {
    levels: Vec<f64>,
}

impl UtilizationSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("utilization set is empty".into()));
        }
        if levels.iter().any(|&u| !(u > 0.0 && u <= 1.0)) {
            return Err(Error::Config(format!("utilization levels must lie in (0, 1]: {levels:?}")));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("utilization levels must be strictly increasing: {levels:?}")));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.levels[0]
    }

    pub fn max(&self) -> f64 {
        *self.levels.last().unwrap()
    }

    pub fn index_of(&self, u: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - u).abs() <= LEVEL_TOL)
    }

    pub fn contains(&self, u: f64) -> bool {
        self.index_of(u).is_some()
    }
}

impl Default for UtilizationSet {
    fn default() -> Self {
        Self {
            levels: vec![0.125, 1.0],
        }
    }
}

impl TryFrom<Vec<f64>> for UtilizationSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UtilizationSet> for Vec<f64> {
    fn from(s: UtilizationSet) -> Self {
        s.levels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    Internal,
    External,
    DropoutSampled,
}

/// One level per frame, every value a member of the set it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilizationSequence {
    pub values: Vec<f64>,
    pub source: GateSource,
}

impl UtilizationSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    /// Width after the input projection.
    pub features: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Centred stats-pool window in frames.
    pub pool_window: usize,
    pub temperature: f64,
    /// Train the gate on a gradient-free copy of the encoder output.
    pub detach_input: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            features: 32,
            heads: 1,
            hidden: 128,
            layers: 1,
            pool_window: 64,
            temperature: 1.0,
            detach_input: true,
        }
    }
}

impl GateConfig {
    pub fn layer_dims(&self) -> LayerDims {
        LayerDims::new(self.features, self.heads, self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_dims().validate()?;
        if self.pool_window == 0 {
            return Err(Error::Config("gate pool_window must be positive".into()));
        }
        if !(self.temperature >= 1.0) {
            return Err(Error::Config(format!("gate temperature {} below 1", self.temperature)));
        }
        Ok(())
    }

    /// Parameter count for `input` encoder channels and `levels` classes.
    pub fn param_count(&self, input: usize, levels: usize) -> usize {
        let f = self.features;
        input * f + f + transformer::block_params(&self.layer_dims(), self.layers) + 2 * f * levels + levels
    }
}

pub fn init_gate<T: Scalar>(b: &mut ParamBuilder<'_, T>, input: usize, cfg: &GateConfig, levels: usize) {
    let f = cfg.features;
    b.uniform("gate.input.w".into(), &[f, input], input);
    b.constant("gate.input.b".into(), &[f], 0.0);
    transformer::init_block(b, "gate.intra", &cfg.layer_dims(), cfg.layers);
    b.uniform("gate.output.w".into(), &[levels, 2 * f], 2 * f);
    b.constant("gate.output.b".into(), &[levels], 0.0);
}

/// Per-frame mean and deviation over a centred window truncated at the
/// edges: `[T, F]` → `[T, 2F]`, means first.
pub fn stats_pool<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 || window == 0 {
        return Err(Error::contract(format!("stats_pool on {:?} with window {window}", x.shape())));
    }
    Ok(window_stats(x, window, T::cast(POOL_EPS)))
}

fn linear_rows<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.dim(0), w.dim(0));
    Tensor::from_fn(&[m, n], |i| crate::tensor::dot(w.row(i % n), x.row(i / n)) + b.data()[i % n])
}

/// Gate logits `[T, K]` from encoder features `[T, F]`.
pub fn gate_logits<T: Scalar>(
    y: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &GateConfig,
    spec: &ChunkSpec,
    meter: &mut MacMeter,
) -> Result<Tensor<T>> {
    let (t, fin) = (y.dim(0), y.dim(1));
    let f = cfg.features;
    let w_in = store.get("gate.input.w")?;
    let z = linear_rows(y, w_in, store.get("gate.input.b")?);
    meter.add("gate.input", (t * fin * f) as u64);
    let chunks = unfold_frames(z.data(), f, spec, None);
    let (s, c) = (spec.n_chunks(), spec.chunk_size);
    let mut out = Vec::with_capacity(chunks.len());
    for si in 0..s {
        let seq = Tensor::new(vec![c, f], chunks[si * c * f..(si + 1) * c * f].to_vec())?;
        let r = block_forward(&seq, None, store, "gate.intra", cfg.layer_dims(), cfg.layers, meter)?;
        out.extend_from_slice(r.data());
    }
    let z = Tensor::new(vec![t, f], fold_frames(&out, f, spec))?;
    let pooled = stats_pool(&z, cfg.pool_window)?;
    let w_out = store.get("gate.output.w")?;
    let k = w_out.dim(0);
    meter.add("gate.output", (t * 2 * f * k) as u64);
    Ok(linear_rows(&pooled, w_out, store.get("gate.output.b")?))
}

/// Graph counterpart of [`gate_logits`].
pub fn graph_gate_logits<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    p: &Bound,
    cfg: &GateConfig,
    spec: &ChunkSpec,
) -> Result<Var> {
    let z = g.linear(y, p.get("gate.input.w")?, Some(p.get("gate.input.b")?))?;
    let z = g.unfold(z, *spec, None)?;
    let z = graph_block(g, z, None, p, "gate.intra", &cfg.layer_dims(), cfg.layers)?;
    let z = g.fold(z, *spec)?;
    let pooled = g.window_mean_std(z, cfg.pool_window, POOL_EPS)?;
    g.linear(pooled, p.get("gate.output.w")?, Some(p.get("gate.output.b")?))
}

/// Logits and probabilities, both `[T, K]`.
#[derive(Clone, Debug)]
pub struct GateDistribution<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// `-ln(-ln(u))` with `u` uniform in (0, 1).
pub fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

pub fn gumbel_tensor<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::cast(gumbel(rng)))
}

pub enum GateMode<'r> {
    Infer,
    Train { rng: &'r mut ChaCha8Rng },
}

/// Row-wise `softmax((logits + noise) / tau)`.
pub fn gate_probs<T: Scalar>(logits: &Tensor<T>, noise: Option<&Tensor<T>>, tau: f64) -> Tensor<T> {
    let k = logits.dim(logits.rank() - 1);
    let inv = T::cast(1.0 / tau);
    let mut p: Vec<T> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, &r)| (r + noise.map_or(T::zero(), |n| n.data()[i])) * inv)
        .collect();
    for row in p.chunks_mut(k) {
        transformer::softmax_in_place(row);
    }
    Tensor::new(logits.shape().to_vec(), p).unwrap()
}

/// Evaluates the gate. Inference adds no noise.
pub fn gate_forward<T: Scalar>(
    y: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &GateConfig,
    spec: &ChunkSpec,
    mode: GateMode<'_>,
    meter: &mut MacMeter,
) -> Result<GateDistribution<T>> {
    let logits = gate_logits(y, store, cfg, spec, meter)?;
    let probs = match mode {
        GateMode::Infer => gate_probs(&logits, None, cfg.temperature),
        GateMode::Train { rng } => {
            let noise = gumbel_tensor(logits.shape(), rng);
            gate_probs(&logits, Some(&noise), cfg.temperature)
        }
    };
    Ok(GateDistribution { logits, probs })
}

/// Most probable level per frame; ties go to the lower level.
pub fn select_utilization<T: Scalar>(probs: &Tensor<T>, set: &UtilizationSet) -> Result<UtilizationSequence> {
    let k = set.len();
    if probs.rank() != 2 || probs.dim(1) != k {
        return Err(Error::contract(format!("probabilities {:?} for {k} levels", probs.shape())));
    }
    let values = probs.data().chunks(k).map(|row| set.levels()[argmax_lower(row)]).collect();
    Ok(UtilizationSequence {
        values,
        source: GateSource::Internal,
    })
}

/// Hard one-hot of `probs` with an identity backward pass.
pub fn ste_sample<T: Scalar>(g: &mut Graph<T>, probs: Var) -> Result<Var> {
    g.straight_through_onehot(probs)
}

/// `U_t = Σ_k onehot[t, k]·u_k`, shape `[T]`.
pub fn differentiable_utilization<T: Scalar>(g: &mut Graph<T>, onehot: Var, set: &UtilizationSet) -> Result<Var> {
    let k = set.len();
    let t = g.shape(onehot)[0];
    let lv = g.constant(Tensor::from_f64(&[k, 1], set.levels())?);
    let u = g.matmul(onehot, lv)?;
    g.reshape(u, &[t])
}

/// With probability `prob`, the index of a uniformly drawn replacement level.
pub fn draw_dropout(prob: f64, k: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let hit = rng.gen::<f64>() < prob;
    let level = rng.gen_range(0..k);
    hit.then_some(level)
}

/// Replaces the whole sequence by one random level with probability `prob`.
pub fn gating_dropout(
    u: UtilizationSequence,
    prob: f64,
    set: &UtilizationSet,
    rng: &mut ChaCha8Rng,
) -> Result<UtilizationSequence> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::contract(format!("dropout probability {prob} outside [0, 1]")));
    }
    Ok(match draw_dropout(prob, set.len(), rng) {
        Some(k) => UtilizationSequence {
            values: vec![set.levels()[k]; u.len()],
            source: GateSource::DropoutSampled,
        },
        None => u,
    })
}

/// Constant sequence at a caller-chosen level.
pub fn external_gating(level: f64, frames: usize, set: &UtilizationSet) -> Result<UtilizationSequence> {
    if !set.contains(level) {
        return Err(Error::contract(format!(
            "external utilization {level} is not one of {:?}",
            set.levels()
        )));
    }
    Ok(UtilizationSequence {
        values: vec![level; frames],
        source: GateSource::External,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn argmax_cases() {
        let set = UtilizationSet::new(vec![0.125, 1.0]).unwrap();
        let p = Tensor::<f64>::from_f64(&[2, 2], &[0.2, 0.8, 0.5, 0.5]).unwrap();
        assert_eq!(select_utilization(&p, &set).unwrap().values, [1.0, 0.125]);
        let set3 = UtilizationSet::new(vec![0.125, 0.5, 1.0]).unwrap();
        let p3 = Tensor::<f64>::from_f64(&[1, 3], &[0.1, 0.7, 0.2]).unwrap();
        assert_eq!(select_utilization(&p3, &set3).unwrap().values, [0.5]);
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = gate_probs(&Tensor::<f64>::zeros(&[3, 4]), None, 1.0);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn set_validation() {
        assert!(UtilizationSet::new(vec![0.5, 0.25]).is_err());
        assert!(UtilizationSet::new(vec![0.0, 1.0]).is_err());
        assert!(UtilizationSet::new(vec![0.25, 1.0]).is_ok());
    }

    #[test]
    fn external_membership() {
        let set = UtilizationSet::new(vec![0.125, 1.0]).unwrap();
        assert!(external_gating(0.5, 3, &set).is_err());
        let set = UtilizationSet::new(vec![0.125, 0.5, 1.0]).unwrap();
        let u = external_gating(0.5, 3, &set).unwrap();
        assert_eq!(u.values, [0.5; 3]);
        assert_eq!(u.source, GateSource::External);
    }

    #[test]
    fn dropout_extremes() {
        let set = UtilizationSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = UtilizationSequence {
            values: vec![1.0, 0.125, 1.0],
            source: GateSource::Internal,
        };
        assert_eq!(gating_dropout(u.clone(), 0.0, &set, &mut rng).unwrap(), u);
        let d = gating_dropout(u, 1.0, &set, &mut rng).unwrap();
        assert_eq!(d.source, GateSource::DropoutSampled);
        assert!(d.values.windows(2).all(|w| w[0] == w[1]) && set.contains(d.values[0]));
    }

    #[test]
    fn stats_pool_window_one() {
        let x = Tensor::<f64>::from_f64(&[3, 1], &[1.0, -2.0, 5.0]).unwrap();
        let p = stats_pool(&x, 1).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, -2.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn full_size_gate_params() {
        let n = GateConfig::default().param_count(256, 2);
        assert!((n as f64 - 21_700.0).abs() / 21_700.0 < 0.1, "{n}");
    }
}
