//! Encoder, dual-path slimmable masker and decoder.
//!
//! Features are kept frame-major (`[T, F]`) throughout. The masker chunks the
//! frame axis into `[S, C, F]`, alternates intra-chunk blocks (sequences of
//! `C` frames) with inter-chunk blocks (sequences of `S` frames at a fixed
//! intra-chunk position), and emits one non-negative mask per speaker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dualpath::{chunk_utilization, fold_frames, unfold_frames, ChunkSpec};
use crate::error::{Error, Result};
use crate::gating::{self, GateConfig, GateMode, UtilizationSequence, UtilizationSet};
use crate::params::{Bound, Init, ParamBuilder, ParamStore};
use crate::profiler::{self, ComplexityReport, MacConvention};
use crate::tensor::{axpy, dot, Scalar, Tensor};
use crate::transformer::{self, block_forward, graph_block, layer_norm_rows, LayerDims, MacMeter, NormOrder, SlimMasks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    /// Encoder channels.
    pub features: usize,
    /// Encoder kernel, in samples.
    pub window: usize,
    /// Encoder stride, in samples.
    pub hop: usize,
    pub repeats: usize,
    pub intra_layers: usize,
    pub inter_layers: usize,
    pub intra_heads: usize,
    pub inter_heads: usize,
    pub intra_hidden: usize,
    pub inter_hidden: usize,
    pub chunk_size: usize,
    pub chunk_hop: usize,
    pub speakers: usize,
    pub sample_rate: u32,
    pub norm: NormOrder,
    pub utilization: UtilizationSet,
    pub gate: GateConfig,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            features: 256,
            window: 16,
            hop: 8,
            repeats: 2,
            intra_layers: 4,
            inter_layers: 4,
            intra_heads: 8,
            inter_heads: 8,
            intra_hidden: 1024,
            inter_hidden: 1024,
            chunk_size: 50,
            chunk_hop: 25,
            speakers: 2,
            sample_rate: 8000,
            norm: NormOrder::Pre,
            utilization: UtilizationSet::default(),
            gate: GateConfig::default(),
        }
    }
}

impl SeparatorConfig {
    /// Small model for desk-scale training runs.
    pub fn tiny() -> Self {
        Self {
            features: 32,
            repeats: 1,
            intra_layers: 1,
            inter_layers: 1,
            intra_heads: 2,
            inter_heads: 2,
            intra_hidden: 64,
            inter_hidden: 64,
            gate: GateConfig {
                features: 16,
                hidden: 32,
                ..GateConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn intra_dims(&self) -> LayerDims {
        LayerDims {
            features: self.features,
            heads: self.intra_heads,
            hidden: self.intra_hidden,
            norm: self.norm,
        }
    }

    pub fn inter_dims(&self) -> LayerDims {
        LayerDims {
            features: self.features,
            heads: self.inter_heads,
            hidden: self.inter_hidden,
            norm: self.norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 || self.hop == 0 || self.hop > self.window {
            return bad(format!("need 0 < hop <= window, got hop {} window {}", self.hop, self.window));
        }
        if self.chunk_size == 0 || self.chunk_hop == 0 || self.chunk_hop > self.chunk_size {
            return bad(format!(
                "need 0 < chunk_hop <= chunk_size, got {} and {}",
                self.chunk_hop, self.chunk_size
            ));
        }
        if self.speakers == 0 || self.repeats == 0 {
            return bad("speakers and repeats must be positive".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        self.intra_dims().validate()?;
        self.inter_dims().validate()?;
        self.gate.validate()
    }

    /// Encoder frames for `samples` input samples.
    pub fn frames(&self, samples: usize) -> Result<usize> {
        if samples < self.window {
            return Err(Error::contract(format!(
                "input of {samples} samples is shorter than the {}-sample window",
                self.window
            )));
        }
        Ok((samples - self.window) / self.hop + 1)
    }

    pub fn chunk_spec(&self, frames: usize) -> Result<ChunkSpec> {
        ChunkSpec::new(frames, self.chunk_size, self.chunk_hop)
    }
}

/// Registers every separator and gate parameter.
pub fn init_params<T: Scalar>(cfg: &SeparatorConfig, rng: &mut ChaCha8Rng) -> (ParamStore<T>, Vec<(String, Init)>) {
    let (f, w, j) = (cfg.features, cfg.window, cfg.speakers);
    let mut b = ParamBuilder::new(rng);
    b.uniform("encoder.w".into(), &[f, 1, w], w);
    b.constant("masker.norm.gamma".into(), &[f], 1.0);
    b.constant("masker.norm.beta".into(), &[f], 0.0);
    b.uniform("masker.input.w".into(), &[f, f], f);
    for r in 0..cfg.repeats {
        transformer::init_block(&mut b, &format!("masker.rep{r}.intra"), &cfg.intra_dims(), cfg.intra_layers);
        transformer::init_block(&mut b, &format!("masker.rep{r}.inter"), &cfg.inter_dims(), cfg.inter_layers);
    }
    b.constant("masker.prelu".into(), &[1], 0.25);
    b.uniform("masker.head.w".into(), &[j * f, f], f);
    b.constant("masker.head.b".into(), &[j * f], 0.0);
    for gate in ["masker.tanh", "masker.sigmoid"] {
        b.uniform(format!("{gate}.w"), &[f, f], f);
        b.constant(format!("{gate}.b"), &[f], 0.0);
    }
    b.uniform("decoder.w".into(), &[f, 1, w], f);
    gating::init_gate(&mut b, f, &cfg.gate, cfg.utilization.len());
    b.finish()
}

// ---- kernel path --------------------------------------------------------

/// `[T, F]` encoder features, ReLU applied.
pub fn encode<T: Scalar>(y: &[T], w: &Tensor<T>, cfg: &SeparatorConfig, meter: &mut MacMeter) -> Result<Tensor<T>> {
    let t = cfg.frames(y.len())?;
    let (f, k) = (cfg.features, cfg.window);
    let mut out = vec![T::zero(); t * f];
    for ti in 0..t {
        let x = &y[ti * cfg.hop..ti * cfg.hop + k];
        for fi in 0..f {
            out[ti * f + fi] = dot(&w.data()[fi * k..(fi + 1) * k], x).max(T::zero());
        }
    }
    meter.add("encoder", (t * f * k) as u64);
    Tensor::new(vec![t, f], out)
}

/// Transposed convolution of `[T, F]` back to `(T-1)·hop + window` samples.
pub fn decode<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, cfg: &SeparatorConfig, meter: &mut MacMeter) -> Result<Vec<T>> {
    if x.rank() != 2 || x.dim(1) != cfg.features || x.dim(0) == 0 {
        return Err(Error::contract(format!("decoder input {:?}", x.shape())));
    }
    let (t, f, k) = (x.dim(0), cfg.features, cfg.window);
    let mut out = vec![T::zero(); (t - 1) * cfg.hop + k];
    for ti in 0..t {
        let seg = &mut out[ti * cfg.hop..ti * cfg.hop + k];
        for (fi, &v) in x.row(ti).iter().enumerate() {
            if v != T::zero() {
                axpy(v, &w.data()[fi * k..(fi + 1) * k], seg);
            }
        }
    }
    meter.add("decoder", (t * f * k) as u64);
    Ok(out)
}

fn linear_rows<T: Scalar>(x: &[T], width: usize, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Vec<T> {
    let n = w.dim(0);
    let rows = x.len() / width;
    let mut out = vec![T::zero(); rows * n];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        for j in 0..n {
            out[r * n + j] = dot(w.row(j), xr) + b.map_or(T::zero(), |b| b.data()[j]);
        }
    }
    out
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Masks `[J, T, F]` for encoder features `[T, F]`; `u = None` runs every
/// layer at full width through the static kernels.
pub fn mask<T: Scalar>(
    y: &Tensor<T>,
    u: Option<&[f64]>,
    store: &ParamStore<T>,
    cfg: &SeparatorConfig,
    meter: &mut MacMeter,
) -> Result<Tensor<T>> {
    let (t, f) = (y.dim(0), cfg.features);
    if let Some(u) = u {
        if u.len() != t {
            return Err(Error::contract(format!("{} utilization values for {t} frames", u.len())));
        }
    }
    let spec = cfg.chunk_spec(t)?;
    let (s, c) = (spec.n_chunks(), spec.chunk_size);
    let z = layer_norm_rows(y, store.get("masker.norm.gamma")?, store.get("masker.norm.beta")?);
    let z = linear_rows(z.data(), f, store.get("masker.input.w")?, None);
    meter.add("masker.input", (t * f * f) as u64);
    let mut z = unfold_frames(&z, f, &spec, None);
    let uc = u
        .map(|u| chunk_utilization(u, cfg.utilization.levels(), spec))
        .transpose()?;
    for r in 0..cfg.repeats {
        let intra = format!("masker.rep{r}.intra");
        for si in 0..s {
            let seq = Tensor::new(vec![c, f], z[si * c * f..(si + 1) * c * f].to_vec())?;
            let us = uc.as_ref().map(|uc| &uc.data()[si * c..(si + 1) * c]);
            let out = block_forward(&seq, us, store, &intra, cfg.intra_dims(), cfg.intra_layers, meter)?;
            z[si * c * f..(si + 1) * c * f].copy_from_slice(out.data());
        }
        let inter = format!("masker.rep{r}.inter");
        for ci in 0..c {
            let mut seq = Vec::with_capacity(s * f);
            for si in 0..s {
                seq.extend_from_slice(&z[(si * c + ci) * f..(si * c + ci + 1) * f]);
            }
            let seq = Tensor::new(vec![s, f], seq)?;
            let us: Option<Vec<f64>> = uc.as_ref().map(|uc| (0..s).map(|si| uc.data()[si * c + ci]).collect());
            let out = block_forward(&seq, us.as_deref(), store, &inter, cfg.inter_dims(), cfg.inter_layers, meter)?;
            for si in 0..s {
                z[(si * c + ci) * f..(si * c + ci + 1) * f].copy_from_slice(out.row(si));
            }
        }
    }
    let slope = store.get("masker.prelu")?.item();
    for v in z.iter_mut() {
        if *v <= T::zero() {
            *v = *v * slope;
        }
    }
    let j = cfg.speakers;
    let heads = linear_rows(&z, f, store.get("masker.head.w")?, Some(store.get("masker.head.b")?));
    meter.add("masker.head", (s * c * f * j * f) as u64);
    let folded = fold_frames(&heads, j * f, &spec);
    let (wt, bt) = (store.get("masker.tanh.w")?, store.get("masker.tanh.b")?);
    let (ws, bs) = (store.get("masker.sigmoid.w")?, store.get("masker.sigmoid.b")?);
    let mut masks = vec![T::zero(); j * t * f];
    for ti in 0..t {
        for ji in 0..j {
            let o = &folded[(ti * j + ji) * f..(ti * j + ji + 1) * f];
            for fi in 0..f {
                let a = (dot(wt.row(fi), o) + bt.data()[fi]).tanh();
                let b = sigmoid(dot(ws.row(fi), o) + bs.data()[fi]);
                masks[(ji * t + ti) * f + fi] = (a * b).max(T::zero());
            }
        }
    }
    meter.add("masker.output", (t * j * 2 * f * f) as u64);
    Tensor::new(vec![j, t, f], masks)
}

/// How the utilization sequence is chosen at inference.
#[derive(Clone, Debug, PartialEq)]
pub enum Gating {
    /// The learned gate decides per frame.
    Internal,
    /// A fixed level from the utilization set; the gate is not evaluated.
    External(f64),
    /// A caller-supplied per-frame sequence of levels.
    Sequence(Vec<f64>),
    /// Every layer at full width through the static kernels.
    Static,
}

pub struct Separation<T> {
    /// One signal per speaker, each as long as the input.
    pub sources: Vec<Vec<T>>,
    pub utilization: UtilizationSequence,
    pub report: ComplexityReport,
    pub meter: MacMeter,
}

/// A configured model with its parameters.
#[derive(Clone, Debug)]
pub struct Separator<T> {
    pub config: SeparatorConfig,
    pub params: ParamStore<T>,
    pub inits: Vec<(String, Init)>,
}

impl<T: Scalar> Separator<T> {
    pub fn new(config: SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, inits) = init_params(&config, &mut rng);
        Ok(Self { config, params, inits })
    }

    pub fn from_parts(config: SeparatorConfig, params: ParamStore<T>, inits: Vec<(String, Init)>) -> Result<Self> {
        config.validate()?;
        let expected = init_params::<T>(&config, &mut ChaCha8Rng::seed_from_u64(0)).0;
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters present, config defines {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(Self { config, params, inits })
    }

    pub fn encode(&self, y: &[T], meter: &mut MacMeter) -> Result<Tensor<T>> {
        encode(y, self.params.get("encoder.w")?, &self.config, meter)
    }

    /// Gate decision for encoder features `[T, F]`.
    pub fn predict_utilization(&self, feats: &Tensor<T>, meter: &mut MacMeter) -> Result<UtilizationSequence> {
        let spec = self.config.chunk_spec(feats.dim(0))?;
        let dist = gating::gate_forward(feats, &self.params, &self.config.gate, &spec, GateMode::Infer, meter)?;
        gating::select_utilization(&dist.probs, &self.config.utilization)
    }

    pub fn separate(&self, y: &[T], gating_mode: &Gating) -> Result<Separation<T>> {
        let cfg = &self.config;
        let mut meter = MacMeter::new();
        let feats = self.encode(y, &mut meter)?;
        let t = feats.dim(0);
        let (util, slim) = match gating_mode {
            Gating::Internal => (self.predict_utilization(&feats, &mut meter)?, true),
            Gating::External(u) => (gating::external_gating(*u, t, &cfg.utilization)?, true),
            Gating::Sequence(u) => {
                if u.len() != t {
                    return Err(Error::contract(format!("{} utilization values for {t} frames", u.len())));
                }
                if let Some(v) = u.iter().find(|&&v| !cfg.utilization.contains(v)) {
                    return Err(Error::contract(format!("{v} is not a utilization level")));
                }
                let seq = UtilizationSequence {
                    values: u.clone(),
                    source: gating::GateSource::External,
                };
                (seq, true)
            }
            Gating::Static => (
                UtilizationSequence {
                    values: vec![1.0; t],
                    source: gating::GateSource::External,
                },
                false,
            ),
        };
        let masks = mask(&feats, slim.then_some(&util.values[..]), &self.params, cfg, &mut meter)?;
        let dec = self.params.get("decoder.w")?;
        let f = cfg.features;
        let mut sources = Vec::with_capacity(cfg.speakers);
        for j in 0..cfg.speakers {
            let m = &masks.data()[j * t * f..(j + 1) * t * f];
            let masked = Tensor::from_fn(&[t, f], |i| m[i] * feats.data()[i]);
            let mut s = decode(&masked, dec, cfg, &mut meter)?;
            s.resize(y.len(), T::zero());
            sources.push(s);
        }
        // The static network also runs chunk padding at full width.
        let full;
        let report_cfg = if slim {
            cfg
        } else {
            full = SeparatorConfig {
                utilization: UtilizationSet::new(vec![1.0])?,
                ..cfg.clone()
            };
            &full
        };
        let report = profiler::count_macs(
            report_cfg,
            &util.values,
            y.len(),
            matches!(gating_mode, Gating::Internal),
            MacConvention::Sliced,
        )?;
        Ok(Separation {
            sources,
            utilization: util,
            report,
            meter,
        })
    }
}

// ---- graph path ---------------------------------------------------------

/// Graph-level utilization control.
pub enum GraphGating<'a, T> {
    /// Full width everywhere, no masks.
    Static,
    /// Per-frame one-hot over the levels, `[T, K]`.
    OneHot(Var),
    /// Gate evaluated in the graph; `noise` (`[T, K]`) perturbs the logits.
    Gate { noise: Option<&'a Tensor<T>> },
}

pub struct GraphOutputs {
    /// Speaker estimates, each `[L]` with `L` the input length.
    pub estimates: Vec<Var>,
    /// Differentiable per-frame utilization `[T]`, when gated.
    pub utilization: Option<Var>,
    /// Per-frame one-hot `[T, K]`, when gated.
    pub onehot: Option<Var>,
    pub frames: usize,
}

/// Gate probabilities `[T, K]` from encoder features inside the graph.
pub fn graph_gate_probs<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    p: &Bound,
    cfg: &SeparatorConfig,
    noise: Option<&Tensor<T>>,
) -> Result<Var> {
    let t = g.shape(feats)[0];
    let spec = cfg.chunk_spec(t)?;
    let input = if cfg.gate.detach_input { g.detach(feats) } else { feats };
    let mut logits = gating::graph_gate_logits(g, input, p, &cfg.gate, &spec)?;
    if let Some(n) = noise {
        let nv = g.constant(n.clone());
        logits = g.add(logits, nv)?;
    }
    let scaled = g.scale(logits, T::cast(1.0 / cfg.gate.temperature))?;
    g.softmax(scaled)
}

/// Graph masker: `feats` `[T, F]` → masks `[J, T, F]`.
pub fn graph_mask<T: Scalar>(
    g: &mut Graph<T>,
    feats: Var,
    onehot: Option<Var>,
    p: &Bound,
    cfg: &SeparatorConfig,
) -> Result<Var> {
    let t = g.shape(feats)[0];
    let (f, j) = (cfg.features, cfg.speakers);
    let spec = cfg.chunk_spec(t)?;
    let k = cfg.utilization.len();
    let (intra_masks, inter_masks) = match onehot {
        Some(oh) => {
            let pad: Vec<T> = (0..k).map(|i| if i == 0 { T::one() } else { T::zero() }).collect();
            let ohc = g.unfold(oh, spec, Some(&pad))?;
            let intra = SlimMasks::from_onehot(g, ohc, cfg.utilization.levels(), &cfg.intra_dims())?;
            let oht = g.permute(ohc, &[1, 0, 2])?;
            let inter = SlimMasks::from_onehot(g, oht, cfg.utilization.levels(), &cfg.inter_dims())?;
            (Some(intra), Some(inter))
        }
        None => (None, None),
    };
    let z = g.layer_norm(
        feats,
        p.get("masker.norm.gamma")?,
        p.get("masker.norm.beta")?,
        transformer::NORM_EPS,
    )?;
    let z = g.linear(z, p.get("masker.input.w")?, None)?;
    let mut z = g.unfold(z, spec, None)?;
    for r in 0..cfg.repeats {
        z = graph_block(
            g,
            z,
            intra_masks.as_ref(),
            p,
            &format!("masker.rep{r}.intra"),
            &cfg.intra_dims(),
            cfg.intra_layers,
        )?;
        let zt = g.permute(z, &[1, 0, 2])?;
        let zt = graph_block(
            g,
            zt,
            inter_masks.as_ref(),
            p,
            &format!("masker.rep{r}.inter"),
            &cfg.inter_dims(),
            cfg.inter_layers,
        )?;
        z = g.permute(zt, &[1, 0, 2])?;
    }
    let z = g.prelu(z, p.get("masker.prelu")?)?;
    let heads = g.linear(z, p.get("masker.head.w")?, Some(p.get("masker.head.b")?))?;
    let folded = g.fold(heads, spec)?;
    let folded = g.reshape(folded, &[t, j, f])?;
    let folded = g.permute(folded, &[1, 0, 2])?;
    let a = g.linear(folded, p.get("masker.tanh.w")?, Some(p.get("masker.tanh.b")?))?;
    let a = g.tanh(a)?;
    let b = g.linear(folded, p.get("masker.sigmoid.w")?, Some(p.get("masker.sigmoid.b")?))?;
    let b = g.sigmoid(b)?;
    let m = g.mul(a, b)?;
    g.relu(m)
}

/// Full differentiable separator on one mixture.
pub fn graph_separate<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &SeparatorConfig,
    mixture: &[T],
    gating_mode: GraphGating<'_, T>,
) -> Result<GraphOutputs> {
    let len = mixture.len();
    let frames = cfg.frames(len)?;
    let x = g.constant(Tensor::new(vec![1, len], mixture.to_vec())?);
    let feats = g.conv1d(x, p.get("encoder.w")?, cfg.hop)?;
    let feats = g.relu(feats)?;
    let feats = g.transpose(feats, 0, 1)?;
    let onehot = match gating_mode {
        GraphGating::Static => None,
        GraphGating::OneHot(oh) => Some(oh),
        GraphGating::Gate { noise } => {
            let probs = graph_gate_probs(g, feats, p, cfg, noise)?;
            Some(gating::ste_sample(g, probs)?)
        }
    };
    let utilization = match onehot {
        Some(oh) => Some(gating::differentiable_utilization(g, oh, &cfg.utilization)?),
        None => None,
    };
    let masks = graph_mask(g, feats, onehot, p, cfg)?;
    let masked = g.mul(masks, feats)?;
    let (j, f) = (cfg.speakers, cfg.features);
    let mut estimates = Vec::with_capacity(j);
    for ji in 0..j {
        let mj = g.slice(masked, 0, ji, 1)?;
        let mj = g.reshape(mj, &[frames, f])?;
        let mj = g.transpose(mj, 0, 1)?;
        let s = g.conv_transpose1d(mj, p.get("decoder.w")?, cfg.hop)?;
        let out_len = g.shape(s)[1];
        let s = g.reshape(s, &[out_len])?;
        let s = if out_len < len {
            let pad = g.constant(Tensor::zeros(&[len - out_len]));
            g.concat(&[s, pad], 0)?
        } else {
            s
        };
        estimates.push(s);
    }
    Ok(GraphOutputs {
        estimates,
        utilization,
        onehot,
        frames,
    })
}

/// One-hot `[T, K]` for a constant level index.
pub fn constant_onehot<T: Scalar>(frames: usize, levels: usize, index: usize) -> Tensor<T> {
    Tensor::from_fn(&[frames, levels], |i| if i % levels == index { T::one() } else { T::zero() })
}

/// One-hot `[T, K]` matching a utilization sequence.
pub fn onehot_for<T: Scalar>(u: &[f64], set: &UtilizationSet) -> Result<Tensor<T>> {
    let k = set.len();
    let idx: Vec<usize> = u
        .iter()
        .map(|&v| set.index_of(v).ok_or_else(|| Error::contract(format!("{v} is not a utilization level"))))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_fn(&[u.len(), k], |i| if idx[i / k] == i % k { T::one() } else { T::zero() }))
}
