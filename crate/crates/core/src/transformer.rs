//! Static and slimmable transformer layers.
//!
//! Two implementations share one parameter layout:
//!
//! * plain kernels on `[M, F]` frame-major tensors, used for inference and
//!   MAC instrumentation. The slim kernels only touch the active head and
//!   neuron prefixes.
//! * differentiable graph versions on `[B, M, F]` batches, used for
//!   training. They evaluate every head and neuron and multiply the inactive
//!   ones by zero, so the utilization masks stay differentiable.
//!
//! Projection rows are grouped by head (`w_q`, `w_k`, `w_v` are `[F, F]`
//! with head `h` owning rows `h·d..(h+1)·d`), the output projection is
//! stored as `[H·d, F]` and the second feed-forward matrix as `[D, F]`, so
//! every slim variant reads contiguous prefixes.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{norm_stats, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{axpy, dot, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    #[default]
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub features: usize,
    pub heads: usize,
    pub hidden: usize,
    #[serde(default)]
    pub norm: NormOrder,
}

impl LayerDims {
    pub fn new(features: usize, heads: usize, hidden: usize) -> Self {
        Self {
            features,
            heads,
            hidden,
            norm: NormOrder::Pre,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.features / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("layer dimensions must be positive: {self:?}")));
        }
        if !self.features.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} features do not split into {} heads",
                self.features, self.heads
            )));
        }
        Ok(())
    }

    /// Parameter count of one layer.
    pub fn layer_params(&self) -> usize {
        let (f, d) = (self.features, self.hidden);
        4 * f * f + 2 * f * d + d + f + 4 * f
    }
}

/// Number of active units out of `n` at utilization `u`: `ceil(u·n)`,
/// never below one.
pub fn active_count(u: f64, n: usize) -> usize {
    (((u * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

pub fn check_utilization(u: &[f64]) -> Result<()> {
    match u.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        Some(v) => Err(Error::contract(format!("utilization {v} outside (0, 1]"))),
        None => Ok(()),
    }
}

/// Fixed sinusoidal encoding, `[M, F]`.
pub fn positional_encoding<T: Scalar>(m: usize, f: usize) -> Tensor<T> {
    Tensor::from_fn(&[m, f], |i| {
        let (pos, j) = (i / f, i % f);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / f as f64);
        let angle = pos as f64 / rate;
        T::cast(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Multiply–accumulate tally keyed by site.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacMeter {
    counts: BTreeMap<String, u64>,
}

impl MacMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, site: &str, n: u64) {
        if n > 0 {
            *self.counts.entry(site.to_string()).or_default() += n;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Sum over sites starting with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn sites(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }
}

/// Registers the parameters of one layer under `prefix`.
pub fn init_layer<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, dims: &LayerDims) {
    let (f, d) = (dims.features, dims.hidden);
    b.constant(format!("{prefix}.norm1.gamma"), &[f], 1.0);
    b.constant(format!("{prefix}.norm1.beta"), &[f], 0.0);
    for w in ["w_q", "w_k", "w_v", "w_o"] {
        b.uniform(format!("{prefix}.attn.{w}"), &[f, f], f);
    }
    b.constant(format!("{prefix}.norm2.gamma"), &[f], 1.0);
    b.constant(format!("{prefix}.norm2.beta"), &[f], 0.0);
    b.uniform(format!("{prefix}.ffw.w1"), &[d, f], f);
    b.constant(format!("{prefix}.ffw.b1"), &[d], 0.0);
    b.uniform(format!("{prefix}.ffw.w2"), &[d, f], d);
    b.constant(format!("{prefix}.ffw.b2"), &[f], 0.0);
}

/// Registers a block of `n_layers` layers plus its closing norm.
pub fn init_block<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, dims: &LayerDims, n_layers: usize) {
    for l in 0..n_layers {
        init_layer(b, &format!("{prefix}.layer{l}"), dims);
    }
    b.constant(format!("{prefix}.norm.gamma"), &[dims.features], 1.0);
    b.constant(format!("{prefix}.norm.beta"), &[dims.features], 0.0);
}

pub fn block_params(dims: &LayerDims, n_layers: usize) -> usize {
    n_layers * dims.layer_params() + 2 * dims.features
}

// ---- kernel path --------------------------------------------------------

pub struct AttnWeights<'a, T> {
    pub heads: usize,
    pub w_q: &'a Tensor<T>,
    pub w_k: &'a Tensor<T>,
    pub w_v: &'a Tensor<T>,
    pub w_o: &'a Tensor<T>,
}

pub struct FfwWeights<'a, T> {
    pub w1: &'a Tensor<T>,
    pub b1: &'a Tensor<T>,
    pub w2: &'a Tensor<T>,
    pub b2: &'a Tensor<T>,
}

pub struct LayerWeights<'a, T> {
    pub dims: LayerDims,
    pub norm1: (&'a Tensor<T>, &'a Tensor<T>),
    pub attn: AttnWeights<'a, T>,
    pub norm2: (&'a Tensor<T>, &'a Tensor<T>),
    pub ffw: FfwWeights<'a, T>,
}

impl<'a, T: Scalar> LayerWeights<'a, T> {
    pub fn from_store(store: &'a ParamStore<T>, prefix: &str, dims: LayerDims) -> Result<Self> {
        dims.validate()?;
        let p = |s: &str| store.get(&format!("{prefix}.{s}"));
        Ok(Self {
            dims,
            norm1: (p("norm1.gamma")?, p("norm1.beta")?),
            attn: AttnWeights {
                heads: dims.heads,
                w_q: p("attn.w_q")?,
                w_k: p("attn.w_k")?,
                w_v: p("attn.w_v")?,
                w_o: p("attn.w_o")?,
            },
            norm2: (p("norm2.gamma")?, p("norm2.beta")?),
            ffw: FfwWeights {
                w1: p("ffw.w1")?,
                b1: p("ffw.b1")?,
                w2: p("ffw.w2")?,
                b2: p("ffw.b2")?,
            },
        })
    }
}

fn rows_of<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::contract(format!("expected [frames, features], got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1)))
}

/// Per-row layer normalisation of `[M, F]`.
pub fn layer_norm_rows<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let f = x.dim(1);
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.numel()];
    for (r, row) in x.data().chunks(f).enumerate() {
        let (mean, rstd) = norm_stats(row, T::cast(NORM_EPS));
        for j in 0..f {
            out[r * f + j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for e in v.iter_mut() {
        *e = (*e - max).exp();
        s = s + *e;
    }
    for e in v.iter_mut() {
        *e = *e / s;
    }
}

/// Attention of one head over the frame subset `frames`, accumulated into
/// `y`. Returns the MACs spent.
fn attend_head<T: Scalar>(x: &Tensor<T>, frames: &[usize], h: usize, w: &AttnWeights<'_, T>, y: &mut [T]) -> u64 {
    let f = x.dim(1);
    let d = f / w.heads;
    let n = frames.len();
    let scale = T::one() / T::cast(d as f64).sqrt();
    let mut q = vec![T::zero(); n * d];
    let mut k = vec![T::zero(); n * d];
    let mut v = vec![T::zero(); n * d];
    for (i, &m) in frames.iter().enumerate() {
        let xm = x.row(m);
        for r in 0..d {
            let row = h * d + r;
            q[i * d + r] = dot(w.w_q.row(row), xm);
            k[i * d + r] = dot(w.w_k.row(row), xm);
            v[i * d + r] = dot(w.w_v.row(row), xm);
        }
    }
    let mut scores = vec![T::zero(); n];
    let mut o = vec![T::zero(); d];
    for (i, &m) in frames.iter().enumerate() {
        let qi = &q[i * d..(i + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
        softmax_in_place(&mut scores);
        o.iter_mut().for_each(|e| *e = T::zero());
        for (j, &a) in scores.iter().enumerate() {
            axpy(a, &v[j * d..(j + 1) * d], &mut o);
        }
        let ym = &mut y[m * f..(m + 1) * f];
        for (r, &or) in o.iter().enumerate() {
            axpy(or, w.w_o.row(h * d + r), ym);
        }
    }
    let (n, d, f) = (n as u64, d as u64, f as u64);
    3 * n * d * f + 2 * n * n * d + n * d * f
}

/// Multi-head self-attention over all frames and heads, `[M, F]` → `[M, F]`.
pub fn mha_static<T: Scalar>(x: &Tensor<T>, w: &AttnWeights<'_, T>, meter: &mut MacMeter, site: &str) -> Result<Tensor<T>> {
    let (m, f) = rows_of(x)?;
    if f % w.heads != 0 {
        return Err(Error::Config(format!("{f} features do not split into {} heads", w.heads)));
    }
    let all: Vec<usize> = (0..m).collect();
    let mut y = vec![T::zero(); m * f];
    let mut macs = 0;
    for h in 0..w.heads {
        macs += attend_head(x, &all, h, w, &mut y);
    }
    meter.add(site, macs);
    Tensor::new(vec![m, f], y)
}

/// Slimmable attention: frame `m` runs heads `0..ceil(u[m]·H)`, and head `h`
/// attends only among the frames where it is active.
pub fn mha_slim<T: Scalar>(
    x: &Tensor<T>,
    u: &[f64],
    w: &AttnWeights<'_, T>,
    meter: &mut MacMeter,
    site: &str,
) -> Result<Tensor<T>> {
    let (m, f) = rows_of(x)?;
    if u.len() != m {
        return Err(Error::contract(format!("{} utilization values for {m} frames", u.len())));
    }
    check_utilization(u)?;
    if f % w.heads != 0 {
        return Err(Error::Config(format!("{f} features do not split into {} heads", w.heads)));
    }
    let counts: Vec<usize> = u.iter().map(|&v| active_count(v, w.heads)).collect();
    let mut y = vec![T::zero(); m * f];
    let mut macs = 0;
    for h in 0..w.heads {
        let frames = active_frames(&counts, h);
        if frames.is_empty() {
            continue;
        }
        macs += attend_head(x, &frames, h, w, &mut y);
    }
    meter.add(site, macs);
    Tensor::new(vec![m, f], y)
}

/// Frames at which unit `h` is active given per-frame active counts.
pub fn active_frames(counts: &[usize], h: usize) -> Vec<usize> {
    counts.iter().enumerate().filter(|(_, &c)| c > h).map(|(m, _)| m).collect()
}

fn ffw_frame<T: Scalar>(xm: &[T], units: usize, w: &FfwWeights<'_, T>, hidden: &mut [T], ym: &mut [T]) {
    let b1 = w.b1.data();
    for (j, hj) in hidden.iter_mut().enumerate().take(units) {
        *hj = (dot(w.w1.row(j), xm) + b1[j]).max(T::zero());
    }
    ym.copy_from_slice(w.b2.data());
    for (j, &hj) in hidden.iter().enumerate().take(units) {
        if hj != T::zero() {
            axpy(hj, w.w2.row(j), ym);
        }
    }
}

/// Position-wise feed-forward `W2·ReLU(W1·z + b1) + b2`.
pub fn ffw_static<T: Scalar>(x: &Tensor<T>, w: &FfwWeights<'_, T>, meter: &mut MacMeter, site: &str) -> Result<Tensor<T>> {
    let (m, f) = rows_of(x)?;
    let d = w.w1.dim(0);
    let mut y = vec![T::zero(); m * f];
    let mut hidden = vec![T::zero(); d];
    for r in 0..m {
        ffw_frame(x.row(r), d, w, &mut hidden, &mut y[r * f..(r + 1) * f]);
    }
    meter.add(site, 2 * (m * d * f) as u64);
    Tensor::new(vec![m, f], y)
}

/// Feed-forward using the first `ceil(u[m]·D)` hidden units at frame `m`.
pub fn ffw_slim<T: Scalar>(
    x: &Tensor<T>,
    u: &[f64],
    w: &FfwWeights<'_, T>,
    meter: &mut MacMeter,
    site: &str,
) -> Result<Tensor<T>> {
    let (m, f) = rows_of(x)?;
    if u.len() != m {
        return Err(Error::contract(format!("{} utilization values for {m} frames", u.len())));
    }
    check_utilization(u)?;
    let d = w.w1.dim(0);
    let mut y = vec![T::zero(); m * f];
    let mut hidden = vec![T::zero(); d];
    let mut macs = 0u64;
    for r in 0..m {
        let units = active_count(u[r], d);
        ffw_frame(x.row(r), units, w, &mut hidden, &mut y[r * f..(r + 1) * f]);
        macs += 2 * (units * f) as u64;
    }
    meter.add(site, macs);
    Tensor::new(vec![m, f], y)
}

fn add_in_place<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x = *x + *y;
    }
}

/// One transformer layer; `u = None` runs the static sublayers.
pub fn layer_forward<T: Scalar>(
    x: &Tensor<T>,
    u: Option<&[f64]>,
    w: &LayerWeights<'_, T>,
    meter: &mut MacMeter,
    site: &str,
) -> Result<Tensor<T>> {
    let attn_site = format!("{site}.attn");
    let ffw_site = format!("{site}.ffw");
    let attn = |z: &Tensor<T>, meter: &mut MacMeter| match u {
        Some(u) => mha_slim(z, u, &w.attn, meter, &attn_site),
        None => mha_static(z, &w.attn, meter, &attn_site),
    };
    let ffw = |z: &Tensor<T>, meter: &mut MacMeter| match u {
        Some(u) => ffw_slim(z, u, &w.ffw, meter, &ffw_site),
        None => ffw_static(z, &w.ffw, meter, &ffw_site),
    };
    match w.dims.norm {
        NormOrder::Pre => {
            let mut h = x.clone();
            add_in_place(&mut h, &attn(&layer_norm_rows(x, w.norm1.0, w.norm1.1), meter)?);
            let mut out = h.clone();
            add_in_place(&mut out, &ffw(&layer_norm_rows(&h, w.norm2.0, w.norm2.1), meter)?);
            Ok(out)
        }
        NormOrder::Post => {
            let mut h = x.clone();
            add_in_place(&mut h, &attn(x, meter)?);
            let h = layer_norm_rows(&h, w.norm1.0, w.norm1.1);
            let mut out = h.clone();
            add_in_place(&mut out, &ffw(&h, meter)?);
            Ok(layer_norm_rows(&out, w.norm2.0, w.norm2.1))
        }
    }
}

/// `x + LN(layers(x + PE))` over a `[M, F]` sequence.
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    u: Option<&[f64]>,
    store: &ParamStore<T>,
    prefix: &str,
    dims: LayerDims,
    n_layers: usize,
    meter: &mut MacMeter,
) -> Result<Tensor<T>> {
    let (m, f) = rows_of(x)?;
    let mut z = x.clone();
    add_in_place(&mut z, &positional_encoding(m, f));
    for l in 0..n_layers {
        let lp = format!("{prefix}.layer{l}");
        let w = LayerWeights::from_store(store, &lp, dims)?;
        z = layer_forward(&z, u, &w, meter, &lp)?;
    }
    let mut out = layer_norm_rows(
        &z,
        store.get(&format!("{prefix}.norm.gamma"))?,
        store.get(&format!("{prefix}.norm.beta"))?,
    );
    add_in_place(&mut out, x);
    Ok(out)
}

// ---- graph path ---------------------------------------------------------

/// Differentiable per-frame width masks for a `[B, M]` batch of frames.
pub struct SlimMasks {
    /// `[B, M, H, 1]`, one for active heads.
    pub heads: Var,
    /// `[B, M, D]`, one for active hidden units.
    pub neurons: Var,
    /// Key admission for the restricted softmax, `[B·H, M, M]` flattened.
    pub keys: Rc<Vec<bool>>,
}

impl SlimMasks {
    /// Builds masks from a one-hot level choice `onehot` (`[B, M, K]`).
    ///
    /// The masks are linear in `onehot`, so a straight-through one-hot passes
    /// gradients from every masked sublayer back to the gate.
    pub fn from_onehot<T: Scalar>(g: &mut Graph<T>, onehot: Var, levels: &[f64], dims: &LayerDims) -> Result<Self> {
        let shape = g.shape(onehot).to_vec();
        if shape.len() != 3 || shape[2] != levels.len() {
            return Err(Error::contract(format!(
                "one-hot shape {shape:?} does not match {} levels",
                levels.len()
            )));
        }
        let (b, m, k) = (shape[0], shape[1], shape[2]);
        let (h, d) = (dims.heads, dims.hidden);
        let head_ind = Tensor::from_fn(&[k, h], |i| T::cast(if (i % h) < active_count(levels[i / h], h) { 1.0 } else { 0.0 }));
        let unit_ind = Tensor::from_fn(&[k, d], |i| T::cast(if (i % d) < active_count(levels[i / d], d) { 1.0 } else { 0.0 }));
        let head_ind = g.constant(head_ind);
        let unit_ind = g.constant(unit_ind);
        let heads = g.matmul(onehot, head_ind)?;
        let heads = g.reshape(heads, &[b, m, h, 1])?;
        let neurons = g.matmul(onehot, unit_ind)?;

        let oh = g.value(onehot).data();
        let counts: Vec<usize> = (0..b * m)
            .map(|r| {
                let row = &oh[r * k..(r + 1) * k];
                let lvl = crate::autodiff::argmax_lower(row);
                active_count(levels[lvl], h)
            })
            .collect();
        let mut keys = vec![false; b * h * m * m];
        for bi in 0..b {
            for hi in 0..h {
                for q in 0..m {
                    let base = ((bi * h + hi) * m + q) * m;
                    for j in 0..m {
                        keys[base + j] = counts[bi * m + j] > hi;
                    }
                }
            }
        }
        Ok(Self {
            heads,
            neurons,
            keys: Rc::new(keys),
        })
    }
}

fn graph_norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, NORM_EPS)
}

/// Attention on `[B, M, F]`; with masks, inactive heads are zeroed and keys
/// are restricted to each head's active frames.
pub fn graph_mha<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    masks: Option<&SlimMasks>,
    p: &Bound,
    prefix: &str,
    dims: &LayerDims,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != dims.features {
        return Err(Error::contract(format!("attention input {s:?} for {dims:?}")));
    }
    let (b, m, f) = (s[0], s[1], s[2]);
    let (h, d) = (dims.heads, dims.head_dim());
    let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[b, m, h, d])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[b * h, m, d])
    };
    let q = g.linear(x, p.get(&format!("{prefix}.w_q"))?, None)?;
    let k = g.linear(x, p.get(&format!("{prefix}.w_k"))?, None)?;
    let v = g.linear(x, p.get(&format!("{prefix}.w_v"))?, None)?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.matmul_t(q, k, false, true)?;
    let scores = g.scale(scores, T::cast(1.0 / (d as f64).sqrt()))?;
    let attn = match masks {
        Some(mk) => g.masked_softmax(scores, mk.keys.clone())?,
        None => g.softmax(scores)?,
    };
    let o = g.matmul(attn, v)?;
    let o = g.reshape(o, &[b, h, m, d])?;
    let mut o = g.permute(o, &[0, 2, 1, 3])?;
    if let Some(mk) = masks {
        o = g.mul(o, mk.heads)?;
    }
    let o = g.reshape(o, &[b, m, f])?;
    g.matmul(o, p.get(&format!("{prefix}.w_o"))?)
}

pub fn graph_ffw<T: Scalar>(g: &mut Graph<T>, x: Var, masks: Option<&SlimMasks>, p: &Bound, prefix: &str) -> Result<Var> {
    let hdn = g.linear(x, p.get(&format!("{prefix}.w1"))?, Some(p.get(&format!("{prefix}.b1"))?))?;
    let mut hdn = g.relu(hdn)?;
    if let Some(mk) = masks {
        hdn = g.mul(hdn, mk.neurons)?;
    }
    let y = g.matmul(hdn, p.get(&format!("{prefix}.w2"))?)?;
    g.add(y, p.get(&format!("{prefix}.b2"))?)
}

pub fn graph_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    masks: Option<&SlimMasks>,
    p: &Bound,
    prefix: &str,
    dims: &LayerDims,
) -> Result<Var> {
    let attn = format!("{prefix}.attn");
    let ffw = format!("{prefix}.ffw");
    let n1 = format!("{prefix}.norm1");
    let n2 = format!("{prefix}.norm2");
    match dims.norm {
        NormOrder::Pre => {
            let z = graph_norm(g, x, p, &n1)?;
            let a = graph_mha(g, z, masks, p, &attn, dims)?;
            let h = g.add(x, a)?;
            let z = graph_norm(g, h, p, &n2)?;
            let f = graph_ffw(g, z, masks, p, &ffw)?;
            g.add(h, f)
        }
        NormOrder::Post => {
            let a = graph_mha(g, x, masks, p, &attn, dims)?;
            let h = g.add(x, a)?;
            let h = graph_norm(g, h, p, &n1)?;
            let f = graph_ffw(g, h, masks, p, &ffw)?;
            let o = g.add(h, f)?;
            graph_norm(g, o, p, &n2)
        }
    }
}

/// Graph counterpart of [`block_forward`] over a `[B, M, F]` batch.
pub fn graph_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    masks: Option<&SlimMasks>,
    p: &Bound,
    prefix: &str,
    dims: &LayerDims,
    n_layers: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let pe = g.constant(positional_encoding(s[1], s[2]));
    let mut z = g.add(x, pe)?;
    for l in 0..n_layers {
        z = graph_layer(g, z, masks, p, &format!("{prefix}.layer{l}"), dims)?;
    }
    let z = graph_norm(g, z, p, &format!("{prefix}.norm"))?;
    g.add(z, x)
}
