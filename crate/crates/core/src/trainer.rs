//! Deterministic training: Adam, gradient clipping, plateau schedule,
//! gating dropout and resumable state.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::datagen::{DatasetSpec, Example};
use crate::error::{Error, Result};
use crate::gating::{self, draw_dropout, gumbel_tensor};
use crate::losses::{self, SegmentGeometry, WeightingConfig, WeightingScheme};
use crate::params::{Bound, ParamStore};
use crate::separator::{self, constant_onehot, init_params, Gating, GraphGating, Separator, SeparatorConfig};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Non-improving epochs per learning-rate reduction.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub max_epochs: usize,
    pub batch: usize,
    pub utterance_len_s: f64,
    pub early_stop_patience: usize,
    pub clip_norm: f64,
    pub gate_dropout: f64,
    /// Weight of the complexity term in the total loss.
    pub alpha: f64,
    pub weighting: WeightingConfig,
    pub overlap_range: [f64; 2],
    pub noise_activity_range: [f64; 2],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            plateau_patience: 6,
            lr_factor: 0.5,
            max_epochs: 200,
            batch: 2,
            utterance_len_s: 4.0,
            early_stop_patience: 30,
            clip_norm: 5.0,
            gate_dropout: 0.3,
            alpha: 1.0,
            weighting: WeightingConfig::default(),
            overlap_range: [0.25, 1.0],
            noise_activity_range: [0.0, 1.0],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr {} and lr_factor {} must be positive, factor at most 1", self.lr, self.lr_factor));
        }
        if self.batch == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("batch and patience values must be positive".into());
        }
        if !(self.clip_norm > 0.0) || !(self.utterance_len_s > 0.0) {
            return bad("clip_norm and utterance_len_s must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gate_dropout) {
            return bad(format!("gate_dropout {} outside [0, 1]", self.gate_dropout));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha {} must be non-negative", self.alpha));
        }
        self.weighting.validate()?;
        self.dataset_spec(1, 0).validate()
    }

    /// Generation ranges for synthetic training data of this configuration.
    pub fn dataset_spec(&self, count: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            count,
            seed,
            duration_s: self.utterance_len_s,
            overlap_range: self.overlap_range,
            noise_activity_range: self.noise_activity_range,
            ..DatasetSpec::default()
        }
    }
}

// ---- optimisation primitives ---------------------------------------------

/// Adam with bias correction. Moments are kept in the parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        for (n, t) in params.iter() {
            m.insert(n, Tensor::zeros(t.shape()));
        }
        Self { step: 0, v: m.clone(), m }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let (b1, b2, eps) = (T::cast(ADAM_BETA1), T::cast(ADAM_BETA2), T::cast(ADAM_EPS));
        let (lr_t, c1, c2) = (T::cast(lr), T::cast(c1), T::cast(c2));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::contract(format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape())));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w = *w - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to `max_norm` when their global norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Learning-rate plateau and early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauOutcome {
    pub improved: bool,
    pub reduced: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: None,
            since_improvement: 0,
        }
    }
}

/// Records one validation loss. The rate drops once per completed window of
/// `patience` non-improving epochs; training stops after `stop_patience`.
pub fn lr_plateau(s: &mut Schedule, val_loss: f64, cfg: &TrainConfig) -> PlateauOutcome {
    let improved = s.best.is_none_or(|b| val_loss < b);
    let mut reduced = false;
    if improved {
        s.best = Some(val_loss);
        s.since_improvement = 0;
    } else {
        s.since_improvement += 1;
        if s.since_improvement.is_multiple_of(cfg.plateau_patience) {
            s.lr *= cfg.lr_factor;
            reduced = true;
        }
    }
    PlateauOutcome {
        improved,
        reduced,
        stop: s.since_improvement >= cfg.early_stop_patience,
    }
}

// ---- loss graph ----------------------------------------------------------

/// Nodes of one utterance's training objective.
pub struct LossGraph {
    pub total: Var,
    pub signal: Var,
    pub complexity: Var,
    pub utilization: Option<Var>,
    /// `perm[j]` is the estimate assigned to reference `j`.
    pub perm: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Frame weights for the complexity term from the current estimates.
pub fn complexity_weights(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    perm: &[usize],
    cfg: &SeparatorConfig,
    weighting: &WeightingConfig,
    frames: usize,
) -> Result<Vec<f64>> {
    match weighting.scheme {
        WeightingScheme::Si => Ok(vec![1.0; frames]),
        WeightingScheme::Sd => {
            let geo = SegmentGeometry::new(cfg.sample_rate, cfg.window, cfg.hop);
            let seg = losses::seg_si_sdr(estimates, references, perm, &geo, frames)?;
            Ok(losses::sd_weight(&seg, weighting))
        }
    }
}

/// Builds `signal + alpha * complexity` for one utterance.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &SeparatorConfig,
    mixture: &[f64],
    references: &[Vec<f64>],
    alpha: f64,
    weighting: &WeightingConfig,
    gating_mode: GraphGating<'_, T>,
) -> Result<LossGraph> {
    let y: Vec<T> = mixture.iter().map(|&v| T::cast(v)).collect();
    let out = separator::graph_separate(g, p, cfg, &y, gating_mode)?;
    let (signal, perm) = losses::graph_pit_loss(g, &out.estimates, references)?;
    let (complexity, weights) = match out.utilization {
        Some(u) => {
            let est: Vec<Vec<f64>> = out.estimates.iter().map(|&e| g.value(e).to_f64_vec()).collect();
            let w = complexity_weights(&est, references, &perm, cfg, weighting, out.frames)?;
            (losses::graph_complexity_loss(g, u, &w, cfg.utilization.min())?, w)
        }
        None => (g.scalar(T::zero()), vec![0.0; out.frames]),
    };
    let total = losses::graph_total_loss(g, signal, complexity, alpha)?;
    Ok(LossGraph {
        total,
        signal,
        complexity,
        utilization: out.utilization,
        perm,
        weights,
    })
}

// ---- state ---------------------------------------------------------------

/// Independent random streams derived from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub data: ChaCha8Rng,
    pub gumbel: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub init: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            data: stream(1),
            gumbel: stream(2),
            dropout: stream(3),
            init: stream(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub schedule: Schedule,
    pub rngs: RngStreams,
    pub dropout_draws: u64,
    pub dropout_hits: u64,
    pub stopped: bool,
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mean_utilization: f64,
    pub macs_per_s: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,mean_utilization,macs_per_s,lr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.mean_utilization, self.macs_per_s, self.lr
        )
    }
}

/// Validation figures for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub total_loss: f64,
    pub mean_utilization: f64,
    pub macs_per_s: f64,
}

pub struct Trainer {
    pub model: Separator<f32>,
    pub config: TrainConfig,
    pub adam: Adam<f32>,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// Where state, checkpoints and the log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
}

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SNAPSHOT_FILE: &str = "nan_snapshot.ckpt";

impl Trainer {
    pub fn new(model_cfg: SeparatorConfig, config: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        config.validate()?;
        let mut rngs = RngStreams::new(config.seed);
        let (params, inits) = init_params(&model_cfg, &mut rngs.init);
        let model = Separator::from_parts(model_cfg, params, inits)?;
        Ok(Self {
            adam: Adam::new(&model.params),
            state: TrainState {
                epoch: 0,
                schedule: Schedule::new(config.lr),
                rngs,
                dropout_draws: 0,
                dropout_hits: 0,
                stopped: false,
            },
            model,
            config,
            log: Vec::new(),
            out_dir: None,
        })
    }

    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Loss and gradients of one utterance. Draws one dropout decision and
    /// one Gumbel noise tensor per call, whether or not they are used.
    pub fn utterance_gradients(&mut self, ex: &Example) -> Result<(f64, f64, ParamStore<f32>)> {
        let cfg = &self.model.config;
        let frames = cfg.frames(ex.mixture.len())?;
        let k = cfg.utilization.len();
        let drop = draw_dropout(self.config.gate_dropout, k, &mut self.state.rngs.dropout);
        let noise: Tensor<f32> = gumbel_tensor(&[frames, k], &mut self.state.rngs.gumbel);
        self.state.dropout_draws += 1;
        self.state.dropout_hits += drop.is_some() as u64;

        let mut g = Graph::<f32>::new();
        let p = self.model.params.bind(&mut g);
        let gating_mode = match drop {
            Some(level) => GraphGating::OneHot(g.constant(constant_onehot(frames, k, level))),
            None => GraphGating::Gate { noise: Some(&noise) },
        };
        let lg = build_loss(
            &mut g,
            &p,
            cfg,
            &ex.mixture,
            &ex.sources,
            self.config.alpha,
            &self.config.weighting,
            gating_mode,
        )?;
        let loss = g.value(lg.total).item().as_f64();
        let mean_u = lg.utilization.map_or(1.0, |u| {
            let v = g.value(u).to_f64_vec();
            v.iter().sum::<f64>() / v.len() as f64
        });
        let grads = g.backward(lg.total)?;
        let mut out = ParamStore::new();
        for (name, t) in self.model.params.iter() {
            let gt = grads.named(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, gt);
        }
        Ok((loss, mean_u, out))
    }

    /// One pass over `train` in a shuffled order; returns the mean loss and
    /// mean applied utilization.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.state.rngs.data);
        let (mut loss_sum, mut u_sum) = (0.0, 0.0);
        for batch in order.chunks(self.config.batch) {
            let mut acc: Option<ParamStore<f32>> = None;
            for &i in batch {
                let (loss, mean_u, grads) = self.utterance_gradients(&train[i])?;
                loss_sum += loss;
                u_sum += mean_u;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (name, t) in a.iter_mut() {
                            let gd = grads.get(name)?.data();
                            t.data_mut().iter_mut().zip(gd).for_each(|(x, y)| *x += *y);
                        }
                        a
                    }
                });
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            clip_gradients(&mut grads, self.config.clip_norm);
            self.adam.update(&mut self.model.params, &grads, self.state.schedule.lr)?;
        }
        let n = train.len() as f64;
        Ok((loss_sum / n, u_sum / n))
    }

    /// Total loss on `val` with the deterministic internal gate.
    pub fn validate(&self, val: &[Example]) -> Result<Validation> {
        validation_loss(&self.model, val, self.config.alpha, &self.config.weighting)
    }

    /// Trains until `max_epochs` or early stopping. Resumes from the
    /// current state.
    pub fn fit(&mut self, train: &[Example], val: &[Example]) -> Result<()> {
        while self.state.epoch < self.config.max_epochs && !self.state.stopped {
            let (train_loss, train_u) = match self.train_epoch(train) {
                Ok(v) => v,
                Err(e @ Error::Numeric { .. }) => {
                    self.write_snapshot()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if !train_loss.is_finite() {
                self.write_snapshot()?;
                return Err(Error::Numeric {
                    node: 0,
                    op: "training loss",
                });
            }
            let v = if val.is_empty() {
                Validation {
                    total_loss: train_loss,
                    mean_utilization: train_u,
                    macs_per_s: 0.0,
                }
            } else {
                self.validate(val)?
            };
            let lr_used = self.state.schedule.lr;
            let outcome = lr_plateau(&mut self.state.schedule, v.total_loss, &self.config);
            self.state.epoch += 1;
            self.state.stopped = outcome.stop;
            let row = EpochLog {
                epoch: self.state.epoch,
                train_loss,
                val_loss: v.total_loss,
                mean_utilization: v.mean_utilization,
                macs_per_s: v.macs_per_s,
                lr: lr_used,
            };
            self.log.push(row);
            if let Some(dir) = self.out_dir.clone() {
                if outcome.improved {
                    self.model_checkpoint().save(&dir.join(BEST_FILE))?;
                }
                self.model_checkpoint().save(&dir.join(LAST_FILE))?;
                self.save_state(&dir.join(STATE_FILE))?;
                self.append_log(&dir.join(LOG_FILE))?;
            }
        }
        Ok(())
    }

    fn append_log(&self, path: &Path) -> Result<()> {
        let row = self.log.last().expect("logged epoch");
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(f, "{}", row.csv_row()).map_err(|e| Error::io(path, e))
    }

    fn write_snapshot(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let mut ck = self.model_checkpoint();
            ck.metadata = serde_json::json!({ "state": self.state, "reason": "non-finite value" });
            ck.save(&dir.join(SNAPSHOT_FILE))?;
        }
        Ok(())
    }

    pub fn model_checkpoint(&self) -> Checkpoint<f32> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.metadata = serde_json::json!({ "epoch": self.state.epoch, "train": self.config });
        ck
    }

    /// Parameters, optimiser moments, schedule and random streams.
    pub fn state_checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut ck = Checkpoint::from_model(&self.model);
        for (n, t) in self.adam.m.iter() {
            ck.tensors.insert(format!("adam.m.{n}"), t.clone());
        }
        for (n, t) in self.adam.v.iter() {
            ck.tensors.insert(format!("adam.v.{n}"), t.clone());
        }
        ck.metadata = serde_json::json!({
            "state": self.state,
            "train": self.config,
            "adam_step": self.adam.step,
            "log": self.log,
        });
        Ok(ck)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.state_checkpoint()?.save(path)
    }

    /// Restores a trainer from [`Trainer::save_state`] output. `config`
    /// replaces the stored training configuration, so runs can be extended.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let ck = Checkpoint::<f32>::load(path)?;
        let meta = &ck.metadata;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("state lacks `{k}`")));
        let parse = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let state: TrainState = serde_json::from_value(field("state")?).map_err(parse)?;
        let stored: TrainConfig = serde_json::from_value(field("train")?).map_err(parse)?;
        let log: Vec<EpochLog> = serde_json::from_value(field("log")?).map_err(parse)?;
        let step = field("adam_step")?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("adam_step is not an integer".into()))?;
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (n, t) in ck.tensors.iter() {
            if let Some(rest) = n.strip_prefix("adam.m.") {
                m.insert(rest, t.clone());
            } else if let Some(rest) = n.strip_prefix("adam.v.") {
                v.insert(rest, t.clone());
            }
        }
        let config = config.unwrap_or(stored);
        config.validate()?;
        let model = ck.into_model()?;
        Ok(Self {
            adam: Adam { step, m, v },
            model,
            config,
            state,
            log,
            out_dir: None,
        })
    }

    pub fn dropout_rate(&self) -> f64 {
        self.state.dropout_hits as f64 / self.state.dropout_draws.max(1) as f64
    }
}

/// Mean total loss, utilization and MAC/s over `val` using the inference
/// kernels and the internal gate without noise.
pub fn validation_loss<T: Scalar>(
    model: &Separator<T>,
    val: &[Example],
    alpha: f64,
    weighting: &WeightingConfig,
) -> Result<Validation> {
    let cfg = &model.config;
    let (mut loss, mut util, mut macs) = (0.0, 0.0, 0.0);
    for ex in val {
        let y: Vec<T> = ex.mixture.iter().map(|&v| T::cast(v)).collect();
        let sep = model.separate(&y, &Gating::Internal)?;
        let est: Vec<Vec<f64>> = sep.sources.iter().map(|s| s.iter().map(|v| v.as_f64()).collect()).collect();
        let (signal, perm) = losses::pit_signal_loss(&est, &ex.sources)?;
        let u = &sep.utilization.values;
        let w = complexity_weights(&est, &ex.sources, &perm, cfg, weighting, u.len())?;
        let c = losses::complexity_loss(u, &w, cfg.utilization.min())?;
        loss += losses::total_loss(signal, c, alpha);
        util += sep.utilization.mean();
        macs += sep.report.macs_per_second;
    }
    let n = val.len().max(1) as f64;
    Ok(Validation {
        total_loss: loss / n,
        mean_utilization: util / n,
        macs_per_s: macs / n,
    })
}

/// Applies gating dropout to a predicted sequence; exposed for statistics.
pub fn dropout_sequence(
    u: gating::UtilizationSequence,
    prob: f64,
    cfg: &SeparatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<gating::UtilizationSequence> {
    gating::gating_dropout(u, prob, &cfg.utilization, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn adam_closed_forms() {
        let mut p = scalar_store(0.0);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &scalar_store(0.0), 1e-3).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 0.0);

        let mut p = scalar_store(0.0);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &scalar_store(1.0), 1e-3).unwrap();
        assert!((p.get("x").unwrap().data()[0] + 1e-3).abs() < 1e-8);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = scalar_store(1.0);
        let mut adam = Adam::new(&p);
        let mut prev = 1.0f32;
        for _ in 0..10 {
            let x = p.get("x").unwrap().data()[0];
            adam.update(&mut p, &scalar_store(2.0 * x), 0.05).unwrap();
            let f = p.get("x").unwrap().data()[0].powi(2);
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn clipping_cases() {
        let mut g = ParamStore::<f64>::new();
        g.insert("a", Tensor::from_f64(&[2], &[6.0, 8.0]).unwrap());
        assert_eq!(clip_gradients(&mut g, 5.0), 10.0);
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        let mut h = ParamStore::<f64>::new();
        h.insert("a", Tensor::from_f64(&[2], &[1.8, 2.4]).unwrap());
        clip_gradients(&mut h, 5.0);
        assert_eq!(h.get("a").unwrap().data(), &[1.8, 2.4]);
    }

    #[test]
    fn plateau_rules() {
        let cfg = TrainConfig::default();
        let mut s = Schedule::new(cfg.lr);
        lr_plateau(&mut s, 1.0, &cfg);
        for _ in 0..6 {
            lr_plateau(&mut s, 1.0, &cfg);
        }
        assert_eq!(s.lr, 7.5e-5);

        let mut s = Schedule::new(cfg.lr);
        lr_plateau(&mut s, 1.0, &cfg);
        for _ in 0..4 {
            lr_plateau(&mut s, 1.0, &cfg);
        }
        assert!(lr_plateau(&mut s, 0.5, &cfg).improved);
        assert_eq!(s.lr, cfg.lr);

        let mut s = Schedule::new(cfg.lr);
        lr_plateau(&mut s, 1.0, &cfg);
        let mut stop = false;
        for _ in 0..30 {
            stop = lr_plateau(&mut s, 2.0, &cfg).stop;
        }
        assert!(stop);
        assert_eq!(s.lr, cfg.lr * 0.5f64.powi(5));
    }

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.plateau_patience, c.lr_factor), (1.5e-4, 6, 0.5));
        assert_eq!((c.max_epochs, c.batch, c.early_stop_patience), (200, 2, 30));
        assert_eq!((c.clip_norm, c.gate_dropout), (5.0, 0.3));
        assert_eq!(c.overlap_range, [0.25, 1.0]);
    }
}
