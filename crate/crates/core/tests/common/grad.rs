//! Gradient checks shared by the gradient and acceptance test targets.
//! Each returns the measured error so callers decide how to report it.

use dsn_core::autodiff::Graph;
use dsn_core::gating::{self, GateConfig, UtilizationSet};
use dsn_core::gradcheck::{check_case, gradient_check, op_cases, random_tensor, relative_error};
use dsn_core::losses::{self, WeightingConfig, WeightingScheme};
use dsn_core::params::ParamStore;
use dsn_core::separator::{self, onehot_for, GraphGating, Separator, SeparatorConfig};
use dsn_core::trainer::{build_loss, complexity_weights};
use dsn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn mini_config() -> SeparatorConfig {
    SeparatorConfig {
        features: 8,
        repeats: 1,
        intra_layers: 1,
        inter_layers: 1,
        intra_heads: 2,
        inter_heads: 2,
        intra_hidden: 12,
        inter_hidden: 12,
        chunk_size: 8,
        chunk_hop: 4,
        utilization: UtilizationSet::new(vec![0.25, 0.5, 1.0]).unwrap(),
        gate: GateConfig {
            features: 4,
            hidden: 8,
            pool_window: 8,
            ..GateConfig::default()
        },
        ..SeparatorConfig::default()
    }
}

pub struct Utterance {
    pub mixture: Vec<f64>,
    pub references: Vec<Vec<f64>>,
}

pub fn utterance(len: usize, rng: &mut ChaCha8Rng) -> Utterance {
    let references: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    let mixture = (0..len).map(|i| references[0][i] + references[1][i]).collect();
    Utterance { mixture, references }
}

fn mixed_levels(frames: usize, set: &UtilizationSet, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..frames).map(|_| set.levels()[rng.gen_range(0..set.len())]).collect()
}

/// Worst relative error of each op over `trials` random draws.
pub fn op_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .iter()
        .map(|case| {
            let worst = (0..trials)
                .map(|_| check_case(case, STEP, &mut rng).unwrap().rel_error)
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}

/// Total objective with fixed one-hot gating, and its parameter gradients.
fn objective(
    params: &ParamStore<f64>,
    cfg: &SeparatorConfig,
    utt: &Utterance,
    onehot: &Tensor<f64>,
    weighting: &WeightingConfig,
) -> (f64, ParamStore<f64>) {
    let mut g = Graph::<f64>::new();
    let p = params.bind(&mut g);
    let oh = g.constant(onehot.clone());
    let lg = build_loss(
        &mut g,
        &p,
        cfg,
        &utt.mixture,
        &utt.references,
        1.0,
        weighting,
        GraphGating::OneHot(oh),
    )
    .unwrap();
    let grads = g.backward(lg.total).unwrap();
    let mut out = ParamStore::new();
    for (n, t) in params.iter() {
        let gr = grads.named(n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        out.insert(n, gr);
    }
    (g.value(lg.total).item(), out)
}

fn shifted(params: &ParamStore<f64>, dir: &ParamStore<f64>, h: f64) -> ParamStore<f64> {
    let mut out = params.clone();
    for (n, t) in out.iter_mut() {
        let d = dir.get(n).unwrap();
        for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
            *x += h * dx;
        }
    }
    out
}

/// Directional derivative of the total loss along random parameter
/// directions; worst relative error over `trials` models.
pub fn total_loss_directional(trials: u64) -> f64 {
    let cfg = mini_config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weighting = WeightingConfig {
        scheme: WeightingScheme::Si,
        ..WeightingConfig::default()
    };
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let model = Separator::<f64>::new(cfg.clone(), trial).unwrap();
        let utt = utterance(16 + 8 * 39, &mut rng);
        let frames = cfg.frames(utt.mixture.len()).unwrap();
        let onehot = onehot_for(&mixed_levels(frames, &cfg.utilization, &mut rng), &cfg.utilization).unwrap();
        let (_, grads) = objective(&model.params, &cfg, &utt, &onehot, &weighting);

        let mut dir = ParamStore::new();
        for (n, t) in model.params.iter() {
            dir.insert(n, random_tensor(t.shape(), &mut rng));
        }
        let analytic: f64 = grads
            .iter()
            .map(|(n, gr)| gr.data().iter().zip(dir.get(n).unwrap().data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let plus = objective(&shifted(&model.params, &dir, STEP), &cfg, &utt, &onehot, &weighting).0;
        let minus = objective(&shifted(&model.params, &dir, -STEP), &cfg, &utt, &onehot, &weighting).0;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(relative_error(&[analytic], &[numeric]));
    }
    worst
}

/// Gradient of the total loss with respect to a relaxed one-hot input,
/// with signal-dependent frame weights held fixed as in training.
pub fn total_loss_wrt_onehot() -> f64 {
    let cfg = mini_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = Separator::<f64>::new(cfg.clone(), 9).unwrap();
    let utt = utterance(16 + 8 * 23, &mut rng);
    let frames = cfg.frames(utt.mixture.len()).unwrap();
    let onehot = onehot_for(&mixed_levels(frames, &cfg.utilization, &mut rng), &cfg.utilization).unwrap();
    let weighting = WeightingConfig {
        scheme: WeightingScheme::Sd,
        a: 0.02,
        b: -60.0,
    };
    let weights = {
        let mut g = Graph::<f64>::new();
        let p = model.params.bind_frozen(&mut g);
        let oh = g.constant(onehot.clone());
        let out = separator::graph_separate(&mut g, &p, &cfg, &utt.mixture, GraphGating::OneHot(oh)).unwrap();
        let est: Vec<Vec<f64>> = out.estimates.iter().map(|&e| g.value(e).to_f64_vec()).collect();
        let (_, perm) = losses::pit_signal_loss(&est, &utt.references).unwrap();
        complexity_weights(&est, &utt.references, &perm, &cfg, &weighting, frames).unwrap()
    };
    assert!(weights.iter().any(|&w| w > 0.0 && w < 1.0), "degenerate weights {weights:?}");

    gradient_check(&[("onehot", onehot)], STEP, |g, v| {
        let p = model.params.bind_frozen(g);
        let out = separator::graph_separate(g, &p, &cfg, &utt.mixture, GraphGating::OneHot(v[0]))?;
        let (signal, _) = losses::graph_pit_loss(g, &out.estimates, &utt.references)?;
        let u = out.utilization.expect("gated");
        let c = losses::graph_complexity_loss(g, u, &weights, cfg.utilization.min())?;
        losses::graph_total_loss(g, signal, c, 2.0)
    })
    .unwrap()
    .rel_error
}

pub struct SteComparison {
    pub forward_equal: bool,
    pub argmax_ok: bool,
    /// Largest elementwise gradient difference.
    pub max_diff: f64,
    pub nonzero: bool,
}

/// Gradient reaching the probabilities through the straight-through sample
/// against the gradient at the equivalent hard one-hot input.
pub fn straight_through_equivalence(seed: u64) -> SteComparison {
    let cfg = mini_config();
    let k = cfg.utilization.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Separator::<f64>::new(cfg.clone(), seed).unwrap();
    let utt = utterance(16 + 8 * 23, &mut rng);
    let frames = cfg.frames(utt.mixture.len()).unwrap();
    let weighting = WeightingConfig::default();

    let logits = random_tensor(&[frames, k], &mut rng);
    let probs = {
        let mut g = Graph::<f64>::new();
        let l = g.constant(logits);
        let s = g.softmax(l).unwrap();
        g.value(s).clone()
    };

    let loss_at = |g: &mut Graph<f64>, onehot| {
        let p = model.params.bind_frozen(g);
        build_loss(
            g,
            &p,
            &cfg,
            &utt.mixture,
            &utt.references,
            1.0,
            &weighting,
            GraphGating::OneHot(onehot),
        )
        .unwrap()
        .total
    };

    let mut soft = Graph::<f64>::new();
    let pv = soft.param("probs", probs.clone());
    let sampled = gating::ste_sample(&mut soft, pv).unwrap();
    let hard_value = soft.value(sampled).clone();
    let ls = loss_at(&mut soft, sampled);
    let soft_grad = soft.backward(ls).unwrap().get(pv).unwrap().clone();

    let mut hard = Graph::<f64>::new();
    let hv = hard.param("onehot", hard_value.clone());
    let lh = loss_at(&mut hard, hv);
    let hard_grad = hard.backward(lh).unwrap().get(hv).unwrap().clone();

    // Forward is the argmax one-hot, ties to the lower index.
    let argmax_ok = probs.data().chunks(k).zip(hard_value.data().chunks(k)).all(|(rp, rh)| {
        let best = rp.iter().enumerate().fold(0, |b, (i, &v)| if v > rp[b] { i } else { b });
        rh[best] == 1.0 && rh.iter().sum::<f64>() == 1.0
    });
    SteComparison {
        forward_equal: soft.value(ls).item() == hard.value(lh).item(),
        argmax_ok,
        max_diff: soft_grad
            .data()
            .iter()
            .zip(hard_grad.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        nonzero: soft_grad.data().iter().any(|&v| v != 0.0),
    }
}
