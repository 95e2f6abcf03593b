//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion, then asserts it. Run with `--nocapture` to see the lines.

#[path = "common/grad.rs"]
mod grad;

use std::collections::BTreeMap;
use std::fs;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dsn_core::datagen::{self, Example};
use dsn_core::dualpath::{chunk, overlap_add, ChunkSpec};
use dsn_core::evaluation::{self, Estimator};
use dsn_core::gating::{self, UtilizationSet};
use dsn_core::losses::{self, SegmentTag, WeightingConfig, WeightingScheme};
use dsn_core::params::{ParamBuilder, ParamStore};
use dsn_core::profiler::{self, MacConvention};
use dsn_core::separator::{Gating, Separator, SeparatorConfig};
use dsn_core::trainer::{RngStreams, TrainConfig, Trainer};
use dsn_core::transformer::{
    self, block_forward, ffw_slim, ffw_static, init_block, layer_forward, mha_slim, mha_static, LayerDims,
    LayerWeights, MacMeter, NormOrder,
};
use dsn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn verdict(id: u32, title: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {status} {title}: {detail}");
    assert!(pass, "criterion {id} ({title}) failed: {detail}");
}

// ---- 1 ------------------------------------------------------------------

#[test]
fn c01_complexity_table() {
    let cfg = SeparatorConfig::default();
    // (u, GMAC/s, params in M, params tolerance)
    let table = [
        (0.125, 5.8, 2.0, 0.05),
        (0.25, 9.0, 3.6, 0.05),
        (0.5, 15.4, 6.7, 0.03),
        (0.75, 21.8, 9.9, 0.03),
        (1.0, 28.1, 13.0, 0.03),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (u, gmacs, params, ptol) in table {
        let row = profiler::profile_row(&cfg, u, 4.0, MacConvention::Dense).unwrap();
        let ok = (row.gmacs_per_s / gmacs - 1.0).abs() <= 0.10 && (row.params_m / params - 1.0).abs() <= ptol;
        pass &= ok;
        detail.push(format!("u={u}: {:.2} GMAC/s {:.2}M", row.gmacs_per_s, row.params_m));
    }
    verdict(1, "complexity per utilization level", pass, &detail.join("; "));
}

// ---- 2 ------------------------------------------------------------------

fn randomized(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c02_full_width_equivalence() {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |k: &'static str, d: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(d);
    };
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = rng.gen_range(1..=4);
        let mut dims = LayerDims::new(heads * rng.gen_range(1..=4), heads, rng.gen_range(2..12));
        dims.norm = if seed % 2 == 0 { NormOrder::Pre } else { NormOrder::Post };
        let m = rng.gen_range(1..12);
        let (mut store, _) = {
            let mut b = ParamBuilder::<f64>::new(&mut rng);
            init_block(&mut b, "blk", &dims, 2);
            b.finish()
        };
        randomized(&mut store, &mut rng);
        let x = Tensor::from_fn(&[m, dims.features], |_| rng.gen_range(-1.0..1.0));
        let ones = vec![1.0; m];
        let w = LayerWeights::from_store(&store, "blk.layer0", dims).unwrap();
        let mut meter = MacMeter::new();

        let a = mha_static(&x, &w.attn, &mut meter, "s").unwrap();
        let b = mha_slim(&x, &ones, &w.attn, &mut meter, "s").unwrap();
        record("mha", max_diff(&a, &b));
        let a = ffw_static(&x, &w.ffw, &mut meter, "s").unwrap();
        let b = ffw_slim(&x, &ones, &w.ffw, &mut meter, "s").unwrap();
        record("ffw", max_diff(&a, &b));
        let a = layer_forward(&x, None, &w, &mut meter, "s").unwrap();
        let b = layer_forward(&x, Some(&ones), &w, &mut meter, "s").unwrap();
        record("layer", max_diff(&a, &b));
        let a = block_forward(&x, None, &store, "blk", dims, 2, &mut meter).unwrap();
        let b = block_forward(&x, Some(&ones), &store, "blk", dims, 2, &mut meter).unwrap();
        record("block", max_diff(&a, &b));

        let cfg = SeparatorConfig {
            features: 8,
            intra_hidden: 16,
            inter_hidden: 16,
            chunk_size: 6,
            chunk_hop: 3,
            norm: dims.norm,
            ..SeparatorConfig::tiny()
        };
        let mut model = Separator::<f64>::new(cfg.clone(), seed).unwrap();
        randomized(&mut model.params, &mut rng);
        // Padded frames sit at the lowest level in the slim path, so compare
        // on a length that chunks without padding.
        let len = (cfg.window + cfg.hop * 30..)
            .step_by(cfg.hop)
            .find(|&n| cfg.chunk_spec(cfg.frames(n).unwrap()).unwrap().pad == 0)
            .unwrap();
        let y: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let a = model.separate(&y, &Gating::Static).unwrap();
        let b = model.separate(&y, &Gating::External(1.0)).unwrap();
        let d = a
            .sources
            .iter()
            .flatten()
            .zip(b.sources.iter().flatten())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        record("end_to_end", d);
    }
    let pass = worst.values().all(|&d| d <= 1e-12);
    let detail: Vec<String> = worst.iter().map(|(k, d)| format!("{k} {d:.1e}")).collect();
    verdict(2, "full-width slim equals static (20 seeds)", pass, &detail.join(", "));
}

// ---- 3 ------------------------------------------------------------------

/// Dense masked attention: every head scores all frames, inactive frames
/// are removed from the softmax, inactive heads contribute nothing.
fn masked_attention_oracle(x: &Tensor<f64>, u: &[f64], heads: usize, w: [&Tensor<f64>; 4]) -> Tensor<f64> {
    let (m, f) = (x.dim(0), x.dim(1));
    let d = f / heads;
    let project = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..m)
            .map(|i| (0..f).map(|o| (0..f).map(|c| w.data()[o * f + c] * x.data()[i * f + c]).sum()).collect())
            .collect()
    };
    let (q, k, v) = (project(w[0]), project(w[1]), project(w[2]));
    let active = |frame: usize, h: usize| ((u[frame] * heads as f64).ceil() as usize).clamp(1, heads) > h;
    let mut concat = vec![vec![0.0; f]; m];
    for h in 0..heads {
        for i in 0..m {
            if !active(i, h) {
                continue;
            }
            let logits: Vec<f64> = (0..m)
                .map(|j| {
                    if active(j, h) {
                        (0..d).map(|r| q[i][h * d + r] * k[j][h * d + r]).sum::<f64>() / (d as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for r in 0..d {
                concat[i][h * d + r] = (0..m).map(|j| e[j] / z * v[j][h * d + r]).sum();
            }
        }
    }
    Tensor::from_fn(&[m, f], |idx| {
        let (i, o) = (idx / f, idx % f);
        (0..f).map(|c| concat[i][c] * w[3].data()[c * f + o]).sum()
    })
}

#[test]
fn c03_restricted_attention_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let m = rng.gen_range(1..=8);
        let heads = rng.gen_range(1..=4);
        let f = heads * rng.gen_range(1..=3);
        let ws: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::from_fn(&[f, f], |_| rng.gen_range(-1.0..1.0))).collect();
        let x = Tensor::from_fn(&[m, f], |_| rng.gen_range(-1.0..1.0));
        let u: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
        let attn = transformer::AttnWeights {
            heads,
            w_q: &ws[0],
            w_k: &ws[1],
            w_v: &ws[2],
            w_o: &ws[3],
        };
        let got = mha_slim(&x, &u, &attn, &mut MacMeter::new(), "case").unwrap();
        let want = masked_attention_oracle(&x, &u, heads, [&ws[0], &ws[1], &ws[2], &ws[3]]);
        let d = max_diff(&got, &want);
        assert!(d.is_finite(), "case {case}");
        worst = worst.max(d);
    }
    verdict(3, "restricted attention matches masked oracle (100 cases)", worst <= 1e-10, &format!("max abs diff {worst:.1e}"));
}

// ---- 4 ------------------------------------------------------------------

#[test]
fn c04_gradient_suite() {
    let ops = grad::op_suite(20, 44);
    let (worst_op, worst) = ops.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let directional = grad::total_loss_directional(3);
    let onehot = grad::total_loss_wrt_onehot();
    let ste = grad::straight_through_equivalence(7);
    let pass = worst < grad::TOL
        && directional < grad::TOL
        && onehot < grad::TOL
        && ste.forward_equal
        && ste.argmax_ok
        && ste.max_diff == 0.0
        && ste.nonzero;
    verdict(
        4,
        "gradients match central differences",
        pass,
        &format!(
            "{} ops worst {worst:.1e} ({worst_op}); total loss along params {directional:.1e}, \
             wrt one-hot {onehot:.1e}; straight-through vs hard gradient diff {:.1e}",
            ops.len(),
            ste.max_diff
        ),
    );
}

// ---- 5 ------------------------------------------------------------------

#[test]
fn c05_loss_formulas() {
    let mut errs: Vec<(&str, f64)> = Vec::new();
    // Orthogonal distortion with the reference's energy: 0 dB.
    let r = [1.0, 2.0, 0.0, -1.0];
    let n = [2.0, -1.0, 1.0, 0.0];
    let n_scale = (r.iter().map(|v| v * v).sum::<f64>() / n.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b * n_scale).collect();
    errs.push(("orthogonal 0 dB", losses::si_sdr(&est, &r).unwrap().abs()));
    // Energy ratio 10 with the guard term written out.
    let est10: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b * n_scale / 10f64.sqrt()).collect();
    let (s, e) = (6.0, 0.6);
    let guard = losses::EPS * (s + e) + 1e-20;
    let want = 10.0 * ((s + guard) / (e + guard)).log10();
    errs.push(("10 dB", (losses::si_sdr(&est10, &r).unwrap() - want).abs()));
    let scaled: Vec<f64> = est10.iter().map(|v| -3.7 * v).collect();
    errs.push((
        "scale invariance",
        (losses::si_sdr(&scaled, &r).unwrap() - losses::si_sdr(&est10, &r).unwrap()).abs(),
    ));

    let u = [1.0, 0.125, 0.5, 0.5];
    let w = [1.0, 1.0, 0.5, 0.0];
    let want = (0.875f64.powi(2) + 0.0 + 0.5 * 0.375f64.powi(2) + 0.0) / 4.0;
    errs.push(("complexity loss", (losses::complexity_loss(&u, &w, 0.125).unwrap() - want).abs()));
    errs.push(("total loss", (losses::total_loss(-12.0, 0.25, 2.0) - (-11.5)).abs()));

    let (a, b) = (0.05, 30.0);
    errs.push(("weight at b", (losses::sd_weight_value(b, a, b) - (-1f64).exp()).abs()));
    errs.push(("weight at b+1/a", (losses::sd_weight_value(b + 1.0 / a, a, b) - 1.0).abs()));
    errs.push(("weight above saturation", (losses::sd_weight_value(b + 40.0, a, b) - 1.0).abs()));
    errs.push(("weight below b", losses::sd_weight_value(b - 1e-6, a, b).abs()));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    verdict(5, "loss closed forms", worst <= 1e-9, &detail.join(", "));
}

// ---- 6 ------------------------------------------------------------------

#[test]
fn c06_chunk_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut failures = 0;
    for _ in 0..200 {
        let f = rng.gen_range(1..6);
        let t = rng.gen_range(1..120);
        let c = rng.gen_range(1..20);
        let hop = rng.gen_range(1..=c);
        let spec = ChunkSpec::new(t, c, hop).unwrap();
        let x = Tensor::<f64>::from_fn(&[f, t], |_| rng.gen_range(-10.0..10.0));
        let back = overlap_add(&chunk(&x, spec).unwrap()).unwrap();
        failures += (back.data() != x.data()) as usize;
    }
    verdict(6, "overlap-add of chunks is the identity (200 cases)", failures == 0, &format!("{failures} mismatches"));
}

// ---- 7 ------------------------------------------------------------------

#[test]
fn c07_mac_exactness_and_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut inexact = Vec::new();
    let mut checked = 0;
    for (i, levels) in [vec![0.125, 1.0], vec![0.125, 0.5, 1.0], vec![0.25, 0.5, 0.75, 1.0]].into_iter().enumerate() {
        let cfg = SeparatorConfig {
            features: 16,
            intra_hidden: 24,
            inter_hidden: 24,
            intra_heads: 4,
            inter_heads: 4,
            chunk_size: 8,
            chunk_hop: 4,
            utilization: UtilizationSet::new(levels.clone()).unwrap(),
            ..SeparatorConfig::tiny()
        };
        let model = Separator::<f64>::new(cfg.clone(), i as u64).unwrap();
        let y: Vec<f64> = (0..cfg.window + cfg.hop * 40).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let t = cfg.frames(y.len()).unwrap();
        let mut modes = vec![Gating::Internal, Gating::Static];
        modes.extend(levels.iter().map(|&u| Gating::External(u)));
        modes.push(Gating::Sequence((0..t).map(|_| levels[rng.gen_range(0..levels.len())]).collect()));
        for mode in modes {
            let cmp = profiler::verify_against_instrumented(&model, &y, &mode).unwrap();
            checked += 1;
            if !cmp.is_exact() {
                inexact.push(format!("{levels:?} {mode:?}"));
            }
        }
    }

    let cfg = SeparatorConfig {
        utilization: UtilizationSet::new(vec![0.125, 0.25, 0.5, 0.75, 1.0]).unwrap(),
        ..SeparatorConfig::tiny()
    };
    let set = cfg.utilization.levels().to_vec();
    let samples = cfg.window + cfg.hop * 59;
    let t = cfg.frames(samples).unwrap();
    let mut violations = 0;
    for trial in 0..100 {
        let u: Vec<f64> = (0..t).map(|_| set[rng.gen_range(0..set.len())]).collect();
        let frame = rng.gen_range(0..t);
        let Some(&higher) = set.iter().find(|&&l| l > u[frame]) else { continue };
        let mut raised = u.clone();
        raised[frame] = higher;
        let convention = if trial % 2 == 0 { MacConvention::Dense } else { MacConvention::Sliced };
        let gate = trial % 3 == 0;
        let base = profiler::count_macs(&cfg, &u, samples, gate, convention).unwrap().total_macs;
        let up = profiler::count_macs(&cfg, &raised, samples, gate, convention).unwrap().total_macs;
        violations += (up < base) as usize;
    }
    verdict(
        7,
        "analytic MACs exact and monotone",
        inexact.is_empty() && violations == 0,
        &format!("{checked} instrumented runs, inexact {inexact:?}; {violations} monotonicity violations in 100 trials"),
    );
}

// ---- 8 and 10: trained models -------------------------------------------

/// Desk-scale training protocol shared by the dynamic-behaviour and
/// external-gating criteria.
mod protocol {
    pub const UTTERANCE_S: f64 = 1.0;
    pub const TRAIN_COUNT: usize = 100;
    pub const VAL_COUNT: usize = 20;
    pub const TEST_COUNT: usize = 100;
    pub const LR: f64 = 1e-3;
    /// Full-width warm-up with no complexity pressure; also the α = 0 run.
    pub const WARMUP_EPOCHS: usize = 8;
    pub const MAIN_EPOCHS: usize = 16;
    pub const HIGH_ALPHA_EPOCHS: usize = 4;
    /// Threshold in dB. After warm-up, overlapped frames score about 1 to
    /// 5 dB and single-speaker frames 10 to 16 dB.
    pub const SD_THRESHOLD_DB: f64 = 5.0;
    pub const SEED: u64 = 2024;
}

struct Run {
    model: Separator<f32>,
    /// Validation mean utilization after each epoch, starting before training.
    utilization: Vec<f64>,
    elapsed: Duration,
}

struct Trained {
    warmup: Run,
    main: Run,
    high_alpha: Run,
    no_dropout: Run,
}

fn base_config(alpha: f64, dropout: f64) -> TrainConfig {
    TrainConfig {
        lr: protocol::LR,
        alpha,
        gate_dropout: dropout,
        utterance_len_s: protocol::UTTERANCE_S,
        noise_activity_range: [0.0, 0.0],
        weighting: WeightingConfig {
            scheme: WeightingScheme::Sd,
            a: 0.05,
            b: protocol::SD_THRESHOLD_DB,
        },
        seed: protocol::SEED,
        ..TrainConfig::default()
    }
}

fn run(init: Option<&Separator<f32>>, cfg: TrainConfig, epochs: usize, train: &[Example], val: &[Example]) -> Run {
    let start = Instant::now();
    let mut tr = Trainer::new(SeparatorConfig::tiny(), cfg).unwrap();
    if let Some(m) = init {
        tr.model = m.clone();
        tr.adam = dsn_core::trainer::Adam::new(&tr.model.params);
    }
    let mut utilization = vec![tr.validate(val).unwrap().mean_utilization];
    for _ in 0..epochs {
        tr.train_epoch(train).unwrap();
        utilization.push(tr.validate(val).unwrap().mean_utilization);
    }
    Run {
        model: tr.model,
        utilization,
        elapsed: start.elapsed(),
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = base_config(1.0, 0.3).dataset_spec(protocol::TRAIN_COUNT, protocol::SEED);
        let train_set = datagen::generate_examples(&spec).unwrap();
        let val_spec = base_config(1.0, 0.3).dataset_spec(protocol::VAL_COUNT, protocol::SEED + 1);
        let val = datagen::generate_examples(&val_spec).unwrap();

        let warmup = run(None, base_config(0.0, 0.3), protocol::WARMUP_EPOCHS, &train_set, &val);
        let main = run(Some(&warmup.model), base_config(1.0, 0.3), protocol::MAIN_EPOCHS, &train_set, &val);
        let high_alpha = run(
            Some(&warmup.model),
            base_config(10.0, 0.3),
            protocol::HIGH_ALPHA_EPOCHS,
            &train_set,
            &val,
        );
        let plain_warmup = run(None, base_config(0.0, 0.0), protocol::WARMUP_EPOCHS, &train_set, &val);
        let no_dropout = run(
            Some(&plain_warmup.model),
            base_config(1.0, 0.0),
            protocol::MAIN_EPOCHS,
            &train_set,
            &val,
        );
        Trained {
            warmup,
            main,
            high_alpha,
            no_dropout,
        }
    })
}

fn test_set(overlap: f64, seed: u64) -> Vec<Example> {
    let mut spec = base_config(1.0, 0.3).dataset_spec(protocol::TEST_COUNT, seed);
    spec.overlap_range = [overlap, overlap];
    datagen::generate_examples(&spec).unwrap()
}

#[test]
fn c08_dynamic_behaviour() {
    let t = trained();
    let training_time = t.warmup.elapsed + t.main.elapsed + t.high_alpha.elapsed;
    let levels = SeparatorConfig::tiny().utilization;
    let (lo, hi) = (levels.min(), levels.max());
    let mid = 0.5 * (lo + hi);

    let mut by_overlap = Vec::new();
    let mut seg_u: BTreeMap<SegmentTag, (f64, usize)> = BTreeMap::new();
    for (i, ov) in [1.0, 0.75, 0.5, 0.25].into_iter().enumerate() {
        let s = evaluation::evaluate(&t.main.model, &test_set(ov, 900 + i as u64), &Estimator::Model(Gating::Internal))
            .unwrap();
        by_overlap.push((ov, s.mean_utilization, s.si_sdri));
        for r in &s.segments {
            let e = seg_u.entry(r.segment).or_default();
            e.0 += r.mean_utilization * r.frames as f64;
            e.1 += r.frames;
        }
    }
    let seg_mean = |tag| seg_u.get(&tag).map_or(f64::NAN, |(s, n)| s / *n as f64);
    let (silence, overlap) = (seg_mean(SegmentTag::Silence), seg_mean(SegmentTag::Overlap));

    let a0 = &t.warmup.utilization;
    let a10 = &t.high_alpha.utilization;
    let a0_last = *a0.last().unwrap();
    let a10_last = *a10.last().unwrap();

    let part_a = silence < overlap;
    let part_b = a0_last > a0[0] && a0_last > mid && a10_last < a10[0] && a10_last < mid;
    let part_c = by_overlap.windows(2).all(|w| w[1].1 < w[0].1);
    let in_budget = training_time <= Duration::from_secs(30 * 60);

    let curve: Vec<String> = by_overlap
        .iter()
        .map(|(ov, u, sdri)| format!("{ov}: u {u:.3} / {sdri:.1} dB"))
        .collect();
    verdict(
        8,
        "dynamic gating behaviour",
        part_a && part_b && part_c && in_budget,
        &format!(
            "(a) silence u {silence:.3} vs overlap u {overlap:.3} [{}]; \
             (b) alpha 0: {:.3} -> {a0_last:.3}, alpha 10: {:.3} -> {a10_last:.3} [{}]; \
             (c) by overlap {} [{}]; training {:.0} s",
            if part_a { "ok" } else { "fails" },
            a0[0],
            a10[0],
            if part_b { "ok" } else { "fails" },
            curve.join(", "),
            if part_c { "ok" } else { "fails" },
            training_time.as_secs_f64()
        ),
    );
}

// ---- 9 ------------------------------------------------------------------

#[test]
fn c09_gating_dropout_statistics() {
    const DRAWS: usize = 10_000;
    let mut lines = Vec::new();
    let mut pass = true;
    for levels in [vec![0.125, 1.0], vec![0.125, 0.5, 1.0]] {
        let k = levels.len();
        let mut rng = RngStreams::new(9).dropout;
        let mut counts = vec![0usize; k];
        for _ in 0..DRAWS {
            if let Some(i) = gating::draw_dropout(0.3, k, &mut rng) {
                counts[i] += 1;
            }
        }
        let hits: usize = counts.iter().sum();
        let rate = hits as f64 / DRAWS as f64;
        let expected = hits as f64 / k as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = ChiSquared::new((k - 1) as f64).unwrap().sf(stat);
        pass &= (rate - 0.3).abs() <= 0.02 && p > 0.01;
        lines.push(format!("K={k}: rate {rate:.4}, counts {counts:?}, chi-square p {p:.3}"));
    }

    verdict(9, "gating dropout rate and uniformity", pass, &lines.join("; "));
}

// ---- 10 -----------------------------------------------------------------

/// Internal minus worst constant-level SI-SDRi, and whether every constant
/// level produced finite full-length outputs.
fn external_degradation(model: &Separator<f32>, examples: &[Example]) -> (f64, bool, Vec<String>) {
    let rows = evaluation::external_sweep(model, examples).unwrap();
    let internal = rows[0].si_sdri;
    let mut valid = true;
    for &u in model.config.utilization.levels() {
        for ex in examples {
            let y: Vec<f32> = ex.mixture.iter().map(|&v| v as f32).collect();
            let sep = model.separate(&y, &Gating::External(u)).unwrap();
            valid &= sep.sources.len() == 2
                && sep.sources.iter().all(|s| s.len() == y.len() && s.iter().all(|v| v.is_finite()));
        }
    }
    let worst = rows[1..].iter().map(|r| internal - r.si_sdri).fold(f64::NEG_INFINITY, f64::max);
    let table = rows.iter().map(|r| format!("{} {:.2}", r.mode, r.si_sdri)).collect();
    (worst, valid, table)
}

#[test]
fn c10_external_gating_robustness() {
    let t = trained();
    let mut examples = Vec::new();
    for (i, ov) in [1.0, 0.5].into_iter().enumerate() {
        examples.extend(test_set(ov, 950 + i as u64));
    }
    let (with_drop, valid_drop, table_drop) = external_degradation(&t.main.model, &examples);
    let (without, valid_plain, table_plain) = external_degradation(&t.no_dropout.model, &examples);
    let pass = valid_drop && valid_plain && with_drop < without;
    verdict(
        10,
        "dropout-trained model degrades less under external gating",
        pass,
        &format!(
            "dropout [{}] worst drop {with_drop:.2} dB; no dropout [{}] worst drop {without:.2} dB",
            table_drop.join(", "),
            table_plain.join(", ")
        ),
    );
}

// ---- 11 -----------------------------------------------------------------

#[test]
fn c11_determinism() {
    let cfg = TrainConfig {
        max_epochs: 2,
        utterance_len_s: 0.5,
        seed: 11,
        ..TrainConfig::default()
    };
    let train = datagen::generate_examples(&cfg.dataset_spec(4, 1)).unwrap();
    let val = datagen::generate_examples(&cfg.dataset_spec(2, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut tr = Trainer::new(SeparatorConfig::tiny(), cfg.clone()).unwrap().with_output(&out).unwrap();
            tr.fit(&train, &val).unwrap();
            out
        })
        .collect();
    let files = ["state.ckpt", "best.ckpt", "last.ckpt", "train_log.csv"];
    let same_ckpt = files
        .iter()
        .all(|f| fs::read(outputs[0].join(f)).unwrap() == fs::read(outputs[1].join(f)).unwrap());

    let ck = dsn_core::checkpoint::Checkpoint::<f32>::load(&outputs[0].join("last.ckpt")).unwrap();
    let model = ck.into_model().unwrap();
    let y: Vec<f32> = val[0].mixture.iter().map(|&v| v as f32).collect();
    let audio: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let sep = model.separate(&y, &Gating::Internal).unwrap();
            let path = dir.path().join(format!("out{i}.wav"));
            let s: Vec<f64> = sep.sources[0].iter().map(|&v| v as f64).collect();
            datagen::save_wav(&path, &s, 8000).unwrap();
            let mut bytes = fs::read(&path).unwrap();
            bytes.extend(sep.sources.iter().flatten().flat_map(|v| v.to_le_bytes()));
            bytes
        })
        .collect();
    let same_audio = audio[0] == audio[1];
    verdict(
        11,
        "seeded runs are bit-identical",
        same_ckpt && same_audio,
        &format!("checkpoints and log identical: {same_ckpt}; inference audio identical: {same_audio}"),
    );
}
