use dsn_core::datagen::{self, MixtureSpec, SourceKind};
use dsn_core::dualpath::{chunk, overlap_add, ChunkSpec};
use dsn_core::gating::UtilizationSet;
use dsn_core::losses::si_sdr;
use dsn_core::params::ParamStore;
use dsn_core::profiler::{count_macs, MacConvention};
use dsn_core::separator::SeparatorConfig;
use dsn_core::trainer::{clip_gradients, global_norm};
use dsn_core::Tensor;
use proptest::prelude::*;

fn small_config() -> SeparatorConfig {
    SeparatorConfig {
        utilization: UtilizationSet::new(vec![0.125, 0.25, 0.5, 0.75, 1.0]).unwrap(),
        ..SeparatorConfig::tiny()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chunking_round_trips(f in 1usize..5, t in 1usize..80, c in 1usize..12, hop_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let hop = 1 + (hop_frac * c as f64) as usize % c;
        let spec = ChunkSpec::new(t, c, hop).unwrap();
        let x = Tensor::<f64>::from_fn(&[f, t], |i| ((i as u64 ^ seed) % 1000) as f64 * 0.37 - 100.0);
        let back = overlap_add(&chunk(&x, spec).unwrap()).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn raising_any_frame_never_lowers_macs(
        levels in proptest::collection::vec(0usize..5, 20),
        frame in 0usize..20,
        gate in any::<bool>(),
        sliced in any::<bool>(),
    ) {
        let cfg = small_config();
        let set = cfg.utilization.levels();
        let samples = cfg.window + cfg.hop * 19;
        let convention = if sliced { MacConvention::Sliced } else { MacConvention::Dense };
        let u: Vec<f64> = levels.iter().map(|&i| set[i]).collect();
        let base = count_macs(&cfg, &u, samples, gate, convention).unwrap().total_macs;
        for higher in set.iter().filter(|&&l| l > u[frame]) {
            let mut v = u.clone();
            v[frame] = *higher;
            let raised = count_macs(&cfg, &v, samples, gate, convention).unwrap().total_macs;
            prop_assert!(raised >= base);
        }
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(
        r in proptest::collection::vec(-1.0f64..1.0, 64),
        n in proptest::collection::vec(-0.3f64..0.3, 64),
        scale in prop_oneof![0.01f64..0.9, 1.1f64..100.0],
    ) {
        prop_assume!(r.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = est.iter().map(|v| v * scale).collect();
        let a = si_sdr(&est, &r).unwrap();
        let b = si_sdr(&scaled, &r).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn clipping_never_grows_and_keeps_direction(
        a in proptest::collection::vec(-10.0f64..10.0, 1..20),
        b in proptest::collection::vec(-10.0f64..10.0, 1..20),
        max in 0.1f64..20.0,
    ) {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::new(vec![a.len()], a.clone()).unwrap());
        g.insert("b", Tensor::new(vec![b.len()], b.clone()).unwrap());
        let before = global_norm(&g);
        let orig = g.clone();
        let reported = clip_gradients(&mut g, max);
        let after = global_norm(&g);
        prop_assert_eq!(reported, before);
        prop_assert!(after <= before * (1.0 + 1e-12));
        prop_assert!(after <= max.max(before) * (1.0 + 1e-12));
        let dot: f64 = ["a", "b"]
            .iter()
            .map(|k| g.get(k).unwrap().data().iter().zip(orig.get(k).unwrap().data()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        if before > 0.0 {
            prop_assert!((dot - after * before).abs() <= 1e-9 * (1.0 + after * before));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn measured_overlap_within_one_vad_frame(
        target in 0.25f64..1.0,
        seed in 0u64..1000,
        s2_first in any::<bool>(),
    ) {
        let sr = 8000;
        let dur = 2.0 / (2.0 - target);
        let speech = SourceKind::Speech { pause_prob: 0.0 };
        let s1 = datagen::synth_sources(speech, dur, sr, seed).unwrap();
        let s2 = datagen::synth_sources(speech, dur * 0.8, sr, seed + 7919).unwrap();
        let noise = datagen::synth_sources(SourceKind::Noise, 4.0, sr, seed + 1).unwrap();
        let spec = MixtureSpec {
            target_overlap: target,
            sir_db: 2.0,
            noise_activity: 0.5,
            snr_db: 0.0,
            seed,
        };
        let (a, b) = if s2_first { (&s2, &s1) } else { (&s1, &s2) };
        let m = datagen::make_mixture(a, b, &noise, &spec, None).unwrap();
        let frame = datagen::vad_frame_len(sr, datagen::VAD_FRAME_MS) as f64;
        let measured = datagen::measure_overlap(&m.s1, &m.s2, sr).unwrap();
        let shorter = m.plan.shorter_span as f64;
        prop_assert!(
            (measured - target).abs() * shorter <= frame + 1e-9,
            "target {} measured {} over {} samples", target, measured, shorter
        );
        for i in 0..m.mixture.len() {
            prop_assert_eq!(m.mixture[i], m.s1[i] + m.s2[i] + m.noise[i]);
        }
    }

    #[test]
    fn wav_round_trip_within_one_step(samples in proptest::collection::vec(-1.0f64..1.0, 1..400)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        datagen::save_wav(&path, &samples, 8000).unwrap();
        let back = datagen::load_wav(&path, Some(8000)).unwrap();
        prop_assert_eq!(back.samples.len(), samples.len());
        for (a, b) in samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}
