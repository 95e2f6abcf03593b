//! Synthetic two-speaker mixtures, energy voice activity detection and WAV
//! input/output.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VAD_THRESHOLD_DB: f64 = -40.0;
pub const VAD_FRAME_MS: f64 = 32.0;
/// Largest absolute sample value of any generated component.
pub const PEAK: f64 = 0.9;
const PCM_SCALE: f64 = 32768.0;

/// Mono samples in [-1, 1) with their rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn vad_frame_len(sample_rate: u32, frame_ms: f64) -> usize {
    ((frame_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
}

/// Sample intervals `[start, end)` whose frame RMS exceeds the loudest
/// frame's RMS by more than `threshold_db` (a negative number). Adjacent
/// active frames are merged.
pub fn energy_vad(s: &[f64], sample_rate: u32, threshold_db: f64, frame_ms: f64) -> Vec<(usize, usize)> {
    let frame = vad_frame_len(sample_rate, frame_ms);
    let rms: Vec<f64> = s
        .chunks(frame)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Vec::new();
    }
    let floor = peak * 10f64.powf(threshold_db / 20.0);
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, &r) in rms.iter().enumerate() {
        if r > floor {
            let (st, en) = (i * frame, ((i + 1) * frame).min(s.len()));
            match out.last_mut() {
                Some(last) if last.1 == st => last.1 = en,
                _ => out.push((st, en)),
            }
        }
    }
    out
}

pub fn activity_mask(intervals: &[(usize, usize)], len: usize) -> Vec<bool> {
    let mut m = vec![false; len];
    for &(a, b) in intervals {
        m[a.min(len)..b.min(len)].iter_mut().for_each(|v| *v = true);
    }
    m
}

/// First active sample to last active sample, exclusive end.
pub fn effective_span(s: &[f64], sample_rate: u32) -> Option<(usize, usize)> {
    let iv = energy_vad(s, sample_rate, VAD_THRESHOLD_DB, VAD_FRAME_MS);
    Some((iv.first()?.0, iv.last()?.1))
}

/// Overlap of the effective spans divided by the shorter effective span.
pub fn measure_overlap(s1: &[f64], s2: &[f64], sample_rate: u32) -> Option<f64> {
    let (a, b) = (effective_span(s1, sample_rate)?, effective_span(s2, sample_rate)?);
    let ov = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    Some(ov as f64 / (a.1 - a.0).min(b.1 - b.0) as f64)
}

// ---- synthesis ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SourceKind {
    /// Harmonic "words" with gliding pitch, syllabic modulation and pauses
    /// inserted between words with probability `pause_prob`.
    Speech { pause_prob: f64 },
    /// Low-pass filtered noise with a slow level drift.
    Noise,
}

/// Deterministic pseudo-speech or noise of `duration_s` seconds.
pub fn synth_sources(kind: SourceKind, duration_s: f64, sample_rate: u32, seed: u64) -> Result<AudioSignal> {
    if !(duration_s > 0.0) {
        return Err(Error::contract(format!("duration {duration_s} must be positive")));
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = match kind {
        SourceKind::Speech { pause_prob } => synth_speech(n, sample_rate as f64, pause_prob, &mut rng),
        SourceKind::Noise => synth_noise(n, sample_rate as f64, &mut rng),
    };
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        s.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Ok(AudioSignal::new(s, sample_rate))
}

fn synth_word(out: &mut [f64], sr: f64, rng: &mut ChaCha8Rng) {
    let len = out.len();
    let f0 = rng.gen_range(90.0..260.0);
    let glide: f64 = rng.gen_range(-0.3..0.3);
    let formant = rng.gen_range(400.0..2500.0);
    let syllable_rate = rng.gen_range(3.0..6.0);
    let phase_mod = rng.gen_range(0.0..2.0 * PI);
    let gain = rng.gen_range(0.5..1.0);
    let harmonics = (3500.0 / (f0 * (1.0 + glide.abs()))).floor().max(1.0) as usize;
    let weights: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = k as f64 * f0;
            (1.0 / k as f64) * (1.0 + 2.0 * (-((f - formant) / 300.0).powi(2)).exp())
        })
        .collect();
    let mut phase = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = i as f64 / len as f64;
        let t = i as f64 / sr;
        let pitch = f0 * (1.0 + glide * x) * (1.0 + 0.02 * (2.0 * PI * 5.0 * t).sin());
        phase += 2.0 * PI * pitch / sr;
        let env = (PI * x).sin().sqrt() * (0.6 + 0.4 * (2.0 * PI * syllable_rate * t + phase_mod).sin());
        let v: f64 = weights.iter().enumerate().map(|(k, w)| w * ((k + 1) as f64 * phase).sin()).sum();
        *o = gain * env * v;
    }
}

fn synth_speech(n: usize, sr: f64, pause_prob: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    // Edge silences take at most a tenth of the signal each.
    let lead = ((rng.gen_range(0.05..0.25) * sr) as usize).min(n / 10);
    let trail = ((rng.gen_range(0.05..0.25) * sr) as usize).min(n / 10);
    let stop = n.saturating_sub(trail);
    let mut pos = lead.min(stop);
    let mut paused = false;
    let mut words = Vec::new();
    while pos + (0.1 * sr) as usize <= stop || (words.is_empty() && pos < stop) {
        let end = (pos + (rng.gen_range(0.2..0.6) * sr) as usize).min(stop);
        synth_word(&mut out[pos..end], sr, rng);
        words.push((pos, end));
        pos = end;
        if rng.gen::<f64>() < pause_prob {
            pos += (rng.gen_range(0.15..0.5) * sr) as usize;
            paused = paused || pos < stop;
        } else {
            pos += (rng.gen_range(0.0..0.03) * sr) as usize;
        }
    }
    // Guarantee one audible pause when pauses are requested.
    if pause_prob > 0.0 && !paused && words.len() >= 2 {
        let (_, end) = words[words.len() / 2 - 1];
        let gap = ((0.15 * sr) as usize).min(n - end);
        out[end..end + gap].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

fn synth_noise(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pole = rng.gen_range(0.85..0.98);
    let drift = rng.gen_range(0.1..0.5);
    let mut lp = 0.0;
    (0..n)
        .map(|i| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            lp = pole * lp + (1.0 - pole) * w * 4.0;
            let level = 1.0 + 0.3 * (2.0 * PI * drift * i as f64 / sr).sin();
            level * (lp + 0.2 * w)
        })
        .collect()
}

// ---- mixing -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub target_overlap: f64,
    pub sir_db: f64,
    pub noise_activity: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit(self.target_overlap, "overlap ratio")?;
        unit(self.noise_activity, "noise activity")?;
        if !self.sir_db.is_finite() || !self.snr_db.is_finite() {
            return Err(Error::contract("SIR and SNR must be finite"));
        }
        Ok(())
    }
}

/// Placement of the second source relative to the first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetPlan {
    /// Index of `s2[0]` on a timeline where `s1[0]` sits at 0.
    pub shift: i64,
    /// Requested overlap of the effective spans, in samples.
    pub overlap: usize,
    pub shorter_span: usize,
}

/// Shift placing the effective spans of `s1` and `s2` so that they overlap
/// by `target_overlap` of the shorter span. The later span starts exactly
/// `overlap` samples before the earlier one ends; `s2_leads` picks which
/// speaker starts first. `grid` rounds the shift to a multiple of that many
/// samples.
pub fn compute_offset(
    s1: &AudioSignal,
    s2: &AudioSignal,
    target_overlap: f64,
    s2_leads: bool,
    grid: usize,
) -> Result<OffsetPlan> {
    if s1.sample_rate != s2.sample_rate {
        return Err(Error::contract(format!("sample rates differ: {} vs {}", s1.sample_rate, s2.sample_rate)));
    }
    if !(0.0..=1.0).contains(&target_overlap) {
        return Err(Error::contract(format!("overlap ratio {target_overlap} outside [0, 1]")));
    }
    let sr = s1.sample_rate;
    let (p1, q1) = effective_span(&s1.samples, sr).ok_or_else(|| Error::contract("first source is silent"))?;
    let (p2, q2) = effective_span(&s2.samples, sr).ok_or_else(|| Error::contract("second source is silent"))?;
    let shorter = (q1 - p1).min(q2 - p2);
    let overlap = (target_overlap * shorter as f64).round() as i64;
    let (p1, q1, p2, q2) = (p1 as i64, q1 as i64, p2 as i64, q2 as i64);
    let raw = if s2_leads {
        p1 + overlap - q2
    } else {
        q1 - overlap - p2
    };
    let g = grid.max(1) as i64;
    let shift = (raw as f64 / g as f64).round() as i64 * g;
    Ok(OffsetPlan {
        shift,
        overlap: overlap as usize,
        shorter_span: shorter,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub noise: Vec<f64>,
    pub sample_rate: u32,
    pub plan: OffsetPlan,
    /// `[start, end)` of the active noise window.
    pub noise_window: (usize, usize),
}

fn energy(s: &[f64]) -> f64 {
    s.iter().map(|v| v * v).sum()
}

fn pad_to_multiple(s: &[f64], m: usize) -> Vec<f64> {
    let mut v = s.to_vec();
    v.resize(s.len().div_ceil(m) * m, 0.0);
    v
}

/// Offsets, scales and sums two sources and a noise signal.
///
/// All components are attenuated when needed so that no sample exceeds
/// [`PEAK`], then quantised to the 16-bit PCM grid, so
/// `mixture = s1 + s2 + noise` holds exactly and survives a WAV round trip. When `length` is given, the output
/// is a window of that many samples containing both effective spans;
/// otherwise it spans the union of both sources.
pub fn make_mixture(
    s1: &AudioSignal,
    s2: &AudioSignal,
    noise: &AudioSignal,
    spec: &MixtureSpec,
    length: Option<usize>,
) -> Result<Mixture> {
    spec.validate()?;
    let sr = s1.sample_rate;
    if s2.sample_rate != sr || noise.sample_rate != sr {
        return Err(Error::contract(format!(
            "sample rates differ: {}, {}, {}",
            sr, s2.sample_rate, noise.sample_rate
        )));
    }
    let frame = vad_frame_len(sr, VAD_FRAME_MS);
    let a = AudioSignal::new(pad_to_multiple(&s1.samples, frame), sr);
    let b = AudioSignal::new(pad_to_multiple(&s2.samples, frame), sr);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s2_leads = rng.gen::<bool>();
    let plan = compute_offset(&a, &b, spec.target_overlap, s2_leads, frame)?;

    let (pa, qa) = effective_span(&a.samples, sr).unwrap();
    let (pb, qb) = effective_span(&b.samples, sr).unwrap();
    let lo_union = (pa as i64).min(plan.shift + pb as i64);
    let hi_union = (qa as i64).max(plan.shift + qb as i64);
    let (start, len) = match length {
        None => {
            let lo = 0i64.min(plan.shift);
            let hi = (a.len() as i64).max(plan.shift + b.len() as i64);
            (lo, (hi - lo) as usize)
        }
        Some(l) => {
            let need = hi_union - lo_union;
            if need > l as i64 {
                return Err(Error::contract(format!(
                    "speech spans need {need} samples but the mixture holds {l}"
                )));
            }
            // Window start on the VAD frame grid, both spans inside.
            let earliest = (hi_union - l as i64).div_euclid(frame as i64) + 1;
            let latest = lo_union.div_euclid(frame as i64);
            let k = if earliest <= latest {
                rng.gen_range(earliest..=latest)
            } else {
                latest
            };
            (k * frame as i64, l)
        }
    };
    let place = |src: &[f64], at: i64| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let j = start + i as i64 - at;
                if j >= 0 && (j as usize) < src.len() {
                    src[j as usize]
                } else {
                    0.0
                }
            })
            .collect()
    };
    let mut x1 = place(&a.samples, 0);
    let mut x2 = place(&b.samples, plan.shift);

    // Second source scaled so that E1 / E2 matches the requested SIR.
    let (e1, e2) = (energy(&x1), energy(&x2));
    if e1 > 0.0 && e2 > 0.0 {
        let g = (e1 / e2 / 10f64.powf(spec.sir_db / 10.0)).sqrt();
        x2.iter_mut().for_each(|v| *v *= g);
    }

    let active = ((spec.noise_activity * len as f64).round() as usize).min(len);
    let nstart = if active < len { rng.gen_range(0..=len - active) } else { 0 };
    let mut v = vec![0.0; len];
    if active > 0 {
        if noise.len() < len {
            return Err(Error::contract(format!("noise has {} samples, need {len}", noise.len())));
        }
        v[nstart..nstart + active].copy_from_slice(&noise.samples[nstart..nstart + active]);
        let p_speech = x1.iter().zip(&x2).map(|(a, b)| (a + b) * (a + b)).sum::<f64>() / len as f64;
        let p_noise = energy(&v[nstart..nstart + active]) / active as f64;
        if p_noise > 0.0 && p_speech > 0.0 {
            let g = (p_speech / p_noise / 10f64.powf(spec.snr_db / 10.0)).sqrt();
            v.iter_mut().for_each(|s| *s *= g);
        }
    }

    let peak = (0..len)
        .map(|i| {
            let y = x1[i] + x2[i] + v[i];
            y.abs().max(x1[i].abs()).max(x2[i].abs()).max(v[i].abs())
        })
        .fold(0.0, f64::max);
    // Only attenuate, so a lone speaker keeps its level whatever the overlap.
    let scale = if peak > PEAK { PEAK / peak } else { 1.0 };
    let quant = |s: &mut Vec<f64>| {
        s.iter_mut().for_each(|x| *x = ((*x * scale * PCM_SCALE).round() / PCM_SCALE).clamp(-PEAK, PEAK));
    };
    quant(&mut x1);
    quant(&mut x2);
    quant(&mut v);
    let mixture = (0..len).map(|i| x1[i] + x2[i] + v[i]).collect();
    Ok(Mixture {
        mixture,
        s1: x1,
        s2: x2,
        noise: v,
        sample_rate: sr,
        plan,
        noise_window: (nstart, nstart + active),
    })
}

// ---- WAV ----------------------------------------------------------------

/// Writes 16-bit PCM mono.
pub fn save_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let q = (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Wav(other),
    }
}

/// Reads 16-bit PCM mono, optionally requiring a sample rate.
pub fn load_wav(path: &Path, expected_rate: Option<u32>) -> Result<AudioSignal> {
    let r = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Format {
            field: "channels",
            value: spec.channels.to_string(),
        });
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            field: "sample_format",
            value: "float".into(),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::Format {
            field: "bits_per_sample",
            value: spec.bits_per_sample.to_string(),
        });
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::Format {
                field: "sample_rate",
                value: spec.sample_rate.to_string(),
            });
        }
    }
    let samples = r
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok(AudioSignal::new(samples, spec.sample_rate))
}

// ---- datasets -----------------------------------------------------------

/// Ranges and sizes for a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub overlap_range: [f64; 2],
    pub noise_activity_range: [f64; 2],
    pub sir_range_db: [f64; 2],
    pub snr_range_db: [f64; 2],
    pub pause_prob: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            duration_s: 4.0,
            sample_rate: 8000,
            overlap_range: [0.25, 1.0],
            noise_activity_range: [0.0, 1.0],
            sir_range_db: [0.0, 5.0],
            snr_range_db: [-6.0, 3.0],
            pause_prob: 0.3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |r: [f64; 2], name: &str, lo: f64, hi: f64| {
            if r[0] <= r[1] && r[0] >= lo && r[1] <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {r:?} must be ordered within [{lo}, {hi}]")))
            }
        };
        range(self.overlap_range, "overlap_range", 0.0, 1.0)?;
        range(self.noise_activity_range, "noise_activity_range", 0.0, 1.0)?;
        range(self.sir_range_db, "sir_range_db", f64::NEG_INFINITY, f64::INFINITY)?;
        range(self.snr_range_db, "snr_range_db", f64::NEG_INFINITY, f64::INFINITY)?;
        if !(self.duration_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("duration_s and sample_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pause_prob) {
            return Err(Error::Config(format!("pause_prob {} outside [0, 1]", self.pause_prob)));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }
}

/// Per-mixture draw for index `index` of a dataset.
pub fn draw_mixture_spec(spec: &DatasetSpec, index: usize) -> (MixtureSpec, u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let mut uni = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.gen_range(r[0]..=r[1]) };
    let target_overlap = uni(spec.overlap_range);
    let noise_activity = uni(spec.noise_activity_range);
    let sir_db = uni(spec.sir_range_db);
    let snr_db = uni(spec.snr_range_db);
    let seeds: [u64; 4] = rng.gen();
    (
        MixtureSpec {
            target_overlap,
            sir_db,
            noise_activity,
            snr_db,
            seed: seeds[0],
        },
        seeds[1],
        seeds[2],
        seeds[3],
    )
}

/// Generates mixture `index` of a dataset in memory.
pub fn generate_mixture(spec: &DatasetSpec, index: usize) -> Result<(Mixture, MixtureSpec)> {
    let (ms, seed1, seed2, seed_n) = draw_mixture_spec(spec, index);
    let len = spec.samples();
    let sr = spec.sample_rate;
    // Each effective span fits in len/(2 - r), so their union fits in len.
    let src_dur = len as f64 / (2.0 - ms.target_overlap) / sr as f64;
    let kind = SourceKind::Speech {
        pause_prob: spec.pause_prob,
    };
    let s1 = synth_sources(kind, src_dur, sr, seed1)?;
    let s2 = synth_sources(kind, src_dur, sr, seed2)?;
    let noise = synth_sources(SourceKind::Noise, spec.duration_s, sr, seed_n)?;
    let m = make_mixture(&s1, &s2, &noise, &ms, Some(len))?;
    Ok((m, ms))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub mixture: String,
    pub s1: String,
    pub s2: String,
    pub noise: String,
    pub seed: u64,
    pub samples: usize,
    pub sample_rate: u32,
    pub target_overlap: f64,
    pub measured_overlap: f64,
    pub noise_activity: f64,
    pub sir_db: f64,
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// A loaded example: mixture, references and noise.
#[derive(Clone, Debug)]
pub struct Example {
    pub mixture: Vec<f64>,
    pub sources: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub record: ManifestRecord,
}

impl Example {
    /// In-memory example; the record's paths are empty.
    pub fn from_mixture(id: impl Into<String>, m: &Mixture, spec: &MixtureSpec) -> Self {
        let record = ManifestRecord {
            id: id.into(),
            mixture: String::new(),
            s1: String::new(),
            s2: String::new(),
            noise: String::new(),
            seed: spec.seed,
            samples: m.mixture.len(),
            sample_rate: m.sample_rate,
            target_overlap: spec.target_overlap,
            measured_overlap: measure_overlap(&m.s1, &m.s2, m.sample_rate).unwrap_or(0.0),
            noise_activity: spec.noise_activity,
            sir_db: spec.sir_db,
            snr_db: spec.snr_db,
        };
        Self {
            mixture: m.mixture.clone(),
            sources: vec![m.s1.clone(), m.s2.clone()],
            noise: m.noise.clone(),
            record,
        }
    }
}

/// Generates a whole dataset in memory.
pub fn generate_examples(spec: &DatasetSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let (m, ms) = generate_mixture(spec, i)?;
            Ok(Example::from_mixture(format!("mix{i:05}"), &m, &ms))
        })
        .collect()
}

/// Every example listed in a manifest.
pub fn load_examples(m: &Manifest) -> Result<Vec<Example>> {
    m.records.iter().map(|r| load_example(m, r)).collect()
}

pub fn load_example(m: &Manifest, rec: &ManifestRecord) -> Result<Example> {
    let rate = Some(rec.sample_rate);
    Ok(Example {
        mixture: load_wav(&m.path(&rec.mixture), rate)?.samples,
        sources: vec![load_wav(&m.path(&rec.s1), rate)?.samples, load_wav(&m.path(&rec.s2), rate)?.samples],
        noise: load_wav(&m.path(&rec.noise), rate)?.samples,
        record: rec.clone(),
    })
}

/// Writes `spec.count` mixtures and a manifest under `dir`.
pub fn generate_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (m, ms) = generate_mixture(spec, i)?;
        let id = format!("mix{i:05}");
        let names = ["mix", "s1", "s2", "noise"].map(|k| format!("{id}_{k}.wav"));
        for (name, data) in names.iter().zip([&m.mixture, &m.s1, &m.s2, &m.noise]) {
            save_wav(&dir.join(name), data, spec.sample_rate)?;
        }
        let [mixture, s1, s2, noise] = names;
        records.push(ManifestRecord {
            id,
            mixture,
            s1,
            s2,
            noise,
            seed: ms.seed,
            samples: m.mixture.len(),
            sample_rate: spec.sample_rate,
            target_overlap: ms.target_overlap,
            measured_overlap: measure_overlap(&m.s1, &m.s2, spec.sample_rate).unwrap_or(0.0),
            noise_activity: ms.noise_activity,
            sir_db: ms.sir_db,
            snr_db: ms.snr_db,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, sr: f64) -> Vec<f64> {
        (0..n).map(|i| 0.5 * (2.0 * PI * 440.0 * i as f64 / sr).sin()).collect()
    }

    #[test]
    fn vad_basic_cases() {
        assert_eq!(energy_vad(&tone(8000, 8000.0), 8000, -40.0, 32.0), vec![(0, 8000)]);
        assert!(energy_vad(&[0.0; 4000], 8000, -40.0, 32.0).is_empty());
        let mut s = vec![0.0; 4000];
        s.extend(tone(8000, 8000.0));
        let iv = energy_vad(&s, 8000, -40.0, 32.0);
        assert!((iv[0].0 as i64 - 4000).abs() <= 256, "{iv:?}");
    }

    #[test]
    fn synth_is_deterministic() {
        let k = SourceKind::Speech { pause_prob: 0.3 };
        let a = synth_sources(k, 4.0, 8000, 11).unwrap();
        let b = synth_sources(k, 4.0, 8000, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32000);
        assert!(effective_span(&a.samples, 8000).is_some());
    }

    #[test]
    fn offset_arithmetic() {
        let sr = 8000;
        let mut x = vec![0.0; 4096];
        x.extend(tone(16384, 8000.0));
        x.extend(vec![0.0; 4096]);
        let s = AudioSignal::new(x, sr);
        let p = compute_offset(&s, &s, 1.0, false, 1).unwrap();
        assert_eq!(p.shift, 0);
        let p = compute_offset(&s, &s, 0.5, false, 1).unwrap();
        assert_eq!(p.shift, 8192);
    }

    #[test]
    fn silent_noise_window() {
        let k = SourceKind::Speech { pause_prob: 0.0 };
        let s1 = synth_sources(k, 2.0, 8000, 1).unwrap();
        let s2 = synth_sources(k, 2.0, 8000, 2).unwrap();
        let n = synth_sources(SourceKind::Noise, 4.0, 8000, 3).unwrap();
        let spec = MixtureSpec {
            target_overlap: 0.5,
            sir_db: 2.0,
            noise_activity: 0.0,
            snr_db: 0.0,
            seed: 4,
        };
        let m = make_mixture(&s1, &s2, &n, &spec, Some(32000)).unwrap();
        assert!(m.noise.iter().all(|&v| v == 0.0));
        for i in 0..m.mixture.len() {
            assert_eq!(m.mixture[i], m.s1[i] + m.s2[i]);
        }
    }

    #[test]
    fn rate_mismatch_rejected() {
        let a = AudioSignal::new(tone(800, 8000.0), 8000);
        let b = AudioSignal::new(tone(800, 8000.0), 16000);
        assert!(compute_offset(&a, &b, 0.5, false, 1).is_err());
    }
}
