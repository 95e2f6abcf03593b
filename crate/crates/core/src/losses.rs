//! Signal and complexity objectives.
//!
//! Plain `f64` functions serve evaluation and test oracles; the `graph_*`
//! variants build the same quantities on an autodiff [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::{activity_mask, energy_vad, VAD_FRAME_MS, VAD_THRESHOLD_DB};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SDR_CLAMP_DB: f64 = 60.0;
pub const EPS: f64 = 1e-8;
/// Absolute floor keeping an all-zero estimate finite.
const FLOOR: f64 = 1e-20;
/// Fraction of a segment a reference must be active in to count as present.
pub const SEGMENT_ACTIVITY: f64 = 0.25;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB, clamped to ±60.
///
/// The guard added to both energies is `EPS` times their sum, which keeps
/// the ratio homogeneous of degree zero in the estimate's scale.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::contract(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::contract("SI-SDR of an all-zero reference"));
    }
    let alpha = dot(est, reference) / rr;
    let mut target = 0.0;
    let mut noise = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let s = alpha * r;
        target += s * s;
        noise += (e - s) * (e - s);
    }
    let guard = EPS * (target + noise) + FLOOR;
    let db = 10.0 * ((target + guard) / (noise + guard)).log10();
    Ok(db.clamp(-SDR_CLAMP_DB, SDR_CLAMP_DB))
}

/// All orderings of `0..n`, lexicographic.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Permutation-invariant loss: the minimum over assignments of the mean
/// negative SI-SDR. `perm[j]` is the estimate paired with reference `j`.
pub fn pit_signal_loss(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let j = references.len();
    if estimates.len() != j || j == 0 {
        return Err(Error::contract(format!("{} estimates for {j} references", estimates.len())));
    }
    let mut pair = vec![vec![0.0; j]; j];
    for (r, row) in pair.iter_mut().enumerate() {
        for (e, v) in row.iter_mut().enumerate() {
            *v = si_sdr(&estimates[e], &references[r])?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(j) {
        let loss = -p.iter().enumerate().map(|(r, &e)| pair[r][e]).sum::<f64>() / j as f64;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, p));
        }
    }
    Ok(best.unwrap())
}

/// Differentiable SI-SDR of `est` (`[L]`) against a fixed reference.
pub fn graph_si_sdr<T: Scalar>(g: &mut Graph<T>, est: Var, reference: &[f64]) -> Result<Var> {
    let rr: f64 = dot(reference, reference);
    if rr == 0.0 {
        return Err(Error::contract("SI-SDR of an all-zero reference"));
    }
    let r = g.constant(Tensor::from_f64(&[reference.len()], reference)?);
    let er = g.mul(est, r)?;
    let er = g.sum(er)?;
    let alpha = g.scale(er, T::cast(1.0 / rr))?;
    let target = g.mul(r, alpha)?;
    let noise = g.sub(est, target)?;
    let t2 = g.square(target)?;
    let s = g.sum(t2)?;
    let n2 = g.square(noise)?;
    let n = g.sum(n2)?;
    let total = g.add(s, n)?;
    let guard = g.scale(total, T::cast(EPS))?;
    let guard = g.add_scalar(guard, T::cast(FLOOR))?;
    let num = g.add(s, guard)?;
    let den = g.add(n, guard)?;
    let ratio = g.div(num, den)?;
    let ln = g.log(ratio)?;
    let db = g.scale(ln, T::cast(10.0 / std::f64::consts::LN_10))?;
    g.clamp(db, T::cast(-SDR_CLAMP_DB), T::cast(SDR_CLAMP_DB))
}

/// Graph PIT loss. The assignment is chosen on forward values; the loss
/// node is built for that assignment only, which is where the minimum's
/// gradient lives.
pub fn graph_pit_loss<T: Scalar>(g: &mut Graph<T>, estimates: &[Var], references: &[Vec<f64>]) -> Result<(Var, Vec<usize>)> {
    let values: Vec<Vec<f64>> = estimates.iter().map(|&e| g.value(e).to_f64_vec()).collect();
    let (_, perm) = pit_signal_loss(&values, references)?;
    let mut acc: Option<Var> = None;
    for (r, &e) in perm.iter().enumerate() {
        let s = graph_si_sdr(g, estimates[e], &references[r])?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let loss = g.scale(acc.unwrap(), T::cast(-1.0 / references.len() as f64))?;
    Ok((loss, perm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentTag {
    Silence,
    Single,
    Overlap,
}

impl SegmentTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentTag::Silence => "silence",
            SegmentTag::Single => "single",
            SegmentTag::Overlap => "overlap",
        }
    }
}

/// Segment and frame geometry for segmental scoring.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentGeometry {
    pub seg_len: usize,
    pub seg_hop: usize,
    /// Encoder window and hop in samples, for frame centres.
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl SegmentGeometry {
    /// 96 ms segments at 50% overlap.
    pub fn new(sample_rate: u32, window: usize, hop: usize) -> Self {
        let seg_len = (0.096 * sample_rate as f64).round() as usize;
        Self {
            seg_len,
            seg_hop: seg_len / 2,
            window,
            hop,
            sample_rate,
        }
    }

    /// Segment start offsets covering `len` samples; the last segment is
    /// right-aligned when the hop grid leaves a tail.
    pub fn starts(&self, len: usize) -> Vec<usize> {
        if len <= self.seg_len {
            return vec![0];
        }
        let mut s: Vec<usize> = (0..).map(|i| i * self.seg_hop).take_while(|&st| st + self.seg_len <= len).collect();
        if s.last().is_none_or(|&l| l + self.seg_len < len) {
            s.push(len - self.seg_len);
        }
        s
    }
}

/// Per-segment and per-frame segmental scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentalScore {
    pub segment_starts: Vec<usize>,
    pub segment_scores: Vec<Option<f64>>,
    pub segment_tags: Vec<SegmentTag>,
    /// Mean score of the non-silent segments covering each frame; `None`
    /// when every covering segment is silent.
    pub frame_scores: Vec<Option<f64>>,
    /// Most active condition among each frame's covering segments.
    pub frame_tags: Vec<SegmentTag>,
}

/// Speaker activity masks from the energy detector.
pub fn reference_activity(references: &[Vec<f64>], sample_rate: u32) -> Vec<Vec<bool>> {
    references
        .iter()
        .map(|r| activity_mask(&energy_vad(r, sample_rate, VAD_THRESHOLD_DB, VAD_FRAME_MS), r.len()))
        .collect()
}

/// Segmental SI-SDR under the assignment `perm` (estimate `perm[j]` for
/// reference `j`), mapped onto `frames` encoder frames.
pub fn seg_si_sdr(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    perm: &[usize],
    geo: &SegmentGeometry,
    frames: usize,
) -> Result<SegmentalScore> {
    let activity = reference_activity(references, geo.sample_rate);
    seg_si_sdr_with_activity(estimates, references, &activity, perm, geo, frames)
}

pub fn seg_si_sdr_with_activity(
    estimates: &[Vec<f64>],
    references: &[Vec<f64>],
    activity: &[Vec<bool>],
    perm: &[usize],
    geo: &SegmentGeometry,
    frames: usize,
) -> Result<SegmentalScore> {
    let len = references.first().map_or(0, |r| r.len());
    if references.iter().chain(estimates).any(|s| s.len() != len) || perm.len() != references.len() {
        return Err(Error::contract("segmental scoring needs equal-length signals and a full assignment"));
    }
    let starts = geo.starts(len);
    let mut scores = Vec::with_capacity(starts.len());
    let mut tags = Vec::with_capacity(starts.len());
    for &st in &starts {
        let end = (st + geo.seg_len).min(len);
        let need = SEGMENT_ACTIVITY * (end - st) as f64;
        let mut sum = 0.0;
        let mut n = 0;
        for (j, r) in references.iter().enumerate() {
            let active = activity[j][st..end].iter().filter(|&&a| a).count() as f64;
            let seg = &r[st..end];
            if active >= need && seg.iter().any(|&v| v != 0.0) {
                sum += si_sdr(&estimates[perm[j]][st..end], seg)?;
                n += 1;
            }
        }
        tags.push(match n {
            0 => SegmentTag::Silence,
            1 => SegmentTag::Single,
            _ => SegmentTag::Overlap,
        });
        scores.push((n > 0).then(|| sum / n as f64));
    }
    let mut frame_scores = Vec::with_capacity(frames);
    let mut frame_tags = Vec::with_capacity(frames);
    for t in 0..frames {
        let centre = t * geo.hop + geo.window / 2;
        let mut sum = 0.0;
        let mut n = 0;
        let mut tag = SegmentTag::Silence;
        for (i, &st) in starts.iter().enumerate() {
            if st <= centre && centre < st + geo.seg_len {
                tag = tag.max(tags[i]);
                if let Some(s) = scores[i] {
                    sum += s;
                    n += 1;
                }
            }
        }
        frame_scores.push((n > 0).then(|| sum / n as f64));
        frame_tags.push(tag);
    }
    Ok(SegmentalScore {
        segment_starts: starts,
        segment_scores: scores,
        segment_tags: tags,
        frame_scores,
        frame_tags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingScheme {
    /// Every frame weighted 1.
    Si,
    /// Weight driven by segmental reconstruction quality.
    Sd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightingConfig {
    pub scheme: WeightingScheme,
    /// Steepness.
    pub a: f64,
    /// Threshold in dB.
    pub b: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            scheme: WeightingScheme::Sd,
            a: 0.05,
            b: 30.0,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scheme == WeightingScheme::Sd && !(self.a > 0.0) {
            return Err(Error::Config(format!("weighting steepness a = {} must be positive", self.a)));
        }
        Ok(())
    }
}

/// Weight for one segmental score.
pub fn sd_weight_value(score: f64, a: f64, b: f64) -> f64 {
    if score < b {
        0.0
    } else {
        (a * (score - b) - 1.0).exp().min(1.0)
    }
}

/// Per-frame complexity weights; silent frames get the maximum weight.
pub fn sd_weight(seg: &SegmentalScore, cfg: &WeightingConfig) -> Vec<f64> {
    match cfg.scheme {
        WeightingScheme::Si => vec![1.0; seg.frame_scores.len()],
        WeightingScheme::Sd => seg
            .frame_scores
            .iter()
            .map(|s| s.map_or(1.0, |v| sd_weight_value(v, cfg.a, cfg.b)))
            .collect(),
    }
}

/// `mean_t w_t (U_t - min)^2`.
pub fn complexity_loss(u: &[f64], w: &[f64], min_level: f64) -> Result<f64> {
    if u.len() != w.len() || u.is_empty() {
        return Err(Error::contract(format!("{} utilization values, {} weights", u.len(), w.len())));
    }
    Ok(u.iter().zip(w).map(|(u, w)| w * (u - min_level).powi(2)).sum::<f64>() / u.len() as f64)
}

/// Graph version of [`complexity_loss`] with constant weights.
pub fn graph_complexity_loss<T: Scalar>(g: &mut Graph<T>, u: Var, w: &[f64], min_level: f64) -> Result<Var> {
    let n = g.value(u).numel();
    if w.len() != n {
        return Err(Error::contract(format!("{n} utilization values, {} weights", w.len())));
    }
    let d = g.add_scalar(u, T::cast(-min_level))?;
    let d2 = g.square(d)?;
    let wv = g.constant(Tensor::from_f64(g.shape(u), w)?);
    let weighted = g.mul(d2, wv)?;
    g.mean(weighted)
}

pub fn total_loss(signal: f64, complexity: f64, alpha: f64) -> f64 {
    signal + alpha * complexity
}

pub fn graph_total_loss<T: Scalar>(g: &mut Graph<T>, signal: Var, complexity: Var, alpha: f64) -> Result<Var> {
    let c = g.scale(complexity, T::cast(alpha))?;
    g.add(signal, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_cases() {
        let r = [0.3, -0.7, 1.1, 0.2];
        assert_eq!(si_sdr(&r, &r).unwrap(), 60.0);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&twice, &r).unwrap(), 60.0);
        assert_eq!(si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(si_sdr(&[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pit_finds_swap() {
        let a = vec![1.0, 0.5, -0.2, 0.3];
        let b = vec![-0.4, 0.1, 0.9, -0.6];
        let refs = vec![a.clone(), b.clone()];
        let (l1, p1) = pit_signal_loss(&refs, &refs).unwrap();
        let (l2, p2) = pit_signal_loss(&[b, a], &refs).unwrap();
        assert_eq!(l1, -60.0);
        assert_eq!(l1, l2);
        assert_eq!(p1, [0, 1]);
        assert_eq!(p2, [1, 0]);
    }

    #[test]
    fn weight_anchors() {
        assert!((sd_weight_value(30.0, 0.05, 30.0) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(sd_weight_value(29.99, 0.05, 30.0), 0.0);
        assert_eq!(sd_weight_value(50.0, 0.05, 30.0), 1.0);
    }

    #[test]
    fn complexity_arithmetic() {
        assert_eq!(complexity_loss(&[0.125; 4], &[1.0; 4], 0.125).unwrap(), 0.0);
        assert_eq!(complexity_loss(&[1.0; 4], &[1.0; 4], 0.125).unwrap(), 0.765625);
        assert_eq!(total_loss(1.0, 1.0, 1.0), 2.0);
        assert_eq!(total_loss(-3.0, 5.0, 0.0), -3.0);
    }

    #[test]
    fn segment_grid_at_8k() {
        let geo = SegmentGeometry::new(8000, 16, 8);
        assert_eq!((geo.seg_len, geo.seg_hop), (768, 384));
        assert_eq!(geo.starts(1536), [0, 384, 768]);
        assert_eq!(geo.starts(1600), [0, 384, 768, 832]);
        assert_eq!(geo.starts(500), [0]);
    }
}
