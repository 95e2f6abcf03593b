//! Separation quality and utilization statistics over a dataset.

use serde::Serialize;

use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::losses::{self, SegmentGeometry, SegmentTag};
use crate::separator::{Gating, Separator};
use crate::tensor::Scalar;

const TAGS: [SegmentTag; 3] = [SegmentTag::Silence, SegmentTag::Single, SegmentTag::Overlap];

/// Mean SI-SDR improvement over the mixture under the best assignment.
pub fn si_sdri(estimates: &[Vec<f64>], references: &[Vec<f64>], mixture: &[f64]) -> Result<f64> {
    let (_, perm) = losses::pit_signal_loss(estimates, references)?;
    let mut sum = 0.0;
    for (j, r) in references.iter().enumerate() {
        sum += losses::si_sdr(&estimates[perm[j]], r)? - losses::si_sdr(mixture, r)?;
    }
    Ok(sum / references.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_sdri: f64,
    pub mean_utilization: f64,
    pub macs_per_s: f64,
    pub overlap: f64,
    pub noise_activity: f64,
    /// Applied level per encoder frame.
    #[serde(skip)]
    pub utilization: Vec<f64>,
    #[serde(skip)]
    pub frame_tags: Vec<SegmentTag>,
    /// Mean segmental improvement per segment type, when present.
    #[serde(skip)]
    pub segment_improvement: Vec<(SegmentTag, f64)>,
}

/// What produces the estimates.
#[derive(Clone, Debug, PartialEq)]
pub enum Estimator {
    Model(Gating),
    /// Every estimate is the mixture itself.
    Bypass,
}

pub fn evaluate_example<T: Scalar>(model: &Separator<T>, ex: &Example, est: &Estimator) -> Result<UtteranceMetrics> {
    let cfg = &model.config;
    let frames = cfg.frames(ex.mixture.len())?;
    let (estimates, utilization, macs_per_s) = match est {
        Estimator::Bypass => (vec![ex.mixture.clone(); ex.sources.len()], vec![0.0; frames], 0.0),
        Estimator::Model(gating) => {
            let y: Vec<T> = ex.mixture.iter().map(|&v| T::cast(v)).collect();
            let sep = model.separate(&y, gating)?;
            let est = sep.sources.iter().map(|s| s.iter().map(|v| v.as_f64()).collect()).collect();
            (est, sep.utilization.values, sep.report.macs_per_second)
        }
    };
    let (_, perm) = losses::pit_signal_loss(&estimates, &ex.sources)?;
    let geo = SegmentGeometry::new(cfg.sample_rate, cfg.window, cfg.hop);
    let activity = losses::reference_activity(&ex.sources, cfg.sample_rate);
    let seg = losses::seg_si_sdr_with_activity(&estimates, &ex.sources, &activity, &perm, &geo, frames)?;
    let mix = vec![ex.mixture.clone(); ex.sources.len()];
    let identity: Vec<usize> = (0..ex.sources.len()).collect();
    let base = losses::seg_si_sdr_with_activity(&mix, &ex.sources, &activity, &identity, &geo, frames)?;
    let segment_improvement = TAGS
        .iter()
        .filter_map(|&tag| {
            let d: Vec<f64> = (0..seg.segment_tags.len())
                .filter(|&i| seg.segment_tags[i] == tag)
                .filter_map(|i| Some(seg.segment_scores[i]? - base.segment_scores[i]?))
                .collect();
            (!d.is_empty()).then(|| (tag, d.iter().sum::<f64>() / d.len() as f64))
        })
        .collect();
    Ok(UtteranceMetrics {
        id: ex.record.id.clone(),
        si_sdri: si_sdri(&estimates, &ex.sources, &ex.mixture)?,
        mean_utilization: utilization.iter().sum::<f64>() / frames as f64,
        macs_per_s,
        overlap: ex.record.measured_overlap,
        noise_activity: ex.record.noise_activity,
        utilization,
        frame_tags: seg.frame_tags,
        segment_improvement,
    })
}

/// Averages over the utterances in one condition bin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionRow {
    pub factor: &'static str,
    pub bin: String,
    pub count: usize,
    pub si_sdri: f64,
    pub mean_utilization: f64,
    pub macs_per_s: f64,
}

/// Frame statistics for one segment type.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentRow {
    pub segment: SegmentTag,
    pub frames: usize,
    pub mean_utilization: f64,
    /// Mean segmental SI-SDR improvement; `None` for silence.
    pub si_sdri: Option<f64>,
    /// Fraction of this type's frames at each level; sums to 1.
    pub level_fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub utterances: Vec<UtteranceMetrics>,
    pub si_sdri: f64,
    pub mean_utilization: f64,
    pub macs_per_s: f64,
    pub conditions: Vec<ConditionRow>,
    pub segments: Vec<SegmentRow>,
    pub levels: Vec<f64>,
}

fn quarter_bins(v: f64) -> usize {
    ((v * 4.0).floor() as usize).min(3)
}

const BIN_LABELS: [&str; 4] = ["0.00-0.25", "0.25-0.50", "0.50-0.75", "0.75-1.00"];

fn condition_rows(utts: &[UtteranceMetrics], factor: &'static str, key: fn(&UtteranceMetrics) -> f64) -> Vec<ConditionRow> {
    (0..4)
        .filter_map(|b| {
            let sel: Vec<&UtteranceMetrics> = utts.iter().filter(|u| quarter_bins(key(u)) == b).collect();
            let n = sel.len();
            (n > 0).then(|| ConditionRow {
                factor,
                bin: BIN_LABELS[b].to_string(),
                count: n,
                si_sdri: sel.iter().map(|u| u.si_sdri).sum::<f64>() / n as f64,
                mean_utilization: sel.iter().map(|u| u.mean_utilization).sum::<f64>() / n as f64,
                macs_per_s: sel.iter().map(|u| u.macs_per_s).sum::<f64>() / n as f64,
            })
        })
        .collect()
}

pub fn summarize(utterances: Vec<UtteranceMetrics>, levels: &[f64]) -> Result<EvalSummary> {
    if utterances.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let n = utterances.len() as f64;
    let mean = |f: fn(&UtteranceMetrics) -> f64| utterances.iter().map(f).sum::<f64>() / n;
    let mut conditions = condition_rows(&utterances, "overlap", |u| u.overlap);
    conditions.extend(condition_rows(&utterances, "noise_activity", |u| u.noise_activity));
    let segments = TAGS
        .iter()
        .filter_map(|&tag| {
            let mut counts = vec![0usize; levels.len()];
            let mut total = 0usize;
            let mut u_sum = 0.0;
            for u in &utterances {
                for (t, &tg) in u.frame_tags.iter().enumerate() {
                    if tg == tag {
                        total += 1;
                        u_sum += u.utilization[t];
                        if let Some(k) = levels.iter().position(|&l| (l - u.utilization[t]).abs() < 1e-12) {
                            counts[k] += 1;
                        }
                    }
                }
            }
            let imp: Vec<f64> = utterances
                .iter()
                .filter_map(|u| u.segment_improvement.iter().find(|(t, _)| *t == tag).map(|(_, v)| *v))
                .collect();
            (total > 0).then(|| SegmentRow {
                segment: tag,
                frames: total,
                mean_utilization: u_sum / total as f64,
                si_sdri: (!imp.is_empty()).then(|| imp.iter().sum::<f64>() / imp.len() as f64),
                level_fractions: counts.iter().map(|&c| c as f64 / total as f64).collect(),
            })
        })
        .collect();
    Ok(EvalSummary {
        si_sdri: mean(|u| u.si_sdri),
        mean_utilization: mean(|u| u.mean_utilization),
        macs_per_s: mean(|u| u.macs_per_s),
        utterances,
        conditions,
        segments,
        levels: levels.to_vec(),
    })
}

pub fn evaluate<T: Scalar>(model: &Separator<T>, examples: &[Example], est: &Estimator) -> Result<EvalSummary> {
    let utts = examples
        .iter()
        .map(|ex| evaluate_example(model, ex, est))
        .collect::<Result<Vec<_>>>()?;
    summarize(utts, model.config.utilization.levels())
}

/// One row of the internal-versus-external gating table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GatingRow {
    /// `internal` or the constant level.
    pub mode: String,
    pub si_sdri: f64,
    pub mean_utilization: f64,
    pub macs_per_s: f64,
}

/// Internal gating followed by one row per level of the utilization set.
pub fn external_sweep<T: Scalar>(model: &Separator<T>, examples: &[Example]) -> Result<Vec<GatingRow>> {
    let mut modes = vec![("internal".to_string(), Gating::Internal)];
    for &l in model.config.utilization.levels() {
        modes.push((format!("{l}"), Gating::External(l)));
    }
    modes
        .into_iter()
        .map(|(mode, gating)| {
            let s = evaluate(model, examples, &Estimator::Model(gating))?;
            Ok(GatingRow {
                mode,
                si_sdri: s.si_sdri,
                mean_utilization: s.mean_utilization,
                macs_per_s: s.macs_per_s,
            })
        })
        .collect()
}

impl EvalSummary {
    /// Long-format CSV: `section,key,count,si_sdri,mean_utilization,macs_per_s`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,key,count,si_sdri,mean_utilization,macs_per_s\n");
        s += &format!(
            "overall,all,{},{},{},{}\n",
            self.utterances.len(),
            self.si_sdri,
            self.mean_utilization,
            self.macs_per_s
        );
        for c in &self.conditions {
            s += &format!(
                "{},{},{},{},{},{}\n",
                c.factor, c.bin, c.count, c.si_sdri, c.mean_utilization, c.macs_per_s
            );
        }
        for r in &self.segments {
            let sdri = r.si_sdri.map_or(String::new(), |v| v.to_string());
            s += &format!("segment,{},{},{},{},\n", r.segment.as_str(), r.frames, sdri, r.mean_utilization);
        }
        s
    }

    /// Rows per segment type, one column per level.
    pub fn histogram_csv(&self) -> String {
        let head: Vec<String> = self.levels.iter().map(|l| format!("u={l}")).collect();
        let mut s = format!("segment,{}\n", head.join(","));
        for r in &self.segments {
            let v: Vec<String> = r.level_fractions.iter().map(|f| f.to_string()).collect();
            s += &format!("{},{}\n", r.segment.as_str(), v.join(","));
        }
        s
    }
}

pub fn gating_rows_csv(rows: &[GatingRow]) -> String {
    let mut s = String::from("mode,si_sdri,mean_utilization,macs_per_s\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.mode, r.si_sdri, r.mean_utilization, r.macs_per_s);
    }
    s
}
