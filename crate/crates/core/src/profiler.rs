//! Analytic multiply–accumulate and active-parameter accounting.
//!
//! Only linear, convolution and attention matrix products are counted;
//! elementwise ops, softmax and normalisation are free. Site keys match the
//! ones the inference kernels report to [`MacMeter`], so the two can be
//! compared entry by entry.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::separator::{Gating, SeparatorConfig, Separator};
use crate::transformer::{active_count, check_utilization, LayerDims, MacMeter};

/// How the attention output projection is charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MacConvention {
    /// Full `F×F` projection at every frame, independent of active heads.
    #[default]
    Dense,
    /// Only the rows of active heads, as the slim kernels execute it.
    Sliced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub total_macs: u64,
    pub macs_per_second: f64,
    pub duration_s: f64,
    /// Parameters touched at the largest realised level.
    pub active_params: usize,
    /// Frames per distinct level, ascending.
    pub histogram: Vec<(f64, usize)>,
    pub includes_gate: bool,
    pub convention: MacConvention,
    pub sites: MacMeter,
}

impl ComplexityReport {
    pub fn mean_utilization(&self) -> f64 {
        let n: usize = self.histogram.iter().map(|(_, c)| c).sum();
        self.histogram.iter().map(|(u, c)| u * *c as f64).sum::<f64>() / n.max(1) as f64
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "total_macs={}", self.total_macs);
        let _ = writeln!(s, "macs_per_second={:.0}", self.macs_per_second);
        let _ = writeln!(s, "gmacs_per_second={:.4}", self.macs_per_second / 1e9);
        let _ = writeln!(s, "duration_s={}", self.duration_s);
        let _ = writeln!(s, "active_params={}", self.active_params);
        let _ = writeln!(s, "mean_utilization={:.6}", self.mean_utilization());
        let _ = writeln!(s, "includes_gate={}", self.includes_gate);
        let _ = writeln!(
            s,
            "mac_convention={}",
            match self.convention {
                MacConvention::Dense => "dense",
                MacConvention::Sliced => "sliced",
            }
        );
        for (u, c) in &self.histogram {
            let _ = writeln!(s, "frames_at_{u}={c}");
        }
        s
    }
}

fn attention_macs(counts: &[usize], dims: &LayerDims, convention: MacConvention) -> u64 {
    let (f, d) = (dims.features as u64, dims.head_dim() as u64);
    let mut macs = 0;
    for h in 0..dims.heads {
        let n = counts.iter().filter(|&&c| c > h).count() as u64;
        macs += 3 * n * d * f + 2 * n * n * d;
        if convention == MacConvention::Sliced {
            macs += n * d * f;
        }
    }
    if convention == MacConvention::Dense {
        macs += counts.len() as u64 * f * f;
    }
    macs
}

fn ffw_macs(u: &[f64], dims: &LayerDims) -> u64 {
    u.iter()
        .map(|&v| 2 * (active_count(v, dims.hidden) * dims.features) as u64)
        .sum()
}

/// Charges one transformer block over `seqs` sequences of per-frame levels.
fn block_macs(
    meter: &mut MacMeter,
    prefix: &str,
    seqs: &[Vec<f64>],
    dims: &LayerDims,
    layers: usize,
    convention: MacConvention,
) {
    let heads: Vec<Vec<usize>> = seqs
        .iter()
        .map(|s| s.iter().map(|&v| active_count(v, dims.heads)).collect())
        .collect();
    let attn: u64 = heads.iter().map(|c| attention_macs(c, dims, convention)).sum();
    let ffw: u64 = seqs.iter().map(|s| ffw_macs(s, dims)).sum();
    for l in 0..layers {
        meter.add(&format!("{prefix}.layer{l}.attn"), attn);
        meter.add(&format!("{prefix}.layer{l}.ffw"), ffw);
    }
}

/// Analytic cost of separating `samples` samples under per-frame levels `u`.
pub fn count_macs(
    cfg: &SeparatorConfig,
    u: &[f64],
    samples: usize,
    include_gate: bool,
    convention: MacConvention,
) -> Result<ComplexityReport> {
    let t = cfg.frames(samples)?;
    if u.len() != t {
        return Err(Error::contract(format!("{} utilization values for {t} frames", u.len())));
    }
    check_utilization(u)?;
    let spec = cfg.chunk_spec(t)?;
    let (s, c) = (spec.n_chunks(), spec.chunk_size);
    let (f, w, j) = (cfg.features as u64, cfg.window as u64, cfg.speakers as u64);
    let tt = t as u64;
    let pad = cfg.utilization.min().min(u.iter().copied().fold(1.0, f64::min));
    let at = |si: usize, ci: usize| spec.frame(si, ci).map_or(pad, |fr| u[fr]);

    let mut m = MacMeter::new();
    m.add("encoder", tt * f * w);
    m.add("masker.input", tt * f * f);
    let intra: Vec<Vec<f64>> = (0..s).map(|si| (0..c).map(|ci| at(si, ci)).collect()).collect();
    let inter: Vec<Vec<f64>> = (0..c).map(|ci| (0..s).map(|si| at(si, ci)).collect()).collect();
    for r in 0..cfg.repeats {
        let (id, xd) = (cfg.intra_dims(), cfg.inter_dims());
        block_macs(&mut m, &format!("masker.rep{r}.intra"), &intra, &id, cfg.intra_layers, convention);
        block_macs(&mut m, &format!("masker.rep{r}.inter"), &inter, &xd, cfg.inter_layers, convention);
    }
    m.add("masker.head", (s * c) as u64 * f * j * f);
    m.add("masker.output", tt * j * 2 * f * f);
    m.add("decoder", j * tt * f * w);
    if include_gate {
        let g = &cfg.gate;
        let gf = g.features as u64;
        m.add("gate.input", tt * f * gf);
        let full = vec![vec![1.0; c]; s];
        // The gate is static, so both conventions agree.
        block_macs(&mut m, "gate.intra", &full, &g.layer_dims(), g.layers, MacConvention::Sliced);
        m.add("gate.output", tt * 2 * gf * cfg.utilization.len() as u64);
    }

    let mut histogram: BTreeMap<u64, usize> = BTreeMap::new();
    for &v in u {
        *histogram.entry(v.to_bits()).or_default() += 1;
    }
    let histogram = histogram.into_iter().map(|(b, n)| (f64::from_bits(b), n)).collect();
    let top = u.iter().copied().fold(0.0, f64::max);
    let duration_s = samples as f64 / cfg.sample_rate as f64;
    let total = m.total();
    Ok(ComplexityReport {
        total_macs: total,
        macs_per_second: total as f64 / duration_s,
        duration_s,
        active_params: count_active_params(cfg, top, include_gate),
        histogram,
        includes_gate: include_gate,
        convention,
        sites: m,
    })
}

fn layer_active_params(dims: &LayerDims, u: f64) -> usize {
    let (f, d) = (dims.features, dims.head_dim());
    let heads = active_count(u, dims.heads);
    let hidden = active_count(u, dims.hidden);
    4 * f + 4 * heads * d * f + 2 * hidden * f + hidden + f
}

/// Parameters used at constant level `u`: the active head and neuron
/// prefixes of every layer plus all always-on tensors.
pub fn count_active_params(cfg: &SeparatorConfig, u: f64, include_gate: bool) -> usize {
    let (f, w, j) = (cfg.features, cfg.window, cfg.speakers);
    let fixed = 2 * f * w + 2 * f + f * f + 1 + j * f * f + j * f + 2 * (f * f + f);
    let blocks = cfg.repeats
        * (cfg.intra_layers * layer_active_params(&cfg.intra_dims(), u)
            + cfg.inter_layers * layer_active_params(&cfg.inter_dims(), u)
            + 4 * f);
    let gate = if include_gate {
        cfg.gate.param_count(f, cfg.utilization.len())
    } else {
        0
    };
    fixed + blocks + gate
}

/// One row of the cost versus utilization listing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub utilization: f64,
    pub gmacs_per_s: f64,
    pub params_m: f64,
}

/// Cost of a constant level over `duration_s` seconds of input. The gate is
/// excluded, as under external gating.
pub fn profile_row(cfg: &SeparatorConfig, u: f64, duration_s: f64, convention: MacConvention) -> Result<ProfileRow> {
    let samples = (duration_s * cfg.sample_rate as f64).round() as usize;
    let t = cfg.frames(samples)?;
    let r = count_macs(cfg, &vec![u; t], samples, false, convention)?;
    Ok(ProfileRow {
        utilization: u,
        gmacs_per_s: r.macs_per_second / 1e9,
        params_m: r.active_params as f64 / 1e6,
    })
}

pub fn rows_to_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("utilization,gmacs_per_s,params_m\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4}", r.utilization, r.gmacs_per_s, r.params_m);
    }
    s
}

/// Per-site analytic vs instrumented counts.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<(String, u64, u64)>,
}

impl Comparison {
    pub fn is_exact(&self) -> bool {
        self.rows.iter().all(|(_, a, b)| a == b)
    }

    pub fn analytic_total(&self) -> u64 {
        self.rows.iter().map(|r| r.1).sum()
    }

    pub fn instrumented_total(&self) -> u64 {
        self.rows.iter().map(|r| r.2).sum()
    }

    /// Errors with the list of mismatching sites.
    pub fn ensure_exact(&self) -> Result<()> {
        if self.is_exact() {
            return Ok(());
        }
        let mut msg = String::from("analytic and instrumented MAC counts differ:");
        for (site, a, b) in self.rows.iter().filter(|r| r.1 != r.2) {
            let _ = write!(msg, "\n  {site}: analytic {a}, instrumented {b}, delta {}", *a as i128 - *b as i128);
        }
        Err(Error::Contract(msg))
    }
}

/// Runs the inference kernels on `y` and compares their MAC tally with the
/// analytic count for the utilization they realised.
pub fn verify_against_instrumented(sep: &Separator<f64>, y: &[f64], gating: &Gating) -> Result<Comparison> {
    let out = sep.separate(y, gating)?;
    let analytic = &out.report;
    let mut keys: Vec<&String> = analytic.sites.sites().keys().chain(out.meter.sites().keys()).collect();
    keys.sort();
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|k| {
            (
                k.clone(),
                analytic.sites.sites().get(k).copied().unwrap_or(0),
                out.meter.sites().get(k).copied().unwrap_or(0),
            )
        })
        .collect();
    Ok(Comparison { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_full_width() {
        let cfg = SeparatorConfig::default();
        let r = profile_row(&cfg, 1.0, 4.0, MacConvention::Dense).unwrap();
        assert!((r.gmacs_per_s - 28.1).abs() / 28.1 < 0.1, "{r:?}");
        assert!((r.params_m - 13.0).abs() / 13.0 < 0.03, "{r:?}");
    }

    #[test]
    fn raising_a_frame_never_lowers_cost() {
        let cfg = SeparatorConfig::tiny();
        let n = 400;
        let t = cfg.frames(n).unwrap();
        let mut u = vec![0.125; t];
        let base = count_macs(&cfg, &u, n, true, MacConvention::Sliced).unwrap().total_macs;
        u[7] = 1.0;
        let up = count_macs(&cfg, &u, n, true, MacConvention::Sliced).unwrap().total_macs;
        assert!(up > base);
    }
}
