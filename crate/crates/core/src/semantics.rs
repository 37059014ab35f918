//! What components encode: top-activating samples, text labels scored
//! against an empty-prompt reference, clarity of the top samples, and
//! summary statistics over many components.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_mean, cosine, norm, pearson};
use crate::sae::ActivationVector;
use crate::store::TextBank;

/// Default number of top-activating samples per component.
pub const DEFAULT_TOP_Q: usize = 20;
/// Components with fewer nonzero activations are not profiled by default.
pub const DEFAULT_MIN_FIRING: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TopActivating {
    /// `(sample index, activation)`, descending activation, ties by sample order.
    pub samples: Vec<(usize, f64)>,
    /// Fewer than `q` samples were available.
    pub truncated: bool,
}

/// Per-component list of `(sample, activation)` in sample order.
pub fn firing_table(activations: &[ActivationVector], d_sae: usize) -> Vec<Vec<(usize, f64)>> {
    let mut table = vec![Vec::new(); d_sae];
    for (i, a) in activations.iter().enumerate() {
        for (j, v) in a.iter() {
            if j < d_sae {
                table[j].push((i, v));
            }
        }
    }
    table
}

fn top_from_firings(firings: &[(usize, f64)], j: usize, q: usize) -> Result<TopActivating> {
    if q == 0 {
        return Err(Error::InvalidConfig("q must be >= 1".into()));
    }
    if firings.is_empty() {
        return Err(Error::NoActivations(j));
    }
    let mut sorted = firings.to_vec();
    // stable: equal activations keep sample order
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    let truncated = sorted.len() < q;
    sorted.truncate(q);
    Ok(TopActivating { samples: sorted, truncated })
}

pub fn top_activating(activations: &[ActivationVector], j: usize, q: usize) -> Result<TopActivating> {
    let firings: Vec<(usize, f64)> = activations
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let v = a.get(j);
            (v > 0.0).then_some((i, v))
        })
        .collect();
    top_from_firings(&firings, j, q)
}

/// `s(t) = cos(m, t) - cos(m, t_empty)` for every prompt of the bank.
pub fn alignment_scores(mean_embedding: ArrayView1<'_, f64>, bank: &TextBank) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if mean_embedding.len() != bank.d_post() {
        return Err(Error::DimMismatch(format!(
            "mean embedding has length {}, bank {}",
            mean_embedding.len(),
            bank.d_post()
        )));
    }
    let empty = cosine(mean_embedding, bank.empty_prompt_embedding.view())?;
    bank.embeddings
        .rows()
        .into_iter()
        .map(|t| Ok(cosine(mean_embedding, t)? - empty))
        .collect()
}

/// Best prompt for a component and its alignment; ties go to the lower index.
pub fn label_component(mean_embedding: ArrayView1<'_, f64>, bank: &TextBank) -> Result<(usize, f64)> {
    let scores = alignment_scores(mean_embedding, bank)?;
    let mut best = (0, scores[0]);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

/// Mean pairwise cosine similarity over all row pairs.
pub fn clarity(embeddings: ArrayView2<'_, f64>) -> Result<f64> {
    let q = embeddings.nrows();
    if q < 2 {
        return Err(Error::TooFewSamples { need: 2, got: q });
    }
    let units: Vec<Array1<f64>> = embeddings
        .rows()
        .into_iter()
        .map(|r| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm)
            } else {
                Ok(&r / n)
            }
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for i in 0..q {
        for j in i + 1..q {
            total += units[i].dot(&units[j]);
        }
    }
    let pairs = (q * (q - 1) / 2) as f64;
    Ok((total / pairs).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClarityGroup {
    High,
    Medium,
    Low,
}

impl ClarityGroup {
    /// `c >= 0.6` high, `0.4 <= c < 0.6` medium, below low.
    pub fn of(c: f64) -> Self {
        if c >= 0.6 {
            ClarityGroup::High
        } else if c >= 0.4 {
            ClarityGroup::Medium
        } else {
            ClarityGroup::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentProfile {
    pub component_id: usize,
    pub top_samples: Vec<(String, f64)>,
    pub mean_embedding: Vec<f64>,
    pub label_index: usize,
    pub label: String,
    pub alignment: f64,
    /// Undefined when fewer than two top samples exist.
    pub clarity: Option<f64>,
    /// Mean activation over the top samples.
    pub top_activation_mean: f64,
    pub top5_mean: f64,
    /// Mean over all nonzero activations.
    pub mean_activation: f64,
    pub firing_count: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub q: usize,
    pub min_firing: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { q: DEFAULT_TOP_Q, min_firing: DEFAULT_MIN_FIRING }
    }
}

/// Profiles every component with at least `cfg.min_firing` nonzero
/// activations (and at least one). `scoring` holds one scoring-space
/// embedding per sample, aligned with `activations`.
pub fn profile_components(
    activations: &[ActivationVector],
    scoring: ArrayView2<'_, f64>,
    sample_ids: &[String],
    bank: &TextBank,
    cfg: ProfileConfig,
) -> Result<Vec<ComponentProfile>> {
    if activations.len() != scoring.nrows() || activations.len() != sample_ids.len() {
        return Err(Error::DimMismatch(format!(
            "{} activation rows, {} scoring rows, {} ids",
            activations.len(),
            scoring.nrows(),
            sample_ids.len()
        )));
    }
    if scoring.ncols() != bank.d_post() {
        return Err(Error::DimMismatch(format!(
            "scoring space has dimension {}, bank {}",
            scoring.ncols(),
            bank.d_post()
        )));
    }
    let d_sae = activations.first().map(|a| a.d_sae).ok_or(Error::EmptyDataset)?;
    let table = firing_table(activations, d_sae);
    let min_firing = cfg.min_firing.max(1);
    table
        .par_iter()
        .enumerate()
        .filter(|(_, f)| f.len() >= min_firing)
        .map(|(j, firings)| {
            let top = top_from_firings(firings, j, cfg.q)?;
            let rows: Vec<usize> = top.samples.iter().map(|&(i, _)| i).collect();
            let mean_embedding = column_mean(scoring, &rows);
            let (label_index, alignment) = label_component(mean_embedding.view(), bank)?;
            let clarity = if rows.len() >= 2 {
                Some(clarity(scoring.select(ndarray::Axis(0), &rows).view())?)
            } else {
                None
            };
            let top_vals: Vec<f64> = top.samples.iter().map(|&(_, v)| v).collect();
            let top5 = &top_vals[..top_vals.len().min(5)];
            Ok(ComponentProfile {
                component_id: j,
                top_samples: top.samples.iter().map(|&(i, v)| (sample_ids[i].clone(), v)).collect(),
                mean_embedding: mean_embedding.to_vec(),
                label_index,
                label: bank.prompts[label_index].clone(),
                alignment,
                clarity,
                top_activation_mean: top_vals.iter().sum::<f64>() / top_vals.len() as f64,
                top5_mean: top5.iter().sum::<f64>() / top5.len() as f64,
                mean_activation: firings.iter().map(|&(_, v)| v).sum::<f64>() / firings.len() as f64,
                firing_count: firings.len(),
                truncated: top.truncated,
            })
        })
        .collect()
}

/// Number of distinct labels across profiles.
pub fn concept_diversity(profiles: &[ComponentProfile]) -> usize {
    profiles.iter().map(|p| p.label_index).collect::<BTreeSet<_>>().len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationStatistic {
    Top5Mean,
    TopMean,
    Mean,
    FiringCount,
}

impl ActivationStatistic {
    pub fn value(self, p: &ComponentProfile) -> f64 {
        match self {
            ActivationStatistic::Top5Mean => p.top5_mean,
            ActivationStatistic::TopMean => p.top_activation_mean,
            ActivationStatistic::Mean => p.mean_activation,
            ActivationStatistic::FiringCount => p.firing_count as f64,
        }
    }
}

/// Pearson correlation between an activation statistic (optionally
/// log-scaled) and clarity, over profiles with defined clarity.
pub fn activation_clarity_correlation(
    profiles: &[ComponentProfile],
    statistic: ActivationStatistic,
    log_scale: bool,
) -> Result<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = profiles
        .iter()
        .filter_map(|p| {
            let c = p.clarity?;
            let v = statistic.value(p);
            Some((if log_scale { v.ln() } else { v }, c))
        })
        .unzip();
    if xs.len() < 3 {
        return Err(Error::TooFewSamples { need: 3, got: xs.len() });
    }
    pearson(&xs, &ys)
}

pub fn write_profiles_csv<W: Write>(profiles: &[ComponentProfile], mut out: W) -> Result<()> {
    writeln!(out, "component_id,label,alignment,clarity,top_activation_mean,firing_count")?;
    for p in profiles {
        let clarity = p.clarity.map(|c| format!("{c:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.6},{},{:.6},{}",
            p.component_id,
            csv_field(&p.label),
            p.alignment,
            clarity,
            p.top_activation_mean,
            p.firing_count
        )?;
    }
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
