//! Unexpected concept reliance: hidden concepts, per-class z-score
//! outliers, and the failure-mode mining pipeline built on them.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attribution::{attribute, AttributionRecord, Method, MethodOptions};
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::linalg::mean_std;
use crate::sae::SaeModel;
use crate::semantics::ComponentProfile;
use crate::store::{EmbeddingDataset, TextBank};

/// Activation-proxy threshold on the top-sample mean activation.
pub const DEFAULT_TAU_ACT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceStats {
    pub component_id: usize,
    pub class_id: u32,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub n: usize,
    /// Sample skewness `m3 / m2^1.5`; zero when all values are equal.
    pub skewness: f64,
}

impl RelevanceStats {
    fn from_values(component_id: usize, class_id: u32, values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        let n = values.len() as f64;
        let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
        Self { component_id, class_id, mean, std, n: values.len(), skewness }
    }

    /// Stats of a component that never appeared in the reference set.
    pub fn absent(component_id: usize, class_id: u32, n: usize) -> Self {
        Self { component_id, class_id, mean: 0.0, std: 0.0, n, skewness: 0.0 }
    }
}

/// Per-component stats over a class reference set. Every component that
/// appears in at least one record gets an entry; missing scores count as 0.
pub fn fit_relevance_stats(records: &[AttributionRecord], class_id: u32) -> Result<BTreeMap<usize, RelevanceStats>> {
    let n = records.len();
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        for &(j, s) in &r.scores {
            columns.entry(j).or_insert_with(|| vec![0.0; n])[i] = s;
        }
    }
    Ok(columns
        .into_iter()
        .map(|(j, values)| (j, RelevanceStats::from_values(j, class_id, &values)))
        .collect())
}

/// A z-score, with sentinels for the zero-variance case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZScore {
    Finite(f64),
    PosInfinite,
    NegInfinite,
}

impl ZScore {
    pub fn exceeds(self, threshold: f64) -> bool {
        match self {
            ZScore::Finite(z) => z > threshold,
            ZScore::PosInfinite => true,
            ZScore::NegInfinite => false,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            ZScore::Finite(z) => z,
            ZScore::PosInfinite => f64::INFINITY,
            ZScore::NegInfinite => f64::NEG_INFINITY,
        }
    }

    fn label(self) -> String {
        match self {
            ZScore::Finite(z) => format!("{z:.6}"),
            ZScore::PosInfinite => "inf".into(),
            ZScore::NegInfinite => "-inf".into(),
        }
    }
}

impl Serialize for ZScore {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ZScore::Finite(z) => s.serialize_f64(*z),
            ZScore::PosInfinite => s.serialize_str("inf"),
            ZScore::NegInfinite => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ZScore {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(z) => Ok(ZScore::Finite(z)),
            Repr::Text(t) if t == "inf" => Ok(ZScore::PosInfinite),
            Repr::Text(t) if t == "-inf" => Ok(ZScore::NegInfinite),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid z-score `{t}`"))),
        }
    }
}

pub fn z_score(stats: &RelevanceStats, r_test: f64) -> ZScore {
    if stats.std > 0.0 {
        ZScore::Finite((r_test - stats.mean) / stats.std)
    } else if r_test > stats.mean {
        ZScore::PosInfinite
    } else if r_test < stats.mean {
        ZScore::NegInfinite
    } else {
        ZScore::Finite(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    HiddenConcept,
    Overreliance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFlag {
    /// Empty for activation-proxy flags, which are per component.
    pub sample_id: String,
    pub class_id: Option<u32>,
    pub component_id: usize,
    pub z: Option<ZScore>,
    /// Relevance score, or the activation proxy value.
    pub relevance: f64,
    pub kind: FlagKind,
    /// `tau_rel`, `tau_act` or the z threshold, depending on the kind.
    pub threshold: f64,
    pub align_threshold: Option<f64>,
}

pub enum RelevanceSource<'a> {
    /// Relevance scores; `prompt_index` is taken as the class id.
    Records(&'a [AttributionRecord]),
    /// Top-sample mean activation of each profile.
    ActivationProxy,
}

/// Flags components with relevance (or activation proxy) `>= tau_rel` whose
/// profile alignment is `<= tau_align`. Components without a profile are
/// skipped since their alignment is unknown.
pub fn hidden_concepts(
    source: RelevanceSource<'_>,
    profiles: &[ComponentProfile],
    tau_rel: f64,
    tau_align: f64,
) -> Vec<AnomalyFlag> {
    let by_id: BTreeMap<usize, &ComponentProfile> = profiles.iter().map(|p| (p.component_id, p)).collect();
    let flag = |sample_id: String, class_id, component_id, relevance| AnomalyFlag {
        sample_id,
        class_id,
        component_id,
        z: None,
        relevance,
        kind: FlagKind::HiddenConcept,
        threshold: tau_rel,
        align_threshold: Some(tau_align),
    };
    match source {
        RelevanceSource::Records(records) => records
            .iter()
            .flat_map(|r| {
                r.scores.iter().filter_map(|&(j, s)| {
                    let p = by_id.get(&j)?;
                    (s >= tau_rel && p.alignment <= tau_align)
                        .then(|| flag(r.sample_id.clone(), Some(r.prompt_index as u32), j, s))
                })
            })
            .collect(),
        RelevanceSource::ActivationProxy => profiles
            .iter()
            .filter(|p| p.top_activation_mean >= tau_rel && p.alignment <= tau_align)
            .map(|p| flag(String::new(), None, p.component_id, p.top_activation_mean))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub confidence_slack: f64,
    pub z_threshold: f64,
    pub min_firing: usize,
    /// Keep every `reference_stride`-th sample of the dataset.
    pub reference_stride: usize,
    /// Classes to mine; all labeled classes when absent.
    pub classes: Option<Vec<u32>>,
    pub method: Method,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            confidence_slack: 1.5,
            z_threshold: 3.0,
            min_firing: 10,
            reference_stride: 5,
            classes: None,
            method: Method::ActXGradExact,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reference_stride == 0 {
            return Err(Error::InvalidConfig("reference_stride must be >= 1".into()));
        }
        if !self.confidence_slack.is_finite() || !self.z_threshold.is_finite() {
            return Err(Error::InvalidConfig("thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub class_id: u32,
    pub component_id: usize,
    /// Distractors on which the component fires with z above threshold.
    pub flagged_samples: Vec<String>,
    pub firing_count: usize,
    pub max_z: ZScore,
    pub mean_relevance: f64,
    pub reference: RelevanceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: u32,
    pub n_reference: usize,
    pub n_candidates: usize,
    pub n_distractors: usize,
    pub output_mean: f64,
    pub output_std: f64,
    pub confidence_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MiningReport {
    pub flags: Vec<AnomalyFlag>,
    pub cases: Vec<FailureCase>,
    pub classes: Vec<ClassSummary>,
}

impl MiningReport {
    fn merge(mut self, other: MiningReport) -> Self {
        self.flags.extend(other.flags);
        self.cases.extend(other.cases);
        self.classes.extend(other.classes);
        self
    }

    pub fn flagged_components(&self, class_id: u32) -> Vec<usize> {
        self.cases.iter().filter(|c| c.class_id == class_id).map(|c| c.component_id).collect()
    }
}

/// Failure-mode mining. For each class: fit relevance stats on the class
/// samples, keep non-class samples whose class output exceeds
/// `mean - slack * std` of the class outputs, attribute them, and flag
/// components that are outliers (`z > z_threshold`) on at least
/// `min_firing` of those distractors where they are active.
pub fn mine_failure_modes(
    data: &EmbeddingDataset,
    model: &SaeModel,
    head: &HeadParams,
    bank: &TextBank,
    cfg: &MiningConfig,
) -> Result<MiningReport> {
    cfg.validate()?;
    data.validate()?;
    let working: Vec<usize> = (0..data.len()).step_by(cfg.reference_stride).collect();
    let classes: Vec<u32> = match &cfg.classes {
        Some(c) => c.clone(),
        None => {
            let mut c = data.labels.clone();
            c.sort_unstable();
            c.dedup();
            c
        }
    };
    for &c in &classes {
        if c as usize >= bank.len() {
            return Err(Error::DimMismatch(format!("no prompt for class {c} in a bank of {}", bank.len())));
        }
    }
    let decomps = working
        .par_iter()
        .map(|&i| model.decompose(data.cls_embeddings.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let opts = MethodOptions::default();
    let reports = classes
        .par_iter()
        .map(|&class_id| {
            let t = bank.embeddings.row(class_id as usize);
            let attribute_at = |pos: usize| -> Result<AttributionRecord> {
                let i = working[pos];
                Ok(attribute(model, head, &decomps[pos], t, cfg.method, opts)?
                    .with_ids(data.sample_ids[i].clone(), class_id as usize))
            };
            let (class_pos, other_pos): (Vec<usize>, Vec<usize>) =
                (0..working.len()).partition(|&p| data.labels[working[p]] == class_id);
            if class_pos.is_empty() {
                return Err(Error::EmptyClass(class_id));
            }
            let reference = class_pos.par_iter().map(|&p| attribute_at(p)).collect::<Result<Vec<_>>>()?;
            let stats = fit_relevance_stats(&reference, class_id)?;
            let outputs: Vec<f64> = reference.iter().map(|r| r.output_y).collect();
            let (output_mean, output_std) = mean_std(&outputs);
            let confidence_threshold = output_mean - cfg.confidence_slack * output_std;
            let candidate_outputs = other_pos
                .par_iter()
                .map(|&p| Ok((p, output_of(head, decomps[p].x.view(), t)?)))
                .collect::<Result<Vec<_>>>()?;
            let distractors: Vec<usize> =
                candidate_outputs.iter().filter(|(_, y)| *y > confidence_threshold).map(|&(p, _)| p).collect();
            let records = distractors.par_iter().map(|&p| attribute_at(p)).collect::<Result<Vec<_>>>()?;

            // component -> [(record, z, relevance)]
            let mut outliers: BTreeMap<usize, Vec<(usize, ZScore, f64)>> = BTreeMap::new();
            for (ri, (&p, r)) in distractors.iter().zip(&records).enumerate() {
                for (j, a) in decomps[p].activations.iter() {
                    if a <= 0.0 {
                        continue;
                    }
                    let s = r.score(j);
                    let st = stats.get(&j).cloned().unwrap_or_else(|| RelevanceStats::absent(j, class_id, reference.len()));
                    let z = z_score(&st, s);
                    if z.exceeds(cfg.z_threshold) {
                        outliers.entry(j).or_default().push((ri, z, s));
                    }
                }
            }
            let mut report = MiningReport::default();
            for (j, hits) in outliers {
                if hits.len() < cfg.min_firing.max(1) {
                    continue;
                }
                let reference_stats =
                    stats.get(&j).cloned().unwrap_or_else(|| RelevanceStats::absent(j, class_id, reference.len()));
                let max_z = hits
                    .iter()
                    .map(|h| h.1)
                    .max_by(|a, b| a.as_f64().total_cmp(&b.as_f64()))
                    .unwrap_or(ZScore::Finite(0.0));
                for &(ri, z, s) in &hits {
                    report.flags.push(AnomalyFlag {
                        sample_id: records[ri].sample_id.clone(),
                        class_id: Some(class_id),
                        component_id: j,
                        z: Some(z),
                        relevance: s,
                        kind: FlagKind::Overreliance,
                        threshold: cfg.z_threshold,
                        align_threshold: None,
                    });
                }
                report.cases.push(FailureCase {
                    class_id,
                    component_id: j,
                    flagged_samples: hits.iter().map(|h| records[h.0].sample_id.clone()).collect(),
                    firing_count: hits.len(),
                    max_z,
                    mean_relevance: hits.iter().map(|h| h.2).sum::<f64>() / hits.len() as f64,
                    reference: reference_stats,
                });
            }
            report.classes.push(ClassSummary {
                class_id,
                n_reference: reference.len(),
                n_candidates: other_pos.len(),
                n_distractors: distractors.len(),
                output_mean,
                output_std,
                confidence_threshold,
            });
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reports.into_iter().fold(MiningReport::default(), MiningReport::merge))
}

fn output_of(head: &HeadParams, x: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Result<f64> {
    head.output(x, t)
}

pub fn write_flags_jsonl<W: Write>(flags: &[AnomalyFlag], mut out: W) -> Result<()> {
    for f in flags {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_cases_csv<W: Write>(cases: &[FailureCase], mut out: W) -> Result<()> {
    writeln!(out, "class_id,component_id,firing_count,max_z,mean_relevance,reference_mean,reference_std")?;
    for c in cases {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            c.class_id,
            c.component_id,
            c.firing_count,
            c.max_z.label(),
            c.mean_relevance,
            c.reference.mean,
            c.reference.std
        )?;
    }
    Ok(())
}
