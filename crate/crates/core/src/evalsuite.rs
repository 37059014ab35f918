//! Faithfulness and separability evaluation: deletion and insertion curves
//! over SAE components, subset AUCs with SEM, rank-based AUROC and the
//! spurious/valid benchmark over prompt variants and probes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionRecord, Method, MethodOptions};
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::linalg::{mean_std, sem};
use crate::probe::LinearProbe;
use crate::sae::{Decomposition, SaeModel};
use crate::semantics::csv_field;
use crate::store::{EmbeddingDataset, TextBank, VariantTag};

pub const DEFAULT_MAX_STEPS: usize = 10;
pub const DEFAULT_REF_POOL: usize = 500;
pub const DEFAULT_SUBSETS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    DeletionLocal,
    DeletionGlobal,
    DeletionRandomRef,
    InsertionLocal,
}

impl CurveMode {
    pub const ALL: [CurveMode; 4] =
        [CurveMode::DeletionLocal, CurveMode::DeletionGlobal, CurveMode::DeletionRandomRef, CurveMode::InsertionLocal];

    pub fn as_str(self) -> &'static str {
        match self {
            CurveMode::DeletionLocal => "deletion_local",
            CurveMode::DeletionGlobal => "deletion_global",
            CurveMode::DeletionRandomRef => "deletion_random_ref",
            CurveMode::InsertionLocal => "insertion_local",
        }
    }
}

impl fmt::Display for CurveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        CurveMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown curve mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub method: Method,
    pub mode: CurveMode,
    pub max_steps: usize,
    /// Size of the random reference pool for `deletion_random_ref`.
    pub ref_pool: usize,
    pub seed: u64,
    pub ig_steps: usize,
}

impl CurveConfig {
    pub fn new(method: Method, mode: CurveMode) -> Self {
        Self {
            method,
            mode,
            max_steps: DEFAULT_MAX_STEPS,
            ref_pool: DEFAULT_REF_POOL,
            seed: 0,
            ig_steps: crate::attribution::DEFAULT_IG_STEPS,
        }
    }
}

/// Per-sample curves before averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub method: Method,
    pub mode: CurveMode,
    pub sample_indices: Vec<usize>,
    /// One curve of `max_steps + 1` outputs per kept sample.
    pub curves: Vec<Vec<f64>>,
    /// Samples dropped after a degenerate input mid-curve.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub mode: CurveMode,
    pub method: Method,
    /// `(step, mean output)`
    pub steps: Vec<(usize, f64)>,
    pub n_samples: usize,
    pub dropped: usize,
}

impl CurveSet {
    pub fn mean_curve(&self) -> PerturbationCurve {
        let len = self.curves.first().map_or(0, Vec::len);
        let n = self.curves.len();
        let steps = (0..len)
            .map(|s| (s, self.curves.iter().map(|c| c[s]).sum::<f64>() / n as f64))
            .collect();
        PerturbationCurve { mode: self.mode, method: self.method, steps, n_samples: n, dropped: self.dropped }
    }
}

fn mean_ranking(records: &[AttributionRecord]) -> Vec<usize> {
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    for r in records {
        for &(j, s) in &r.scores {
            *totals.entry(j).or_insert(0.0) += s;
        }
    }
    let mut v: Vec<(usize, f64)> = totals.into_iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(j, _)| j).collect()
}

/// Output after removing `a_j v_j` for each component of `order` in turn.
fn deletion_values(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ndarray::ArrayView1<'_, f64>,
    order: &[usize],
    max_steps: usize,
) -> Result<Vec<f64>> {
    let mut x = dec.x.clone();
    let mut values = vec![head.output(x.view(), t)?];
    for s in 0..max_steps {
        if let Some(&j) = order.get(s) {
            let a = dec.activations.get(j);
            if a != 0.0 {
                x.scaled_add(-a, &model.atom(j));
            }
        }
        values.push(head.output(x.view(), t)?);
    }
    Ok(values)
}

/// Output with the first `s` components of `order` present and every other
/// active component removed, for `s = 0..=max_steps`.
fn insertion_values(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ndarray::ArrayView1<'_, f64>,
    order: &[usize],
    max_steps: usize,
) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(max_steps + 1);
    for s in 0..=max_steps {
        let inserted = &order[..s.min(order.len())];
        let mut missing = Array1::<f64>::zeros(dec.x.len());
        for (j, a) in dec.activations.iter() {
            if !inserted.contains(&j) {
                missing.scaled_add(a, &model.atom(j));
            }
        }
        let x = &dec.x - &missing;
        values.push(head.output(x.view(), t)?);
    }
    Ok(values)
}

/// Deletion or insertion curves for `samples` of `data`, each explained for
/// the prompt row given by its label.
pub fn run_perturbation_curve(
    data: &EmbeddingDataset,
    model: &SaeModel,
    head: &HeadParams,
    prompts: ArrayView2<'_, f64>,
    samples: &[usize],
    cfg: &CurveConfig,
) -> Result<CurveSet> {
    if cfg.max_steps == 0 {
        return Err(Error::InvalidConfig("max_steps must be >= 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for &i in samples {
        if i >= data.len() {
            return Err(Error::IndexOutOfRange { index: i, width: data.len() });
        }
        let c = data.labels[i] as usize;
        if c >= prompts.nrows() {
            return Err(Error::DimMismatch(format!("no prompt for class {c} among {} rows", prompts.nrows())));
        }
    }
    let opts = MethodOptions { ig_steps: cfg.ig_steps, seed: cfg.seed };
    let explain = |i: usize, dec: &Decomposition| -> Result<AttributionRecord> {
        let t = prompts.row(data.labels[i] as usize);
        let o = MethodOptions { seed: opts.seed.wrapping_add(i as u64), ..opts };
        attribute(model, head, dec, t, cfg.method, o)
    };
    let decomps = samples
        .par_iter()
        .map(|&i| model.decompose(data.cls_embeddings.row(i)))
        .collect::<Result<Vec<_>>>()?;

    let global: BTreeMap<u32, Vec<usize>> = match cfg.mode {
        CurveMode::DeletionLocal | CurveMode::InsertionLocal => BTreeMap::new(),
        CurveMode::DeletionGlobal => {
            let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (pos, &i) in samples.iter().enumerate() {
                by_class.entry(data.labels[i]).or_default().push(pos);
            }
            by_class
                .into_par_iter()
                .map(|(c, positions)| {
                    let recs = positions
                        .iter()
                        .filter_map(|&p| skip_degenerate(explain(samples[p], &decomps[p])).transpose())
                        .collect::<Result<Vec<_>>>()?;
                    Ok((c, mean_ranking(&recs)))
                })
                .collect::<Result<_>>()?
        }
        CurveMode::DeletionRandomRef => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let pool: Vec<usize> = index::sample(&mut rng, data.len(), cfg.ref_pool.min(data.len())).into_vec();
            let pool_decomps = pool
                .par_iter()
                .map(|&i| model.decompose(data.cls_embeddings.row(i)))
                .collect::<Result<Vec<_>>>()?;
            let mut classes: Vec<u32> = samples.iter().map(|&i| data.labels[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            classes
                .into_par_iter()
                .map(|c| {
                    let t = prompts.row(c as usize);
                    let recs = pool
                        .iter()
                        .zip(&pool_decomps)
                        .filter_map(|(&i, dec)| {
                            let o = MethodOptions { seed: opts.seed.wrapping_add(i as u64), ..opts };
                            skip_degenerate(attribute(model, head, dec, t, cfg.method, o)).transpose()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((c, mean_ranking(&recs)))
                })
                .collect::<Result<_>>()?
        }
    };

    let results = samples
        .par_iter()
        .zip(&decomps)
        .map(|(&i, dec)| {
            let t = prompts.row(data.labels[i] as usize);
            let curve = (|| {
                let order = match cfg.mode {
                    CurveMode::DeletionLocal | CurveMode::InsertionLocal => explain(i, dec)?.ranking(),
                    _ => global[&data.labels[i]].clone(),
                };
                match cfg.mode {
                    CurveMode::InsertionLocal => insertion_values(model, head, dec, t, &order, cfg.max_steps),
                    _ => deletion_values(model, head, dec, t, &order, cfg.max_steps),
                }
            })();
            skip_degenerate(curve)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut set = CurveSet { method: cfg.method, mode: cfg.mode, sample_indices: Vec::new(), curves: Vec::new(), dropped: 0 };
    for (&i, r) in samples.iter().zip(results) {
        match r {
            Some(c) => {
                set.sample_indices.push(i);
                set.curves.push(c);
            }
            None => set.dropped += 1,
        }
    }
    if set.curves.is_empty() {
        return Err(Error::DegenerateInput("every sample degenerated along the curve"));
    }
    Ok(set)
}

fn skip_degenerate<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Mean of the curve values, step 0 included.
pub fn curve_auc(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub auc: f64,
    pub sem: f64,
    pub subset_aucs: Vec<f64>,
}

/// Shuffles the curves with `seed`, splits them into `subsets` contiguous
/// blocks, averages the curves within each block and reports the mean and
/// SEM of the block AUCs.
pub fn auc_with_sem(curves: &[Vec<f64>], subsets: usize, seed: u64) -> Result<AucReport> {
    if subsets == 0 {
        return Err(Error::InvalidConfig("subsets must be >= 1".into()));
    }
    if curves.len() < subsets {
        return Err(Error::TooFewSamples { need: subsets, got: curves.len() });
    }
    let len = curves[0].len();
    if len == 0 || curves.iter().any(|c| c.len() != len) {
        return Err(Error::DimMismatch("curves differ in length".into()));
    }
    let mut order: Vec<usize> = (0..curves.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = curves.len();
    let subset_aucs: Vec<f64> = (0..subsets)
        .map(|s| {
            let block = &order[s * n / subsets..(s + 1) * n / subsets];
            let mean: Vec<f64> = (0..len)
                .map(|k| block.iter().map(|&i| curves[i][k]).sum::<f64>() / block.len() as f64)
                .collect();
            curve_auc(&mean)
        })
        .collect();
    let (auc, _) = mean_std(&subset_aucs);
    Ok(AucReport { auc, sem: sem(&subset_aucs), subset_aucs })
}

/// Probability that a positive outscores a negative, ties counting one half,
/// from midranks of the pooled scores.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::EmptySet("positive scores"));
    }
    if neg.is_empty() {
        return Err(Error::EmptySet("negative scores"));
    }
    let mut pooled: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the midrank keeps everything integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let n_pos = pooled[i..=j].iter().filter(|p| p.1).count() as u64;
        twice_rank_sum += twice_mid * n_pos;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as u64, neg.len() as u64);
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Text(VariantTag),
    Probe,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Text(v) => v.as_str(),
            Strategy::Probe => "linear_probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureCaseSpec {
    pub case_id: String,
    pub class_id: u32,
    pub category: String,
    /// Dataset indices of the spurious samples.
    pub spurious: Vec<usize>,
    /// Dataset indices of the class samples; all samples labeled
    /// `class_id` when empty.
    #[serde(default)]
    pub class_samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub case_id: String,
    pub category: String,
    pub class_id: u32,
    pub strategy: Strategy,
    pub spurious_auc: f64,
    pub valid_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: String,
    pub strategy: Strategy,
    pub n: usize,
    pub spurious_mean: f64,
    pub spurious_sem: f64,
    pub valid_mean: f64,
    pub valid_sem: f64,
}

/// Spurious AUC of `to` minus that of `from`, over the cases of a category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDelta {
    pub category: String,
    pub from: Strategy,
    pub to: Strategy,
    pub n: usize,
    pub mean: f64,
    pub sem: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub categories: Vec<CategorySummary>,
    pub deltas: Vec<StrategyDelta>,
}

/// Scores each failure case with every text variant in `variants` (the
/// class prompt of the matching bank) and, when given, the per-class probe.
pub fn benchmark_failure_modes(
    cases: &[FailureCaseSpec],
    data: &EmbeddingDataset,
    head: &HeadParams,
    banks: &[TextBank],
    variants: &[VariantTag],
    probes: Option<&BTreeMap<u32, LinearProbe>>,
) -> Result<BenchmarkReport> {
    let mut strategies: Vec<(Strategy, Option<&TextBank>)> = Vec::new();
    for &v in variants {
        let bank = banks
            .iter()
            .find(|b| b.variant == v)
            .ok_or_else(|| Error::MissingBankVariant(v.as_str().to_string()))?;
        strategies.push((Strategy::Text(v), Some(bank)));
    }
    if probes.is_some() {
        strategies.push((Strategy::Probe, None));
    }
    if strategies.is_empty() {
        return Err(Error::InvalidConfig("no scoring strategy selected".into()));
    }
    let projected = (0..data.len())
        .into_par_iter()
        .map(|i| head.project(data.cls_embeddings.row(i)))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for case in cases {
        let class_samples: Vec<usize> = if case.class_samples.is_empty() {
            data.class_indices(case.class_id)
        } else {
            case.class_samples.clone()
        };
        if class_samples.is_empty() {
            return Err(Error::EmptyClass(case.class_id));
        }
        for &i in class_samples.iter().chain(&case.spurious) {
            if i >= data.len() {
                return Err(Error::IndexOutOfRange { index: i, width: data.len() });
            }
        }
        let others: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != case.class_id).collect();
        for &(strategy, bank) in &strategies {
            let score: Box<dyn Fn(usize) -> Result<f64> + Sync> = match bank {
                Some(b) => {
                    if case.class_id as usize >= b.len() {
                        return Err(Error::DimMismatch(format!(
                            "bank `{}` has no prompt for class {}",
                            b.name, case.class_id
                        )));
                    }
                    let t = b.embeddings.row(case.class_id as usize);
                    let projected = &projected;
                    Box::new(move |i| crate::head::predict(&projected[i], t))
                }
                None => {
                    let probe = probes.and_then(|p| p.get(&case.class_id)).ok_or_else(|| {
                        Error::InvalidConfig(format!("no probe for class {}", case.class_id))
                    })?;
                    let projected = &projected;
                    Box::new(move |i| Ok(probe.decision(projected[i].view())))
                }
            };
            let scores = |idx: &[usize]| idx.iter().map(|&i| score(i)).collect::<Result<Vec<_>>>();
            let pos = scores(&class_samples)?;
            rows.push(BenchmarkRow {
                case_id: case.case_id.clone(),
                category: case.category.clone(),
                class_id: case.class_id,
                strategy,
                spurious_auc: auroc(&pos, &scores(&case.spurious)?)?,
                valid_auc: auroc(&pos, &scores(&others)?)?,
            });
        }
    }

    let order: Vec<Strategy> = strategies.iter().map(|s| s.0).collect();
    let mut categories_seen: Vec<String> = Vec::new();
    for c in cases {
        if !categories_seen.contains(&c.category) {
            categories_seen.push(c.category.clone());
        }
    }
    let mut categories = Vec::new();
    let mut deltas = Vec::new();
    for cat in &categories_seen {
        let of = |s: Strategy| -> Vec<&BenchmarkRow> {
            rows.iter().filter(|r| &r.category == cat && r.strategy == s).collect()
        };
        for &s in &order {
            let rs = of(s);
            let sp: Vec<f64> = rs.iter().map(|r| r.spurious_auc).collect();
            let va: Vec<f64> = rs.iter().map(|r| r.valid_auc).collect();
            categories.push(CategorySummary {
                category: cat.clone(),
                strategy: s,
                n: rs.len(),
                spurious_mean: mean_std(&sp).0,
                spurious_sem: sem(&sp),
                valid_mean: mean_std(&va).0,
                valid_sem: sem(&va),
            });
        }
        for (a, &from) in order.iter().enumerate() {
            for &to in &order[a + 1..] {
                let d: Vec<f64> =
                    of(from).iter().zip(of(to)).map(|(f, t)| t.spurious_auc - f.spurious_auc).collect();
                deltas.push(StrategyDelta {
                    category: cat.clone(),
                    from,
                    to,
                    n: d.len(),
                    mean: mean_std(&d).0,
                    sem: sem(&d),
                });
            }
        }
    }
    Ok(BenchmarkReport { rows, categories, deltas })
}

pub fn write_curves_csv<W: Write>(curves: &[PerturbationCurve], mut out: W) -> Result<()> {
    writeln!(out, "method,mode,step,mean_y,n_samples,dropped")?;
    for c in curves {
        for &(s, y) in &c.steps {
            writeln!(out, "{},{},{},{:.9},{},{}", c.method, c.mode, s, y, c.n_samples, c.dropped)?;
        }
    }
    Ok(())
}

pub fn write_benchmark_csv<W: Write>(report: &BenchmarkReport, mut out: W) -> Result<()> {
    writeln!(out, "case_id,category,class_id,strategy,spurious_auc,valid_auc")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            csv_field(&r.case_id),
            csv_field(&r.category),
            r.class_id,
            r.strategy.name(),
            r.spurious_auc,
            r.valid_auc
        )?;
    }
    Ok(())
}

/// Table of pairwise spurious-AUC deltas, `mean ± sem` per category.
pub fn write_deltas_csv<W: Write>(report: &BenchmarkReport, mut out: W) -> Result<()> {
    writeln!(out, "category,from,to,n,mean,sem")?;
    for d in &report.deltas {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6}",
            csv_field(&d.category),
            d.from.name(),
            d.to.name(),
            d.n,
            d.mean,
            d.sem
        )?;
    }
    Ok(())
}
