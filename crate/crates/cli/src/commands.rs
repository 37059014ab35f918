use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clat_core::attribution::{attribute, records_to_dump, write_jsonl, Method, MethodOptions};
use clat_core::anomaly::{mine_failure_modes, write_cases_csv, write_flags_jsonl, MiningConfig};
use clat_core::dump::TensorDump;
use clat_core::evalsuite::{
    auc_with_sem, benchmark_failure_modes, run_perturbation_curve, write_benchmark_csv, write_curves_csv,
    write_deltas_csv, CurveConfig, CurveMode, FailureCaseSpec, DEFAULT_SUBSETS,
};
use clat_core::head::HeadParams;
use clat_core::probe::{
    estimate_direction, robustness_sweep, train_linear_probe, train_linear_probe_augmented, write_sweep_csv,
    LinearProbe, ProbeConfig, SweepInput, DEFAULT_ALPHA,
};
use clat_core::sae::{train_sae, SaeModel, SaeTrainConfig};
use clat_core::semantics::{
    activation_clarity_correlation, concept_diversity, profile_components, write_profiles_csv, ActivationStatistic,
    ClarityGroup, ProfileConfig,
};
use clat_core::store::{dataset_from, head_from, text_bank_from, EmbeddingDataset, Manifest, TextBank, VariantTag};
use clat_core::Error;
use log::info;
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 50;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::Json(_)
                | Error::InvalidConfig(_)
                | Error::InvalidManifest(_)
                | Error::UnknownMethod(_)
                | Error::MissingTensor(_)
                | Error::MissingBankVariant(_)
                | Error::MissingBaseline
                | Error::DimMismatch(_) => 1,
                _ => 2,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn parse_method(s: &str) -> Result<Method> {
    Ok(s.parse::<Method>()?)
}

fn parse_variant(s: &str) -> Result<VariantTag> {
    [VariantTag::ShortName, VariantTag::Templated, VariantTag::ExtendedDescription]
        .into_iter()
        .find(|v| v.as_str() == s.replace('-', "_"))
        .ok_or_else(|| CliError::Usage(format!("unknown bank variant `{s}`")))
}

/// Sidecar manifest of a dump: same stem, `.json` extension.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

struct Loaded {
    dump: TensorDump,
    manifest: Manifest,
}

impl Loaded {
    fn from_paths(dump: &Path, manifest: &Path) -> Result<Self> {
        let dump = TensorDump::read(dump)?;
        let manifest = Manifest::read(manifest)?;
        manifest.validate_against(&dump)?;
        Ok(Self { dump, manifest })
    }

    fn from_config(cfg: &RunConfig) -> Result<Self> {
        let dump = need(&cfg.dump, "dump")?;
        let manifest = cfg.manifest.clone().unwrap_or_else(|| sidecar(&dump));
        Self::from_paths(&dump, &manifest)
    }

    fn dataset(&self) -> Result<EmbeddingDataset> {
        Ok(dataset_from(&self.dump, &self.manifest)?)
    }

    fn head(&self) -> Result<HeadParams> {
        Ok(head_from(&self.dump, &self.manifest)?)
    }

    fn banks(&self) -> Result<Vec<TextBank>> {
        self.manifest
            .text_banks
            .iter()
            .map(|e| Ok(text_bank_from(&self.dump, e)?))
            .collect()
    }

    fn bank(&self, name: Option<&str>) -> Result<TextBank> {
        let entry = match name {
            Some(n) => self
                .manifest
                .text_banks
                .iter()
                .find(|e| e.name == n)
                .ok_or_else(|| CliError::Usage(format!("no text bank named `{n}`")))?,
            None => self.manifest.text_banks.first().ok_or(Error::EmptyBank)?,
        };
        Ok(text_bank_from(&self.dump, entry)?)
    }
}

fn load_sae(cfg: &RunConfig) -> Result<SaeModel> {
    let path = need(&cfg.sae, "sae")?;
    let dump = TensorDump::read(&path)?;
    let manifest = Manifest::read(sidecar(&path))?;
    Ok(SaeModel::from_dump(&dump, &manifest)?)
}

fn projected(data: &EmbeddingDataset, head: &HeadParams) -> Result<Array2<f64>> {
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| head.project(data.cls_embeddings.row(i)).map(|p| p.values))
        .collect::<clat_core::Result<Vec<_>>>()?;
    let d = head.d_post();
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.to_vec()).collect();
    Ok(Array2::from_shape_vec((data.len(), d), flat).expect("rows have d_post entries"))
}

pub fn dispatch(cfg: &RunConfig) -> Result<()> {
    let out = need(&cfg.out, "out")?;
    fs::create_dir_all(&out)?;
    cfg.write(&out.join("run-config.json"))?;
    info!("resolved config: {}", serde_json::to_string(cfg).unwrap_or_default());
    match cfg.command.as_deref() {
        Some("train-sae") => train(cfg, &out),
        Some("attribute") => attribute_cmd(cfg, &out),
        Some("label") => label(cfg, &out),
        Some("mine") => mine(cfg, &out),
        Some("faithfulness") => faithfulness(cfg, &out),
        Some("benchmark") => benchmark(cfg, &out),
        Some("probe") => probe(cfg, &out),
        Some("sweep") => sweep(cfg, &out),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = Loaded::from_config(cfg)?.dataset()?;
    let k = need(&cfg.k, "k")?;
    let d_sae = need(&cfg.d_sae, "dsae")?;
    let batch = cfg.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
    let seed = cfg.seed.unwrap_or(0);
    let mut tc = match cfg.preset.as_deref().unwrap_or("imagenet") {
        "imagenet" => SaeTrainConfig::imagenet(d_sae, k, batch, seed),
        "medical" => SaeTrainConfig::medical(d_sae, k, batch, seed),
        other => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
    };
    if let Some(v) = cfg.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = cfg.epochs {
        tc.epochs = v;
    }
    if let Some(v) = &cfg.decay_epochs {
        tc.decay_epochs = v.clone();
    }
    if let Some(v) = cfg.decay_factor {
        tc.decay_factor = v;
    }
    if let Some(v) = cfg.subsample_fraction {
        tc.epoch_subsample_fraction = v;
    }
    if let Some(v) = cfg.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = cfg.include_spatial {
        tc.include_spatial_tokens = v;
    }
    tc.validate()?;
    let outcome = train_sae(&data, &tc)?;
    let (dump, manifest) = outcome.model.to_dump()?;
    dump.write(out.join("sae.clad"))?;
    manifest.write(out.join("sae.json"))?;
    let mut log = create(&out.join("train-log.csv"))?;
    writeln!(log, "epoch,learning_rate,mean_loss,samples")?;
    for e in &outcome.history {
        writeln!(log, "{},{:e},{:.9e},{}", e.epoch, e.learning_rate, e.mean_loss, e.samples)?;
    }
    log.flush()?;
    Ok(())
}

fn attribute_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs = Loaded::from_config(cfg)?;
    let data = inputs.dataset()?;
    let head = inputs.head()?;
    let bank = inputs.bank(cfg.bank.as_deref())?;
    let model = load_sae(cfg)?;
    let method = parse_method(cfg.method.as_deref().unwrap_or("act_x_grad_exact"))?;
    let opts = MethodOptions {
        ig_steps: cfg.ig_steps.unwrap_or(clat_core::attribution::DEFAULT_IG_STEPS),
        seed: cfg.seed.unwrap_or(0),
    };
    let samples: Vec<usize> = cfg.samples.clone().unwrap_or_else(|| (0..data.len()).collect());
    let records = samples
        .par_iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::IndexOutOfRange { index: i, width: data.len() });
            }
            let p = cfg.prompt_index.unwrap_or(data.labels[i] as usize);
            if p >= bank.len() {
                return Err(Error::IndexOutOfRange { index: p, width: bank.len() });
            }
            let dec = model.decompose(data.cls_embeddings.row(i))?;
            let o = MethodOptions { seed: opts.seed.wrapping_add(i as u64), ..opts };
            Ok(attribute(&model, &head, &dec, bank.embeddings.row(p), method, o)?
                .with_ids(data.sample_ids[i].clone(), p))
        })
        .collect::<clat_core::Result<Vec<_>>>()?;
    let mut w = create(&out.join("attributions.jsonl"))?;
    write_jsonl(&records, &mut w)?;
    w.flush()?;
    records_to_dump(&records)?.write(out.join("attributions.clad"))?;
    Ok(())
}

fn scoring_embeddings(data: &EmbeddingDataset, head: &HeadParams) -> Result<Array2<f64>> {
    match &data.scoring_embeddings {
        Some(s) => Ok(s.clone()),
        None => {
            info!("no scoring embeddings in the dump; labeling with projected embeddings");
            projected(data, head)
        }
    }
}

#[derive(Serialize)]
struct LabelSummary {
    profiled_components: usize,
    concept_diversity: usize,
    high_clarity: usize,
    medium_clarity: usize,
    low_clarity: usize,
    /// Pearson r between log top-5 mean activation and clarity.
    activation_clarity_correlation: Option<f64>,
}

fn label(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs = Loaded::from_config(cfg)?;
    let data = inputs.dataset()?;
    let head = inputs.head()?;
    let bank = inputs.bank(cfg.bank.as_deref())?;
    let model = load_sae(cfg)?;
    let acts = (0..data.len())
        .into_par_iter()
        .map(|i| model.encode(data.cls_embeddings.row(i)))
        .collect::<clat_core::Result<Vec<_>>>()?;
    let scoring = scoring_embeddings(&data, &head)?;
    let defaults = ProfileConfig::default();
    let pc = ProfileConfig { q: cfg.q.unwrap_or(defaults.q), min_firing: cfg.min_firing.unwrap_or(defaults.min_firing) };
    let profiles = profile_components(&acts, scoring.view(), &data.sample_ids, &bank, pc)?;
    let group = |g: ClarityGroup| profiles.iter().filter(|p| p.clarity.map(ClarityGroup::of) == Some(g)).count();
    let summary = LabelSummary {
        profiled_components: profiles.len(),
        concept_diversity: concept_diversity(&profiles),
        high_clarity: group(ClarityGroup::High),
        medium_clarity: group(ClarityGroup::Medium),
        low_clarity: group(ClarityGroup::Low),
        activation_clarity_correlation: activation_clarity_correlation(&profiles, ActivationStatistic::Top5Mean, true).ok(),
    };
    write_json(&out.join("profiles.json"), &profiles)?;
    let mut w = create(&out.join("profiles.csv"))?;
    write_profiles_csv(&profiles, &mut w)?;
    w.flush()?;
    write_json(&out.join("label-summary.json"), &summary)?;
    Ok(())
}

fn mine(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs = Loaded::from_config(cfg)?;
    let data = inputs.dataset()?;
    let head = inputs.head()?;
    let bank = inputs.bank(cfg.bank.as_deref())?;
    let model = load_sae(cfg)?;
    let d = MiningConfig::default();
    let mc = MiningConfig {
        confidence_slack: cfg.confidence_slack.unwrap_or(d.confidence_slack),
        z_threshold: cfg.z_threshold.unwrap_or(d.z_threshold),
        min_firing: cfg.min_firing.unwrap_or(d.min_firing),
        reference_stride: cfg.stride.unwrap_or(d.reference_stride),
        classes: cfg.classes.clone(),
        method: match &cfg.method {
            Some(m) => parse_method(m)?,
            None => d.method,
        },
    };
    let report = mine_failure_modes(&data, &model, &head, &bank, &mc)?;
    let mut w = create(&out.join("flags.jsonl"))?;
    write_flags_jsonl(&report.flags, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join("failure-cases.csv"))?;
    write_cases_csv(&report.cases, &mut w)?;
    w.flush()?;
    write_json(&out.join("mining.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct AucRow {
    method: Method,
    mode: CurveMode,
    auc: f64,
    sem: f64,
    subset_aucs: Vec<f64>,
    n_samples: usize,
    dropped: usize,
}

fn faithfulness(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs = Loaded::from_config(cfg)?;
    let data = inputs.dataset()?;
    let head = inputs.head()?;
    let bank = inputs.bank(cfg.bank.as_deref())?;
    let model = load_sae(cfg)?;
    let methods: Vec<Method> = match &cfg.methods {
        Some(m) => m.iter().map(|s| parse_method(s)).collect::<Result<_>>()?,
        None => vec![
            Method::ActXGradExact,
            Method::ActXLogitLens,
            Method::LogitLens,
            Method::Energy,
            Method::IntegratedGradients,
            Method::Random,
        ],
    };
    let modes: Vec<CurveMode> = match &cfg.modes {
        Some(m) => m.iter().map(|s| s.parse::<CurveMode>()).collect::<clat_core::Result<_>>()?,
        None => vec![CurveMode::DeletionLocal, CurveMode::InsertionLocal],
    };
    let per_class = cfg.samples_per_class.unwrap_or(DEFAULT_SAMPLES_PER_CLASS);
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    let samples: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let c = taken.entry(data.labels[i]).or_insert(0);
            *c += 1;
            *c <= per_class
        })
        .collect();
    let seed = cfg.seed.unwrap_or(0);
    let mut curves = Vec::new();
    let mut aucs = Vec::new();
    for &mode in &modes {
        for &method in &methods {
            let mut cc = CurveConfig::new(method, mode);
            cc.seed = seed;
            if let Some(v) = cfg.max_steps {
                cc.max_steps = v;
            }
            if let Some(v) = cfg.ref_pool {
                cc.ref_pool = v;
            }
            if let Some(v) = cfg.ig_steps {
                cc.ig_steps = v;
            }
            let set = run_perturbation_curve(&data, &model, &head, bank.embeddings.view(), &samples, &cc)?;
            let report = auc_with_sem(&set.curves, cfg.subsets.unwrap_or(DEFAULT_SUBSETS), seed)?;
            let mean = set.mean_curve();
            aucs.push(AucRow {
                method,
                mode,
                auc: report.auc,
                sem: report.sem,
                subset_aucs: report.subset_aucs,
                n_samples: mean.n_samples,
                dropped: mean.dropped,
            });
            curves.push(mean);
        }
    }
    let mut w = create(&out.join("curves.csv"))?;
    write_curves_csv(&curves, &mut w)?;
    w.flush()?;
    write_json(&out.join("auc.json"), &aucs)?;
    Ok(())
}

fn load_probe(path: &Path) -> Result<LinearProbe> {
    let dump = TensorDump::read(path)?;
    let manifest = Manifest::read(sidecar(path))?;
    Ok(LinearProbe::from_dump(&dump, &manifest)?)
}

fn benchmark(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs = Loaded::from_config(cfg)?;
    let data = inputs.dataset()?;
    let head = inputs.head()?;
    let banks = inputs.banks()?;
    let cases_path = need(&cfg.cases, "cases")?;
    let text = fs::read_to_string(&cases_path)?;
    let cases: Vec<FailureCaseSpec> = serde_json::from_str(&text).map_err(Error::from)?;
    let variants: Vec<VariantTag> = match &cfg.variants {
        Some(v) => v.iter().map(|s| parse_variant(s)).collect::<Result<_>>()?,
        None => vec![VariantTag::ShortName],
    };
    let probes: Option<BTreeMap<u32, LinearProbe>> = match &cfg.probes {
        Some(paths) => Some(
            paths
                .iter()
                .map(|p| load_probe(p).map(|pr| (pr.classes.1, pr)))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let report = benchmark_failure_modes(&cases, &data, &head, &banks, &variants, probes.as_ref())?;
    write_json(&out.join("benchmark.json"), &report)?;
    let mut w = create(&out.join("benchmark.csv"))?;
    write_benchmark_csv(&report, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join("deltas.csv"))?;
    write_deltas_csv(&report, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Rows and binary labels for a probe between `positive` and `negative`
/// (or every other class).
fn probe_split(data: &EmbeddingDataset, positive: u32, negative: Option<u32>) -> (Vec<usize>, Vec<bool>) {
    (0..data.len())
        .filter(|&i| negative.is_none_or(|n| data.labels[i] == n || data.labels[i] == positive))
        .map(|i| (i, data.labels[i] == positive))
        .unzip()
}

#[derive(Serialize)]
struct ProbeSummary {
    train_accuracy: f64,
    epochs_run: usize,
    converged: bool,
    augmented: bool,
    direction: Option<clat_core::probe::LatentDirection>,
}

fn probe(cfg: &RunConfig, out: &Path) -> Result<()> {
    let inputs = Loaded::from_config(cfg)?;
    let data = inputs.dataset()?;
    let head = inputs.head()?;
    let positive = need(&cfg.positive_class, "positive-class")?;
    let (rows, labels) = probe_split(&data, positive, cfg.negative_class);
    let emb_all = projected(&data, &head)?;
    let emb = emb_all.select(ndarray::Axis(0), &rows);
    let d = ProbeConfig::default();
    let pc = ProbeConfig {
        learning_rate: cfg.probe_learning_rate.unwrap_or(d.learning_rate),
        epochs: cfg.probe_epochs.unwrap_or(d.epochs),
        l2: cfg.l2.unwrap_or(d.l2),
        seed: cfg.seed.unwrap_or(d.seed),
    };
    let (trained, direction) = match cfg.component {
        Some(component) => {
            let model = load_sae(cfg)?;
            let acts = rows
                .par_iter()
                .map(|&i| model.encode(data.cls_embeddings.row(i)))
                .collect::<clat_core::Result<Vec<_>>>()?;
            let filter: Option<Vec<bool>> = cfg.filter_class.map(|c| rows.iter().map(|&i| data.labels[i] == c).collect());
            let dir = estimate_direction(
                emb.view(),
                &acts,
                component,
                cfg.low_threshold.unwrap_or(1.0),
                cfg.high_threshold.unwrap_or(2.5),
                filter.as_deref(),
            )?;
            let alpha = cfg.alpha.unwrap_or(DEFAULT_ALPHA);
            (train_linear_probe_augmented(emb.view(), &labels, &pc, &dir, alpha)?, Some(dir))
        }
        None => (train_linear_probe(emb.view(), &labels, &pc)?, None),
    };
    let trained = trained.with_classes(cfg.negative_class.unwrap_or(u32::MAX), positive);
    let (dump, manifest) = trained.to_dump()?;
    dump.write(out.join("probe.clad"))?;
    manifest.write(out.join("probe.json"))?;
    write_json(
        &out.join("probe-summary.json"),
        &ProbeSummary {
            train_accuracy: trained.accuracy(emb.view(), &labels)?,
            epochs_run: trained.epochs_run,
            converged: trained.converged,
            augmented: direction.is_some(),
            direction,
        },
    )?;
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let probe_path = need(&cfg.probe, "probe")?;
    let probe = load_probe(&probe_path)?;
    let specs = need(&cfg.inputs, "input")?;
    let (negative, positive) = probe.classes;
    let negative = (negative != u32::MAX).then_some(negative);
    let inputs = specs
        .iter()
        .map(|s| {
            let (delta, path) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected delta=path, got `{s}`")))?;
            let delta: f64 = delta.parse().map_err(|_| CliError::Usage(format!("bad delta `{delta}`")))?;
            let path = PathBuf::from(path);
            let loaded = Loaded::from_paths(&path, &sidecar(&path))?;
            let data = loaded.dataset()?;
            let head = loaded.head()?;
            let (rows, labels) = probe_split(&data, positive, negative);
            let embeddings = projected(&data, &head)?.select(ndarray::Axis(0), &rows);
            Ok(SweepInput { delta, embeddings, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = robustness_sweep(&probe, &inputs)?;
    let mut w = create(&out.join("sweep.csv"))?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(())
}
