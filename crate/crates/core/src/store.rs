//! JSON manifest binding dump entries to roles, and validated loaders for
//! datasets, heads and text banks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dump::TensorDump;
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::linalg::norm;

/// Marker accepted in `roles.beta` to synthesize a zero LayerNorm shift.
pub const ZEROS: &str = "zeros";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_embeddings: Option<String>,
    /// Embeddings of the same samples in the scoring model's space, used for
    /// component labeling and clarity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring_embeddings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_proj: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    ShortName,
    Templated,
    ExtendedDescription,
}

impl VariantTag {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::ShortName => "short_name",
            VariantTag::Templated => "templated",
            VariantTag::ExtendedDescription => "extended_description",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextBankEntry {
    pub name: String,
    pub variant: VariantTag,
    pub prompts: Vec<String>,
    /// Tensor name of the `|prompts| x d_post` embedding matrix.
    pub embeddings: String,
    /// Tensor name of the empty-prompt embedding.
    pub empty_prompt: String,
    /// The literal string embedded as the empty prompt.
    pub empty_prompt_string: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub templates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeMeta {
    pub k: usize,
    pub d_sae: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeMeta {
    pub negative_class: u32,
    pub positive_class: u32,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_names: BTreeMap<u32, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<u32>,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub text_banks: Vec<TextBankEntry>,
    /// Free-form record of how the exporter folded a variance-style
    /// LayerNorm into the `||x - mean||` form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layernorm_conversion: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sae: Option<SaeMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeMeta>,
}

impl Manifest {
    pub fn new() -> Self {
        Self {
            format_version: 1,
            source_model: None,
            split: None,
            class_names: BTreeMap::new(),
            sample_ids: Vec::new(),
            labels: Vec::new(),
            roles: Roles::default(),
            text_banks: Vec::new(),
            layernorm_conversion: None,
            sae: None,
            probe: None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != 1 {
            return Err(Error::UnsupportedVersion(m.format_version));
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Checks that every tensor the manifest names exists in `dump`.
    pub fn validate_against(&self, dump: &TensorDump) -> Result<()> {
        let r = &self.roles;
        let named = [&r.cls_embeddings, &r.spatial_embeddings, &r.scoring_embeddings, &r.gamma, &r.w_proj];
        for name in named.into_iter().flatten() {
            dump.get(name)?;
        }
        if let Some(b) = &r.beta {
            if b != ZEROS {
                dump.get(b)?;
            }
        }
        for bank in &self.text_banks {
            dump.get(&bank.embeddings)?;
            dump.get(&bank.empty_prompt)?;
        }
        Ok(())
    }

    fn required<'a>(role: &'a Option<String>, what: &str) -> Result<&'a str> {
        role.as_deref()
            .ok_or_else(|| Error::InvalidManifest(format!("role `{what}` not bound")))
    }
}

impl Default for Manifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Class-token embeddings of a labeled sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    /// `N x d_pre`
    pub cls_embeddings: Array2<f64>,
    /// `N x m x d_pre`
    pub spatial_embeddings: Option<Array3<f64>>,
    /// `N x d_score`, embeddings of the same samples in a scoring model.
    pub scoring_embeddings: Option<Array2<f64>>,
    pub labels: Vec<u32>,
    pub sample_ids: Vec<String>,
    pub class_names: BTreeMap<u32, String>,
}

impl EmbeddingDataset {
    pub fn new(
        cls_embeddings: Array2<f64>,
        labels: Vec<u32>,
        sample_ids: Vec<String>,
        class_names: BTreeMap<u32, String>,
    ) -> Result<Self> {
        let ds = Self {
            cls_embeddings,
            spatial_embeddings: None,
            scoring_embeddings: None,
            labels,
            sample_ids,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Dataset with synthetic ids `s0..` and a single class 0.
    pub fn unlabeled(cls_embeddings: Array2<f64>) -> Result<Self> {
        let n = cls_embeddings.nrows();
        Self::new(
            cls_embeddings,
            vec![0; n],
            (0..n).map(|i| format!("s{i}")).collect(),
            BTreeMap::from([(0, "all".to_string())]),
        )
    }

    pub fn len(&self) -> usize {
        self.cls_embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_pre(&self) -> usize {
        self.cls_embeddings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.labels.len() != n || self.sample_ids.len() != n {
            return Err(Error::DimMismatch(format!(
                "{n} embeddings, {} labels, {} sample ids",
                self.labels.len(),
                self.sample_ids.len()
            )));
        }
        if self.cls_embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("cls_embeddings".into()));
        }
        if let Some(bad) = self.labels.iter().find(|l| !self.class_names.contains_key(l)) {
            return Err(Error::InvalidManifest(format!("label {bad} has no class name")));
        }
        if let Some(sp) = &self.spatial_embeddings {
            if sp.dim().0 != n || sp.dim().2 != self.d_pre() {
                return Err(Error::DimMismatch(format!(
                    "spatial embeddings {:?} vs {n} x {}",
                    sp.dim(),
                    self.d_pre()
                )));
            }
        }
        if let Some(sc) = &self.scoring_embeddings {
            if sc.nrows() != n {
                return Err(Error::DimMismatch(format!(
                    "scoring embeddings have {} rows, dataset {n}",
                    sc.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Indices of samples with the given label, in dataset order.
    pub fn class_indices(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Text embeddings for one prompt variant, plus the empty-prompt reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub name: String,
    pub prompts: Vec<String>,
    /// `|prompts| x d_post`
    pub embeddings: Array2<f64>,
    pub empty_prompt_embedding: Array1<f64>,
    pub empty_prompt: String,
    pub variant: VariantTag,
    pub templates: Vec<String>,
}

impl TextBank {
    pub fn new(
        name: impl Into<String>,
        prompts: Vec<String>,
        embeddings: Array2<f64>,
        empty_prompt_embedding: Array1<f64>,
        variant: VariantTag,
    ) -> Result<Self> {
        let bank = Self {
            name: name.into(),
            prompts,
            embeddings,
            empty_prompt_embedding,
            empty_prompt: String::new(),
            variant,
            templates: Vec::new(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn d_post(&self) -> usize {
        self.embeddings.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::EmptyBank);
        }
        if self.prompts.len() != self.embeddings.nrows() {
            return Err(Error::DimMismatch(format!(
                "{} prompts but {} embedding rows",
                self.prompts.len(),
                self.embeddings.nrows()
            )));
        }
        if self.empty_prompt_embedding.len() != self.embeddings.ncols() {
            return Err(Error::DimMismatch(format!(
                "empty prompt embedding has length {}, bank {}",
                self.empty_prompt_embedding.len(),
                self.embeddings.ncols()
            )));
        }
        if self.embeddings.rows().into_iter().any(|r| norm(r) == 0.0) {
            return Err(Error::ZeroNorm);
        }
        if norm(self.empty_prompt_embedding.view()) == 0.0 {
            return Err(Error::ZeroNorm);
        }
        if self.variant == VariantTag::Templated && self.templates.is_empty() {
            return Err(Error::InvalidManifest(format!(
                "templated bank `{}` records no templates",
                self.name
            )));
        }
        Ok(())
    }
}

pub fn dataset_from(dump: &TensorDump, manifest: &Manifest) -> Result<EmbeddingDataset> {
    let name = Manifest::required(&manifest.roles.cls_embeddings, "cls_embeddings")?;
    let cls = dump.get(name)?.to_matrix(name)?;
    let n = cls.nrows();
    let spatial = match &manifest.roles.spatial_embeddings {
        Some(s) => Some(dump.get(s)?.to_tensor3(s)?),
        None => None,
    };
    let scoring = match &manifest.roles.scoring_embeddings {
        Some(s) => Some(dump.get(s)?.to_matrix(s)?),
        None => None,
    };
    let sample_ids = if manifest.sample_ids.is_empty() {
        (0..n).map(|i| format!("s{i}")).collect()
    } else {
        manifest.sample_ids.clone()
    };
    let (labels, class_names) = if manifest.labels.is_empty() {
        (vec![0; n], BTreeMap::from([(0, "all".to_string())]))
    } else {
        (manifest.labels.clone(), manifest.class_names.clone())
    };
    let ds = EmbeddingDataset {
        cls_embeddings: cls,
        spatial_embeddings: spatial,
        scoring_embeddings: scoring,
        labels,
        sample_ids,
        class_names,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn head_from(dump: &TensorDump, manifest: &Manifest) -> Result<HeadParams> {
    let g = Manifest::required(&manifest.roles.gamma, "gamma")?;
    let w = Manifest::required(&manifest.roles.w_proj, "w_proj")?;
    let gamma = dump.get(g)?.to_vector(g)?;
    let w_proj = dump.get(w)?.to_matrix(w)?;
    let beta = match manifest.roles.beta.as_deref() {
        None | Some(ZEROS) => Array1::zeros(gamma.len()),
        Some(b) => dump.get(b)?.to_vector(b)?,
    };
    HeadParams::new(gamma, beta, w_proj)
}

pub fn text_bank_from(dump: &TensorDump, entry: &TextBankEntry) -> Result<TextBank> {
    if entry.prompts.is_empty() {
        return Err(Error::EmptyBank);
    }
    let embeddings = dump.get(&entry.embeddings)?.to_matrix(&entry.embeddings)?;
    let empty = dump.get(&entry.empty_prompt)?.to_vector(&entry.empty_prompt)?;
    let bank = TextBank {
        name: entry.name.clone(),
        prompts: entry.prompts.clone(),
        embeddings,
        empty_prompt_embedding: empty,
        empty_prompt: entry.empty_prompt_string.clone(),
        variant: entry.variant,
        templates: entry.templates.clone(),
    };
    bank.validate()?;
    Ok(bank)
}

fn read_pair(dump_path: &Path, manifest_path: &Path) -> Result<(TensorDump, Manifest)> {
    let dump = TensorDump::read(dump_path)?;
    let manifest = Manifest::read(manifest_path)?;
    manifest.validate_against(&dump)?;
    Ok((dump, manifest))
}

pub fn load_dataset(dump_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let (dump, manifest) = read_pair(dump_path.as_ref(), manifest_path.as_ref())?;
    dataset_from(&dump, &manifest)
}

pub fn load_head(dump_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<HeadParams> {
    let (dump, manifest) = read_pair(dump_path.as_ref(), manifest_path.as_ref())?;
    head_from(&dump, &manifest)
}

/// Loads the first text bank in the manifest.
pub fn load_text_bank(dump_path: impl AsRef<Path>, manifest_path: impl AsRef<Path>) -> Result<TextBank> {
    let (dump, manifest) = read_pair(dump_path.as_ref(), manifest_path.as_ref())?;
    let entry = manifest.text_banks.first().ok_or(Error::EmptyBank)?;
    text_bank_from(&dump, entry)
}

/// Loads every text bank in the manifest, keyed by bank name.
pub fn load_text_banks(
    dump_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<BTreeMap<String, TextBank>> {
    let (dump, manifest) = read_pair(dump_path.as_ref(), manifest_path.as_ref())?;
    manifest
        .text_banks
        .iter()
        .map(|e| Ok((e.name.clone(), text_bank_from(&dump, e)?)))
        .collect()
}
