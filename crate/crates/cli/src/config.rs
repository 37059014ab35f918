//! JSON run configuration. Every field is optional; command-line flags
//! override values read from `--config`, and the merged result is written
//! to `run-config.json` in the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,

    // inputs
    pub dump: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub sae: Option<PathBuf>,
    pub bank: Option<String>,

    // train-sae
    pub preset: Option<String>,
    pub k: Option<usize>,
    pub d_sae: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub subsample_fraction: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub include_spatial: Option<bool>,

    // attribute
    pub method: Option<String>,
    pub prompt_index: Option<usize>,
    pub samples: Option<Vec<usize>>,
    pub ig_steps: Option<usize>,

    // label
    pub q: Option<usize>,
    pub min_firing: Option<usize>,

    // mine
    pub confidence_slack: Option<f64>,
    pub z_threshold: Option<f64>,
    pub stride: Option<usize>,
    pub classes: Option<Vec<u32>>,

    // faithfulness
    pub methods: Option<Vec<String>>,
    pub modes: Option<Vec<String>>,
    pub max_steps: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub ref_pool: Option<usize>,
    pub subsets: Option<usize>,

    // benchmark
    pub cases: Option<PathBuf>,
    pub variants: Option<Vec<String>>,
    pub probes: Option<Vec<PathBuf>>,

    // probe
    pub positive_class: Option<u32>,
    pub negative_class: Option<u32>,
    pub probe_learning_rate: Option<f64>,
    pub probe_epochs: Option<usize>,
    pub l2: Option<f64>,
    pub component: Option<usize>,
    pub low_threshold: Option<f64>,
    pub high_threshold: Option<f64>,
    pub alpha: Option<f64>,
    pub filter_class: Option<u32>,

    // sweep
    pub probe: Option<PathBuf>,
    pub inputs: Option<Vec<String>>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        fs::write(path, text)
    }
}

/// `cfg.field = flag.or(cfg.field)` for each listed field.
#[macro_export]
macro_rules! overlay {
    ($cfg:expr, $args:expr, $($field:ident),+ $(,)?) => {
        {$( if let Some(v) = $args.$field.clone() { $cfg.$field = Some(v); } )+}
    };
}
