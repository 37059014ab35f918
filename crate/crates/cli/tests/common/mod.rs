#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clat_core::dump::{Tensor, TensorDump};
use clat_core::head::HeadParams;
use clat_core::store::{Manifest, Roles, TextBankEntry, VariantTag};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const D_PRE: usize = 12;
pub const D_POST: usize = 6;
pub const CLASSES: usize = 3;
pub const PER_CLASS: usize = 30;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Writes `<stem>.clad` and `<stem>.json` with three noisy classes, a head
/// and two text banks. `red_shift` moves every embedding along a fixed
/// direction, standing in for an image-level perturbation.
pub fn write_dataset(dir: &Path, stem: &str, seed: u64, red_shift: f64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixed = ChaCha8Rng::seed_from_u64(1000);
    let means: Vec<Array1<f64>> =
        (0..CLASSES).map(|_| Array1::from_shape_fn(D_PRE, |_| 2.0 * normal(&mut fixed))).collect();
    let shift_dir = Array1::from_shape_fn(D_PRE, |_| normal(&mut fixed));
    let gamma = Array1::from_shape_fn(D_PRE, |_| fixed.random_range(0.5..1.5));
    let beta = Array1::from_shape_fn(D_PRE, |_| 0.1 * normal(&mut fixed));
    let w_proj = Array2::from_shape_fn((D_PRE, D_POST), |_| normal(&mut fixed) / (D_PRE as f64).sqrt());
    let head = HeadParams::new(gamma.clone(), beta.clone(), w_proj.clone()).unwrap();

    let n = CLASSES * PER_CLASS;
    let mut x = Array2::zeros((n, D_PRE));
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % CLASSES;
        let row = &means[c] + &Array1::from_shape_fn(D_PRE, |_| 0.7 * normal(&mut rng)) + &shift_dir * red_shift;
        x.row_mut(i).assign(&row);
        labels.push(c as u32);
    }
    let text = Array2::from_shape_fn((CLASSES, D_POST), |(c, j)| {
        head.project(means[c].view()).unwrap().values[j] + 0.05 * normal(&mut fixed)
    });
    let templated = &text * 0.9 + 0.05;
    let empty = Array1::from_shape_fn(D_POST, |_| 0.3 * normal(&mut fixed));

    let mut d = TensorDump::new();
    d.insert("x_cls", Tensor::from_matrix(x.view()).unwrap()).unwrap();
    d.insert("ln.gamma", Tensor::from_vector(gamma.view()).unwrap()).unwrap();
    d.insert("ln.beta", Tensor::from_vector(beta.view()).unwrap()).unwrap();
    d.insert("proj", Tensor::from_matrix(w_proj.view()).unwrap()).unwrap();
    d.insert("text.short", Tensor::from_matrix(text.view()).unwrap()).unwrap();
    d.insert("text.templated", Tensor::from_matrix(templated.view()).unwrap()).unwrap();
    d.insert("text.empty", Tensor::from_vector(empty.view()).unwrap()).unwrap();

    let names: Vec<String> = (0..CLASSES).map(|c| format!("class{c}")).collect();
    let mut m = Manifest::new();
    m.source_model = Some("synthetic".into());
    m.class_names = names.iter().enumerate().map(|(c, s)| (c as u32, s.clone())).collect::<BTreeMap<_, _>>();
    m.sample_ids = (0..n).map(|i| format!("img{i:03}")).collect();
    m.labels = labels;
    m.roles = Roles {
        cls_embeddings: Some("x_cls".into()),
        gamma: Some("ln.gamma".into()),
        beta: Some("ln.beta".into()),
        w_proj: Some("proj".into()),
        ..Default::default()
    };
    m.text_banks = vec![
        TextBankEntry {
            name: "short".into(),
            variant: VariantTag::ShortName,
            prompts: names.clone(),
            embeddings: "text.short".into(),
            empty_prompt: "text.empty".into(),
            empty_prompt_string: String::new(),
            templates: vec![],
            note: None,
        },
        TextBankEntry {
            name: "templated".into(),
            variant: VariantTag::Templated,
            prompts: names,
            embeddings: "text.templated".into(),
            empty_prompt: "text.empty".into(),
            empty_prompt_string: String::new(),
            templates: vec!["{}".into(), "an image of a {}".into(), "a {}".into()],
            note: None,
        },
    ];
    let path = dir.join(format!("{stem}.clad"));
    d.write(&path).unwrap();
    m.write(dir.join(format!("{stem}.json"))).unwrap();
    path
}

pub fn clat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clat"))
        .args(args)
        .env_remove("CLAT_THREADS")
        .output()
        .expect("clat runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Trains a small SAE into `out` and returns the model path.
pub fn train_small(data: &Path, out: &Path, seed: u64) -> PathBuf {
    let o = clat(&[
        "train-sae",
        "--dump",
        data.to_str().unwrap(),
        "--k",
        "3",
        "--dsae",
        "16",
        "--batch-size",
        "16",
        "--epochs",
        "4",
        "--lr",
        "0.001",
        "--decay-epochs",
        "3",
        "--subsample-fraction",
        "1.0",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("sae.clad")
}
