//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with the
//! measured quantity next to its threshold; the process exits nonzero if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use clat_core::anomaly::{mine_failure_modes, MiningConfig, ZScore};
use clat_core::attribution::{attribute_closed_form, attribute_exact, deletion_effect, ComponentRef, Method};
use clat_core::evalsuite::{auroc, curve_auc, run_perturbation_curve, CurveConfig, CurveMode};
use clat_core::head::HeadParams;
use clat_core::probe::{
    estimate_direction, train_linear_probe, train_linear_probe_augmented, ProbeConfig, DEFAULT_ALPHA,
};
use clat_core::sae::{train_sae, ActivationVector, Decomposition, SaeModel, SaeTrainConfig};
use clat_core::store::{EmbeddingDataset, TextBank, VariantTag};
use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, o: &Outcome) {
    println!("ACCEPTANCE {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

// ---------------------------------------------------------------------------
// random attribution instances

struct Instance {
    model: SaeModel,
    head: HeadParams,
    dec: Decomposition,
    t: Array1<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng, d_pre: usize, with_beta: bool) -> Instance {
    let d_sae = 2 * d_pre;
    let d_post = (d_pre / 2).max(4);
    let k = 4;
    loop {
        let mut decoder = Array2::from_shape_fn((d_sae, d_pre), |_| normal(rng));
        for mut r in decoder.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        let scale = 1.0 / (d_pre as f64).sqrt();
        let w_enc = Array2::from_shape_fn((d_pre, d_sae), |_| rng.random_range(-1.0..1.0) * scale);
        let b_enc = Array1::from_shape_fn(d_sae, |_| rng.random_range(-0.1..0.3));
        let b_dec = Array1::from_shape_fn(d_pre, |_| rng.random_range(-0.5..0.5));
        let model = SaeModel::new(w_enc, b_enc, decoder, b_dec, k).unwrap();
        let gamma = Array1::from_shape_fn(d_pre, |_| rng.random_range(0.5..1.5));
        let beta = if with_beta {
            Array1::from_shape_fn(d_pre, |_| 0.3 * normal(rng))
        } else {
            Array1::zeros(d_pre)
        };
        let w_proj = Array2::from_shape_fn((d_pre, d_post), |_| normal(rng) * scale);
        let head = HeadParams::new(gamma, beta, w_proj).unwrap();
        let x = Array1::from_shape_fn(d_pre, |_| normal(rng));
        let t = Array1::from_shape_fn(d_post, |_| normal(rng));
        let dec = model.decompose(x.view()).unwrap();
        if !dec.activations.is_empty() {
            return Instance { model, head, dec, t };
        }
    }
}

fn suite(n: usize, seed: u64, with_beta: bool) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_instance(&mut rng, [8, 16, 64][i % 3], with_beta)).collect()
}

/// Five-point central difference of `y` along `v` at `x`.
fn fd_directional(head: &HeadParams, x: &Array1<f64>, v: &Array1<f64>, t: &Array1<f64>) -> f64 {
    let h = 1e-3;
    let y = |s: f64| head.output((x + &(v * s)).view(), t.view()).unwrap();
    (-y(2.0 * h) + 8.0 * y(h) - 8.0 * y(-h) + y(-2.0 * h)) / (12.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let insts = suite(1000, 11, true);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for inst in &insts {
        let rec = attribute_exact(&inst.model, &inst.head, &inst.dec, inst.t.view()).unwrap();
        for (j, a) in inst.dec.activations.iter() {
            let fd = a * fd_directional(&inst.head, &inst.dec.x, &inst.model.atom(j).to_owned(), &inst.t);
            worst = worst.max(rel_err(rec.score(j), fd));
            checked += 1;
        }
        let fd_b = fd_directional(&inst.head, &inst.dec.x, &inst.model.b_dec, &inst.t);
        let fd_e = fd_directional(&inst.head, &inst.dec.x, &inst.dec.error, &inst.t);
        worst = worst.max(rel_err(rec.pseudo_bias_score, fd_b)).max(rel_err(rec.pseudo_error_score, fd_e));
        checked += 2;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-5 && secs < 10.0,
        detail: format!(
            "max relative error {worst:.2e} over {checked} derivatives on 1000 instances, d_pre in {{8,16,64}} \
             (tolerance 1e-5); {secs:.2}s (limit 10s)"
        ),
    }
}

fn euler_sum_zero() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (seed, beta) in [(21, true), (22, false)] {
        for inst in suite(1000, seed, beta) {
            let rec = attribute_exact(&inst.model, &inst.head, &inst.dec, inst.t.view()).unwrap();
            worst = worst.max(rec.total().abs());
            n += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-8,
        detail: format!("max |sum of scores| {worst:.2e} over {n} instances, half with nonzero beta (tolerance 1e-8)"),
    }
}

fn closed_form_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for inst in suite(1000, 31, false) {
        let ex = attribute_exact(&inst.model, &inst.head, &inst.dec, inst.t.view()).unwrap();
        let cf = attribute_closed_form(&inst.model, &inst.head, &inst.dec, inst.t.view()).unwrap();
        for (&(j, a), &(k, b)) in ex.scores.iter().zip(&cf.scores) {
            assert_eq!(j, k);
            worst = worst.max(rel_err(a, b));
            n += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-6,
        detail: format!("max relative difference {worst:.2e} over {n} scores on 1000 beta=0 instances (tolerance 1e-6)"),
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Scales one activation by `c` and compares its attribution with the exact
/// effect of deleting it; the residual should shrink quadratically in `c`.
fn first_order_consistency() -> Outcome {
    let cs = [1.0, 0.5, 0.25, 0.125];
    let log_c: Vec<f64> = cs.iter().map(|c: &f64| c.ln()).collect();
    let mut slopes = Vec::new();
    let mut agg = vec![0.0; cs.len()];
    for inst in suite(300, 41, true) {
        for (pos, (j, a)) in inst.dec.activations.iter().enumerate() {
            let v = inst.model.atom(j).to_owned();
            let residuals: Vec<f64> = cs
                .iter()
                .map(|&c| {
                    let mut dec = inst.dec.clone();
                    dec.x = &inst.dec.x - &(&v * ((1.0 - c) * a));
                    dec.activations.values[pos] = c * a;
                    let r = attribute_exact(&inst.model, &inst.head, &dec, inst.t.view()).unwrap().score(j);
                    let d = deletion_effect(&inst.model, &inst.head, &dec, inst.t.view(), ComponentRef::Latent(j))
                        .unwrap();
                    (r - d).abs()
                })
                .collect();
            for (g, r) in agg.iter_mut().zip(&residuals) {
                *g += r;
            }
            if residuals.iter().all(|&r| r > 1e-13) {
                let ly: Vec<f64> = residuals.iter().map(|r| r.ln()).collect();
                slopes.push(slope(&log_c, &ly));
            }
        }
    }
    slopes.sort_by(f64::total_cmp);
    let median = slopes[slopes.len() / 2];
    let ly: Vec<f64> = agg.iter().map(|r| r.ln()).collect();
    let pooled = slope(&log_c, &ly);
    Outcome {
        pass: pooled >= 1.8 && median >= 1.8,
        detail: format!(
            "log-log slope of |R_j - deletion effect| vs c in {{1,1/2,1/4,1/8}}: pooled {pooled:.3}, median {median:.3} \
             over {} components of 300 instances (threshold 1.8)",
            slopes.len()
        ),
    }
}

// ---------------------------------------------------------------------------
// single-carrier faithfulness fixture

const CARRIER_ATOMS: usize = 6;

/// Atoms with entries +-1/2 on disjoint blocks of four coordinates; atom 0
/// is the text direction. Bias and error live on a final block of their own.
fn carrier_fixture(seed: u64, n: usize) -> (EmbeddingDataset, SaeModel, HeadParams, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4 * CARRIER_ATOMS + 4;
    let mut decoder = Array2::zeros((CARRIER_ATOMS, d));
    for i in 0..CARRIER_ATOMS {
        let mut pattern = [0.5, 0.5, -0.5, -0.5];
        pattern.shuffle(&mut rng);
        for (o, p) in pattern.iter().enumerate() {
            decoder[[i, 4 * i + o]] = *p;
        }
    }
    let mut b_dec = Array1::zeros(d);
    for o in 0..4 {
        b_dec[4 * CARRIER_ATOMS + o] = rng.random_range(-0.5..0.5);
    }
    let model = SaeModel::new(decoder.t().to_owned(), Array1::zeros(CARRIER_ATOMS), decoder.clone(), b_dec.clone(), CARRIER_ATOMS)
        .unwrap();
    let head = HeadParams::new(Array1::ones(d), Array1::zeros(d), Array2::eye(d)).unwrap();
    let mut x = Array2::zeros((n, d));
    for s in 0..n {
        let mut row = b_dec.clone();
        for i in 0..CARRIER_ATOMS {
            let a: f64 = rng.random_range(0.5..2.0);
            row.scaled_add(a, &decoder.row(i));
        }
        for o in 0..4 {
            row[4 * CARRIER_ATOMS + o] += 0.1 * normal(&mut rng);
        }
        x.row_mut(s).assign(&row);
    }
    let ds = EmbeddingDataset::new(
        x,
        vec![0; n],
        (0..n).map(|i| format!("s{i}")).collect(),
        BTreeMap::from([(0, "carrier".to_string())]),
    )
    .unwrap();
    let prompts = decoder.slice(s![0..1, ..]).to_owned();
    (ds, model, head, prompts)
}

fn faithfulness_ordering() -> Outcome {
    let seeds = 100;
    let n = 20;
    let methods = [Method::ActXGradExact, Method::ActXLogitLens, Method::Random];
    let mut mean_auc = [0.0; 3];
    let mut insertion_exact = true;
    let mut exact_first = 0;
    let samples: Vec<usize> = (0..n).collect();
    for seed in 0..seeds {
        let (ds, model, head, prompts) = carrier_fixture(seed, n);
        for (m, &method) in methods.iter().enumerate() {
            let mut cfg = CurveConfig::new(method, CurveMode::DeletionLocal);
            cfg.max_steps = CARRIER_ATOMS;
            cfg.seed = seed;
            let set = run_perturbation_curve(&ds, &model, &head, prompts.view(), &samples, &cfg).unwrap();
            let mean: Vec<f64> = set.mean_curve().steps.iter().map(|s| s.1).collect();
            mean_auc[m] += curve_auc(&mean) / seeds as f64;
            if method == Method::ActXGradExact && set.curves.iter().all(|c| c[1] == 0.0) {
                exact_first += 1;
            }
        }
        let mut cfg = CurveConfig::new(Method::ActXGradExact, CurveMode::InsertionLocal);
        cfg.max_steps = CARRIER_ATOMS;
        let ins = run_perturbation_curve(&ds, &model, &head, prompts.view(), &samples, &cfg).unwrap();
        for (c, &i) in ins.curves.iter().zip(&ins.sample_indices) {
            let y = head.output(ds.cls_embeddings.row(i), prompts.row(0)).unwrap();
            insertion_exact &= *c.last().unwrap() == y;
        }
        insertion_exact &= ins.dropped == 0;
    }
    let [exact, actll, random] = mean_auc;
    Outcome {
        pass: exact <= actll && actll <= random && insertion_exact,
        detail: format!(
            "mean deletion AUC over {seeds} seeds: exact {exact:.6} <= act_x_logit_lens {actll:.6} <= random {random:.6}; \
             exact removed the carrier first in {exact_first}/{seeds} seeds; insertion final step equals y(x) exactly: {insertion_exact}"
        ),
    }
}

// ---------------------------------------------------------------------------
// SAE

/// One-to-one matching of planted atoms to decoder rows by descending
/// |cosine|; returns the smallest matched value.
fn greedy_match(model: &SaeModel, atoms: &[Array1<f64>]) -> f64 {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in atoms.iter().enumerate() {
        for j in 0..model.d_sae() {
            pairs.push((model.atom(j).dot(a).abs(), i, j));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0));
    let mut used_atom = vec![false; atoms.len()];
    let mut used_row = vec![false; model.d_sae()];
    let mut worst = f64::INFINITY;
    for (c, i, j) in pairs {
        if !used_atom[i] && !used_row[j] {
            used_atom[i] = true;
            used_row[j] = true;
            worst = worst.min(c);
        }
    }
    worst
}

fn sae_toy() -> Outcome {
    let start = Instant::now();
    let mut min_cos = f64::INFINITY;
    let mut max_active = 0;
    let mut max_dev: f64 = 0.0;
    let seeds = 5;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (d, m, n) = (16, 8, 4000);
        let atoms: Vec<Array1<f64>> = (0..m).map(|_| unit(Array1::from_shape_fn(d, |_| normal(&mut rng)))).collect();
        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            let mut pick: Vec<usize> = (0..m).collect();
            pick.shuffle(&mut rng);
            for &j in &pick[..2] {
                let c: f64 = rng.random_range(0.5..2.0);
                let mut row = x.row_mut(i);
                row.scaled_add(c, &atoms[j]);
            }
        }
        let ds = EmbeddingDataset::unlabeled(x.clone()).unwrap();
        let cfg = SaeTrainConfig {
            learning_rate: 5e-3,
            epoch_subsample_fraction: 1.0,
            ..SaeTrainConfig::imagenet(8, 2, 16, seed)
        };
        let model = train_sae(&ds, &cfg).unwrap().model;
        max_dev = max_dev.max(model.max_norm_deviation());
        for r in x.rows() {
            max_active = max_active.max(model.encode(r).unwrap().len());
        }
        min_cos = min_cos.min(greedy_match(&model, &atoms));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: max_active <= 2 && max_dev <= 1e-6 && min_cos >= 0.95 && secs < 60.0,
        detail: format!(
            "{seeds} seeds, 8 planted atoms, k=2: max active {max_active} (<= 2), max decoder norm deviation {max_dev:.1e} \
             (<= 1e-6), min matched cosine {min_cos:.4} (>= 0.95); {secs:.1}s (limit 60s)"
        ),
    }
}

// ---------------------------------------------------------------------------
// AUROC

fn auroc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for i in 0..200 {
        let np = rng.random_range(1..=100);
        let nn = rng.random_range(1..=100);
        let tied = i % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if tied {
                rng.random_range(0..8) as f64
            } else {
                normal(rng)
            }
        };
        let pos: Vec<f64> = (0..np).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(&mut rng)).collect();
        let mut count = 0.0;
        for p in &pos {
            for q in &neg {
                count += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        let brute = count / (np * nn) as f64;
        if auroc(&pos, &neg).unwrap() != brute {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{mismatches} of 200 instances (<= 200 scores each, half with ties) differ from pair counting (exact match required)"),
    }
}

// ---------------------------------------------------------------------------
// anomaly mining

/// SAE whose atoms are the coordinate axes, so `a = relu(x)` and all
/// components fire on positive coordinates.
fn identity_sae(d: usize) -> SaeModel {
    SaeModel::new(Array2::eye(d), Array1::zeros(d), Array2::eye(d), Array1::zeros(d), d).unwrap()
}

fn random_head(rng: &mut ChaCha8Rng, d: usize, d_post: usize) -> HeadParams {
    HeadParams::new(
        Array1::from_shape_fn(d, |_| rng.random_range(0.5..1.5)),
        Array1::from_shape_fn(d, |_| 0.1 * normal(rng)),
        Array2::from_shape_fn((d, d_post), |_| normal(rng) / (d as f64).sqrt()),
    )
    .unwrap()
}

fn bank_for(rng: &mut ChaCha8Rng, head: &HeadParams, class_means: &[Array1<f64>]) -> TextBank {
    let d_post = head.d_post();
    let emb = Array2::from_shape_fn((class_means.len(), d_post), |(c, j)| {
        head.project(class_means[c].view()).unwrap().values[j] + 0.05 * normal(rng)
    });
    TextBank::new(
        "classes",
        (0..class_means.len()).map(|c| format!("class{c}")).collect(),
        emb,
        Array1::from_shape_fn(d_post, |_| 0.3 * normal(rng)),
        VariantTag::ShortName,
    )
    .unwrap()
}

fn z_null_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let per_class = 6000;
    let mean = Array1::from_elem(d, 5.0);
    let mut x = Array2::zeros((2 * per_class, d));
    let mut labels = Vec::new();
    for i in 0..2 * per_class {
        x.row_mut(i).assign(&Array1::from_shape_fn(d, |k| mean[k] + 0.5 * normal(&mut rng)));
        labels.push((i % 2) as u32);
    }
    let ds = EmbeddingDataset::new(
        x,
        labels,
        (0..2 * per_class).map(|i| format!("s{i}")).collect(),
        BTreeMap::from([(0, "a".to_string()), (1, "b".to_string())]),
    )
    .unwrap();
    let head = random_head(&mut rng, d, 6);
    let tilt = Array1::from_shape_fn(d, |k| if k % 2 == 0 { 0.3 } else { -0.3 });
    let perturbed = [&mean + &tilt, &mean - &tilt];
    let bank = bank_for(&mut rng, &head, &perturbed);
    let cfg = MiningConfig { min_firing: 1, reference_stride: 1, ..Default::default() };
    let report = mine_failure_modes(&ds, &identity_sae(d), &head, &bank, &cfg).unwrap();
    let trials: usize = report.classes.iter().map(|c| c.n_distractors).sum();
    let mut per_component = vec![0usize; d];
    for f in &report.flags {
        per_component[f.component_id] += 1;
    }
    let worst = per_component.iter().copied().max().unwrap() as f64 / trials as f64;
    let overall = report.flags.len() as f64 / (trials * d) as f64;
    Outcome {
        pass: worst <= 0.015 && trials >= 10_000,
        detail: format!(
            "max per-component flag rate {:.3}% (overall {:.3}%) over {trials} null trials per component (limit 1.5%, >= 10^4 trials)",
            100.0 * worst,
            100.0 * overall
        ),
    }
}

fn planted_shortcut() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 8;
    let planted = 6;
    let base = Array1::from_shape_fn(d, |k| if k == planted { -1.0 } else if k % 2 == 0 { 2.0 } else { -2.0 });
    let far = Array1::from_shape_fn(d, |k| if k < d / 2 { 3.0 } else { -3.0 });
    let mut rows = Vec::new();
    for (label, count) in [(0u32, 1000), (1, 300), (2, 200)] {
        for _ in 0..count {
            let mut v = if label == 2 { far.clone() } else { base.clone() };
            for k in 0..d {
                if k != planted {
                    v[k] += 0.5 * normal(&mut rng);
                }
            }
            if label == 1 {
                v[planted] = rng.random_range(0.3..0.6);
            }
            rows.push((label, v));
        }
    }
    rows.shuffle(&mut rng);
    let n = rows.len();
    let mut x = Array2::zeros((n, d));
    for (i, (_, v)) in rows.iter().enumerate() {
        x.row_mut(i).assign(v);
    }
    let ds = EmbeddingDataset::new(
        x,
        rows.iter().map(|r| r.0).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
        BTreeMap::from([(0, "target".to_string()), (1, "lookalike".to_string()), (2, "other".to_string())]),
    )
    .unwrap();
    // an unprojected head keeps the planted coordinate visible to the prompt
    let head = HeadParams::new(
        Array1::from_shape_fn(d, |_| rng.random_range(0.8..1.2)),
        Array1::zeros(d),
        Array2::eye(d),
    )
    .unwrap();
    // the class prompt itself leans toward the planted concept, so firing it
    // raises the class score (a hidden shortcut rather than a suppressor)
    let mut prompt = base.clone();
    prompt[planted] = 3.0;
    let bank = bank_for(&mut rng, &head, &[prompt, base.clone(), far]);
    let cfg = MiningConfig { classes: Some(vec![0]), ..Default::default() };
    let report = mine_failure_modes(&ds, &identity_sae(d), &head, &bank, &cfg).unwrap();
    let flagged = report.flagged_components(0);
    let hits = flagged.iter().filter(|&&j| j == planted).count();
    let precision = if flagged.is_empty() { 0.0 } else { hits as f64 / flagged.len() as f64 };
    let recall = hits as f64;
    let infinite = report.cases.iter().filter(|c| c.component_id == planted).all(|c| c.max_z == ZScore::PosInfinite);
    let summary = &report.classes[0];
    Outcome {
        pass: precision == 1.0 && recall == 1.0 && infinite,
        detail: format!(
            "flagged components {flagged:?} (planted {planted}): precision {precision:.2}, recall {recall:.2}, infinite z: {infinite}; \
             {} reference samples, {} of {} candidates passed the confidence filter; slack 1.5, z > 3, >= 10 firings, stride 5",
            summary.n_reference, summary.n_distractors, summary.n_candidates
        ),
    }
}

// ---------------------------------------------------------------------------
// probe augmentation

/// Coordinate 0 carries a weak class signal, coordinate 1 a spurious one
/// that is just as predictive in training but varies widely within each class.
fn shortcut_split(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Array2<f64>, Vec<bool>) {
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::new();
    for i in 0..n {
        let l = i % 2 == 0;
        let sign = if l { 1.0 } else { -1.0 };
        let mut row = Array1::from_shape_fn(d, |_| normal(rng));
        row[0] = sign * 0.5 + normal(rng);
        row[1] = sign * 0.5 + normal(rng);
        x.row_mut(i).assign(&row);
        labels.push(l);
    }
    (x, labels)
}

fn augmentation_robustness() -> Outcome {
    let seeds = 20;
    let d = 8;
    let shift = -1.5;
    let mut wins = 0;
    let mut plain_total = 0.0;
    let mut aug_total = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (train, labels) = shortcut_split(&mut rng, 2000, d);
        let (test, test_labels) = shortcut_split(&mut rng, 2000, d);
        let mut shifted = test.clone();
        shifted.column_mut(1).mapv_inplace(|v| v + shift);
        // a component that fires with the spurious coordinate
        let acts: Vec<ActivationVector> = train
            .rows()
            .into_iter()
            .map(|r| {
                let a = 2.0 * (r[1] + 1.0);
                if a > 0.0 {
                    ActivationVector { indices: vec![0], values: vec![a], d_sae: 1 }
                } else {
                    ActivationVector::empty(1)
                }
            })
            .collect();
        // estimated on negatives only so the class signal cancels
        let negatives: Vec<bool> = labels.iter().map(|l| !l).collect();
        let dir = estimate_direction(train.view(), &acts, 0, 1.0, 2.5, Some(&negatives)).unwrap();
        let cfg = ProbeConfig { epochs: 500, seed, ..Default::default() };
        let plain = train_linear_probe(train.view(), &labels, &cfg).unwrap();
        let aug = train_linear_probe_augmented(train.view(), &labels, &cfg, &dir, DEFAULT_ALPHA).unwrap();
        let drop = |p: &clat_core::probe::LinearProbe| {
            p.accuracy(test.view(), &test_labels).unwrap() - p.accuracy(shifted.view(), &test_labels).unwrap()
        };
        let (dp, da) = (drop(&plain), drop(&aug));
        plain_total += dp / seeds as f64;
        aug_total += da / seeds as f64;
        if da < dp {
            wins += 1;
        }
    }
    Outcome {
        pass: wins >= 18,
        detail: format!(
            "augmented probe (alpha {DEFAULT_ALPHA}) degraded strictly less in {wins}/{seeds} seeds (need >= 18); \
             mean accuracy drop {:.2}% plain vs {:.2}% augmented under a {shift} shift along the spurious coordinate",
            100.0 * plain_total,
            100.0 * aug_total
        ),
    }
}

// ---------------------------------------------------------------------------
// CLI determinism

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_pipeline(data: &Path, out: &Path, threads: &str) -> bool {
    let data = data.to_str().unwrap();
    let o = |s: &str| out.join(s).to_str().unwrap().to_string();
    let sae = o("train/sae.clad");
    let runs: Vec<Vec<String>> = vec![
        vec!["train-sae", "--dump", data, "--k", "3", "--dsae", "16", "--batch-size", "16", "--epochs", "4", "--lr", "0.001", "--decay-epochs", "3", "--subsample-fraction", "0.5", "--seed", "4", "--out", &o("train")],
        vec!["attribute", "--dump", data, "--sae", &sae, "--method", "integrated_gradients", "--out", &o("attr")],
        vec!["attribute", "--dump", data, "--sae", &sae, "--method", "random", "--seed", "3", "--out", &o("attr_random")],
        vec!["label", "--dump", data, "--sae", &sae, "--min-firing", "3", "--out", &o("label")],
        vec!["mine", "--dump", data, "--sae", &sae, "--stride", "1", "--min-firing", "2", "--out", &o("mine")],
        vec!["faithfulness", "--dump", data, "--sae", &sae, "--samples-per-class", "10", "--max-steps", "3", "--modes", "deletion_local,deletion_random_ref,insertion_local", "--ref-pool", "30", "--seed", "2", "--out", &o("faith")],
        vec!["probe", "--dump", data, "--positive-class", "1", "--epochs", "200", "--out", &o("probe")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    runs.iter().all(|args| {
        let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
        full.extend(["--threads", threads]);
        let r = common::clat(&full);
        if common::code(&r) != 0 {
            eprintln!("{}", common::stderr(&r));
        }
        common::code(&r) == 0
    })
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = common::write_dataset(dir.path(), "data", 8, 0.0);
    let out = dir.path().join("run");
    let mut snaps = Vec::new();
    let mut ok = true;
    for threads in ["1", "4", "4"] {
        ok &= run_pipeline(&data, &out, threads);
        snaps.push(snapshot(&out));
        fs::remove_dir_all(&out).unwrap();
    }
    let files = snaps[0].len();
    let identical = snaps.windows(2).all(|w| w[0] == w[1]);
    Outcome {
        pass: ok && identical && files > 0,
        detail: format!(
            "7 commands run 3 times (1, 4, 4 threads): all exited 0: {ok}; {files} output files byte-identical across runs: {identical}"
        ),
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this target
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: Vec<Criterion> = vec![
        ("gradient-fidelity", gradient_fidelity),
        ("euler-sum-zero", euler_sum_zero),
        ("closed-form-equivalence", closed_form_equivalence),
        ("first-order-consistency", first_order_consistency),
        ("faithfulness-ordering", faithfulness_ordering),
        ("topk-sae", sae_toy),
        ("auroc-oracle", auroc_oracle),
        ("z-score-calibration", z_null_calibration),
        ("anomaly-mining", planted_shortcut),
        ("augmentation-robustness", augmentation_robustness),
        ("cli-determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        report(name, &o);
        failed += usize::from(!o.pass);
    }
    println!("ACCEPTANCE SUMMARY: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
