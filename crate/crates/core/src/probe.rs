//! Linear probes on projected embeddings, latent directions estimated from
//! component activations, augmentation along such directions, red-channel
//! image perturbation and robustness sweeps.

use std::io::Write;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::{Tensor, TensorDump};
use crate::error::{Error, Result};
use crate::linalg::column_mean;
use crate::sae::ActivationVector;
use crate::store::{Manifest, ProbeMeta};

/// Gradient-norm convergence threshold for probe training.
pub const PROBE_GRAD_TOL: f64 = 1e-6;
/// Augmentation strength used for the main experiments.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, epochs: 2000, l2: 0.0, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// `(negative label, positive label)`
    pub classes: (u32, u32),
    pub train_config: ProbeConfig,
    /// Epochs actually run.
    pub epochs_run: usize,
    pub converged: bool,
}

impl LinearProbe {
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>() + self.bias
    }

    pub fn probability(&self, x: ArrayView1<'_, f64>) -> f64 {
        sigmoid(self.decision(x))
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> bool {
        self.decision(x) > 0.0
    }

    pub fn accuracy(&self, embeddings: ArrayView2<'_, f64>, labels: &[bool]) -> Result<f64> {
        check_inputs(embeddings, labels)?;
        if embeddings.ncols() != self.weights.len() {
            return Err(Error::DimMismatch(format!(
                "probe expects dimension {}, got {}",
                self.weights.len(),
                embeddings.ncols()
            )));
        }
        let correct = embeddings
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(x, &l)| self.predict(*x) == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    pub fn with_classes(mut self, negative: u32, positive: u32) -> Self {
        self.classes = (negative, positive);
        self
    }

    pub fn to_dump(&self) -> Result<(TensorDump, Manifest)> {
        let mut d = TensorDump::new();
        d.insert("probe.weights", Tensor::from_vector(Array1::from(self.weights.clone()).view())?)?;
        d.insert("probe.bias", Tensor::from_vector(Array1::from(vec![self.bias]).view())?)?;
        let mut m = Manifest::new();
        m.probe = Some(ProbeMeta {
            negative_class: self.classes.0,
            positive_class: self.classes.1,
            learning_rate: self.train_config.learning_rate,
            epochs: self.train_config.epochs,
            l2: self.train_config.l2,
            seed: self.train_config.seed,
        });
        Ok((d, m))
    }

    pub fn from_dump(dump: &TensorDump, manifest: &Manifest) -> Result<Self> {
        let meta = manifest
            .probe
            .ok_or_else(|| Error::InvalidManifest("manifest has no `probe` section".into()))?;
        let weights = dump.get("probe.weights")?.to_vector("probe.weights")?.to_vec();
        let bias = dump.get("probe.bias")?.to_vector("probe.bias")?;
        if bias.len() != 1 {
            return Err(Error::DimMismatch(format!("probe.bias has {} values", bias.len())));
        }
        Ok(Self {
            weights,
            bias: bias[0],
            classes: (meta.negative_class, meta.positive_class),
            train_config: ProbeConfig {
                learning_rate: meta.learning_rate,
                epochs: meta.epochs,
                l2: meta.l2,
                seed: meta.seed,
            },
            epochs_run: 0,
            converged: false,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_inputs(embeddings: ArrayView2<'_, f64>, labels: &[bool]) -> Result<()> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimMismatch(format!("{} rows, {} labels", embeddings.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Gradient of the mean cross-entropy plus `l2/2 |w|^2`.
fn gradient(x: ArrayView2<'_, f64>, labels: &[bool], w: &Array1<f64>, b: f64, l2: f64) -> (Array1<f64>, f64) {
    let n = labels.len() as f64;
    let residual: Array1<f64> = x
        .dot(w)
        .iter()
        .zip(labels)
        .map(|(&z, &l)| sigmoid(z + b) - if l { 1.0 } else { 0.0 })
        .collect();
    let gw = x.t().dot(&residual) / n + w * l2;
    (gw, residual.sum() / n)
}

fn fit(
    embeddings: ArrayView2<'_, f64>,
    labels: &[bool],
    cfg: &ProbeConfig,
    mut batch: impl FnMut(usize) -> Option<Array2<f64>>,
) -> Result<LinearProbe> {
    cfg.validate()?;
    check_inputs(embeddings, labels)?;
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }
    let mut w = Array1::zeros(embeddings.ncols());
    let mut b = 0.0;
    let mut converged = false;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let augmented = batch(epoch);
        let x = augmented.as_ref().map(|a| a.view()).unwrap_or(embeddings);
        let (gw, gb) = gradient(x, labels, &w, b, cfg.l2);
        let gnorm = (gw.dot(&gw) + gb * gb).sqrt();
        if augmented.is_none() && gnorm < PROBE_GRAD_TOL {
            converged = true;
            break;
        }
        w.scaled_add(-cfg.learning_rate, &gw);
        b -= cfg.learning_rate * gb;
        epochs_run = epoch + 1;
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::NonFiniteValue("probe weights diverged".into()));
    }
    Ok(LinearProbe {
        weights: w.to_vec(),
        bias: b,
        classes: (0, 1),
        train_config: *cfg,
        epochs_run,
        converged,
    })
}

/// Logistic regression by full-batch gradient descent from zero weights.
pub fn train_linear_probe(embeddings: ArrayView2<'_, f64>, labels: &[bool], cfg: &ProbeConfig) -> Result<LinearProbe> {
    fit(embeddings, labels, cfg, |_| None)
}

/// As [`train_linear_probe`], but every epoch shifts each training
/// embedding by `alpha (p - 0.5) u` with a fresh seeded draw `p ~ U(0, 1)`.
pub fn train_linear_probe_augmented(
    embeddings: ArrayView2<'_, f64>,
    labels: &[bool],
    cfg: &ProbeConfig,
    direction: &LatentDirection,
    alpha: f64,
) -> Result<LinearProbe> {
    if direction.values.len() != embeddings.ncols() {
        return Err(Error::DimMismatch(format!(
            "direction has length {}, embeddings {}",
            direction.values.len(),
            embeddings.ncols()
        )));
    }
    let u = Array1::from(direction.values.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit(embeddings, labels, cfg, |_| {
        let mut x = embeddings.to_owned();
        for mut row in x.rows_mut() {
            let p: f64 = rng.random();
            row.scaled_add(alpha * (p - 0.5), &u);
        }
        Some(x)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDirection {
    /// `mean(high) - mean(low)`
    pub values: Vec<f64>,
    pub source_component: usize,
    pub thresholds: (f64, f64),
    pub set_sizes: (usize, usize),
    pub high_mean: Vec<f64>,
    pub low_mean: Vec<f64>,
}

/// Direction between the mean embedding of samples where `component`
/// activates above `high_thr` and those below `low_thr`. `filter` keeps only
/// samples marked true.
pub fn estimate_direction(
    embeddings: ArrayView2<'_, f64>,
    activations: &[ActivationVector],
    component: usize,
    low_thr: f64,
    high_thr: f64,
    filter: Option<&[bool]>,
) -> Result<LatentDirection> {
    if embeddings.nrows() != activations.len() {
        return Err(Error::DimMismatch(format!(
            "{} embeddings, {} activation rows",
            embeddings.nrows(),
            activations.len()
        )));
    }
    if let Some(f) = filter {
        if f.len() != activations.len() {
            return Err(Error::DimMismatch(format!("filter has {} entries", f.len())));
        }
    }
    let keep = |i: usize| filter.is_none_or(|f| f[i]);
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (i, a) in activations.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        let v = a.get(component);
        if v < low_thr {
            low.push(i);
        }
        if v > high_thr {
            high.push(i);
        }
    }
    if low.is_empty() {
        return Err(Error::EmptySet("low-activation set"));
    }
    if high.is_empty() {
        return Err(Error::EmptySet("high-activation set"));
    }
    let high_mean = column_mean(embeddings, &high);
    let low_mean = column_mean(embeddings, &low);
    Ok(LatentDirection {
        values: (&high_mean - &low_mean).to_vec(),
        source_component: component,
        thresholds: (low_thr, high_thr),
        set_sizes: (low.len(), high.len()),
        high_mean: high_mean.to_vec(),
        low_mean: low_mean.to_vec(),
    })
}

/// `x' = x + alpha (p - 0.5) u`
pub fn augment_latent(x: ArrayView1<'_, f64>, direction: &LatentDirection, alpha: f64, p: f64) -> Result<Array1<f64>> {
    if x.len() != direction.values.len() {
        return Err(Error::DimMismatch(format!(
            "embedding has length {}, direction {}",
            x.len(),
            direction.values.len()
        )));
    }
    let s = alpha * (p - 0.5);
    Ok(x.iter().zip(&direction.values).map(|(a, u)| a + s * u).collect())
}

fn check_unit_range(values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfRangeInput(v));
        }
    }
    Ok(())
}

/// `red' = clamp(red (1 - delta), 0, 1)` elementwise.
pub fn augment_red(red: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_unit_range(red.iter().copied())?;
    Ok(red.iter().map(|r| (r * (1.0 - delta)).clamp(0.0, 1.0)).collect())
}

/// Applies [`augment_red`] to channel 0 of a planar `3 x H x W` image.
pub fn augment_red_channel(image: &Array3<f64>, delta: f64) -> Result<Array3<f64>> {
    if image.shape()[0] != 3 {
        return Err(Error::DimMismatch(format!("expected 3 channels, got {}", image.shape()[0])));
    }
    check_unit_range(image.iter().copied())?;
    let mut out = image.clone();
    out.index_axis_mut(Axis(0), 0).mapv_inplace(|r| (r * (1.0 - delta)).clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    /// Positive or negative class of the probe.
    pub positive: bool,
    pub accuracy: f64,
    /// Binomial standard error `sqrt(p (1 - p) / n)`.
    pub sem: f64,
    pub n: usize,
    /// Baseline accuracy minus this accuracy.
    pub degradation: f64,
}

pub struct SweepInput {
    pub delta: f64,
    pub embeddings: Array2<f64>,
    pub labels: Vec<bool>,
}

/// Per-delta, per-class probe accuracy. The entry with `delta == 0` is the
/// baseline.
pub fn robustness_sweep(probe: &LinearProbe, inputs: &[SweepInput]) -> Result<Vec<SweepRow>> {
    let baseline = inputs.iter().find(|s| s.delta == 0.0).ok_or(Error::MissingBaseline)?;
    let per_class = |s: &SweepInput| -> Result<[(f64, usize); 2]> {
        check_inputs(s.embeddings.view(), &s.labels)?;
        let mut out = [(0.0, 0); 2];
        for (slot, class) in [(0, true), (1, false)] {
            let rows: Vec<usize> = (0..s.labels.len()).filter(|&i| s.labels[i] == class).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = s.embeddings.select(Axis(0), &rows);
            out[slot] = (probe.accuracy(sub.view(), &vec![class; rows.len()])?, rows.len());
        }
        Ok(out)
    };
    let base = per_class(baseline)?;
    let rows = inputs
        .par_iter()
        .map(|s| {
            let acc = per_class(s)?;
            Ok([(0, true), (1, false)]
                .into_iter()
                .filter(|&(slot, _)| acc[slot].1 > 0)
                .map(|(slot, positive)| {
                    let (p, n) = acc[slot];
                    SweepRow {
                        delta: s.delta,
                        positive,
                        accuracy: p,
                        sem: (p * (1.0 - p) / n as f64).sqrt(),
                        n,
                        degradation: base[slot].0 - p,
                    }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "delta,class,accuracy,sem,n,degradation")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{:.6}",
            r.delta,
            if r.positive { "positive" } else { "negative" },
            r.accuracy,
            r.sem,
            r.n,
            r.degradation
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn toy() -> (Array2<f64>, Vec<bool>) {
        let x = array![[2.0, 1.0], [1.5, 2.0], [3.0, 0.5], [-1.0, -2.0], [-2.0, 0.5], [-1.5, -1.0]];
        (x, vec![true, true, true, false, false, false])
    }

    #[test]
    fn separable_toy_is_fit() {
        let (x, y) = toy();
        let p = train_linear_probe(x.view(), &y, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(x.view(), &y).unwrap(), 1.0);
    }

    #[test]
    fn flipped_labels_negate_weights() {
        let (x, y) = toy();
        let cfg = ProbeConfig { l2: 0.01, ..Default::default() };
        let p = train_linear_probe(x.view(), &y, &cfg).unwrap();
        let flipped: Vec<bool> = y.iter().map(|l| !l).collect();
        let q = train_linear_probe(x.view(), &flipped, &cfg).unwrap();
        for (a, b) in p.weights.iter().zip(&q.weights) {
            assert_abs_diff_eq!(*a, -*b, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(p.bias, -q.bias, epsilon = 1e-9);
    }

    #[test]
    fn l2_probe_converges() {
        let (x, y) = toy();
        let cfg = ProbeConfig { l2: 0.1, epochs: 100_000, ..Default::default() };
        let p = train_linear_probe(x.view(), &y, &cfg).unwrap();
        assert!(p.converged);
        assert!(p.epochs_run < cfg.epochs);
    }

    #[test]
    fn probe_errors() {
        let (x, _) = toy();
        assert!(matches!(
            train_linear_probe(x.view(), &[true; 6], &ProbeConfig::default()),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            train_linear_probe(x.view(), &[true, false], &ProbeConfig::default()),
            Err(Error::DimMismatch(_))
        ));
        let bad = ProbeConfig { learning_rate: 0.0, ..Default::default() };
        assert!(train_linear_probe(x.view(), &[true, false, true, false, true, false], &bad).is_err());
    }

    #[test]
    fn decision_ignores_orthogonal_shift() {
        let (x, y) = toy();
        let p = train_linear_probe(x.view(), &y, &ProbeConfig::default()).unwrap();
        let ortho = array![-p.weights[1], p.weights[0]];
        let v = array![0.3, -0.7];
        assert_abs_diff_eq!(p.decision(v.view()), p.decision((&v + &(&ortho * 5.0)).view()), epsilon = 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let (x, y) = toy();
        let p = train_linear_probe(x.view(), &y, &ProbeConfig::default()).unwrap().with_classes(3, 7);
        let (d, m) = p.to_dump().unwrap();
        let back = LinearProbe::from_dump(&TensorDump::from_bytes(&d.to_bytes()).unwrap(), &m).unwrap();
        assert_eq!(back.classes, (3, 7));
        for (a, b) in p.weights.iter().zip(&back.weights) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5 * a.abs().max(1.0));
        }
    }

    fn act(v: f64) -> ActivationVector {
        if v > 0.0 {
            ActivationVector { indices: vec![4], values: vec![v], d_sae: 8 }
        } else {
            ActivationVector::empty(8)
        }
    }

    #[test]
    fn direction_estimation() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [6.0, 1.0], [100.0, 100.0]];
        let acts = vec![act(0.0), act(0.5), act(3.0), act(4.0), act(5.0)];
        let filter = [true, true, true, true, false];
        let d = estimate_direction(x.view(), &acts, 4, 1.0, 2.5, Some(&filter)).unwrap();
        assert_eq!(d.values, vec![5.0, 0.0]);
        assert_eq!(d.set_sizes, (2, 2));
        assert!(matches!(
            estimate_direction(x.view(), &acts, 4, 1.0, 50.0, None),
            Err(Error::EmptySet(_))
        ));
        let same = estimate_direction(x.view(), &acts, 4, 10.0, -1.0, None).unwrap();
        assert!(same.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direction_recovers_collinear_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = array![0.5, -0.5, 0.5, 0.5, 0.0, 0.0];
        let n = 2000;
        let mut x = Array2::zeros((n, 6));
        let mut acts = Vec::new();
        for i in 0..n {
            let a: f64 = rand::Rng::random_range(&mut rng, 0.0..4.0);
            let noise = Array1::from_shape_fn(6, |_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            x.row_mut(i).assign(&(&dir * a + noise));
            acts.push(act(a));
        }
        let d = estimate_direction(x.view(), &acts, 4, 1.0, 2.5, None).unwrap();
        let u = Array1::from(d.values.clone());
        assert!(crate::linalg::cosine(u.view(), dir.view()).unwrap() >= 0.99);
    }

    #[test]
    fn latent_augmentation() {
        let d = LatentDirection {
            values: vec![1.0, 2.0],
            source_component: 0,
            thresholds: (1.0, 2.5),
            set_sizes: (1, 1),
            high_mean: vec![],
            low_mean: vec![],
        };
        let x = array![0.3, 0.4];
        assert_eq!(augment_latent(x.view(), &d, DEFAULT_ALPHA, 0.5).unwrap(), x);
        assert_eq!(augment_latent(x.view(), &d, 0.0, 0.9).unwrap(), x);
        assert_eq!(augment_latent(x.view(), &d, 1.0, 1.0).unwrap(), array![0.8, 1.4]);
        assert!(matches!(augment_latent(array![1.0].view(), &d, 0.5, 0.1), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn red_examples() {
        assert_eq!(augment_red(&[0.5], 0.0).unwrap(), vec![0.5]);
        assert_abs_diff_eq!(augment_red(&[0.5], 0.2).unwrap()[0], 0.4, epsilon = 1e-15);
        assert_eq!(augment_red(&[0.6], -1.0).unwrap(), vec![1.0]);
        assert!(matches!(augment_red(&[1.2], 0.1), Err(Error::OutOfRangeInput(_))));
        let img = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| 0.1 * (c + i + j) as f64 + 0.1);
        let out = augment_red_channel(&img, -1.0).unwrap();
        assert_eq!(out.index_axis(Axis(0), 1), img.index_axis(Axis(0), 1));
        assert_eq!(out.index_axis(Axis(0), 2), img.index_axis(Axis(0), 2));
        assert_abs_diff_eq!(out[[0, 0, 0]], 0.2, epsilon = 1e-15);
        assert!(augment_red_channel(&Array3::zeros((4, 1, 1)), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn red_stays_in_range(r in proptest::collection::vec(0.0..=1.0f64, 1..20), delta in -3.0..3.0f64) {
            let out = augment_red(&r, delta).unwrap();
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(augment_red(&r, 0.0).unwrap(), r);
        }
    }

    #[test]
    fn sweep_reports_degradation() {
        let (x, y) = toy();
        let p = train_linear_probe(x.view(), &y, &ProbeConfig::default()).unwrap();
        let shifted = &x - &array![5.0, 5.0];
        let inputs = vec![
            SweepInput { delta: 0.0, embeddings: x.clone(), labels: y.clone() },
            SweepInput { delta: 1.0, embeddings: shifted, labels: y.clone() },
        ];
        let rows = robustness_sweep(&p, &inputs).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[..2].iter().all(|r| r.degradation == 0.0 && r.accuracy == 1.0 && r.sem == 0.0));
        let pos = rows.iter().find(|r| r.delta == 1.0 && r.positive).unwrap();
        assert!(pos.degradation > 0.0);
        assert!(matches!(robustness_sweep(&p, &inputs[1..]), Err(Error::MissingBaseline)));
        let mut csv = Vec::new();
        write_sweep_csv(&rows, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }
}
