//! Top-k sparse autoencoder over class-token embeddings.
//!
//! `x ~ sum_i a_i v_i + b_dec` with at most `k` nonzero, nonnegative `a_i`
//! and unit-norm dictionary rows `v_i`. Training minimizes the squared
//! distance between the normalized embedding and its normalized
//! reconstruction, optionally averaged over spatial tokens as well.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::{Tensor, TensorDump};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::store::{EmbeddingDataset, Manifest, SaeMeta};

/// Tolerance on `| ||v_i|| - 1 |` for a valid dictionary.
pub const UNIT_NORM_TOL: f64 = 1e-6;
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// `d_pre x d_sae`
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `d_sae x d_pre`, one unit-norm dictionary direction per row.
    pub decoder: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub k: usize,
}

/// Sparse nonnegative code: strictly increasing indices, positive values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationVector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub d_sae: usize,
}

impl ActivationVector {
    pub fn empty(d_sae: usize) -> Self {
        Self { indices: Vec::new(), values: Vec::new(), d_sae }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Activation of component `j`, zero when inactive.
    pub fn get(&self, j: usize) -> f64 {
        self.indices.binary_search(&j).map(|p| self.values[p]).unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Same code with every activation multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
            d_sae: self.d_sae,
        }
    }
}

/// An embedding split exactly into dictionary terms, the decoder bias and the
/// reconstruction error: `x = sum_i a_i v_i + b_dec + error`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub x: Array1<f64>,
    pub activations: ActivationVector,
    pub error: Array1<f64>,
}

impl SaeModel {
    pub fn new(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        decoder: Array2<f64>,
        b_dec: Array1<f64>,
        k: usize,
    ) -> Result<Self> {
        let (d_pre, d_sae) = w_enc.dim();
        if b_enc.len() != d_sae || decoder.dim() != (d_sae, d_pre) || b_dec.len() != d_pre {
            return Err(Error::DimMismatch(format!(
                "w_enc {:?}, b_enc {}, decoder {:?}, b_dec {}",
                w_enc.dim(),
                b_enc.len(),
                decoder.dim(),
                b_dec.len()
            )));
        }
        if k == 0 || k > d_sae {
            return Err(Error::InvalidConfig(format!("k = {k} must be in 1..={d_sae}")));
        }
        let all = w_enc.iter().chain(b_enc.iter()).chain(decoder.iter()).chain(b_dec.iter());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("sae".into()));
        }
        let model = Self { w_enc, b_enc, decoder, b_dec, k };
        let dev = model.max_norm_deviation();
        if dev > UNIT_NORM_TOL {
            return Err(Error::InvalidConfig(format!(
                "decoder rows must have unit norm (max deviation {dev:e})"
            )));
        }
        Ok(model)
    }

    pub fn d_pre(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn d_sae(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn atom(&self, j: usize) -> ArrayView1<'_, f64> {
        self.decoder.row(j)
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.decoder
            .rows()
            .into_iter()
            .map(|r| (norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn check_input(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.d_pre() {
            return Err(Error::DimMismatch(format!(
                "embedding has length {}, SAE expects {}",
                x.len(),
                self.d_pre()
            )));
        }
        Ok(())
    }

    pub fn pre_activations(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(x.dot(&self.w_enc) + &self.b_enc)
    }

    pub fn encode(&self, x: ArrayView1<'_, f64>) -> Result<ActivationVector> {
        let pre = self.pre_activations(x)?;
        Ok(top_k_rectified(pre.view(), self.k))
    }

    pub fn decode(&self, a: &ActivationVector) -> Result<Array1<f64>> {
        let mut out = self.b_dec.clone();
        for (j, v) in a.iter() {
            if j >= self.d_sae() {
                return Err(Error::IndexOutOfRange { index: j, width: self.d_sae() });
            }
            out.scaled_add(v, &self.decoder.row(j));
        }
        Ok(out)
    }

    pub fn reconstruction_error(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let a = self.encode(x)?;
        Ok(&x - &self.decode(&a)?)
    }

    pub fn decompose(&self, x: ArrayView1<'_, f64>) -> Result<Decomposition> {
        let activations = self.encode(x)?;
        let error = &x - &self.decode(&activations)?;
        Ok(Decomposition { x: x.to_owned(), activations, error })
    }

    pub fn to_dump(&self) -> Result<(TensorDump, Manifest)> {
        let mut d = TensorDump::new();
        d.insert("w_enc", Tensor::from_matrix(self.w_enc.view())?)?;
        d.insert("b_enc", Tensor::from_vector(self.b_enc.view())?)?;
        d.insert("decoder", Tensor::from_matrix(self.decoder.view())?)?;
        d.insert("b_dec", Tensor::from_vector(self.b_dec.view())?)?;
        let mut m = Manifest::new();
        m.sae = Some(SaeMeta { k: self.k, d_sae: self.d_sae() });
        Ok((d, m))
    }

    pub fn from_dump(dump: &TensorDump, manifest: &Manifest) -> Result<Self> {
        let meta = manifest
            .sae
            .ok_or_else(|| Error::InvalidManifest("manifest has no `sae` section".into()))?;
        let w_enc = dump.get("w_enc")?.to_matrix("w_enc")?;
        let b_enc = dump.get("b_enc")?.to_vector("b_enc")?;
        let mut decoder = dump.get("decoder")?.to_matrix("decoder")?;
        let b_dec = dump.get("b_dec")?.to_vector("b_dec")?;
        if decoder.nrows() != meta.d_sae {
            return Err(Error::DimMismatch(format!(
                "manifest d_sae {} vs decoder rows {}",
                meta.d_sae,
                decoder.nrows()
            )));
        }
        // f32 storage perturbs the norms at the 1e-7 level; restore them.
        normalize_rows(&mut decoder);
        Self::new(w_enc, b_enc, decoder, b_dec, meta.k)
    }

    /// Principal-direction basis with the same sparse coding rule: rows are
    /// the leading eigenvectors of the embedding covariance, codes are the
    /// top-k positive projections of the centered embedding.
    pub fn from_pca(data: ArrayView2<'_, f64>, n_components: usize, k: usize) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 {
            return Err(Error::TooFewSamples { need: 2, got: n });
        }
        if n_components == 0 || n_components > d {
            return Err(Error::InvalidConfig(format!("n_components must be in 1..={d}")));
        }
        let mean = data.mean_axis(Axis(0)).expect("nonempty");
        let centered = &data - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let mut decoder = Array2::zeros((n_components, d));
        for (row, &c) in order.iter().take(n_components).enumerate() {
            let col = eig.eigenvectors.column(c);
            let pivot = (0..d)
                .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap_or(Ordering::Equal))
                .expect("d > 0");
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                decoder[[row, i]] = sign * col[i];
            }
        }
        normalize_rows(&mut decoder);
        let w_enc = decoder.t().to_owned();
        let b_enc = -mean.dot(&w_enc);
        Self::new(w_enc, b_enc, decoder, mean, k.min(n_components))
    }
}

/// Rectify, then keep the `k` largest positive values. Ties go to the lower
/// index.
pub fn top_k_rectified(pre: ArrayView1<'_, f64>, k: usize) -> ActivationVector {
    let d_sae = pre.len();
    let mut cand: Vec<(usize, f64)> = pre.iter().copied().enumerate().filter(|&(_, v)| v > 0.0).collect();
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
    };
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, by_rank);
        cand.truncate(k);
    }
    cand.sort_unstable_by_key(|&(i, _)| i);
    ActivationVector {
        indices: cand.iter().map(|&(i, _)| i).collect(),
        values: cand.iter().map(|&(_, v)| v).collect(),
        d_sae,
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = norm(row.view());
        if n > 0.0 {
            row /= n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeTrainConfig {
    pub d_sae: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 1-based epochs after which the learning rate is divided by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epoch_subsample_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub include_spatial_tokens: bool,
}

impl SaeTrainConfig {
    /// ImageNet schedule: lr 1e-6 for 30 epochs, /10 after epochs 24 and 28,
    /// 10% of the training set per epoch.
    pub fn imagenet(d_sae: usize, k: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            d_sae,
            k,
            learning_rate: 1e-6,
            epochs: 30,
            decay_epochs: vec![24, 28],
            decay_factor: 10.0,
            epoch_subsample_fraction: 0.1,
            batch_size,
            seed,
            weight_decay: 0.0,
            include_spatial_tokens: false,
        }
    }

    /// Medical schedule: lr 5e-5 for 25 epochs, decayed after epochs 17 and 23.
    pub fn medical(d_sae: usize, k: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 25,
            decay_epochs: vec![17, 23],
            epoch_subsample_fraction: 1.0,
            ..Self::imagenet(d_sae, k, batch_size, seed)
        }
    }

    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.decay_epochs.iter().any(|&e| e == 0 || e > self.epochs) {
            return bad(format!("decay_epochs {:?} outside 1..={}", self.decay_epochs, self.epochs));
        }
        if !(self.decay_factor > 0.0) {
            return bad("decay_factor must be > 0".into());
        }
        if !(self.epoch_subsample_fraction > 0.0 && self.epoch_subsample_fraction <= 1.0) {
            return bad("epoch_subsample_fraction must be in (0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.k == 0 || self.k > self.d_sae {
            return bad(format!("k = {} must be in 1..={}", self.k, self.d_sae));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        Ok(())
    }

    /// Learning rate in effect during the 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e < epoch).count();
        self.learning_rate / self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SaeModel,
    pub history: Vec<EpochLog>,
}

/// Normalized reconstruction loss of a single token.
pub fn token_loss(model: &SaeModel, x: ArrayView1<'_, f64>) -> Result<f64> {
    let nx = norm(x);
    if nx == 0.0 {
        return Err(Error::DegenerateBatch(0));
    }
    let a = model.encode(x)?;
    let r = model.decode(&a)?;
    let nr = (r.dot(&r) + NORM_GUARD).sqrt();
    let diff = &x / nx - &r / nr;
    Ok(diff.dot(&diff))
}

struct TokenGrad {
    loss: f64,
    weight: f64,
    x: Array1<f64>,
    active: ActivationVector,
    d_pre_act: Vec<f64>,
    d_recon: Array1<f64>,
}

fn token_grad(model: &SaeModel, x: ArrayView1<'_, f64>, weight: f64) -> TokenGrad {
    let a = top_k_rectified((x.dot(&model.w_enc) + &model.b_enc).view(), model.k);
    let mut r = model.b_dec.clone();
    for (j, v) in a.iter() {
        r.scaled_add(v, &model.decoder.row(j));
    }
    let nx = norm(x);
    let nr = (r.dot(&r) + NORM_GUARD).sqrt();
    let u = &x / nx;
    let g = &r / nr;
    let diff = &g - &u;
    let loss = diff.dot(&diff);
    let delta = diff * 2.0;
    let d_recon = &delta / nr - &r * (r.dot(&delta) / (nr * nr * nr));
    let d_pre_act = a.indices.iter().map(|&j| model.decoder.row(j).dot(&d_recon)).collect();
    TokenGrad { loss, weight, x: x.to_owned(), active: a, d_pre_act, d_recon }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Decoupled weight decay followed by a bias-corrected Adam step.
    fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
        lr: f64,
        weight_decay: f64,
        t: i32,
    ) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for (((p, &g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *p -= lr * weight_decay * *p;
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

const INIT_POOL: usize = 2048;

/// Farthest-point selection over a random pool of normalized embeddings:
/// each pick minimizes its largest |cosine| to the rows chosen so far.
/// Returns at most `min(m, pool / 2)` sample indices.
fn spread_samples(x: ArrayView2<'_, f64>, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pool = rand::seq::index::sample(rng, x.nrows(), x.nrows().min(INIT_POOL)).into_vec();
    let unit: Vec<Array1<f64>> = pool.iter().map(|&i| &x.row(i) / norm(x.row(i))).collect();
    let want = m.min(pool.len() / 2).max(1);
    let mut taken = vec![false; pool.len()];
    let mut closest = vec![f64::NEG_INFINITY; pool.len()];
    let mut chosen = vec![0];
    taken[0] = true;
    while chosen.len() < want {
        let last = &unit[chosen[chosen.len() - 1]];
        for (c, u) in closest.iter_mut().zip(&unit) {
            *c = c.max(u.dot(last).abs());
        }
        let next = (0..pool.len())
            .filter(|&p| !taken[p])
            .min_by(|&a, &b| closest[a].total_cmp(&closest[b]))
            .expect("pool larger than selection");
        taken[next] = true;
        chosen.push(next);
    }
    chosen.into_iter().map(|p| pool[p]).collect()
}

/// Trains a top-k SAE with AdamW, projecting decoder rows back to unit norm
/// after every step. Deterministic for a fixed `cfg.seed`.
pub fn train_sae(data: &EmbeddingDataset, cfg: &SaeTrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if n < cfg.batch_size {
        return Err(Error::TooFewSamples { need: cfg.batch_size, got: n });
    }
    let x = &data.cls_embeddings;
    if let Some(i) = (0..n).find(|&i| norm(x.row(i)) == 0.0) {
        return Err(Error::DegenerateBatch(i));
    }
    let spatial = match (&data.spatial_embeddings, cfg.include_spatial_tokens) {
        (Some(sp), true) => {
            for i in 0..n {
                for t in 0..sp.dim().1 {
                    if norm(sp.slice(s![i, t, ..])) == 0.0 {
                        return Err(Error::DegenerateBatch(i));
                    }
                }
            }
            Some(sp)
        }
        _ => None,
    };

    let d_pre = data.d_pre();
    let d_sae = cfg.d_sae;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Spread-out training embeddings seed the dictionary so that no row starts
    // in a region the data never reaches; leftover rows stay Gaussian.
    let mut decoder = Array2::from_shape_fn((d_sae, d_pre), |_| StandardNormal.sample(&mut rng));
    for (r, i) in spread_samples(x.view(), d_sae, &mut rng).into_iter().enumerate() {
        decoder.row_mut(r).assign(&x.row(i));
    }
    normalize_rows(&mut decoder);
    let mut model = SaeModel {
        w_enc: decoder.t().to_owned(),
        b_enc: Array1::zeros(d_sae),
        decoder,
        b_dec: x.mean_axis(Axis(0)).expect("n > 0"),
        k: cfg.k,
    };

    let mut opt_w_enc = Adam::new(d_pre * d_sae);
    let mut opt_b_enc = Adam::new(d_sae);
    let mut opt_dec = Adam::new(d_sae * d_pre);
    let mut opt_b_dec = Adam::new(d_pre);
    let mut step = 0i32;

    let per_epoch = ((cfg.epoch_subsample_fraction * n as f64).round() as usize).clamp(cfg.batch_size.min(n), n);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let chosen = &order[..per_epoch];
        let mut epoch_loss = 0.0;
        for batch in chosen.chunks(cfg.batch_size) {
            let b = batch.len() as f64;
            let tokens: Vec<(usize, Option<usize>, f64)> = batch
                .iter()
                .flat_map(|&i| {
                    let cls = std::iter::once((i, None, 1.0 / b));
                    let sp: Vec<_> = match spatial {
                        Some(sp) => {
                            let m = sp.dim().1;
                            (0..m).map(|t| (i, Some(t), 1.0 / (b * m as f64))).collect()
                        }
                        None => Vec::new(),
                    };
                    cls.chain(sp)
                })
                .collect();
            let grads: Vec<TokenGrad> = tokens
                .par_iter()
                .map(|&(i, tok, w)| match (tok, spatial) {
                    (Some(t), Some(sp)) => token_grad(&model, sp.slice(s![i, t, ..]), w),
                    _ => token_grad(&model, x.row(i), w),
                })
                .collect();

            let mut g_w_enc = Array2::<f64>::zeros((d_pre, d_sae));
            let mut g_b_enc = Array1::<f64>::zeros(d_sae);
            let mut g_dec = Array2::<f64>::zeros((d_sae, d_pre));
            let mut g_b_dec = Array1::<f64>::zeros(d_pre);
            for g in &grads {
                epoch_loss += g.loss * g.weight * b;
                g_b_dec.scaled_add(g.weight, &g.d_recon);
                for ((&j, &a), &dp) in g.active.indices.iter().zip(&g.active.values).zip(&g.d_pre_act) {
                    g_dec.row_mut(j).scaled_add(g.weight * a, &g.d_recon);
                    g_b_enc[j] += g.weight * dp;
                    g_w_enc.column_mut(j).scaled_add(g.weight * dp, &g.x);
                }
            }

            step += 1;
            let wd = cfg.weight_decay;
            opt_w_enc.step(model.w_enc.iter_mut(), g_w_enc.iter(), lr, wd, step);
            opt_b_enc.step(model.b_enc.iter_mut(), g_b_enc.iter(), lr, wd, step);
            opt_dec.step(model.decoder.iter_mut(), g_dec.iter(), lr, wd, step);
            opt_b_dec.step(model.b_dec.iter_mut(), g_b_dec.iter(), lr, wd, step);
            normalize_rows(&mut model.decoder);
        }
        let mean_loss = epoch_loss / per_epoch as f64;
        log::debug!("sae epoch {epoch}: lr {lr:e}, loss {mean_loss:.6}");
        history.push(EpochLog { epoch, learning_rate: lr, mean_loss, samples: per_epoch });
    }
    Ok(TrainOutcome { model, history })
}
