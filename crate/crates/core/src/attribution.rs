//! Instance-wise attribution of SAE components to an image-text cosine score.
//!
//! An embedding is written exactly as `x = sum_i a_i v_i + b + eps`, with the
//! decoder bias `b` and the reconstruction error `eps` treated as two extra
//! components of fixed activation 1. The output `y` is the cosine between
//! `LayerNorm(x) W_proj` and a text embedding `t`; the attribution of a
//! component is `a_j * dy/da_j`.
//!
//! The exact route pushes the direction `v_j` through the chain rule:
//! LayerNorm directional derivative, projection, cosine gradient. Because `y`
//! is invariant to scaling `x`, all scores of one record (pseudo-components
//! included) sum to zero.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dump::{Tensor, TensorDump};
use crate::error::{Error, Result};
use crate::head::{predict, HeadParams};
use crate::linalg::{centered, cosine, norm};
use crate::sae::{Decomposition, SaeModel};

/// Quadrature steps used for integrated gradients in the faithfulness runs.
pub const DEFAULT_IG_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ActXGradExact,
    ClosedForm,
    LogitLens,
    ActXLogitLens,
    Energy,
    IntegratedGradients,
    Random,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ActXGradExact,
        Method::ClosedForm,
        Method::LogitLens,
        Method::ActXLogitLens,
        Method::Energy,
        Method::IntegratedGradients,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ActXGradExact => "act_x_grad_exact",
            Method::ClosedForm => "closed_form",
            Method::LogitLens => "logit_lens",
            Method::ActXLogitLens => "act_x_logit_lens",
            Method::Energy => "energy",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "act_x_grad_exact" | "act_x_grad" | "exact" => Method::ActXGradExact,
            "closed_form" => Method::ClosedForm,
            "logit_lens" => Method::LogitLens,
            "act_x_logit_lens" => Method::ActXLogitLens,
            "energy" => Method::Energy,
            "integrated_gradients" | "ig" => Method::IntegratedGradients,
            "random" => Method::Random,
            _ => return Err(Error::UnknownMethod(s.to_string())),
        })
    }
}

/// A component of the exact decomposition of an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRef {
    Latent(usize),
    Bias,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub sample_id: String,
    pub prompt_index: usize,
    pub method: Method,
    /// `(component, score)` for active components, sorted by component id.
    pub scores: Vec<(usize, f64)>,
    pub pseudo_bias_score: f64,
    pub pseudo_error_score: f64,
    pub output_y: f64,
}

impl AttributionRecord {
    fn new(method: Method, scores: Vec<(usize, f64)>, bias: f64, error: f64, y: f64) -> Self {
        Self {
            sample_id: String::new(),
            prompt_index: 0,
            method,
            scores,
            pseudo_bias_score: bias,
            pseudo_error_score: error,
            output_y: y,
        }
    }

    pub fn with_ids(mut self, sample_id: impl Into<String>, prompt_index: usize) -> Self {
        self.sample_id = sample_id.into();
        self.prompt_index = prompt_index;
        self
    }

    /// Score of latent `j`; inactive components score zero.
    pub fn score(&self, j: usize) -> f64 {
        self.scores
            .binary_search_by_key(&j, |&(i, _)| i)
            .map(|p| self.scores[p].1)
            .unwrap_or(0.0)
    }

    /// Sum over latents and both pseudo-components.
    pub fn total(&self) -> f64 {
        self.scores.iter().map(|&(_, s)| s).sum::<f64>() + self.pseudo_bias_score + self.pseudo_error_score
    }

    /// Active latents ordered by descending score, ties by component id.
    pub fn ranking(&self) -> Vec<usize> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        s.into_iter().map(|(j, _)| j).collect()
    }
}

/// The output `y(x, t)` and its gradient with respect to the pre-LayerNorm
/// embedding, arranged so any directional derivative costs one pass over
/// `d_pre`.
#[derive(Debug, Clone)]
pub struct OutputGradient {
    y: f64,
    centered: Array1<f64>,
    centered_norm_sq: f64,
    /// `gamma ∘ (W_proj · grad_y)`
    weighted: Array1<f64>,
    weighted_sum: f64,
    weighted_dot_centered: f64,
}

impl OutputGradient {
    pub fn at(head: &HeadParams, x: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Result<Self> {
        let projected = head.project(x)?;
        let y = predict(&projected, t)?;
        let xp = projected.values;
        let xp_norm = norm(xp.view());
        let t_norm = norm(t);
        // d y / d xp = (t/|t| - y xp/|xp|) / |xp|
        let grad_post = (&t / t_norm - &xp * (y / xp_norm)) / xp_norm;
        let weighted = head.w_proj.dot(&grad_post) * &head.gamma;
        let c = centered(x);
        let centered_norm_sq = c.dot(&c);
        Ok(Self {
            y,
            weighted_sum: weighted.sum(),
            weighted_dot_centered: weighted.dot(&c),
            centered: c,
            centered_norm_sq,
            weighted,
        })
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// `d/ds y(x + s v)` at `s = 0`.
    pub fn directional(&self, v: ArrayView1<'_, f64>) -> f64 {
        let mu_v = v.sum() / v.len() as f64;
        // centered(v) = v - mu_v; the centered x sums to zero so c·v = c·centered(v)
        let w_dot_u = self.weighted.dot(&v) - mu_v * self.weighted_sum;
        let c_dot_u = self.centered.dot(&v);
        let c_norm = self.centered_norm_sq.sqrt();
        (w_dot_u - self.weighted_dot_centered * c_dot_u / self.centered_norm_sq) / c_norm
    }
}

fn check_decomposition(model: &SaeModel, dec: &Decomposition) -> Result<()> {
    if dec.activations.d_sae != model.d_sae() || dec.x.len() != model.d_pre() || dec.error.len() != model.d_pre() {
        return Err(Error::NotDecomposed(format!(
            "decomposition has width {} and length {}, model {} x {}",
            dec.activations.d_sae,
            dec.x.len(),
            model.d_sae(),
            model.d_pre()
        )));
    }
    if let Some(&j) = dec.activations.indices.last() {
        if j >= model.d_sae() {
            return Err(Error::IndexOutOfRange { index: j, width: model.d_sae() });
        }
    }
    Ok(())
}

/// Cosine between a component's projected direction and `t`, independent
/// of its activation.
pub fn logit_lens(head: &HeadParams, v: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Result<f64> {
    predict(&head.project_component(v)?, t)
}

fn logit_lens_or_zero(head: &HeadParams, v: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Result<f64> {
    match logit_lens(head, v, t) {
        Err(Error::DegenerateInput(_)) | Err(Error::ZeroNorm) => Ok(0.0),
        other => other,
    }
}

/// Exact activation-times-gradient scores.
pub fn attribute_exact(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ArrayView1<'_, f64>,
) -> Result<AttributionRecord> {
    check_decomposition(model, dec)?;
    let grad = OutputGradient::at(head, dec.x.view(), t)?;
    let scores = dec
        .activations
        .iter()
        .map(|(j, a)| (j, a * grad.directional(model.atom(j))))
        .collect();
    Ok(AttributionRecord::new(
        Method::ActXGradExact,
        scores,
        grad.directional(model.b_dec.view()),
        grad.directional(dec.error.view()),
        grad.y(),
    ))
}

/// Closed-form score derived with the LayerNorm shift set to zero:
///
/// `a_j (|v'_j| / |x'|) (|v_j - mean| / |x - mean|) (LL_j - y cos(v'_j, x'))`
///
/// where primes denote projected embeddings and every projection (and `y`
/// inside the bracket) uses `beta = 0`.
pub fn attribute_closed_form(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ArrayView1<'_, f64>,
) -> Result<AttributionRecord> {
    check_decomposition(model, dec)?;
    let head0 = head.without_beta();
    let xp = head0.project(dec.x.view())?;
    let xp_norm = norm(xp.view());
    let y0 = predict(&xp, t)?;
    let x_centered_norm = norm(centered(dec.x.view()).view());

    let score = |a: f64, v: ArrayView1<'_, f64>| -> Result<f64> {
        let u_norm = norm(centered(v).view());
        if u_norm == 0.0 || a == 0.0 {
            return Ok(0.0);
        }
        let vp = head0.project_component(v)?;
        let vp_norm = norm(vp.view());
        if vp_norm == 0.0 {
            return Ok(0.0);
        }
        let lens = cosine(vp.view(), t)?;
        let align = cosine(vp.view(), xp.view())?;
        Ok(a * (vp_norm / xp_norm) * (u_norm / x_centered_norm) * (lens - y0 * align))
    };

    let scores = dec
        .activations
        .iter()
        .map(|(j, a)| Ok((j, score(a, model.atom(j))?)))
        .collect::<Result<Vec<_>>>()?;
    let bias = score(1.0, model.b_dec.view())?;
    let error = score(1.0, dec.error.view())?;
    let y = head.output(dec.x.view(), t)?;
    Ok(AttributionRecord::new(Method::ClosedForm, scores, bias, error, y))
}

/// Activation-only and alignment-only baselines, plus a seeded random
/// ordering of the active latents.
pub fn attribute_baseline(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ArrayView1<'_, f64>,
    method: Method,
    seed: u64,
) -> Result<AttributionRecord> {
    check_decomposition(model, dec)?;
    let y = head.output(dec.x.view(), t)?;
    let acts = &dec.activations;
    let (scores, bias, error) = match method {
        Method::Energy => (
            acts.iter().map(|(j, a)| (j, a * norm(model.atom(j)))).collect(),
            norm(model.b_dec.view()),
            norm(dec.error.view()),
        ),
        Method::LogitLens | Method::ActXLogitLens => {
            let scale = |a: f64| if method == Method::LogitLens { 1.0 } else { a };
            let scores = acts
                .iter()
                .map(|(j, a)| Ok((j, scale(a) * logit_lens(head, model.atom(j), t)?)))
                .collect::<Result<Vec<_>>>()?;
            (
                scores,
                logit_lens_or_zero(head, model.b_dec.view(), t)?,
                logit_lens_or_zero(head, dec.error.view(), t)?,
            )
        }
        Method::Random => {
            let mut order: Vec<usize> = (0..acts.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = acts.len();
            let mut scores = vec![(0usize, 0.0); n];
            for (rank, &pos) in order.iter().enumerate() {
                scores[pos] = (acts.indices[pos], (n - rank) as f64);
            }
            (scores, 0.0, 0.0)
        }
        other => return Err(Error::UnknownMethod(format!("{other} is not a baseline"))),
    };
    Ok(AttributionRecord::new(method, scores, bias, error, y))
}

/// Integrated gradients from the all-latents-off point `b + eps` to `x`,
/// midpoint rule with `steps` nodes. Bias and error lie on both endpoints
/// and receive zero score.
pub fn attribute_integrated_gradients(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ArrayView1<'_, f64>,
    steps: usize,
) -> Result<AttributionRecord> {
    check_decomposition(model, dec)?;
    if steps == 0 {
        return Err(Error::InvalidConfig("integrated gradients needs steps >= 1".into()));
    }
    let latent_sum = model.decode(&dec.activations)? - &model.b_dec;
    let mut acc = vec![0.0; dec.activations.len()];
    for s in 1..=steps {
        let alpha = (s as f64 - 0.5) / steps as f64;
        let point = &dec.x - &(&latent_sum * (1.0 - alpha));
        let grad = OutputGradient::at(head, point.view(), t)?;
        for (slot, (j, _)) in acc.iter_mut().zip(dec.activations.iter()) {
            *slot += grad.directional(model.atom(j));
        }
    }
    let scores = dec
        .activations
        .iter()
        .zip(acc)
        .map(|((j, a), g)| (j, a * g / steps as f64))
        .collect();
    let y = head.output(dec.x.view(), t)?;
    Ok(AttributionRecord::new(Method::IntegratedGradients, scores, 0.0, 0.0, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodOptions {
    pub ig_steps: usize,
    pub seed: u64,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self { ig_steps: DEFAULT_IG_STEPS, seed: 0 }
    }
}

pub fn attribute(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ArrayView1<'_, f64>,
    method: Method,
    opts: MethodOptions,
) -> Result<AttributionRecord> {
    match method {
        Method::ActXGradExact => attribute_exact(model, head, dec, t),
        Method::ClosedForm => attribute_closed_form(model, head, dec, t),
        Method::IntegratedGradients => attribute_integrated_gradients(model, head, dec, t, opts.ig_steps),
        other => attribute_baseline(model, head, dec, t, other, opts.seed),
    }
}

/// `y(x) - y(x - a_j v_j)`: the exact effect of removing one component from
/// the original embedding.
pub fn deletion_effect(
    model: &SaeModel,
    head: &HeadParams,
    dec: &Decomposition,
    t: ArrayView1<'_, f64>,
    component: ComponentRef,
) -> Result<f64> {
    check_decomposition(model, dec)?;
    let removed: Array1<f64> = match component {
        ComponentRef::Latent(j) => {
            if j >= model.d_sae() {
                return Err(Error::IndexOutOfRange { index: j, width: model.d_sae() });
            }
            let a = dec.activations.get(j);
            if a == 0.0 {
                return Ok(0.0);
            }
            &model.atom(j) * a
        }
        ComponentRef::Bias => model.b_dec.clone(),
        ComponentRef::Error => dec.error.clone(),
    };
    let y = head.output(dec.x.view(), t)?;
    let ablated = &dec.x - &removed;
    Ok(y - head.output(ablated.view(), t)?)
}

pub fn write_jsonl<W: Write>(records: &[AttributionRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Packs records into three tensors: `attr.indices` and `attr.scores`
/// (`N x max_active`, padded with index -1 and score 0) and `attr.meta`
/// (`N x 3`: bias score, error score, output).
pub fn records_to_dump(records: &[AttributionRecord]) -> Result<TensorDump> {
    let n = records.len();
    if n == 0 {
        return Err(Error::EmptySet("attribution records"));
    }
    let width = records.iter().map(|r| r.scores.len()).max().unwrap_or(0).max(1);
    let mut idx = vec![-1.0f32; n * width];
    let mut val = vec![0.0f32; n * width];
    let mut meta = Vec::with_capacity(n * 3);
    for (i, r) in records.iter().enumerate() {
        for (p, &(j, s)) in r.scores.iter().enumerate() {
            idx[i * width + p] = j as f32;
            val[i * width + p] = s as f32;
        }
        meta.extend([r.pseudo_bias_score as f32, r.pseudo_error_score as f32, r.output_y as f32]);
    }
    let mut d = TensorDump::new();
    d.insert("attr.indices", Tensor::new(vec![n, width], idx)?)?;
    d.insert("attr.scores", Tensor::new(vec![n, width], val)?)?;
    d.insert("attr.meta", Tensor::new(vec![n, 3], meta)?)?;
    Ok(d)
}
