//! The fixed prediction head applied to the class token: LayerNorm in the
//! `(x - mean) / ||x - mean||` form, linear projection, cosine similarity.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{centered, cosine, norm};

/// LayerNorm scale and shift plus the projection into the joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// `d_pre x d_post`
    pub w_proj: Array2<f64>,
}

impl HeadParams {
    pub fn new(gamma: Array1<f64>, beta: Array1<f64>, w_proj: Array2<f64>) -> Result<Self> {
        if gamma.len() != w_proj.nrows() {
            return Err(Error::DimMismatch(format!(
                "gamma has length {} but w_proj has {} rows",
                gamma.len(),
                w_proj.nrows()
            )));
        }
        if beta.len() != gamma.len() {
            return Err(Error::DimMismatch(format!(
                "beta has length {}, gamma {}",
                beta.len(),
                gamma.len()
            )));
        }
        let finite = gamma.iter().chain(beta.iter()).chain(w_proj.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFiniteValue("head".into()));
        }
        Ok(Self { gamma, beta, w_proj })
    }

    pub fn d_pre(&self) -> usize {
        self.gamma.len()
    }

    pub fn d_post(&self) -> usize {
        self.w_proj.ncols()
    }

    /// Copy of this head with the LayerNorm shift removed.
    pub fn without_beta(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: Array1::zeros(self.gamma.len()),
            w_proj: self.w_proj.clone(),
        }
    }

    fn check_dim(&self, v: ArrayView1<'_, f64>) -> Result<()> {
        if v.len() != self.d_pre() {
            return Err(Error::DimMismatch(format!(
                "vector has length {}, head expects {}",
                v.len(),
                self.d_pre()
            )));
        }
        Ok(())
    }

    pub fn layernorm(&self, v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(v)?;
        let c = centered(v);
        let n = norm(c.view());
        if n == 0.0 {
            return Err(Error::DegenerateInput("constant vector has no LayerNorm direction"));
        }
        Ok(&c / n * &self.gamma + &self.beta)
    }

    pub fn project(&self, x_cls: ArrayView1<'_, f64>) -> Result<ProjectedEmbedding> {
        let ln = self.layernorm(x_cls)?;
        Ok(ProjectedEmbedding {
            values: ln.dot(&self.w_proj),
            source: EmbeddingSource::Sample,
        })
    }

    /// Projected embedding of a single dictionary direction (or of the bias /
    /// error pseudo-components) taken as if it alone made up the class token.
    pub fn project_component(&self, v: ArrayView1<'_, f64>) -> Result<ProjectedEmbedding> {
        let ln = self.layernorm(v)?;
        Ok(ProjectedEmbedding {
            values: ln.dot(&self.w_proj),
            source: EmbeddingSource::Component,
        })
    }

    /// Cosine output for a raw class token against a text embedding.
    pub fn output(&self, x_cls: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Result<f64> {
        predict(&self.project(x_cls)?, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Sample,
    Component,
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEmbedding {
    pub values: Array1<f64>,
    pub source: EmbeddingSource,
}

impl ProjectedEmbedding {
    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.values.view()
    }
}

/// Cosine similarity between a projected image embedding and a text embedding.
pub fn predict(x: &ProjectedEmbedding, t: ArrayView1<'_, f64>) -> Result<f64> {
    if x.values.len() != t.len() {
        return Err(Error::DimMismatch(format!(
            "projected embedding has length {}, text {}",
            x.values.len(),
            t.len()
        )));
    }
    cosine(x.view(), t)
}
