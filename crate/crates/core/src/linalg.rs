//! Small vector helpers shared by the numerical modules.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

pub fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn mean(v: ArrayView1<'_, f64>) -> f64 {
    v.sum() / v.len() as f64
}

pub fn centered(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let mu = mean(v);
    v.mapv(|x| x - mu)
}

/// Cosine similarity, clamped into `[-1, 1]` against rounding.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn column_mean(m: ArrayView2<'_, f64>, rows: &[usize]) -> Array1<f64> {
    let mut acc = Array1::zeros(m.ncols());
    for &r in rows {
        acc += &m.row(r);
    }
    acc / rows.len() as f64
}

/// Pearson correlation. Fails when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Standard error of the mean with sample standard deviation.
pub fn sem(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    mean_std(values).1 / (values.len() as f64).sqrt()
}
