//! Symmetric contrastive loss and its analytic gradient.
//!
//! With `S[i][j] = I_i . T_j` and logits `Z = S / tau`:
//!
//! ```text
//! L = 1/N * sum_i [ -log softmax_row_i(Z)[i] - log softmax_col_i(Z)[i] ]
//! ```
//!
//! `dL/dZ = (P + C - 2 Id) / N` where `P` is the row-softmax and `C` the
//! column-softmax of `Z`. The gradient is then pushed through the
//! normalizations and both linear branches.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{EncoderParams, MIN_NORM};
use crate::error::{Error, Result};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::BadTau(tau))
    }
}

/// Loss from a precomputed square similarity matrix.
pub fn clip_loss_from_similarity(s: ArrayView2<f64>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let (n, m) = s.dim();
    if n != m {
        return Err(Error::DimMismatch {
            expected: n,
            actual: m,
        });
    }
    if n == 0 {
        return Err(Error::Config("loss needs at least one pair".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let diag = s[[i, i]] / tau;
        let row = log_sum_exp(s.row(i).iter().map(|v| v / tau));
        let col = log_sum_exp(s.column(i).iter().map(|v| v / tau));
        total += (row - diag) + (col - diag);
    }
    Ok(total / n as f64)
}

/// Loss for `N` image embeddings against `N` text embeddings (rows).
pub fn clip_loss(images: ArrayView2<f64>, texts: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if images.dim() != texts.dim() {
        return Err(Error::DimMismatch {
            expected: images.len(),
            actual: texts.len(),
        });
    }
    clip_loss_from_similarity(images.dot(&texts.t()).view(), tau)
}

/// Gradient of the batch loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_img: Array2<f64>,
    pub e_tok: Array2<f64>,
    pub w_txt: Array2<f64>,
    pub log_tau: f64,
    pub loss: f64,
}

/// Rows of `raw` normalized; returns (normalized, norms).
fn normalize_rows(raw: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| !(*n >= MIN_NORM && n.is_finite())) {
        return Err(Error::ZeroNorm);
    }
    let unit = raw / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Backpropagates through `y = u / |u|` row-wise: `(g - y (y . g)) / |u|`.
fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let y = unit.row(i);
        let proj = y.dot(&grad.row(i));
        row.scaled_add(-proj, &y);
        row /= norms[i];
    }
    out
}

pub fn clip_loss_grad(params: &EncoderParams, batch: &super::Batch) -> Result<Gradients> {
    let n = batch.len();
    if batch.images.ncols() != params.feature_dim() {
        return Err(Error::DimMismatch {
            expected: params.feature_dim(),
            actual: batch.images.ncols(),
        });
    }
    let tau = params.tau();
    check_tau(tau)?;

    // forward
    let u = batch.images.dot(&params.w_img.t());
    let (img, u_norm) = normalize_rows(&u)?;
    let mut mean_emb = Array2::zeros((n, params.embed_dim()));
    for (i, t) in batch.texts.iter().enumerate() {
        mean_emb.row_mut(i).assign(&params.mean_token_embedding(t)?);
    }
    let v = mean_emb.dot(&params.w_txt.t());
    let (txt, v_norm) = normalize_rows(&v)?;
    let z = img.dot(&txt.t()) / tau;

    let mut row_lse = Array1::zeros(n);
    let mut col_lse = Array1::zeros(n);
    for i in 0..n {
        row_lse[i] = log_sum_exp(z.row(i).iter().copied());
        col_lse[i] = log_sum_exp(z.column(i).iter().copied());
    }
    let loss = (0..n)
        .map(|i| row_lse[i] + col_lse[i] - 2.0 * z[[i, i]])
        .sum::<f64>()
        / n as f64;

    // dL/dZ
    let inv_n = 1.0 / n as f64;
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let p = (z[[i, j]] - row_lse[i]).exp();
            let c = (z[[i, j]] - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            g[[i, j]] = (p + c - delta) * inv_n;
        }
    }
    let log_tau = -(&g * &z).sum();
    let ds = g / tau;

    let d_img = ds.dot(&txt);
    let d_txt = ds.t().dot(&img);
    let du = normalize_backward(&img, &u_norm, &d_img);
    let dv = normalize_backward(&txt, &v_norm, &d_txt);

    let w_img = du.t().dot(&batch.images);
    let w_txt = dv.t().dot(&mean_emb);
    let dm = dv.dot(&params.w_txt);
    let mut e_tok = Array2::zeros(params.e_tok.dim());
    for (i, t) in batch.texts.iter().enumerate() {
        let scale = 1.0 / t.len() as f64;
        for &id in t.ids() {
            e_tok.row_mut(id).scaled_add(scale, &dm.row(i));
        }
    }

    Ok(Gradients {
        w_img,
        e_tok,
        w_txt,
        log_tau,
        loss,
    })
}
