//! Mini-batch training with Adam updates.

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{clip_loss_grad, Batch, EncoderParams, TrainConfig};
use crate::error::{Error, Result};
use crate::text::TokenSeq;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: EncoderParams,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Moments {
    fn like(a: &Array2<f64>) -> Self {
        Self {
            m: Array2::zeros(a.dim()),
            v: Array2::zeros(a.dim()),
        }
    }

    fn step(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>, lr_t: f64) {
        Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr_t * *m / (v.sqrt() + EPS);
            });
    }
}

/// Trains `params` on `(features, tokens)` pairs.
///
/// Every epoch shuffles the data with a generator seeded from `cfg.seed`
/// and drops the final incomplete batch.
pub fn train(
    params: &EncoderParams,
    dataset: &[(ndarray::Array1<f64>, TokenSeq)],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutput {
            params: params.clone(),
            loss_trace: Vec::new(),
        });
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "dataset has {} examples, fewer than batch_size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let feature_dim = params.feature_dim();
    if let Some((x, _)) = dataset.iter().find(|(x, _)| x.len() != feature_dim) {
        return Err(Error::DimMismatch {
            expected: feature_dim,
            actual: x.len(),
        });
    }

    let mut p = params.clone();
    let mut mw_img = Moments::like(&p.w_img);
    let mut me_tok = Moments::like(&p.e_tok);
    let mut mw_txt = Moments::like(&p.w_txt);
    let (mut m_tau, mut v_tau) = (0.0, 0.0);
    let mut step = 0i32;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batches = dataset.len() / cfg.batch_size;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let mut images = Array2::zeros((chunk.len(), feature_dim));
            let mut texts = Vec::with_capacity(chunk.len());
            for (row, &k) in chunk.iter().enumerate() {
                images.row_mut(row).assign(&dataset[k].0);
                texts.push(dataset[k].1.clone());
            }
            let batch = Batch::new(images, texts)?;
            let g = clip_loss_grad(&p, &batch)?;
            epoch_loss += g.loss;

            step += 1;
            let bias1 = 1.0 - BETA1.powi(step);
            let bias2 = 1.0 - BETA2.powi(step);
            let lr_t = cfg.learning_rate * bias2.sqrt() / bias1;
            mw_img.step(&mut p.w_img, &g.w_img, lr_t);
            me_tok.step(&mut p.e_tok, &g.e_tok, lr_t);
            mw_txt.step(&mut p.w_txt, &g.w_txt, lr_t);
            if cfg.tau_learnable {
                m_tau = BETA1 * m_tau + (1.0 - BETA1) * g.log_tau;
                v_tau = BETA2 * v_tau + (1.0 - BETA2) * g.log_tau * g.log_tau;
                p.log_tau -= lr_t * m_tau / (v_tau.sqrt() + EPS);
            }
        }
        trace.push(epoch_loss / batches as f64);
    }
    if !p.is_finite() {
        return Err(Error::Config(
            "training diverged to non-finite parameters".into(),
        ));
    }
    Ok(TrainOutput {
        params: p,
        loss_trace: trace,
    })
}

/// Writes `epoch,mean_loss` rows (epochs numbered from 1).
pub fn write_loss_trace(path: impl AsRef<std::path::Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
