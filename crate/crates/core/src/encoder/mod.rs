//! Dual encoder: a linear image branch over feature vectors and a
//! mean-of-token-embeddings text branch followed by a linear map. Both
//! outputs are L2-normalized; similarities are scaled by a learnable
//! temperature `tau = exp(log_tau)`.

mod loss;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenSeq;

pub use loss::{clip_loss, clip_loss_from_similarity, clip_loss_grad, Gradients};
pub use train::{train, write_loss_trace, TrainOutput};

/// Norms below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau_init: f64,
    pub tau_learnable: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            tau_init: 0.07,
            tau_learnable: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for a contrastive loss".into(),
            ));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::Config("tau_init must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable parameters of the dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// embed_dim x feature_dim
    pub w_img: Array2<f64>,
    /// vocab_size x embed_dim
    pub e_tok: Array2<f64>,
    /// embed_dim x embed_dim
    pub w_txt: Array2<f64>,
    pub log_tau: f64,
}

fn glorot(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Array2<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-s..=s))
}

impl EncoderParams {
    /// Glorot-uniform initialization seeded by `cfg.seed`.
    pub fn init(cfg: &TrainConfig, vocab_size: usize, feature_dim: usize) -> Self {
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w_img = glorot(&mut rng, d, feature_dim, feature_dim, d);
        let e_tok = glorot(&mut rng, vocab_size, d, vocab_size, d);
        let w_txt = glorot(&mut rng, d, d, d, d);
        Self {
            w_img,
            e_tok,
            w_txt,
            log_tau: cfg.tau_init.ln(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_img.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_img.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.e_tok.nrows()
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.log_tau.is_finite()
            && [&self.w_img, &self.e_tok, &self.w_txt]
                .iter()
                .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Unit-norm image embedding.
    pub fn encode_image(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.feature_dim() {
            return Err(Error::DimMismatch {
                expected: self.feature_dim(),
                actual: x.len(),
            });
        }
        normalize(self.w_img.dot(&x))
    }

    /// Mean token embedding (before the linear map).
    pub fn mean_token_embedding(&self, t: &TokenSeq) -> Result<Array1<f64>> {
        if t.is_empty() {
            return Err(Error::EmptySeq);
        }
        let mut m = Array1::zeros(self.embed_dim());
        for &id in t.ids() {
            if id >= self.vocab_size() {
                return Err(Error::DimMismatch {
                    expected: self.vocab_size(),
                    actual: id + 1,
                });
            }
            m += &self.e_tok.row(id);
        }
        m /= t.len() as f64;
        Ok(m)
    }

    /// Unit-norm text embedding.
    pub fn encode_text(&self, t: &TokenSeq) -> Result<Array1<f64>> {
        let m = self.mean_token_embedding(t)?;
        normalize(self.w_txt.dot(&m))
    }

    pub fn encode_images(&self, xs: &[ArrayView1<f64>]) -> Result<Array2<f64>> {
        stack(xs.iter().map(|x| self.encode_image(*x)), self.embed_dim())
    }

    pub fn encode_texts(&self, ts: &[&TokenSeq]) -> Result<Array2<f64>> {
        stack(ts.iter().map(|t| self.encode_text(t)), self.embed_dim())
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            embed_dim: self.embed_dim(),
            feature_dim: self.feature_dim(),
            vocab_size: self.vocab_size(),
            log_tau: self.log_tau,
            w_img: self.w_img.iter().copied().collect(),
            e_tok: self.e_tok.iter().copied().collect(),
            w_txt: self.w_txt.iter().copied().collect(),
        };
        let text = serde_json::to_string(&ck).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format {
            line: e.line(),
            message: e.to_string(),
        })?;
        let shape = |rows: usize, cols: usize, data: Vec<f64>| {
            let len = data.len();
            Array2::from_shape_vec((rows, cols), data).map_err(|_| Error::DimMismatch {
                expected: rows * cols,
                actual: len,
            })
        };
        let params = Self {
            w_img: shape(ck.embed_dim, ck.feature_dim, ck.w_img)?,
            e_tok: shape(ck.vocab_size, ck.embed_dim, ck.e_tok)?,
            w_txt: shape(ck.embed_dim, ck.embed_dim, ck.w_txt)?,
            log_tau: ck.log_tau,
        };
        if !params.is_finite() {
            return Err(Error::Format {
                line: 0,
                message: "checkpoint contains non-finite values".into(),
            });
        }
        Ok(params)
    }
}

/// On-disk checkpoint: dims header, row-major matrices, log temperature.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    embed_dim: usize,
    feature_dim: usize,
    vocab_size: usize,
    log_tau: f64,
    w_img: Vec<f64>,
    e_tok: Vec<f64>,
    w_txt: Vec<f64>,
}

pub fn normalize(v: Array1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= MIN_NORM && norm.is_finite()) {
        return Err(Error::ZeroNorm);
    }
    Ok(v / norm)
}

fn stack<I: Iterator<Item = Result<Array1<f64>>>>(rows: I, dim: usize) -> Result<Array2<f64>> {
    let rows = rows.collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

/// Paired images and token sequences; row `i` of `images` matches `texts[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Array2<f64>,
    pub texts: Vec<TokenSeq>,
}

impl Batch {
    pub fn new(images: Array2<f64>, texts: Vec<TokenSeq>) -> Result<Self> {
        if images.nrows() != texts.len() {
            return Err(Error::LengthMismatch(images.nrows(), texts.len()));
        }
        if texts.is_empty() {
            return Err(Error::Config("batch must contain at least one pair".into()));
        }
        Ok(Self { images, texts })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}
