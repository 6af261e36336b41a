//! A small seeded bidirectional text encoder.
//!
//! It stands in for T5/CLIP: tokens attend to each other, so a subject's
//! contextual embedding picks up traces of the words around it. Weights are
//! drawn from keyed random streams and never trained.

use crate::attention::multi_head_attention;
use crate::error::Result;
use crate::prompt::{PromptSpec, VOCAB_SIZE};
use crate::rng::{gaussian_field, RngStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Weight on each residual branch; small values keep tokens recognizable.
    pub residual_scale: f64,
    pub position_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 2,
            residual_scale: 0.5,
            position_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: EncoderConfig,
    token_embedding: Tensor,
    layers: Vec<EncoderLayer>,
}

const ENCODER_STREAM: u64 = 0x7e47;

fn init(stream: &RngStream, rows: usize, cols: usize, std: f64) -> Tensor {
    gaussian_field(stream, &[rows, cols]).scale(std)
}

pub(crate) fn rms_norm_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Sinusoidal embedding of a scalar position into `dim` features.
pub(crate) fn sinusoid(pos: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

impl TextEncoder {
    pub fn from_seed(seed: u64) -> Self {
        Self::with_config(seed, EncoderConfig::default())
    }

    pub fn with_config(seed: u64, config: EncoderConfig) -> Self {
        let root = RngStream::new(seed, vec![ENCODER_STREAM]);
        let d = config.dim;
        let token_embedding = init(&root.child(0), VOCAB_SIZE, d, 1.0);
        let proj = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|l| {
                let s = root.child(1 + l as u64);
                EncoderLayer {
                    wq: init(&s.child(0), d, d, proj),
                    wk: init(&s.child(1), d, d, proj),
                    wv: init(&s.child(2), d, d, proj),
                    wo: init(&s.child(3), d, d, proj),
                    w1: init(&s.child(4), d, 2 * d, proj),
                    w2: init(&s.child(5), 2 * d, d, 1.0 / (2.0 * d as f64).sqrt()),
                }
            })
            .collect();
        Self {
            config,
            token_embedding,
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Contextual embeddings of a raw token sequence (`n × dim`).
    pub fn encode_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.dim;
        let n = tokens.len();
        if n == 0 {
            return Err(crate::Error::arg("cannot encode an empty token sequence"));
        }
        let mut data = Vec::with_capacity(n * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= VOCAB_SIZE {
                return Err(crate::Error::Vocabulary {
                    id: tok,
                    vocab: VOCAB_SIZE,
                });
            }
            let pe = sinusoid(pos as f64, d, 64.0);
            data.extend(
                self.token_embedding
                    .row(tok as usize)
                    .iter()
                    .zip(&pe)
                    .map(|(e, p)| e + self.config.position_scale * p),
            );
        }
        let mut x = Tensor::from_raw(n, d, data);
        let alpha = self.config.residual_scale;
        for layer in &self.layers {
            let a = rms_norm_rows(&x);
            let q = a.matmul(&layer.wq)?;
            let k = a.matmul(&layer.wk)?;
            let v = a.matmul(&layer.wv)?;
            let attn = multi_head_attention(&q, &k, &v, self.config.heads, None)?;
            x = x.add(&attn.matmul(&layer.wo)?.scale(alpha))?;
            let b = rms_norm_rows(&x);
            let mut h = b.matmul(&layer.w1)?;
            h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            x = x.add(&h.matmul(&layer.w2)?.scale(alpha))?;
        }
        x.ensure_finite("encoder output")?;
        Ok(x)
    }

    pub fn encode_prompt(&self, spec: &PromptSpec) -> Result<Tensor> {
        self.encode_tokens(&spec.tokens)
    }

    /// Each subject's span encoded alone, without the surrounding prompt.
    pub fn encode_anchors(&self, spec: &PromptSpec) -> Result<Vec<Tensor>> {
        (0..spec.n_subjects())
            .map(|i| self.encode_tokens(spec.subject_tokens(i)))
            .collect()
    }
}
