//! ε-prediction training of the joint-attention denoiser on moving squares.
//!
//! Gradients come from a hand-written backward pass through the unmasked
//! joint forward; the cross-attention projections are not trained.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::rng::{gaussian_field, RngStream};
use crate::sandbox::dataset::{DatasetConfig, MovingSquares};
use crate::sandbox::denoiser::{
    AttentionLayout, Denoiser, DenoiserSpec, DenoiserWeights, ForwardCache, ForwardInput, LATENT_CHANNELS,
    TEXT_DIM,
};
use crate::sandbox::schedule::NoiseSchedule;
use crate::attention::{merge_head, split_head};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the prompt by the unconditional embedding.
    pub cond_dropout: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: u64,
    pub encoder_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            seed: 0,
            encoder_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::InvalidConfig("cond_dropout must lie in [0, 1]".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub denoiser: Denoiser,
    /// Batch-mean loss per iteration.
    pub losses: Vec<f64>,
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(losses: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, l) in losses.iter().enumerate() {
        acc += l;
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

pub fn train_toy(dataset: &DatasetConfig, spec: &DenoiserSpec, config: &TrainConfig) -> Result<TrainReport> {
    train_toy_with(dataset, spec, config, |_, _| {})
}

/// [`train_toy`] with a callback receiving `(iteration, loss)`.
pub fn train_toy_with(
    dataset: &DatasetConfig,
    spec: &DenoiserSpec,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    config.validate()?;
    let data = MovingSquares::new(*dataset)?;
    let mut denoiser = Denoiser::new(*spec)?;
    let encoder = TextEncoder::from_seed(config.encoder_seed);
    let schedule = NoiseSchedule::default();
    let grid = dataset.grid;
    let mut adam = Adam::new(&denoiser.weights, config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);

    for it in 0..config.steps {
        let mut rng = RngStream::new(config.seed, vec![2, it as u64]).generator();
        let mut grads = denoiser.weights.zeros_like();
        let mut loss = 0.0;
        for b in 0..config.batch_size {
            let sample = data.sample((it * config.batch_size + b) as u64);
            let t = rng.random_range(0..schedule.train_steps());
            let noise = gaussian_field(
                &RngStream::new(config.seed, vec![3, it as u64, b as u64]),
                &[grid.n_video(), LATENT_CHANNELS],
            );
            let text = if rng.random_bool(config.cond_dropout) {
                Tensor::zeros(&[sample.prompt.n_text(), TEXT_DIM])
            } else {
                encoder.encode_prompt(&sample.prompt)?
            };
            let noisy = Tensor::new(
                sample.video.shape().to_vec(),
                schedule.add_noise(sample.video.data(), noise.data(), t),
            )?;
            let input = ForwardInput {
                latent: &noisy,
                text: &text,
                timestep: t,
                grid,
                layout: AttentionLayout::Joint,
            };
            let (out, cache) = denoiser.forward_cached(&input)?;
            let count = (out.len() * config.batch_size) as f64;
            let mut dout = out.clone();
            for (d, e) in dout.data_mut().iter_mut().zip(noise.data()) {
                let r = *d - e;
                loss += r * r / count;
                *d = 2.0 * r / count;
            }
            backward(&denoiser, &input, &cache, &dout, &mut grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::Training { iteration: it, loss });
        }
        clip_global_norm(&mut grads, config.grad_clip);
        adam.step(&mut denoiser.weights, &grads);
        losses.push(loss);
        progress(it, loss);
    }
    Ok(TrainReport { denoiser, losses })
}

fn clip_global_norm(grads: &mut DenoiserWeights, max_norm: f64) {
    let total: f64 = grads.tensors().iter().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: DenoiserWeights,
    v: DenoiserWeights,
}

impl Adam {
    fn new(w: &DenoiserWeights, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: w.zeros_like(),
            v: w.zeros_like(),
        }
    }

    fn step(&mut self, weights: &mut DenoiserWeights, grads: &DenoiserWeights) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let params = weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `dst += op(a)·op(b)`.
fn acc_mm(dst: &mut Tensor, a: &Tensor, a_t: bool, b: &Tensor, b_t: bool) {
    let (m, k) = if a_t { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let n = if b_t { b.rows() } else { b.cols() };
    gemm(m, k, n, a.data(), a_t, b.data(), b_t, dst.data_mut(), 1.0);
}

/// `op(a)·op(b)` as a fresh tensor.
fn mm(a: &Tensor, a_t: bool, b: &Tensor, b_t: bool) -> Tensor {
    let m = if a_t { a.cols() } else { a.rows() };
    let n = if b_t { b.rows() } else { b.cols() };
    let mut out = Tensor::zeros(&[m, n]);
    acc_mm(&mut out, a, a_t, b, b_t);
    out
}

fn acc_colsum(dst: &mut Tensor, x: &Tensor) {
    let c = x.cols();
    for row in x.data().chunks(c) {
        for (d, v) in dst.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Gradient through row-wise RMS normalization `y = x·s(x)`.
fn rms_backward(x: &Tensor, inv: &[f64], dy: &Tensor) -> Tensor {
    let c = x.cols();
    let mut dx = dy.clone();
    for ((dxr, xr), &s) in dx.data_mut().chunks_mut(c).zip(x.data().chunks(c)).zip(inv) {
        let proj: f64 = dxr.iter().zip(xr).map(|(g, v)| g * v).sum();
        let k = s * s * s * proj / c as f64;
        for (g, v) in dxr.iter_mut().zip(xr) {
            *g = s * *g - k * v;
        }
    }
    dx
}

fn silu_grad(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

/// Accumulates `∂loss/∂weights` into `grads` given `∂loss/∂output`.
pub(crate) fn backward(
    denoiser: &Denoiser,
    input: &ForwardInput<'_>,
    cache: &ForwardCache,
    dout: &Tensor,
    grads: &mut DenoiserWeights,
) -> Result<()> {
    let w = &denoiser.weights;
    let heads = denoiser.spec.heads;
    let d = denoiser.spec.d_model;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nv = input.grid.n_video();
    let nt = input.text.rows();
    let n = nv + nt;

    acc_mm(&mut grads.w_out, &cache.r, true, dout, false);
    acc_colsum(&mut grads.b_out, dout);
    let dr = mm(dout, false, &w.w_out, true);
    let dxf = rms_backward(&cache.x_final, &cache.inv_r, &dr);
    let mut dx = Tensor::zeros(&[n, d]);
    dx.data_mut()[..nv * d].copy_from_slice(dxf.data());

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lw = &w.layers[li];
        let lg = &mut grads.layers[li];

        // Feed-forward branch.
        acc_mm(&mut lg.w2, &lc.g, true, &dx, false);
        acc_colsum(&mut lg.b2, &dx);
        let mut du = mm(&dx, false, &lw.w2, true);
        for (g, &u) in du.data_mut().iter_mut().zip(lc.u.data()) {
            *g *= silu_grad(u);
        }
        acc_mm(&mut lg.w1, &lc.b, true, &du, false);
        acc_colsum(&mut lg.b1, &du);
        let db = mm(&du, false, &lw.w1, true);
        dx = dx.add(&rms_backward(&lc.x_mid, &lc.inv_b, &db))?;

        // Attention branch.
        acc_mm(&mut lg.wo, &lc.o, true, &dx, false);
        let d_o = mm(&dx, false, &lw.wo, true);
        let mut dq = Tensor::zeros(&[n, d]);
        let mut dk = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            let p = &lc.probs[h];
            let (qh, kh, vh) = (split_head(&lc.q, heads, h), split_head(&lc.k, heads, h), split_head(&lc.v, heads, h));
            let doh = split_head(&d_o, heads, h);
            let mut dvh = vec![0.0; n * dh];
            gemm(n, n, dh, p, true, &doh, false, &mut dvh, 0.0);
            let mut ds = vec![0.0; n * n];
            gemm(n, dh, n, &doh, false, &vh, true, &mut ds, 0.0);
            for (dsr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                let inner: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (g, &pv) in dsr.iter_mut().zip(pr) {
                    *g = pv * (*g - inner) * scale;
                }
            }
            let mut dqh = vec![0.0; n * dh];
            gemm(n, n, dh, &ds, false, &kh, false, &mut dqh, 0.0);
            let mut dkh = vec![0.0; n * dh];
            gemm(n, n, dh, &ds, true, &qh, false, &mut dkh, 0.0);
            merge_head(&mut dq, heads, h, &dqh);
            merge_head(&mut dk, heads, h, &dkh);
            merge_head(&mut dv, heads, h, &dvh);
        }
        acc_mm(&mut lg.wq, &lc.a, true, &dq, false);
        acc_mm(&mut lg.wk, &lc.a, true, &dk, false);
        acc_mm(&mut lg.wv, &lc.a, true, &dv, false);
        let mut da = mm(&dq, false, &lw.wq, true);
        acc_mm(&mut da, &dk, false, &lw.wk, true);
        acc_mm(&mut da, &dv, false, &lw.wv, true);
        dx = dx.add(&rms_backward(&lc.x_in, &lc.inv_a, &da))?;
    }

    let dxv = dx.slice_rows(0, nv);
    let dxt = dx.slice_rows(nv, n);
    acc_mm(&mut grads.w_in, input.latent, true, &dxv, false);
    acc_colsum(&mut grads.b_in, &dxv);
    acc_mm(&mut grads.w_pos, &cache.pos, true, &dxv, false);
    let time = Tensor::new(vec![1, cache.time.len()], cache.time.clone())?;
    let mut col = Tensor::zeros(&[1, d]);
    acc_colsum(&mut col, &dxv);
    acc_mm(&mut grads.w_time, &time, true, &col, false);
    acc_mm(&mut grads.w_txt, input.text, true, &dxt, false);
    acc_colsum(&mut grads.b_txt, &dxt);
    Ok(())
}
