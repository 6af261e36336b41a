//! A tiny ε-predicting transformer over video latent tokens.
//!
//! Two attention layouts are supported. `Joint` concatenates video and text
//! tokens into one sequence and runs full self-attention over it, MM-DiT
//! style. `CrossAttn` keeps text as a fixed context: video tokens run spatial
//! self-attention within each frame followed by cross-attention to the text,
//! the arrangement of U-Net video models.
//!
//! During the gated window the forward pass derives each subject's adaptive
//! layout from the layer's live queries and keys, fuses it with the prior and
//! masks the attention accordingly.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_head, crossattn_masks, joint_mask, merge_head, multi_head_attention_probs, split_head,
    BitMatrix, CrossAttnMasks, JointAttentionMask, MaskMode, MaskSemantics,
};
use crate::encoder::sinusoid;
use crate::error::{Error, Result};
use crate::layout::{correlation, LayoutSet, ThresholdRule, TokenGrid, TokenMask};
use crate::prompt::{pool_rows, SubjectSpan};
use crate::rng::{gaussian_field, RngStream};
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 3;
pub const TEXT_DIM: usize = 32;
pub(crate) const POS_FEATURES: usize = 24;
pub(crate) const TIME_FEATURES: usize = 16;
const WEIGHT_STREAM: u64 = 0xd17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSpec {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub weight_seed: u64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            weight_seed: 0,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("denoiser extents must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionLayout {
    #[default]
    Joint,
    CrossAttn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Cross-attention projections, used only by [`AttentionLayout::CrossAttn`].
    pub cq: Tensor,
    pub ck: Tensor,
    pub cv: Tensor,
    pub co: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserWeights {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_pos: Tensor,
    pub w_time: Tensor,
    pub w_txt: Tensor,
    pub b_txt: Tensor,
    pub layers: Vec<LayerWeights>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl DenoiserWeights {
    pub fn init(spec: &DenoiserSpec) -> Self {
        let root = RngStream::new(spec.weight_seed, vec![WEIGHT_STREAM]);
        let d = spec.d_model;
        let mat = |s: &RngStream, r: usize, c: usize| gaussian_field(s, &[r, c]).scale(1.0 / (r as f64).sqrt());
        let zeros = |c: usize| Tensor::zeros(&[1, c]);
        let layers = (0..spec.layers)
            .map(|l| {
                let s = root.child(100 + l as u64);
                LayerWeights {
                    wq: mat(&s.child(0), d, d),
                    wk: mat(&s.child(1), d, d),
                    wv: mat(&s.child(2), d, d),
                    wo: mat(&s.child(3), d, d).scale(0.5),
                    w1: mat(&s.child(4), d, 2 * d),
                    b1: zeros(2 * d),
                    w2: mat(&s.child(5), 2 * d, d).scale(0.5),
                    b2: zeros(d),
                    cq: mat(&s.child(6), d, d),
                    ck: mat(&s.child(7), d, d),
                    cv: mat(&s.child(8), d, d),
                    co: mat(&s.child(9), d, d).scale(0.5),
                }
            })
            .collect();
        Self {
            w_in: mat(&root.child(0), LATENT_CHANNELS, d),
            b_in: zeros(d),
            w_pos: mat(&root.child(1), POS_FEATURES, d),
            w_time: mat(&root.child(2), TIME_FEATURES, d),
            w_txt: mat(&root.child(3), TEXT_DIM, d),
            b_txt: zeros(d),
            layers,
            w_out: mat(&root.child(4), d, LATENT_CHANNELS),
            b_out: zeros(LATENT_CHANNELS),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_in, &self.b_in, &self.w_pos, &self.w_time, &self.w_txt, &self.b_txt];
        for l in &self.layers {
            v.extend([&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.b1, &l.w2, &l.b2, &l.cq, &l.ck, &l.cv, &l.co]);
        }
        v.extend([&self.w_out, &self.b_out]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_pos,
            &mut self.w_time,
            &mut self.w_txt,
            &mut self.b_txt,
        ];
        for l in &mut self.layers {
            v.extend([
                &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2, &mut l.cq,
                &mut l.ck, &mut l.cv, &mut l.co,
            ]);
        }
        v.extend([&mut self.w_out, &mut self.b_out]);
        v
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Checks that every tensor has the extents `spec` implies.
    pub fn check_spec(&self, spec: &DenoiserSpec) -> Result<()> {
        let reference = DenoiserWeights::init(spec);
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() || ours.iter().zip(&theirs).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::InvalidConfig("weights do not match the denoiser spec".into()));
        }
        if ours.iter().any(|t| !t.is_finite()) {
            return Err(Error::NumericDomain("denoiser weights"));
        }
        Ok(())
    }
}

/// Fourier features of normalized `(x, y, f)` token coordinates.
pub(crate) fn position_features(grid: &TokenGrid) -> Tensor {
    let n = grid.n_video();
    let mut data = Vec::with_capacity(n * POS_FEATURES);
    for p in 0..n {
        let (f, y, x) = grid.coords(p);
        let coords = [
            (x as f64 + 0.5) / grid.width as f64,
            (y as f64 + 0.5) / grid.height as f64,
            (f as f64 + 0.5) / grid.frames as f64,
        ];
        for u in coords {
            for j in 0..4 {
                let w = std::f64::consts::PI * f64::from(1u32 << j) * u;
                data.push(w.sin());
                data.push(w.cos());
            }
        }
    }
    Tensor::from_raw(n, POS_FEATURES, data)
}

pub(crate) fn time_features(timestep: usize) -> Vec<f64> {
    sinusoid(timestep as f64, TIME_FEATURES, 10_000.0)
}

/// `x·w + b` with `b` broadcast over rows.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// RMS-normalized rows and the per-row inverse RMS.
pub(crate) fn rms_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut y = x.clone();
    let c = y.cols();
    let mut inv = Vec::with_capacity(y.rows());
    for row in y.data_mut().chunks_mut(c) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let s = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
        inv.push(s);
    }
    (y, inv)
}

pub(crate) fn silu(u: f64) -> f64 {
    u / (1.0 + (-u).exp())
}

/// Columns averaged over heads: `n×d` to `n×(d/heads)`.
fn head_average(x: &Tensor, heads: usize) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let mut out = vec![0.0; n * dh];
    for r in 0..n {
        let row = x.row(r);
        for h in 0..heads {
            for j in 0..dh {
                out[r * dh + j] += row[h * dh + j] / heads as f64;
            }
        }
    }
    Tensor::from_raw(n, dh, out)
}

/// Everything the gated forward pass needs to build subject-aware masks.
#[derive(Debug, Clone)]
pub struct DlfaContext {
    pub prior: Vec<TokenMask>,
    pub text_masks: Vec<TokenMask>,
    pub spans: Vec<SubjectSpan>,
    pub rule: ThresholdRule,
    pub semantics: MaskSemantics,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerMask {
    Joint(JointAttentionMask),
    Cross(CrossAttnMasks),
}

#[derive(Debug, Clone, Copy)]
pub enum Masking<'a> {
    Off,
    /// Derive adaptive layouts from this pass's own queries and keys.
    Adaptive(&'a DlfaContext),
    /// Reuse per-layer masks built by an earlier pass (the other guidance branch).
    Fixed(&'a [LayerMask], MaskMode),
}

/// Per-call diagnostics filled in by [`Denoiser::forward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Subject spans whose last-layer attention mass should be captured.
    pub capture_spans: Option<Vec<SubjectSpan>>,
    pub layer_masks: Vec<LayerMask>,
    pub layouts: Vec<LayoutSet>,
    /// Number of layers that ran masked attention.
    pub masked_layers: usize,
    /// Last layer: per subject, attention mass each video token puts on the subject's text.
    pub subject_attention: Vec<Vec<f64>>,
    /// Last layer, joint layout only: head-averaged attention rows.
    pub attention_rows: Option<Tensor>,
}

/// Inputs to one denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInput<'a> {
    pub latent: &'a Tensor,
    pub text: &'a Tensor,
    pub timestep: usize,
    pub grid: TokenGrid,
    pub layout: AttentionLayout,
}

/// Saved activations of one joint layer for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Tensor,
    pub a: Tensor,
    pub inv_a: Vec<f64>,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head `n×n` attention weights.
    pub probs: Vec<Vec<f64>>,
    pub o: Tensor,
    pub x_mid: Tensor,
    pub b: Tensor,
    pub inv_b: Vec<f64>,
    pub u: Tensor,
    pub g: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub pos: Tensor,
    pub time: Vec<f64>,
    pub layers: Vec<LayerCache>,
    pub x_final: Tensor,
    pub r: Tensor,
    pub inv_r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub spec: DenoiserSpec,
    pub weights: DenoiserWeights,
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            weights: DenoiserWeights::init(&spec),
        })
    }

    pub fn with_weights(spec: DenoiserSpec, weights: DenoiserWeights) -> Result<Self> {
        spec.validate()?;
        weights.check_spec(&spec)?;
        Ok(Self { spec, weights })
    }

    fn check_input(&self, input: &ForwardInput<'_>) -> Result<()> {
        let nv = input.grid.n_video();
        if input.latent.rows() != nv || input.latent.cols() != LATENT_CHANNELS {
            return Err(Error::arg(format!(
                "latent is {}x{}, expected {nv}x{LATENT_CHANNELS}",
                input.latent.rows(),
                input.latent.cols()
            )));
        }
        if input.text.cols() != TEXT_DIM {
            return Err(Error::arg(format!(
                "text embeddings have dimension {}, expected {TEXT_DIM}",
                input.text.cols()
            )));
        }
        Ok(())
    }

    fn embed_video(&self, input: &ForwardInput<'_>, pos: &Tensor, time: &[f64]) -> Result<Tensor> {
        let w = &self.weights;
        let mut xv = linear(input.latent, &w.w_in, Some(&w.b_in))?.add(&pos.matmul(&w.w_pos)?)?;
        let tvec = Tensor::from_raw(1, TIME_FEATURES, time.to_vec()).matmul(&w.w_time)?;
        let d = xv.cols();
        for row in xv.data_mut().chunks_mut(d) {
            for (v, t) in row.iter_mut().zip(tvec.data()) {
                *v += t;
            }
        }
        Ok(xv)
    }

    /// Predicted noise `ε̂` for every video token (`N_video × 3`).
    pub fn forward(&self, input: &ForwardInput<'_>, masking: Masking<'_>, trace: Option<&mut ForwardTrace>) -> Result<Tensor> {
        self.check_input(input)?;
        let out = match input.layout {
            AttentionLayout::Joint => self.joint_forward(input, masking, trace, None)?,
            AttentionLayout::CrossAttn => self.cross_forward(input, masking, trace)?,
        };
        out.ensure_finite("denoiser output")?;
        Ok(out)
    }

    /// Unmasked joint forward pass that keeps every activation for backprop.
    pub(crate) fn forward_cached(&self, input: &ForwardInput<'_>) -> Result<(Tensor, ForwardCache)> {
        self.check_input(input)?;
        let mut cache = None;
        let out = self.joint_forward(input, Masking::Off, None, Some(&mut cache))?;
        Ok((out, cache.expect("joint forward fills the cache")))
    }

    fn joint_forward(
        &self,
        input: &ForwardInput<'_>,
        masking: Masking<'_>,
        mut trace: Option<&mut ForwardTrace>,
        mut cache: Option<&mut Option<ForwardCache>>,
    ) -> Result<Tensor> {
        let w = &self.weights;
        let heads = self.spec.heads;
        let nv = input.grid.n_video();
        let nt = input.text.rows();
        let pos = position_features(&input.grid);
        let time = time_features(input.timestep);
        let xv = self.embed_video(input, &pos, &time)?;
        let xt = linear(input.text, &w.w_txt, Some(&w.b_txt))?;
        let d = xv.cols();
        let mut x = Tensor::from_raw(nv + nt, d, [xv.data(), xt.data()].concat());
        let mut layer_caches = Vec::new();
        let n_layers = w.layers.len();

        for (li, lw) in w.layers.iter().enumerate() {
            let last = li + 1 == n_layers;
            let x_in = cache.is_some().then(|| x.clone());
            let (a, inv_a) = rms_norm(&x);
            let q = a.matmul(&lw.wq)?;
            let k = a.matmul(&lw.wk)?;
            let v = a.matmul(&lw.wv)?;

            let built: Option<JointAttentionMask>;
            let mask: Option<(&BitMatrix, MaskMode)> = match masking {
                Masking::Off => None,
                Masking::Adaptive(ctx) => {
                    let (joint, layouts) = adaptive_joint_mask(ctx, &q, &k, nv, nt, heads)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.layouts.push(layouts);
                        t.layer_masks.push(LayerMask::Joint(joint.clone()));
                    }
                    built = Some(joint);
                    built.as_ref().map(|m| (&m.bits, ctx.semantics.mode))
                }
                Masking::Fixed(masks, mode) => match masks.get(li) {
                    Some(LayerMask::Joint(m)) => Some((&m.bits, mode)),
                    _ => return Err(Error::arg(format!("no joint mask supplied for layer {li}"))),
                },
            };
            let capture = last && trace.as_ref().is_some_and(|t| t.capture_spans.is_some());

            let (o, probs) = if cache.is_some() {
                debug_assert!(mask.is_none(), "cached passes are unmasked");
                let dh = d / heads;
                let n = nv + nt;
                let mut o = Tensor::zeros(&[n, d]);
                let mut per_head = Vec::with_capacity(heads);
                for h in 0..heads {
                    let mut p = vec![0.0; n * n];
                    let oh = attention_head(
                        &split_head(&q, heads, h),
                        &split_head(&k, heads, h),
                        &split_head(&v, heads, h),
                        n,
                        n,
                        dh,
                        dh,
                        None,
                        MaskMode::Additive,
                        &mut p,
                    );
                    merge_head(&mut o, heads, h, &oh);
                    per_head.push(p);
                }
                (o, Some(per_head))
            } else {
                let (o, avg) = multi_head_attention_probs(&q, &k, &v, heads, mask, capture)?;
                if let (Some(t), Some(avg)) = (trace.as_deref_mut(), avg) {
                    t.subject_attention = subject_attention_joint(&avg, nv, t.capture_spans.as_deref().unwrap_or(&[]));
                    t.attention_rows = Some(avg);
                }
                (o, None)
            };
            if mask.is_some() {
                if let Some(t) = trace.as_deref_mut() {
                    t.masked_layers += 1;
                }
            }

            x = x.add(&o.matmul(&lw.wo)?)?;
            let x_mid = cache.is_some().then(|| x.clone());
            let (b, inv_b) = rms_norm(&x);
            let u = linear(&b, &lw.w1, Some(&lw.b1))?;
            let mut g = u.clone();
            g.data_mut().iter_mut().for_each(|v| *v = silu(*v));
            x = x.add(&linear(&g, &lw.w2, Some(&lw.b2))?)?;

            if cache.is_some() {
                layer_caches.push(LayerCache {
                    x_in: x_in.expect("cloned when caching"),
                    a,
                    inv_a,
                    q,
                    k,
                    v,
                    probs: probs.expect("kept when caching"),
                    o,
                    x_mid: x_mid.expect("cloned when caching"),
                    b,
                    inv_b,
                    u,
                    g,
                });
            }
        }

        let x_final = x.slice_rows(0, nv);
        let (r, inv_r) = rms_norm(&x_final);
        let out = linear(&r, &w.w_out, Some(&w.b_out))?;
        if let Some(slot) = cache.as_deref_mut() {
            *slot = Some(ForwardCache {
                pos,
                time,
                layers: layer_caches,
                x_final,
                r,
                inv_r,
            });
        }
        Ok(out)
    }

    fn cross_forward(&self, input: &ForwardInput<'_>, masking: Masking<'_>, mut trace: Option<&mut ForwardTrace>) -> Result<Tensor> {
        let w = &self.weights;
        let heads = self.spec.heads;
        let grid = input.grid;
        let nv = grid.n_video();
        let nt = input.text.rows();
        let hw = grid.frame_tokens();
        let d = self.spec.d_model;
        let dh = d / heads;
        let pos = position_features(&grid);
        let time = time_features(input.timestep);
        let mut x = self.embed_video(input, &pos, &time)?;
        let context = linear(input.text, &w.w_txt, Some(&w.b_txt))?;
        let n_layers = w.layers.len();

        for (li, lw) in w.layers.iter().enumerate() {
            let last = li + 1 == n_layers;
            let (a, _) = rms_norm(&x);
            let ck = context.matmul(&lw.ck)?;

            let built: Option<CrossAttnMasks>;
            let (masks, mode) = match masking {
                Masking::Off => (None, MaskMode::Additive),
                Masking::Adaptive(ctx) => {
                    // Correlation between the pooled subject keys and the
                    // video queries this layer's cross-attention would issue.
                    let vq = a.matmul(&lw.cq)?;
                    let (m, layouts) = adaptive_cross_masks(ctx, &grid, &vq, &ck, heads)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.layouts.push(layouts);
                        t.layer_masks.push(LayerMask::Cross(m.clone()));
                    }
                    built = Some(m);
                    (built.as_ref(), ctx.semantics.mode)
                }
                Masking::Fixed(masks, mode) => match masks.get(li) {
                    Some(LayerMask::Cross(m)) => (Some(m), mode),
                    _ => return Err(Error::arg(format!("no cross-attention masks supplied for layer {li}"))),
                },
            };
            if masks.is_some() {
                if let Some(t) = trace.as_deref_mut() {
                    t.masked_layers += 1;
                }
            }

            // Spatial self-attention, frame by frame.
            let q = a.matmul(&lw.wq)?;
            let k = a.matmul(&lw.wk)?;
            let v = a.matmul(&lw.wv)?;
            let mut o = Tensor::zeros(&[nv, d]);
            for f in 0..grid.frames {
                let (r0, r1) = (f * hw, (f + 1) * hw);
                let fm = masks.map(|m| (&m.self_masks[f], mode));
                let (of, _) = multi_head_attention_probs(&q.slice_rows(r0, r1), &k.slice_rows(r0, r1), &v.slice_rows(r0, r1), heads, fm, false)?;
                o.data_mut()[r0 * d..r1 * d].copy_from_slice(of.data());
            }
            x = x.add(&o.matmul(&lw.wo)?)?;

            // Cross-attention to the text context.
            let (a2, _) = rms_norm(&x);
            let cq = a2.matmul(&lw.cq)?;
            let cv = context.matmul(&lw.cv)?;
            let stacked;
            let cm = match masks {
                Some(m) => {
                    let mut bits = Vec::with_capacity(nv * nt);
                    for fm in &m.cross_masks {
                        bits.extend_from_slice(fm.bits());
                    }
                    stacked = BitMatrix::from_bits(nv, nt, bits)?;
                    Some((&stacked, mode))
                }
                None => None,
            };
            let mut co = Tensor::zeros(&[nv, d]);
            let mut probs = vec![0.0; nv * nt];
            let capture = last && trace.as_ref().is_some_and(|t| t.capture_spans.is_some());
            let mut avg = vec![0.0; nv * nt];
            for h in 0..heads {
                let oh = attention_head(
                    &split_head(&cq, heads, h),
                    &split_head(&ck, heads, h),
                    &split_head(&cv, heads, h),
                    nv,
                    nt,
                    dh,
                    dh,
                    cm.map(|(b, _)| b),
                    mode,
                    &mut probs,
                );
                merge_head(&mut co, heads, h, &oh);
                if capture {
                    for (s, p) in avg.iter_mut().zip(&probs) {
                        *s += p / heads as f64;
                    }
                }
            }
            if capture {
                if let Some(t) = trace.as_deref_mut() {
                    t.subject_attention = subject_attention_cross(&avg, nv, nt, t.capture_spans.as_deref().unwrap_or(&[]));
                }
            }
            x = x.add(&co.matmul(&lw.co)?)?;

            let (b, _) = rms_norm(&x);
            let mut g = linear(&b, &lw.w1, Some(&lw.b1))?;
            g.data_mut().iter_mut().for_each(|v| *v = silu(*v));
            x = x.add(&linear(&g, &lw.w2, Some(&lw.b2))?)?;
        }
        let (r, _) = rms_norm(&x);
        linear(&r, &w.w_out, Some(&w.b_out))
    }
}

/// Pooled per-subject text query (head-averaged) against head-averaged video keys.
fn subject_correlations(spans: &[SubjectSpan], text_q: &Tensor, video_k: &Tensor, text_offset: usize) -> Result<Vec<Vec<f64>>> {
    spans
        .iter()
        .map(|s| {
            let pooled = pool_rows(text_q, text_offset + s.start, text_offset + s.end)?;
            correlation(&pooled, video_k)
        })
        .collect()
}

fn adaptive_joint_mask(
    ctx: &DlfaContext,
    q: &Tensor,
    k: &Tensor,
    nv: usize,
    nt: usize,
    heads: usize,
) -> Result<(JointAttentionMask, LayoutSet)> {
    let q_avg = head_average(q, heads);
    let k_video = head_average(&k.slice_rows(0, nv), heads);
    let corrs = subject_correlations(&ctx.spans, &q_avg, &k_video, nv)?;
    let layouts = LayoutSet::from_correlations(ctx.prior.clone(), &corrs, ctx.rule)?;
    let mask = joint_mask(nv, nt, &layouts.fused, &ctx.text_masks, ctx.semantics)?;
    Ok((mask, layouts))
}

fn adaptive_cross_masks(
    ctx: &DlfaContext,
    grid: &TokenGrid,
    video_q: &Tensor,
    text_k: &Tensor,
    heads: usize,
) -> Result<(CrossAttnMasks, LayoutSet)> {
    let q_avg = head_average(video_q, heads);
    let k_avg = head_average(text_k, heads);
    let corrs = subject_correlations(&ctx.spans, &k_avg, &q_avg, 0)?;
    let layouts = LayoutSet::from_correlations(ctx.prior.clone(), &corrs, ctx.rule)?;
    let masks = crossattn_masks(grid, &layouts.fused, &ctx.text_masks)?;
    Ok((masks, layouts))
}

fn subject_attention_joint(avg: &Tensor, nv: usize, spans: &[SubjectSpan]) -> Vec<Vec<f64>> {
    spans
        .iter()
        .map(|s| (0..nv).map(|p| avg.row(p)[nv + s.start..nv + s.end].iter().sum()).collect())
        .collect()
}

fn subject_attention_cross(avg: &[f64], nv: usize, nt: usize, spans: &[SubjectSpan]) -> Vec<Vec<f64>> {
    spans
        .iter()
        .map(|s| (0..nv).map(|p| avg[p * nt + s.start..p * nt + s.end].iter().sum()).collect())
        .collect()
}
