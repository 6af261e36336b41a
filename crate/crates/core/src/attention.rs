//! Subject-aware attention masks and the masked attention kernel.
//!
//! In the joint (MM-DiT style) layout the sequence is `[video; text]`. A pair
//! `(p, q)` may attend when both belong to the same subject `i` (its fused
//! video region or its text span), or when `p` is a context token: a video
//! token outside every region or a text token outside every subject span.
//! With `context_symmetric` set, context tokens are also visible to everyone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{TokenGrid, TokenMask};
use crate::tensor::{gemm, Tensor};

/// Dense row-major boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.bits[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::arg(format!(
                "{} bits for a {rows}x{cols} matrix",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn or(&self, other: &BitMatrix) -> Result<BitMatrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::arg(format!(
                "cannot combine {}x{} and {}x{} masks",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(BitMatrix {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    /// Copies the block `rows × cols`.
    pub fn submatrix(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> BitMatrix {
        let (r0, c0) = (rows.start, cols.start);
        BitMatrix::from_fn(rows.len(), cols.len(), |r, c| self.get(r0 + r, c0 + c))
    }

    /// Row-major, most-significant-bit-first packing, zero padded to a byte.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn unpack(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::arg(format!(
                "{} bytes cannot hold a packed {rows}x{cols} mask",
                bytes.len()
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self { rows, cols, bits })
    }
}

/// Square mask over the joint `[video; text]` sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAttentionMask {
    pub n_video: usize,
    pub n_text: usize,
    pub bits: BitMatrix,
}

impl JointAttentionMask {
    pub fn n(&self) -> usize {
        self.n_video + self.n_text
    }

    pub fn get(&self, p: usize, q: usize) -> bool {
        self.bits.get(p, q)
    }

    pub fn all_rows_nonempty(&self) -> bool {
        (0..self.n()).all(|r| self.bits.row(r).iter().any(|&b| b))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Disallowed logits are dropped (the `−∞` limit), so they receive exactly zero weight.
    #[default]
    Additive,
    /// Logits are multiplied by the `{0,1}` mask before the softmax, so
    /// disallowed pairs keep a logit of 0 and still receive weight.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSemantics {
    pub mode: MaskMode,
    pub context_symmetric: bool,
}

fn check_masks(n_video: usize, n_text: usize, l_fuse: &[TokenMask], t_subject: &[TokenMask]) -> Result<()> {
    if l_fuse.len() != t_subject.len() {
        return Err(Error::arg(format!(
            "{} layout masks for {} subjects",
            l_fuse.len(),
            t_subject.len()
        )));
    }
    if let Some(l) = l_fuse.iter().find(|l| l.len() != n_video) {
        return Err(Error::arg(format!("layout mask of length {} for {n_video} video tokens", l.len())));
    }
    if let Some(t) = t_subject.iter().find(|t| t.len() != n_text) {
        return Err(Error::arg(format!("text mask of length {} for {n_text} text tokens", t.len())));
    }
    Ok(())
}

/// Per-subject membership over the joint sequence.
fn joint_membership(l_fuse: &[TokenMask], t_subject: &[TokenMask]) -> Vec<Vec<bool>> {
    l_fuse
        .iter()
        .zip(t_subject)
        .map(|(l, t)| l.iter().chain(t.iter()).copied().collect())
        .collect()
}

/// The four outer-product blocks `Σ_i L_i⊗L_i`, `Σ_i L_i⊗T_i`,
/// `Σ_i T_i⊗L_i`, `Σ_i T_i⊗T_i`, clamped to `{0,1}`.
pub fn subject_mask(
    n_video: usize,
    n_text: usize,
    l_fuse: &[TokenMask],
    t_subject: &[TokenMask],
) -> Result<JointAttentionMask> {
    check_masks(n_video, n_text, l_fuse, t_subject)?;
    let n = n_video + n_text;
    let mut bits = BitMatrix::zeros(n, n);
    for member in joint_membership(l_fuse, t_subject) {
        let on: Vec<usize> = member
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        for &p in &on {
            for &q in &on {
                bits.set(p, q, true);
            }
        }
    }
    Ok(JointAttentionMask {
        n_video,
        n_text,
        bits,
    })
}

/// Context tokens (in no subject) get all-ones rows, and all-ones columns
/// too when `symmetric`.
pub fn context_mask(
    n_video: usize,
    n_text: usize,
    l_fuse: &[TokenMask],
    t_subject: &[TokenMask],
    symmetric: bool,
) -> Result<JointAttentionMask> {
    check_masks(n_video, n_text, l_fuse, t_subject)?;
    let n = n_video + n_text;
    let membership = joint_membership(l_fuse, t_subject);
    let context: Vec<bool> = (0..n).map(|p| !membership.iter().any(|m| m[p])).collect();
    let bits = BitMatrix::from_fn(n, n, |p, q| context[p] || (symmetric && context[q]));
    Ok(JointAttentionMask {
        n_video,
        n_text,
        bits,
    })
}

pub fn fuse_masks(subject: &JointAttentionMask, context: &JointAttentionMask) -> Result<JointAttentionMask> {
    if (subject.n_video, subject.n_text) != (context.n_video, context.n_text) {
        return Err(Error::arg("subject and context masks cover different sequences"));
    }
    Ok(JointAttentionMask {
        n_video: subject.n_video,
        n_text: subject.n_text,
        bits: subject.bits.or(&context.bits)?,
    })
}

/// `subject ∪ context` in one call.
pub fn joint_mask(
    n_video: usize,
    n_text: usize,
    l_fuse: &[TokenMask],
    t_subject: &[TokenMask],
    semantics: MaskSemantics,
) -> Result<JointAttentionMask> {
    let subject = subject_mask(n_video, n_text, l_fuse, t_subject)?;
    let context = context_mask(n_video, n_text, l_fuse, t_subject, semantics.context_symmetric)?;
    fuse_masks(&subject, &context)
}

/// Per-frame masks for the cross-attention (U-Net style) layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossAttnMasks {
    /// `H·W × H·W` spatial self-attention mask per frame.
    pub self_masks: Vec<BitMatrix>,
    /// `H·W × N_text` video-to-text mask per frame.
    pub cross_masks: Vec<BitMatrix>,
}

/// Within each frame, region tokens see only their own region and their
/// subject's text; background tokens keep unrestricted rows.
pub fn crossattn_masks(grid: &TokenGrid, l_fuse: &[TokenMask], t_subject: &[TokenMask]) -> Result<CrossAttnMasks> {
    let n_text = t_subject.first().map(|t| t.len()).unwrap_or(0);
    check_masks(grid.n_video(), n_text, l_fuse, t_subject)?;
    let hw = grid.frame_tokens();
    let mut self_masks = Vec::with_capacity(grid.frames);
    let mut cross_masks = Vec::with_capacity(grid.frames);
    for f in 0..grid.frames {
        let base = f * hw;
        let background = |p: usize| !l_fuse.iter().any(|l| l[base + p]);
        self_masks.push(BitMatrix::from_fn(hw, hw, |p, q| {
            background(p) || l_fuse.iter().any(|l| l[base + p] && l[base + q])
        }));
        cross_masks.push(BitMatrix::from_fn(hw, n_text, |p, t| {
            background(p) || l_fuse.iter().zip(t_subject).any(|(l, ts)| l[base + p] && ts[t])
        }));
    }
    Ok(CrossAttnMasks {
        self_masks,
        cross_masks,
    })
}

/// Single-head attention over contiguous `n×dh` queries and `m×dh` keys.
/// Writes the row-stochastic weights into `probs` (`n×m`) and returns `n×dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_head(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    dh: usize,
    dv: usize,
    mask: Option<&BitMatrix>,
    mode: MaskMode,
    probs: &mut [f64],
) -> Vec<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    gemm(n, dh, m, q, false, k, true, probs, 0.0);
    let square = n == m;
    for (r, row) in probs.chunks_mut(m).enumerate() {
        row.iter_mut().for_each(|x| *x *= scale);
        let Some(mask) = mask else {
            crate::tensor::softmax_in_place(row);
            continue;
        };
        let allowed = mask.row(r);
        if !allowed.iter().any(|&b| b) {
            // No admissible key: self-only for square masks, unrestricted otherwise.
            if square {
                row.iter_mut().for_each(|x| *x = 0.0);
                row[r] = 1.0;
            } else {
                crate::tensor::softmax_in_place(row);
            }
            continue;
        }
        match mode {
            MaskMode::Additive => {
                let max = row
                    .iter()
                    .zip(allowed)
                    .filter(|(_, &a)| a)
                    .map(|(&x, _)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (x, &a) in row.iter_mut().zip(allowed) {
                    *x = if a { (*x - max).exp() } else { 0.0 };
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            MaskMode::Multiplicative => {
                for (x, &a) in row.iter_mut().zip(allowed) {
                    if !a {
                        *x = 0.0;
                    }
                }
                crate::tensor::softmax_in_place(row);
            }
        }
    }
    let mut out = vec![0.0; n * dv];
    gemm(n, m, dv, probs, false, v, false, &mut out, 0.0);
    out
}

/// Masked single-head attention: `softmax(QKᵀ/√d_h, mask)·V`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BitMatrix, mode: MaskMode) -> Result<Tensor> {
    Ok(masked_attention_with_probs(q, k, v, Some(mask), mode)?.0)
}

/// Like [`masked_attention`] but also returns the `n×m` weight matrix.
pub fn masked_attention_with_probs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&BitMatrix>,
    mode: MaskMode,
) -> Result<(Tensor, Tensor)> {
    let (n, dh) = (q.rows(), q.cols());
    let m = k.rows();
    if k.cols() != dh || v.rows() != m {
        return Err(Error::arg(format!(
            "attention shapes disagree: Q {n}x{dh}, K {}x{}, V {}x{}",
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if let Some(mask) = mask {
        if (mask.rows(), mask.cols()) != (n, m) {
            return Err(Error::arg(format!(
                "{}x{} mask for {n}x{m} attention",
                mask.rows(),
                mask.cols()
            )));
        }
    }
    q.ensure_finite("attention queries")?;
    k.ensure_finite("attention keys")?;
    v.ensure_finite("attention values")?;
    let mut probs = vec![0.0; n * m];
    let out = attention_head(q.data(), k.data(), v.data(), n, m, dh, v.cols(), mask, mode, &mut probs);
    Ok((Tensor::from_raw(n, v.cols(), out), Tensor::from_raw(n, m, probs)))
}

pub(crate) fn split_head(x: &Tensor, heads: usize, h: usize) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

pub(crate) fn merge_head(dst: &mut Tensor, heads: usize, h: usize, src: &[f64]) {
    let d = dst.cols();
    let dh = d / heads;
    for r in 0..dst.rows() {
        dst.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

/// Multi-head attention with an optional mask shared by all heads.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<(&BitMatrix, MaskMode)>,
) -> Result<Tensor> {
    Ok(multi_head_attention_probs(q, k, v, heads, mask, false)?.0)
}

/// Multi-head attention, optionally returning the head-averaged weights.
pub fn multi_head_attention_probs(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<(&BitMatrix, MaskMode)>,
    capture: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (n, d) = (q.rows(), q.cols());
    let m = k.rows();
    if heads == 0 || d % heads != 0 || k.cols() != d || v.cols() != d || v.rows() != m {
        return Err(Error::arg(format!(
            "cannot split Q {n}x{d}, K {m}x{}, V {}x{} into {heads} heads",
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let dh = d / heads;
    let (bits, mode) = match mask {
        Some((b, mode)) => (Some(b), mode),
        None => (None, MaskMode::Additive),
    };
    let mut out = Tensor::zeros(&[n, d]);
    let mut probs = vec![0.0; n * m];
    let mut avg = capture.then(|| vec![0.0; n * m]);
    for h in 0..heads {
        let (qh, kh, vh) = (split_head(q, heads, h), split_head(k, heads, h), split_head(v, heads, h));
        let oh = attention_head(&qh, &kh, &vh, n, m, dh, dh, bits, mode, &mut probs);
        merge_head(&mut out, heads, h, &oh);
        if let Some(avg) = avg.as_mut() {
            for (a, p) in avg.iter_mut().zip(&probs) {
                *a += p / heads as f64;
            }
        }
    }
    Ok((out, avg.map(|a| Tensor::from_raw(n, m, a))))
}
