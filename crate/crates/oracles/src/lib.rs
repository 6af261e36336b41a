//! Brute-force reference implementations for tests.
//!
//! Everything here works on plain vectors and evaluates rules directly from
//! their definitions, one element or one pair at a time. Nothing is shared
//! with the main implementation, so agreement between the two is evidence
//! rather than a tautology.

use std::fmt;

/// One comparison between a main-path value and its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub main: f64,
    pub oracle: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Passes when the absolute error is within `tol`.
    pub fn compare(case: impl Into<String>, main: f64, oracle: f64, tol: f64) -> Self {
        let abs_err = (main - oracle).abs();
        let rel_err = if oracle != 0.0 { abs_err / oracle.abs() } else { abs_err };
        Self {
            case: case.into(),
            main,
            oracle,
            abs_err,
            rel_err,
            pass: abs_err <= tol,
        }
    }

    /// Worst element-wise comparison of two equally long sequences.
    pub fn compare_all(case: impl Into<String>, main: &[f64], oracle: &[f64], tol: f64) -> Self {
        let case = case.into();
        if main.len() != oracle.len() {
            return Self {
                case,
                main: main.len() as f64,
                oracle: oracle.len() as f64,
                abs_err: f64::INFINITY,
                rel_err: f64::INFINITY,
                pass: false,
            };
        }
        let mut worst = Self::compare(case.clone(), 0.0, 0.0, tol);
        for (&m, &o) in main.iter().zip(oracle) {
            let r = Self::compare(case.clone(), m, o, tol);
            if !(r.abs_err <= worst.abs_err) {
                worst = r;
            }
        }
        worst
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: main={:.6e} oracle={:.6e} abs={:.3e} rel={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.case,
            self.main,
            self.oracle,
            self.abs_err,
            self.rel_err
        )
    }
}

/// Subject membership over the joint sequence, video tokens first.
#[derive(Debug, Clone)]
pub struct MaskCase {
    pub n_video: usize,
    pub n_text: usize,
    /// Per subject, whether each video token lies in its region.
    pub regions: Vec<Vec<bool>>,
    /// Per subject, whether each text token belongs to its phrase.
    pub phrases: Vec<Vec<bool>>,
    /// Context tokens are also visible to everyone, not only free to look.
    pub context_symmetric: bool,
}

impl MaskCase {
    fn belongs(&self, subject: usize, token: usize) -> bool {
        if token < self.n_video {
            self.regions[subject][token]
        } else {
            self.phrases[subject][token - self.n_video]
        }
    }

    fn is_context(&self, token: usize) -> bool {
        (0..self.regions.len()).all(|i| !self.belongs(i, token))
    }
}

/// Joint-attention rule for query `p` and key `q`: allowed when both belong
/// to one subject (its region or its phrase), when `p` is a context token,
/// or, with symmetric context, when `q` is a context token.
pub fn oracle_mask_predicate(p: usize, q: usize, case: &MaskCase) -> bool {
    if case.is_context(p) {
        return true;
    }
    if case.context_symmetric && case.is_context(q) {
        return true;
    }
    (0..case.regions.len()).any(|i| case.belongs(i, p) && case.belongs(i, q))
}

/// Per-frame spatial self-attention rule: `p` and `q` are positions within
/// frame `frame` of `hw` tokens each.
pub fn oracle_frame_self_predicate(frame: usize, hw: usize, p: usize, q: usize, regions: &[Vec<bool>]) -> bool {
    let (gp, gq) = (frame * hw + p, frame * hw + q);
    let background = regions.iter().all(|r| !r[gp]);
    background || regions.iter().any(|r| r[gp] && r[gq])
}

/// Per-frame video-to-text rule.
pub fn oracle_frame_cross_predicate(
    frame: usize,
    hw: usize,
    p: usize,
    t: usize,
    regions: &[Vec<bool>],
    phrases: &[Vec<bool>],
) -> bool {
    let gp = frame * hw + p;
    let background = regions.iter().all(|r| !r[gp]);
    background || regions.iter().zip(phrases).any(|(r, ph)| r[gp] && ph[t])
}

/// Output of [`oracle_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleAttention {
    pub out: Vec<Vec<f64>>,
    /// Rows without any allowed key.
    pub empty_rows: Vec<usize>,
}

/// Scaled dot-product attention where each row renormalizes over its allowed
/// keys only. A row with no allowed key attends to itself when queries and
/// keys are the same sequence, and to every key otherwise.
pub fn oracle_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    allowed: impl Fn(usize, usize) -> bool,
) -> OracleAttention {
    let dh = q.first().map(|r| r.len()).unwrap_or(0);
    let dv = v.first().map(|r| r.len()).unwrap_or(0);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(q.len());
    let mut empty_rows = Vec::new();
    for (r, qr) in q.iter().enumerate() {
        let mut cols: Vec<usize> = (0..k.len()).filter(|&c| allowed(r, c)).collect();
        if cols.is_empty() {
            empty_rows.push(r);
            if q.len() == k.len() {
                out.push(v[r].clone());
                continue;
            }
            cols = (0..k.len()).collect();
        }
        let scores: Vec<f64> = cols
            .iter()
            .map(|&c| qr.iter().zip(&k[c]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut row = vec![0.0; dv];
        for (w, &c) in weights.iter().zip(&cols) {
            for (o, x) in row.iter_mut().zip(&v[c]) {
                *o += w / total * x;
            }
        }
        out.push(row);
    }
    OracleAttention { out, empty_rows }
}

/// Full sort by descending value, ties to the lower index; returns the k-th
/// largest value (if `k > 0`) and the first `k` indices in ascending order.
pub fn oracle_topk(values: &[f64], k: usize) -> (Option<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let k = k.min(values.len());
    let delta = if k == 0 { None } else { Some(values[order[k - 1]]) };
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    (delta, picked)
}

/// Indices strictly above the k-th largest value.
pub fn oracle_strict_above(values: &[f64], k: usize) -> Vec<usize> {
    match oracle_topk(values, k).0 {
        None => Vec::new(),
        Some(delta) => (0..values.len()).filter(|&i| values[i] > delta).collect(),
    }
}

/// Mean of rows `start..end`.
pub fn oracle_pool(rows: &[Vec<f64>], start: usize, end: usize) -> Vec<f64> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut acc = vec![0.0; d];
    for row in &rows[start..end] {
        for j in 0..d {
            acc[j] += row[j];
        }
    }
    acc.into_iter().map(|a| a / (end - start) as f64).collect()
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Share of subject `k`'s similarity mass that goes to other subjects'
/// anchors, from the definition without any max shift.
pub fn oracle_confusion(pooled: &[Vec<f64>], anchors: &[Vec<f64>], tau: f64) -> Vec<f64> {
    (0..pooled.len())
        .map(|k| {
            let e: Vec<f64> = anchors.iter().map(|a| (oracle_cosine(&pooled[k], a) / tau).exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, x)| x).sum::<f64>() / total
        })
        .collect()
}

/// `Σ_i (anchor_k − anchor_i)` for every `k`.
pub fn oracle_directions(anchors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    anchors
        .iter()
        .map(|ak| {
            let mut d = vec![0.0; ak.len()];
            for ai in anchors {
                for j in 0..ak.len() {
                    d[j] += ak[j] - ai[j];
                }
            }
            d
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Pearson sample correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}
