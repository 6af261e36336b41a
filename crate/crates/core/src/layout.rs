//! Layout masks over the spatiotemporal video-token grid.
//!
//! Three families per subject: *prior* masks rasterized from planner boxes,
//! *adaptive* masks that keep the `k` video tokens most correlated with the
//! subject's pooled text query (with `k` taken from the prior's size), and
//! their union, the *fused* mask.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, kth_largest, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGrid {
    #[serde(rename = "F")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

impl Default for TokenGrid {
    fn default() -> Self {
        Self::new(4, 8, 8)
    }
}

impl TokenGrid {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid extents must be positive, got {}x{}x{}",
                self.frames, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn n_video(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, f: usize, y: usize, x: usize) -> usize {
        f * self.height * self.width + y * self.width + x
    }

    /// Inverse of [`TokenGrid::index`].
    pub fn coords(&self, token: usize) -> (usize, usize, usize) {
        let hw = self.frame_tokens();
        (token / hw, (token % hw) / self.width, token % self.width)
    }
}

/// A `{0,1}` mask over a token axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenMask(Vec<bool>);

impl TokenMask {
    pub fn empty(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn full(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty(len);
        for i in indices {
            m.0[i] = true;
        }
        m
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.0[i] = value;
    }

    /// True when every set bit of `other` is also set here.
    pub fn is_superset_of(&self, other: &TokenMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| a || !b)
    }

    pub fn into_inner(self) -> Vec<bool> {
        self.0
    }
}

impl Deref for TokenMask {
    type Target = [bool];

    fn deref(&self) -> &[bool] {
        &self.0
    }
}

impl From<Vec<bool>> for TokenMask {
    fn from(v: Vec<bool>) -> Self {
        Self(v)
    }
}

/// One box of a subject's prior layout, active on frames `f0..f1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutBox {
    pub frame_range: [usize; 2],
    /// Normalized `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
}

impl LayoutBox {
    pub fn new(frame_range: [usize; 2], bbox: [f64; 4]) -> Self {
        Self { frame_range, bbox }
    }

    pub fn validate(&self, frames: usize) -> std::result::Result<(), (&'static str, String)> {
        let [x0, y0, x1, y1] = self.bbox;
        if self.bbox.iter().any(|v| !v.is_finite()) {
            return Err(("bbox", "coordinates must be finite".into()));
        }
        if [x0, y0, x1, y1].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(("bbox", format!("coordinates {:?} outside [0, 1]", self.bbox)));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(("bbox", format!("degenerate box {:?}: need x0 < x1 and y0 < y1", self.bbox)));
        }
        let [f0, f1] = self.frame_range;
        if f0 >= f1 || f1 > frames {
            return Err((
                "frame_range",
                format!("[{f0}, {f1}) is not a non-empty range within [0, {frames})"),
            ));
        }
        Ok(())
    }

    fn covers(&self, grid: &TokenGrid, f: usize, y: usize, x: usize) -> bool {
        let [x0, y0, x1, y1] = self.bbox;
        let cx = (x as f64 + 0.5) / grid.width as f64;
        let cy = (y as f64 + 0.5) / grid.height as f64;
        (self.frame_range[0]..self.frame_range[1]).contains(&f)
            && (x0..x1).contains(&cx)
            && (y0..y1).contains(&cy)
    }
}

/// Boxes for every subject, in subject order.
pub type PriorLayout = Vec<Vec<LayoutBox>>;

/// Sets token `(f, y, x)` when its cell center lies in `[x0,x1)×[y0,y1)` of
/// any of the subject's boxes active on frame `f`.
pub fn rasterize_prior(layout: &[Vec<LayoutBox>], grid: &TokenGrid) -> Result<Vec<TokenMask>> {
    grid.validate()?;
    layout
        .iter()
        .enumerate()
        .map(|(i, boxes)| {
            for (b, bx) in boxes.iter().enumerate() {
                bx.validate(grid.frames).map_err(|(field, reason)| {
                    Error::format(format!("subjects[{i}].boxes[{b}].{field}"), reason)
                })?;
            }
            let mut mask = TokenMask::empty(grid.n_video());
            for f in 0..grid.frames {
                for y in 0..grid.height {
                    for x in 0..grid.width {
                        if boxes.iter().any(|bx| bx.covers(grid, f, y, x)) {
                            mask.set(grid.index(f, y, x), true);
                        }
                    }
                }
            }
            Ok(mask)
        })
        .collect()
}

/// `Corr[p] = ⟨q̄, K[p]⟩`, unscaled.
pub fn correlation(pooled_query: &[f64], video_keys: &Tensor) -> Result<Vec<f64>> {
    if pooled_query.len() != video_keys.cols() {
        return Err(Error::arg(format!(
            "query of dimension {} against keys of dimension {}",
            pooled_query.len(),
            video_keys.cols()
        )));
    }
    Ok((0..video_keys.rows())
        .map(|p| dot(pooled_query, video_keys.row(p)))
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `corr ≥ δ`, capped at exactly `k` tokens (descending value, then
    /// ascending index).
    #[default]
    TopK,
    /// The literal `corr > δ`, which drops the `k`-th token itself.
    Strict,
}

/// Adaptive mask and the threshold `δ` it was cut at (`None` when `k = 0`).
/// `k` is clamped to the number of tokens.
pub fn adaptive_mask(corr: &[f64], k: usize, rule: ThresholdRule) -> Result<(TokenMask, Option<f64>)> {
    let n = corr.len();
    let k = k.min(n);
    if corr.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("correlation"));
    }
    if k == 0 {
        return Ok((TokenMask::empty(n), None));
    }
    let delta = kth_largest(corr, k)?;
    let mask = match rule {
        ThresholdRule::Strict => corr.iter().map(|&c| c > delta).collect::<Vec<_>>().into(),
        ThresholdRule::TopK => {
            // Everything strictly above δ is in; fill the rest with the
            // lowest-index ties at δ.
            let mut mask = TokenMask::empty(n);
            let mut taken = 0;
            for (p, &c) in corr.iter().enumerate() {
                if c > delta {
                    mask.set(p, true);
                    taken += 1;
                }
            }
            for (p, &c) in corr.iter().enumerate() {
                if taken == k {
                    break;
                }
                if c == delta {
                    mask.set(p, true);
                    taken += 1;
                }
            }
            mask
        }
    };
    Ok((mask, Some(delta)))
}

/// Elementwise OR.
pub fn fuse(prior: &TokenMask, adapt: &TokenMask) -> Result<TokenMask> {
    if prior.len() != adapt.len() {
        return Err(Error::arg(format!(
            "mask lengths differ: {} vs {}",
            prior.len(),
            adapt.len()
        )));
    }
    Ok(prior.iter().zip(adapt.iter()).map(|(&a, &b)| a || b).collect::<Vec<_>>().into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSet {
    pub prior: Vec<TokenMask>,
    pub adapt: Vec<TokenMask>,
    pub fused: Vec<TokenMask>,
}

impl LayoutSet {
    /// Builds adaptive and fused masks from per-subject correlations, sizing
    /// each adaptive mask by its prior's token count.
    pub fn from_correlations(prior: Vec<TokenMask>, corrs: &[Vec<f64>], rule: ThresholdRule) -> Result<Self> {
        if prior.len() != corrs.len() {
            return Err(Error::arg("one correlation vector per subject is required"));
        }
        let mut adapt = Vec::with_capacity(prior.len());
        let mut fused = Vec::with_capacity(prior.len());
        for (p, corr) in prior.iter().zip(corrs) {
            let (a, _) = adaptive_mask(corr, p.count(), rule)?;
            fused.push(fuse(p, &a)?);
            adapt.push(a);
        }
        Ok(Self { prior, adapt, fused })
    }

    /// Prior-only set: adaptive masks empty, fused equal to prior.
    pub fn prior_only(prior: Vec<TokenMask>) -> Self {
        let adapt = prior.iter().map(|p| TokenMask::empty(p.len())).collect();
        Self {
            fused: prior.clone(),
            prior,
            adapt,
        }
    }
}
