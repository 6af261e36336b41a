//! Scoring of decoded toy videos.

use crate::error::{Error, Result};
use crate::layout::TokenMask;
use crate::sandbox::denoiser::LATENT_CHANNELS;
use crate::tensor::{dot, norm, Tensor};

/// Mean cosine between region pixels and `color`, mapped from `[-1, 1]` to
/// `[0, 1]`. A black (all-zero) pixel has no hue and scores 0.5.
pub fn region_color_score(video: &Tensor, mask: &TokenMask, color: [f64; 3]) -> Result<f64> {
    if video.cols() != LATENT_CHANNELS || video.rows() != mask.len() {
        return Err(Error::arg(format!(
            "video of {}x{} against a mask of {} tokens",
            video.rows(),
            video.cols(),
            mask.len()
        )));
    }
    let cn = norm(&color);
    if cn == 0.0 {
        return Err(Error::DegenerateVector("target color"));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::arg("region mask is empty"));
    }
    let total: f64 = idx
        .iter()
        .map(|&p| {
            let px = video.row(p);
            let pn = norm(px);
            if pn == 0.0 {
                0.5
            } else {
                ((dot(px, &color) / (pn * cn)).clamp(-1.0, 1.0) + 1.0) / 2.0
            }
        })
        .sum();
    Ok(total / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_and_opposite_colors() {
        let red = [1.0, -1.0, -1.0];
        let v = Tensor::from_rows(&[red, [-1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]).unwrap();
        let m = |i: &[usize]| TokenMask::from_indices(3, i.iter().copied());
        assert!((region_color_score(&v, &m(&[0]), red).unwrap() - 1.0).abs() < 1e-12);
        assert!(region_color_score(&v, &m(&[1]), red).unwrap().abs() < 1e-12);
        assert_eq!(region_color_score(&v, &m(&[2]), red).unwrap(), 0.5);
    }

    #[test]
    fn empty_region_is_an_error() {
        let v = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            region_color_score(&v, &TokenMask::empty(2), [1.0, 0.0, 0.0]),
            Err(Error::Argument(_))
        ));
    }
}
