//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use layoutfuse_core::layout::{rasterize_prior, LayoutSet};
use layoutfuse_core::{LayoutBox, PromptSpec, SubjectSpan, Tensor, ThresholdRule, TokenGrid, TokenMask};
use layoutfuse_oracles::MaskCase;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

pub const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "small", "large", "fluffy", "shiny", "old", "young", "wooden", "golden", "striped",
];
pub const NOUNS: &[&str] = &[
    "dog", "cat", "car", "bird", "horse", "boat", "robot", "teddy", "apple", "chair", "fox", "rabbit",
];
pub const FILLERS: &[&str] = &["and", "next", "to", "with", "on", "the", "beside", "a", "near", "while"];

pub fn random_grid(rng: &mut impl Rng) -> TokenGrid {
    TokenGrid::new(rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8))
}

pub fn random_box(rng: &mut impl Rng, frames: usize) -> LayoutBox {
    let mut axis = || {
        let a: f64 = rng.random_range(0.0..0.95);
        let b: f64 = rng.random_range(a + 0.05..=1.0);
        (a, b)
    };
    let (x0, x1) = axis();
    let (y0, y1) = axis();
    let f0 = rng.random_range(0..frames);
    let f1 = rng.random_range(f0 + 1..=frames);
    LayoutBox::new([f0, f1], [x0, y0, x1, y1])
}

pub fn random_layout(rng: &mut impl Rng, grid: &TokenGrid, subjects: usize) -> Vec<Vec<LayoutBox>> {
    (0..subjects)
        .map(|_| (0..rng.random_range(1..=2)).map(|_| random_box(rng, grid.frames)).collect())
        .collect()
}

/// Disjoint random spans over `n_text` tokens, in ascending order.
pub fn random_spans(rng: &mut impl Rng, n_text: usize, subjects: usize) -> Vec<SubjectSpan> {
    let mut cuts: Vec<usize> = (0..n_text).collect();
    cuts.shuffle(rng);
    let mut starts: Vec<usize> = cuts[..subjects.min(n_text)].to_vec();
    starts.sort_unstable();
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let limit = starts.get(i + 1).copied().unwrap_or(n_text);
            let e = rng.random_range(s + 1..=limit);
            SubjectSpan::new(format!("s{i}"), s, e)
        })
        .collect()
}

pub fn text_masks(spans: &[SubjectSpan], n_text: usize) -> Vec<TokenMask> {
    spans.iter().map(|s| TokenMask::from(s.token_mask(n_text))).collect()
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Fused layouts from random boxes and random correlations.
pub fn random_fused(rng: &mut impl Rng, grid: &TokenGrid, subjects: usize) -> Vec<TokenMask> {
    let prior = rasterize_prior(&random_layout(rng, grid, subjects), grid).unwrap();
    let corrs: Vec<Vec<f64>> = (0..subjects)
        .map(|_| (0..grid.n_video()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    LayoutSet::from_correlations(prior, &corrs, ThresholdRule::TopK).unwrap().fused
}

pub fn mask_case(l_fuse: &[TokenMask], t_subject: &[TokenMask], context_symmetric: bool) -> MaskCase {
    MaskCase {
        n_video: l_fuse.first().map_or(0, |l| l.len()),
        n_text: t_subject.first().map_or(0, |t| t.len()),
        regions: l_fuse.iter().map(|l| l.to_vec()).collect(),
        phrases: t_subject.iter().map(|t| t.to_vec()).collect(),
        context_symmetric,
    }
}

fn phrase(rng: &mut impl Rng) -> Vec<&'static str> {
    let mut words = Vec::new();
    if rng.random_bool(0.7) {
        words.push(*ADJECTIVES.choose(rng).unwrap());
    }
    words.push(*NOUNS.choose(rng).unwrap());
    words
}

/// A prompt with `subjects` adjective-noun phrases separated by filler words.
pub fn random_prompt(rng: &mut impl Rng, subjects: usize) -> PromptSpec {
    let mut words: Vec<&str> = Vec::new();
    let mut spans = Vec::new();
    for i in 0..subjects {
        for _ in 0..rng.random_range(if i == 0 { 0..=2 } else { 1..=3 }) {
            words.push(FILLERS.choose(rng).unwrap());
        }
        let p = phrase(rng);
        spans.push(SubjectSpan::new(p.join(" "), words.len(), words.len() + p.len()));
        words.extend(p);
    }
    for _ in 0..rng.random_range(0..=2) {
        words.push(FILLERS.choose(rng).unwrap());
    }
    PromptSpec::new(words.join(" "), spans).unwrap()
}

/// Two subjects that share their noun and differ in attribute, the setting
/// where contextual encoding blends one subject into the other.
pub fn confusable_prompt(rng: &mut impl Rng) -> PromptSpec {
    let noun = *NOUNS.choose(rng).unwrap();
    let a = *ADJECTIVES.choose(rng).unwrap();
    let b = loop {
        let b = *ADJECTIVES.choose(rng).unwrap();
        if b != a {
            break b;
        }
    };
    let link = *["and", "next to", "beside", "with"].choose(rng).unwrap();
    let text = format!("a {a} {noun} {link} a {b} {noun}");
    let second = 3 + link.split(' ').count() + 1;
    PromptSpec::new(
        text,
        vec![
            SubjectSpan::new(format!("{a} {noun}"), 1, 3),
            SubjectSpan::new(format!("{b} {noun}"), second, second + 2),
        ],
    )
    .unwrap()
}
