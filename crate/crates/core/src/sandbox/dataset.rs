//! Synthetic moving-squares videos with color-and-position prompts.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{LayoutBox, TokenGrid};
use crate::prompt::{PromptSpec, SubjectSpan};
use crate::rng::RngStream;
use crate::sandbox::denoiser::LATENT_CHANNELS;
use crate::tensor::Tensor;

/// Named colors at the corners of the RGB cube.
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, -1.0, -1.0]),
    ("green", [-1.0, 1.0, -1.0]),
    ("blue", [-1.0, -1.0, 1.0]),
    ("yellow", [1.0, 1.0, -1.0]),
    ("cyan", [-1.0, 1.0, 1.0]),
    ("magenta", [1.0, -1.0, 1.0]),
];

pub fn color_by_name(name: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub grid: TokenGrid,
    /// Square edge in tokens; at most half the grid width.
    pub square: usize,
    /// Probability that a sample holds two squares rather than one.
    pub two_subject_prob: f64,
    /// Probability that the prompt omits the position words.
    pub drop_position_prob: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            grid: TokenGrid::default(),
            square: 4,
            two_subject_prob: 0.5,
            drop_position_prob: 0.5,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.square == 0 || 2 * self.square > self.grid.width || self.square > self.grid.height {
            return Err(Error::InvalidConfig(format!(
                "square of {} tokens does not fit a half of a {}x{} frame",
                self.square, self.grid.height, self.grid.width
            )));
        }
        for (name, p) in [
            ("two_subject_prob", self.two_subject_prob),
            ("drop_position_prob", self.drop_position_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One square: its color, side and top row in every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareTrack {
    pub color: String,
    pub side: Side,
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub video: Tensor,
    pub prompt: PromptSpec,
    pub squares: Vec<SquareTrack>,
}

/// Deterministic sample stream: sample `i` depends only on `(seed, i)`.
#[derive(Debug, Clone)]
pub struct MovingSquares {
    config: DatasetConfig,
}

impl MovingSquares {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn sample(&self, index: u64) -> Sample {
        let c = &self.config;
        let mut rng = RngStream::new(c.seed, vec![1, index]).generator();
        let two = rng.random_bool(c.two_subject_prob);
        let sides: Vec<Side> = if two {
            vec![Side::Left, Side::Right]
        } else {
            vec![*[Side::Left, Side::Right].choose(&mut rng).expect("non-empty")]
        };
        let colors: Vec<&str> = PALETTE
            .choose_multiple(&mut rng, sides.len())
            .map(|&(n, _)| n)
            .collect();
        let max_top = c.grid.height - c.square;
        let span = c.grid.frames.saturating_sub(1);
        let squares: Vec<SquareTrack> = sides
            .iter()
            .zip(&colors)
            .map(|(&side, &color)| {
                // Velocities that keep the square inside the frame throughout.
                let velocities: Vec<i64> = (-1..=1)
                    .filter(|v| {
                        let reach = v * span as i64;
                        (0..=max_top as i64).any(|t| (0..=max_top as i64).contains(&(t + reach)))
                    })
                    .collect();
                let v = *velocities.choose(&mut rng).expect("static motion always fits");
                let reach = v * span as i64;
                let starts: Vec<i64> = (0..=max_top as i64)
                    .filter(|t| (0..=max_top as i64).contains(&(t + reach)))
                    .collect();
                let top = *starts.choose(&mut rng).expect("non-empty by construction");
                SquareTrack {
                    color: color.to_string(),
                    side,
                    rows: (0..c.grid.frames).map(|f| (top + v * f as i64) as usize).collect(),
                }
            })
            .collect();
        let with_position = !rng.random_bool(c.drop_position_prob);
        let mut order: Vec<usize> = (0..squares.len()).collect();
        if !with_position && rng.random_bool(0.5) {
            order.reverse();
        }
        let prompt = square_prompt(
            &order
                .iter()
                .map(|&i| (squares[i].color.as_str(), with_position.then_some(squares[i].side)))
                .collect::<Vec<_>>(),
        );
        Sample {
            video: render(&c.grid, c.square, &squares),
            prompt,
            squares,
        }
    }
}

/// Builds "a red square on the left and a blue square" style prompts with
/// one subject span per `color square` phrase.
pub fn square_prompt(parts: &[(&str, Option<Side>)]) -> PromptSpec {
    let mut words: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    for (i, (color, side)) in parts.iter().enumerate() {
        if i > 0 {
            words.push("and".into());
        }
        words.push("a".into());
        spans.push(SubjectSpan::new(format!("{color} square"), words.len(), words.len() + 2));
        words.push((*color).into());
        words.push("square".into());
        if let Some(side) = side {
            words.extend(["on".into(), "the".into(), side.word().into()]);
        }
    }
    PromptSpec::new(words.join(" "), spans).expect("generated prompts are well formed")
}

/// Renders squares over a zero background; later squares paint over earlier ones.
pub fn render(grid: &TokenGrid, square: usize, squares: &[SquareTrack]) -> Tensor {
    let mut video = Tensor::zeros(&[grid.n_video(), LATENT_CHANNELS]);
    for sq in squares {
        let color = color_by_name(&sq.color).expect("palette color");
        let x0 = match sq.side {
            Side::Left => (grid.width / 2 - square) / 2,
            Side::Right => grid.width / 2 + (grid.width / 2 - square) / 2,
        };
        for (f, &top) in sq.rows.iter().enumerate() {
            for y in top..top + square {
                for x in x0..x0 + square {
                    video.row_mut(grid.index(f, y, x)).copy_from_slice(&color);
                }
            }
        }
    }
    video
}

/// Static box covering the vertical middle of one half of the frame.
pub fn half_box(grid: &TokenGrid, side: Side, square: usize) -> LayoutBox {
    let half = grid.width / 2;
    let x0 = match side {
        Side::Left => (half - square) / 2,
        Side::Right => half + (half - square) / 2,
    };
    let y0 = (grid.height - square) / 2;
    let (w, h) = (grid.width as f64, grid.height as f64);
    LayoutBox {
        frame_range: [0, grid.frames],
        bbox: [
            x0 as f64 / w,
            y0 as f64 / h,
            (x0 + square) as f64 / w,
            (y0 + square) as f64 / h,
        ],
    }
}
