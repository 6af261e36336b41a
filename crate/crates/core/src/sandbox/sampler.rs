//! Sampling: localized noise init, the gated denoising step and full runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::MaskSemantics;
use crate::disambiguation::{attenuation, SadConfig, SadState};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::layout::{rasterize_prior, LayoutBox, LayoutSet, ThresholdRule, TokenGrid, TokenMask};
use crate::prompt::{EmbeddingSet, PromptSpec};
use crate::rng::{gaussian_field, RngStream};
use crate::sandbox::denoiser::{
    AttentionLayout, Denoiser, DlfaContext, ForwardInput, ForwardTrace, LayerMask, Masking, LATENT_CHANNELS, TEXT_DIM,
};
use crate::sandbox::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Leading fraction of steps that run layout-masked attention.
    pub dlfa_fraction: f64,
    pub grid: TokenGrid,
    pub mode: AttentionLayout,
    pub seed: u64,
    pub encoder_seed: u64,
    pub sad: SadConfig,
    pub mask_semantics: MaskSemantics,
    pub threshold: ThresholdRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 6.0,
            dlfa_fraction: 0.10,
            grid: TokenGrid::default(),
            mode: AttentionLayout::Joint,
            seed: 0,
            encoder_seed: 0,
            sad: SadConfig::default(),
            mask_semantics: MaskSemantics::default(),
            threshold: ThresholdRule::TopK,
        }
    }
}

impl SamplerConfig {
    /// Sets the step count, keeping the disambiguation horizon in sync.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.sad.total_steps = steps;
        self
    }

    /// Both mechanisms off: the plain guided sampler.
    pub fn baseline(mut self) -> Self {
        self.sad.enabled = false;
        self.dlfa_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dlfa_fraction) {
            return Err(Error::InvalidConfig(format!(
                "dlfa_fraction must lie in [0, 1], got {}",
                self.dlfa_fraction
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::InvalidConfig("guidance_scale must be finite".into()));
        }
        self.grid.validate()?;
        self.sad.validate()?;
        if self.sad.total_steps != self.steps {
            return Err(Error::InvalidConfig(format!(
                "sad.total_steps ({}) must equal steps ({})",
                self.sad.total_steps, self.steps
            )));
        }
        Ok(())
    }

    /// Number of leading steps with masked attention: `⌈fraction·T⌉`.
    pub fn dlfa_steps(&self) -> usize {
        // The epsilon keeps products like 0.1·50 from rounding up past 5.
        let raw = self.dlfa_fraction * self.steps as f64 - 1e-9;
        (raw.ceil().max(0.0) as usize).min(self.steps)
    }

    pub fn dlfa_active(&self, step: usize) -> bool {
        step < self.dlfa_steps()
    }
}

/// Background from stream `(seed, [0])`; subject `i` (1-based) overwrites its
/// prior region from `(seed, [i])`, in ascending order.
pub fn init_noise(seed: u64, grid: &TokenGrid, prior: &[TokenMask]) -> Result<Tensor> {
    let subjects: Vec<RngStream> = (1..=prior.len() as u64).map(|i| RngStream::new(seed, vec![i])).collect();
    init_noise_with_streams(grid, &RngStream::new(seed, vec![0]), &subjects, prior)
}

pub fn init_noise_with_streams(
    grid: &TokenGrid,
    background: &RngStream,
    subjects: &[RngStream],
    prior: &[TokenMask],
) -> Result<Tensor> {
    let nv = grid.n_video();
    if subjects.len() != prior.len() {
        return Err(Error::arg("one noise stream per subject region is required"));
    }
    if let Some(m) = prior.iter().find(|m| m.len() != nv) {
        return Err(Error::arg(format!("region mask of length {} on a grid of {nv} tokens", m.len())));
    }
    let shape = [nv, LATENT_CHANNELS];
    let mut latent = gaussian_field(background, &shape);
    for (stream, region) in subjects.iter().zip(prior) {
        let field = gaussian_field(stream, &shape);
        for p in region.indices() {
            latent.row_mut(p).copy_from_slice(field.row(p));
        }
    }
    Ok(latent)
}

/// Text-side inputs shared by every step of a run.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub prompt: PromptSpec,
    pub embeddings: EmbeddingSet,
    /// `None` when disambiguation is disabled.
    pub sad: Option<SadState>,
    pub unconditional: Tensor,
    pub text_masks: Vec<TokenMask>,
}

impl Conditioning {
    pub fn new(encoder: &TextEncoder, prompt: &PromptSpec, sad: &SadConfig) -> Result<Self> {
        prompt.validate()?;
        let embeddings = EmbeddingSet::build(encoder, prompt)?;
        if embeddings.dim() != TEXT_DIM {
            return Err(Error::arg(format!(
                "encoder width {} does not match the denoiser text width {TEXT_DIM}",
                embeddings.dim()
            )));
        }
        let sad = if sad.enabled && prompt.n_subjects() > 0 {
            Some(SadState::from_embeddings(&embeddings, sad.tau)?)
        } else {
            None
        };
        Ok(Self {
            unconditional: Tensor::zeros(&[prompt.n_text(), TEXT_DIM]),
            text_masks: prompt.token_masks().into_iter().map(TokenMask::from).collect(),
            prompt: prompt.clone(),
            embeddings,
            sad,
        })
    }

    /// Conditional text embeddings at `step`.
    pub fn conditional(&self, step: usize, total: usize) -> Result<Tensor> {
        match &self.sad {
            Some(state) => state.apply(&self.embeddings.prompt, &self.prompt.subjects, step, total),
            None => Ok(self.embeddings.prompt.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerState {
    pub latent: Tensor,
    pub step: usize,
    /// Steps on which masked attention ran.
    pub masked_steps: usize,
    /// Layouts from the most recent masked step, one set per layer.
    pub layouts: Vec<LayoutSet>,
}

impl SamplerState {
    pub fn new(latent: Tensor) -> Self {
        Self {
            latent,
            step: 0,
            masked_steps: 0,
            layouts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: usize,
    pub omega: f64,
    pub dlfa_active: bool,
    pub masked_layers: usize,
}

/// Extra captures for one step, requested by the caller.
#[derive(Debug, Clone, Default)]
pub struct StepCapture {
    pub layer_masks: Vec<LayerMask>,
    pub subject_attention: Vec<Vec<f64>>,
    pub attention_rows: Option<Tensor>,
}

/// Everything that stays fixed over a run.
pub struct StepContext<'a> {
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub conditioning: &'a Conditioning,
    pub dlfa: Option<&'a DlfaContext>,
    pub config: &'a SamplerConfig,
}

/// Advances `state` by one guided DDIM step.
pub fn denoise_step(state: &mut SamplerState, ctx: &StepContext<'_>, capture: Option<&mut StepCapture>) -> Result<StepRecord> {
    let config = ctx.config;
    let total = config.steps;
    let step = state.step;
    if step >= total {
        return Err(Error::arg(format!("sampler already finished {total} steps")));
    }
    let omega = attenuation(step, total)?;
    let cond_text = ctx.conditioning.conditional(step, total)?;
    let timestep = ctx.schedule.timestep(step, total);
    let grid = config.grid;
    let active = config.dlfa_active(step) && ctx.dlfa.is_some();

    let mut trace = ForwardTrace {
        capture_spans: capture.as_ref().map(|_| ctx.conditioning.prompt.subjects.clone()),
        ..Default::default()
    };
    let cond_input = ForwardInput {
        latent: &state.latent,
        text: &cond_text,
        timestep,
        grid,
        layout: config.mode,
    };
    let masking = match (active, ctx.dlfa) {
        (true, Some(d)) => Masking::Adaptive(d),
        _ => Masking::Off,
    };
    let eps_c = ctx.denoiser.forward(&cond_input, masking, Some(&mut trace))?;
    let uncond_input = ForwardInput {
        text: &ctx.conditioning.unconditional,
        ..cond_input
    };
    let uncond_masking = if active {
        Masking::Fixed(&trace.layer_masks, config.mask_semantics.mode)
    } else {
        Masking::Off
    };
    let eps_u = ctx.denoiser.forward(&uncond_input, uncond_masking, None)?;
    let eps = guide(&eps_u, &eps_c, config.guidance_scale);

    let ab = ctx.schedule.alpha_bar(timestep);
    let ab_prev = ctx.schedule.alpha_bar_after(step, total);
    let next = ctx.schedule.ddim_step(&state.latent, &eps, ab, ab_prev);
    if !next.is_finite() {
        return Err(Error::SamplerDivergence { step });
    }
    state.latent = next;
    state.step += 1;
    if active {
        state.masked_steps += 1;
        state.layouts = std::mem::take(&mut trace.layouts);
    }
    let record = StepRecord {
        step,
        timestep,
        omega,
        dlfa_active: active,
        masked_layers: trace.masked_layers,
    };
    if let Some(c) = capture {
        c.layer_masks = trace.layer_masks;
        c.subject_attention = trace.subject_attention;
        c.attention_rows = trace.attention_rows;
    }
    Ok(record)
}

/// Classifier-free guidance `ε_u + g·(ε_c − ε_u)`.
pub fn guide(eps_u: &Tensor, eps_c: &Tensor, scale: f64) -> Tensor {
    let mut out = eps_u.clone();
    for (o, c) in out.data_mut().iter_mut().zip(eps_c.data()) {
        *o += scale * (c - *o);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub conditioning_ms: f64,
    pub init_noise_ms: f64,
    pub denoise_ms: f64,
    pub total_ms: f64,
}

/// Attention captured at one step.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    pub step: usize,
    /// Per subject, attention mass each video token puts on the subject's text.
    pub subject_maps: Vec<Vec<f64>>,
    /// Head-averaged joint attention rows (joint layout only).
    pub rows: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub latent: Tensor,
    pub conditioning: Conditioning,
    pub prior: Vec<TokenMask>,
    pub steps: Vec<StepRecord>,
    pub masked_steps: usize,
    /// Per-layer layouts from the first step.
    pub first_layouts: Vec<LayoutSet>,
    /// Last-layer mask from the first step, when it was masked.
    pub first_mask: Option<LayerMask>,
    pub attention: Vec<AttentionCapture>,
    pub timings: PhaseTimings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs localized noise init and `T` denoising steps with disambiguation and
/// layout-masked attention as configured.
pub fn generate(
    denoiser: &Denoiser,
    prompt: &PromptSpec,
    layout: &[Vec<LayoutBox>],
    config: &SamplerConfig,
) -> Result<Generation> {
    config.validate()?;
    if layout.len() != prompt.n_subjects() {
        return Err(Error::arg(format!(
            "{} layouts for {} subjects",
            layout.len(),
            prompt.n_subjects()
        )));
    }
    let start = Instant::now();
    let encoder = TextEncoder::from_seed(config.encoder_seed);
    let conditioning = Conditioning::new(&encoder, prompt, &config.sad)?;
    let prior = rasterize_prior(layout, &config.grid)?;
    let conditioning_ms = ms(start);

    let t0 = Instant::now();
    let use_layout = config.dlfa_steps() > 0 && prompt.n_subjects() > 0;
    let latent = if use_layout {
        init_noise(config.seed, &config.grid, &prior)?
    } else {
        init_noise(config.seed, &config.grid, &[])?
    };
    let init_noise_ms = ms(t0);

    let dlfa = use_layout.then(|| DlfaContext {
        prior: prior.clone(),
        text_masks: conditioning.text_masks.clone(),
        spans: prompt.subjects.clone(),
        rule: config.threshold,
        semantics: config.mask_semantics,
    });
    let schedule = NoiseSchedule::default();
    let ctx = StepContext {
        denoiser,
        schedule: &schedule,
        conditioning: &conditioning,
        dlfa: dlfa.as_ref(),
        config,
    };

    let t1 = Instant::now();
    let mut state = SamplerState::new(latent);
    let mut steps = Vec::with_capacity(config.steps);
    let mut first_layouts = Vec::new();
    let mut first_mask = None;
    let mut attention = Vec::new();
    // Capture the first step and the first unmasked step after the window.
    let capture_steps = [0, config.dlfa_steps()];
    while state.step < config.steps {
        let step = state.step;
        let mut capture = StepCapture::default();
        let wants = capture_steps.contains(&step) && !attention.iter().any(|a: &AttentionCapture| a.step == step);
        let record = denoise_step(&mut state, &ctx, wants.then_some(&mut capture))?;
        if wants {
            if step == 0 {
                first_layouts = state.layouts.clone();
                first_mask = capture.layer_masks.pop();
            }
            attention.push(AttentionCapture {
                step,
                subject_maps: capture.subject_attention,
                rows: capture.attention_rows,
            });
        }
        steps.push(record);
    }
    let denoise_ms = ms(t1);

    Ok(Generation {
        latent: state.latent,
        conditioning,
        prior,
        steps,
        masked_steps: state.masked_steps,
        first_layouts,
        first_mask,
        attention,
        timings: PhaseTimings {
            conditioning_ms,
            init_noise_ms,
            denoise_ms,
            total_ms: ms(start),
        },
    })
}

/// The unmodified guided sampler: plain noise, raw prompt embeddings and
/// unmasked attention at every step.
pub fn sample_baseline(denoiser: &Denoiser, prompt: &PromptSpec, config: &SamplerConfig) -> Result<Tensor> {
    config.validate()?;
    let encoder = TextEncoder::from_seed(config.encoder_seed);
    let cond = encoder.encode_prompt(prompt)?;
    let uncond = Tensor::zeros(&[prompt.n_text(), TEXT_DIM]);
    let schedule = NoiseSchedule::default();
    let mut latent = gaussian_field(
        &RngStream::new(config.seed, vec![0]),
        &[config.grid.n_video(), LATENT_CHANNELS],
    );
    for step in 0..config.steps {
        let t = schedule.timestep(step, config.steps);
        let input = ForwardInput {
            latent: &latent,
            text: &cond,
            timestep: t,
            grid: config.grid,
            layout: config.mode,
        };
        let eps_c = denoiser.forward(&input, Masking::Off, None)?;
        let eps_u = denoiser.forward(&ForwardInput { text: &uncond, ..input }, Masking::Off, None)?;
        let eps = guide(&eps_u, &eps_c, config.guidance_scale);
        latent = schedule.ddim_step(&latent, &eps, schedule.alpha_bar(t), schedule.alpha_bar_after(step, config.steps));
        if !latent.is_finite() {
            return Err(Error::SamplerDivergence { step });
        }
    }
    Ok(latent)
}

/// Maps latent channels in `[-1, 1]` to 8-bit RGB, one buffer per frame.
pub fn latent_to_frames(latent: &Tensor, grid: &TokenGrid) -> Vec<Vec<u8>> {
    let hw = grid.frame_tokens();
    (0..grid.frames)
        .map(|f| {
            latent.data()[f * hw * LATENT_CHANNELS..(f + 1) * hw * LATENT_CHANNELS]
                .iter()
                .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8)
                .collect()
        })
        .collect()
}
