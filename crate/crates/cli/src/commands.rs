use std::path::Path;

use layoutfuse_core::disambiguation::attenuation;
use layoutfuse_core::io::run_dir::{unix_ms, EmbeddingReport};
use layoutfuse_core::io::{read_bytes, write_json, Image, LayoutFile, Manifest, RunConfig, RunDir, WeightsFile, WeightsRef};
use layoutfuse_core::io::weights::TrainingNotes;
use layoutfuse_core::prompt::pool_span;
use layoutfuse_core::sandbox::sampler::Conditioning;
use layoutfuse_core::sandbox::train::{smoothed, train_toy_with};
use layoutfuse_core::sandbox::{generate, AttentionLayout, DatasetConfig, Denoiser, DenoiserSpec, TrainConfig};
use layoutfuse_core::tensor::norm;
use layoutfuse_core::{Error, MaskMode, TextEncoder, ThresholdRule, TokenGrid, TokenMask};

use crate::exit::{artifact, CliError, CliResult, Kind};
use crate::{InspectArgs, ModeArg, ReplayArgs, RunArgs, SadArgs, SemanticsArg, TrainArgs};

fn load_layout(path: &Path) -> CliResult<LayoutFile> {
    let bytes = read_bytes(path)?;
    LayoutFile::parse(&bytes).map_err(|e| match e {
        Error::Format { path: field, reason } => {
            CliError::new(Kind::Layout, format!("{}: {field}: {reason}", path.display()))
        }
        other => other.into(),
    })
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => {
            let bytes = read_bytes(p)?;
            RunConfig::parse(&bytes)
                .map_err(|e| CliError::new(Kind::InvalidConfig, format!("{}: {e}", p.display())))
        }
        None => Ok(RunConfig::default()),
    }
}

/// Loads weights from `path` (or seeds a fresh denoiser) and returns the
/// reference recorded in the manifest.
fn load_denoiser(path: Option<&Path>, spec: DenoiserSpec) -> CliResult<(Denoiser, Option<WeightsRef>, DenoiserSpec)> {
    match path {
        Some(p) => {
            let (file, sha256) = WeightsFile::load(p).map_err(|e| match e {
                Error::NotFound(_) => CliError::new(Kind::Weights, format!("{}: no such weights file", p.display())),
                other => other.into(),
            })?;
            let denoiser = file.denoiser()?;
            Ok((
                denoiser,
                Some(WeightsRef {
                    path: p.to_path_buf(),
                    sha256,
                }),
                file.spec,
            ))
        }
        None => Ok((Denoiser::new(spec)?, None, spec)),
    }
}

fn apply_run_overrides(config: &mut RunConfig, a: &RunArgs) {
    let s = &mut config.sampler;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(steps) = a.steps {
        *s = s.with_steps(steps);
    }
    if a.no_sad {
        s.sad.enabled = false;
    }
    if let Some(x) = a.dlfa_fraction {
        s.dlfa_fraction = x;
    }
    if let Some(m) = a.mode {
        s.mode = match m {
            ModeArg::Joint => AttentionLayout::Joint,
            ModeArg::Crossattn => AttentionLayout::CrossAttn,
        };
    }
    if let Some(m) = a.mask_semantics {
        s.mask_semantics.mode = match m {
            SemanticsArg::Additive => MaskMode::Additive,
            SemanticsArg::Mult => MaskMode::Multiplicative,
        };
    }
    if a.context_symmetric {
        s.mask_semantics.context_symmetric = true;
    }
    if a.strict_threshold {
        s.threshold = ThresholdRule::Strict;
    }
    if let Some(w) = &a.weights {
        config.weights = Some(w.clone());
    }
}

pub fn run(a: RunArgs) -> CliResult {
    let started = unix_ms();
    let layout = load_layout(&a.layout)?;
    let mut config = load_config(a.config.as_deref())?;
    apply_run_overrides(&mut config, &a);
    let out = a
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| CliError::new(Kind::Usage, "no output directory: pass --out or set out_dir"))?;
    config.out_dir = None;
    // The layout file owns the token grid.
    config.sampler.grid = layout.grid;
    config.validate()?;

    let weights_path = match &config.weights {
        Some(p) => Some(std::fs::canonicalize(p).map_err(|_| {
            CliError::new(Kind::Weights, format!("{}: no such weights file", p.display()))
        })?),
        None => None,
    };
    config.weights = weights_path.clone();
    let (denoiser, weights, spec) = load_denoiser(weights_path.as_deref(), config.denoiser)?;
    config.denoiser = spec;

    let prompt = layout.prompt_spec()?;
    let generation = generate(&denoiser, &prompt, &layout.prior_layout(), &config.sampler)?;
    let manifest = layoutfuse_core::io::write_run(&out, &layout, &config, weights, &generation, started)?;
    println!(
        "wrote {} frames to {} ({} of {} steps masked, sad {})",
        manifest.frames.len(),
        out.display(),
        manifest.gating.masked_steps,
        config.sampler.steps,
        if config.sampler.sad.enabled { "on" } else { "off" }
    );
    Ok(())
}

pub fn replay(a: ReplayArgs) -> CliResult {
    let started = unix_ms();
    let manifest = Manifest::load(&a.manifest).map_err(artifact)?;
    let config = &manifest.config;
    config.validate()?;
    let (denoiser, weights, _) = match &manifest.weights {
        Some(w) => {
            let loaded = load_denoiser(Some(&w.path), config.denoiser)?;
            let sha = &loaded.1.as_ref().expect("weights were given").sha256;
            if *sha != w.sha256 {
                return Err(CliError::new(
                    Kind::Weights,
                    format!("{}: sha256 {sha} differs from the recorded {}", w.path.display(), w.sha256),
                ));
            }
            loaded
        }
        None => load_denoiser(None, config.denoiser)?,
    };
    let prompt = manifest.layout.prompt_spec()?;
    let generation = generate(&denoiser, &prompt, &manifest.layout.prior_layout(), &config.sampler)?;
    let rerun = layoutfuse_core::io::write_run(&a.out, &manifest.layout, config, weights, &generation, started)?;
    if rerun.frames != manifest.frames {
        let first = rerun
            .frames
            .iter()
            .zip(&manifest.frames)
            .find(|(x, y)| x != y)
            .map(|(x, _)| x.file.clone())
            .unwrap_or_else(|| "frame count".into());
        return Err(CliError::new(Kind::Runtime, format!("replay diverged at {first}")));
    }
    println!("replayed {} frames into {}: all match", rerun.frames.len(), a.out.display());
    Ok(())
}

fn print_table(title: &str, names: &[String], cols: &[String], t: &[Vec<f64>]) {
    println!("{title}");
    print!("{:>12}", "");
    for c in cols {
        print!(" {c:>10}");
    }
    println!();
    for (name, row) in names.iter().zip(t) {
        print!("{name:>12}");
        for v in row {
            print!(" {v:>10.4}");
        }
        println!();
    }
}

fn mask_image(grid: &TokenGrid, masks: &[&TokenMask], f: usize) -> Vec<u8> {
    let hw = grid.frame_tokens();
    (0..hw)
        .flat_map(|p| masks.iter().map(move |m| if m[f * hw + p] { 255 } else { 0 }))
        .collect()
}

/// The last layer's masks, one per subject, from a layer-major stack.
fn last_layer(stack: &[TokenMask], subjects: usize) -> &[TokenMask] {
    &stack[stack.len().saturating_sub(subjects)..]
}

pub fn inspect(a: InspectArgs) -> CliResult {
    let run = RunDir::open(&a.run).map_err(artifact)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("inspect"));
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    let scale = a.scale.max(1);
    let grid = run.manifest.config.sampler.grid;
    let names = run.manifest.layout.subject_names();

    let tables = run.embeddings().map_err(artifact)?.tables()?;
    write_json(&out.join("similarity.json"), &tables)?;
    let anchors: Vec<String> = names.iter().map(|n| format!("A:{n}")).collect();
    print_table("cosine to anchors, before disambiguation", &names, &anchors, &tables.before_anchor);
    print_table("cosine to anchors, after disambiguation", &names, &anchors, &tables.after_anchor);
    print_table("subject cosine, before disambiguation", &names, &names, &tables.before_inter);
    print_table("subject cosine, after disambiguation", &names, &names, &tables.after_inter);

    let hw = grid.frame_tokens();
    let attention = run.attention().map_err(artifact)?;
    for (step, maps) in &attention {
        for (name, map) in names.iter().zip(maps) {
            let peak = map.iter().copied().fold(0.0_f64, f64::max);
            for f in 0..grid.frames {
                let values: Vec<f64> = map[f * hw..(f + 1) * hw]
                    .iter()
                    .map(|v| if peak > 0.0 { v / peak } else { 0.0 })
                    .collect();
                Image::gray_from_unit(grid.width, grid.height, &values)?
                    .upscale(scale)
                    .write(&out.join(format!("attn_step{step:03}_{name}_f{f:03}.pgm")))?;
            }
        }
    }

    let (_, prior) = run.masks("prior").map_err(artifact)?;
    let m = names.len();
    let (adapt, fused) = match (run.masks("adapt"), run.masks("fused")) {
        (Ok((_, adapt)), Ok((_, fused))) => (last_layer(&adapt, m).to_vec(), last_layer(&fused, m).to_vec()),
        // No masked step ran: the fused layout is the prior.
        (Err(Error::NotFound(_)), Err(Error::NotFound(_))) => (vec![TokenMask::empty(grid.n_video()); m], prior.clone()),
        (Err(e), _) | (_, Err(e)) => return Err(artifact(e)),
    };
    for (k, name) in names.iter().enumerate() {
        for f in 0..grid.frames {
            for (label, mask) in [("prior", &prior[k]), ("adapt", &adapt[k]), ("fused", &fused[k])] {
                Image::new(grid.width, grid.height, 1, mask_image(&grid, &[mask], f))?
                    .upscale(scale)
                    .write(&out.join(format!("mask_{label}_{name}_f{f:03}.pgm")))?;
            }
            Image::new(grid.width, grid.height, 3, mask_image(&grid, &[&prior[k], &adapt[k], &fused[k]], f))?
                .upscale(scale)
                .write(&out.join(format!("overlay_{name}_f{f:03}.ppm")))?;
        }
    }
    println!("wrote inspection images to {}", out.display());
    Ok(())
}

pub fn sad(a: SadArgs) -> CliResult {
    let layout = load_layout(&a.layout)?;
    let mut config = load_config(a.config.as_deref())?;
    if let Some(steps) = a.steps {
        config.sampler = config.sampler.with_steps(steps);
    }
    if let Some(tau) = a.tau {
        config.sampler.sad.tau = tau;
    }
    config.sampler.sad.enabled = true;
    config.validate()?;
    let s = &config.sampler;
    let prompt = layout.prompt_spec()?;
    let cond = Conditioning::new(&TextEncoder::from_seed(s.encoder_seed), &prompt, &s.sad)?;
    let after = cond.conditional(0, s.steps)?;
    let report = EmbeddingReport {
        subjects: layout.subject_names(),
        sad_enabled: cond.sad.is_some(),
        tau: s.sad.tau,
        pooled_prompt: cond.embeddings.pooled_prompt.clone(),
        pooled_anchors: cond.embeddings.pooled_anchors.clone(),
        pooled_after_sad: prompt
            .subjects
            .iter()
            .map(|sp| pool_span(&after, sp))
            .collect::<layoutfuse_core::Result<_>>()?,
        confusion: cond.sad.as_ref().map(|st| st.confusion.clone()),
        direction_norms: cond.sad.as_ref().map(|st| st.directions.iter().map(|d| norm(d)).collect()),
        omega: (0..s.steps)
            .map(|t| attenuation(t, s.steps))
            .collect::<layoutfuse_core::Result<_>>()?,
    };
    let tables = report.tables()?;
    let json = serde_json::json!({
        "subjects": report.subjects,
        "tau": report.tau,
        "confusion": report.confusion,
        "direction_norms": report.direction_norms,
        "omega": report.omega,
        "similarity": tables,
    });
    println!("{}", serde_json::to_string_pretty(&json).map_err(Error::from)?);
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut config = TrainConfig::default();
    if let Some(v) = a.steps {
        config.steps = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    let mut spec = DenoiserSpec::default();
    if let Some(v) = a.layers {
        spec.layers = v;
    }
    if let Some(v) = a.d_model {
        spec.d_model = v;
    }
    if let Some(v) = a.heads {
        spec.heads = v;
    }
    if let Some(v) = a.weight_seed {
        spec.weight_seed = v;
    }
    spec.validate()?;
    config.validate()?;
    let dataset = DatasetConfig {
        seed: config.seed,
        ..DatasetConfig::default()
    };

    let mut window = Vec::new();
    let report = train_toy_with(&dataset, &spec, &config, |it, loss| {
        window.push(loss);
        if a.log_every > 0 && (it + 1) % a.log_every == 0 {
            let recent = &window[window.len().saturating_sub(a.log_every)..];
            eprintln!("iter {:>6}  loss {:.5}", it + 1, recent.iter().sum::<f64>() / recent.len() as f64);
        }
    })?;
    let final_loss = smoothed(&report.losses, 100).last().copied().unwrap_or(f64::NAN);
    let file = WeightsFile {
        spec,
        weights: report.denoiser.weights.clone(),
        training: Some(TrainingNotes {
            dataset,
            config,
            iterations: report.losses.len(),
            final_loss,
        }),
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::from)?;
    }
    let sha = file.save(&a.out)?;
    println!("wrote {} (sha256 {sha}, final loss {final_loss:.5})", a.out.display());
    Ok(())
}
