//! The artifact directory of one run and its manifest.
//!
//! ```text
//! manifest.json
//! frames/frame_000.ppm ...
//! latent.{json,bin}
//! embeddings.json
//! masks/{prior,adapt,fused}.{json,bin}
//! masks/joint_mask.{json,bin}  or  masks/{self_mask,cross_mask}.{json,bin}
//! attention/step_000.{json,bin} ...
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dump::{read_f64, read_masks, write_bit_matrix, write_f64, write_masks, MaskStackHeader, MASK_ENCODING};
use crate::io::image::Image;
use crate::io::layout_file::LayoutFile;
use crate::io::run_config::RunConfig;
use crate::io::{read_json, sha256_hex, write_json};
use crate::attention::BitMatrix;
use crate::layout::TokenMask;
use crate::prompt::pool_span;
use crate::tensor::cosine;
use crate::sandbox::denoiser::{LayerMask, LATENT_CHANNELS};
use crate::sandbox::sampler::{latent_to_frames, Generation, PhaseTimings, StepRecord};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub sampler: u64,
    pub encoder: u64,
    pub weights: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gating {
    /// Both mechanisms off: the run must match the plain sampler.
    pub baseline_equivalent: bool,
    pub dlfa_steps: usize,
    pub masked_steps: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub file: String,
    pub sha256: String,
}

/// Wall-clock data; the only part of a run directory that varies between
/// identical invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub phases: PhaseTimings,
    pub write_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub layout: LayoutFile,
    pub weights: Option<WeightsRef>,
    pub gating: Gating,
    pub frames: Vec<FrameRef>,
    pub artifacts: Vec<String>,
    pub timing: Timing,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                format!("{}: version", path.display()),
                format!("unsupported manifest version {}", m.version),
            ));
        }
        Ok(m)
    }
}

/// Pooled subject embeddings around disambiguation, for similarity tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub subjects: Vec<String>,
    pub sad_enabled: bool,
    pub tau: f64,
    pub pooled_prompt: Vec<Vec<f64>>,
    pub pooled_anchors: Vec<Vec<f64>>,
    /// Pooled conditional embeddings at the first step.
    pub pooled_after_sad: Vec<Vec<f64>>,
    pub confusion: Option<Vec<f64>>,
    pub direction_norms: Option<Vec<f64>>,
    pub omega: Vec<f64>,
}

/// Cosine tables before and after disambiguation. `*_anchor[k][i]` compares
/// subject `k`'s pooled embedding with anchor `i`; `*_inter[k][j]` compares
/// pooled subject embeddings with each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTables {
    pub subjects: Vec<String>,
    pub before_anchor: Vec<Vec<f64>>,
    pub after_anchor: Vec<Vec<f64>>,
    pub before_inter: Vec<Vec<f64>>,
    pub after_inter: Vec<Vec<f64>>,
}

impl EmbeddingReport {
    pub fn tables(&self) -> Result<SimilarityTables> {
        let table = |rows: &[Vec<f64>], cols: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            rows.iter()
                .map(|r| cols.iter().map(|c| cosine(r, c)).collect::<Result<Vec<_>>>())
                .collect()
        };
        Ok(SimilarityTables {
            subjects: self.subjects.clone(),
            before_anchor: table(&self.pooled_prompt, &self.pooled_anchors)?,
            after_anchor: table(&self.pooled_after_sad, &self.pooled_anchors)?,
            before_inter: table(&self.pooled_prompt, &self.pooled_prompt)?,
            after_inter: table(&self.pooled_after_sad, &self.pooled_after_sad)?,
        })
    }
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

pub fn frame_name(f: usize) -> String {
    format!("frame_{f:03}.ppm")
}

/// Writes every enabled artifact of `generation` under `dir` and returns the
/// manifest, which is also written as `manifest.json`.
pub fn write_run(
    dir: &Path,
    layout: &LayoutFile,
    config: &RunConfig,
    weights: Option<WeightsRef>,
    generation: &Generation,
    started_unix_ms: u128,
) -> Result<Manifest> {
    let t0 = std::time::Instant::now();
    std::fs::create_dir_all(dir)?;
    let grid = config.sampler.grid;
    let names = layout.subject_names();
    let mut artifacts = Vec::new();
    let mut frames = Vec::new();

    if config.dump.frames {
        let fdir = dir.join("frames");
        std::fs::create_dir_all(&fdir)?;
        for (f, rgb) in latent_to_frames(&generation.latent, &grid).into_iter().enumerate() {
            let img = Image::new(grid.width, grid.height, 3, rgb)?;
            let bytes = img.encode();
            let path = fdir.join(frame_name(f));
            std::fs::write(&path, &bytes)?;
            frames.push(FrameRef {
                file: rel(dir, &path),
                sha256: sha256_hex(&bytes),
            });
        }
    }

    if config.dump.latent {
        write_f64(
            dir,
            "latent",
            &[grid.n_video(), LATENT_CHANNELS],
            generation.latent.data(),
            serde_json::json!({ "grid": grid }),
        )?;
        artifacts.extend(["latent.json".into(), "latent.bin".into()]);
    }

    if config.dump.embeddings {
        let c = &generation.conditioning;
        let after = c.conditional(0, config.sampler.steps)?;
        let report = EmbeddingReport {
            subjects: names.clone(),
            sad_enabled: c.sad.is_some(),
            tau: config.sampler.sad.tau,
            pooled_prompt: c.embeddings.pooled_prompt.clone(),
            pooled_anchors: c.embeddings.pooled_anchors.clone(),
            pooled_after_sad: c
                .prompt
                .subjects
                .iter()
                .map(|s| pool_span(&after, s))
                .collect::<Result<_>>()?,
            confusion: c.sad.as_ref().map(|s| s.confusion.clone()),
            direction_norms: c
                .sad
                .as_ref()
                .map(|s| s.directions.iter().map(|d| crate::tensor::norm(d)).collect()),
            omega: generation.steps.iter().map(|s| s.omega).collect(),
        };
        write_json(&dir.join("embeddings.json"), &report)?;
        artifacts.push("embeddings.json".into());
    }

    if config.dump.masks {
        let mdir = dir.join("masks");
        std::fs::create_dir_all(&mdir)?;
        let header = |layers| MaskStackHeader {
            grid,
            subjects: names.clone(),
            layers,
            encoding: MASK_ENCODING.into(),
        };
        write_masks(&mdir, "prior", &header(1), &generation.prior)?;
        artifacts.extend(["masks/prior.json".into(), "masks/prior.bin".into()]);
        let layers = generation.first_layouts.len();
        if layers > 0 {
            for (stem, pick) in [("adapt", 0), ("fused", 1)] {
                let stack: Vec<TokenMask> = generation
                    .first_layouts
                    .iter()
                    .flat_map(|l| if pick == 0 { l.adapt.clone() } else { l.fused.clone() })
                    .collect();
                write_masks(&mdir, stem, &header(layers), &stack)?;
                artifacts.extend([format!("masks/{stem}.json"), format!("masks/{stem}.bin")]);
            }
        }
        let meta = serde_json::json!({
            "n_video": grid.n_video(),
            "n_text": generation.conditioning.prompt.n_text(),
            "step": 0,
            "layer": layers.saturating_sub(1),
        });
        match &generation.first_mask {
            Some(LayerMask::Joint(m)) => {
                write_bit_matrix(&mdir, "joint_mask", &m.bits, meta)?;
                artifacts.extend(["masks/joint_mask.json".into(), "masks/joint_mask.bin".into()]);
            }
            Some(LayerMask::Cross(m)) => {
                let stack = |ms: &[BitMatrix], cols| {
                    BitMatrix::from_bits(
                        ms.iter().map(|b| b.rows()).sum(),
                        cols,
                        ms.iter().flat_map(|b| b.bits().iter().copied()).collect(),
                    )
                };
                let hw = grid.frame_tokens();
                let nt = generation.conditioning.prompt.n_text();
                write_bit_matrix(&mdir, "self_mask", &stack(&m.self_masks, hw)?, meta.clone())?;
                write_bit_matrix(&mdir, "cross_mask", &stack(&m.cross_masks, nt)?, meta)?;
                for stem in ["self_mask", "cross_mask"] {
                    artifacts.extend([format!("masks/{stem}.json"), format!("masks/{stem}.bin")]);
                }
            }
            None => {}
        }
    }

    if config.dump.attention {
        let adir = dir.join("attention");
        std::fs::create_dir_all(&adir)?;
        for cap in &generation.attention {
            let m = cap.subject_maps.len();
            let data: Vec<f64> = cap.subject_maps.iter().flatten().copied().collect();
            let stem = format!("step_{:03}", cap.step);
            write_f64(
                &adir,
                &stem,
                &[m, grid.n_video()],
                &data,
                serde_json::json!({ "step": cap.step, "grid": grid, "subjects": names }),
            )?;
            artifacts.extend([format!("attention/{stem}.json"), format!("attention/{stem}.bin")]);
        }
    }

    let s = &config.sampler;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        seeds: Seeds {
            sampler: s.seed,
            encoder: s.encoder_seed,
            weights: config.denoiser.weight_seed,
        },
        layout: layout.clone(),
        weights,
        gating: Gating {
            baseline_equivalent: !s.sad.enabled && s.dlfa_steps() == 0,
            dlfa_steps: s.dlfa_steps(),
            masked_steps: generation.masked_steps,
            steps: generation.steps.clone(),
        },
        frames,
        artifacts,
        timing: Timing {
            started_unix_ms,
            finished_unix_ms: unix_ms(),
            phases: generation.timings.clone(),
            write_ms: t0.elapsed().as_secs_f64() * 1e3,
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Read side of a run directory, for inspection.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(&root.join("manifest.json"))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn embeddings(&self) -> Result<EmbeddingReport> {
        read_json(&self.root.join("embeddings.json"))
    }

    pub fn masks(&self, stem: &str) -> Result<(MaskStackHeader, Vec<TokenMask>)> {
        read_masks(&self.root.join("masks"), stem)
    }

    /// Per-step subject attention maps, `M × N_video` each.
    pub fn attention(&self) -> Result<Vec<(usize, Vec<Vec<f64>>)>> {
        let adir = self.root.join("attention");
        let mut out = Vec::new();
        for a in &self.manifest.artifacts {
            let Some(stem) = a.strip_prefix("attention/").and_then(|s| s.strip_suffix(".json")) else {
                continue;
            };
            let (h, data) = read_f64(&adir, stem)?;
            let step = h.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
            let n = h.shape.get(1).copied().unwrap_or(0);
            let maps = if n == 0 { Vec::new() } else { data.chunks(n).map(|c| c.to_vec()).collect() };
            out.push((step, maps));
        }
        if out.is_empty() && !self.manifest.artifacts.iter().any(|a| a.starts_with("attention/")) {
            return Err(Error::NotFound(adir));
        }
        Ok(out)
    }

    pub fn frame(&self, f: usize) -> Result<Image> {
        Image::read(&self.root.join("frames").join(frame_name(f)))
    }
}
