//! Training-free compositional conditioning for a toy video diffusion model.
//!
//! Two mechanisms, both applied at inference time only:
//!
//! * [`disambiguation`] pulls each subject's contextual text embedding toward
//!   its own isolated encoding and away from the other subjects'.
//! * [`layout`] and [`attention`] bind subjects to spatiotemporal regions by
//!   fusing planner boxes with model-perceived regions and masking attention
//!   during the first steps of denoising.
//!
//! [`sandbox`] wires both into a small latent video diffusion pipeline and
//! [`io`] holds the file formats.

pub mod attention;
pub mod disambiguation;
pub mod encoder;
pub mod error;
pub mod io;
pub mod layout;
pub mod prompt;
pub mod rng;
pub mod sandbox;
pub mod tensor;

pub use attention::{BitMatrix, JointAttentionMask, MaskMode, MaskSemantics};
pub use disambiguation::{SadConfig, SadState};
pub use encoder::TextEncoder;
pub use error::{Error, Result};
pub use layout::{LayoutBox, LayoutSet, ThresholdRule, TokenGrid, TokenMask};
pub use prompt::{EmbeddingSet, PromptSpec, SubjectSpan};
pub use rng::{gaussian_field, RngStream};
pub use tensor::Tensor;
