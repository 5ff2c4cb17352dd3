//! Instance-aware attention masking for generative video models.
//!
//! The pipeline turns a [`scene::Scene`] (cameras plus tracked 3D boxes) into
//! per-instance pixel masks, downsamples them onto the latent token grid,
//! derives the token-to-instance [`latent::IndicatorIndex`], and from it the
//! additive attention mask over `[visual tokens, identity tokens]` and the
//! foreground loss mask. The numeric side (identity embeddings, masked
//! multi-head attention, noise schedule, masked loss) is generic over
//! [`Real`]; the `*F32` / `*F64` aliases below are the concrete entry points.

pub mod attention;
pub mod bits;
pub mod check;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod latent;
pub mod masks;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use scalar::Real;

pub type TokenMatrixF32 = attention::TokenMatrix<f32>;
pub type TokenMatrixF64 = attention::TokenMatrix<f64>;
pub type AttentionParamsF32 = attention::AttentionParams<f32>;
pub type AttentionParamsF64 = attention::AttentionParams<f64>;
pub type MlpParamsF32 = conditioning::MlpParams<f32>;
pub type MlpParamsF64 = conditioning::MlpParams<f64>;
pub type IdentityEmbeddingF32 = conditioning::IdentityEmbedding<f32>;
pub type IdentityEmbeddingF64 = conditioning::IdentityEmbedding<f64>;
pub type NoiseScheduleF32 = diffusion::NoiseSchedule<f32>;
pub type NoiseScheduleF64 = diffusion::NoiseSchedule<f64>;
pub type LossMapF32 = diffusion::LossMap<f32>;
pub type LossMapF64 = diffusion::LossMap<f64>;
