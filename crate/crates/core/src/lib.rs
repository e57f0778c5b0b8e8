//! Geometric flow matching and robot-action data tooling.
//!
//! - [`so3`]: half-space unit quaternions and rotation matrices.
//! - [`flowmatch`]: conditional flow matching in R³ and on S³.
//! - [`tokenizer3d`]: equal-mass 3D coordinate tokens.
//! - [`actionpipe`]: resampling, delta-action chunks, normalization, mixtures.
//! - [`scenegeom`]: point-cloud geometry and templated VQA generation.
//! - [`toytrainer`]: a small MLP denoiser trained with the flow losses.
//! - [`blob`], [`manifest`]: on-disk formats shared by the CLI.

pub mod actionpipe;
pub mod blob;
pub mod flowmatch;
pub mod manifest;
pub mod scenegeom;
pub mod seeding;
pub mod so3;
pub mod tokenizer3d;
pub mod toytrainer;

pub use flowmatch::{Action, ActionChunk, FieldStep, FieldTarget, FmConfig, NoisySample};
pub use so3::{Quaternion, RotationMatrix};
