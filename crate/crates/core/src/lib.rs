//! Non-parametric texture synthesis: a channel-wise Saab analysis pipeline,
//! a mixture-of-ICA core generator, and image quilting.

pub mod config;
pub mod coregen;
pub mod cwsaab;
pub mod error;
pub mod format;
mod linalg;
pub mod patchio;
pub mod quilt;
pub mod saab;
pub mod synth;

pub use config::NitesConfig;
pub use coregen::{GeneratorConfig, GeneratorModel};
pub use cwsaab::{HopConfig, KeepPolicy, PipelineModel, StageTensor};
pub use error::{Error, Result};
pub use format::{load_model, save_model};
pub use patchio::{load_image, save_image, ExemplarPatchSet, Patch, RgbImage};
pub use quilt::{quilt, Quilt, QuiltSpec};
pub use saab::{BlockSpec, SaabKernel};
pub use synth::{fit, generate_batch, generate_patch, NitesModel, Session, TimingReport};
