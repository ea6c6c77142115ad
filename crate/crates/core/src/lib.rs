//! Two-stage domain-generalizable re-identification training framework.
//!
//! Pipeline overview: spectral preprocessing splits each source image into a
//! domain-invariant image (stage-1 input) and a style-perturbation image
//! (stage-2 input); stage 1 learns per-identity per-expert prompts through a
//! multi-expert adversarial module over frozen encoder features; stage 2
//! fine-tunes the image encoder under an identity loss, prompt-classifier
//! supervision and distillation from a mixture-of-experts teacher. Evaluation
//! is single-query CMC/mAP retrieval on original images.

pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod meka;
pub mod moe;
pub mod nn;
pub mod objectives;
pub mod spectral;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
