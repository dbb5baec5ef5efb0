//! Self-supervised vision-transformer training and evaluation for
//! chest-radiograph TB classification.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`backbone`]: ViT architecture (patch tokenization, multi-head
//!   self-attention, class/contrastive tokens) and its forward pass.
//! - [`ssl`]: the three self-supervised objectives (masked reconstruction,
//!   momentum contrast, self-distillation) plus the augmentation pipeline.
//! - [`data`]: manifest ingestion, patient-disjoint stratified splitting,
//!   preprocessing, and a synthetic CXR-like dataset generator.
//! - [`train`]: AdamW with cosine LR/WD schedules, the pre-train / probe /
//!   fine-tune protocols, and the checkpoint format.
//! - [`eval`]: ACC/AUC/AUPR with DeLong and bootstrap confidence intervals,
//!   ROC/PR curve export, and checkpoint evaluation.
//!
//! All heavy inner loops (batch scoring, gradient accumulation, bootstrap
//! resampling, synthetic image generation) run through [`par::map_ordered`],
//! which is data-parallel when the default `parallel` feature is enabled and
//! sequential otherwise. Results are bitwise identical in both modes: work is
//! mapped per item and reduced in a fixed order.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod par;
pub mod rng;
pub mod ssl;
pub mod train;

pub use error::{Error, Result};
