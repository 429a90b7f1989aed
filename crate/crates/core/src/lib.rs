//! Single-shot detection and 5-DOF pose regression of instrument shafts.
//!
//! The crate covers the whole pipeline: procedural rendering of annotated training images,
//! a small differentiable CNN toolkit, the multi-scale detector with its pose head, and the
//! detection / pose evaluation metrics.

pub mod datagen;
pub mod detector;
pub mod geometry;
pub mod gradsuite;
pub mod infer_eval;
pub mod nn;
pub mod renderer;
