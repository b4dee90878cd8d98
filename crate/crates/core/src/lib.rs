//! Desk-scale laboratory for object-level machine unlearning on
//! scene-graph-to-image generators.
//!
//! The crate trains a small SG2I generator on a synthetic dataset of
//! rendered scenes, removes the influence of individual objects through
//! nine unlearning methods (fine-tuning, masking, and influence-function
//! redaction), verifies the result with an A1/A2/A3 metric grid, and
//! probes for indirect leakage with label-mutation query attacks.

pub mod autodiff;
pub mod harness;
pub mod img;
pub mod leakage;
pub mod metrics;
pub mod model;
pub mod scene_graph;
pub mod synth;
pub mod unlearn;
pub(crate) mod util;
