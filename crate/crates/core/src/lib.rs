//! Confidence-weighted depth refinement for stereo endoscopy.
//!
//! Ensembles of disparity maps are turned into per-pixel confidence, which
//! weights the supervision of a depth refinement loss. The crate also ships a
//! small learned confidence head, a synthetic data generator and the metrics
//! used to compare configurations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod confidence_head;
pub mod ensemble_confidence;
pub mod gradcheck;
pub mod losses;
pub mod map_io;
pub mod metrics_eval;
pub mod refine_experiment;
pub mod stereo_geometry;
pub mod synthetic_data;
