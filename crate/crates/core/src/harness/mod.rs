//! Synthetic tracking sequences, crop geometry, the inference loop and
//! overlap metrics.

pub mod experiment;
pub mod geometry;
pub mod io;
pub mod scene;
pub mod track;


pub use experiment::{
    median_ao, run_ablation, train_and_evaluate, AblationGrid, AblationReport, DeskData, RunConfig, RunResult, PROBE_PAIRS,
};
pub use geometry::{context_side, crop_at, crop_region, giou, iou, Box, CropMeta};
pub use scene::{generate_sequence, SceneConfig, Sequence, Shape, Similarity, SuiteConfig, Texture};
pub use track::{
    argmax_cell, cell_center, compute_metrics, decode_crop_box, evaluate_sequence, evaluate_suite, metrics_from_ious,
    normalize_input, predict_box, reg_unit, run_tracker, search_crop, template_crop, track_frames, FrameResult,
    Metrics, SuiteReport, SEARCH_FACTOR, TEMPLATE_FACTOR,
};
