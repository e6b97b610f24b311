//! The laboratory around the attack: synthetic datasets, end-to-end
//! evaluation with attack-success-rate accounting, the component ablation
//! ladder, and JSON report emission.

mod dataset;
mod eval;

pub use dataset::{
    classification_classes, load_dataset, render_scene, save_dataset, synthesize_dataset, synthesize_pretraining_corpus,
    DatasetManifest, ManifestEntry, Sprite, BACKGROUND, BACKGROUND_NOISE, CANVAS, COLOR_VALUES,
};
pub use eval::{
    emit_report, evaluate, load_report, run_ablation, sample_seed, AblationTable, EvalConfig,
    EvalMode, EvalReport, SampleOutcome, StageCounts, MI_DECAY,
};
