//! Datasets, synthetic defect generation, anomaly scoring and experiments.

pub mod data;
pub mod experiments;
pub mod metrics;
pub mod synthetic;

pub use data::{
    load_any, load_dataset, load_image_dir, split_indices, subsample_anomalies, write_dataset, ImageSet, Label,
    PatchGrid, Splits,
};
pub use experiments::{
    detect, evaluate_reconstruction, interpolate_pair, pixel_errors, score_grid, Detection, ErrorMetric,
    Interpolation, InterpolationMode,
};
pub use metrics::{eval_metrics, localize, recon_threshold, roc_auc, AnomalyReport, Threshold};
pub use synthetic::{gen_synthetic, Defect, SyntheticSpec, Texture};
