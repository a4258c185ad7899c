//! Representation probes, AUC, and the ablation harness.

mod ablation;
mod auc;
mod probe;

pub use ablation::{
    ablate_label_schemes, ablate_thresholds, random_init_baseline, scheme_config_name, threshold_config_name,
    AblationGrid, AblationSetup, GridRow, RANDOM_INIT,
};
pub use auc::auc_roc;
pub use probe::{
    embed_patches, linear_probe, probe_embeddings, split_patients, LinearProbe, Metric, ProbeConfig, ProbeResult,
    ProbeTarget,
};
