use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use swcl_core::contrastive::{LabelSet, PretrainConfig};
use swcl_core::eval::ProbeConfig;
use swcl_core::labeler::S4LConfig;
use swcl_core::numerics::io;
use swcl_core::patchgen::DEFAULT_THRESHOLD;
use swcl_core::synth::SynthConfig;

use crate::args::{AblateArgs, LabelerArgs, PatchArgs, PretrainArgs, ProbeArgs, SynthArgs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub threshold: f64,
    pub patch_frac: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            patch_frac: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: usize,
    pub thresholds: Vec<f64>,
    pub schemes: Vec<LabelSet>,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: 5,
            thresholds: vec![0.2, 0.3, 0.4, 0.5, 0.6],
            schemes: LabelSet::all_schemes(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

/// The optional JSON config file: one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthConfig,
    pub labeler: S4LConfig,
    pub patches: PatchConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = io::read_file(path)?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing config file {}", path.display()))
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

pub fn synth_config(mut cfg: SynthConfig, args: &SynthArgs, seed: Option<u64>) -> Result<SynthConfig> {
    let total = args.patients.unwrap_or(cfg.n_patients());
    let frac = match args.labeled_fraction {
        Some(f) => f,
        None if cfg.n_patients() > 0 => cfg.n_patients_labeled as f64 / cfg.n_patients() as f64,
        None => 0.3,
    };
    anyhow::ensure!((0.0..=1.0).contains(&frac), swcl_core::Error::InvalidArgument {
        arg: "labeled_fraction",
        reason: format!("{frac} outside [0, 1]"),
    });
    cfg.n_patients_labeled = (total as f64 * frac).round() as usize;
    cfg.n_patients_unlabeled = total - cfg.n_patients_labeled;
    set(&mut cfg.image_size, args.image_size);
    set(&mut cfg.lesion_rate, args.lesion_rate);
    set(&mut cfg.lesion_contrast, args.lesion_contrast);
    set(&mut cfg.jitter, args.jitter);
    set(&mut cfg.seed, seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn labeler_config(mut cfg: S4LConfig, args: &LabelerArgs, seed: Option<u64>) -> Result<S4LConfig> {
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.base_lr, args.lr);
    set(&mut cfg.w, args.w);
    set(&mut cfg.margin, args.margin);
    set(&mut cfg.triplet, args.triplet_formulation);
    set(&mut cfg.seed, seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn patch_config(mut cfg: PatchConfig, args: &PatchArgs) -> PatchConfig {
    set(&mut cfg.threshold, args.threshold);
    set(&mut cfg.patch_frac, args.patch_frac);
    cfg
}

/// Pretraining settings plus the optional relabeling threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRun {
    pub pretrain: PretrainConfig,
    pub threshold: Option<f64>,
}

pub fn pretrain_config(mut cfg: PretrainConfig, args: &PretrainArgs, seed: Option<u64>) -> PretrainRun {
    set(&mut cfg.loss.tau, args.tau);
    set(&mut cfg.loss.labels, args.labels.clone());
    set(&mut cfg.batch, args.batch);
    set(&mut cfg.epochs, args.epochs);
    set(&mut cfg.base_lr, args.lr);
    set(&mut cfg.seed, seed);
    PretrainRun {
        pretrain: cfg,
        threshold: args.threshold,
    }
}

pub fn probe_config(mut cfg: ProbeConfig, args: &ProbeArgs, seed: Option<u64>) -> ProbeConfig {
    set(&mut cfg.eval_fraction, args.eval_fraction);
    set(&mut cfg.seed, seed);
    cfg
}

pub fn ablation_config(mut cfg: AblationConfig, args: &AblateArgs, seed: Option<u64>) -> AblationConfig {
    set(&mut cfg.seeds, args.seeds);
    set(&mut cfg.thresholds, args.thresholds.clone());
    set(&mut cfg.schemes, args.schemes.clone());
    set(&mut cfg.pretrain.epochs, args.epochs);
    set(&mut cfg.seed, seed);
    cfg
}
