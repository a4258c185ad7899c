use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use swcl_core::contrastive::LabelSet;
use swcl_core::labeler::TripletFormulation;

#[derive(Debug, Parser)]
#[command(name = "swcl", version, about = "Contrastive pretraining with CAM-derived patch labels on synthetic fundus images")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Directory holding every stage's outputs.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// JSON file with per-stage sections (synth, labeler, patches, pretrain,
    /// probe, ablation); flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for the stage being run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic paired-eye dataset.
    Synth(SynthArgs),
    /// Train the image-level pseudo-labeler.
    TrainLabeler(LabelerArgs),
    /// Dump normalized abnormal-class CAMs for every image.
    ExtractCams,
    /// Cut five patches per image, score them and threshold the scores.
    GenPatches(PatchArgs),
    /// Contrastive pretraining on the patch dataset.
    Pretrain(PretrainArgs),
    /// Linear probes on frozen embeddings.
    Probe(ProbeArgs),
    /// Threshold or label-scheme sweep with a random-init baseline.
    Ablate(AblateArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total patient count.
    #[arg(long)]
    pub patients: Option<usize>,
    /// Share of patients whose images carry labels.
    #[arg(long)]
    pub labeled_fraction: Option<f64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub lesion_rate: Option<f64>,
    #[arg(long)]
    pub lesion_contrast: Option<f64>,
    #[arg(long)]
    pub jitter: Option<bool>,
}

#[derive(Debug, Args)]
pub struct LabelerArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the triplet term.
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long, value_parser = parse_triplet)]
    pub triplet_formulation: Option<TripletFormulation>,
}

#[derive(Debug, Args)]
pub struct PatchArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub patch_frac: Option<f64>,
    /// Also print the lesion-score histogram to stdout.
    #[arg(long)]
    pub emit_histogram: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated subset of position, abnormality, patient.
    #[arg(long, value_parser = parse_labels)]
    pub labels: Option<LabelSet>,
    /// Source patches per minibatch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Relabel the patches at this threshold before training.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Probe an untrained encoder instead of the pretrained checkpoint.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateMode {
    Threshold,
    Labels,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub mode: AblateMode,
    /// Number of seeds, counted up from the stage seed.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated thresholds for `--mode threshold`.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Semicolon-separated label schemes for `--mode labels`.
    #[arg(long, value_delimiter = ';', value_parser = parse_labels)]
    pub schemes: Option<Vec<LabelSet>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run only the named checks.
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<String>>,
}

fn parse_labels(s: &str) -> Result<LabelSet, String> {
    s.replace('+', ",").parse().map_err(|e: swcl_core::Error| e.to_string())
}

fn parse_triplet(s: &str) -> Result<TripletFormulation, String> {
    s.parse()
}
