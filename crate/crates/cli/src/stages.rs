use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use swcl_core::contrastive::{loss_csv, pretrain, EncoderConfig, EncoderNet};
use swcl_core::eval::{
    ablate_label_schemes, ablate_thresholds, linear_probe, random_init_baseline, AblationGrid, AblationSetup, GridRow,
    ProbeTarget, RANDOM_INIT,
};
use swcl_core::labeler::{extract_cams, train_labeler, LabelerNet, NormalizedCam, S4LConfig};
use swcl_core::numerics::io;
use swcl_core::patchgen::{build_dataset, read_patches, threshold_label, write_patches, Patch};
use swcl_core::synth::{generate_dataset, read_dataset, read_jsonl, write_dataset, ImageRecord, Split};
use swcl_core::verify::{self, CheckKind};

use crate::args::{AblateArgs, AblateMode, LabelerArgs, PatchArgs, PretrainArgs, ProbeArgs, SynthArgs, VerifyArgs};
use crate::config::{self, FileConfig, PretrainRun};
use crate::workdir::{Stage, Workdir};
use crate::CheckFailure;

pub const LABELER_CHECKPOINT: &str = "labeler.ckpt";
pub const ENCODER_CHECKPOINT: &str = "encoder.ckpt";
pub const CAM_INDEX: &str = "index.jsonl";
pub const PRETRAINED: &str = "pretrained";

/// One line of the CAM index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamEntry {
    pub image_id: String,
    pub path: String,
    pub height: usize,
    pub width: usize,
    pub abnormal_probability: f64,
}

pub fn synth(wd: &Workdir, file: &FileConfig, args: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = config::synth_config(file.synth.clone(), args, seed)?;
    let images = generate_dataset(&cfg)?;
    let dir = wd.fresh(Stage::Synth)?;
    write_dataset(&dir, &cfg, &images)?;
    wd.seal(Stage::Synth, cfg.seed, &cfg, &[])?;
    let abnormal = images.iter().filter(|r| r.gt_label.is_abnormal()).count();
    println!("wrote {} images ({abnormal} abnormal) to {}", images.len(), dir.display());
    Ok(())
}

pub fn train(wd: &Workdir, file: &FileConfig, args: &LabelerArgs, seed: Option<u64>) -> Result<()> {
    let cfg = config::labeler_config(file.labeler.clone(), args, seed)?;
    let ds_prov = wd.require(Stage::Synth)?;
    let (_, images) = read_dataset(&wd.dir(Stage::Synth))?;
    let labeled: Vec<&ImageRecord> = images.iter().filter(|r| r.split == Split::Labeled).collect();
    let unlabeled: Vec<&ImageRecord> = images.iter().filter(|r| r.split == Split::Unlabeled).collect();
    let trained = train_labeler(&labeled, &unlabeled, &cfg)?;
    let dir = wd.fresh(Stage::Labeler)?;
    io::save_checkpoint(&dir.join(LABELER_CHECKPOINT), &trained.net.params)?;
    let mut history = String::from("epoch,lr,loss,ce,triplet\n");
    for h in &trained.history {
        history.push_str(&format!("{},{},{},{},{}\n", h.epoch, h.lr, h.loss, h.ce, h.triplet));
    }
    io::atomic_write(&dir.join("history.csv"), history.as_bytes())?;
    let metrics = serde_json::json!({
        "holdout_auc": trained.holdout_auc,
        "holdout_patients": trained.holdout_patients,
    });
    io::atomic_write(&dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    wd.seal(Stage::Labeler, cfg.seed, &cfg, &[(Stage::Synth, &ds_prov)])?;
    println!("labeler hold-out AUC {:.4} over {} patients", trained.holdout_auc, trained.holdout_patients.len());
    Ok(())
}

fn load_labeler(wd: &Workdir) -> Result<LabelerNet> {
    let cfg: S4LConfig = wd.stage_config(Stage::Labeler)?;
    let params = io::load_checkpoint(&wd.dir(Stage::Labeler).join(LABELER_CHECKPOINT))?;
    Ok(LabelerNet::from_params(cfg.trunk, params)?)
}

pub fn cams(wd: &Workdir) -> Result<()> {
    let lab_prov = wd.require(Stage::Labeler)?;
    let ds_prov = wd.require(Stage::Synth)?;
    let net = load_labeler(wd)?;
    let (_, images) = read_dataset(&wd.dir(Stage::Synth))?;
    let cams = extract_cams(&net, &images)?;
    let dir = wd.fresh(Stage::Cams)?;
    let mut index = String::new();
    for img in &images {
        let cam = &cams[&img.image_id];
        let path = format!("{}.cam", img.image_id);
        io::save_tensor(&dir.join(&path), cam.abnormal())?;
        let (height, width) = cam.side();
        let entry = CamEntry {
            image_id: img.image_id.clone(),
            path,
            height,
            width,
            abnormal_probability: net.abnormal_probability(&img.pixels)?,
        };
        index.push_str(&serde_json::to_string(&entry)?);
        index.push('\n');
    }
    io::atomic_write(&dir.join(CAM_INDEX), index.as_bytes())?;
    let seed = lab_prov.seed;
    wd.seal(
        Stage::Cams,
        seed,
        &serde_json::json!({ "labeler_config_hash": lab_prov.config_hash }),
        &[(Stage::Synth, &ds_prov), (Stage::Labeler, &lab_prov)],
    )?;
    println!("wrote {} CAMs to {}", images.len(), dir.display());
    Ok(())
}

fn load_cams(dir: &Path) -> Result<BTreeMap<String, NormalizedCam>> {
    let entries: Vec<CamEntry> = read_jsonl(&dir.join(CAM_INDEX))?;
    entries
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.path);
            let cam = NormalizedCam::from_values(io::load_tensor(&path)?).with_context(|| format!("loading {}", path.display()))?;
            Ok((e.image_id, cam))
        })
        .collect()
}

pub fn patches(wd: &Workdir, file: &FileConfig, args: &PatchArgs) -> Result<()> {
    let cfg = config::patch_config(file.patches.clone(), args);
    let ds_prov = wd.require(Stage::Synth)?;
    let cam_prov = wd.require(Stage::Cams)?;
    let (_, images) = read_dataset(&wd.dir(Stage::Synth))?;
    let cams = load_cams(&wd.dir(Stage::Cams))?;
    let (manifest, patches, hist) = build_dataset(&images, &cams, cfg.threshold, cfg.patch_frac)?;
    let dir = wd.fresh(Stage::Patches)?;
    write_patches(&dir, &manifest, &patches, &hist)?;
    wd.seal(Stage::Patches, ds_prov.seed, &cfg, &[(Stage::Synth, &ds_prov), (Stage::Cams, &cam_prov)])?;
    println!(
        "wrote {} patches ({} abnormal at t={}) to {}",
        patches.len(),
        manifest.abnormal_count(),
        cfg.threshold,
        dir.display()
    );
    if args.emit_histogram {
        print!("{}", hist.to_csv());
    }
    Ok(())
}

fn relabel(patches: &mut [Patch], t: f64) -> Result<()> {
    for p in patches {
        p.record.abnormality = threshold_label(p.record.lesion_score, t)?;
    }
    Ok(())
}

pub fn pretrain_stage(wd: &Workdir, file: &FileConfig, args: &PretrainArgs, seed: Option<u64>) -> Result<()> {
    let run = config::pretrain_config(file.pretrain.clone(), args, seed);
    let patch_prov = wd.require(Stage::Patches)?;
    let (_, mut patches) = read_patches(&wd.dir(Stage::Patches))?;
    if let Some(t) = run.threshold {
        relabel(&mut patches, t)?;
    }
    let trained = pretrain(&patches, &run.pretrain)?;
    let dir = wd.fresh(Stage::Pretrain)?;
    io::save_checkpoint(&dir.join(ENCODER_CHECKPOINT), &trained.net.params)?;
    io::atomic_write(&dir.join("loss.csv"), loss_csv(&trained.history).as_bytes())?;
    wd.seal(Stage::Pretrain, run.pretrain.seed, &run, &[(Stage::Patches, &patch_prov)])?;
    if let Some(last) = trained.history.last() {
        println!("epoch {} mean loss {:.6}", last.epoch, last.mean_loss);
    }
    println!("wrote encoder checkpoint to {}", dir.display());
    Ok(())
}

fn grid_summary(grid: &AblationGrid) -> String {
    let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in grid.rows() {
        let e = sums.entry((&r.config, &r.metric_name)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    sums.iter()
        .map(|((c, m), (s, n))| format!("{c} {m} mean {:.4} over {n} seeds\n", s / *n as f64))
        .collect()
}

pub fn probe(wd: &Workdir, file: &FileConfig, args: &ProbeArgs, seed: Option<u64>) -> Result<()> {
    let cfg = config::probe_config(file.probe.clone(), args, seed);
    let patch_prov = wd.require(Stage::Patches)?;
    let (_, patches) = read_patches(&wd.dir(Stage::Patches))?;
    let (stage, name, net, upstream) = if args.random_init {
        let encoder: EncoderConfig = file.pretrain.encoder.clone();
        (Stage::ProbeRandomInit, RANDOM_INIT, EncoderNet::init(encoder, cfg.seed)?, None)
    } else {
        let enc_prov = wd.require(Stage::Pretrain)?;
        let run: PretrainRun = wd.stage_config(Stage::Pretrain)?;
        let params = io::load_checkpoint(&wd.dir(Stage::Pretrain).join(ENCODER_CHECKPOINT))?;
        (Stage::Probe, PRETRAINED, EncoderNet::from_params(run.pretrain.encoder, params)?, Some(enc_prov))
    };
    let rows = ProbeTarget::ALL
        .iter()
        .map(|&t| Ok(GridRow::from_result(name, cfg.seed, &linear_probe(&net, &patches, t, &cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    let grid = AblationGrid::new(rows)?;
    let dir = wd.fresh(stage)?;
    io::atomic_write(&dir.join("results.csv"), grid.to_csv().as_bytes())?;
    let mut inputs = vec![(Stage::Patches, &patch_prov)];
    if let Some(p) = &upstream {
        inputs.push((Stage::Pretrain, p));
    }
    wd.seal(stage, cfg.seed, &cfg, &inputs)?;
    for r in grid.rows() {
        println!("{} {} {:.4} (n_eval {})", r.config, r.metric_name, r.value, r.n_eval);
    }
    Ok(())
}

pub fn ablate(wd: &Workdir, file: &FileConfig, args: &AblateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = config::ablation_config(file.ablation.clone(), args, seed);
    let patch_prov = wd.require(Stage::Patches)?;
    let (_, patches) = read_patches(&wd.dir(Stage::Patches))?;
    let setup = AblationSetup {
        pretrain: cfg.pretrain.clone(),
        probe: cfg.probe.clone(),
        seeds: (cfg.seed..cfg.seed + cfg.seeds as u64).collect(),
    };
    let (stage, mut grid) = match args.mode {
        AblateMode::Threshold => (Stage::AblationThreshold, ablate_thresholds(&patches, &cfg.thresholds, &setup)?),
        AblateMode::Labels => (Stage::AblationLabels, ablate_label_schemes(&patches, &cfg.schemes, &setup)?),
    };
    grid.extend(random_init_baseline(&patches, &cfg.pretrain.encoder, &setup)?)?;
    let dir = wd.fresh(stage)?;
    io::atomic_write(&dir.join("grid.csv"), grid.to_csv().as_bytes())?;
    wd.seal(stage, cfg.seed, &cfg, &[(Stage::Patches, &patch_prov)])?;
    print!("{}", grid_summary(&grid));
    Ok(())
}

pub fn verify_stage(args: &VerifyArgs) -> Result<()> {
    if let Some(only) = &args.only {
        let known: Vec<&str> = verify::CHECKS.iter().map(|c| c.0).collect();
        if let Some(bad) = only.iter().find(|n| !known.contains(&n.as_str())) {
            anyhow::bail!(swcl_core::Error::InvalidArgument {
                arg: "only",
                reason: format!("unknown check {bad:?}; known: {}", known.join(", ")),
            });
        }
    }
    let mut failed = Vec::new();
    for &(name, kind, f) in verify::CHECKS {
        if args.only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        let out = verify::run_check(name, kind, f);
        let status = if out.passed { "PASS" } else { "FAIL" };
        println!("{status} {name} ({:.1}s): {}", out.seconds, out.detail);
        if !out.passed {
            failed.push(out);
        }
    }
    if failed.is_empty() {
        println!("all invariants hold");
        return Ok(());
    }
    Err(CheckFailure {
        numerical: failed.iter().any(|o| o.kind == CheckKind::Numerical),
        names: failed.iter().map(|o| o.name).collect(),
    }
    .into())
}
