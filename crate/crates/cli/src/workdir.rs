use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use swcl_core::numerics::{io, rng};

pub const LOCK_FILE: &str = ".swcl.lock";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONFIG_FILE: &str = "config.json";

/// Stage output directories under the workdir.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Labeler,
    Cams,
    Patches,
    Pretrain,
    Probe,
    ProbeRandomInit,
    AblationThreshold,
    AblationLabels,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Labeler => "train-labeler",
            Stage::Cams => "extract-cams",
            Stage::Patches => "gen-patches",
            Stage::Pretrain => "pretrain",
            Stage::Probe | Stage::ProbeRandomInit => "probe",
            Stage::AblationThreshold | Stage::AblationLabels => "ablate",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Synth => "dataset",
            Stage::Labeler => "labeler",
            Stage::Cams => "cams",
            Stage::Patches => "patches",
            Stage::Pretrain => "encoder",
            Stage::Probe => "probe",
            Stage::ProbeRandomInit => "probe-random-init",
            Stage::AblationThreshold => "ablation-threshold",
            Stage::AblationLabels => "ablation-labels",
        }
    }
}

/// Held for the lifetime of one invocation; removed on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).with_context(|| format!("creating workdir {}", workdir.display()))?;
        let path = workdir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(swcl_core::Error::InvalidArgument {
                    arg: "workdir",
                    reason: format!("{} is locked by another invocation ({})", workdir.display(), path.display()),
                })
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    /// Config hashes of the upstream stages read.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file in the stage directory.
    pub files: BTreeMap<String, String>,
}

pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    /// Clears a stage directory so a rerun leaves no stale files behind.
    pub fn fresh(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// The upstream stage's provenance; a missing record means the stage was
    /// never completed.
    pub fn require(&self, stage: Stage) -> Result<Provenance> {
        let path = self.dir(stage).join(PROVENANCE_FILE);
        let bytes = io::read_file(&path).with_context(|| format!("run `swcl {}` first", stage.name()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn stage_config<T: for<'de> Deserialize<'de>>(&self, stage: Stage) -> Result<T> {
        let path = self.dir(stage).join(CONFIG_FILE);
        let bytes = io::read_file(&path)?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes the effective config, then hashes every file of the stage into
    /// the provenance record. Called last, so a provenance file marks a
    /// complete stage.
    pub fn seal<C: Serialize>(&self, stage: Stage, seed: u64, config: &C, inputs: &[(Stage, &Provenance)]) -> Result<Provenance> {
        let dir = self.dir(stage);
        let config_json = serde_json::to_string_pretty(config)?;
        io::atomic_write(&dir.join(CONFIG_FILE), config_json.as_bytes())?;
        let mut files = BTreeMap::new();
        hash_tree(&dir, &dir, &mut files)?;
        let prov = Provenance {
            stage: stage.name().to_string(),
            seed,
            config_hash: rng::sha256_hex(config_json.as_bytes()),
            inputs: inputs
                .iter()
                .map(|(s, p)| (s.name().to_string(), p.config_hash.clone()))
                .collect(),
            files,
        };
        io::atomic_write(&dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&prov)?.as_bytes())?;
        Ok(prov)
    }
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            hash_tree(root, &path, out)?;
        } else if e.file_name() != PROVENANCE_FILE {
            let rel = path.strip_prefix(root).expect("walked from root").to_string_lossy().replace('\\', "/");
            out.insert(rel, rng::sha256_hex(&io::read_file(&path)?));
        }
    }
    Ok(())
}
