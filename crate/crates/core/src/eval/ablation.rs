use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::{embed_patches, probe_embeddings, ProbeConfig, ProbeResult, ProbeTarget};
use crate::contrastive::{pretrain, EncoderConfig, EncoderNet, LabelSet, PretrainConfig};
use crate::error::{Error, Result};
use crate::patchgen::{threshold_label, Patch};

pub const RANDOM_INIT: &str = "random-init";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: String,
    pub metric_name: String,
    pub value: f64,
    pub n_eval: usize,
    pub seed: u64,
}

impl GridRow {
    pub fn from_result(config: &str, seed: u64, r: &ProbeResult) -> Self {
        Self {
            config: config.to_string(),
            metric_name: r.target.metric_name().to_string(),
            value: r.value,
            n_eval: r.n_eval,
            seed,
        }
    }
}

/// Probe results keyed by (configuration, metric, seed).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    rows: Vec<GridRow>,
}

impl AblationGrid {
    pub fn new(rows: Vec<GridRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if r.config.contains([',', '"', '\n']) {
                return Err(Error::invalid("config", format!("{:?} contains a CSV delimiter", r.config)));
            }
            if !seen.insert((&r.config, &r.metric_name, r.seed)) {
                return Err(Error::invalid("grid", format!("duplicate cell {} / {} / seed {}", r.config, r.metric_name, r.seed)));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[GridRow] {
        &self.rows
    }

    pub fn extend(&mut self, other: AblationGrid) -> Result<()> {
        let mut rows = std::mem::take(&mut self.rows);
        rows.extend(other.rows);
        *self = Self::new(rows)?;
        Ok(())
    }

    /// `(seed, value)` pairs for one configuration and metric, in seed order.
    pub fn series(&self, config: &str, metric_name: &str) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.config == config && r.metric_name == metric_name)
            .map(|r| (r.seed, r.value))
            .collect();
        out.sort_by_key(|&(s, _)| s);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,metric_name,value,n_eval,seed\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.config, r.metric_name, r.value, r.n_eval, r.seed));
        }
        out
    }
}

/// Shared settings of an ablation sweep; every cell is repeated per seed,
/// which drives both pretraining and the probe split.
#[derive(Clone, Debug)]
pub struct AblationSetup {
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub seeds: Vec<u64>,
}

fn probe_all(net: &EncoderNet, patches: &[Patch], config: &str, seed: u64, probe: &ProbeConfig) -> Result<Vec<GridRow>> {
    let h = embed_patches(net, patches)?;
    let cfg = ProbeConfig { seed, ..probe.clone() };
    ProbeTarget::ALL
        .iter()
        .map(|&t| Ok(GridRow::from_result(config, seed, &probe_embeddings(&h, patches, t, &cfg)?)))
        .collect()
}

fn run_cells(cells: Vec<(String, Vec<Patch>, PretrainConfig)>, setup: &AblationSetup) -> Result<AblationGrid> {
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| setup.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (name, patches, cfg) = &cells[c];
            let trained = pretrain(patches, &PretrainConfig { seed, ..cfg.clone() })?;
            probe_all(&trained.net, patches, name, seed, &setup.probe)
        })
        .collect::<Result<Vec<_>>>()?;
    AblationGrid::new(rows.into_iter().flatten().collect())
}

pub fn threshold_config_name(t: f64) -> String {
    format!("t={t}")
}

pub fn scheme_config_name(labels: &LabelSet) -> String {
    format!("labels={}", labels.to_string().replace(',', "+"))
}

/// Relabels the patches at each threshold, then pretrains and probes.
pub fn ablate_thresholds(patches: &[Patch], t_values: &[f64], setup: &AblationSetup) -> Result<AblationGrid> {
    let cells = t_values
        .iter()
        .map(|&t| {
            let relabeled = patches
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.record.abnormality = threshold_label(p.record.lesion_score, t)?;
                    Ok(q)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((threshold_config_name(t), relabeled, setup.pretrain.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    run_cells(cells, setup)
}

/// One pretraining run per label scheme on a fixed manifest.
pub fn ablate_label_schemes(patches: &[Patch], schemes: &[LabelSet], setup: &AblationSetup) -> Result<AblationGrid> {
    let cells = schemes
        .iter()
        .map(|s| {
            let mut cfg = setup.pretrain.clone();
            cfg.loss.labels = s.clone();
            (scheme_config_name(s), patches.to_vec(), cfg)
        })
        .collect();
    run_cells(cells, setup)
}

/// Probe rows for untrained encoders initialized from each seed.
pub fn random_init_baseline(patches: &[Patch], encoder: &EncoderConfig, setup: &AblationSetup) -> Result<AblationGrid> {
    let rows = setup
        .seeds
        .iter()
        .map(|&seed| probe_all(&EncoderNet::init(encoder.clone(), seed)?, patches, RANDOM_INIT, seed, &setup.probe))
        .collect::<Result<Vec<_>>>()?;
    AblationGrid::new(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(config: &str, metric: &str, seed: u64, value: f64) -> GridRow {
        GridRow {
            config: config.into(),
            metric_name: metric.into(),
            value,
            n_eval: 10,
            seed,
        }
    }

    #[test]
    fn duplicate_cells_are_rejected() {
        let r = row("t=0.4", "abnormality_auc", 1, 0.7);
        assert!(AblationGrid::new(vec![r.clone(), r.clone()]).is_err());
        assert!(AblationGrid::new(vec![row("a,b", "m", 1, 0.5)]).is_err());
        let mut g = AblationGrid::new(vec![r.clone()]).unwrap();
        assert!(g.extend(AblationGrid::new(vec![r]).unwrap()).is_err());
    }

    #[test]
    fn csv_and_series_follow_the_rows() {
        let g = AblationGrid::new(vec![
            row("t=0.4", "abnormality_auc", 2, 0.8),
            row("t=0.4", "abnormality_auc", 1, 0.7),
            row("t=0.5", "abnormality_auc", 1, 0.6),
        ])
        .unwrap();
        assert_eq!(g.series("t=0.4", "abnormality_auc"), vec![(1, 0.7), (2, 0.8)]);
        let csv = g.to_csv();
        assert!(csv.starts_with("config,metric_name,value,n_eval,seed\n"));
        assert!(csv.contains("t=0.5,abnormality_auc,0.6,10,1\n"));
    }

    #[test]
    fn config_names_are_csv_safe() {
        for s in LabelSet::all_schemes() {
            assert!(!scheme_config_name(&s).contains(','));
        }
        assert_eq!(scheme_config_name(&LabelSet::full()), "labels=position+abnormality+patient");
        assert_eq!(threshold_config_name(0.4), "t=0.4");
    }
}
