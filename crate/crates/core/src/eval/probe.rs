use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::auc_roc;
use crate::contrastive::EncoderNet;
use crate::error::{Error, Result};
use crate::numerics::{ops, rng};
use crate::patchgen::Patch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTarget {
    Position,
    Abnormality,
}

impl ProbeTarget {
    pub const ALL: [ProbeTarget; 2] = [ProbeTarget::Position, ProbeTarget::Abnormality];

    pub fn metric(self) -> Metric {
        match self {
            ProbeTarget::Position => Metric::Accuracy,
            ProbeTarget::Abnormality => Metric::AucRoc,
        }
    }

    /// Column name used in result grids.
    pub fn metric_name(self) -> &'static str {
        match self {
            ProbeTarget::Position => "position_accuracy",
            ProbeTarget::Abnormality => "abnormality_auc",
        }
    }

    fn classes(self) -> usize {
        match self {
            ProbeTarget::Position => 5,
            ProbeTarget::Abnormality => 2,
        }
    }

    fn class_of(self, patch: &Patch) -> usize {
        match self {
            ProbeTarget::Position => patch.record.position.index(),
            ProbeTarget::Abnormality => usize::from(patch.record.gt_patch_abnormal),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    AucRoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: ProbeTarget,
    pub metric: Metric,
    pub value: f64,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Share of patients held out for evaluation.
    pub eval_fraction: f64,
    /// L2 penalty on the probe weights (biases are not penalized).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            eval_fraction: 0.3,
            l2: 1e-3,
            max_iter: 5000,
            tol: 1e-7,
            seed: 42,
        }
    }
}

/// Softmax regression head over standardized embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    weights: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn objective(weights: &[Vec<f64>], x: &[Vec<f64>], y: &[usize], l2: f64) -> (f64, Vec<Vec<f64>>) {
    let d = x[0].len();
    let mut grad = vec![vec![0.0; d + 1]; weights.len()];
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let logits: Vec<f64> = weights.iter().map(|w| affine_row(w, xi)).collect();
        let (l, g) = ops::softmax_cross_entropy(&logits, yi).expect("target in range");
        loss += l;
        for (gc, &gl) in grad.iter_mut().zip(&g) {
            for (gk, &xk) in gc.iter_mut().zip(xi) {
                *gk += gl * xk;
            }
            gc[d] += gl;
        }
    }
    let n = x.len() as f64;
    loss /= n;
    for (gc, w) in grad.iter_mut().zip(weights) {
        for k in 0..=d {
            gc[k] /= n;
            if k < d {
                gc[k] += l2 * w[k];
                loss += 0.5 * l2 * w[k] * w[k];
            }
        }
    }
    (loss, grad)
}

fn affine_row(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[x.len()]
}

impl LinearProbe {
    /// Full-batch gradient descent with Armijo backtracking; the objective is
    /// strictly convex for `l2 > 0`, so the result depends only on the data.
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid("probe data", format!("{} rows, {} labels", x.len(), y.len())));
        }
        if !(cfg.l2 > 0.0) {
            return Err(Error::invalid("l2", "must be positive"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|k| {
                let var = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: vec![vec![0.0; d + 1]; classes],
            iterations: 0,
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let (mut f, mut g) = objective(&probe.weights, &xs, y, cfg.l2);
        let mut step = 1.0;
        for _ in 0..cfg.max_iter {
            let gnorm2: f64 = g.iter().flatten().map(|v| v * v).sum();
            if gnorm2.sqrt() < cfg.tol {
                break;
            }
            step *= 2.0;
            loop {
                let trial: Vec<Vec<f64>> = probe
                    .weights
                    .iter()
                    .zip(&g)
                    .map(|(w, gw)| w.iter().zip(gw).map(|(a, b)| a - step * b).collect())
                    .collect();
                let (ft, gt) = objective(&trial, &xs, y, cfg.l2);
                if ft <= f - 0.5 * step * gnorm2 {
                    (probe.weights, f, g) = (trial, ft, gt);
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    return Err(Error::Numerical("probe line search stalled".into()));
                }
            }
            probe.iterations += 1;
        }
        if !f.is_finite() {
            return Err(Error::Numerical(format!("probe objective {f}")));
        }
        Ok(probe)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let xs = self.standardize(x);
        self.weights.iter().map(|w| affine_row(w, &xs)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }
}

/// Held-out patients for evaluation, drawn from the sorted patient set.
pub fn split_patients(patches: &[Patch], eval_fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid("eval_fraction", format!("{eval_fraction} outside (0, 1)")));
    }
    let mut patients: Vec<&str> = patches
        .iter()
        .map(|p| p.record.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < 2 {
        return Err(Error::invalid("patches", "need at least two patients to split"));
    }
    patients.shuffle(&mut rng::stream(seed, "probe-split"));
    let n_eval = ((patients.len() as f64 * eval_fraction).round() as usize).clamp(1, patients.len() - 1);
    Ok(patients[..n_eval].iter().map(|s| s.to_string()).collect())
}

/// Embeddings `h` of every patch under a frozen encoder.
pub fn embed_patches(net: &EncoderNet, patches: &[Patch]) -> Result<Vec<Vec<f64>>> {
    patches
        .par_iter()
        .map(|p| Ok(net.embed(&p.pixels)?.into_data()))
        .collect()
}

/// Fits a linear probe on training-patient embeddings and scores the
/// held-out patients.
pub fn probe_embeddings(
    embeddings: &[Vec<f64>],
    patches: &[Patch],
    target: ProbeTarget,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if embeddings.len() != patches.len() {
        return Err(Error::shape("probe_embeddings", format!("{} embeddings for {} patches", embeddings.len(), patches.len())));
    }
    let held_out = split_patients(patches, cfg.eval_fraction, cfg.seed)?;
    let (mut train_x, mut train_y, mut eval_x, mut eval_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (h, p) in embeddings.iter().zip(patches) {
        let y = target.class_of(p);
        if held_out.contains(&p.record.patient_id) {
            eval_x.push(h.clone());
            eval_y.push(y);
        } else {
            train_x.push(h.clone());
            train_y.push(y);
        }
    }
    let classes = target.classes();
    for (part, ys) in [("training", &train_y), ("evaluation", &eval_y)] {
        let present: BTreeSet<usize> = ys.iter().copied().collect();
        if present.len() < classes {
            return Err(Error::invalid(
                "labels",
                format!("{part} split has {} of {classes} {target:?} classes", present.len()),
            ));
        }
    }
    let probe = LinearProbe::fit(&train_x, &train_y, classes, cfg)?;
    let value = match target {
        ProbeTarget::Position => {
            let hits = eval_x.iter().zip(&eval_y).filter(|(x, &y)| probe.predict(x) == y).count();
            hits as f64 / eval_x.len() as f64
        }
        ProbeTarget::Abnormality => {
            let scores: Vec<f64> = eval_x
                .iter()
                .map(|x| {
                    let l = probe.logits(x);
                    l[1] - l[0]
                })
                .collect();
            let labels: Vec<bool> = eval_y.iter().map(|&y| y == 1).collect();
            auc_roc(&scores, &labels)?
        }
    };
    Ok(ProbeResult {
        target,
        metric: target.metric(),
        value,
        n_eval: eval_x.len(),
    })
}

/// Linear probe on the embeddings of a frozen encoder.
pub fn linear_probe(net: &EncoderNet, patches: &[Patch], target: ProbeTarget, cfg: &ProbeConfig) -> Result<ProbeResult> {
    probe_embeddings(&embed_patches(net, patches)?, patches, target, cfg)
}
