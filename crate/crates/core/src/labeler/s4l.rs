//! Supervised cross-entropy plus a weighted triplet regularizer over all
//! views, and the training loop around it.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::triplet::{batch_hard_triplet_with_grad, TripletFormulation};
use super::{LabelerNet, ABNORMAL, HEAD_BIAS, NORMAL};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::auc_roc;
use crate::numerics::layers::TrunkConfig;
use crate::numerics::optim::{LrSchedule, SgdNesterov};
use crate::numerics::{ops, rng, NetworkParams, Tensor};
use crate::synth::{Diagnosis, ImageRecord, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct S4LConfig {
    /// Weight of the triplet term.
    pub w: f64,
    pub margin: f64,
    pub triplet: TripletFormulation,
    pub views_per_image: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    /// Step-decay points as fractions of training.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    /// Labeled and unlabeled images per step.
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub epochs: usize,
    /// Fraction of labeled patients held out for the AUC.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub trunk: TrunkConfig,
    pub augment: AugmentConfig,
    /// Train the head bias; when off it stays at its zero initialization, so
    /// the bias-free CAM averages to the logits exactly.
    pub train_head_bias: bool,
}

impl Default for S4LConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            margin: 0.5,
            triplet: TripletFormulation::SoftplusMargin,
            views_per_image: 4,
            momentum: 0.9,
            weight_decay: 1e-3,
            base_lr: 0.1,
            milestones: vec![0.7, 0.8, 0.9],
            decay_factor: 0.1,
            labeled_batch: 8,
            unlabeled_batch: 8,
            epochs: 40,
            holdout_fraction: 0.2,
            seed: 42,
            trunk: TrunkConfig::default(),
            augment: AugmentConfig::labeler(),
            train_head_bias: false,
        }
    }
}

impl S4LConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) {
            return Err(Error::invalid("w", format!("{} is negative", self.w)));
        }
        if self.views_per_image < 2 {
            return Err(Error::invalid("views_per_image", "at least 2 views are needed for positives"));
        }
        if self.labeled_batch == 0 {
            return Err(Error::invalid("labeled_batch", "must be positive"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::invalid("holdout_fraction", "must lie in (0, 1)"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr", "must be positive"));
        }
        Ok(())
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule::Step {
            base: self.base_lr,
            milestones: self.milestones.clone(),
            factor: self.decay_factor,
        }
    }
}

/// All augmented views of one source image and, for labeled images, its
/// class index.
#[derive(Clone, Debug)]
pub struct ImageViews {
    pub views: Vec<Tensor>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct S4LOutput {
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
    pub grads: NetworkParams,
}

/// `CE(labeled views) + w · triplet(all views)`; each source image is one
/// triplet instance.
pub fn s4l_loss(labeled: &[ImageViews], unlabeled: &[ImageViews], net: &LabelerNet, cfg: &S4LConfig) -> Result<S4LOutput> {
    if labeled.is_empty() {
        return Err(Error::invalid("labeled_batch", "empty"));
    }
    let mut views = Vec::new();
    for (instance, img) in labeled.iter().chain(unlabeled).enumerate() {
        if img.views.len() != cfg.views_per_image {
            return Err(Error::invalid(
                "views",
                format!("image {instance} has {} views, expected {}", img.views.len(), cfg.views_per_image),
            ));
        }
        let label = if instance < labeled.len() {
            Some(img.label.ok_or_else(|| Error::invalid("labeled_batch", format!("image {instance} has no label")))?)
        } else {
            None
        };
        views.extend(img.views.iter().map(|v| (instance, v, label)));
    }

    let caches = views
        .par_iter()
        .map(|(_, v, _)| net.forward_view(v))
        .collect::<Result<Vec<_>>>()?;

    let n_labeled = views.iter().filter(|v| v.2.is_some()).count() as f64;
    let mut ce = 0.0;
    let mut grad_logits = Vec::with_capacity(views.len());
    for ((_, _, label), cache) in views.iter().zip(&caches) {
        match label {
            Some(t) => {
                let (l, g) = ops::softmax_cross_entropy(cache.logits.data(), *t)?;
                ce += l;
                grad_logits.push(Tensor::vector(g.into_iter().map(|x| x / n_labeled).collect()));
            }
            None => grad_logits.push(Tensor::zeros(&[2])),
        }
    }
    ce /= n_labeled;

    let k = net.trunk.feature_dim();
    let embeddings = Tensor::from_parts(
        vec![views.len(), k],
        caches.iter().flat_map(|c| c.h.data().iter().copied()).collect(),
    )?;
    let ids: Vec<usize> = views.iter().map(|v| v.0).collect();
    let (triplet, g_emb) = batch_hard_triplet_with_grad(&embeddings, &ids, cfg.margin, cfg.triplet)?;

    let parts = caches
        .par_iter()
        .enumerate()
        .map(|(i, cache)| {
            let gh = Tensor::vector(g_emb.row(i).iter().map(|g| g * cfg.w).collect());
            net.backward_view(cache, &gh, &grad_logits[i])
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = NetworkParams::sum_ordered(&net.params, &parts)?;
    Ok(S4LOutput {
        loss: ce + cfg.w * triplet,
        ce,
        triplet,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub triplet: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedLabeler {
    pub net: LabelerNet,
    pub holdout_auc: f64,
    pub holdout_patients: Vec<String>,
    pub history: Vec<EpochLog>,
}

fn class_of(d: Diagnosis) -> usize {
    if d.is_abnormal() {
        ABNORMAL
    } else {
        NORMAL
    }
}

fn make_views(img: &ImageRecord, label: Option<usize>, epoch: usize, cfg: &S4LConfig) -> ImageViews {
    let mut r = rng::stream(cfg.seed, &format!("labeler-view/{epoch}/{}", img.image_id));
    ImageViews {
        views: (0..cfg.views_per_image).map(|_| cfg.augment.apply(&img.pixels, &mut r)).collect(),
        label,
    }
}

/// Patient-level split of the labeled images into (train, holdout).
fn holdout_split<'a>(labeled: &[&'a ImageRecord], cfg: &S4LConfig) -> Result<(Vec<&'a ImageRecord>, Vec<&'a ImageRecord>, Vec<String>)> {
    let mut patients: Vec<String> = labeled.iter().map(|r| r.patient_id.clone()).collect();
    patients.sort();
    patients.dedup();
    if patients.len() < 2 {
        return Err(Error::invalid("labeled", "need at least two labeled patients for a hold-out split"));
    }
    patients.shuffle(&mut rng::stream(cfg.seed, "labeler-holdout"));
    let n_hold = ((patients.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, patients.len() - 1);
    let mut held: Vec<String> = patients[..n_hold].to_vec();
    held.sort();
    let (hold, train): (Vec<_>, Vec<_>) = labeled.iter().partition(|r| held.binary_search(&r.patient_id).is_ok());
    Ok((train, hold, held))
}

/// Trains on the labeled images of the non-held-out patients plus every
/// unlabeled image, then reports AUC on the held-out patients.
pub fn train_labeler(labeled: &[&ImageRecord], unlabeled: &[&ImageRecord], cfg: &S4LConfig) -> Result<TrainedLabeler> {
    cfg.validate()?;
    if let Some(r) = labeled.iter().find(|r| r.split != Split::Labeled) {
        return Err(Error::invalid("labeled", format!("{} is not from the labeled split", r.image_id)));
    }
    let (train, hold, holdout_patients) = holdout_split(labeled, cfg)?;
    let mut net = LabelerNet::init(cfg.trunk.clone(), cfg.seed)?;
    let mut opt = SgdNesterov::new(&net.params, cfg.momentum, cfg.weight_decay);
    let schedule = cfg.schedule();
    let steps = train.len().div_ceil(cfg.labeled_batch);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order_l = train.clone();
        let mut order_u = unlabeled.to_vec();
        let mut r = rng::stream(cfg.seed, &format!("labeler-epoch/{epoch}"));
        order_l.shuffle(&mut r);
        order_u.shuffle(&mut r);
        let (mut sum_loss, mut sum_ce, mut sum_tri) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for step in 0..steps {
            let lb = &order_l[step * cfg.labeled_batch..((step + 1) * cfg.labeled_batch).min(order_l.len())];
            let ub: Vec<&ImageRecord> = if order_u.is_empty() {
                Vec::new()
            } else {
                (0..cfg.unlabeled_batch)
                    .map(|i| order_u[(step * cfg.unlabeled_batch + i) % order_u.len()])
                    .collect()
            };
            let lv: Vec<ImageViews> = lb
                .par_iter()
                .map(|img| make_views(img, Some(class_of(img.gt_label)), epoch, cfg))
                .collect();
            let uv: Vec<ImageViews> = ub.par_iter().map(|img| make_views(img, None, epoch, cfg)).collect();
            let out = s4l_loss(&lv, &uv, &net, cfg)?;
            if !out.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "labeler loss {} at epoch {epoch} step {step} (ce {}, triplet {})",
                    out.loss, out.ce, out.triplet
                )));
            }
            lr = schedule.lr_at(epoch as f64 + step as f64 / steps as f64, cfg.epochs as f64);
            let mut grads = out.grads;
            if !cfg.train_head_bias {
                if let Some(g) = grads.get_mut(HEAD_BIAS) {
                    g.data_mut().fill(0.0);
                }
            }
            opt.step(&mut net.params, &grads, lr)?;
            sum_loss += out.loss;
            sum_ce += out.ce;
            sum_tri += out.triplet;
        }
        let n = steps as f64;
        history.push(EpochLog {
            epoch,
            lr,
            loss: sum_loss / n,
            ce: sum_ce / n,
            triplet: sum_tri / n,
        });
    }

    let scores = hold
        .par_iter()
        .map(|r| net.abnormal_probability(&r.pixels))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = hold.iter().map(|r| r.gt_label.is_abnormal()).collect();
    let holdout_auc = auc_roc(&scores, &labels)?;
    Ok(TrainedLabeler {
        net,
        holdout_auc,
        holdout_patients,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check_at;
    use crate::oracles::precise::PreciseS4L;
    use crate::oracles;
    use rand::Rng;

    fn small_batch(seed: u64, n_lab: usize, n_unlab: usize, views: usize, side: usize) -> (Vec<ImageViews>, Vec<ImageViews>) {
        let mut r = rng::stream(seed, "s4l-batch");
        let mut mk = |label| ImageViews {
            views: (0..views)
                .map(|_| Tensor::from_fn(&[3, side, side], |_| r.random_range(0.0..1.0)))
                .collect(),
            label,
        };
        let lab = (0..n_lab).map(|i| mk(Some(i % 2))).collect();
        let unlab = (0..n_unlab).map(|_| mk(None)).collect();
        (lab, unlab)
    }

    #[test]
    fn zero_weight_reduces_to_cross_entropy() {
        let cfg = S4LConfig {
            w: 0.0,
            views_per_image: 2,
            ..S4LConfig::default()
        };
        let net = LabelerNet::init(cfg.trunk.clone(), 1).unwrap();
        let (lab, unlab) = small_batch(1, 2, 2, 2, 12);
        let out = s4l_loss(&lab, &unlab, &net, &cfg).unwrap();
        assert_eq!(out.loss, out.ce);
    }

    #[test]
    fn loss_is_the_sum_of_independent_component_oracles() {
        let cfg = S4LConfig::default();
        let net = LabelerNet::init(cfg.trunk.clone(), 2).unwrap();
        let (lab, unlab) = small_batch(2, 2, 2, 4, 16);
        let out = s4l_loss(&lab, &unlab, &net, &cfg).unwrap();
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        let mut emb = Vec::new();
        let mut ids = Vec::new();
        for (i, img) in lab.iter().chain(&unlab).enumerate() {
            for v in &img.views {
                let f = net.feature_maps(v).unwrap();
                let cells = f.values().plane(0).len() as f64;
                let h: Vec<f64> = (0..f.channels()).map(|c| f.values().plane(c).iter().sum::<f64>() / cells).collect();
                if let Some(t) = img.label {
                    let w = net.params.get("head.weight").unwrap();
                    let b = net.params.get("head.bias").unwrap();
                    logits.push(
                        (0..2)
                            .map(|c| b.data()[c] + w.row(c).iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                            .collect::<Vec<_>>(),
                    );
                    targets.push(t);
                }
                emb.push(h);
                ids.push(i);
            }
        }
        let expect = oracles::cross_entropy_mean(&logits, &targets) + oracles::batch_hard_triplet_softplus(&emb, &ids, 0.5);
        assert!((out.loss - expect).abs() < 1e-10, "{} vs {expect}", out.loss);
    }

    #[test]
    fn single_image_batch_is_rejected() {
        let cfg = S4LConfig::default();
        let net = LabelerNet::init(cfg.trunk.clone(), 3).unwrap();
        let (lab, _) = small_batch(3, 1, 0, 4, 12);
        assert!(matches!(s4l_loss(&lab, &[], &net, &cfg), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let cfg = S4LConfig {
            views_per_image: 2,
            ..S4LConfig::default()
        };
        let net = LabelerNet::init(cfg.trunk.clone(), 4).unwrap();
        let (lab, unlab) = small_batch(4, 2, 1, 2, 8);
        let out = s4l_loss(&lab, &unlab, &net, &cfg).unwrap();
        let precise = PreciseS4L::new(&net, &lab, &unlab, &cfg).unwrap();
        assert!((precise.value() - out.loss).abs() < 1e-12);
        let rep = finite_diff_check_at(|n, i, v| precise.loss_offset(n, i, v), &net.params, &out.grads, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }
}
