//! Multi-label supervised contrastive pretraining on annotated patches.

mod encoder;
mod loss;
mod sampler;

pub use encoder::{EncoderConfig, EncoderNet, FC1_BIAS, FC1_WEIGHT, FC2_BIAS, FC2_WEIGHT};
pub use loss::{
    mean_positives, multilabel_supcon_loss, positives_mask, reduction_check, Label, LabelSet, LossConfig, Reduction,
    ViewBatch,
};
pub use sampler::{label_tuple, PairIndex};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::numerics::optim::{LrSchedule, SgdNesterov};
use crate::numerics::{rng, NetworkParams, Tensor};
use crate::patchgen::Patch;

/// Two independently augmented views of one patch.
pub fn augment_patch(patch: &Tensor, cfg: &AugmentConfig, r: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let [_, h, w] = patch.dims::<3>("augment_patch")?;
    if h < 8 || w < 8 {
        return Err(Error::invalid("patch", format!("side {h}x{w} is below 8")));
    }
    Ok((cfg.apply(patch, r), cfg.apply(patch, r)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    /// Source patches per minibatch (`N`); the batch holds `2N` views.
    pub batch: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            batch: 64,
            epochs: 40,
            base_lr: 0.05,
            warmup_epochs: 5.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 42,
            augment: AugmentConfig::contrastive(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub net: EncoderNet,
    pub history: Vec<PretrainLog>,
}

pub fn loss_csv(history: &[PretrainLog]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for h in history {
        out.push_str(&format!("{},{}\n", h.epoch, h.mean_loss));
    }
    out
}

/// Loss and parameter gradients for one minibatch of patch indices.
pub fn batch_loss(
    net: &EncoderNet,
    patches: &[Patch],
    batch: &[usize],
    cfg: &PretrainConfig,
    view_stream: impl Fn(&Patch) -> rand_chacha::ChaCha8Rng + Sync,
) -> Result<(f64, NetworkParams)> {
    let views = batch
        .par_iter()
        .map(|&i| augment_patch(&patches[i].pixels, &cfg.augment, &mut view_stream(&patches[i])))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<&Tensor> = views.iter().flat_map(|(a, b)| [a, b]).collect();
    let labels: Vec<Vec<u64>> = batch
        .iter()
        .flat_map(|&i| {
            let t = label_tuple(&patches[i].record, &cfg.loss.labels);
            [t.clone(), t]
        })
        .collect();
    views_loss(net, &flat, labels, &cfg.loss)
}

/// Loss and gradients for explicit views; `views[2k]` and `views[2k + 1]`
/// share a source patch.
pub fn views_loss(net: &EncoderNet, views: &[&Tensor], labels: Vec<Vec<u64>>, loss: &LossConfig) -> Result<(f64, NetworkParams)> {
    let caches = views
        .par_iter()
        .map(|v| net.forward_view(v))
        .collect::<Result<Vec<_>>>()?;
    let d = net.cfg.proj_dim;
    let z = Tensor::from_parts(
        vec![views.len(), d],
        caches.iter().flat_map(|c| c.z.data().iter().copied()).collect(),
    )?;
    let (value, gz) = multilabel_supcon_loss(&ViewBatch::new(z, labels)?, loss)?;
    let parts = caches
        .par_iter()
        .enumerate()
        .map(|(i, c)| net.backward_view(c, &Tensor::vector(gz.row(i).to_vec())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, NetworkParams::sum_ordered(&net.params, &parts)?))
}

/// SGD with Nesterov momentum under linear warmup then cosine decay.
pub fn pretrain(patches: &[Patch], cfg: &PretrainConfig) -> Result<TrainedEncoder> {
    if patches.is_empty() {
        return Err(Error::invalid("patches", "empty manifest"));
    }
    let records: Vec<_> = patches.iter().map(|p| p.record.clone()).collect();
    let index = PairIndex::new(&records);
    let mut net = EncoderNet::init(cfg.encoder.clone(), cfg.seed)?;
    let mut opt = SgdNesterov::new(&net.params, cfg.momentum, cfg.weight_decay);
    let schedule = LrSchedule::WarmupCosine {
        base: cfg.base_lr,
        warmup_epochs: cfg.warmup_epochs,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = index.epoch_batches(cfg.batch, &mut rng::stream(cfg.seed, &format!("pretrain-epoch/{epoch}")))?;
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let stream = |p: &Patch| rng::stream(cfg.seed, &format!("pretrain-view/{epoch}/{}", p.record.patch_id));
            let (loss, grads) = batch_loss(&net, patches, batch, cfg, stream)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("contrastive loss {loss} at epoch {epoch} step {step}")));
            }
            let lr = schedule.lr_at(epoch as f64 + step as f64 / batches.len() as f64, cfg.epochs as f64);
            opt.step(&mut net.params, &grads, lr)?;
            total += loss;
        }
        history.push(PretrainLog {
            epoch,
            mean_loss: total / batches.len() as f64,
        });
    }
    Ok(TrainedEncoder { net, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use rand::Rng;

    #[test]
    fn augmented_views_stay_in_range_and_are_seeded() {
        let mut r = rng::stream(9, "aug-range");
        let cfg = AugmentConfig::contrastive();
        for _ in 0..1000 {
            let p = Tensor::from_fn(&[3, 8, 8], |_| r.random_range(0.0..1.0));
            let (a, b) = augment_patch(&p, &cfg, &mut r).unwrap();
            assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
        }
        let p = Tensor::full(&[3, 16, 16], 0.3);
        let v1 = augment_patch(&p, &cfg, &mut rng::stream(1, "x")).unwrap();
        let v2 = augment_patch(&p, &cfg, &mut rng::stream(1, "x")).unwrap();
        assert_eq!(v1, v2);
        let id = augment_patch(&p, &AugmentConfig::identity(), &mut r).unwrap();
        assert_eq!((id.0.clone(), id.1.clone()), (p.clone(), p));
        assert!(augment_patch(&Tensor::zeros(&[3, 4, 4]), &cfg, &mut r).is_err());
    }
}
