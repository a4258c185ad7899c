//! Pseudo-labeler: conv trunk plus a two-class head, class activation maps,
//! and the semi-supervised training objective.

mod s4l;
mod triplet;

pub use s4l::{s4l_loss, train_labeler, EpochLog, ImageViews, S4LConfig, S4LOutput, TrainedLabeler};
pub use triplet::{batch_hard_triplet, batch_hard_triplet_with_grad, TripletFormulation};

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::layers::{he_uniform, standardize_input, TrunkCache, TrunkConfig};
use crate::numerics::{ops, rng, NetworkParams, Tensor};
use crate::synth::ImageRecord;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
/// Row of the head (and logit index) for each class.
pub const NORMAL: usize = 0;
pub const ABNORMAL: usize = 1;

/// Last-layer activations `f_k(i, j)`, `[K, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    values: Tensor,
}

impl FeatureMaps {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims::<3>("FeatureMaps")?;
        if !values.is_finite() {
            return Err(Error::NonFinite {
                context: "feature maps".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Per-class weights `w^c_k` (row 0 normal, row 1 abnormal) and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let [c, _] = weights.dims::<2>("ClassifierHead")?;
        if c != 2 || bias.shape() != [2] {
            return Err(Error::shape(
                "ClassifierHead",
                format!("weights {:?}, bias {:?}; expected [2, K] and [2]", weights.shape(), bias.shape()),
            ));
        }
        Ok(Self { weights, bias })
    }
}

/// Pointwise abnormal-class probability from the two-class CAM softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCam {
    values: Tensor,
}

impl NormalizedCam {
    /// Wraps a precomputed `[H, W]` map whose entries lie in `[0, 1]`.
    pub fn from_values(values: Tensor) -> Result<Self> {
        values.dims::<2>("NormalizedCam")?;
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("cam", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    /// `M̂_a`.
    pub fn abnormal(&self) -> &Tensor {
        &self.values
    }

    /// `M̂_n = 1 - M̂_a`.
    pub fn normal(&self) -> Tensor {
        self.values.map(|v| 1.0 - v)
    }

    pub fn side(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            values: self.values.flip_last_axis(),
        }
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

/// `M_c(i, j) = Σ_k w^c_k f_k(i, j)`, without the bias.
pub fn compute_cam(fmaps: &FeatureMaps, head: &ClassifierHead, class: usize) -> Result<Tensor> {
    let [k, h, w] = fmaps.values.dims::<3>("compute_cam")?;
    let [classes, hk] = head.weights.dims::<2>("compute_cam")?;
    if hk != k {
        return Err(Error::shape("compute_cam", format!("{k} feature maps but head expects {hk}")));
    }
    if class >= classes {
        return Err(Error::invalid("class", format!("{class} out of range for {classes} classes")));
    }
    let weights = head.weights.row(class);
    let mut out = vec![0.0; h * w];
    for (ch, &wk) in weights.iter().enumerate() {
        for (o, f) in out.iter_mut().zip(fmaps.values.plane(ch)) {
            *o += wk * f;
        }
    }
    Tensor::from_parts(vec![h, w], out)
}

/// Pointwise two-class softmax of the abnormal and normal CAMs.
pub fn normalize_cam(m_a: &Tensor, m_n: &Tensor) -> Result<NormalizedCam> {
    m_a.dims::<2>("normalize_cam")?;
    if m_a.shape() != m_n.shape() {
        return Err(Error::shape(
            "normalize_cam",
            format!("{:?} vs {:?}", m_a.shape(), m_n.shape()),
        ));
    }
    let values = m_a
        .data()
        .iter()
        .zip(m_n.data())
        .map(|(&a, &n)| ops::softmax_pair(a, n).0)
        .collect();
    Ok(NormalizedCam {
        values: Tensor::from_parts(m_a.shape().to_vec(), values)?,
    })
}

/// Trunk, global average pooling, and a linear two-class head.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelerNet {
    pub trunk: TrunkConfig,
    pub params: NetworkParams,
}

/// Per-view activations kept for the backward pass.
pub(crate) struct ViewCache {
    trunk: TrunkCache,
    fshape: Vec<usize>,
    pub(crate) h: Tensor,
    pub(crate) logits: Tensor,
}

impl LabelerNet {
    pub fn init(trunk: TrunkConfig, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "labeler-init");
        let mut params = NetworkParams::new();
        trunk.init(&mut r, &mut params)?;
        let k = trunk.feature_dim();
        params.insert(HEAD_WEIGHT, he_uniform(&[2, k], k, &mut r))?;
        params.insert(HEAD_BIAS, Tensor::zeros(&[2]))?;
        Ok(Self { trunk, params })
    }

    /// Rebuilds a network from loaded parameters, checking the key set.
    pub fn from_params(trunk: TrunkConfig, params: NetworkParams) -> Result<Self> {
        let reference = Self::init(trunk.clone(), 0)?;
        if !reference.params.same_keys(&params) {
            let names: Vec<_> = params.names().cloned().collect();
            return Err(Error::invalid("params", format!("unexpected parameter set {names:?}")));
        }
        for (name, t) in reference.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::shape("LabelerNet::from_params", format!("{name}: {:?}", params.get(name)?.shape())));
            }
        }
        Ok(Self { trunk, params })
    }

    pub fn head(&self) -> Result<ClassifierHead> {
        ClassifierHead::new(self.params.get(HEAD_WEIGHT)?.clone(), self.params.get(HEAD_BIAS)?.clone())
    }

    pub fn feature_maps(&self, img: &Tensor) -> Result<FeatureMaps> {
        FeatureMaps::new(self.trunk.features(&self.params, &standardize_input(img))?)
    }

    pub(crate) fn forward_view(&self, img: &Tensor) -> Result<ViewCache> {
        let (f, trunk) = self.trunk.forward(&self.params, &standardize_input(img))?;
        let h = ops::gap(&f)?;
        let logits = ops::linear(&h, self.params.get(HEAD_WEIGHT)?, self.params.get(HEAD_BIAS)?)?;
        Ok(ViewCache {
            trunk,
            fshape: f.shape().to_vec(),
            h,
            logits,
        })
    }

    /// Parameter gradients of one view given `d/dh` (excluding the head path)
    /// and `d/dlogits`.
    pub(crate) fn backward_view(&self, cache: &ViewCache, grad_h: &Tensor, grad_logits: &Tensor) -> Result<NetworkParams> {
        let mut grads = NetworkParams::new();
        let (gh_head, gw, gb) = ops::linear_backward(&cache.h, self.params.get(HEAD_WEIGHT)?, grad_logits)?;
        grads.insert(HEAD_WEIGHT, gw)?;
        grads.insert(HEAD_BIAS, gb)?;
        let mut gh = gh_head;
        gh.add_assign(grad_h)?;
        let gf = ops::gap_backward(&cache.fshape, &gh)?;
        self.trunk.backward(&self.params, &cache.trunk, &gf, &mut grads)?;
        Ok(grads)
    }

    pub fn logits(&self, img: &Tensor) -> Result<[f64; 2]> {
        let l = self.forward_view(img)?.logits;
        Ok([l.data()[0], l.data()[1]])
    }

    /// Softmax probability of the abnormal class.
    pub fn abnormal_probability(&self, img: &Tensor) -> Result<f64> {
        let [n, a] = self.logits(img)?;
        Ok(ops::softmax_pair(a, n).0)
    }

    pub fn normalized_cam(&self, img: &Tensor) -> Result<NormalizedCam> {
        let f = self.feature_maps(img)?;
        let head = self.head()?;
        normalize_cam(&compute_cam(&f, &head, ABNORMAL)?, &compute_cam(&f, &head, NORMAL)?)
    }
}

/// Normalized CAMs of every image, keyed by image id.
pub fn extract_cams(net: &LabelerNet, images: &[ImageRecord]) -> Result<BTreeMap<String, NormalizedCam>> {
    images
        .par_iter()
        .map(|r| Ok((r.image_id.clone(), net.normalized_cam(&r.pixels)?)))
        .collect()
}

/// Random `[K, H, W]` maps, used by tests and the verify suite.
pub fn random_feature_maps(k: usize, h: usize, w: usize, r: &mut impl Rng) -> FeatureMaps {
    FeatureMaps {
        values: Tensor::from_fn(&[k, h, w], |_| r.random_range(0.0..2.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(values: Vec<f64>, shape: &[usize]) -> FeatureMaps {
        FeatureMaps::new(Tensor::new(shape.to_vec(), values).unwrap()).unwrap()
    }

    fn head(w_normal: Vec<f64>, w_abnormal: Vec<f64>) -> ClassifierHead {
        let k = w_normal.len();
        ClassifierHead::new(
            Tensor::new(vec![2, k], [w_normal, w_abnormal].concat()).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap()
    }

    #[test]
    fn cam_is_the_weighted_sum_of_feature_maps() {
        let f = maps(vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 1.0, 0.0], &[2, 2, 2]);
        let h = head(vec![0.0, 0.0], vec![0.5, -1.0]);
        let cam = compute_cam(&f, &h, ABNORMAL).unwrap();
        assert_eq!(cam.data(), [0.5, 0.0, 0.5, 2.0]);
        assert_eq!(compute_cam(&f, &h, NORMAL).unwrap().data(), [0.0; 4]);
    }

    #[test]
    fn single_unit_weight_returns_the_map() {
        let f = maps(vec![0.3, 0.1, 0.7, 0.9], &[1, 2, 2]);
        let cam = compute_cam(&f, &head(vec![1.0], vec![1.0]), NORMAL).unwrap();
        assert_eq!(cam.data(), f.values().data());
    }

    #[test]
    fn cam_rejects_channel_mismatch() {
        let f = maps(vec![0.0; 12], &[3, 2, 2]);
        assert!(matches!(compute_cam(&f, &head(vec![1.0, 1.0], vec![1.0, 1.0]), 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalized_cam_values() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let n = Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap();
        let cam = normalize_cam(&a, &n).unwrap();
        assert!((cam.abnormal().data()[0] - 0.731_058_578_6).abs() < 1e-9);
        assert_eq!(cam.abnormal().data()[1], 0.5);
        assert!(normalize_cam(&a, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn global_pooled_cam_reproduces_the_logit_difference() {
        let net = LabelerNet::init(TrunkConfig::default(), 5).unwrap();
        let mut r = rng::stream(5, "img");
        let img = Tensor::from_fn(&[3, 16, 16], |_| r.random_range(0.0..1.0));
        let f = net.feature_maps(&img).unwrap();
        let head = net.head().unwrap();
        let [ln, la] = net.logits(&img).unwrap();
        let ma = compute_cam(&f, &head, ABNORMAL).unwrap().mean() + head.bias.data()[1];
        let mn = compute_cam(&f, &head, NORMAL).unwrap().mean() + head.bias.data()[0];
        assert!((ma - la).abs() < 1e-12 && (mn - ln).abs() < 1e-12);
    }

    #[test]
    fn from_params_rejects_foreign_keys() {
        let mut p = LabelerNet::init(TrunkConfig::default(), 1).unwrap().params;
        p.insert("extra", Tensor::zeros(&[1])).unwrap();
        assert!(LabelerNet::from_params(TrunkConfig::default(), p).is_err());
    }
}
