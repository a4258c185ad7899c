use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{he_uniform, standardize_input, TrunkCache, TrunkConfig};
use crate::numerics::{ops, rng, NetworkParams, Tensor};

pub const FC1_WEIGHT: &str = "proj.fc1.weight";
pub const FC1_BIAS: &str = "proj.fc1.bias";
pub const FC2_WEIGHT: &str = "proj.fc2.weight";
pub const FC2_BIAS: &str = "proj.fc2.bias";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub trunk: TrunkConfig,
    pub proj_dim: usize,
    /// L2-normalize the projection output.
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            trunk: TrunkConfig::default(),
            proj_dim: 16,
            normalize: true,
        }
    }
}

/// Trunk, global average pooling to the embedding `h`, then a two-layer
/// projection head to `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    pub cfg: EncoderConfig,
    pub params: NetworkParams,
}

pub(crate) struct EncoderCache {
    trunk: TrunkCache,
    fshape: Vec<usize>,
    h: Tensor,
    a1: Tensor,
    r1: Tensor,
    u: Tensor,
    pub(crate) z: Tensor,
}

impl EncoderNet {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        if cfg.proj_dim == 0 {
            return Err(Error::invalid("proj_dim", "must be positive"));
        }
        let mut r = rng::stream(seed, "encoder-init");
        let mut params = NetworkParams::new();
        cfg.trunk.init(&mut r, &mut params)?;
        let k = cfg.trunk.feature_dim();
        params.insert(FC1_WEIGHT, he_uniform(&[k, k], k, &mut r))?;
        params.insert(FC1_BIAS, Tensor::zeros(&[k]))?;
        params.insert(FC2_WEIGHT, he_uniform(&[cfg.proj_dim, k], k, &mut r))?;
        params.insert(FC2_BIAS, Tensor::zeros(&[cfg.proj_dim]))?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: EncoderConfig, params: NetworkParams) -> Result<Self> {
        let reference = Self::init(cfg.clone(), 0)?;
        if !reference.params.same_keys(&params) {
            let names: Vec<_> = params.names().cloned().collect();
            return Err(Error::invalid("params", format!("unexpected parameter set {names:?}")));
        }
        for (name, t) in reference.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::shape("EncoderNet::from_params", format!("{name}: {:?}", params.get(name)?.shape())));
            }
        }
        Ok(Self { cfg, params })
    }

    /// Embedding `h` (the probe input).
    pub fn embed(&self, img: &Tensor) -> Result<Tensor> {
        ops::gap(&self.cfg.trunk.features(&self.params, &standardize_input(img))?)
    }

    pub fn project(&self, img: &Tensor) -> Result<Tensor> {
        Ok(self.forward_view(img)?.z)
    }

    pub(crate) fn forward_view(&self, img: &Tensor) -> Result<EncoderCache> {
        let (f, trunk) = self.cfg.trunk.forward(&self.params, &standardize_input(img))?;
        let h = ops::gap(&f)?;
        let a1 = ops::linear(&h, self.params.get(FC1_WEIGHT)?, self.params.get(FC1_BIAS)?)?;
        let r1 = ops::relu(&a1);
        let u = ops::linear(&r1, self.params.get(FC2_WEIGHT)?, self.params.get(FC2_BIAS)?)?;
        let z = if self.cfg.normalize { ops::l2_normalize(&u)? } else { u.clone() };
        Ok(EncoderCache {
            trunk,
            fshape: f.shape().to_vec(),
            h,
            a1,
            r1,
            u,
            z,
        })
    }

    pub(crate) fn backward_view(&self, cache: &EncoderCache, grad_z: &Tensor) -> Result<NetworkParams> {
        let mut grads = NetworkParams::new();
        let gu = if self.cfg.normalize {
            ops::l2_normalize_backward(&cache.u, grad_z)?
        } else {
            grad_z.clone()
        };
        let (gr1, gw2, gb2) = ops::linear_backward(&cache.r1, self.params.get(FC2_WEIGHT)?, &gu)?;
        let ga1 = ops::relu_backward(&cache.a1, &gr1)?;
        let (gh, gw1, gb1) = ops::linear_backward(&cache.h, self.params.get(FC1_WEIGHT)?, &ga1)?;
        grads.insert(FC2_WEIGHT, gw2)?;
        grads.insert(FC2_BIAS, gb2)?;
        grads.insert(FC1_WEIGHT, gw1)?;
        grads.insert(FC1_BIAS, gb1)?;
        let gf = ops::gap_backward(&cache.fshape, &gh)?;
        self.cfg.trunk.backward(&self.params, &cache.trunk, &gf, &mut grads)?;
        Ok(grads)
    }

    /// Checksum over the trunk parameters only.
    pub fn trunk_checksum(&self) -> u64 {
        let trunk: NetworkParams = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("trunk."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        trunk.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn projections_are_unit_norm() {
        let net = EncoderNet::init(EncoderConfig::default(), 7).unwrap();
        let mut r = rng::stream(7, "imgs");
        for _ in 0..5 {
            let img = Tensor::from_fn(&[3, 32, 32], |_| r.random_range(0.0..1.0));
            let z = net.project(&img).unwrap();
            assert_eq!(z.shape(), [16]);
            assert!((z.norm() - 1.0).abs() < 1e-10);
            assert_eq!(net.embed(&img).unwrap().shape(), [16]);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = EncoderNet::init(EncoderConfig::default(), 8).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i % 11) as f64 / 11.0);
        assert_eq!(net.project(&img).unwrap().data(), net.project(&img).unwrap().data());
    }
}
