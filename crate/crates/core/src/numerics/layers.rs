//! The three-block convolutional trunk shared by the pseudo-labeler and the
//! contrastive encoder, plus He-uniform initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::tensor::{Gradients, NetworkParams, Tensor};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub in_channels: usize,
    /// Output channels of the three blocks; the last is the feature width K.
    pub channels: [usize; 3],
    pub strides: [usize; 3],
    pub kernel: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: [8, 16, 16],
            strides: [2, 2, 1],
            kernel: 3,
        }
    }
}

impl TrunkConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Spatial extent of the feature maps for a square input of side `s`.
    pub fn output_side(&self, s: usize) -> usize {
        self.strides
            .iter()
            .fold(s, |n, &st| (n + 2 * self.pad() - self.kernel) / st + 1)
    }

    fn weight_name(i: usize) -> String {
        format!("trunk.conv{}.weight", i + 1)
    }

    fn bias_name(i: usize) -> String {
        format!("trunk.conv{}.bias", i + 1)
    }

    pub fn init(&self, rng: &mut impl Rng, params: &mut NetworkParams) -> Result<()> {
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.channels.iter().enumerate() {
            let shape = [c_out, c_in, self.kernel, self.kernel];
            params.insert(Self::weight_name(i), he_uniform(&shape, c_in * self.kernel * self.kernel, rng))?;
            params.insert(Self::bias_name(i), Tensor::zeros(&[c_out]))?;
            c_in = c_out;
        }
        Ok(())
    }

    /// Relu feature maps `[K, H', W']` and the activations needed for backward.
    pub fn forward(&self, params: &NetworkParams, input: &Tensor) -> Result<(Tensor, TrunkCache)> {
        let mut x = input.clone();
        let mut cache = TrunkCache::default();
        for i in 0..3 {
            let w = params.get(&Self::weight_name(i))?;
            let b = params.get(&Self::bias_name(i))?;
            let pre = ops::add_channel_bias(&ops::conv2d(&x, w, self.strides[i], self.pad())?, b)?;
            let next = ops::relu(&pre);
            cache.inputs.push(std::mem::replace(&mut x, next));
            cache.pre.push(pre);
        }
        Ok((x, cache))
    }

    /// Features only, without keeping activations.
    pub fn features(&self, params: &NetworkParams, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(params, input)?.0)
    }

    /// Trunk parameter gradients given `d loss / d features`.
    pub fn backward(
        &self,
        params: &NetworkParams,
        cache: &TrunkCache,
        grad_features: &Tensor,
        grads: &mut Gradients,
    ) -> Result<()> {
        let mut g = grad_features.clone();
        for i in (0..3).rev() {
            let g_pre = ops::relu_backward(&cache.pre[i], &g)?;
            let w = params.get(&Self::weight_name(i))?;
            grads.insert(Self::bias_name(i), ops::channel_bias_backward(&g_pre)?)?;
            let (g_in, g_w) = ops::conv2d_backward(&cache.inputs[i], w, self.strides[i], self.pad(), &g_pre)?;
            grads.insert(Self::weight_name(i), g_w)?;
            g = g_in;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..3)
            .flat_map(|i| [Self::weight_name(i), Self::bias_name(i)])
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrunkCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

/// Maps `[0, 1]` pixels to roughly zero mean, unit scale before the trunk.
pub fn standardize_input(img: &Tensor) -> Tensor {
    img.map(|v| (v - 0.5) * 4.0)
}

/// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, rng};

    #[test]
    fn output_side_follows_strides() {
        let cfg = TrunkConfig::default();
        assert_eq!(cfg.output_side(64), 16);
        assert_eq!(cfg.output_side(32), 8);
        assert_eq!(cfg.output_side(12), 3);
    }

    #[test]
    fn trunk_gradients_pass_finite_differences() {
        let cfg = TrunkConfig::default();
        let mut r = rng::stream(3, "trunk-test");
        let mut params = NetworkParams::new();
        cfg.init(&mut r, &mut params).unwrap();
        let x = Tensor::from_fn(&[3, 10, 10], |_| r.random_range(0.0..1.0));
        let probe = Tensor::from_fn(&[16, 3, 3], |_| r.random_range(-1.0..1.0));
        let loss = |p: &NetworkParams| -> Result<f64> {
            let f = cfg.features(p, &x)?;
            Ok(f.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
        };
        let (_, cache) = cfg.forward(&params, &x).unwrap();
        let mut grads = Gradients::new();
        cfg.backward(&params, &cache, &probe, &mut grads).unwrap();
        let report = finite_diff_check(loss, &params, &grads, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
