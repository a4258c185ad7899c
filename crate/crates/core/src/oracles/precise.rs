//! Double-double re-evaluation of the training losses for gradient checks.
//!
//! Base activations of every view are kept in double-double. A perturbation of
//! one parameter is propagated as an activation delta, so only the channels it
//! reaches are recomputed. Losses are returned relative to the unperturbed
//! value; the offset cancels in central differences while the rounding noise
//! of a plain f64 evaluation (about `1e-16 · |L| / ε`) disappears.

use super::dd::Dd;
use crate::contrastive::{EncoderNet, LossConfig, Reduction, FC1_BIAS, FC1_WEIGHT, FC2_BIAS, FC2_WEIGHT};
use crate::error::{Error, Result};
use crate::labeler::{ImageViews, LabelerNet, S4LConfig, TripletFormulation, HEAD_BIAS, HEAD_WEIGHT};
use crate::numerics::layers::TrunkConfig;
use crate::numerics::{NetworkParams, Tensor};

struct Layer {
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn in_plane(&self) -> usize {
        self.h_in * self.w_in
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input cell feeding output `(y, x)` through tap `(ky, kx)`.
    fn source(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (y * self.stride + ky).checked_sub(self.pad)?;
        let ix = (x * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h_in && ix < self.w_in).then_some(iy * self.w_in + ix)
    }

    fn forward(&self, input: &[Dd]) -> Vec<Dd> {
        let mut out = Vec::with_capacity(self.c_out * self.out_plane());
        for o in 0..self.c_out {
            for y in 0..self.h_out {
                for x in 0..self.w_out {
                    let mut acc = Dd::new(self.bias[o]);
                    for c in 0..self.c_in {
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                if let Some(s) = self.source(y, x, ky, kx) {
                                    let w = self.weight[((o * self.c_in + c) * self.k + ky) * self.k + kx];
                                    acc = acc + input[c * self.in_plane() + s].mul_f64(w);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    /// Pre-activation change caused by input deltas on `active` channels.
    fn propagate(&self, active: &[(usize, Vec<Dd>)]) -> Vec<Dd> {
        let mut out = vec![Dd::ZERO; self.c_out * self.out_plane()];
        for o in 0..self.c_out {
            for y in 0..self.h_out {
                for x in 0..self.w_out {
                    let mut acc = Dd::ZERO;
                    for (c, delta) in active {
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                if let Some(s) = self.source(y, x, ky, kx) {
                                    let w = self.weight[((o * self.c_in + c) * self.k + ky) * self.k + kx];
                                    acc = acc + delta[s].mul_f64(w);
                                }
                            }
                        }
                    }
                    out[o * self.out_plane() + y * self.w_out + x] = acc;
                }
            }
        }
        out
    }
}

fn relu(v: Dd) -> Dd {
    if v.is_positive() {
        v
    } else {
        Dd::ZERO
    }
}

struct ViewState {
    /// `acts[0]` is the standardized input; `acts[l + 1]` follows layer `l`.
    acts: Vec<Vec<Dd>>,
    pre: Vec<Vec<Dd>>,
}

/// Trunk parameter perturbation: layer, weight (true) or bias, flat index,
/// new value.
type TrunkPerturbation = (usize, bool, usize, f64);

struct PreciseTrunk {
    layers: Vec<Layer>,
    views: Vec<ViewState>,
}

fn parse_trunk_name(name: &str) -> Option<(usize, bool)> {
    let rest = name.strip_prefix("trunk.conv")?;
    let (idx, kind) = rest.split_once('.')?;
    let layer = idx.parse::<usize>().ok()?.checked_sub(1)?;
    match kind {
        "weight" => Some((layer, true)),
        "bias" => Some((layer, false)),
        _ => None,
    }
}

impl PreciseTrunk {
    fn new(cfg: &TrunkConfig, params: &NetworkParams, views: &[&Tensor]) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::invalid("views", "empty"))?;
        let [c0, mut h, mut w] = first.dims::<3>("PreciseTrunk")?;
        let pad = cfg.kernel / 2;
        let mut layers = Vec::new();
        let mut c_in = c0;
        for (l, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let h_out = (h + 2 * pad - cfg.kernel) / stride + 1;
            let w_out = (w + 2 * pad - cfg.kernel) / stride + 1;
            layers.push(Layer {
                c_in,
                c_out,
                k: cfg.kernel,
                stride,
                pad,
                h_in: h,
                w_in: w,
                h_out,
                w_out,
                weight: params.get(&format!("trunk.conv{}.weight", l + 1))?.data().to_vec(),
                bias: params.get(&format!("trunk.conv{}.bias", l + 1))?.data().to_vec(),
            });
            (c_in, h, w) = (c_out, h_out, w_out);
        }
        let views = views
            .iter()
            .map(|v| {
                if v.shape() != first.shape() {
                    return Err(Error::shape("PreciseTrunk", "views differ in shape"));
                }
                let input: Vec<Dd> = v.data().iter().map(|&p| (Dd::new(p) - Dd::new(0.5)).mul_f64(4.0)).collect();
                let mut acts = vec![input];
                let mut pre = Vec::new();
                for layer in &layers {
                    let p = layer.forward(acts.last().expect("input present"));
                    acts.push(p.iter().map(|&x| relu(x)).collect());
                    pre.push(p);
                }
                Ok(ViewState { acts, pre })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, views })
    }

    fn last_acts(&self, view: &ViewState, perturb: Option<TrunkPerturbation>) -> Vec<Dd> {
        let Some((l, is_weight, idx, value)) = perturb else {
            return view.acts[self.layers.len()].clone();
        };
        let layer = &self.layers[l];
        let plane = layer.out_plane();
        let mut d_pre = vec![Dd::ZERO; plane];
        let o;
        if is_weight {
            let k2 = layer.k * layer.k;
            o = idx / (layer.c_in * k2);
            let c = (idx / k2) % layer.c_in;
            let (ky, kx) = ((idx % k2) / layer.k, idx % layer.k);
            let delta = Dd::diff(value, layer.weight[idx]);
            let input = &view.acts[l][c * layer.in_plane()..(c + 1) * layer.in_plane()];
            for y in 0..layer.h_out {
                for x in 0..layer.w_out {
                    if let Some(s) = layer.source(y, x, ky, kx) {
                        d_pre[y * layer.w_out + x] = delta * input[s];
                    }
                }
            }
        } else {
            o = idx;
            d_pre.fill(Dd::diff(value, layer.bias[o]));
        }
        let base_pre = &view.pre[l][o * plane..(o + 1) * plane];
        let base_act = &view.acts[l + 1][o * plane..(o + 1) * plane];
        let d_act: Vec<Dd> = (0..plane).map(|i| relu(base_pre[i] + d_pre[i]) - base_act[i]).collect();
        let mut active = vec![(o, d_act)];
        for m in l + 1..self.layers.len() {
            let next = &self.layers[m];
            let d_pre = next.propagate(&active);
            let p = next.out_plane();
            active = (0..next.c_out)
                .map(|c| {
                    let d = (0..p)
                        .map(|i| {
                            let j = c * p + i;
                            relu(view.pre[m][j] + d_pre[j]) - view.acts[m + 1][j]
                        })
                        .collect();
                    (c, d)
                })
                .collect();
        }
        let mut out = view.acts[self.layers.len()].clone();
        let p = self.layers.last().expect("three layers").out_plane();
        for (c, d) in active {
            for (i, v) in d.into_iter().enumerate() {
                out[c * p + i] = out[c * p + i] + v;
            }
        }
        out
    }

    /// Globally pooled embeddings of every view under an optional perturbation.
    fn embeddings(&self, perturb: Option<TrunkPerturbation>) -> Vec<Vec<Dd>> {
        let last = self.layers.last().expect("three layers");
        let p = last.out_plane();
        self.views
            .iter()
            .map(|v| {
                let acts = self.last_acts(v, perturb);
                (0..last.c_out)
                    .map(|c| acts[c * p..(c + 1) * p].iter().copied().sum::<Dd>() / Dd::new(p as f64))
                    .collect()
            })
            .collect()
    }
}

fn affine(w: &[f64], b: &[f64], x: &[Dd]) -> Vec<Dd> {
    let d_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bo)| {
            x.iter()
                .zip(&w[o * d_in..(o + 1) * d_in])
                .fold(Dd::new(bo), |acc, (&xv, &wv)| acc + xv.mul_f64(wv))
        })
        .collect()
}

fn log_sum_exp(values: &[Dd]) -> Dd {
    let m = values.iter().copied().fold(Dd::new(f64::NEG_INFINITY), Dd::max);
    m + values.iter().map(|&v| (v - m).exp()).sum::<Dd>().ln()
}

fn dot(a: &[Dd], b: &[Dd]) -> Dd {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Parameter values with at most one coordinate replaced.
fn with_override(params: &NetworkParams, name: &str, over: Option<(&str, usize, f64)>) -> Result<Vec<f64>> {
    let mut v = params.get(name)?.data().to_vec();
    if let Some((n, i, val)) = over {
        if n == name {
            v[i] = val;
        }
    }
    Ok(v)
}

fn trunk_perturbation(over: Option<(&str, usize, f64)>) -> Option<TrunkPerturbation> {
    let (name, idx, value) = over?;
    let (layer, is_weight) = parse_trunk_name(name)?;
    Some((layer, is_weight, idx, value))
}

/// The multi-label contrastive loss through the full encoder.
pub struct PreciseContrastive {
    trunk: PreciseTrunk,
    params: NetworkParams,
    normalize: bool,
    labels: Vec<Vec<u64>>,
    tau: f64,
    reduction: Reduction,
    base: Dd,
}

impl PreciseContrastive {
    pub fn new(net: &EncoderNet, views: &[&Tensor], labels: Vec<Vec<u64>>, cfg: &LossConfig) -> Result<Self> {
        let mut out = Self {
            trunk: PreciseTrunk::new(&net.cfg.trunk, &net.params, views)?,
            params: net.params.clone(),
            normalize: net.cfg.normalize,
            labels,
            tau: cfg.tau,
            reduction: cfg.reduction,
            base: Dd::ZERO,
        };
        out.base = out.loss(None)?;
        out
            .base
            .hi
            .is_finite()
            .then_some(out)
            .ok_or_else(|| Error::NonFinite {
                context: "precise contrastive loss".into(),
            })
    }

    pub fn value(&self) -> f64 {
        self.base.to_f64()
    }

    fn loss(&self, over: Option<(&str, usize, f64)>) -> Result<Dd> {
        let hs = self.trunk.embeddings(trunk_perturbation(over));
        let w1 = with_override(&self.params, FC1_WEIGHT, over)?;
        let b1 = with_override(&self.params, FC1_BIAS, over)?;
        let w2 = with_override(&self.params, FC2_WEIGHT, over)?;
        let b2 = with_override(&self.params, FC2_BIAS, over)?;
        let z: Vec<Vec<Dd>> = hs
            .iter()
            .map(|h| {
                let r: Vec<Dd> = affine(&w1, &b1, h).into_iter().map(relu).collect();
                let u = affine(&w2, &b2, &r);
                if self.normalize {
                    let n = dot(&u, &u).sqrt();
                    u.iter().map(|&x| x / n).collect()
                } else {
                    u
                }
            })
            .collect();
        let n = z.len();
        let tau = Dd::new(self.tau);
        let mut total = Dd::ZERO;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && self.labels[j] == self.labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let sims: Vec<Dd> = (0..n).map(|k| dot(&z[i], &z[k]) / tau).collect();
            let others: Vec<Dd> = (0..n).filter(|&k| k != i).map(|k| sims[k]).collect();
            let pos_mean = pos.iter().map(|&j| sims[j]).sum::<Dd>() / Dd::new(pos.len() as f64);
            total = total + log_sum_exp(&others) - pos_mean;
        }
        Ok(match self.reduction {
            Reduction::Mean => total / Dd::new(n as f64),
            Reduction::Sum => total,
        })
    }

    /// `L(p') - L(p)` where `p'` sets `name[index] = value`.
    pub fn loss_offset(&self, name: &str, index: usize, value: f64) -> Result<f64> {
        Ok((self.loss(Some((name, index, value)))? - self.base).to_f64())
    }
}

/// Cross-entropy plus weighted batch-hard triplet through the labeler.
pub struct PreciseS4L {
    trunk: PreciseTrunk,
    params: NetworkParams,
    targets: Vec<Option<usize>>,
    ids: Vec<usize>,
    w: f64,
    margin: f64,
    formulation: TripletFormulation,
    base: Dd,
}

impl PreciseS4L {
    pub fn new(net: &LabelerNet, labeled: &[ImageViews], unlabeled: &[ImageViews], cfg: &S4LConfig) -> Result<Self> {
        let mut views = Vec::new();
        let mut targets = Vec::new();
        let mut ids = Vec::new();
        for (i, img) in labeled.iter().chain(unlabeled).enumerate() {
            for v in &img.views {
                views.push(v);
                targets.push(if i < labeled.len() { img.label } else { None });
                ids.push(i);
            }
        }
        let mut out = Self {
            trunk: PreciseTrunk::new(&net.trunk, &net.params, &views)?,
            params: net.params.clone(),
            targets,
            ids,
            w: cfg.w,
            margin: cfg.margin,
            formulation: cfg.triplet,
            base: Dd::ZERO,
        };
        out.base = out.loss(None)?;
        Ok(out)
    }

    pub fn value(&self) -> f64 {
        self.base.to_f64()
    }

    fn loss(&self, over: Option<(&str, usize, f64)>) -> Result<Dd> {
        let hs = self.trunk.embeddings(trunk_perturbation(over));
        let hw = with_override(&self.params, HEAD_WEIGHT, over)?;
        let hb = with_override(&self.params, HEAD_BIAS, over)?;
        let mut ce = Dd::ZERO;
        let mut n_lab = 0usize;
        for (h, t) in hs.iter().zip(&self.targets) {
            if let Some(t) = t {
                let logits = affine(&hw, &hb, h);
                ce = ce + log_sum_exp(&logits) - logits[*t];
                n_lab += 1;
            }
        }
        let ce = ce / Dd::new(n_lab as f64);
        let b = hs.len();
        let mut tri = Dd::ZERO;
        for a in 0..b {
            let mut far = Dd::new(f64::NEG_INFINITY);
            let mut near = Dd::new(f64::INFINITY);
            for j in (0..b).filter(|&j| j != a) {
                let diff: Vec<Dd> = hs[a].iter().zip(&hs[j]).map(|(&x, &y)| x - y).collect();
                let d = dot(&diff, &diff).sqrt();
                if self.ids[j] == self.ids[a] {
                    far = far.max(d);
                } else {
                    near = near.min(d);
                }
            }
            let x = far - near + Dd::new(self.margin);
            tri = tri
                + match self.formulation {
                    TripletFormulation::SoftplusMargin if x.is_positive() => x + (Dd::ONE + (-x).exp()).ln(),
                    TripletFormulation::SoftplusMargin => (Dd::ONE + x.exp()).ln(),
                    TripletFormulation::Hinge => relu(x),
                };
        }
        Ok(ce + (tri / Dd::new(b as f64)).mul_f64(self.w))
    }

    pub fn loss_offset(&self, name: &str, index: usize, value: f64) -> Result<f64> {
        Ok((self.loss(Some((name, index, value)))? - self.base).to_f64())
    }
}
