//! Batch-hard triplet loss over instance ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{sigmoid, softplus};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletFormulation {
    /// `softplus(d_ap - d_an + m)`
    #[default]
    SoftplusMargin,
    /// `max(0, d_ap - d_an + m)`
    Hinge,
}

impl std::str::FromStr for TripletFormulation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "softplus-margin" => Ok(Self::SoftplusMargin),
            "hinge" => Ok(Self::Hinge),
            other => Err(format!("unknown triplet formulation {other}")),
        }
    }
}

impl TripletFormulation {
    fn value(self, x: f64) -> f64 {
        match self {
            Self::SoftplusMargin => softplus(x),
            Self::Hinge => x.max(0.0),
        }
    }

    fn slope(self, x: f64) -> f64 {
        match self {
            Self::SoftplusMargin => sigmoid(x),
            Self::Hinge => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn pairwise_distances(e: &Tensor) -> Vec<f64> {
    let b = e.shape()[0];
    let mut d = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = e
                .row(i)
                .iter()
                .zip(e.row(j))
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            d[i * b + j] = v;
            d[j * b + i] = v;
        }
    }
    d
}

fn check_ids<T: Eq + std::fmt::Debug>(b: usize, ids: &[T]) -> Result<()> {
    if ids.len() != b {
        return Err(Error::shape("batch_hard_triplet", format!("{b} embeddings, {} ids", ids.len())));
    }
    if ids.iter().all(|id| *id == ids[0]) {
        return Err(Error::invalid(
            "instance_ids",
            format!("only one distinct id ({:?}); no negatives exist", ids.first()),
        ));
    }
    for (a, id) in ids.iter().enumerate() {
        if !ids.iter().enumerate().any(|(p, other)| p != a && other == id) {
            return Err(Error::invalid("instance_ids", format!("anchor {a} (id {id:?}) has no positive")));
        }
    }
    Ok(())
}

/// Mean over anchors of `f(max_p d(a,p) - min_n d(a,n) + margin)` with
/// Euclidean `d`.
pub fn batch_hard_triplet<T: Eq + std::fmt::Debug>(
    embeddings: &Tensor,
    instance_ids: &[T],
    margin: f64,
    formulation: TripletFormulation,
) -> Result<f64> {
    Ok(batch_hard_triplet_with_grad(embeddings, instance_ids, margin, formulation)?.0)
}

/// Loss and its gradient w.r.t. the `[B, D]` embeddings. Zero-distance
/// pairs take a zero subgradient.
pub fn batch_hard_triplet_with_grad<T: Eq + std::fmt::Debug>(
    embeddings: &Tensor,
    instance_ids: &[T],
    margin: f64,
    formulation: TripletFormulation,
) -> Result<(f64, Tensor)> {
    let [b, dim] = embeddings.dims::<2>("batch_hard_triplet")?;
    check_ids(b, instance_ids)?;
    let dist = pairwise_distances(embeddings);
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * dim];
    for a in 0..b {
        let mut hard_pos = None::<(usize, f64)>;
        let mut hard_neg = None::<(usize, f64)>;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist[a * b + j];
            if instance_ids[j] == instance_ids[a] {
                if hard_pos.is_none_or(|(_, best)| d > best) {
                    hard_pos = Some((j, d));
                }
            } else if hard_neg.is_none_or(|(_, best)| d < best) {
                hard_neg = Some((j, d));
            }
        }
        let ((p, d_ap), (n, d_an)) = (hard_pos.expect("checked"), hard_neg.expect("checked"));
        let x = d_ap - d_an + margin;
        loss += formulation.value(x);
        let s = formulation.slope(x) / b as f64;
        if s == 0.0 {
            continue;
        }
        for (other, d, sign) in [(p, d_ap, 1.0), (n, d_an, -1.0)] {
            if d == 0.0 {
                continue;
            }
            for k in 0..dim {
                let u = (embeddings.row(a)[k] - embeddings.row(other)[k]) / d;
                grad[a * dim + k] += sign * s * u;
                grad[other * dim + k] -= sign * s * u;
            }
        }
    }
    Ok((loss / b as f64, Tensor::from_parts(vec![b, dim], grad)?))
}
