use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};
use crate::oracles;

/// One component of a view's label tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Position,
    Abnormality,
    Patient,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Position => "position",
            Label::Abnormality => "abnormality",
            Label::Patient => "patient",
        }
    }
}

/// Nonempty, sorted, duplicate-free set of labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Label>", into = "Vec<Label>")]
pub struct LabelSet(Vec<Label>);

impl LabelSet {
    pub fn new(labels: impl IntoIterator<Item = Label>) -> Result<Self> {
        let mut v: Vec<Label> = labels.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::invalid("labels", "label set must be nonempty"));
        }
        Ok(Self(v))
    }

    pub fn full() -> Self {
        Self(vec![Label::Position, Label::Abnormality, Label::Patient])
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn contains(&self, l: Label) -> bool {
        self.0.contains(&l)
    }

    /// Every nonempty subset, largest first, then in label order.
    pub fn all_schemes() -> Vec<LabelSet> {
        let all = [Label::Position, Label::Abnormality, Label::Patient];
        let mut out: Vec<LabelSet> = (1u8..8)
            .map(|mask| LabelSet::new(all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &l)| l)).unwrap())
            .collect();
        out.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.cmp(b)));
        out
    }
}

impl TryFrom<Vec<Label>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<Label>) -> Result<Self> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<Label> {
    fn from(s: LabelSet) -> Self {
        s.0
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|l| l.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LabelSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let labels = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| match p {
                "position" => Ok(Label::Position),
                "abnormality" => Ok(Label::Abnormality),
                "patient" => Ok(Label::Patient),
                other => Err(Error::invalid("labels", format!("unknown label {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSet::new(labels)
    }
}

/// How per-anchor terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over the `2N` anchors.
    #[default]
    Mean,
    /// Plain sum over anchors.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub labels: LabelSet,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            labels: LabelSet::full(),
            reduction: Reduction::Mean,
        }
    }
}

/// `2N` projected views with their label tuples; rows `2k` and `2k + 1` come
/// from the same source patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub z: Tensor,
    pub labels: Vec<Vec<u64>>,
}

impl ViewBatch {
    pub fn new(z: Tensor, labels: Vec<Vec<u64>>) -> Result<Self> {
        let [n, _] = z.dims::<2>("ViewBatch")?;
        if n != labels.len() {
            return Err(Error::shape("ViewBatch", format!("{n} rows, {} label tuples", labels.len())));
        }
        if n == 0 || n % 2 != 0 {
            return Err(Error::invalid("views", format!("{n} rows; need a positive even count")));
        }
        for k in 0..n / 2 {
            if labels[2 * k] != labels[2 * k + 1] {
                return Err(Error::invalid("labels", format!("views {} and {} of one patch disagree", 2 * k, 2 * k + 1)));
            }
        }
        Ok(Self { z, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.z.row(i).to_vec()).collect()
    }
}

/// `mask[i][j]` is true iff `i != j` and the tuples agree elementwise.
pub fn positives_mask(labels: &[Vec<u64>]) -> Result<Vec<Vec<bool>>> {
    if let Some(first) = labels.first() {
        if let Some((i, t)) = labels.iter().enumerate().find(|(_, t)| t.len() != first.len()) {
            return Err(Error::shape("positives_mask", format!("tuple {i} has arity {}, expected {}", t.len(), first.len())));
        }
    }
    Ok((0..labels.len())
        .map(|i| (0..labels.len()).map(|j| i != j && labels[i] == labels[j]).collect())
        .collect())
}

/// Mean positive count per anchor.
pub fn mean_positives(labels: &[Vec<u64>]) -> Result<f64> {
    let mask = positives_mask(labels)?;
    let total: usize = mask.iter().map(|row| row.iter().filter(|&&m| m).count()).sum();
    Ok(total as f64 / labels.len() as f64)
}

/// Multi-label supervised contrastive loss and its gradient w.r.t. `z`.
///
/// Anchor `i` contributes `lse_i - mean_{j in P(i)} s_ij`, where
/// `s_ij = z_i · z_j / tau` and `lse_i` runs over `k != i`; anchors without
/// positives contribute 0.
pub fn multilabel_supcon_loss(batch: &ViewBatch, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    if !(cfg.tau > 0.0) {
        return Err(Error::invalid("tau", format!("{} must be positive", cfg.tau)));
    }
    let mask = positives_mask(&batch.labels)?;
    let [n, d] = batch.z.dims::<2>("multilabel_supcon_loss")?;
    let z = batch.z.data();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s = batch.z.row(i).iter().zip(batch.z.row(j)).map(|(a, b)| a * b).sum::<f64>() / cfg.tau;
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    let scale = match cfg.reduction {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum => 1.0,
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * d];
    let mut others = Vec::with_capacity(n - 1);
    for i in 0..n {
        let n_pos = mask[i].iter().filter(|&&m| m).count();
        if n_pos == 0 {
            continue;
        }
        others.clear();
        others.extend((0..n).filter(|&k| k != i).map(|k| sim[i * n + k]));
        let lse = ops::log_sum_exp(&others);
        let pos_sum: f64 = (0..n).filter(|&j| mask[i][j]).map(|j| sim[i * n + j]).sum();
        loss += lse - pos_sum / n_pos as f64;
        for k in 0..n {
            if k == i {
                continue;
            }
            let p = (sim[i * n + k] - lse).exp();
            let g = scale * (p - if mask[i][k] { 1.0 / n_pos as f64 } else { 0.0 }) / cfg.tau;
            for c in 0..d {
                grad[i * d + c] += g * z[k * d + c];
                grad[k * d + c] += g * z[i * d + c];
            }
        }
    }
    Ok((loss * scale, Tensor::from_parts(vec![n, d], grad)?))
}

/// Checks the loss against an independent NT-Xent (every source patch has a
/// unique tuple) or single-label SupCon (all tuples equal), within 1e-9.
pub fn reduction_check(batch: &ViewBatch, tau: f64) -> Result<bool> {
    let n = batch.len();
    let unique = (0..n / 2).all(|a| (0..n / 2).all(|b| a == b || batch.labels[2 * a] != batch.labels[2 * b]));
    let shared = batch.labels.iter().all(|l| *l == batch.labels[0]);
    let cfg = LossConfig {
        tau,
        labels: LabelSet::full(),
        reduction: Reduction::Mean,
    };
    let (loss, _) = multilabel_supcon_loss(batch, &cfg)?;
    let reference = if shared {
        oracles::supcon_single_label(&batch.rows(), tau)
    } else if unique {
        oracles::nt_xent(&batch.rows(), tau)
    } else {
        return Err(Error::invalid("labels", "need unique per-patch tuples or one shared tuple"));
    };
    Ok((loss - reference).abs() <= 1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, rng, NetworkParams};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn random_unit_rows(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn paired_labels(n_src: usize, r: &mut impl Rng, classes: u64) -> Vec<Vec<u64>> {
        (0..n_src)
            .flat_map(|_| {
                let t = vec![r.random_range(0..classes), r.random_range(0..2)];
                [t.clone(), t]
            })
            .collect()
    }

    #[test]
    fn one_patch_two_views_is_zero() {
        let mut r = rng::stream(1, "n1");
        let b = ViewBatch::new(random_unit_rows(2, 4, &mut r), vec![vec![0], vec![0]]).unwrap();
        assert_eq!(multilabel_supcon_loss(&b, &LossConfig::default()).unwrap().0, 0.0);
    }

    #[test]
    fn mask_semantics() {
        let labels = vec![vec![0, 1, 7], vec![0, 1, 7], vec![0, 1, 8], vec![0, 1, 8], vec![2, 1, 7], vec![2, 1, 7]];
        let m = positives_mask(&labels).unwrap();
        assert!(m[0][1] && m[1][0]);
        assert!(!m[0][2], "same position and abnormality, other patient");
        assert!(!m[0][4], "same patient, other position");
        assert!((0..6).all(|i| !m[i][i]));
        assert!(positives_mask(&[vec![0], vec![0, 1]]).is_err());
    }

    #[test]
    fn anchor_without_positives_contributes_zero() {
        // Rows 0 and 1 break view consistency deliberately via direct construction.
        let mut r = rng::stream(2, "nopos");
        let z = random_unit_rows(4, 3, &mut r);
        let with = ViewBatch {
            z: z.clone(),
            labels: vec![vec![0], vec![1], vec![2], vec![2]],
        };
        let cfg = LossConfig {
            reduction: Reduction::Sum,
            ..LossConfig::default()
        };
        let (l, g) = multilabel_supcon_loss(&with, &cfg).unwrap();
        let only = ViewBatch::new(
            Tensor::new(vec![2, 3], [z.row(2), z.row(3)].concat()).unwrap(),
            vec![vec![2], vec![2]],
        )
        .unwrap();
        assert!(l > 0.0);
        assert!(multilabel_supcon_loss(&only, &cfg).unwrap().0 == 0.0);
        assert!(g.is_finite());
    }

    #[test]
    fn rejects_bad_tau_and_inconsistent_pairs() {
        let z = Tensor::full(&[2, 2], 0.5f64.sqrt());
        let b = ViewBatch::new(z.clone(), vec![vec![0], vec![0]]).unwrap();
        let cfg = LossConfig {
            tau: 0.0,
            ..LossConfig::default()
        };
        assert!(multilabel_supcon_loss(&b, &cfg).is_err());
        assert!(ViewBatch::new(z, vec![vec![0], vec![1]]).is_err());
    }

    #[test]
    fn matches_the_literal_formula_with_sum_reduction() {
        for seed in 0..20 {
            let mut r = rng::stream(seed, "formula");
            let b = ViewBatch::new(random_unit_rows(8, 5, &mut r), paired_labels(4, &mut r, 2)).unwrap();
            let cfg = LossConfig {
                reduction: Reduction::Sum,
                ..LossConfig::default()
            };
            let (l, _) = multilabel_supcon_loss(&b, &cfg).unwrap();
            let o = oracles::multilabel_supcon_sum(&b.rows(), &b.labels, 0.1);
            assert!((l - o).abs() < 1e-10, "seed {seed}: {l} vs {o}");
        }
    }

    #[test]
    fn degenerate_label_sets_reduce_to_known_losses() {
        for tau in [0.05, 0.1, 0.5] {
            let mut r = rng::stream(3, "reduce");
            let z = random_unit_rows(8, 6, &mut r);
            let unique = ViewBatch::new(z.clone(), (0..8).map(|i| vec![i / 2]).collect()).unwrap();
            let shared = ViewBatch::new(z, vec![vec![9]; 8]).unwrap();
            assert!(reduction_check(&unique, tau).unwrap());
            assert!(reduction_check(&shared, tau).unwrap());
        }
    }

    #[test]
    fn nonnegative_and_permutation_invariant() {
        let mut r = rng::stream(4, "perm");
        let b = ViewBatch::new(random_unit_rows(12, 4, &mut r), paired_labels(6, &mut r, 2)).unwrap();
        let (l, _) = multilabel_supcon_loss(&b, &LossConfig::default()).unwrap();
        assert!(l >= 0.0);
        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut r);
        let z = Tensor::new(vec![12, 4], order.iter().flat_map(|&o| b.z.row(o).to_vec()).collect()).unwrap();
        let permuted = ViewBatch {
            z,
            labels: order.iter().map(|&o| b.labels[o].clone()).collect(),
        };
        let (lp, _) = multilabel_supcon_loss(&permuted, &LossConfig::default()).unwrap();
        assert!((l - lp).abs() < 1e-12);
    }

    #[test]
    fn gradient_wrt_z_matches_finite_differences() {
        for seed in 0..10 {
            let mut r = rng::stream(seed, "zgrad");
            let b = ViewBatch::new(random_unit_rows(8, 4, &mut r), paired_labels(4, &mut r, 2)).unwrap();
            let cfg = LossConfig::default();
            let (_, g) = multilabel_supcon_loss(&b, &cfg).unwrap();
            let mut p = NetworkParams::new();
            p.insert("z", b.z.clone()).unwrap();
            let mut gp = NetworkParams::new();
            gp.insert("z", g).unwrap();
            let labels = b.labels.clone();
            let f = |q: &NetworkParams| {
                let batch = ViewBatch::new(q.get("z")?.clone(), labels.clone())?;
                Ok(multilabel_supcon_loss(&batch, &cfg)?.0)
            };
            let rep = finite_diff_check(f, &p, &gp, 1e-6).unwrap();
            assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn label_set_parsing_and_schemes() {
        let s: LabelSet = "patient, position".parse().unwrap();
        assert_eq!(s.labels(), [Label::Position, Label::Patient]);
        assert_eq!(s.to_string(), "position,patient");
        assert!("".parse::<LabelSet>().is_err());
        assert!("colour".parse::<LabelSet>().is_err());
        let schemes = LabelSet::all_schemes();
        assert_eq!(schemes.len(), 7);
        assert_eq!(schemes[0], LabelSet::full());
    }
}
