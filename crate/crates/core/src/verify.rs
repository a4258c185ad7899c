//! The invariant suite behind the `verify` subcommand. Each check is
//! self-contained, seeded and returns a one-line summary of what it measured.

use std::time::Instant;

use rand::Rng;

use crate::contrastive::{
    label_tuple, multilabel_supcon_loss, positives_mask, views_loss, EncoderConfig, EncoderNet, LabelSet, LossConfig,
    PairIndex, Reduction, ViewBatch,
};
use crate::error::Result;
use crate::eval::auc_roc;
use crate::labeler::{
    compute_cam, extract_cams, normalize_cam, random_feature_maps, s4l_loss, ClassifierHead, ImageViews, LabelerNet,
    S4LConfig, ABNORMAL, NORMAL,
};
use crate::numerics::{finite_diff_check_at, ops, rng, Tensor};
use crate::oracles::precise::{PreciseContrastive, PreciseS4L};
use crate::oracles::{self, conv2d_nested};
use crate::patchgen::{build_dataset, threshold_label, PatchRecord, Position};
use crate::synth::{generate_dataset, mirror_check, Diagnosis, Laterality, Split, SynthConfig};

/// Tolerances and sizes the suite is pinned to.
pub const GRAD_EPSILON: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 10;
pub const GRAD_VIEWS: usize = 8;
pub const GRAD_VIEW_SIDE: usize = 12;
pub const FORMULA_BATCHES: u64 = 100;
pub const FORMULA_TOL: f64 = 1e-10;
pub const REDUCTION_TOL: f64 = 1e-9;
pub const REDUCTION_TAUS: [f64; 3] = [0.05, 0.1, 0.5];
pub const CAM_TOL: f64 = 1e-12;
pub const SAMPLER_BATCHES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    /// Gradient and oracle agreement; a failure maps to exit code 3.
    Numerical,
    /// Data contracts; a failure maps to exit code 2.
    Contract,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub kind: CheckKind,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub type CheckFn = fn() -> Result<(bool, String)>;

pub const CHECKS: &[(&str, CheckKind, CheckFn)] = &[
    ("encoder-gradients", CheckKind::Numerical, encoder_gradients),
    ("labeler-gradients", CheckKind::Numerical, labeler_gradients),
    ("supcon-formula", CheckKind::Numerical, supcon_formula),
    ("degenerate-reductions", CheckKind::Numerical, degenerate_reductions),
    ("cam-algebra", CheckKind::Numerical, cam_algebra),
    ("conv-oracle", CheckKind::Numerical, conv_oracle),
    ("auc-oracle", CheckKind::Numerical, auc_oracle),
    ("triplet-closed-forms", CheckKind::Numerical, triplet_closed_forms),
    ("annotation-pipeline", CheckKind::Contract, annotation_pipeline),
    ("sampler-contract", CheckKind::Contract, sampler_contract),
    ("mask-monotonicity", CheckKind::Contract, mask_monotonicity),
    ("mirror-templates", CheckKind::Contract, mirror_templates),
];

pub fn run_check(name: &'static str, kind: CheckKind, f: CheckFn) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name,
        kind,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS.iter().map(|&(n, k, f)| run_check(n, k, f)).collect()
}

fn random_image(r: &mut impl Rng, side: usize) -> Tensor {
    Tensor::from_fn(&[3, side, side], |_| r.random_range(0.0..1.0))
}

fn random_unit_rows(n: usize, d: usize, r: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::from_parts(vec![n, d], data).expect("consistent shape")
}

/// Per-source label tuples duplicated for both views; small label ranges so
/// that cross-patch positives occur.
fn paired_tuples(n_src: usize, r: &mut impl Rng) -> Vec<Vec<u64>> {
    (0..n_src)
        .flat_map(|_| {
            let t = vec![r.random_range(0..2), r.random_range(0..2), r.random_range(0..2)];
            [t.clone(), t]
        })
        .collect()
}

/// Central differences through the full encoder against the analytic
/// gradient, with the loss differences evaluated in double-double.
pub fn encoder_gradients() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for seed in 0..GRAD_SEEDS {
        let mut r = rng::stream(seed, "verify/encoder-gradients");
        let net = EncoderNet::init(EncoderConfig::default(), seed)?;
        let views: Vec<Tensor> = (0..GRAD_VIEWS).map(|_| random_image(&mut r, GRAD_VIEW_SIDE)).collect();
        let refs: Vec<&Tensor> = views.iter().collect();
        let labels = paired_tuples(GRAD_VIEWS / 2, &mut r);
        let cfg = LossConfig::default();
        let (_, grads) = views_loss(&net, &refs, labels.clone(), &cfg)?;
        let precise = PreciseContrastive::new(&net, &refs, labels, &cfg)?;
        let rep = finite_diff_check_at(|n, i, v| precise.loss_offset(n, i, v), &net.params, &grads, GRAD_EPSILON)?;
        if rep.max_rel_error > worst {
            worst = rep.max_rel_error;
            worst_at = format!("seed {seed} {}[{}]", rep.worst_param, rep.worst_index);
        }
    }
    Ok((
        worst < GRAD_REL_TOL,
        format!("max rel error {worst:.3e} at {worst_at} over {GRAD_SEEDS} seeds (tol {GRAD_REL_TOL:e})"),
    ))
}

/// The same check for the pseudo-labeler objective (cross-entropy plus
/// triplet) on small random batches.
pub fn labeler_gradients() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let mut r = rng::stream(seed, "verify/labeler-gradients");
        let cfg = S4LConfig {
            views_per_image: 2,
            ..S4LConfig::default()
        };
        let mut images = |n: usize, labeled: bool| -> Vec<ImageViews> {
            (0..n)
                .map(|i| ImageViews {
                    views: (0..2).map(|_| random_image(&mut r, 8)).collect(),
                    label: labeled.then_some(i % 2),
                })
                .collect()
        };
        let (lab, unlab) = (images(2, true), images(1, false));
        let net = LabelerNet::init(cfg.trunk.clone(), seed)?;
        let out = s4l_loss(&lab, &unlab, &net, &cfg)?;
        let precise = PreciseS4L::new(&net, &lab, &unlab, &cfg)?;
        let rep = finite_diff_check_at(|n, i, v| precise.loss_offset(n, i, v), &net.params, &out.grads, GRAD_EPSILON)?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok((worst < GRAD_REL_TOL, format!("max rel error {worst:.3e} over 3 seeds")))
}

/// The loss with sum reduction against the literal displayed formula.
pub fn supcon_formula() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..FORMULA_BATCHES {
        let mut r = rng::stream(seed, "verify/supcon-formula");
        let n_src = r.random_range(2..=6);
        let d = r.random_range(3..=8);
        let tau = r.random_range(0.05..1.0);
        let batch = ViewBatch::new(random_unit_rows(2 * n_src, d, &mut r), paired_tuples(n_src, &mut r))?;
        let cfg = LossConfig {
            tau,
            reduction: Reduction::Sum,
            ..LossConfig::default()
        };
        let (loss, _) = multilabel_supcon_loss(&batch, &cfg)?;
        let rows: Vec<Vec<f64>> = (0..batch.len()).map(|i| batch.z.row(i).to_vec()).collect();
        worst = worst.max((loss - oracles::multilabel_supcon_sum(&rows, &batch.labels, tau)).abs());
    }
    Ok((worst <= FORMULA_TOL, format!("max abs diff {worst:.3e} over {FORMULA_BATCHES} batches")))
}

/// Unique tuples reduce to NT-Xent; one shared tuple reduces to single-label
/// SupCon.
pub fn degenerate_reductions() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for tau in REDUCTION_TAUS {
        for seed in 0..10 {
            let mut r = rng::stream(seed, "verify/reductions");
            let n_src = r.random_range(2..=8);
            let z = random_unit_rows(2 * n_src, 6, &mut r);
            let rows: Vec<Vec<f64>> = (0..2 * n_src).map(|i| z.row(i).to_vec()).collect();
            let cfg = LossConfig {
                tau,
                ..LossConfig::default()
            };
            let unique = ViewBatch::new(z.clone(), (0..2 * n_src as u64).map(|i| vec![i / 2]).collect())?;
            let shared = ViewBatch::new(z, vec![vec![7]; 2 * n_src])?;
            let a = multilabel_supcon_loss(&unique, &cfg)?.0 - oracles::nt_xent(&rows, tau);
            let b = multilabel_supcon_loss(&shared, &cfg)?.0 - oracles::supcon_single_label(&rows, tau);
            worst = worst.max(a.abs()).max(b.abs());
        }
    }
    Ok((worst <= REDUCTION_TOL, format!("max abs diff {worst:.3e} for tau in {REDUCTION_TAUS:?}")))
}

/// Weighted-sum oracle, linearity in the head, pointwise sum-to-one and
/// shift invariance of the normalization.
pub fn cam_algebra() -> Result<(bool, String)> {
    let (mut oracle, mut sum_one, mut shift, mut linear) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut r = rng::stream(seed, "verify/cam");
        let (k, h, w) = (r.random_range(1..=16), r.random_range(2..=9), r.random_range(2..=9));
        let f = random_feature_maps(k, h, w, &mut r);
        let mut head = || -> Result<ClassifierHead> {
            ClassifierHead::new(Tensor::from_fn(&[2, k], |_| r.random_range(-2.0..2.0)), Tensor::zeros(&[2]))
        };
        let (h1, h2) = (head()?, head()?);
        let m_a = compute_cam(&f, &h1, ABNORMAL)?;
        let m_n = compute_cam(&f, &h1, NORMAL)?;
        for c in [NORMAL, ABNORMAL] {
            let m = compute_cam(&f, &h1, c)?;
            for y in 0..h {
                for x in 0..w {
                    let direct = oracles::compensated_sum(
                        (0..k).map(|ch| h1.weights.data()[c * k + ch] * f.values().data()[(ch * h + y) * w + x]),
                    );
                    oracle = oracle.max((m.data()[y * w + x] - direct).abs());
                }
            }
        }
        let (alpha, beta) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mixed = ClassifierHead::new(
            Tensor::from_fn(&[2, k], |i| alpha * h1.weights.data()[i] + beta * h2.weights.data()[i]),
            Tensor::zeros(&[2]),
        )?;
        let lhs = compute_cam(&f, &mixed, ABNORMAL)?;
        let rhs = compute_cam(&f, &h2, ABNORMAL)?;
        for i in 0..lhs.len() {
            linear = linear.max((lhs.data()[i] - (alpha * m_a.data()[i] + beta * rhs.data()[i])).abs());
        }
        let cam = normalize_cam(&m_a, &m_n)?;
        let normal = cam.normal();
        for (a, n) in cam.abnormal().data().iter().zip(normal.data()) {
            sum_one = sum_one.max((a + n - 1.0).abs());
        }
        let c = r.random_range(-50.0..50.0);
        let shifted = normalize_cam(&m_a.map(|v| v + c), &m_n.map(|v| v + c))?;
        shift = shift.max(shifted.abnormal().max_abs_diff(cam.abnormal()));
    }
    let passed = oracle <= CAM_TOL && sum_one <= CAM_TOL && shift <= CAM_TOL && linear <= 1e-10;
    Ok((
        passed,
        format!("oracle {oracle:.1e}, sum-to-one {sum_one:.1e}, shift {shift:.1e}, linearity {linear:.1e} over 100 maps"),
    ))
}

/// Production convolution against nested loops over random geometries.
pub fn conv_oracle() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut r = rng::stream(seed, "verify/conv");
        let (c, o, k) = (r.random_range(1..=4), r.random_range(1..=5), [1, 3, 5][r.random_range(0..3)]);
        let (h, w) = (r.random_range(k..=11), r.random_range(k..=11));
        let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=k / 2));
        let input = Tensor::from_fn(&[c, h, w], |_| r.random_range(-1.0..1.0));
        let kernel = Tensor::from_fn(&[o, c, k, k], |_| r.random_range(-1.0..1.0));
        let fast = ops::conv2d(&input, &kernel, stride, pad)?;
        let nest_in: Vec<Vec<Vec<f64>>> = (0..c)
            .map(|ci| (0..h).map(|y| input.data()[(ci * h + y) * w..(ci * h + y + 1) * w].to_vec()).collect())
            .collect();
        let nest_k: Vec<Vec<Vec<Vec<f64>>>> = (0..o)
            .map(|oi| {
                (0..c)
                    .map(|ci| {
                        (0..k)
                            .map(|y| {
                                let base = ((oi * c + ci) * k + y) * k;
                                kernel.data()[base..base + k].to_vec()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let slow: Vec<f64> = conv2d_nested(&nest_in, &nest_k, stride, pad).into_iter().flatten().flatten().collect();
        if slow.len() != fast.len() {
            return Ok((false, format!("seed {seed}: {} vs {} outputs", fast.len(), slow.len())));
        }
        for (a, b) in fast.data().iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max abs diff {worst:.1e} over 50 geometries")))
}

/// Rank AUC against exhaustive pair counting, ties included.
pub fn auc_oracle() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let mut r = rng::stream(seed, "verify/auc");
        let n = r.random_range(2..=40);
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..8) as f64) / 8.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((auc_roc(&scores, &labels)? - oracles::pair_counting_auc(&scores, &labels)).abs());
    }
    let example = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true])?;
    let passed = worst <= 1e-12 && (example - 0.75).abs() <= 1e-12;
    Ok((passed, format!("max abs diff {worst:.1e} over 200 tied inputs; example {example}")))
}

/// Closed-form values of the soft-margin triplet term.
pub fn triplet_closed_forms() -> Result<(bool, String)> {
    use crate::labeler::{batch_hard_triplet, TripletFormulation};
    let same = Tensor::from_parts(vec![4, 2], vec![0.3; 8])?;
    let flat = batch_hard_triplet(&same, &[0, 0, 1, 1], 0.5, TripletFormulation::SoftplusMargin)?;
    let apart = Tensor::from_parts(vec![4, 2], vec![0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 10.0, 0.0])?;
    let tail = batch_hard_triplet(&apart, &[0, 0, 1, 1], 0.5, TripletFormulation::SoftplusMargin)?;
    let a = (flat - ops::softplus(0.5)).abs();
    let b = (tail - ops::softplus(-9.5)).abs();
    Ok((
        a <= 1e-12 && b <= 1e-15 && tail < 1e-3,
        format!("identical embeddings {flat:.10}, separated clusters {tail:.4e}"),
    ))
}

/// Five patches per image, normal override, threshold monotonicity and the
/// inclusive boundary on a small synthetic run with an untrained labeler.
pub fn annotation_pipeline() -> Result<(bool, String)> {
    let cfg = SynthConfig {
        n_patients_labeled: 6,
        n_patients_unlabeled: 6,
        image_size: 32,
        seed: 11,
        ..SynthConfig::default()
    };
    let images = generate_dataset(&cfg)?;
    let net = LabelerNet::init(S4LConfig::default().trunk, 11)?;
    let cams = extract_cams(&net, &images)?;
    let (manifest, _, hist) = build_dataset(&images, &cams, 0.4, 0.5)?;
    let mut failures = Vec::new();
    if manifest.records.len() != 5 * images.len() {
        failures.push(format!("{} records for {} images", manifest.records.len(), images.len()));
    }
    for img in &images {
        let mut positions: Vec<Position> = manifest
            .records
            .iter()
            .filter(|r| r.image_id == img.image_id)
            .map(|r| r.position)
            .collect();
        positions.sort();
        if positions != Position::ALL {
            failures.push(format!("{} has positions {positions:?}", img.image_id));
        }
    }
    let overridden: Vec<&PatchRecord> = manifest
        .records
        .iter()
        .filter(|r| {
            r.split == Split::Labeled && images.iter().any(|i| i.image_id == r.image_id && i.gt_label == Diagnosis::Normal)
        })
        .collect();
    if overridden.is_empty() || overridden.iter().any(|r| r.lesion_score != 0.0) {
        failures.push("labeled-normal patches not all scored 0".into());
    }
    if hist.counts[0] < overridden.len() {
        failures.push("histogram first bin misses overridden scores".into());
    }
    let counts: Vec<usize> = (0..=10)
        .map(|i| manifest.relabel(i as f64 / 10.0).map(|m| m.abnormal_count()))
        .collect::<Result<_>>()?;
    if counts.windows(2).any(|w| w[1] > w[0]) {
        failures.push(format!("abnormal counts not monotone: {counts:?}"));
    }
    let probe = manifest
        .records
        .iter()
        .map(|r| r.lesion_score)
        .find(|&s| s > 0.0)
        .unwrap_or(0.5);
    let at = threshold_label(probe, probe)?;
    let above = threshold_label(probe, probe.next_up())?;
    if at != Diagnosis::Abnormal || above != Diagnosis::Normal || threshold_label(0.4, 0.4)? != Diagnosis::Abnormal {
        failures.push("threshold is not inclusive at score == t".into());
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} images, {} patches, abnormal counts over t: {counts:?}", images.len(), manifest.records.len())
        } else {
            failures.join("; ")
        },
    ))
}

fn synthetic_patch_records(patients: usize, seed: u64) -> Vec<PatchRecord> {
    let mut r = rng::stream(seed, "verify/records");
    let mut out = Vec::new();
    for p in 0..patients {
        for lat in [Laterality::Left, Laterality::Right] {
            let image_id = SynthConfig::image_id(&SynthConfig::patient_id(p), lat);
            for pos in Position::ALL {
                let abnormal = r.random::<f64>() < 0.3;
                out.push(PatchRecord {
                    patch_id: format!("{image_id}-{}", pos.as_str()),
                    image_id: image_id.clone(),
                    patient_id: SynthConfig::patient_id(p),
                    laterality: lat,
                    split: Split::Unlabeled,
                    position: pos,
                    lesion_score: if abnormal { 0.8 } else { 0.1 },
                    abnormality: if abnormal { Diagnosis::Abnormal } else { Diagnosis::Normal },
                    gt_patch_abnormal: abnormal,
                    pixel_path: String::new(),
                });
            }
        }
    }
    out
}

/// Laterality balance, within-pair position and patient agreement, and the
/// mean positive count under the full label set.
pub fn sampler_contract() -> Result<(bool, String)> {
    let records = synthetic_patch_records(40, 5);
    let index = PairIndex::new(&records);
    let mut r = rng::stream(5, "verify/sampler");
    let full = LabelSet::full();
    let (mut total_pos, mut min_pos) = (0.0, f64::INFINITY);
    for b in 0..SAMPLER_BATCHES {
        let batch = index.sample_minibatch(16, &mut r)?;
        let left = batch.iter().filter(|&&i| records[i].laterality == Laterality::Left).count();
        if 2 * left != batch.len() {
            return Ok((false, format!("batch {b}: {left} left of {}", batch.len())));
        }
        for &i in &batch {
            let partner = batch.iter().filter(|&&j| {
                records[j].laterality != records[i].laterality
                    && records[j].patient_id == records[i].patient_id
                    && records[j].position == records[i].position
            });
            if partner.count() != 1 {
                return Ok((false, format!("batch {b}: {} has no matched partner", records[i].patch_id)));
            }
        }
        let labels: Vec<Vec<u64>> = batch
            .iter()
            .flat_map(|&i| {
                let t = label_tuple(&records[i], &full);
                [t.clone(), t]
            })
            .collect();
        let mean = crate::contrastive::mean_positives(&labels)?;
        total_pos += mean;
        min_pos = min_pos.min(mean);
    }
    let avg = total_pos / SAMPLER_BATCHES as f64;
    Ok((
        avg > 1.0 && min_pos >= 1.0,
        format!("{SAMPLER_BATCHES} batches balanced and paired; mean positives per anchor {avg:.3} (min {min_pos:.3})"),
    ))
}

/// Dropping labels from a scheme can only add positives.
pub fn mask_monotonicity() -> Result<(bool, String)> {
    let records = synthetic_patch_records(12, 6);
    let schemes = LabelSet::all_schemes();
    let mut pairs = 0;
    for big in &schemes {
        for small in &schemes {
            if !small.labels().iter().all(|l| big.contains(*l)) {
                continue;
            }
            let mb = positives_mask(&records.iter().map(|r| label_tuple(r, big)).collect::<Vec<_>>())?;
            let ms = positives_mask(&records.iter().map(|r| label_tuple(r, small)).collect::<Vec<_>>())?;
            if mb.iter().flatten().zip(ms.iter().flatten()).any(|(&b, &s)| b && !s) {
                return Ok((false, format!("{small} loses a positive of {big}")));
            }
            pairs += 1;
        }
    }
    Ok((true, format!("{pairs} nested scheme pairs, no positive lost")))
}

/// Right-eye templates are exact mirrors of the left-eye templates.
pub fn mirror_templates() -> Result<(bool, String)> {
    let cfg = SynthConfig {
        n_patients_labeled: 3,
        n_patients_unlabeled: 3,
        image_size: 32,
        seed: 3,
        ..SynthConfig::default()
    };
    let images = generate_dataset(&cfg)?;
    for pair in images.chunks_exact(2) {
        if !mirror_check(&pair[0], &pair[1])? {
            return Ok((false, format!("{} does not mirror", pair[0].patient_id)));
        }
    }
    Ok((true, format!("{} patients mirrored exactly", images.len() / 2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for &(name, kind, f) in CHECKS {
            if name == "encoder-gradients" {
                continue;
            }
            let out = run_check(name, kind, f);
            assert!(out.passed, "{name}: {}", out.detail);
        }
    }
}
