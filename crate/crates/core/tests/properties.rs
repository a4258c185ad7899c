use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swcl_core::contrastive::{
    label_tuple, multilabel_supcon_loss, LabelSet, LossConfig, PairIndex, Reduction, ViewBatch,
};
use swcl_core::labeler::normalize_cam;
use swcl_core::numerics::Tensor;
use swcl_core::patchgen::{threshold_label, PatchRecord, Position};
use swcl_core::synth::{Diagnosis, Laterality, Split, SynthConfig};

fn unit_rows(raw: &[Vec<f64>]) -> Tensor {
    let d = raw[0].len();
    let data = raw
        .iter()
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            r.iter().map(move |v| v / n)
        })
        .collect();
    Tensor::from_parts(vec![raw.len(), d], data).unwrap()
}

fn records(flags: &[(bool, bool)]) -> Vec<PatchRecord> {
    flags
        .iter()
        .enumerate()
        .flat_map(|(p, &(left_abn, right_abn))| {
            let pid = SynthConfig::patient_id(p / Position::ALL.len());
            let pos = Position::ALL[p % Position::ALL.len()];
            [(Laterality::Left, left_abn), (Laterality::Right, right_abn)].map(|(lat, abn)| {
                let image_id = SynthConfig::image_id(&pid, lat);
                PatchRecord {
                    patch_id: format!("{image_id}-{}", pos.as_str()),
                    image_id,
                    patient_id: pid.clone(),
                    laterality: lat,
                    split: Split::Unlabeled,
                    position: pos,
                    lesion_score: if abn { 0.9 } else { 0.1 },
                    abnormality: if abn { Diagnosis::Abnormal } else { Diagnosis::Normal },
                    gt_patch_abnormal: abn,
                    pixel_path: String::new(),
                }
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_finite_nonnegative_and_pair_order_invariant(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 4..=12),
        classes in prop::collection::vec(0u64..3, 6),
        tau in 0.05f64..1.0,
    ) {
        let n_src = raw.len() / 2;
        let raw = &raw[..2 * n_src];
        let labels: Vec<Vec<u64>> = (0..2 * n_src).map(|i| vec![classes[i / 2]]).collect();
        let cfg = LossConfig { tau, reduction: Reduction::Sum, ..LossConfig::default() };
        let (loss, grad) = multilabel_supcon_loss(&ViewBatch::new(unit_rows(raw), labels.clone()).unwrap(), &cfg).unwrap();
        prop_assert!(loss.is_finite() && loss >= -1e-12);
        prop_assert!(grad.is_finite());

        // Reversing the order of source pairs permutes anchors only.
        let order: Vec<usize> = (0..n_src).rev().flat_map(|k| [2 * k, 2 * k + 1]).collect();
        let raw_rev: Vec<Vec<f64>> = order.iter().map(|&i| raw[i].clone()).collect();
        let labels_rev: Vec<Vec<u64>> = order.iter().map(|&i| labels[i].clone()).collect();
        let (loss_rev, _) = multilabel_supcon_loss(&ViewBatch::new(unit_rows(&raw_rev), labels_rev).unwrap(), &cfg).unwrap();
        prop_assert!((loss - loss_rev).abs() <= 1e-10 * loss.abs().max(1.0));
    }

    #[test]
    fn normalized_cam_is_a_pointwise_probability(
        a in prop::collection::vec(-30.0f64..30.0, 16),
        n in prop::collection::vec(-30.0f64..30.0, 16),
    ) {
        let m_a = Tensor::from_parts(vec![4, 4], a).unwrap();
        let m_n = Tensor::from_parts(vec![4, 4], n).unwrap();
        let cam = normalize_cam(&m_a, &m_n).unwrap();
        for (p, q) in cam.abnormal().data().iter().zip(cam.normal().data()) {
            prop_assert!((0.0..=1.0).contains(p));
            prop_assert!((p + q - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn threshold_labels_are_monotone_in_t(score in 0.0f64..=1.0, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if threshold_label(score, hi).unwrap().is_abnormal() {
            prop_assert!(threshold_label(score, lo).unwrap().is_abnormal());
        }
    }

    #[test]
    fn sampled_batches_are_balanced_and_paired(
        flags in prop::collection::vec(any::<(bool, bool)>(), 10..40),
        half in 1usize..5,
        seed in any::<u64>(),
    ) {
        let recs = records(&flags);
        let index = PairIndex::new(&recs);
        prop_assert_eq!(index.len(), flags.len());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let batch = index.sample_minibatch(2 * half, &mut r).unwrap();
        let left = batch.iter().filter(|&&i| recs[i].laterality == Laterality::Left).count();
        prop_assert_eq!(2 * left, batch.len());
        for &i in &batch {
            let partners = batch
                .iter()
                .filter(|&&j| recs[j].laterality != recs[i].laterality
                    && recs[j].patient_id == recs[i].patient_id
                    && recs[j].position == recs[i].position)
                .count();
            prop_assert_eq!(partners, 1);
        }
        let full = LabelSet::full();
        for &i in &batch {
            prop_assert_eq!(label_tuple(&recs[i], &full).len(), 3);
        }
    }
}
