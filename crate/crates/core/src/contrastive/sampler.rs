use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::loss::{Label, LabelSet};
use crate::error::{Error, Result};
use crate::numerics::rng;
use crate::patchgen::{PatchRecord, Position};
use crate::synth::Laterality;

/// Left/right patch pairs matched on (patient, position).
#[derive(Clone, Debug)]
pub struct PairIndex {
    pairs: Vec<(usize, usize)>,
}

impl PairIndex {
    /// Indexes `records`; patches without a same-patient, same-position
    /// counterpart on the other eye are left out.
    pub fn new(records: &[PatchRecord]) -> Self {
        let mut slots: BTreeMap<(&str, Position), (Option<usize>, Option<usize>)> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let slot = slots.entry((r.patient_id.as_str(), r.position)).or_default();
            match r.laterality {
                Laterality::Left => slot.0 = Some(i),
                Laterality::Right => slot.1 = Some(i),
            }
        }
        let pairs = slots
            .into_values()
            .filter_map(|(l, r)| Some((l?, r?)))
            .collect();
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn check_batch(&self, n: usize) -> Result<()> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::invalid("batch", format!("N = {n} must be positive and even")));
        }
        if n / 2 > self.pairs.len() {
            return Err(Error::invalid("batch", format!("N = {n} needs {} pairs, only {} available", n / 2, self.pairs.len())));
        }
        Ok(())
    }

    fn expand(&self, chosen: impl IntoIterator<Item = usize>, r: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = chosen
            .into_iter()
            .flat_map(|p| [self.pairs[p].0, self.pairs[p].1])
            .collect();
        out.shuffle(r);
        out
    }

    /// `N` patch indices: `N / 2` distinct left/right pairs, shuffled after
    /// pairing.
    pub fn sample_minibatch(&self, n: usize, r: &mut impl Rng) -> Result<Vec<usize>> {
        self.check_batch(n)?;
        let chosen = index::sample(r, self.pairs.len(), n / 2).into_vec();
        Ok(self.expand(chosen, r))
    }

    /// One pass over all pairs in shuffled order, `N / 2` pairs per batch; a
    /// short final batch is dropped.
    pub fn epoch_batches(&self, n: usize, r: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
        self.check_batch(n)?;
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(r);
        Ok(order
            .chunks_exact(n / 2)
            .map(|c| self.expand(c.iter().copied(), r))
            .collect())
    }
}

fn patient_code(patient_id: &str) -> u64 {
    rng::derive_seed(0, &format!("patient/{patient_id}"))
}

/// Label tuple of a patch under `labels`, in label-set order.
pub fn label_tuple(record: &PatchRecord, labels: &LabelSet) -> Vec<u64> {
    labels
        .labels()
        .iter()
        .map(|l| match l {
            Label::Position => record.position.index() as u64,
            Label::Abnormality => u64::from(record.abnormality.is_abnormal()),
            Label::Patient => patient_code(&record.patient_id),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::loss::mean_positives;
    use crate::synth::{Diagnosis, Split};
    use rand::Rng;

    pub(crate) fn synthetic_records(patients: usize, seed: u64) -> Vec<PatchRecord> {
        let mut r = rng::stream(seed, "records");
        let mut out = Vec::new();
        for p in 0..patients {
            for lat in [Laterality::Left, Laterality::Right] {
                for pos in Position::ALL {
                    let abnormal = r.random::<f64>() < 0.3;
                    out.push(PatchRecord {
                        patch_id: format!("p{p}-{lat:?}-{}", pos.as_str()),
                        image_id: format!("p{p}-{lat:?}"),
                        patient_id: format!("p{p:05}"),
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

    #[test]
    fn minimal_batch_is_one_matched_pair() {
        let recs = synthetic_records(4, 1);
        let idx = PairIndex::new(&recs);
        assert_eq!(idx.len(), 20);
        let b = idx.sample_minibatch(2, &mut rng::stream(1, "s")).unwrap();
        let (a, c) = (&recs[b[0]], &recs[b[1]]);
        assert_eq!(a.patient_id, c.patient_id);
        assert_eq!(a.position, c.position);
        assert_ne!(a.laterality, c.laterality);
        assert!(idx.sample_minibatch(3, &mut rng::stream(1, "s")).is_err());
    }

    #[test]
    fn unmatched_patches_are_never_sampled() {
        let mut recs = synthetic_records(3, 2);
        recs.retain(|r| !(r.patient_id == "p00001" && r.laterality == Laterality::Right));
        let idx = PairIndex::new(&recs);
        assert_eq!(idx.len(), 10);
        let mut r = rng::stream(2, "s");
        for _ in 0..50 {
            for i in idx.sample_minibatch(6, &mut r).unwrap() {
                assert_ne!(recs[i].patient_id, "p00001");
            }
        }
    }

    #[test]
    fn batches_balance_laterality_and_exceed_the_simclr_floor() {
        let recs = synthetic_records(40, 3);
        let idx = PairIndex::new(&recs);
        let mut r = rng::stream(3, "s");
        let mut total = 0.0;
        for _ in 0..200 {
            let b = idx.sample_minibatch(16, &mut r).unwrap();
            let left = b.iter().filter(|&&i| recs[i].laterality == Laterality::Left).count();
            assert_eq!(left * 2, b.len());
            let labels: Vec<Vec<u64>> = b
                .iter()
                .flat_map(|&i| {
                    let t = label_tuple(&recs[i], &LabelSet::full());
                    [t.clone(), t]
                })
                .collect();
            total += mean_positives(&labels).unwrap();
        }
        assert!(total / 200.0 > 1.0);
    }

    #[test]
    fn epoch_batches_cover_each_pair_once() {
        let recs = synthetic_records(6, 4);
        let idx = PairIndex::new(&recs);
        let batches = idx.epoch_batches(4, &mut rng::stream(4, "e")).unwrap();
        assert_eq!(batches.len(), 15);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 60);
    }

    #[test]
    fn removing_labels_only_adds_positives() {
        let recs = synthetic_records(5, 5);
        let full = LabelSet::full();
        for scheme in LabelSet::all_schemes() {
            for a in &recs {
                for b in &recs {
                    if label_tuple(a, &full) == label_tuple(b, &full) {
                        assert_eq!(label_tuple(a, &scheme), label_tuple(b, &scheme));
                    }
                }
            }
        }
    }
}
