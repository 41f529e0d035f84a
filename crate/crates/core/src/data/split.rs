use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::{ClassLabel, DatasetManifest, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::util::stream_rng;

/// Records sharing `(case_id, slice_index)` (the sequences of one slice)
/// move together; records without a slice index are units on their own.
struct Unit {
    key: (String, Option<usize>, Vec<u8>),
    class: ClassLabel,
    members: Vec<SliceRecord>,
}

fn pixel_digest(r: &SliceRecord) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(r.sequence.name().as_bytes());
    for v in r.pixels.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().to_vec()
}

fn units(records: Vec<SliceRecord>) -> Result<Vec<Unit>> {
    let mut grouped: BTreeMap<(String, usize), Vec<SliceRecord>> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        match r.slice_index {
            Some(z) => grouped.entry((r.case_id.clone(), z)).or_default().push(r),
            None => out.push(Unit {
                key: (r.case_id.clone(), None, pixel_digest(&r)),
                class: r.class_label,
                members: vec![r],
            }),
        }
    }
    for ((case, z), mut members) in grouped {
        let class = members[0].class_label;
        if members.iter().any(|m| m.class_label != class) {
            return Err(Error::data(format!(
                "case {case} slice {z}: records disagree on class label"
            )));
        }
        members.sort_by(|a, b| (a.sequence, a.provenance).cmp(&(b.sequence, b.provenance)));
        out.push(Unit {
            key: (case, Some(z), Vec::new()),
            class,
            members,
        });
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

/// Seeded split stratified by class: `round(train_fraction * n)` units of
/// each class go to train.
pub fn split_dataset(
    name: &str,
    records: Vec<SliceRecord>,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<Unit>> = BTreeMap::new();
    for u in units(records)? {
        by_class.entry(u.class).or_default().push(u);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut group) in by_class {
        if group.len() < 2 {
            return Err(Error::data(format!(
                "class {class} has {} record(s); a split needs at least 2",
                group.len()
            )));
        }
        let n_train = (train_fraction * group.len() as f64).round() as usize;
        let mut rng = stream_rng(seed, "split", class as u64);
        group.shuffle(&mut rng);
        for (i, u) in group.into_iter().enumerate() {
            if i < n_train {
                train.extend(u.members);
            } else {
                test.extend(u.members);
            }
        }
    }
    Ok((
        DatasetManifest::new(name, Split::Train, train),
        DatasetManifest::new(name, Split::Test, test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Sequence};
    use ndarray::Array2;

    fn rec(case: &str, z: usize, class: ClassLabel) -> SliceRecord {
        SliceRecord::new(
            case,
            Sequence::T1,
            Array2::zeros((2, 2)),
            class,
            Provenance::Real,
            Some(z),
        )
        .unwrap()
    }

    #[test]
    fn ten_records_split_eight_two() {
        let recs: Vec<_> = (0..10).map(|i| rec(&format!("c{i}"), 0, ClassLabel::Glioma)).collect();
        let (tr, te) = split_dataset("d", recs, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
    }

    #[test]
    fn stratification_per_class() {
        let mut recs: Vec<_> = (0..100).map(|i| rec(&format!("a{i}"), 0, ClassLabel::Glioma)).collect();
        recs.extend((0..50).map(|i| rec(&format!("b{i}"), 0, ClassLabel::Meningioma)));
        let (tr, te) = split_dataset("d", recs, 0.8, 9).unwrap();
        assert_eq!(tr.count(ClassLabel::Glioma), 80);
        assert_eq!(tr.count(ClassLabel::Meningioma), 40);
        assert_eq!(te.count(ClassLabel::Glioma), 20);
    }

    #[test]
    fn rejects_tiny_classes_and_bad_fractions() {
        let recs = vec![rec("a", 0, ClassLabel::Glioma), rec("b", 0, ClassLabel::NoTumor), rec("c", 0, ClassLabel::NoTumor)];
        assert!(split_dataset("d", recs.clone(), 0.8, 0).is_err());
        assert!(split_dataset("d", recs.clone(), 1.0, 0).is_err());
        assert!(split_dataset("d", recs, 0.0, 0).is_err());
    }

    #[test]
    fn sequences_of_a_slice_stay_together() {
        let mut recs = Vec::new();
        for i in 0..6 {
            for seq in [Sequence::T1, Sequence::T2] {
                let mut r = rec(&format!("c{i}"), 3, ClassLabel::Glioma);
                r.sequence = seq;
                recs.push(r);
            }
        }
        let (tr, te) = split_dataset("d", recs, 0.5, 4).unwrap();
        assert_eq!(tr.len(), 6);
        for r in &tr.records {
            assert!(te.records.iter().all(|t| t.case_id != r.case_id));
        }
    }
}
