use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use super::{ClassLabel, DatasetManifest, Provenance, Sequence, SliceRecord};
use crate::error::{Error, Result};

/// Anything that turns paired source-sequence slices into a target-sequence slice.
pub trait Synthesizer {
    fn sources(&self) -> Vec<Sequence>;

    fn target(&self) -> Sequence;

    /// `inputs` follows the order of [`Synthesizer::sources`].
    fn synthesize(&self, inputs: &[&SliceRecord]) -> Result<Array2<f32>>;
}

/// Appends one synthetic target-sequence record per tumor-class record of
/// `train`, generated from the paired slices found in `pool`.
///
/// Records of other sequences or classes pass through untouched.
pub fn build_augmented(
    train: &DatasetManifest,
    pool: &[SliceRecord],
    synthesizer: &dyn Synthesizer,
    tumor_classes: &BTreeSet<ClassLabel>,
) -> Result<DatasetManifest> {
    if let Some(c) = tumor_classes.iter().find(|c| !c.is_tumor() || **c == ClassLabel::Pituitary) {
        return Err(Error::config(format!(
            "augmentation classes must be glioma or meningioma, got {c}"
        )));
    }
    let target = synthesizer.target();
    let sources = synthesizer.sources();
    let mut index: BTreeMap<(Sequence, String, Option<usize>), &SliceRecord> = BTreeMap::new();
    for r in pool.iter().chain(train.records.iter()) {
        if r.provenance == Provenance::Real {
            index.entry((r.sequence, r.case_id.clone(), r.slice_index)).or_insert(r);
        }
    }

    let mut records = train.records.clone();
    let mut missing = BTreeSet::new();
    for r in &train.records {
        if r.sequence != target
            || r.provenance != Provenance::Real
            || !tumor_classes.contains(&r.class_label)
        {
            continue;
        }
        let inputs: Option<Vec<&SliceRecord>> = sources
            .iter()
            .map(|&s| index.get(&(s, r.case_id.clone(), r.slice_index)).copied())
            .collect();
        let Some(inputs) = inputs else {
            missing.insert(r.case_id.clone());
            continue;
        };
        if !missing.is_empty() {
            continue;
        }
        let pixels = synthesizer
            .synthesize(&inputs)?
            .mapv(|v| v.clamp(-1.0, 1.0));
        records.push(SliceRecord::new(
            r.case_id.clone(),
            target,
            pixels,
            r.class_label,
            Provenance::Synthetic,
            r.slice_index,
        )?);
    }
    if !missing.is_empty() {
        let ids: Vec<_> = missing.into_iter().collect();
        return Err(Error::data(format!(
            "missing paired source slices for cases: {}",
            ids.join(", ")
        )));
    }
    Ok(DatasetManifest::new(
        format!("{}-augmented", train.name),
        train.split,
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    struct Flip;

    impl Synthesizer for Flip {
        fn sources(&self) -> Vec<Sequence> {
            vec![Sequence::T1]
        }
        fn target(&self) -> Sequence {
            Sequence::T2
        }
        fn synthesize(&self, inputs: &[&SliceRecord]) -> Result<Array2<f32>> {
            Ok(inputs[0].pixels.mapv(|v| -v))
        }
    }

    fn rec(case: &str, seq: Sequence, class: ClassLabel) -> SliceRecord {
        SliceRecord::new(case, seq, Array2::from_elem((2, 2), 0.5), class, Provenance::Real, Some(1)).unwrap()
    }

    #[test]
    fn doubles_only_requested_classes() {
        let mut train = Vec::new();
        let mut pool = Vec::new();
        for i in 0..3 {
            train.push(rec(&format!("g{i}"), Sequence::T2, ClassLabel::Glioma));
            pool.push(rec(&format!("g{i}"), Sequence::T1, ClassLabel::Glioma));
        }
        train.push(rec("h", Sequence::T2, ClassLabel::NoTumor));
        let m = DatasetManifest::new("toy", Split::Train, train);
        let out = build_augmented(&m, &pool, &Flip, &[ClassLabel::Glioma].into()).unwrap();
        assert_eq!(out.count(ClassLabel::Glioma), 6);
        assert_eq!(out.count(ClassLabel::NoTumor), 1);
        let syn: Vec<_> = out.records.iter().filter(|r| r.provenance == Provenance::Synthetic).collect();
        assert_eq!(syn.len(), 3);
        assert!(syn.iter().all(|r| r.pixels[[0, 0]] == -0.5 && r.sequence == Sequence::T2));
        assert_eq!(&out.records[..4], &m.records[..]);
    }

    #[test]
    fn empty_class_set_is_identity() {
        let m = DatasetManifest::new("toy", Split::Train, vec![rec("a", Sequence::T2, ClassLabel::Glioma)]);
        let out = build_augmented(&m, &[], &Flip, &BTreeSet::new()).unwrap();
        assert_eq!(out.records, m.records);
    }

    #[test]
    fn missing_pairs_are_listed() {
        let m = DatasetManifest::new(
            "toy",
            Split::Train,
            vec![rec("a", Sequence::T2, ClassLabel::Glioma), rec("b", Sequence::T2, ClassLabel::Glioma)],
        );
        let err = build_augmented(&m, &[], &Flip, &[ClassLabel::Glioma].into()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a, b"), "{msg}");
    }
}
