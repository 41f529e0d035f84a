//! Small phantom datasets for the training and acceptance suites.

use gsp_core::data::phantom::{phantom_cohort, phantom_slice_set, PhantomSpec};
use gsp_core::data::*;
use gsp_core::training::RunOptions;

/// T1/T2/FLAIR slice groups from two glioma and two meningioma volumes,
/// `2 * (tumor + healthy)` groups per class at 32x32.
pub fn synthesis_manifest(tumor: usize, healthy: usize, seed: u64) -> DatasetManifest {
    let vols = phantom_cohort(&[ClassLabel::Glioma, ClassLabel::Meningioma], 2, &PhantomSpec::default(), seed).unwrap();
    let opts = IngestOptions {
        tumor_slices: tumor,
        healthy_slices: healthy,
        image_size: 32,
    };
    DatasetManifest::new("phantom", Split::Train, ingest_volumes(&vols, &opts).unwrap())
}

/// `n` 2-d cases per class for all four classes at 32x32.
pub fn classification_manifest(n: usize, seed: u64) -> DatasetManifest {
    DatasetManifest::new("phantom", Split::Train, phantom_slice_set(&ClassLabel::ALL, n, 32, seed).unwrap())
}

pub fn quiet(max_steps: u64) -> RunOptions {
    RunOptions {
        max_steps: Some(max_steps),
        ..RunOptions::default()
    }
}
