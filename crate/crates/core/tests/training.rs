mod common;

use common::fixtures::*;
use gsp_core::data::*;
use gsp_core::losses::LossWeights;
use gsp_core::models::*;
use gsp_core::training::*;

fn bits(log: &RunLog) -> Vec<Vec<u64>> {
    log.steps.iter().map(|s| s.values.iter().map(|v| v.to_bits()).collect()).collect()
}

fn pretrain_cfg(batch: usize) -> PretrainConfig {
    PretrainConfig {
        batch,
        epochs: 1000,
        ..PretrainConfig::default()
    }
}

fn finetune_cfg() -> FinetuneConfig {
    FinetuneConfig {
        batch: 4,
        lr: 1e-4,
        epochs: 1000,
        ..FinetuneConfig::default()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn pretrain_is_bit_reproducible() {
    let m = synthesis_manifest(1, 1, 3);
    let model = ModelConfig::toy();
    let cfg = pretrain_cfg(2);
    let a = run_pretrain(&m, None, &model, &cfg, &quiet(20), None).unwrap();
    let b = run_pretrain(&m, None, &model, &cfg, &quiet(20), None).unwrap();
    assert_eq!(a.log.steps.len(), 20);
    assert_eq!(bits(&a.log), bits(&b.log));
    assert_eq!(a.state, b.state);
    let steps: Vec<u64> = a.log.steps.iter().map(|s| s.step).collect();
    assert_eq!(steps, (1..=20).collect::<Vec<_>>());
    // adversarial term is on by default and logged in every row
    assert!(a.log.steps.iter().all(|s| s.values.len() == 5 && s.values.iter().all(|v| v.is_finite())));
}

#[test]
fn pretrain_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthesis_manifest(1, 1, 3);
    let model = ModelConfig::toy();
    let cfg = pretrain_cfg(2);
    let full = run_pretrain(&m, None, &model, &cfg, &quiet(30), None).unwrap();
    let first = run_pretrain(&m, None, &model, &cfg, &quiet(10), None).unwrap();
    let path = dir.path().join("k.gspckpt");
    save_checkpoint(&first.checkpoint, &path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let rest = run_pretrain(&m, None, &model, &cfg, &quiet(30), Some(&ckpt)).unwrap();
    assert_eq!(rest.log.steps.len(), 20);
    for (r, f) in rest.log.steps.iter().zip(&full.log.steps[10..]) {
        assert_eq!(r.step, f.step);
        assert!(max_abs_diff(&r.values, &f.values) < 1e-6, "step {}", r.step);
    }
}

#[test]
fn one_epoch_covers_every_pair_once() {
    // 4 classes' worth of slices: 2 volumes x 2 classes x 1 tumor slice = 4 groups
    let m = synthesis_manifest(1, 0, 5);
    let pairs = build_pairs(&m, &[Sequence::T1, Sequence::T2]);
    assert_eq!(pairs.len(), 4);
    let cfg = PretrainConfig {
        epochs: 1,
        batch: 3,
        ..PretrainConfig::default()
    };
    let test = synthesis_manifest(0, 1, 6);
    let out = run_pretrain(&m, Some(&test), &ModelConfig::toy(), &cfg, &RunOptions::default(), None).unwrap();
    assert_eq!(out.log.steps.len(), 2);
    let r = out.report.unwrap();
    assert_eq!(r.psnr.len(), build_pairs(&test, &[Sequence::T1, Sequence::T2]).len());
    assert_eq!(r.ssim.len(), r.psnr.len());
    assert_eq!(r.mse.len(), r.psnr.len());
    let mut seen: Vec<usize> = (0..2).flat_map(|s| batch_indices(4, 3, 0, "pretrain-epoch", s)).collect();
    seen.sort();
    assert_eq!(seen, vec![0, 1, 2, 3]);
}

#[test]
fn pixel_loss_descends_on_a_fixed_batch() {
    let m = synthesis_manifest(1, 1, 3);
    let pairs = build_pairs(&m, &[Sequence::T1, Sequence::T2]);
    let refs: Vec<&PairedSlice> = pairs.iter().take(4).collect();
    let cfg = PretrainConfig {
        weights: LossWeights {
            adv: 0.0,
            rec: 0.0,
            ..LossWeights::default()
        },
        ..PretrainConfig::default()
    };
    let batch = PairBatch::new(&refs, &cfg, 3, 32).unwrap();
    let mut state = PretrainState::new(&ModelConfig::toy(), &cfg).unwrap();
    let losses: Vec<f64> = (0..51).map(|_| pretrain_step(&mut state, &batch, &cfg).unwrap()[0]).collect();
    let violations = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(violations <= 5, "{violations} increases in {losses:?}");
    assert!(losses[50] < losses[0]);
}

#[test]
fn empty_training_manifest_is_rejected() {
    let m = DatasetManifest::new("empty", Split::Train, Vec::new());
    assert!(run_pretrain(&m, None, &ModelConfig::toy(), &PretrainConfig::default(), &quiet(1), None).is_err());
}

#[test]
fn finetune_is_bit_reproducible_and_resumable() {
    let train = classification_manifest(2, 1);
    let test = classification_manifest(1, 2);
    let model = ModelConfig::toy();
    let cfg = finetune_cfg();
    let a = run_finetune(&train, &test, &model, &cfg, None, &quiet(20), None).unwrap();
    let b = run_finetune(&train, &test, &model, &cfg, None, &quiet(20), None).unwrap();
    assert_eq!(a.log.steps.len(), 20);
    assert_eq!(bits(&a.log), bits(&b.log));
    assert_eq!(a.state, b.state);

    let first = run_finetune(&train, &test, &model, &cfg, None, &quiet(8), None).unwrap();
    let rest = run_finetune(&train, &test, &model, &cfg, None, &quiet(20), Some(&first.last)).unwrap();
    for (r, f) in rest.log.steps.iter().zip(&a.log.steps[8..]) {
        assert_eq!(r.step, f.step);
        assert!(max_abs_diff(&r.values, &f.values) < 1e-6, "step {}", r.step);
    }
    assert_eq!(rest.log.steps.len(), 12);
}

#[test]
fn best_checkpoint_has_the_highest_test_accuracy() {
    let train = classification_manifest(2, 1);
    let test = classification_manifest(1, 2);
    let out = run_finetune(&train, &test, &ModelConfig::toy(), &finetune_cfg(), None, &quiet(12), None).unwrap();
    let accs: Vec<f64> = out.log.evals.iter().map(|e| e.metrics["accuracy"]).collect();
    assert_eq!(accs.len(), 6);
    let best = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.report.accuracy, best);
    let first_best = accs.iter().position(|&a| a == best).unwrap();
    assert_eq!(out.best_epoch, out.log.evals[first_best].epoch);
    assert_eq!(out.best.manifest.step, out.log.evals[first_best].step);
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let train = classification_manifest(1, 1);
    let model = ModelConfig::toy();
    let cfg = FinetuneConfig {
        freeze_groups: vec!["encoder".into(), "art.3".into()],
        ..finetune_cfg()
    };
    let (mut state, _) = FinetuneState::new(&model, &cfg, None).unwrap();
    let before = state.classifier.params.clone();
    let records: Vec<&SliceRecord> = train.of_sequence(Sequence::T1).collect();
    let labels: Vec<usize> = records.iter().map(|r| cfg.label_of(r.class_label).unwrap()).collect();
    let x = classifier_input(&records, 3, 32);
    for _ in 0..3 {
        finetune_step(&mut state, &x, &labels, &cfg).unwrap();
    }
    for (name, t) in before.iter() {
        let after = state.classifier.params.get(name).unwrap();
        let frozen = name.starts_with("encoder.") || name.starts_with("art.3.");
        assert_eq!(after.bit_eq(t), frozen, "{name}");
    }

    let all = FinetuneConfig {
        freeze_groups: vec!["encoder".into(), "art".into(), "head".into()],
        ..finetune_cfg()
    };
    let (mut state, _) = FinetuneState::new(&model, &all, None).unwrap();
    let before = state.classifier.params.clone();
    finetune_step(&mut state, &x, &labels, &all).unwrap();
    assert_eq!(state.classifier.params, before);
}

#[test]
fn transferred_init_differs_only_in_shared_groups() {
    let model = ModelConfig::toy();
    let cfg = finetune_cfg();
    let g = Generator::new(model.generator.clone(), 77).unwrap();
    let (fresh, none) = FinetuneState::new(&model, &cfg, None).unwrap();
    let (init, report) = FinetuneState::new(&model, &cfg, Some(&g.params)).unwrap();
    assert!(none.is_none());
    assert!(!report.unwrap().transferred.is_empty());
    for (name, t) in init.classifier.params.iter() {
        let want = if name.starts_with("head.") {
            fresh.classifier.params.get(name)
        } else {
            g.params.get(name)
        };
        assert!(t.bit_eq(want.unwrap()), "{name}");
    }
    assert_eq!(init.step, fresh.step);
    assert_eq!(init.opt, fresh.opt);
}

#[test]
fn three_class_head() {
    let classes = [ClassLabel::Glioma, ClassLabel::Meningioma, ClassLabel::Pituitary];
    let set = gsp_core::data::phantom::phantom_slice_set(&classes, 2, 32, 4).unwrap();
    let train = DatasetManifest::new("three", Split::Train, set);
    let cfg = FinetuneConfig {
        classes: classes.to_vec(),
        ..finetune_cfg()
    };
    let out = run_finetune(&train, &train, &ModelConfig::toy(), &cfg, None, &quiet(2), None).unwrap();
    assert_eq!(out.state.classifier.config.head.classes, 3);
    assert_eq!(out.report.confusion.len(), 3);
    assert!(out.report.confusion.iter().all(|row| row.len() == 3));
    let x = classifier_input(&train.of_sequence(Sequence::T1).collect::<Vec<_>>(), 3, 32);
    assert_eq!(out.state.classifier.forward(&x).unwrap().shape(), &[6, 3]);

    let four = classification_manifest(1, 1);
    let err = run_finetune(&four, &train, &ModelConfig::toy(), &cfg, None, &quiet(1), None).unwrap_err();
    assert!(err.to_string().contains("no_tumor"), "{err}");
}
