//! Leave-one-subject-out splitting, fold normalisation and the LOSO runner.

use std::collections::BTreeSet;

use onebt::data::{generate_synthetic, loso_splits, prepare_fold, ChannelStats, Dataset, NormPolicy, SyntheticSpec, Task};
use onebt::eval::{run_fold, run_loso, LosoConfig};
use onebt::model::ModelConfig;
use onebt::train::TrainConfig;
use onebt::Tensor;

fn full_size() -> Dataset {
    let spec = SyntheticSpec {
        seq_len: 64,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, 3).unwrap()
}

fn cheap() -> Dataset {
    let spec = SyntheticSpec {
        n_subjects: 3,
        samples_per_level: 3,
        seq_len: 16,
        sample_rate: 32,
        channel_names: vec!["A".into(), "B".into(), "C".into()],
        class_channels: vec![0],
        delta: 2.0,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, 5).unwrap()
}

fn cheap_cfg(jobs: usize) -> LosoConfig {
    let train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    LosoConfig {
        jobs,
        task: Some(Task::Math),
        ..LosoConfig::new(ModelConfig::tiny(), train)
    }
}

#[test]
fn manifest_counts_match_the_default_design() {
    let ds = full_size();
    assert_eq!(ds.len(), 792);
    assert_eq!(ds.manifest.n_samples, 792);
    assert_eq!(ds.manifest.n_subjects, 11);
    assert_eq!(ds.manifest.samples_per_level, Some(12));
    assert_eq!(ds.manifest.n_channels(), 14);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.obt");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.samples, ds.samples);
}

#[test]
fn pooled_folds_partition_every_sample() {
    let ds = full_size();
    let folds = loso_splits(&ds, None).unwrap();
    assert_eq!(folds.len(), 11);
    let mut seen = vec![0usize; ds.len()];
    for f in &folds {
        assert_eq!(f.test.len(), 72);
        assert_eq!(f.train.len() + f.test.len(), 792);
        for &i in &f.test {
            seen[i] += 1;
            assert_eq!(ds.samples[i].subject_id, f.subject);
        }
        assert!(f.train.iter().all(|&i| ds.samples[i].subject_id != f.subject));
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn per_task_folds_hold_out_24_samples() {
    let ds = full_size();
    for task in Task::ALL {
        let folds = loso_splits(&ds, Some(task)).unwrap();
        assert_eq!(folds.len(), 11);
        let mut tested = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.test.len(), 24);
            assert_eq!(f.train.len(), 240);
            for &i in f.train.iter().chain(&f.test) {
                assert_eq!(ds.samples[i].task, task);
            }
            let (easy, hard): (Vec<usize>, Vec<usize>) = f.test.iter().partition(|&&i| ds.samples[i].label.index() == 0);
            assert_eq!((easy.len(), hard.len()), (12, 12));
            tested.extend(f.test.iter().copied());
        }
        assert_eq!(tested.len(), 264);
    }
}

#[test]
fn single_subject_cannot_be_split() {
    let spec = SyntheticSpec {
        n_subjects: 1,
        samples_per_level: 1,
        seq_len: 16,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec, 0).unwrap();
    assert!(matches!(loso_splits(&ds, None), Err(onebt::Error::Split(_))));
}

/// Corrupting the held-out subject must leave the fold's statistics and
/// training side bit-identical, while a leaky fit over all samples would
/// have moved.
#[test]
fn normalisation_ignores_the_test_subject() {
    let ds = full_size();
    let fold = &loso_splits(&ds, Some(Task::Game)).unwrap()[4];
    let (train, test, stats) = prepare_fold(&ds, fold, NormPolicy::TrainFoldZScore).unwrap();
    let stats = stats.unwrap();

    let mut mutated = ds.clone();
    for &i in &fold.test {
        let s = &mut mutated.samples[i];
        let data = s.signal.data().iter().map(|v| v * 50.0 + 1000.0).collect();
        s.signal = Tensor::new(s.signal.shape().to_vec(), data).unwrap();
    }
    let (train2, test2, stats2) = prepare_fold(&mutated, fold, NormPolicy::TrainFoldZScore).unwrap();
    assert_eq!(stats2.as_ref(), Some(&stats));
    assert_eq!(train2, train);
    assert_ne!(test2, test);

    let leaky = ChannelStats::fit(fold.train.iter().chain(&fold.test).map(|&i| &mutated.samples[i])).unwrap();
    assert_ne!(leaky, stats);

    // the training side is standardised, the test side only shifted and scaled
    let c = ds.manifest.n_channels();
    let refit = ChannelStats::fit(train.iter()).unwrap();
    for j in 0..c {
        assert!(refit.mean[j].abs() < 1e-4, "channel {j} mean {}", refit.mean[j]);
        assert!((refit.std[j] - 1.0).abs() < 1e-3, "channel {j} std {}", refit.std[j]);
    }
    for (raw, norm) in fold.test.iter().map(|&i| &ds.samples[i]).zip(&test) {
        let want = stats.apply(raw);
        assert_eq!(&want, norm);
    }
}

#[test]
fn no_normalisation_passes_samples_through() {
    let ds = cheap();
    let fold = &loso_splits(&ds, None).unwrap()[0];
    let (train, test, stats) = prepare_fold(&ds, fold, NormPolicy::None).unwrap();
    assert!(stats.is_none());
    assert_eq!(train[0], ds.samples[fold.train[0]]);
    assert_eq!(test[0], ds.samples[fold.test[0]]);
}

#[test]
fn loso_results_do_not_depend_on_worker_count() {
    let ds = cheap();
    let one = run_loso(&ds, &cheap_cfg(1), 9).unwrap();
    let two = run_loso(&ds, &cheap_cfg(2), 9).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.folds.len(), 3);
    let subjects: Vec<u16> = one.folds.iter().map(|f| f.result.fold_id).collect();
    assert_eq!(subjects, vec![0, 1, 2]);
    assert_eq!(one.summary.n_predictions, 3 * 6);
}

#[test]
fn a_fold_run_alone_matches_the_same_fold_inside_loso() {
    let ds = cheap();
    let cfg = cheap_cfg(1);
    let all = run_loso(&ds, &cfg, 4).unwrap();
    let fold = &loso_splits(&ds, cfg.task).unwrap()[2];
    assert_eq!(run_fold(&ds, fold, &cfg, 4).unwrap(), all.folds[2]);
}

#[test]
fn mismatched_window_shape_is_a_config_error() {
    let ds = cheap();
    let mut cfg = cheap_cfg(1);
    cfg.model.seq_len = 32;
    assert!(matches!(run_loso(&ds, &cfg, 0), Err(onebt::Error::Config(_))));
}
