use std::fs;
use std::path::Path;

use prp_core::checkpoint;
use prp_core::data::{
    kcore_filter, parse_interactions, read_prepared, split, write_prepared, DatasetStats, InputFormat, SplitPart,
    SplitRatios, SplitStore,
};
use prp_core::eval::{evaluate, DEFAULT_KS};
use prp_core::train::{fit, Ablations, LossMode, TrainConfig, CHECKPOINT_DIR, TELEMETRY_HEADER};

/// 40 users over 60 items with overlapping taste clusters.
fn fixture_text() -> String {
    let mut text = String::from("user\titem\trating\ttimestamp\n");
    for u in 0..40 {
        let cluster = u % 4;
        for j in 0..14 {
            let i = (cluster * 15 + (u * 5 + j * 2) % 15 + if j > 10 { 7 * j } else { 0 }) % 60;
            text.push_str(&format!("{u}\t{i}\t4\t{}\n", 10_000 + u * 50 + j));
        }
    }
    text
}

fn store() -> SplitStore {
    let raw = parse_interactions(fixture_text().as_bytes(), InputFormat::default()).unwrap();
    let core = kcore_filter(&raw, 3).unwrap();
    split(&core, SplitRatios::default(), 5).unwrap()
}

fn small(mode: LossMode, ablations: Ablations) -> TrainConfig {
    TrainConfig {
        embedding_dim: 8,
        batch_size: 64,
        epochs: 4,
        lr: 0.01,
        loss_mode: mode,
        ablations,
        ..TrainConfig::default()
    }
}

#[test]
fn prepared_directory_round_trips() {
    let s = store();
    let dir = tempfile::tempdir().unwrap();
    let stats = DatasetStats {
        n_users: s.n_users(),
        n_items: s.n_items(),
        n_interactions: s.n_interactions(),
        sparsity: 0.0,
        raw_users: s.n_users(),
        raw_items: s.n_items(),
        raw_interactions: s.n_interactions(),
        min_core: 3,
        seed: 5,
        n_train: s.count(SplitPart::Train),
        n_valid: s.count(SplitPart::Valid),
        n_test: s.count(SplitPart::Test),
    };
    write_prepared(dir.path(), &s, &stats).unwrap();
    let (back, back_stats) = read_prepared(dir.path()).unwrap();
    assert_eq!(back_stats, stats);
    for u in 0..s.n_users() as u32 {
        for p in [SplitPart::Train, SplitPart::Valid, SplitPart::Test] {
            assert_eq!(back.part(p, u), s.part(p, u));
        }
    }
    assert_eq!(back.users(), s.users());
    assert_eq!(back.items(), s.items());
}

#[test]
fn every_variant_trains_and_checkpoint_reproduces_metrics() {
    let s = store();
    let variants = [
        (LossMode::Bpr, Ablations::default()),
        (LossMode::Prp, Ablations::default()),
        (LossMode::Prp, Ablations { no_ranker: true, ..Ablations::default() }),
        (LossMode::Prp, Ablations { no_lp: true, ..Ablations::default() }),
        (LossMode::Prp, Ablations { no_confidence: true, ..Ablations::default() }),
    ];
    for (mode, abl) in variants {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(mode, abl);
        let r = fit(&cfg, &s, Some(dir.path())).unwrap();
        assert_eq!(r.epochs_run, 4);
        assert!(r.history.iter().all(|h| h.mean_total_loss.is_finite()));
        let (model, manifest) = checkpoint::load(&dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(manifest.config, cfg);
        assert_eq!(manifest.epoch, r.best_epoch);
        let again = evaluate(&model, &s, SplitPart::Test, &DEFAULT_KS).unwrap();
        assert_eq!(again, r.test, "{mode:?} {abl:?}");
        let telemetry = fs::read_to_string(dir.path().join("telemetry.csv")).unwrap();
        assert_eq!(telemetry.lines().next(), Some(TELEMETRY_HEADER));
        let lp_logged = telemetry
            .lines()
            .skip(1)
            .any(|l| l.split(',').nth(3).and_then(|v| v.parse::<f64>().ok()).is_some_and(|v| v > 0.0));
        assert_eq!(lp_logged, mode == LossMode::Prp && !abl.no_lp, "{mode:?} {abl:?}");
    }
}

#[test]
fn training_beats_the_initial_model() {
    let s = store();
    for mode in [LossMode::Bpr, LossMode::Prp] {
        let cfg = TrainConfig {
            epochs: 30,
            patience: 0,
            ..small(mode, Ablations::default())
        };
        let r = fit(&cfg, &s, None).unwrap();
        let first = r.history.first().unwrap().mean_rank_loss;
        let last = r.history.last().unwrap().mean_rank_loss;
        assert!(last < first, "{mode:?}: rank loss {first} -> {last}");
        assert!(r.best_epoch > 0, "{mode:?} never improved on the initial model");
    }
}

#[test]
fn fixed_seed_runs_write_identical_files() {
    let s = store();
    let cfg = small(LossMode::Prp, Ablations::default());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    fit(&cfg, &s, Some(a.path())).unwrap();
    fit(&cfg, &s, Some(b.path())).unwrap();
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    for f in ["telemetry.csv", "metrics.json", "config.json", "checkpoint/tensors.bin", "checkpoint/manifest.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}
