mod common;

use common::*;
use crrcd::checkpoint::Checkpoint;
use crrcd::error::Error;
use crrcd::trainer::{render_metrics, train_teacher, Trainer};

fn distill_setup(seed: u64) -> (crrcd::config::ExperimentConfig, crrcd::data::Dataset, crrcd::trainer::Model) {
    let (config, ds) = toy_setup(seed);
    let teacher = train_teacher(&config, &ds, None).unwrap().model;
    (config, ds, teacher)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (config, ds, teacher) = distill_setup(1);
    let mut straight = Trainer::distill(&config, &ds, &teacher).unwrap();
    straight.run(None).unwrap();

    let mut first = Trainer::distill(&config, &ds, &teacher).unwrap();
    let half = first.total_steps() / 2;
    first.run(Some(half)).unwrap();
    assert_eq!(first.step_count(), half);
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes, "memory").unwrap();
    let mut second = Trainer::resume(ckpt, &config, &ds, Some(&teacher)).unwrap();
    second.run(None).unwrap();

    assert_eq!(render_metrics(second.metrics()), render_metrics(straight.metrics()));
    assert_eq!(second.model().content_hash(), straight.model().content_hash());
    assert_eq!(second.bank(), straight.bank());
}

#[test]
fn same_seed_same_trace_and_other_seed_differs() {
    let (config, ds, teacher) = distill_setup(2);
    let trace = |c: &crrcd::config::ExperimentConfig| {
        let mut t = Trainer::distill(c, &ds, &teacher).unwrap();
        t.run(None).unwrap();
        render_metrics(t.metrics())
    };
    assert_eq!(trace(&config), trace(&config));
    let mut other = config.clone();
    other.seed += 1;
    assert_ne!(trace(&config), trace(&other));
}

#[test]
fn damaged_checkpoint_file_is_refused() {
    let (config, ds, teacher) = distill_setup(3);
    let mut t = Trainer::distill(&config, &ds, &teacher).unwrap();
    t.run(Some(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    t.checkpoint().save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 2;
    bytes[last] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checksum(_))));

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Checksum(_))));
}

#[test]
fn resume_refuses_a_different_config_dataset_or_teacher() {
    let (config, ds, teacher) = distill_setup(4);
    let mut t = Trainer::distill(&config, &ds, &teacher).unwrap();
    t.run(Some(2)).unwrap();
    let ckpt = t.checkpoint();

    let mut changed = config.clone();
    changed.loss.beta += 1.0;
    assert!(matches!(
        Trainer::resume(ckpt.clone(), &changed, &ds, Some(&teacher)),
        Err(Error::ConfigHashMismatch { .. })
    ));

    let (_, other_ds) = toy_setup(40);
    assert!(Trainer::resume(ckpt.clone(), &config, &other_ds, Some(&teacher)).is_err());

    let (_, _, other_teacher) = distill_setup(41);
    assert!(Trainer::resume(ckpt.clone(), &config, &ds, Some(&other_teacher)).is_err());
    assert!(Trainer::resume(ckpt, &config, &ds, None).is_err());
}

#[test]
fn learning_rate_follows_step_schedule() {
    let (mut config, ds) = toy_setup(5);
    config.epochs = 6;
    config.optimizer.milestones = vec![2, 4];
    let mut t = Trainer::plain(&config, &ds).unwrap();
    t.run(None).unwrap();
    for row in t.metrics() {
        // Epochs are counted from 1; a milestone takes effect at its epoch.
        let drops = config.optimizer.milestones.iter().filter(|&&m| m <= row.epoch).count();
        let want = config.optimizer.lr * config.optimizer.gamma.powi(drops as i32);
        assert!((row.lr - want).abs() <= 1e-15, "epoch {}: {} vs {want}", row.epoch, row.lr);
    }
}

#[test]
fn bank_fills_then_leaves_warm_up_and_stays_bounded() {
    let (mut config, ds, teacher) = distill_setup(6);
    config.epochs = 4;
    let mut t = Trainer::distill(&config, &ds, &teacher).unwrap();
    t.run(None).unwrap();
    let rows = t.metrics();
    assert!(rows[0].warmup);
    assert!(!rows.last().unwrap().warmup);
    let first_ready = rows.iter().position(|r| !r.warmup).unwrap();
    assert!(rows[first_ready..].iter().all(|r| !r.warmup));
    let bank = t.bank().unwrap();
    assert_eq!(bank.len(), bank.capacity().min(bank.pushes() as usize));
}

#[test]
fn zero_beta_skips_the_relation_term() {
    let (mut config, ds, teacher) = distill_setup(7);
    config.loss.beta = 0.0;
    let mut t = Trainer::distill(&config, &ds, &teacher).unwrap();
    t.run(None).unwrap();
    assert!(t.metrics().iter().all(|r| r.rcd == 0.0));
    assert!(t.metrics().iter().all(|r| (r.total - r.cls - config.loss.alpha * r.kd).abs() <= 1e-12 * r.total.max(1.0)));
}
