//! Training-loop bookkeeping, determinism and resumption.

mod common;

use common::*;
use dpm::checkpoint;
use dpm::optim::cosine_lr;
use dpm::trainer::{TrainConfig, Trainer};
use dpm::Error;

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 1,
        crop: 32,
        lr_max: 1e-3,
        eval_every: 0,
        checkpoint_every: 0,
        ..Default::default()
    }
}

fn trainer(epochs: usize, n: usize) -> Trainer {
    Trainer::new(model(&tiny_model_config(4), 0), cfg(epochs), n).unwrap()
}

#[test]
fn one_epoch_over_two_pairs_at_batch_one_is_two_steps() {
    let data = synthetic_pairs(2, 32);
    let mut t = trainer(1, data.len());
    assert_eq!(t.total_steps(), 2);
    let report = t.fit(&data, &[], None).unwrap();
    let steps: Vec<(u64, usize)> = report.steps.iter().map(|r| (r.step, r.epoch)).collect();
    assert_eq!(steps, [(1, 1), (2, 1)]);
    assert_eq!(report.steps[0].lr, 1e-3);
    assert_eq!(report.steps[1].lr, 1e-6);
    assert_eq!(t.progress().step, 2);
    assert_eq!(t.progress().epoch, 1);
    assert_eq!(report.epochs.len(), 1);
    assert!(report
        .steps
        .iter()
        .all(|r| r.loss_total.is_finite() && r.psnr.is_none()));
}

#[test]
fn learning_rate_follows_the_cosine_from_first_to_last_update() {
    let data = synthetic_pairs(2, 32);
    let mut t = trainer(3, data.len());
    assert_eq!(t.schedule_horizon(), 5);
    let report = t.fit(&data, &[], None).unwrap();
    let lrs: Vec<f64> = report.steps.iter().map(|r| r.lr).collect();
    let want: Vec<f64> = (0..6)
        .map(|s| cosine_lr(s, 5, 1e-3, 1e-6).unwrap())
        .collect();
    assert_eq!(lrs, want);
    assert_eq!(lrs[0], 1e-3);
    assert_eq!(lrs[5], 1e-6);
}

#[test]
fn partial_final_batch_counts_as_a_step() {
    let data = synthetic_pairs(3, 32);
    let mut c = cfg(2);
    c.batch_size = 2;
    let t = Trainer::new(model(&tiny_model_config(4), 0), c, data.len()).unwrap();
    assert_eq!(t.total_steps(), 4);
}

#[test]
fn epoch_orders_are_seeded_permutations() {
    let t = trainer(3, 8);
    let a = t.epoch_order(0, 8);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    assert_eq!(a, trainer(3, 8).epoch_order(0, 8));
    assert_ne!(a, t.epoch_order(1, 8));
}

#[test]
fn identical_seeded_runs_are_bit_identical() {
    let data = synthetic_pairs(2, 32);
    let run = || {
        let mut t = trainer(2, data.len());
        t.fit(&data, &[], None).unwrap();
        param_bits(&t.model)
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_an_epoch_boundary_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_pairs(2, 32);
    let mut straight = trainer(2, data.len());
    straight.fit(&data, &[], None).unwrap();

    let mut first = trainer(2, data.len());
    first.run_epoch(&data).unwrap();
    let path = dir.path().join("mid.dpm");
    first.save(&path).unwrap();
    let mut resumed =
        Trainer::resume(&checkpoint::load(&path).unwrap(), cfg(2), data.len()).unwrap();
    assert_eq!(resumed.progress(), first.progress());
    resumed.fit(&data, &[], None).unwrap();
    assert_eq!(param_bits(&resumed.model), param_bits(&straight.model));
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn resume_from_inside_an_epoch_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_pairs(3, 32);
    let mut straight = trainer(1, data.len());
    straight.fit(&data, &[], None).unwrap();

    let mut partial = trainer(1, data.len());
    let order = partial.epoch_order(0, data.len());
    partial.step(&[&data[order[0]]]).unwrap();
    let path = dir.path().join("inside.dpm");
    partial.save(&path).unwrap();
    let mut resumed =
        Trainer::resume(&checkpoint::load(&path).unwrap(), cfg(1), data.len()).unwrap();
    let report = resumed.fit(&data, &[], None).unwrap();
    assert_eq!(
        report.steps.iter().map(|r| r.step).collect::<Vec<_>>(),
        [2, 3]
    );
    assert_eq!(param_bits(&resumed.model), param_bits(&straight.model));
}

#[test]
fn fit_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_pairs(2, 32);
    let mut c = cfg(2);
    c.checkpoint_every = 1;
    c.eval_every = 2;
    let mut t = Trainer::new(model(&tiny_model_config(4), 0), c, data.len()).unwrap();
    let report = t.fit(&data, &[], Some(dir.path())).unwrap();
    for f in [
        "train_log.jsonl",
        "final.dpm",
        "checkpoints/epoch_0001.dpm",
        "checkpoints/epoch_0002.dpm",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].get("psnr").is_none());
    assert!(lines[3]["psnr"].as_f64().unwrap().is_finite());
    assert!(report.epochs[0].psnr.is_none() && report.epochs[1].psnr.is_some());
    let ck = checkpoint::load(&dir.path().join("final.dpm")).unwrap();
    assert_eq!(ck.progress.unwrap().step, 4);
    assert_eq!(param_bits(&ck.build_model().unwrap()), param_bits(&t.model));
}

#[test]
fn diverging_loss_is_reported_with_its_components() {
    let data = synthetic_pairs(2, 32);
    let mut c = cfg(3);
    c.lr_max = 1e30;
    c.lr_min = 1e30;
    let mut t = Trainer::new(model(&tiny_model_config(4), 0), c, data.len()).unwrap();
    match t.fit(&data, &[], None) {
        Err(Error::NonFinite { step, .. }) => assert!(step >= 2),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn crops_larger_than_the_image_are_rejected() {
    let data = synthetic_pairs(1, 32);
    let mut c = cfg(1);
    c.crop = 48;
    let mut t = Trainer::new(model(&tiny_model_config(4), 0), c, 1).unwrap();
    assert!(matches!(t.fit(&data, &[], None), Err(Error::Invalid(_))));
}
