mod common;

use dcnv::trainer::{
    self, ablation_variants, checkpoint_bytes, evaluate, init_agent, suite_csv, TrainConfig, TrainError,
};
use dcnv_core::checkpoint;
use dcnv_core::episode::Split;

#[test]
fn early_stopping_needs_strict_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tiny_bundle(dir.path());
    let cfg = TrainConfig {
        lr: 0.0,
        patience: 1,
        max_epochs: 5,
        ..common::tiny_train_config()
    };
    let mut seen = 0;
    let out = trainer::train(&cfg, 3, &data, |_| seen += 1).unwrap();
    // Frozen weights give the same SR twice, which is not an improvement.
    assert_eq!(out.report.epochs.len(), 2);
    assert_eq!(seen, 2);
    assert_eq!(out.report.best_epoch, 1);
    assert_eq!(out.report.epochs[0].mean_sr, out.report.epochs[1].mean_sr);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tiny_bundle(dir.path());
    let run = |threads| {
        let cfg = TrainConfig {
            threads,
            ..common::tiny_train_config()
        };
        let out = trainer::train(&cfg, 11, &data, |_| {}).unwrap();
        (serde_json::to_string(&out.report.epochs).unwrap(), checkpoint_bytes(&out.best))
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(1));
}

#[test]
fn config_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tiny_bundle(dir.path());
    let cfg = TrainConfig {
        lr: f64::NAN,
        batch_size: 0,
        patience: 0,
        ..common::tiny_train_config()
    };
    match trainer::train(&cfg, 0, &data, |_| {}) {
        Err(TrainError::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
        other => panic!("expected config error, got {:?}", other.map(|o| o.report)),
    }
    let short = TrainConfig {
        max_episode_steps: 1,
        ..common::tiny_train_config()
    };
    match trainer::train(&short, 0, &data, |_| {}) {
        Err(TrainError::Config(errs)) => assert!(errs[0].contains("oracle rollout"), "{errs:?}"),
        other => panic!("expected config error, got {:?}", other.map(|o| o.report)),
    }
}

#[test]
fn checkpoint_restores_the_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tiny_bundle(dir.path());
    let cfg = common::tiny_train_config();
    let out = trainer::train(&cfg, 2, &data, |_| {}).unwrap();
    let bytes = checkpoint_bytes(&out.best);
    let (agent, mut store) = init_agent(&cfg, &data.vocab, &data.graph, 999).unwrap();
    checkpoint::load_into_store(&mut store, &bytes).unwrap();
    assert_eq!(checkpoint_bytes(&store), bytes);
    let seen = data.split(Split::ValSeen);
    let r = evaluate(&agent, &store, &data.vocab, &data.graph, seen, cfg.max_episode_steps, 1, false).unwrap();
    let best = out.report.best();
    assert_eq!(r.summary.sr, best.val_seen.sr);
    assert_eq!(r.summary.spl, best.val_seen.spl);

    let wider = TrainConfig {
        policy_hidden: 7,
        ..cfg
    };
    let (_, mut other) = init_agent(&wider, &data.vocab, &data.graph, 0).unwrap();
    assert!(checkpoint::load_into_store(&mut other, &bytes).is_err());
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tiny_bundle(dir.path());
    let cfg = common::tiny_train_config();
    let (agent, store) = init_agent(&cfg, &data.vocab, &data.graph, 0).unwrap();
    for split in Split::ALL {
        let eps = data.split(split);
        let r = evaluate(&agent, &store, &data.vocab, &data.graph, eps, 80, 1, true).unwrap();
        assert_eq!((r.summary.sr, r.summary.osr, r.summary.spl), (1.0, 1.0, 1.0), "{split}");
        assert!(r.summary.spl <= r.summary.sr && r.summary.sr <= r.summary.osr);
    }
}

#[test]
fn ablation_covers_four_variants() {
    let names: Vec<String> = ablation_variants(&TrainConfig::default())
        .iter()
        .map(TrainConfig::variant)
        .collect();
    assert_eq!(
        names,
        [
            "static+last_state+pretrained",
            "dynamic+last_state+pretrained",
            "dynamic+attention+scratch",
            "dynamic+attention+pretrained",
        ]
    );
}

#[test]
fn filter_sweep_rows_audit_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let data = common::tiny_bundle(dir.path());
    let cfg = TrainConfig {
        max_epochs: 1,
        ..common::tiny_train_config()
    };
    let rows = trainer::run_filter_sweep(&cfg, 0, &data, &[2, 1], |_, _| {}).unwrap();
    assert_eq!(rows.iter().map(|r| r.n_filters).collect::<Vec<_>>(), [1, 2]);
    assert!(rows.iter().all(|r| r.param_count == r.expected_param_count));
    let csv = suite_csv(&rows, "M", |r| r.n_filters.to_string());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "M,split,NE,SR,OSR,SPL");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 6);
        assert!(f[2..].iter().all(|x| x.parse::<f64>().unwrap().is_finite()));
    }
}
