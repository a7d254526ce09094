use std::collections::BTreeMap;

use aapl_core::data::{generate_dataset, split_base_new, Dataset, DatasetConfig};
use aapl_core::eval::evaluate_base_to_new;
use aapl_core::prompt::ModelMode;
use aapl_core::train::{
    run_seeded_ensemble, train_loop, Checkpoint, Seeds, TrainConfig, WrsConfig,
    CHECKPOINT_FORMAT_VERSION,
};
use aapl_core::Error;

fn dataset(seed: u64) -> Dataset {
    generate_dataset(
        &DatasetConfig {
            samples_per_class: 24,
            ..DatasetConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn short(mode: ModelMode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        steps: 60,
        shots: 8,
        seeds: Seeds {
            data: seed,
            init: seed,
            order: seed,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_checkpoint_bytes() {
    let ds = dataset(1);
    let plan = split_base_new(&ds, 8, 1).unwrap();
    let cfg = short(ModelMode::Aapl, 1);
    let a = train_loop(&cfg, &ds, &plan).unwrap().to_json().unwrap();
    let b = train_loop(&cfg, &ds, &plan).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn different_order_seeds_diverge() {
    let ds = dataset(1);
    let plan = split_base_new(&ds, 8, 1).unwrap();
    let a = train_loop(&short(ModelMode::Aapl, 1), &ds, &plan).unwrap();
    let mut cfg = short(ModelMode::Aapl, 1);
    cfg.seeds.order = 2;
    let b = train_loop(&cfg, &ds, &plan).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn encoder_is_frozen_and_parameters_move() {
    let ds = dataset(2);
    let plan = split_base_new(&ds, 8, 2).unwrap();
    for mode in [ModelMode::StaticCoop, ModelMode::ConditionalCocoop, ModelMode::Aapl] {
        let cfg = short(mode, 2);
        let ckpt = train_loop(&cfg, &ds, &plan).unwrap();
        assert_eq!(ckpt.encoder.fingerprint(), ckpt.encoder_fingerprint);
        let fresh = aapl_core::train::prepare_encoder(cfg.dims, cfg.seeds.init, &ds).unwrap();
        assert_eq!(fresh.fingerprint(), ckpt.encoder_fingerprint);
        let init = aapl_core::prompt::PromptParams::init(&fresh, cfg.seeds.init).unwrap();
        assert_ne!(init.context, ckpt.params.context, "{mode:?}");
        if mode == ModelMode::StaticCoop {
            // The metanet never enters a static prompt.
            assert_eq!(init.metanet, ckpt.params.metanet);
        } else {
            assert_ne!(init.metanet, ckpt.params.metanet, "{mode:?}");
        }
        assert_eq!(ckpt.history.len(), cfg.steps);
        assert!(ckpt.history.iter().all(|m| m.total.is_finite()));
    }
}

#[test]
fn static_and_conditional_modes_report_zero_triplet_term() {
    let ds = dataset(3);
    let plan = split_base_new(&ds, 8, 3).unwrap();
    for mode in [ModelMode::StaticCoop, ModelMode::ConditionalCocoop] {
        let ckpt = train_loop(&short(mode, 3), &ds, &plan).unwrap();
        assert!(ckpt.history.iter().all(|m| m.adtriplet == 0.0));
    }
    let ckpt = train_loop(&short(ModelMode::Aapl, 3), &ds, &plan).unwrap();
    assert!(ckpt.history.iter().any(|m| m.adtriplet > 0.0));
}

#[test]
fn checkpoint_round_trips_through_disk() {
    let ds = dataset(4);
    let plan = split_base_new(&ds, 8, 4).unwrap();
    let ckpt = train_loop(&short(ModelMode::Aapl, 4), &ds, &plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_json().unwrap(), ckpt.to_json().unwrap());
    let r1 = evaluate_base_to_new(&ckpt, &ds, &plan).unwrap();
    let r2 = evaluate_base_to_new(&back, &ds, &plan).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let ds = dataset(5);
    let plan = split_base_new(&ds, 8, 5).unwrap();
    let ckpt = train_loop(&short(ModelMode::StaticCoop, 5), &ds, &plan).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
    value["format_version"] = serde_json::json!(CHECKPOINT_FORMAT_VERSION + 1);
    let err = Checkpoint::from_json(&value.to_string()).unwrap_err();
    assert!(matches!(err, Error::Version { .. }), "{err}");
}

#[test]
fn tampered_encoder_is_rejected() {
    let ds = dataset(5);
    let plan = split_base_new(&ds, 8, 5).unwrap();
    let ckpt = train_loop(&short(ModelMode::StaticCoop, 5), &ds, &plan).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
    value["encoder_fingerprint"] = serde_json::json!("00");
    assert!(Checkpoint::from_json(&value.to_string()).is_err());
}

#[test]
fn metrics_csv_has_one_row_per_step() {
    let ds = dataset(6);
    let plan = split_base_new(&ds, 8, 6).unwrap();
    let ckpt = train_loop(&short(ModelMode::Aapl, 6), &ds, &plan).unwrap();
    let mut buf = Vec::new();
    ckpt.write_metrics_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,ce,adtriplet,total,lr");
    assert_eq!(lines.len(), 61);
}

#[test]
fn wrs_refreshes_on_schedule() {
    let ds = dataset(7);
    let plan = split_base_new(&ds, 8, 7).unwrap();
    let mut cfg = short(ModelMode::Aapl, 7);
    cfg.wrs = WrsConfig {
        enabled: true,
        refresh_interval: Some(25),
        profile_points: 42,
        ..WrsConfig::default()
    };
    let ckpt = train_loop(&cfg, &ds, &plan).unwrap();
    let steps: Vec<usize> = ckpt.wrs_updates.iter().map(|u| u.step).collect();
    assert_eq!(steps, vec![0, 25, 50]);
    for u in &ckpt.wrs_updates {
        assert_eq!(u.scores.len(), 14);
        for k in &u.boosted {
            assert_eq!(u.table.weight(*k), cfg.wrs.boost);
        }
    }
    assert_eq!(ckpt.final_table, ckpt.wrs_updates.last().unwrap().table);
    let draws: u64 = ckpt.aug_counts.values().sum();
    assert_eq!(draws, 2 * cfg.steps as u64);
}

#[test]
fn ensemble_is_independent_of_thread_count() {
    let ds = dataset(8);
    let plan = split_base_new(&ds, 8, 8).unwrap();
    let mut cfg = short(ModelMode::ConditionalCocoop, 8);
    cfg.steps = 30;
    let job = |c: &TrainConfig| {
        let ckpt = train_loop(c, &ds, &plan)?;
        let r = evaluate_base_to_new(&ckpt, &ds, &plan)?;
        let mut m = BTreeMap::new();
        m.insert("hm".to_string(), r.splits[0].hm);
        m.insert("final_loss".to_string(), ckpt.history.last().unwrap().total);
        Ok(m)
    };
    let one = run_seeded_ensemble(&cfg, 3, 1, job).unwrap();
    let three = run_seeded_ensemble(&cfg, 3, 3, job).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.per_seed.len(), 3);
    assert_eq!(one.seeds[2].init, 10);
    assert!(one.std["final_loss"] > 0.0);
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let ds = dataset(9);
    let plan = split_base_new(&ds, 8, 9).unwrap();
    for cfg in [
        TrainConfig { temperature: 0.0, ..short(ModelMode::Aapl, 9) },
        TrainConfig { margin: -0.1, ..short(ModelMode::Aapl, 9) },
        TrainConfig { shots: 100, ..short(ModelMode::Aapl, 9) },
        TrainConfig { alpha: 0.0, beta: 0.0, ..short(ModelMode::Aapl, 9) },
    ] {
        assert!(matches!(train_loop(&cfg, &ds, &plan), Err(Error::Config(_))), "{cfg:?}");
    }
}
