use aapl_core::augment::AugmentationKind;
use aapl_core::data::{
    generate_dataset, split_base_new, Dataset, DatasetConfig, PrototypeFamily, ShiftConfig,
    ShiftKind,
};
use aapl_core::eval::{
    accuracy, base_to_new_protocol, cross_dataset_protocol, domain_shift_protocol,
    evaluate_base_to_new, evaluate_cross_dataset, evaluate_domain_shift, export_profile,
    harmonic_mean, profile_checkpoint, EvalReport, Protocol, RowRole,
};
use aapl_core::prompt::ModelMode;
use aapl_core::train::{Seeds, TrainConfig};

fn cfg(mode: ModelMode) -> TrainConfig {
    TrainConfig {
        mode,
        steps: 60,
        shots: 8,
        seeds: Seeds {
            data: 3,
            init: 3,
            order: 3,
        },
        ..TrainConfig::default()
    }
}

fn source() -> Dataset {
    generate_dataset(
        &DatasetConfig {
            name: "stripes".into(),
            samples_per_class: 24,
            family: PrototypeFamily::Stripes,
            ..DatasetConfig::default()
        },
        3,
    )
    .unwrap()
}

fn target() -> Dataset {
    generate_dataset(
        &DatasetConfig {
            name: "shapes".into(),
            samples_per_class: 24,
            family: PrototypeFamily::Shapes,
            class_id_offset: 100,
            ..DatasetConfig::default()
        },
        4,
    )
    .unwrap()
}

#[test]
fn base_to_new_reports_consistent_rows() {
    let ds = source();
    let plan = split_base_new(&ds, 8, 3).unwrap();
    let (ckpt, report) = base_to_new_protocol(&cfg(ModelMode::Aapl), &ds, &plan).unwrap();
    assert_eq!(report.protocol, Protocol::BaseToNew);
    assert_eq!(report.splits.len(), 1);
    let row = &report.splits[0];
    assert_eq!(row.hm, harmonic_mean(row.base, row.new).unwrap());
    assert!((0.0..=100.0).contains(&row.base) && (0.0..=100.0).contains(&row.new));
    report.validate().unwrap();
    // Evaluation is a pure function of checkpoint and data.
    assert_eq!(evaluate_base_to_new(&ckpt, &ds, &plan).unwrap(), report);
}

#[test]
fn cross_dataset_with_source_as_target_reports_in_domain_accuracy() {
    let src = source();
    let (ckpt, report) = cross_dataset_protocol(&cfg(ModelMode::ConditionalCocoop), &src, &[target()]).unwrap();
    assert_eq!(report.targets[0].role, RowRole::Source);
    assert_eq!(report.targets[1].target, "shapes");
    assert_eq!(report.average, Some(report.targets[1].accuracy));

    let self_report = evaluate_cross_dataset(&ckpt, &src, std::slice::from_ref(&src)).unwrap();
    assert_eq!(self_report.targets[0].accuracy, self_report.targets[1].accuracy);
    let direct = 100.0 * accuracy(&ckpt, &src, &src.class_ids()).unwrap();
    assert_eq!(self_report.targets[1].accuracy, direct);
}

#[test]
fn domain_shift_zero_magnitude_matches_source() {
    let src = source();
    let shifts = vec![
        ShiftConfig { kind: ShiftKind::Brightness, magnitude: 0.0 },
        ShiftConfig { kind: ShiftKind::Contrast, magnitude: 0.4 },
        ShiftConfig { kind: ShiftKind::Noise, magnitude: 0.15 },
    ];
    let (ckpt, report) = domain_shift_protocol(&cfg(ModelMode::Aapl), &src, &shifts).unwrap();
    assert_eq!(report.targets.len(), 4);
    assert_eq!(report.targets[0].accuracy, report.targets[1].accuracy);
    let mean = report.targets[1..].iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    assert_eq!(report.average, Some(mean));
    assert_eq!(evaluate_domain_shift(&ckpt, &src, &shifts, 3).unwrap(), report);
}

#[test]
fn report_export_writes_json_and_table() {
    let ds = source();
    let plan = split_base_new(&ds, 8, 3).unwrap();
    let (_, report) = base_to_new_protocol(&cfg(ModelMode::StaticCoop), &ds, &plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = report.export(dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let back = EvalReport::load_json(&files[0]).unwrap();
    assert_eq!(back, report);
    let csv = std::fs::read_to_string(&files[1]).unwrap();
    assert!(csv.starts_with("dataset,base,new,hm\n"));
    assert_eq!(csv.lines().count(), 2);

    let mut broken = report.clone();
    broken.splits[0].hm += 1.0;
    assert!(broken.validate().is_err());
}

#[test]
fn profile_has_one_row_per_active_kind_and_is_repeatable() {
    let ds = source();
    let plan = split_base_new(&ds, 8, 3).unwrap();
    let (ckpt, _) = base_to_new_protocol(&cfg(ModelMode::Aapl), &ds, &plan).unwrap();
    let p1 = profile_checkpoint(&ckpt, &ds, 100, 9).unwrap();
    let p2 = profile_checkpoint(&ckpt, &ds, 100, 9).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p1.meta_by_kind.len(), 14);
    assert_eq!(p1.delta_projection.len(), 100);

    let dir = tempfile::tempdir().unwrap();
    let files = export_profile(&p1, dir.path()).unwrap();
    let table = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(table.lines().count(), 15);

    let restricted = TrainConfig {
        augmentations: Some(AugmentationKind::good_subset()),
        ..cfg(ModelMode::Aapl)
    };
    let (ckpt, _) = base_to_new_protocol(&restricted, &ds, &plan).unwrap();
    let p = profile_checkpoint(&ckpt, &ds, 100, 9).unwrap();
    assert_eq!(p.meta_by_kind.len(), AugmentationKind::good_subset().len());
}
