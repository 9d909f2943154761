use std::fs;

use css_core::data::{generate_dataset, ClassId};
use css_core::harness::{
    apply_overrides, compare_metrics, compare_runs, load_metrics, method_label, run_experiment, ExperimentConfig,
    StepCheckpoint,
};
use css_core::trainer::{StepReport, Toggles};
use tempfile::tempdir;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::reference();
    c.name = "small".into();
    c.dataset.train_count = 40;
    c.dataset.val_count = 8;
    c.train.initial_epochs = Some(1);
    c.train.step.epochs = 1;
    c
}

fn untimed(steps: &[StepReport]) -> Vec<StepReport> {
    steps.iter().cloned().map(|s| StepReport { seconds: 0.0, ..s }).collect()
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[test]
fn labels_name_the_method() {
    assert_eq!(method_label(&Toggles::all(false)), "fine tuning");
    assert_eq!(method_label(&Toggles::all(true)), "full");
    let mut c = small();
    c.train.step.toggles = Toggles::all(false);
    assert_eq!(c.label(), "fine tuning");
}

#[test]
fn ratio_sweep_reports_split_sample_counts() {
    let mut c = small();
    c.train.step.toggles = Toggles::all(false);
    c.sweep.data_ratios = vec![1.0, 0.5, 0.1];
    let dir = tempdir().unwrap();
    let m = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(m.summary.len(), 3);

    let train = generate_dataset(&c.dataset.spec, c.dataset.train_count).unwrap();
    let has = |img: &css_core::data::LabeledImage, ids: &[ClassId]| img.labels.data.iter().any(|v| ids.contains(v));
    let first = train.iter().filter(|i| has(i, &[1, 2, 3, 4])).count();
    let second = train.iter().filter(|i| has(i, &[5])).count();
    for (row, ratio) in m.summary.iter().zip([1.0, 0.5, 0.1]) {
        let want = round_half_up(ratio * second as f64).clamp(1, second);
        assert_eq!(row.samples, vec![first, want], "{}", row.name);
    }
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains("ratio")).count(), 3);
}

#[test]
fn class_orders_add_a_spread_row() {
    let mut c = small();
    c.train.step.toggles = Toggles::all(false);
    c.sweep.class_orders = vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1], vec![2, 4, 1, 5, 3]];
    let dir = tempdir().unwrap();
    let m = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(m.points.len(), 3);
    assert_eq!(m.points[1].schedule, vec![vec![5, 4, 3, 2], vec![1]]);
    let last = m.summary.last().unwrap();
    assert!(last.name.starts_with("mean ± std"), "{}", last.name);
    let olds: Vec<f64> = m.summary[..3].iter().map(|r| r.values.old.unwrap()).collect();
    let mean = olds.iter().sum::<f64>() / 3.0;
    let std = (olds.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((last.values.old.unwrap() - mean).abs() < 1e-12);
    assert!((last.std.unwrap().old.unwrap() - std).abs() < 1e-12);
}

#[test]
fn seeded_runs_compare_equal() {
    let c = small();
    let a = tempdir().unwrap();
    let b = tempdir().unwrap();
    run_experiment(&c, a.path()).unwrap();
    run_experiment(&c, b.path()).unwrap();
    let self_cmp = compare_runs(&[a.path().to_path_buf()], 0.01).unwrap();
    assert!(!self_cmp.rows.is_empty());
    assert!(self_cmp.rows.iter().all(|r| r.delta.is_none_or(|d| d == 0.0)));
    let pair = compare_runs(&[a.path().to_path_buf(), b.path().to_path_buf()], 0.0).unwrap();
    assert!(pair.rows.iter().all(|r| r.delta.is_none_or(|d| d == 0.0)));
    assert!(pair.regressions().is_empty());
    assert_eq!(
        fs::read(a.path().join("metrics.json")).unwrap(),
        fs::read(b.path().join("metrics.json")).unwrap()
    );
}

#[test]
fn full_method_keeps_more_old_classes_than_fine_tuning() {
    let mut c = ExperimentConfig::reference();
    c.dataset.train_count = 120;
    c.dataset.val_count = 20;
    c.train.initial_epochs = Some(10);
    c.train.step.epochs = 5;
    let full = tempdir().unwrap();
    let ft = tempdir().unwrap();
    let mf = run_experiment(&c, full.path()).unwrap();
    c.train.step.toggles = Toggles::all(false);
    let mt = run_experiment(&c, ft.path()).unwrap();
    let cmp = compare_metrics(&[("fine tuning".into(), mt), ("full".into(), mf)], 0.01).unwrap();
    let old = cmp.rows.iter().find(|r| r.metric == "old").unwrap();
    assert!(old.delta.unwrap() > 0.0, "{}", cmp.to_table());
}

#[test]
fn incompatible_runs_are_rejected() {
    let c = small();
    let a = tempdir().unwrap();
    let ma = run_experiment(&c, a.path()).unwrap();
    let mut mb = ma.clone();
    mb.split = vec![2, 1, 1, 1];
    assert!(compare_metrics(&[("a".into(), ma), ("b".into(), mb)], 0.01).is_err());
}

#[test]
fn overrides_edit_nested_fields() {
    let text = serde_json::to_string(&small()).unwrap();
    let c = ExperimentConfig::from_json(
        &text,
        &["train.step.epochs=3".into(), "name=renamed".into(), "sweep.seeds=[4,5]".into()],
    )
    .unwrap();
    assert_eq!(c.train.step.epochs, 3);
    assert_eq!(c.name, "renamed");
    assert_eq!(c.sweep.seeds, vec![4, 5]);
    assert_eq!(c.points().len(), 2);

    let mut v = serde_json::to_value(small()).unwrap();
    assert!(apply_overrides(&mut v, &["train.step.no_such_field=1".into()]).is_err());
    assert!(apply_overrides(&mut v, &["missing_equals".into()]).is_err());
}

#[test]
fn invalid_configs_fail_before_training() {
    let dir = tempdir().unwrap();
    let mut c = small();
    c.split = vec![4, 2];
    assert!(run_experiment(&c, &dir.path().join("a")).is_err());
    let mut c = small();
    c.sweep.class_orders = vec![vec![1, 2, 3, 4, 4]];
    assert!(c.validate().is_err());
    let mut c = small();
    c.sweep.data_ratios = vec![0.0];
    assert!(c.validate().is_err());
    let mut c = small();
    c.train.step.thresholds.gamma = 1.5;
    assert!(c.validate().is_err());
    assert!(!dir.path().join("a").exists());
}

#[test]
fn config_round_trips_through_json() {
    let c = small();
    let text = serde_json::to_string_pretty(&c).unwrap();
    let back = ExperimentConfig::from_json(&text, &[]).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    let mut other = c.clone();
    other.train.step.seed += 1;
    assert_ne!(other.hash(), c.hash());
}

#[test]
fn outputs_carry_the_config_hash_and_checkpoints_restore() {
    let c = small();
    let dir = tempdir().unwrap();
    let m = run_experiment(&c, dir.path()).unwrap();
    let hash = c.hash();
    assert_eq!(m.config_hash, hash);
    for f in ["config.json", "metrics.json", "timing.json", "summary.csv", "summary.md", "per_class.csv", "evolution.csv"] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.contains(&hash), "{f}");
    }
    let loaded = load_metrics(dir.path()).unwrap();
    for (a, b) in loaded.points.iter().zip(&m.points) {
        assert_eq!(a.steps, untimed(&b.steps));
    }
    assert_eq!(loaded.summary, m.summary);

    let point = dir.path().join("points").join(&m.points[0].id);
    for step in 0..2 {
        let text = fs::read_to_string(point.join(format!("step{step}.ckpt.json"))).unwrap();
        let ckpt: StepCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(ckpt.config_hash, hash);
        assert_eq!(ckpt.step, step);
        let net = ckpt.network().unwrap();
        assert_eq!(serde_json::to_string(&StepCheckpoint { net: net.to_checkpoint(), ..ckpt }).unwrap(), text);
    }
}

#[test]
fn sweep_points_do_not_depend_on_order() {
    let mut c = small();
    c.train.step.toggles = Toggles::all(false);
    c.sweep.seeds = vec![0, 1];
    let forward = tempdir().unwrap();
    let mf = run_experiment(&c, forward.path()).unwrap();
    c.sweep.seeds = vec![1, 0];
    let reverse = tempdir().unwrap();
    let mr = run_experiment(&c, reverse.path()).unwrap();
    assert_eq!(untimed(&mf.points[0].steps), untimed(&mr.points[1].steps));
    assert_eq!(untimed(&mf.points[1].steps), untimed(&mr.points[0].steps));
}
