//! Behavior of the experiment driver: deterministic replay, resumable
//! storage, and sanity of the three study designs at desk scale.

use spotrank::experiments::{
    detection_rate_curve, ev_vs_blocklength, power_surface, rotating_signal_size,
    ExperimentPlan, ModelSpec, TestMode,
};
use spotrank::ranktest::{critical_value, HypothesisParams};

use std::fs;
use std::path::PathBuf;

fn rotating_plan(name: &str, out: PathBuf) -> ExperimentPlan {
    ExperimentPlan {
        name: name.into(),
        model: ModelSpec::Rotating { dim: 2, smoothness: 0.5, holder_radius: 0.5 },
        signal_grid: vec![0.0, 0.6],
        gap_grid: vec![1.0],
        n_schedule: vec![200],
        h_schedule: vec![0.1],
        h_prime: None,
        replications: 30,
        alpha: 0.1,
        seed: 314,
        output: Some(out),
    }
}

#[test]
fn power_surface_is_bit_identical_across_reruns() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let plan_a = rotating_plan("replay", dir_a.path().join("grid"));
    let plan_b = rotating_plan("replay", dir_b.path().join("grid"));

    let cells_a = power_surface(&plan_a).unwrap();
    let cells_b = power_surface(&plan_b).unwrap();
    assert_eq!(cells_a, cells_b);

    let file_a = fs::read(plan_a.output.as_ref().unwrap().join("cells.csv")).unwrap();
    let file_b = fs::read(plan_b.output.as_ref().unwrap().join("cells.csv")).unwrap();
    assert_eq!(file_a, file_b, "result files must match byte for byte");
}

#[test]
fn power_surface_resumes_to_the_same_grid() {
    let dir = tempfile::tempdir().unwrap();
    let plan = rotating_plan("resume", dir.path().join("grid"));
    power_surface(&plan).unwrap();

    let cells_path = plan.output.as_ref().unwrap().join("cells.csv");
    let complete = fs::read_to_string(&cells_path).unwrap();
    let lines: Vec<&str> = complete.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two cells");

    // drop the last finished cell, as if the run had been interrupted
    fs::write(&cells_path, format!("{}\n{}\n", lines[0], lines[1])).unwrap();
    let resumed = power_surface(&plan).unwrap();
    assert_eq!(resumed.len(), 2);
    assert_eq!(fs::read_to_string(&cells_path).unwrap(), complete);
}

#[test]
fn results_directory_rejects_a_different_plan() {
    let dir = tempfile::tempdir().unwrap();
    let plan = rotating_plan("strict", dir.path().join("grid"));
    power_surface(&plan).unwrap();

    let mut reseeded = plan.clone();
    reseeded.seed += 1;
    let err = power_surface(&reseeded).unwrap_err();
    assert!(err.to_string().contains("different plan"), "got: {err}");
}

#[test]
fn power_surface_holds_level_and_detects_strong_signal() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = rotating_plan("levelpower", dir.path().join("grid"));
    plan.signal_grid = vec![0.0, 1.0];
    plan.n_schedule = vec![2000];
    plan.h_schedule = vec![0.02];
    plan.replications = 100;

    let cells = power_surface(&plan).unwrap();
    let null_cell = &cells[0];
    let alt_cell = &cells[1];
    assert!(
        null_cell.rejection_rate <= 0.15,
        "null rejection {} above the level",
        null_cell.rejection_rate
    );
    assert!(
        alt_cell.rejection_rate >= 0.8,
        "strong signal only rejected at rate {}",
        alt_cell.rejection_rate
    );
    assert!(alt_cell.mean_statistic > null_cell.mean_statistic);
    assert!(null_cell.mean_kappa > 0.0);
    assert_eq!(null_cell.mean_kappa, alt_cell.mean_kappa);
}

#[test]
fn detection_points_straddle_the_critical_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = rotating_plan("detect", dir.path().join("grid"));
    plan.signal_grid.clear();
    plan.n_schedule = vec![1000, 2000];
    plan.h_schedule = vec![0.04, 0.02];
    plan.replications = 80;

    let points = detection_rate_curve(&plan, TestMode::Gap, 0.5).unwrap();
    assert_eq!(points.len(), 2);
    for point in &points {
        assert!(point.resolved, "n = {} did not resolve", point.n);
        let params = HypothesisParams::new(1, 0.5, 0.5, 0.1)
            .unwrap()
            .with_gap(1.0)
            .unwrap();
        let kappa = critical_value(&params, point.n, point.h, 2).unwrap().kappa;
        assert_eq!(point.kappa, kappa);
        assert!(
            point.signal_size >= 0.4 * kappa && point.signal_size <= 2.5 * kappa,
            "n = {}: detected signal {} far from critical value {}",
            point.n,
            point.signal_size,
            kappa
        );
        assert!(point.evaluations <= 25);
    }
}

#[test]
fn detection_reports_unreachable_targets_as_unresolved() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = rotating_plan("hopeless", dir.path().join("grid"));
    plan.signal_grid.clear();
    plan.n_schedule = vec![200];
    plan.h_schedule = vec![0.1];
    plan.replications = 20;
    // an absurd regularity radius makes the critical value unreachable
    plan.model = ModelSpec::Rotating { dim: 2, smoothness: 0.5, holder_radius: 40.0 };

    let points = detection_rate_curve(&plan, TestMode::NoGap, 0.5).unwrap();
    assert_eq!(points.len(), 1);
    assert!(!points[0].resolved);
    assert_eq!(points[0].weight, 1.0, "the bracket should have been pushed to the cap");
}

#[test]
fn explained_variance_fractions_shrink_with_longer_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let sqrt_half = 0.5_f64.sqrt();
    let plan = ExperimentPlan {
        name: "evstudy".into(),
        model: ModelSpec::Wishart {
            dim: 3,
            rank: 2,
            b0: vec![vec![1.0, 0.0, 0.0], vec![0.0, sqrt_half, 0.0]],
        },
        signal_grid: vec![],
        gap_grid: vec![],
        n_schedule: vec![600],
        h_schedule: vec![0.05, 0.1, 0.2],
        h_prime: None,
        replications: 60,
        alpha: 0.1,
        seed: 99,
        output: Some(dir.path().join("ev")),
    };

    let rows = ev_vs_blocklength(&plan).unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        assert!(row.median > 0.0 && row.median < 0.5);
        assert!(row.q10 <= row.median && row.median <= row.q90);
    }
    assert!(
        rows[0].median < rows[1].median && rows[1].median < rows[2].median,
        "medians {:?} should shrink toward zero as blocks shorten",
        rows.iter().map(|r| r.median).collect::<Vec<_>>()
    );
}

#[test]
fn the_drivers_check_their_model_families_and_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = rotating_plan("bad", dir.path().join("grid"));

    let mut wrong_model = plan.clone();
    wrong_model.model = ModelSpec::Constant { diagonal: vec![1.0, 0.5] };
    assert!(power_surface(&wrong_model).is_err());
    assert!(ev_vs_blocklength(&plan).is_err());

    let mut ragged = plan.clone();
    ragged.n_schedule = vec![200, 400];
    ragged.h_schedule = vec![0.1, 0.1];
    assert!(matches!(
        detection_rate_curve(&ragged, TestMode::Gap, 0.5),
        Err(spotrank::Error::Input(_))
    ));

    plan.n_schedule = vec![200, 400];
    plan.h_schedule = vec![0.1];
    assert!(power_surface(&plan).is_err());
}

#[test]
fn the_signal_size_is_monotone_in_the_weight_and_the_floor_is_positive() {
    let floor = rotating_signal_size(1.0, 0.0, 0.02, 0.5);
    assert!((floor - 0.01).abs() < 1e-15);
    let mut last = floor;
    for step in 1..=10 {
        let value = rotating_signal_size(1.0, step as f64 / 10.0, 0.02, 0.5);
        assert!(value > last);
        last = value;
    }
}
