//! End-to-end harness checks: data partitioning, reports, accounting and determinism.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedlora::harness::config::{ExperimentConfig, Strategy};
use fedlora::harness::data::dirichlet_partition;
use fedlora::harness::experiment::{execute_plan, run_experiment, run_strategy, RunReport, Scenario};
use fedlora::harness::report::{emit_report, read_records_csv, write_records_csv, ReportFormat, CSV_COLUMNS};
use fedlora::protocol::Plan;

fn golden_config() -> ExperimentConfig {
    ExperimentConfig::load(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/two_client.toml"))).unwrap()
}

/// Small scenario for baseline runs.
fn toy_config() -> ExperimentConfig {
    let mut c = golden_config();
    c.clients = 6;
    c.data.samples = 1200;
    c.round_cap = 3;
    c
}

/// One optimized run on the default scenario, shared by several tests.
fn optimized_default() -> &'static RunReport {
    static REPORT: OnceLock<RunReport> = OnceLock::new();
    REPORT.get_or_init(|| run_experiment(&ExperimentConfig::default()).unwrap())
}

/// Size-weighted total-variation distance between client label histograms and the global one.
fn label_skew(labels: &[usize], classes: usize, parts: &[Vec<usize>]) -> f64 {
    let mut global = vec![0.0; classes];
    for &y in labels {
        global[y] += 1.0 / labels.len() as f64;
    }
    parts
        .iter()
        .map(|rows| {
            let mut h = vec![0.0; classes];
            for &r in rows {
                h[labels[r]] += 1.0 / rows.len() as f64;
            }
            let tv: f64 = 0.5 * h.iter().zip(&global).map(|(a, b)| (a - b).abs()).sum::<f64>();
            tv * rows.len() as f64 / labels.len() as f64
        })
        .sum()
}

#[test]
fn small_alpha_partitions_are_more_skewed() {
    let classes = 10;
    let labels: Vec<usize> = (0..2000).map(|i| i % classes).collect();
    let mut more_skewed = 0;
    for seed in 0..1000u64 {
        let skewed = dirichlet_partition(&labels, classes, 10, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let even = dirichlet_partition(&labels, classes, 10, 100.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        if label_skew(&labels, classes, &skewed.indices) > label_skew(&labels, classes, &even.indices) {
            more_skewed += 1;
        }
    }
    assert!(more_skewed >= 950, "only {more_skewed} of 1000 draws");
}

#[test]
fn two_client_full_run_matches_golden_file() {
    let report = run_experiment(&golden_config()).unwrap();
    assert_eq!(report.records.len(), 5);
    assert_eq!(report.wall_clock_to_target, None);
    let mut buf = Vec::new();
    write_records_csv(&report.records, &mut buf).unwrap();
    let golden = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/two_client_full.csv")).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), golden);
}

#[test]
fn zero_round_cap_gives_header_only_csv() {
    let mut config = toy_config();
    config.round_cap = 0;
    let report = run_experiment(&config).unwrap();
    assert!(report.records.is_empty());
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path(), ReportFormat::Csv).unwrap();
    let text = fs::read_to_string(dir.path().join("records.csv")).unwrap();
    assert_eq!(text, format!("{}\n", CSV_COLUMNS.join(",")));
}

#[test]
fn every_baseline_runs_from_config() {
    let sampling = ["full", "fixed:0.3", "uniform", "weighted"];
    let rank = ["full-rank", "normal-rank", "uniform-rank"];
    for s in sampling {
        for k in rank {
            let mut config = toy_config();
            config.strategy = format!("{s}+{k}").parse().unwrap();
            let report = run_experiment(&config).unwrap();
            // A diverging round ends the run early and is not recorded.
            assert!(report.records.len() == 3 || report.diverged, "{s}+{k}");
            assert!(report.estimation.is_none());
        }
    }
}

#[test]
fn labels_do_not_change_results_for_the_same_plan() {
    let scenario = Scenario::build(&toy_config()).unwrap();
    let a = run_strategy(&scenario, &"full".parse().unwrap(), None).unwrap();
    let b = run_strategy(&scenario, &"fixed:1+full-rank".parse().unwrap(), None).unwrap();
    assert_ne!(a.strategy, b.strategy);
    assert_eq!(a.plan_used, b.plan_used);
    let relabeled = RunReport { strategy: a.strategy.clone(), ..b };
    assert_eq!(a, relabeled);
}

#[test]
fn optimized_run_accounts_for_every_second() {
    let report = optimized_default();
    let est = report.estimation.as_ref().unwrap();
    assert_eq!(report.estimation_time, est.total_time());
    assert!(report.estimation_time > 0.0);
    let sum: f64 = report.records.iter().map(|r| r.round_time).sum();
    let last = report.records.last().unwrap().cumulative_time;
    assert!((report.estimation_time + sum - last).abs() <= 1e-9 * last);
    assert!(report.records.windows(2).all(|w| w[1].cumulative_time >= w[0].cumulative_time));
    if let Some(t) = report.wall_clock_to_target {
        assert_eq!(t, last);
    }
}

#[test]
fn reports_round_trip_through_json_and_csv() {
    let report = optimized_default();
    let text = serde_json::to_string(report).unwrap();
    let back: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(&back, report);
    let mut buf = Vec::new();
    write_records_csv(&report.records, &mut buf).unwrap();
    assert_eq!(read_records_csv(&buf[..]).unwrap(), report.records);
}

#[test]
fn optimized_plan_is_feasible() {
    let report = optimized_default();
    let config = ExperimentConfig::default();
    let scenario = Scenario::build(&config).unwrap();
    let planner = scenario.planner(report.constants_used.unwrap()).unwrap();
    assert!(planner.bounds(report.plan_used.k()).unwrap().admits(report.plan_used.q()));
}

#[test]
fn identical_configs_write_identical_files() {
    let config = toy_config();
    let write = |dir: &Path| {
        let report = run_experiment(&config).unwrap();
        emit_report(&report, dir, ReportFormat::Both).unwrap();
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write(d1.path());
    write(d2.path());
    for name in ["records.csv", "report.json"] {
        assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap());
    }
}

#[test]
fn fixed_plan_execution_ignores_the_strategy_label() {
    let config = toy_config();
    let scenario = Scenario::build(&config).unwrap();
    let plan = Plan::homogeneous(config.clients, 0.5, 2, config.rank).unwrap();
    let a = execute_plan(&scenario, &Strategy::OPTIMIZED, plan.clone(), None).unwrap();
    let b = execute_plan(&scenario, &"uniform".parse().unwrap(), plan, None).unwrap();
    assert_eq!(a.records, b.records);
}
