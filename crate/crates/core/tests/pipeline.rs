use std::fs;
use std::path::Path;

use dilution_core::error::{ErrorCategory, LabError};
use dilution_core::harness::{self, DataSource, ExperimentConfig, WindowConfig};
use dilution_core::synthgen::{self, GeneratorConfig};

fn small(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic {
            generator: GeneratorConfig {
                n_invoices: 5_000,
                ..Default::default()
            },
        },
        windows: WindowConfig {
            n_windows: 2,
            ..Default::default()
        },
        output_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn train_then_evaluate_matches_single_pass_and_report_rebuild() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&tmp.path().join("one"));
    let one = harness::run_experiment(&cfg).unwrap();

    let split = small(&tmp.path().join("two"));
    harness::run_training(&split).unwrap();
    let two = harness::run_evaluation(&split).unwrap();
    assert_eq!(one.summary, two.summary);

    let summary_file = split.output_dir.join("summary").join("summary.json");
    let before = fs::read(&summary_file).unwrap();
    let rebuilt = harness::rebuild_summary(&split.output_dir).unwrap();
    assert_eq!(rebuilt, two.summary);
    assert_eq!(fs::read(&summary_file).unwrap(), before);

    for w in &one.windows {
        let reports = harness::window_dir(&cfg.output_dir, &w.window).join("reports");
        for f in ["roc.csv", "pr.csv", "classification.json", "scatter_ensemble_wgt.csv", "errors_gbdt.csv"] {
            assert!(reports.join(f).is_file(), "missing {f}");
        }
        let models = harness::window_dir(&cfg.output_dir, &w.window).join("models");
        assert!(models.join("ensemble.json").is_file());
    }
    for f in ["config.lock.json", "feature_dictionary.json", "summary/model_comparison.csv"] {
        assert!(cfg.output_dir.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn files_source_reproduces_in_memory_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let base = small(&tmp.path().join("mem"));
    let DataSource::Synthetic { generator } = &base.data else { unreachable!() };
    let data = synthgen::generate(generator).unwrap();
    let data_dir = tmp.path().join("data");
    synthgen::write_dataset(&data, &data_dir).unwrap();

    let from_files = ExperimentConfig {
        data: DataSource::Files {
            invoices: data_dir.join("invoices.csv"),
            macro_file: Some(data_dir.join("macro.csv")),
            ground_truth: Some(data_dir.join("ground_truth.json")),
            lenient: false,
        },
        output_dir: tmp.path().join("files"),
        ..base.clone()
    };
    let a = harness::prepare(&base, &harness::load_data(&base.data).unwrap(), true).unwrap();
    let b = harness::prepare(&from_files, &harness::load_data(&from_files.data).unwrap(), true).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.truth, b.truth);
}

#[test]
fn ablation_without_macro_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthgen::generate(&GeneratorConfig {
        n_invoices: 500,
        ..Default::default()
    })
    .unwrap();
    synthgen::write_dataset(&data, tmp.path()).unwrap();
    let cfg = ExperimentConfig {
        data: DataSource::Files {
            invoices: tmp.path().join("invoices.csv"),
            macro_file: None,
            ground_truth: None,
            lenient: false,
        },
        output_dir: tmp.path().join("out"),
        ..Default::default()
    };
    let err = harness::run_ablation(&cfg).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Config);
}

#[test]
fn evaluation_rejects_bundles_from_another_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    harness::run_training(&cfg).unwrap();
    let mut other = cfg.clone();
    other.features.include_macro = false;
    match harness::run_evaluation(&other) {
        Err(LabError::FingerprintMismatch { .. }) => {}
        other => panic!("expected fingerprint mismatch, got {other:?}"),
    }
}

#[test]
fn minimal_single_window_single_family_run_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.windows.n_windows = 1;
    cfg.regressors.truncate(1);
    cfg.ensembles.clear();
    let out = harness::run_experiment(&cfg).unwrap();
    assert_eq!(out.summary.classifier.len(), 1);
    assert_eq!(out.windows[0].models.len(), 1);
    let reports = harness::window_dir(tmp.path(), &out.windows[0].window).join("reports");
    for f in ["window.json", "roc.csv", "pr.csv", "scatter_gbdt.csv", "binned_gbdt.json"] {
        assert!(reports.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn randomization_control_matches_experiment_auc() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(&tmp.path().join("run"));
    cfg.randomization.permutation_seeds = vec![1];
    let run = harness::run_experiment(&cfg).unwrap();
    cfg.output_dir = tmp.path().join("rand");
    let check = harness::run_randomization_check(&cfg).unwrap();
    for (w, r) in check.windows.iter().zip(&run.windows) {
        assert_eq!(w.window, r.window);
        assert_eq!(w.control_auc, r.classification.roc_auc);
    }
}
