use soc_ude::experiments::{run_case, CaseSpec, RunMode};
use soc_ude::io::{file_sha256, read_profile_csv, read_toml, HeatmapBounds};
use soc_ude::report::{write_case_outputs, RunManifest};
use soc_ude::tuning::run_search;
use soc_ude::{build_dataset, DatasetSpec, LossConfig, TrainConfig};

fn small_case(id: u8, seed: u64) -> CaseSpec {
    let data = DatasetSpec {
        nz: 8,
        t_end: 5.0,
        driver_lattice: 6,
        ..DatasetSpec::default()
    };
    let loss = LossConfig {
        collocation_times: vec![1.0, 2.5, 5.0],
        ..LossConfig::default()
    };
    let mut spec = CaseSpec::with_defaults(id, seed, &data, &loss, &TrainConfig::default(), (3, 2)).unwrap();
    spec.final_budget.adam_iters = 20;
    spec.final_budget.lbfgs_iters = 10;
    spec
}

#[test]
fn case_outputs_are_complete_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_case(&small_case(5, 3), RunMode::TuneThenFinal, 2).unwrap();
    assert!(report.is_ok(), "{:?}", report.status);
    let manifest = write_case_outputs(&report, dir.path()).unwrap();
    for (name, hash) in &manifest.files {
        assert_eq!(&file_sha256(&dir.path().join(name)).unwrap(), hash, "{name}");
    }
    for name in ["sweep.csv", "history.csv", "profile.csv", "heatmap.ppm", "params.bin", "dataset.toml"] {
        assert!(manifest.files.contains_key(name), "{name} not hashed");
    }
    assert!(!manifest.files.contains_key("timing.toml"));

    let profile = read_profile_csv(&dir.path().join("profile.csv")).unwrap();
    let clean = &report.dataset.clean_target.values;
    for i in 0..clean.len() {
        assert!((profile.truth[i] - clean[i]).abs() <= 1e-8 * clean[i].abs());
        assert!((profile.pred[i] - report.prediction[i]).abs() <= 1e-8 * report.prediction[i].abs().max(1e-3));
    }

    let m = report.metrics.unwrap();
    assert!(m.r2_clean <= 1.0 && m.r2_noisy <= 1.0);
    assert!((m.rmse_clean.powi(2) - m.mse_clean).abs() <= 1e-15);

    let h = report.heatmap.as_ref().unwrap();
    assert_eq!(h.truth.shape(), (8, 51));
    let bounds: HeatmapBounds = read_toml(&dir.path().join("heatmap.bounds.toml")).unwrap();
    assert_eq!((bounds.true_min, bounds.true_max), (h.truth.min(), h.truth.max()));
    assert_eq!((bounds.pred_min, bounds.pred_max), (h.pred.min(), h.pred.max()));
}

#[test]
fn manifest_reruns_reproduce_every_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = write_case_outputs(&run_case(&small_case(4, 7), RunMode::TuneThenFinal, 1).unwrap(), a.path()).unwrap();
    let stored: RunManifest = read_toml(&a.path().join("report.toml")).unwrap();
    assert_eq!(stored, first);
    let again = write_case_outputs(&run_case(&stored.config, stored.mode.clone(), 3).unwrap(), b.path()).unwrap();
    assert_eq!(again, first);
    assert_eq!(
        std::fs::read(a.path().join("report.toml")).unwrap(),
        std::fs::read(b.path().join("report.toml")).unwrap()
    );
}

#[test]
fn serial_and_parallel_sweeps_agree() {
    let spec = small_case(6, 5);
    let ds = build_dataset(&spec.dataset).unwrap();
    let serial = run_search(&spec.search_space, &ds, &spec.loss, &spec.final_budget, 1).unwrap();
    let parallel = run_search(&spec.search_space, &ds, &spec.loss, &spec.final_budget, 4).unwrap();
    assert_eq!(serial.to_csv(false), parallel.to_csv(false));
    assert_eq!(serial.best, parallel.best);
}

#[test]
fn noise_changes_targets_but_not_truth() {
    let clean = run_case(&small_case(4, 1), RunMode::FinalOnly, 1).unwrap();
    let noisy = run_case(&small_case(6, 1), RunMode::FinalOnly, 1).unwrap();
    assert_eq!(clean.dataset.clean_target, noisy.dataset.clean_target);
    assert_ne!(clean.dataset.target_profile, noisy.dataset.target_profile);
    let (c, n) = (clean.metrics.unwrap(), noisy.metrics.unwrap());
    assert_eq!(c.mse_clean, c.mse_noisy);
    assert_ne!(n.mse_noisy, n.mse_clean);
}

#[test]
fn target_time_zero_predicts_the_observation() {
    let r = run_case(&small_case(2, 9), RunMode::FinalOnly, 1).unwrap();
    assert_eq!(r.prediction, r.dataset.target_profile.values);
    assert_eq!(r.metrics.unwrap().r2_noisy, 1.0);
}
