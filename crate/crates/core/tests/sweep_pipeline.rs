use std::collections::BTreeSet;
use std::path::Path;

use layerprobe::sweep::report::{read_aggregate_json, read_results_csv, RUNS_CSV, AGGREGATE_JSON};
use layerprobe::sweep::{collect_run_results, RunOptions, RunOutcome};
use layerprobe::{
    aggregate, emit_report, generate_synthetic, run_sweep, select_best_layer, ConvStage, DatasetManifest, EvalMetrics,
    HeadConfig, LayerResult, SweepError, SweepPlan, SynthConfig, TrainConfig,
};
use proptest::prelude::*;

fn tiny_store(dir: &Path) -> DatasetManifest {
    let config = SynthConfig::planted(12, 4, 8, 4, (16, 6, 6), 1.0, 1);
    generate_synthetic(&config, dir).unwrap()
}

fn tiny_plan() -> SweepPlan {
    SweepPlan {
        model_id: "synthetic".into(),
        layer_indices: (1..=12).collect(),
        seeds: vec![0, 1, 2, 3, 4],
        head_config: HeadConfig {
            input_frames: 8,
            input_dim: 4,
            conv_stages: vec![ConvStage::new(4, 3, 2)],
            dense_widths: vec![4],
        },
        train_config: TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
    }
}

fn options(jobs: usize, out: Option<&Path>) -> RunOptions {
    RunOptions {
        jobs,
        out_dir: out.map(Path::to_path_buf),
        write_checkpoints: false,
    }
}

#[test]
fn full_grid_yields_sixty_ordered_results_and_120_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_store(&dir.path().join("store"));
    let plan = tiny_plan();
    let results = run_sweep(&manifest, &plan, &options(1, None)).unwrap();
    assert_eq!(results.len(), 60);
    let keys: Vec<(u16, u64)> = results.iter().map(|r| (r.layer, r.seed)).collect();
    assert_eq!(keys, plan.jobs());
    assert!(results.iter().all(LayerResult::is_completed));

    let out = dir.path().join("report");
    let agg = aggregate(&results, &plan.seeds);
    emit_report(&agg, &results, &out).unwrap();
    let csv = std::fs::read_to_string(out.join(RUNS_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 120);
    assert_eq!(read_results_csv(&out.join(RUNS_CSV)).unwrap(), results);
    assert_eq!(read_aggregate_json(&out.join(AGGREGATE_JSON)).unwrap(), agg);
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_store(dir.path());
    let mut plan = tiny_plan();
    plan.layer_indices = vec![2, 4, 6];
    let serial = run_sweep(&manifest, &plan, &options(1, None)).unwrap();
    let again = run_sweep(&manifest, &plan, &options(1, None)).unwrap();
    let parallel = run_sweep(&manifest, &plan, &options(3, None)).unwrap();
    assert_eq!(serial, again);
    assert_eq!(serial, parallel);
}

#[test]
fn reaggregating_per_run_csvs_reproduces_the_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_store(&dir.path().join("store"));
    let mut plan = tiny_plan();
    plan.layer_indices = vec![3, 4, 5];
    let runs = dir.path().join("runs");
    let results = run_sweep(&manifest, &plan, &options(1, Some(&runs))).unwrap();
    let agg = aggregate(&results, &plan.seeds);

    let (model, collected) = collect_run_results(&runs).unwrap();
    assert_eq!(model.as_deref(), Some("synthetic"));
    assert_eq!(collected, results);
    assert_eq!(aggregate(&collected, &plan.seeds), agg);

    for layer in &agg.layers {
        for split in [layerprobe::Split::Validation, layerprobe::Split::Test] {
            let values: Vec<f64> = results
                .iter()
                .filter(|r| r.layer == layer.layer)
                .map(|r| r.metrics(split).unwrap().mse)
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
            let stat = match split {
                layerprobe::Split::Validation => layer.validation.mse,
                _ => layer.test.mse,
            }
            .unwrap();
            assert!((stat.mean - mean).abs() < 1e-12);
            assert!((stat.std - var.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn missing_layer_aborts_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_store(&dir.path().join("store"));
    let mut plan = tiny_plan();
    plan.layer_indices = vec![12, 13];
    let runs = dir.path().join("runs");
    let err = run_sweep(&manifest, &plan, &options(1, Some(&runs))).unwrap_err();
    assert!(matches!(err, SweepError::Store(ref r) if !r.is_empty()), "{err}");
    assert!(!runs.exists());
}

fn metrics(mse: f64, lcc: Option<f64>) -> EvalMetrics {
    EvalMetrics { mse, lcc, srcc: lcc }
}

prop_compose! {
    fn grid()(
        layers in prop::collection::btree_set(0u16..40, 1..8),
        seeds in 1usize..5,
    )(
        cells in prop::collection::vec(
            (0.0f64..3.0, prop::option::weighted(0.9, prop_oneof![Just(0.5), -1.0f64..1.0]), any::<bool>()),
            layers.len() * seeds,
        ),
        layers in Just(layers),
        seeds in Just(seeds),
    ) -> Vec<LayerResult> {
        let mut out = Vec::new();
        let mut it = cells.into_iter();
        for &layer in &layers {
            for seed in 0..seeds as u64 {
                let (mse, lcc, failed) = it.next().unwrap();
                let outcome = if failed && seed == 0 {
                    RunOutcome::Failed { reason: "non-finite loss".into() }
                } else {
                    RunOutcome::Completed {
                        validation: metrics(mse, lcc),
                        test: metrics(mse + 0.1, lcc.map(|v| v * 0.5)),
                        best_epoch: 1,
                    }
                };
                out.push(LayerResult { layer, seed, outcome });
            }
        }
        out
    }
}

proptest! {
    #[test]
    fn best_layer_is_smallest_argmax_of_mean_validation_lcc(results in grid()) {
        let seeds: Vec<u64> = results.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect();
        let agg = aggregate(&results, &seeds);
        let mut best: Option<(u16, f64)> = None;
        for layer in agg.layers.iter().map(|l| l.layer) {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.layer == layer)
                .filter_map(|r| r.metrics(layerprobe::Split::Validation).and_then(|m| m.lcc))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().fold(0.0, |a, v| a + v) / vals.len() as f64;
            if best.is_none_or(|(_, m)| mean > m) {
                best = Some((layer, mean));
            }
        }
        if let Some((layer, _)) = best {
            prop_assert_eq!(select_best_layer(&agg), Some(layer));
            prop_assert_eq!(agg.best_layer, Some(layer));
        }
        for l in &agg.layers {
            prop_assert_eq!(l.completed + l.failed, seeds.len());
            if let Some(s) = l.validation.mse {
                prop_assert!(s.std >= 0.0);
            }
        }
    }

    #[test]
    fn results_csv_round_trips(results in grid()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        layerprobe::sweep::report::write_results_csv(&results, &path).unwrap();
        let back = read_results_csv(&path).unwrap();
        prop_assert_eq!(back.len(), results.len());
        for (a, b) in back.iter().zip(&results) {
            prop_assert_eq!((a.layer, a.seed), (b.layer, b.seed));
            match (&a.outcome, &b.outcome) {
                (RunOutcome::Failed { .. }, RunOutcome::Failed { .. }) => {}
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
