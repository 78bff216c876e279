//! Sweep outputs: the per-run CSV, the aggregate JSON and a plain-text
//! summary table, plus the readers used to re-aggregate from disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use crate::feature_store::Split;
use crate::metrics::EvalMetrics;

use super::aggregate::{SweepAggregate, Stat};
use super::run::{LayerResult, RunOutcome};
use super::SweepError;

pub const RUNS_CSV: &str = "runs.csv";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const RESULT_CSV: &str = "result.csv";
const RESULTS_HEADER: &str = "layer,seed,split,mse,lcc,srcc,best_epoch";
const FAILED: &str = "failed";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Two rows per completed run (validation, test) and one `failed` row per
/// failed run. Floats use the shortest exact representation.
pub fn results_csv_string(results: &[LayerResult]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        match &r.outcome {
            RunOutcome::Completed {
                validation,
                test,
                best_epoch,
            } => {
                for (split, m) in [(Split::Validation, validation), (Split::Test, test)] {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        r.layer,
                        r.seed,
                        split,
                        m.mse,
                        opt(m.lcc),
                        opt(m.srcc),
                        best_epoch
                    );
                }
            }
            RunOutcome::Failed { .. } => {
                let _ = writeln!(out, "{},{},{FAILED},,,,", r.layer, r.seed);
            }
        }
    }
    out
}

pub fn write_results_csv(results: &[LayerResult], destination: &Path) -> Result<(), SweepError> {
    std::fs::write(destination, results_csv_string(results)).map_err(|e| SweepError::io(destination, e))
}

fn parse_err(path: &Path, row: usize, why: impl std::fmt::Display) -> SweepError {
    SweepError::Parse(format!("{}: row {row}: {why}", path.display()))
}

type PartialRun = (Option<EvalMetrics>, Option<EvalMetrics>, usize);

pub fn read_results_csv(source: &Path) -> Result<Vec<LayerResult>, SweepError> {
    let text = std::fs::read_to_string(source).map_err(|e| SweepError::io(source, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(parse_err(source, 0, format!("expected header {RESULTS_HEADER}")));
    }
    // (validation, test, best epoch) per run
    let mut partial: BTreeMap<(u16, u64), PartialRun> = BTreeMap::new();
    let mut failed = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(parse_err(source, row, "expected 7 fields"));
        }
        let layer: u16 = f[0].parse().map_err(|_| parse_err(source, row, "bad layer"))?;
        let seed: u64 = f[1].parse().map_err(|_| parse_err(source, row, "bad seed"))?;
        if f[2] == FAILED {
            failed.push((layer, seed));
            continue;
        }
        let split: Split = f[2].parse().map_err(|e| parse_err(source, row, e))?;
        let num = |s: &str| -> Result<Option<f64>, SweepError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err(source, row, format!("bad number {s:?}")))
            }
        };
        let metrics = EvalMetrics {
            mse: num(f[3])?.ok_or_else(|| parse_err(source, row, "missing mse"))?,
            lcc: num(f[4])?,
            srcc: num(f[5])?,
        };
        let best_epoch: usize = f[6].parse().map_err(|_| parse_err(source, row, "bad best_epoch"))?;
        let slot = partial.entry((layer, seed)).or_insert((None, None, best_epoch));
        match split {
            Split::Validation => slot.0 = Some(metrics),
            Split::Test => slot.1 = Some(metrics),
            Split::Train => return Err(parse_err(source, row, "train rows are not reported")),
        }
    }
    let mut results = Vec::new();
    for ((layer, seed), (val, test, best_epoch)) in partial {
        let (Some(validation), Some(test)) = (val, test) else {
            return Err(parse_err(
                source,
                0,
                format!("layer {layer} seed {seed} lacks a validation or test row"),
            ));
        };
        results.push(LayerResult {
            layer,
            seed,
            outcome: RunOutcome::Completed {
                validation,
                test,
                best_epoch,
            },
        });
    }
    for (layer, seed) in failed {
        results.push(LayerResult {
            layer,
            seed,
            outcome: RunOutcome::Failed {
                reason: FAILED.into(),
            },
        });
    }
    results.sort_by_key(|r| (r.layer, r.seed));
    Ok(results)
}

/// Gathers every per-run `result.csv` under `dir`, falling back to a
/// top-level `runs.csv` when there are none. Returns the results in
/// `(layer, seed)` order plus the model id when the run directories name
/// exactly one.
pub fn collect_run_results(dir: &Path) -> Result<(Option<String>, Vec<LayerResult>), SweepError> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.file_name() == RESULT_CSV)
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut models: Vec<String> = files
        .iter()
        .filter_map(|p| {
            // <root>/<model>/L<layer>/seed<k>/result.csv
            let rel = p.strip_prefix(dir).ok()?;
            let parts: Vec<_> = rel.components().collect();
            (parts.len() == 4).then(|| parts[0].as_os_str().to_string_lossy().into_owned())
        })
        .collect();
    models.sort();
    models.dedup();
    let mut results = Vec::new();
    if files.is_empty() {
        let runs = dir.join(RUNS_CSV);
        if !runs.is_file() {
            return Err(SweepError::Parse(format!(
                "no {RESULT_CSV} or {RUNS_CSV} under {}",
                dir.display()
            )));
        }
        results = read_results_csv(&runs)?;
    } else {
        for f in &files {
            results.extend(read_results_csv(f)?);
        }
    }
    results.sort_by_key(|r| (r.layer, r.seed));
    let model = (models.len() == 1).then(|| models.remove(0));
    Ok((model, results))
}

pub fn aggregate_json_string(agg: &SweepAggregate) -> String {
    let mut s = serde_json::to_string_pretty(agg).expect("aggregate serializes");
    s.push('\n');
    s
}

pub fn read_aggregate_json(source: &Path) -> Result<SweepAggregate, SweepError> {
    let text = std::fs::read_to_string(source).map_err(|e| SweepError::io(source, e))?;
    serde_json::from_str(&text).map_err(|e| SweepError::Parse(format!("{}: {e}", source.display())))
}

fn fmt_stat(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.3} ± {:.3}", s.mean, s.std),
        None => "-".into(),
    }
}

fn fmt_mean(s: Option<Stat>) -> String {
    s.map(|s| format!("{:.3}", s.mean)).unwrap_or_else(|| "-".into())
}

/// Table of the best layer's test metrics followed by every layer.
pub fn summary_text(agg: &SweepAggregate) -> String {
    let mut out = String::new();
    let model = agg.model_id.as_deref().unwrap_or("-");
    let seeds: Vec<String> = agg.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "model: {model}   seeds: {}", seeds.join(","));
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<24} {:>8} {:>10} {:>8} {:>8} {:>8}",
        "Model", "# Layers", "Best Layer", "MSE", "LCC", "SRCC"
    );
    let best = agg.best_layer.and_then(|b| agg.layer(b));
    let (best_str, mse, lcc, srcc) = match best {
        Some(l) => (
            l.layer.to_string(),
            fmt_mean(l.test.mse),
            fmt_mean(l.test.lcc),
            fmt_mean(l.test.srcc),
        ),
        None => ("-".into(), "-".into(), "-".into(), "-".into()),
    };
    let _ = writeln!(
        out,
        "{:<24} {:>8} {:>10} {:>8} {:>8} {:>8}",
        model,
        agg.layers.len(),
        best_str,
        mse,
        lcc,
        srcc
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>5} {:>4} {:>6} {:>16} {:>16} {:>16} {:>16}",
        "layer", "ok", "failed", "val LCC", "test MSE", "test LCC", "test SRCC"
    );
    for l in &agg.layers {
        let marker = if Some(l.layer) == agg.best_layer { " *" } else { "" };
        let _ = writeln!(
            out,
            "{:>5} {:>4} {:>6} {:>16} {:>16} {:>16} {:>16}{marker}",
            l.layer,
            l.completed,
            l.failed,
            fmt_stat(l.validation.lcc),
            fmt_stat(l.test.mse),
            fmt_stat(l.test.lcc),
            fmt_stat(l.test.srcc),
        );
    }
    if !agg.excluded_layers.is_empty() {
        let _ = writeln!(out, "\nlayers with no successful run: {:?}", agg.excluded_layers);
    }
    out
}

/// Writes `runs.csv`, `aggregate.json` and `summary.txt` into `destination`.
pub fn emit_report(agg: &SweepAggregate, results: &[LayerResult], destination: &Path) -> Result<(), SweepError> {
    std::fs::create_dir_all(destination).map_err(|e| SweepError::io(destination, e))?;
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|r| (r.layer, r.seed));
    write_results_csv(&sorted, &destination.join(RUNS_CSV))?;
    let json = destination.join(AGGREGATE_JSON);
    std::fs::write(&json, aggregate_json_string(agg)).map_err(|e| SweepError::io(&json, e))?;
    let summary = destination.join(SUMMARY_TXT);
    std::fs::write(&summary, summary_text(agg)).map_err(|e| SweepError::io(&summary, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::aggregate::aggregate;

    fn grid(layers: u16, seeds: u64) -> Vec<LayerResult> {
        let mut out = Vec::new();
        for l in 1..=layers {
            for s in 0..seeds {
                let x = 0.5 + 0.01 * l as f64 + 0.001 * s as f64 + 1.0 / 3.0 * 1e-3;
                let m = EvalMetrics {
                    mse: 1.0 / (x + 1.0),
                    lcc: Some(x),
                    srcc: Some(x - 0.01),
                };
                out.push(LayerResult {
                    layer: l,
                    seed: s,
                    outcome: RunOutcome::Completed {
                        validation: m,
                        test: EvalMetrics { lcc: None, ..m },
                        best_epoch: (s + 1) as usize,
                    },
                });
            }
        }
        out
    }

    #[test]
    fn csv_cardinality_and_round_trip() {
        let mut results = grid(12, 5);
        results[7].outcome = RunOutcome::Failed {
            reason: FAILED.into(),
        };
        let text = results_csv_string(&results);
        assert_eq!(text.lines().count(), 1 + 59 * 2 + 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results_csv(&results, &path).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), results);
    }

    #[test]
    fn json_round_trip_and_reaggregation() {
        let results = grid(4, 3);
        let agg = aggregate(&results, &[0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&agg, &results, dir.path()).unwrap();
        assert_eq!(read_aggregate_json(&dir.path().join(AGGREGATE_JSON)).unwrap(), agg);
        let (_, reread) = collect_run_results(dir.path()).unwrap();
        assert_eq!(aggregate(&reread, &[0, 1, 2]), agg);
        let summary = std::fs::read_to_string(dir.path().join(SUMMARY_TXT)).unwrap();
        assert!(summary.contains("Best Layer"));
    }

    #[test]
    fn bad_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, format!("{RESULTS_HEADER}\n1,0,validation,0.1,0.5,0.5,1\n")).unwrap();
        assert!(matches!(read_results_csv(&p), Err(SweepError::Parse(_))));
        std::fs::write(&p, "layer,seed\n").unwrap();
        assert!(read_results_csv(&p).is_err());
        std::fs::write(&p, format!("{RESULTS_HEADER}\n1,0,dev,0.1,0.5,0.5,1\n")).unwrap();
        assert!(read_results_csv(&p).is_err());
    }
}
