//! Layer sweep: plan the layers, train one head per `(layer, seed)`,
//! aggregate over seeds, pick the best layer, and write reports and plots.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::feature_store::{ManifestError, StoreError, ValidationReport};
use crate::nn_head::{CheckpointError, HeadError};
use crate::trainer::TrainError;

pub mod aggregate;
pub mod plan;
pub mod plot;
pub mod report;
pub mod run;
pub mod synth;

pub use aggregate::{aggregate, select_best_layer, LayerAggregate, MetricSummary, Stat, SweepAggregate};
pub use plan::{parse_layer_spec, parse_seeds, plan_layers, SweepPlan, DEFAULT_SEEDS};
pub use plot::{emit_grid_plot, render_grid_svg};
pub use report::{collect_run_results, emit_report, read_aggregate_json, read_results_csv};
pub use run::{run_sweep, LayerResult, RunOptions, RunOutcome};
pub use synth::{generate_synthetic, triangular_profile, SynthConfig};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("store not sweep-ready ({} issue(s)): {}", .0.issues.len(), first_issue(.0))]
    Store(ValidationReport),
    #[error(transparent)]
    StoreIo(#[from] StoreError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid layer spec {0}")]
    LayerSpec(String),
    #[error("{0}")]
    Plan(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn first_issue(report: &ValidationReport) -> String {
    report.issues.first().map(ToString::to_string).unwrap_or_default()
}

impl SweepError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SweepError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            SweepError::Store(_) => "store_invalid",
            SweepError::StoreIo(_) => "store",
            SweepError::Manifest(_) => "manifest",
            SweepError::Train(_) => "train",
            SweepError::Head(_) => "head",
            SweepError::Checkpoint(_) => "checkpoint",
            SweepError::LayerSpec(_) => "layer_spec",
            SweepError::Plan(_) => "plan",
            SweepError::Parse(_) => "parse",
            SweepError::Io { .. } => "io",
        }
    }
}
