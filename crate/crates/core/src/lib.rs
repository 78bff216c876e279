//! Layer-wise MOS probing for self-supervised speech models.
//!
//! Per-layer features live in a binary [`feature_store`]; a small
//! convolutional projection head ([`nn_head`]) is trained per layer by the
//! [`trainer`], scored with [`metrics`], and the [`sweep`] ranks layers by
//! mean validation LCC over seeds.

pub mod feature_store;
pub mod metrics;
pub mod nn_head;
pub mod sweep;
pub mod trainer;

pub use feature_store::{
    load_manifest, read_feature_file, read_feature_layer, read_header, validate_store, write_feature_file,
    DatasetManifest, FeatureHeader, ManifestEntry, Split, StoreError, UtteranceFeatures, ValidationReport,
};
pub use metrics::{average_ranks, mse, pearson_lcc, spearman_srcc, EvalMetrics, ScorePair};
pub use nn_head::{
    conv1d_forward, head_backward, head_backward_batch, head_forward, head_forward_batch, init_params, mse_loss,
    BatchCache, ConvStage, ForwardCache, HeadConfig, ParamSet,
};
pub use sweep::{
    aggregate, emit_grid_plot, emit_report, generate_synthetic, plan_layers, run_sweep, select_best_layer,
    LayerResult, SweepAggregate, SweepError, SweepPlan, SynthConfig,
};
pub use trainer::{adam_step, evaluate, load_split, train_head, AdamState, LoadedSplit, TrainConfig, TrainResult};
