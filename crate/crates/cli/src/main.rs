//! `sweep`: run, re-aggregate and plot per-layer MOS probing sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerprobe::feature_store::{self, validate_store};
use layerprobe::nn_head::{ConvStage, HeadConfig, DEFAULT_CONV_STAGES, DEFAULT_DENSE_WIDTHS};
use layerprobe::sweep::{
    self, plot, report, synth, RunOptions, SweepAggregate, SweepError, SweepPlan, SynthConfig,
};
use layerprobe::trainer::TrainConfig;

#[derive(Parser)]
#[command(name = "sweep", version, about = "Per-layer MOS probing sweeps over stored SSL features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one head per (layer, seed) and write runs, report and plot.
    Run(RunArgs),
    /// Re-aggregate a finished sweep from its per-run CSVs.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the LCC heat strip from an aggregate JSON.
    Plot {
        #[arg(long)]
        aggregate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-peak synthetic feature store.
    Synth(SynthArgs),
    /// Check that every manifest entry has the requested layers.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        layers: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// e.g. `1..12`, `1..47:2` or `3,5,7`
    #[arg(long)]
    layers: String,
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Model id for run directories; defaults to the feature files' model id.
    #[arg(long)]
    model: Option<String>,
    /// Conv stages as `out:kernel:stride,...`.
    #[arg(long, default_value_t = default_conv_spec())]
    conv: String,
    /// Hidden dense widths, comma separated (empty for none).
    #[arg(long, default_value_t = default_dense_spec())]
    dense: String,
    /// Skip writing head checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    layers: u16,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    peak: u16,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Signal scale at the peak layer.
    #[arg(long, default_value_t = synth::DEFAULT_PEAK_SNR)]
    peak_snr: f64,
    /// Layers on each side of the peak covered by the linear ramp.
    #[arg(long, default_value_t = synth::DEFAULT_HALF_WIDTH)]
    half_width: u16,
    #[arg(long)]
    out: PathBuf,
}

fn default_conv_spec() -> String {
    DEFAULT_CONV_STAGES
        .iter()
        .map(|s| format!("{}:{}:{}", s.out_channels, s.kernel_size, s.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn default_dense_spec() -> String {
    DEFAULT_DENSE_WIDTHS.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_conv(spec: &str) -> Result<Vec<ConvStage>, SweepError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|stage| {
            let nums: Vec<usize> = stage
                .split(':')
                .map(|n| n.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| SweepError::Plan(format!("bad conv stage {stage:?}")))?;
            match nums[..] {
                [o, k, s] => Ok(ConvStage::new(o, k, s)),
                _ => Err(SweepError::Plan(format!("conv stage {stage:?} is not out:kernel:stride"))),
            }
        })
        .collect()
}

fn parse_dense(spec: &str) -> Result<Vec<usize>, SweepError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|w| w.parse().map_err(|_| SweepError::Plan(format!("bad dense width {w:?}"))))
        .collect()
}

fn write_outputs(agg: &SweepAggregate, results: &[sweep::LayerResult], out: &Path) -> Result<(), SweepError> {
    sweep::emit_report(agg, results, out)?;
    sweep::emit_grid_plot(agg, &out.join("grid.svg"))?;
    print!("{}", report::summary_text(agg));
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), SweepError> {
    let manifest = feature_store::load_manifest(&args.manifest)?;
    let layers = sweep::parse_layer_spec(&args.layers)?;
    let seeds = sweep::parse_seeds(&args.seeds)?;
    let first = manifest
        .entries()
        .first()
        .ok_or_else(|| SweepError::Plan("manifest is empty".into()))?;
    let header = feature_store::read_header(&manifest.resolve(first))?;
    let (frames, dim) = header.shape();
    let plan = SweepPlan {
        model_id: args.model.unwrap_or_else(|| header.model_id.clone()),
        layer_indices: layers,
        seeds: seeds.clone(),
        head_config: HeadConfig {
            input_frames: frames,
            input_dim: dim,
            conv_stages: parse_conv(&args.conv)?,
            dense_widths: parse_dense(&args.dense)?,
        },
        train_config: TrainConfig {
            epochs: args.epochs,
            learning_rate: args.lr,
            batch_size: args.batch,
            ..TrainConfig::default()
        },
    };
    let options = RunOptions {
        jobs: args.jobs,
        out_dir: Some(args.out.clone()),
        write_checkpoints: !args.no_checkpoints,
    };
    let results = sweep::run_sweep(&manifest, &plan, &options)?;
    for r in &results {
        if let sweep::RunOutcome::Failed { reason } = &r.outcome {
            eprintln!("run layer {} seed {} failed: {reason}", r.layer, r.seed);
        }
    }
    let mut agg = sweep::aggregate(&results, &seeds);
    agg.model_id = Some(plan.model_id);
    write_outputs(&agg, &results, &args.out)
}

fn cmd_report(runs: &Path, out: &Path) -> Result<(), SweepError> {
    let (model, results) = sweep::collect_run_results(runs)?;
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut agg = sweep::aggregate(&results, &seeds);
    agg.model_id = model;
    write_outputs(&agg, &results, out)
}

fn cmd_plot(aggregate: &Path, out: &Path) -> Result<(), SweepError> {
    let agg = sweep::read_aggregate_json(aggregate)?;
    plot::emit_grid_plot(&agg, out)
}

fn cmd_synth(a: SynthArgs) -> Result<(), SweepError> {
    let config = SynthConfig {
        num_layers: a.layers,
        feat_dim: a.dim,
        num_frames: a.frames,
        peak_layer: a.peak,
        snr_profile: synth::triangular_profile(a.layers, a.peak, a.peak_snr, a.half_width),
        train: a.train,
        validation: a.val,
        test: a.test,
        noise_std: a.noise,
        seed: a.seed,
    };
    let manifest = sweep::generate_synthetic(&config, &a.out)?;
    println!(
        "wrote {} utterances, manifest {}",
        manifest.entries().len(),
        a.out.join(synth::MANIFEST_NAME).display()
    );
    Ok(())
}

fn cmd_validate(manifest: &Path, layers: &str) -> Result<(), SweepError> {
    let manifest = feature_store::load_manifest(manifest)?;
    let layers = sweep::parse_layer_spec(layers)?;
    let report = validate_store(&manifest, &layers);
    if report.is_empty() {
        println!("ok: {} entries, layers {:?}", manifest.entries().len(), layers);
        return Ok(());
    }
    for issue in &report.issues {
        println!("{issue}");
    }
    Err(SweepError::Store(report))
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report { runs, out } => cmd_report(&runs, &out),
        Command::Plot { aggregate, out } => cmd_plot(&aggregate, &out),
        Command::Synth(args) => cmd_synth(args),
        Command::Validate { manifest, layers } => cmd_validate(&manifest, &layers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{{\"error\":\"{}\",\"message\":\"{}\"}}",
                e.kind(),
                json_escape(&e.to_string())
            );
            ExitCode::FAILURE
        }
    }
}
