mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stformer::heads::Stage;
use stformer::metrics::MetricsConfig;
use stformer::train::AblationAxis;

use commands::Split;
use config::ConfigLayer;
use error::exit;

/// Trajectory generation with a causal state transformer: data
/// generation, two-stage training, evaluation, scaling sweeps and
/// ablations.
#[derive(Parser)]
#[command(name = "stformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic driving samples and their intention vocabulary
    GenData {
        #[arg(long)]
        count: usize,
        /// Comma-separated templates (straight, intersection_turn,
        /// lane_change, stop_and_go); all of them by default
        #[arg(long)]
        templates: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = commands::default_vocab_size())]
        vocab_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        data: PathBuf,
        /// Backbone checkpoint for the diffusion stage [default: <out>/model.ckpt]
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write a gnuplot script for the loss curve
        #[arg(long)]
        gnuplot: bool,
    },
    /// Roll out a checkpoint over a split and score it
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rollout flags as key=value pairs: decoder=mlp|diffusion, k=N,
        /// order=fwd|bkwd, proposal=BOOL, keypoints=BOOL
        #[arg(long)]
        flags: Option<String>,
        #[arg(long, value_enum, default_value_t = Split::Holdout)]
        split: Split,
        #[command(flatten)]
        metrics: MetricsArgs,
    },
    /// Train every preset on every dataset size and fit log-log slopes
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model presets, smallest first
        #[arg(long)]
        presets: String,
        /// Comma-separated training set sizes
        #[arg(long)]
        sizes: String,
        #[arg(long)]
        data: PathBuf,
        /// Train cells concurrently
        #[arg(long)]
        parallel_cells: bool,
        #[arg(long)]
        gnuplot: bool,
    },
    /// Score an existing prediction dump against a dataset
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset holding the ground truth
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        metrics: MetricsArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the sequence-design ablation grid
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        metrics: MetricsArgs,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file with settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    layer: ConfigLayer,
    /// Output directory [default: $STFORMER_OUT_ROOT/<command> or runs/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Miss thresholds in meters at 3, 5 and 8 s
    #[arg(long, value_delimiter = ',', num_args = 3)]
    miss_thresholds: Option<Vec<f64>>,
    #[arg(long)]
    displacement_threshold: Option<f64>,
    #[arg(long)]
    heading_threshold: Option<f64>,
    /// Final-displacement threshold of the multimodal miss rate
    #[arg(long)]
    mr_threshold: Option<f64>,
}

impl MetricsArgs {
    fn resolve(self) -> MetricsConfig {
        let d = MetricsConfig::default();
        MetricsConfig {
            miss_thresholds: self.miss_thresholds.map_or(d.miss_thresholds, |v| [v[0], v[1], v[2]]),
            displacement_threshold: self.displacement_threshold.unwrap_or(d.displacement_threshold),
            heading_threshold: self.heading_threshold.unwrap_or(d.heading_threshold),
            mr_threshold: self.mr_threshold.unwrap_or(d.mr_threshold),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Backbone,
    Diffusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    KpOrder,
    KpDecoder,
    Components,
    All,
}

fn dispatch(cmd: Command) -> error::Result<PathBuf> {
    match cmd {
        Command::GenData {
            count,
            templates,
            seed,
            vocab_size,
            out,
        } => commands::gen_data(commands::GenData {
            count,
            templates,
            seed,
            vocab_size,
            out,
        }),
        Command::Train {
            common,
            stage,
            data,
            init,
            gnuplot,
        } => commands::train(commands::Train {
            config: common.config,
            layer: common.layer,
            stage: match stage {
                StageArg::Backbone => Stage::Backbone,
                StageArg::Diffusion => Stage::Diffusion,
            },
            data,
            init,
            gnuplot,
            out: common.out,
        }),
        Command::Eval {
            common,
            checkpoint,
            data,
            flags,
            split,
            metrics,
        } => commands::eval(commands::Eval {
            checkpoint,
            data,
            flags,
            split,
            config: common.config,
            layer: common.layer,
            metrics: metrics.resolve(),
            out: common.out,
        }),
        Command::Sweep {
            common,
            presets,
            sizes,
            data,
            parallel_cells,
            gnuplot,
        } => commands::sweep(commands::Sweep {
            presets,
            sizes,
            data,
            parallel_cells,
            gnuplot,
            config: common.config,
            layer: common.layer,
            out: common.out,
        }),
        Command::Metrics { pred, gt, metrics, out } => commands::metrics(commands::Metrics {
            pred,
            gt,
            metrics: metrics.resolve(),
            out,
        }),
        Command::Ablate {
            common,
            axis,
            data,
            metrics,
        } => commands::ablate(commands::Ablate {
            axis: match axis {
                AxisArg::KpOrder => AblationAxis::KpOrder,
                AxisArg::KpDecoder => AblationAxis::KpDecoder,
                AxisArg::Components => AblationAxis::Components,
                AxisArg::All => AblationAxis::All,
            },
            data,
            config: common.config,
            layer: common.layer,
            metrics: metrics.resolve(),
            out: common.out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match dispatch(cli.command) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            ExitCode::from(exit::OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
