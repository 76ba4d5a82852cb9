use std::path::PathBuf;

use algm_core::calibrate::Scope;
use algm_core::merge::MergeOp;
use algm_core::vit::Mode;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "algm", version, about = "Adaptive local-then-global token merging for plain ViT encoders")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// TMW1 weight file; overrides the configuration's `weights`.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Existing output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Seed for merging, random weights and synthetic data where the
    /// configuration does not fix one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Calibration JSON whose thresholds replace the configured ones.
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderCostArg {
    LinearHead,
    MaskTransformer,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write random weights to `<out>/weights.tmw` and list the tensors.
    Init,
    /// Derive similarity thresholds from baseline passes.
    Calibrate {
        #[arg(long)]
        scope: Option<Scope>,
    },
    /// Intra/inter-class similarity curves.
    Analyze {
        /// Window sizes for the local curve, comma separated.
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
    },
    /// Forward passes with predictions, token schedules and MAC counts.
    Run {
        #[arg(long)]
        mode: Option<Mode>,
        /// Threshold for both merge sites.
        #[arg(long, allow_negative_numbers = true)]
        tau: Option<f32>,
        #[arg(long, allow_negative_numbers = true)]
        tau_clap: Option<f32>,
        #[arg(long, allow_negative_numbers = true)]
        tau_gbm: Option<f32>,
        #[arg(long)]
        merge_op: Option<MergeOp>,
        #[arg(long, value_enum)]
        decoder_cost: Option<DecoderCostArg>,
    },
    /// Fidelity and cost over a descending list of thresholds.
    Sweep {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        taus: Vec<f32>,
        /// Fidelity the reported best threshold must reach.
        #[arg(long)]
        floor: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        tau_clap: Option<f32>,
        #[arg(long, allow_negative_numbers = true)]
        tau_gbm: Option<f32>,
    },
    /// Throughput over batches of duplicated images.
    Bench {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
}
