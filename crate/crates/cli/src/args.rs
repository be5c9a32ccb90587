//! Command-line surface. Every flag has a same-named key in the JSON config.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Parser)]
#[command(name = "cat", version, about = "Case-aware adversarial training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes metrics.csv, manifest.json and checkpoint.catn.
    Train(TrainArgs),
    /// Case-aware runs over several sampling numbers plus a crafting-budget summary.
    Sweep(SweepArgs),
    /// Train with checkpoints and compare adversarial predictions of neighbouring checkpoints.
    Fig1(Fig1Args),
    /// Natural and robust accuracy of a saved checkpoint.
    Eval(EvalArgs),
    /// Execute the run described by a manifest.json again.
    Rerun {
        /// Manifest written by an earlier run.
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    #[value(name = "vanilla_at", alias = "at")]
    #[serde(alias = "at")]
    VanillaAt,
    Cat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetArg {
    Mnist,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchArg {
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    #[value(name = "sign_step")]
    SignStep,
    #[value(name = "raw_gradient")]
    RawGradient,
}

/// A float that may be `inf`; JSON carries non-finite values as strings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtFloat(pub f64);

impl FromStr for ExtFloat {
    type Err = std::num::ParseFloatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ExtFloat)
    }
}

impl fmt::Display for ExtFloat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Serialize for ExtFloat {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for ExtFloat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(ExtFloat(v)),
            Repr::Text(t) => t.parse().map(ExtFloat).map_err(serde::de::Error::custom),
        }
    }
}

/// Flags shared by every training command.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
pub struct CommonArgs {
    /// JSON file supplying any subset of these flags; flags given here win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Blob dataset size.
    #[arg(long)]
    pub n: Option<usize>,
    /// Blob class count.
    #[arg(long)]
    pub k: Option<usize>,
    /// Blob feature dimension.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    /// Fraction of the blob dataset held out for evaluation.
    #[arg(long)]
    pub eval_fraction: Option<f64>,

    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Hidden layer widths of the MLP, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,

    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub sampling_number: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sampling temperature; `inf` gives uniform sampling.
    #[arg(long)]
    pub temperature: Option<ExtFloat>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub balance_classes: Option<bool>,

    #[arg(long)]
    pub epsilon: Option<f64>,
    /// PGD step size; a quarter of epsilon when omitted.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// PGD steps of the evaluation attack (training attack when omitted).
    #[arg(long)]
    pub eval_steps: Option<usize>,
    #[arg(long)]
    pub eval_restarts: Option<usize>,
    /// Iterations over which the training epsilon ramps up linearly.
    #[arg(long)]
    pub epsilon_warmup: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record zero wall-clock time so metric files are reproducible byte for byte.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub frozen_clock: Option<bool>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub sampling_numbers: Option<Vec<usize>>,
    /// Robust-accuracy targets reported in summary.csv.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Natural accuracy that must also be reached for a threshold to count.
    #[arg(long)]
    pub natural_threshold: Option<f64>,
    /// Run the sampling numbers as concurrent child processes.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct Fig1Args {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Checkpoints kept, evenly spaced from iteration 0.
    #[arg(long)]
    pub checkpoints: Option<usize>,
    /// Training examples whose adversarial predictions are compared.
    #[arg(long)]
    pub examples: Option<usize>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}
