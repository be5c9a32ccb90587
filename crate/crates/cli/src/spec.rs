//! Resolved run descriptions and the config-file merge.

use std::path::{Path, PathBuf};

use cat_core::{AttackConfig, Scheme, StepVariant, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::args::{ArchArg, CommonArgs, DatasetArg, SchemeArg, VariantArg};
use crate::CliError;

pub const DEFAULT_SAMPLING_NUMBERS: [usize; 4] = [128, 256, 512, 1024];
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Every key a config file may contain, merged with command-line flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Settings {
    #[serde(flatten)]
    pub common: CommonArgs,
    pub sampling_numbers: Option<Vec<usize>>,
    pub thresholds: Option<Vec<f64>>,
    pub natural_threshold: Option<f64>,
    pub parallel: Option<bool>,
    pub checkpoints: Option<usize>,
    pub examples: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl Settings {
    /// Reads `config` (if any) and overlays every flag that was given.
    pub fn merge(config: Option<&Path>, flags: &impl Serialize) -> Result<Settings, CliError> {
        let mut base = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                match serde_json::from_str(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
                    Err(e) => return Err(CliError::Usage(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        let known = match serde_json::to_value(Settings::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("settings serialize to an object"),
        };
        if let Some(key) = base.keys().find(|k| !known.contains_key(*k)) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        if let Ok(Value::Object(flags)) = serde_json::to_value(flags) {
            base.extend(flags.into_iter().filter(|(_, v)| !v.is_null()));
        }
        serde_json::from_value(Value::Object(base)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Training files for training, test files for evaluation.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Gaussian blobs split into train and eval sets.
    Blobs {
        n: usize,
        k: usize,
        d: usize,
        spread: f64,
        eval_fraction: f64,
    },
}

impl DatasetSpec {
    fn paths(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![train_images, train_labels, test_images, test_labels],
            DatasetSpec::Blobs { .. } => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    Mlp { hidden: Vec<usize> },
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum CommandSpec {
    Train,
    Sweep {
        sampling_numbers: Vec<usize>,
        thresholds: Vec<f64>,
        natural_threshold: f64,
        parallel: bool,
    },
    Fig1 {
        checkpoints: usize,
        examples: usize,
    },
    Eval {
        checkpoint: PathBuf,
    },
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    #[serde(flatten)]
    pub command: CommandSpec,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub frozen_clock: bool,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub version: String,
    pub spec: RunSpec,
}

impl RunSpec {
    /// Fills unspecified settings with defaults and validates the result.
    pub fn resolve(kind: &str, s: Settings) -> Result<RunSpec, CliError> {
        let c = s.common;
        let dataset_kind = c.dataset.unwrap_or(DatasetArg::Mnist);
        let dataset = match dataset_kind {
            DatasetArg::Mnist => {
                let dir = c.mnist_dir.unwrap_or_else(|| PathBuf::from("data/mnist"));
                let [a, b, t, u] = MNIST_FILES.map(|f| dir.join(f));
                DatasetSpec::Mnist {
                    train_images: a,
                    train_labels: b,
                    test_images: t,
                    test_labels: u,
                }
            }
            DatasetArg::Blobs => DatasetSpec::Blobs {
                n: c.n.unwrap_or(2000),
                k: c.k.unwrap_or(2),
                d: c.d.unwrap_or(2),
                spread: c.spread.unwrap_or(0.05),
                eval_fraction: c.eval_fraction.unwrap_or(0.2),
            },
        };
        let model = match c.arch.unwrap_or(ArchArg::Mlp) {
            ArchArg::Mlp => ModelSpec::Mlp {
                hidden: c.hidden.unwrap_or_else(|| vec![256, 128]),
            },
            ArchArg::Cnn if dataset_kind == DatasetArg::Blobs => {
                return Err(CliError::Usage("the convolutional model needs image data (mnist)".into()))
            }
            ArchArg::Cnn => ModelSpec::Cnn,
        };

        let mnist = dataset_kind == DatasetArg::Mnist;
        let epsilon = c.epsilon.unwrap_or(if mnist { 0.3 } else { 0.1 });
        let steps = c.steps.unwrap_or(20);
        let restarts = c.restarts.unwrap_or(10);
        let mut attack = AttackConfig::pgd(epsilon, steps, restarts);
        if let Some(step) = c.step_size {
            attack.step_size = step;
        }
        if c.variant == Some(VariantArg::RawGradient) {
            attack.variant = StepVariant::RawGradient;
        }
        let eval_attack = if c.eval_steps.is_some() || c.eval_restarts.is_some() {
            let mut e = attack.clone();
            e.num_steps = c.eval_steps.unwrap_or(steps);
            e.num_restarts = c.eval_restarts.unwrap_or(restarts);
            Some(e)
        } else {
            None
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            scheme: match c.scheme.unwrap_or(SchemeArg::Cat) {
                SchemeArg::Cat => Scheme::Cat,
                SchemeArg::VanillaAt => Scheme::VanillaAt,
            },
            iterations: c.iters.unwrap_or(defaults.iterations),
            batch_size: c.batch_size.unwrap_or(defaults.batch_size),
            sampling_number: c.sampling_number.unwrap_or(defaults.sampling_number),
            alpha: c.alpha.unwrap_or(defaults.alpha),
            temperature: c.temperature.map_or(defaults.temperature, |t| t.0),
            lr: c.lr.unwrap_or(if mnist { 0.1 } else { 0.01 }),
            eval_every: c.eval_every.unwrap_or(defaults.eval_every),
            eval_size: c.eval_size.unwrap_or(defaults.eval_size),
            attack,
            eval_attack,
            epsilon_warmup: c.epsilon_warmup.unwrap_or(0),
            balance_classes: c.balance_classes.unwrap_or(false),
            seed: c.seed.unwrap_or(0),
        };
        train.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let command = match kind {
            "train" => CommandSpec::Train,
            "sweep" => {
                let sampling_numbers = s.sampling_numbers.unwrap_or_else(|| DEFAULT_SAMPLING_NUMBERS.to_vec());
                let mut thresholds = s.thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
                if sampling_numbers.is_empty() || sampling_numbers.contains(&0) {
                    return Err(CliError::Usage("sampling numbers must be a nonempty list of positive integers".into()));
                }
                if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(CliError::Usage("thresholds must be a nonempty list of values in [0, 1]".into()));
                }
                thresholds.sort_by(f64::total_cmp);
                thresholds.dedup();
                CommandSpec::Sweep {
                    sampling_numbers,
                    thresholds,
                    natural_threshold: s.natural_threshold.unwrap_or(0.0),
                    parallel: s.parallel.unwrap_or(false),
                }
            }
            "fig1" => {
                let checkpoints = s.checkpoints.unwrap_or(11);
                if checkpoints < 2 {
                    return Err(CliError::Usage("fig1 needs at least 2 checkpoints".into()));
                }
                if train.iterations < checkpoints - 1 {
                    return Err(CliError::Usage(format!(
                        "{} iterations cannot hold {checkpoints} distinct checkpoints",
                        train.iterations
                    )));
                }
                let examples = s.examples.unwrap_or(1000);
                if examples == 0 {
                    return Err(CliError::Usage("fig1 needs at least one example".into()));
                }
                CommandSpec::Fig1 { checkpoints, examples }
            }
            "eval" => CommandSpec::Eval {
                checkpoint: s
                    .checkpoint
                    .ok_or_else(|| CliError::Usage("eval needs --checkpoint".into()))?,
            },
            other => return Err(CliError::Usage(format!("unknown command {other}"))),
        };

        Ok(RunSpec {
            command,
            dataset,
            model,
            train,
            frozen_clock: c.frozen_clock.unwrap_or(false),
            output_dir: c.out.unwrap_or_else(|| PathBuf::from("cat-out")),
        })
    }

    /// Input files that must exist before the run starts.
    pub fn required_paths(&self) -> Vec<&Path> {
        let mut p = self.dataset.paths();
        if let CommandSpec::Eval { checkpoint } = &self.command {
            p.push(checkpoint);
        }
        p
    }

    pub fn check_paths(&self) -> Result<(), CliError> {
        match self.required_paths().into_iter().find(|p| !p.is_file()) {
            Some(p) => Err(CliError::Runtime(format!("input file not found: {}", p.display()))),
            None => Ok(()),
        }
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn run_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run spec serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            run_id: self.run_id(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            spec: self.clone(),
        }
    }
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}
