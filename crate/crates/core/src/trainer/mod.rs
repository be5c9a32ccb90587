//! Vanilla adversarial training and case-aware adversarial training.
//!
//! Both schemes run one [`Session`]: per iteration a batch is drawn, every
//! drawn example is attacked, and one SGD step is taken on the adversarial
//! batch. Under the case-aware scheme the batch is drawn by
//! [`BalancedSampler`] from the weight table, and the margins of the crafted
//! batch (before the parameter update) are folded back into the table.

mod metrics;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use metrics::{
    budget_to_reach, check_metrics, load_metrics_csv, read_metrics_csv, save_metrics_csv,
    write_metrics_csv, MetricsRecord, METRICS_HEADER,
};

use crate::attack::{craft, robust_accuracy, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng;
use crate::sampler::{information_gain, sample_with_rng, BalancedSampler, WeightTable};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    VanillaAt,
    Cat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub iterations: usize,
    /// Vanilla AT batch size.
    pub batch_size: usize,
    /// Examples drawn (and attacked) per case-aware iteration.
    pub sampling_number: usize,
    pub alpha: f64,
    /// Softmax temperature; may be `+∞` (stored as the string `"inf"`).
    #[serde(with = "extended_float")]
    pub temperature: f64,
    pub lr: f64,
    pub eval_every: usize,
    /// Held-out examples used per evaluation (taken from the front).
    pub eval_size: usize,
    /// Attack used to craft training batches.
    pub attack: AttackConfig,
    /// Attack used for robust accuracy; the training attack when absent.
    pub eval_attack: Option<AttackConfig>,
    /// Iterations over which the training ε (and step size) ramps up
    /// linearly from ε/warmup to ε; 0 trains at full ε from the start.
    #[serde(default)]
    pub epsilon_warmup: usize,
    /// Draw vanilla AT batches with the class-balanced planner (uniform weights).
    pub balance_classes: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Cat,
            iterations: 1000,
            batch_size: 128,
            sampling_number: 128,
            alpha: 0.5,
            temperature: 1.0,
            lr: 0.1,
            eval_every: 50,
            eval_size: 1000,
            attack: AttackConfig::default(),
            eval_attack: None,
            epsilon_warmup: 0,
            balance_classes: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(m.to_owned()));
        if self.batch_size == 0 || self.sampling_number == 0 {
            return fail("batch_size and sampling_number must be positive");
        }
        if self.eval_every == 0 || self.eval_size == 0 {
            return fail("eval_every and eval_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be finite and non-negative");
        }
        self.attack.validate()?;
        self.evaluation_attack().validate()
    }

    pub fn evaluation_attack(&self) -> &AttackConfig {
        self.eval_attack.as_ref().unwrap_or(&self.attack)
    }

    /// Training attack at iteration `t` (1-based), with the warm-up applied.
    pub fn training_attack(&self, t: u64) -> AttackConfig {
        let mut atk = self.attack.clone();
        if (t as usize) < self.epsilon_warmup {
            let f = t as f64 / self.epsilon_warmup as f64;
            atk.epsilon *= f;
            atk.step_size *= f;
        }
        atk
    }

    /// Examples attacked per iteration.
    pub fn examples_per_iteration(&self) -> usize {
        match self.scheme {
            Scheme::VanillaAt => self.batch_size,
            Scheme::Cat => self.sampling_number,
        }
    }
}

/// JSON has no infinities, so non-finite values travel as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Source of the `wall_seconds` column.
pub trait Clock {
    fn seconds(&self) -> f64;
}

pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        SystemClock(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Always reads zero; makes metric files reproducible byte for byte.
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// What one training iteration did.
#[derive(Clone, Debug)]
pub struct StepReport<S> {
    pub iteration: u64,
    pub indices: Vec<usize>,
    /// Mean adversarial loss of the batch before the update.
    pub loss: S,
    /// Margins folded into the weight table (case-aware scheme only).
    pub gains: Option<Vec<S>>,
}

/// An in-progress training run.
pub struct Session<'a, S> {
    cfg: TrainConfig,
    net: Network<S>,
    train: &'a Dataset<S>,
    eval_x: Tensor<S>,
    eval_y: Vec<usize>,
    sampler: Option<BalancedSampler>,
    table: Option<WeightTable<S>>,
    iteration: u64,
    crafted: u64,
    clock: Box<dyn Clock + 'a>,
    train_seconds: f64,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(net: Network<S>, train: &'a Dataset<S>, eval: &Dataset<S>, cfg: TrainConfig) -> Result<Self> {
        Self::with_clock(net, train, eval, cfg, Box::new(SystemClock::new()))
    }

    pub fn with_clock(
        net: Network<S>,
        train: &'a Dataset<S>,
        eval: &Dataset<S>,
        cfg: TrainConfig,
        clock: Box<dyn Clock + 'a>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.dim() != net.input_dim() || eval.dim() != net.input_dim() {
            return Err(Error::Dimension {
                op: "training data",
                left: vec![train.dim(), eval.dim()],
                right: vec![net.input_dim()],
            });
        }
        if train.num_classes() > net.num_classes() {
            return Err(Error::validation(format!(
                "dataset has {} classes, network outputs {}",
                train.num_classes(),
                net.num_classes()
            )));
        }
        let per_iter = cfg.examples_per_iteration();
        if per_iter > train.len() {
            return Err(Error::validation(format!(
                "{per_iter} examples per iteration exceeds training set of {}",
                train.len()
            )));
        }
        let balanced = cfg.scheme == Scheme::Cat || cfg.balance_classes;
        let sampler = if balanced {
            Some(BalancedSampler::new(train.labels(), train.num_classes())?)
        } else {
            None
        };
        let alpha = S::from_f64_lossy(cfg.alpha);
        let table = if balanced {
            Some(WeightTable::new(train.len(), alpha)?)
        } else {
            None
        };
        let (eval_x, eval_y) = eval.head(cfg.eval_size)?;
        Ok(Session {
            cfg,
            net,
            train,
            eval_x,
            eval_y,
            sampler,
            table,
            iteration: 0,
            crafted: 0,
            clock,
            train_seconds: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network<S> {
        &self.net
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn cumulative_crafted(&self) -> u64 {
        self.crafted
    }

    /// The case-aware weight table (`None` for vanilla AT).
    pub fn weights(&self) -> Option<&WeightTable<S>> {
        match self.cfg.scheme {
            Scheme::Cat => self.table.as_ref(),
            Scheme::VanillaAt => None,
        }
    }

    pub fn eval_set(&self) -> (&Tensor<S>, &[usize]) {
        (&self.eval_x, &self.eval_y)
    }

    fn draw(&self, t: u64) -> Result<Vec<usize>> {
        let seed = rng::derive_seed(self.cfg.seed, "sampling", &[t]);
        match (self.cfg.scheme, &self.sampler, &self.table) {
            (Scheme::Cat, Some(s), Some(table)) => {
                let tau = S::from_f64_lossy(self.cfg.temperature);
                Ok(s.plan(table, self.cfg.sampling_number, tau, seed)?.indices)
            }
            (Scheme::VanillaAt, Some(s), Some(uniform)) => {
                Ok(s.plan(uniform, self.cfg.batch_size, S::one(), seed)?.indices)
            }
            _ => {
                let n = self.train.len();
                let uniform = vec![S::one() / S::from_usize(n).expect("n fits"); n];
                let mut r = <rng::Rng as rand::SeedableRng>::seed_from_u64(seed);
                sample_with_rng(&uniform, self.cfg.batch_size, &mut r)
            }
        }
    }

    /// One iteration: draw, craft, update parameters, then update weights.
    pub fn step(&mut self) -> Result<StepReport<S>> {
        let started = self.clock.seconds();
        let t = self.iteration + 1;
        let indices = self.draw(t)?;
        let (x, y) = self.train.select(&indices)?;
        let attack_seed = rng::derive_seed(self.cfg.seed, "attack", &[t, self.cfg.attack.seed]);
        let atk = self.cfg.training_attack(t).with_seed(attack_seed);
        let crafted = craft(&self.net, &x, &y, &atk)?;
        let xa = crafted.adversarial_inputs(&x)?;
        let (report, grads) = self.net.loss_and_grads(&xa, &y, false, true)?;
        self.net.sgd_step(&grads, S::from_f64_lossy(self.cfg.lr))?;
        self.crafted += crafted.crafted_count as u64;

        let gains = if self.cfg.scheme == Scheme::Cat {
            let gains = information_gain(&crafted.adv_log_probs, &y)?;
            self.table
                .as_mut()
                .expect("case-aware table")
                .ema_update(&indices, &gains, t)?;
            Some(gains)
        } else {
            None
        };
        self.iteration = t;
        self.train_seconds += self.clock.seconds() - started;
        Ok(StepReport {
            iteration: t,
            indices,
            loss: report.mean_loss,
            gains,
        })
    }

    /// Natural and robust accuracy on the held-out subset.
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let natural_acc = self.net.accuracy(&self.eval_x, &self.eval_y)?;
        let atk = self.cfg.evaluation_attack();
        let seed = rng::derive_seed(self.cfg.seed, "eval-attack", &[atk.seed]);
        let robust_acc = robust_accuracy(&self.net, &self.eval_x, &self.eval_y, &atk.clone().with_seed(seed))?;
        Ok(MetricsRecord {
            iteration: self.iteration,
            natural_acc,
            robust_acc,
            cumulative_crafted: self.crafted,
            wall_seconds: self.train_seconds,
        })
    }

    /// Runs the configured number of iterations, evaluating every
    /// `eval_every` iterations.
    pub fn run(mut self) -> Result<(Network<S>, Vec<MetricsRecord>, Option<WeightTable<S>>)> {
        let mut records = Vec::new();
        while (self.iteration as usize) < self.cfg.iterations {
            self.step()?;
            if self.iteration.is_multiple_of(self.cfg.eval_every as u64) {
                records.push(self.evaluate()?);
            }
        }
        let table = match self.cfg.scheme {
            Scheme::Cat => self.table,
            Scheme::VanillaAt => None,
        };
        Ok((self.net, records, table))
    }
}

fn require_scheme(cfg: &TrainConfig, scheme: Scheme) -> Result<()> {
    if cfg.scheme != scheme {
        return Err(Error::validation(format!(
            "expected scheme {scheme:?}, config says {:?}",
            cfg.scheme
        )));
    }
    Ok(())
}

/// Vanilla adversarial training: uniform batches, every example attacked.
pub fn train_vanilla_at<S: Scalar>(
    net: Network<S>,
    train: &Dataset<S>,
    eval: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<(Network<S>, Vec<MetricsRecord>)> {
    require_scheme(cfg, Scheme::VanillaAt)?;
    let (net, records, _) = Session::new(net, train, eval, cfg.clone())?.run()?;
    Ok((net, records))
}

/// Case-aware adversarial training.
pub fn train_cat<S: Scalar>(
    net: Network<S>,
    train: &Dataset<S>,
    eval: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<(Network<S>, Vec<MetricsRecord>, WeightTable<S>)> {
    require_scheme(cfg, Scheme::Cat)?;
    let (net, records, table) = Session::new(net, train, eval, cfg.clone())?.run()?;
    Ok((net, records, table.expect("case-aware runs keep a table")))
}

/// Softmax outputs of `net` on its own adversarial examples for `x`.
pub fn adversarial_probabilities<S: Scalar>(
    net: &Network<S>,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<S>> {
    Ok(craft(net, x, y, cfg)?.adv_log_probs.map(|v| v.exp()))
}

/// Mean over rows of the cosine similarity of `a` and `b`; a zero row
/// contributes 0.
pub fn mean_cosine_similarity<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "cosine similarity",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let rows = a.rows();
    let mut total = 0.0;
    for i in 0..rows {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&p, &q) in a.row(i).iter().zip(b.row(i)) {
            let (p, q) = (p.to_f64().unwrap_or(0.0), q.to_f64().unwrap_or(0.0));
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
        let denom = (na * nb).sqrt();
        if denom > 0.0 {
            total += (dot / denom).clamp(-1.0, 1.0);
        }
    }
    Ok(total / rows as f64)
}

/// Attacks `x` against each network separately and compares the resulting
/// prediction vectors.
pub fn neighbor_cosine_similarity<S: Scalar>(
    net_t: &Network<S>,
    net_t1: &Network<S>,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<f64> {
    if net_t.specs() != net_t1.specs() || net_t.input_shape() != net_t1.input_shape() {
        return Err(Error::validation("networks do not share an architecture"));
    }
    let a = adversarial_probabilities(net_t, x, y, cfg)?;
    let b = adversarial_probabilities(net_t1, x, y, cfg)?;
    mean_cosine_similarity(&a, &b)
}
