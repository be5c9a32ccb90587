//! ℓ∞ projected gradient attack with restarts.
//!
//! Every iterate visited (including the all-zero start of restart 0 and the
//! random start of later restarts) is a candidate; per example the candidate
//! with the highest loss wins, earliest on ties. The returned loss is
//! therefore never below the clean loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Reduction};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{clamp, sign, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVariant {
    /// `δ ← δ + step·sign(∇δ L)`
    SignStep,
    /// `δ ← δ + step·∇δ L`, with each example's own loss gradient.
    RawGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub num_steps: usize,
    pub num_restarts: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub variant: StepVariant,
    pub seed: u64,
}

impl Default for AttackConfig {
    /// PGD-20 with 10 restarts at ε = 0.3 on `[0, 1]` inputs.
    fn default() -> Self {
        Self::pgd(0.3, 20, 10)
    }
}

impl AttackConfig {
    /// Sign-step PGD with step ε/4 on `[0, 1]` inputs.
    pub fn pgd(epsilon: f64, num_steps: usize, num_restarts: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            num_steps,
            num_restarts,
            clip_lo: 0.0,
            clip_hi: 1.0,
            variant: StepVariant::SignStep,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `ε = 0` is accepted as the degenerate ball; the step-size bound only
    /// applies when `ε > 0`.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return fail(format!("step size must be positive, got {}", self.step_size));
        }
        if self.epsilon > 0.0 && self.step_size > 2.0 * self.epsilon {
            return fail(format!(
                "step size {} exceeds 2·epsilon = {}",
                self.step_size,
                2.0 * self.epsilon
            ));
        }
        if self.num_steps == 0 || self.num_restarts == 0 {
            return fail("num_steps and num_restarts must be positive".into());
        }
        if !(self.clip_lo < self.clip_hi) {
            return fail(format!(
                "clip bounds must satisfy lo < hi, got [{}, {}]",
                self.clip_lo, self.clip_hi
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<S> {
    pub delta: Tensor<S>,
    /// Log-probabilities at `x + delta`.
    pub adv_log_probs: Tensor<S>,
    pub adv_loss: Vec<S>,
    /// Loss at `δ = 0`.
    pub clean_loss: Vec<S>,
    /// Examples crafted (the batch size).
    pub crafted_count: usize,
}

impl<S: Scalar> AttackResult<S> {
    pub fn adversarial_inputs(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.add(&self.delta)
    }
}

/// Elementwise clamp of `delta` into `[−ε, ε]`.
pub fn project_linf<S: Scalar>(delta: &Tensor<S>, epsilon: S) -> Tensor<S> {
    delta.clamp(-epsilon, epsilon)
}

/// Keeps `x + d` inside `[lo, hi]` after the subtraction `d = clip(x + d) − x`
/// has been rounded.
fn clip_offset<S: Scalar>(x: S, d: S, lo: S, hi: S) -> S {
    let mut d = clamp(x + d, lo, hi) - x;
    let nudge = S::epsilon() * (x.abs() + d.abs()).max(S::min_positive_value());
    while x + d > hi {
        d = d - nudge;
    }
    while x + d < lo {
        d = d + nudge;
    }
    d
}

/// PGD against `net` for a labelled batch.
pub fn craft<S: Scalar>(
    net: &Network<S>,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult<S>> {
    cfg.validate()?;
    let eps = S::from_f64_lossy(cfg.epsilon);
    let step = S::from_f64_lossy(cfg.step_size);
    let lo = S::from_f64_lossy(cfg.clip_lo);
    let hi = S::from_f64_lossy(cfg.clip_hi);
    if x.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "craft",
            left: x.shape().to_vec(),
            right: vec![0, net.input_dim()],
        });
    }
    if let Some(v) = x.as_slice().iter().find(|&&v| !(v >= lo && v <= hi)) {
        return Err(Error::validation(format!(
            "input value {v} outside clip bounds [{lo}, {hi}]"
        )));
    }
    let batch = x.rows();
    let dim = x.row_len();
    let k = net.num_classes();

    let mut best_delta = Tensor::zeros(x.shape().to_vec())?;
    let mut best_logp = Tensor::zeros(vec![batch, k])?;
    let mut best_loss = vec![S::neg_infinity(); batch];
    let mut clean_loss = Vec::new();

    for restart in 0..cfg.num_restarts {
        let mut delta = Tensor::zeros(x.shape().to_vec())?;
        if restart > 0 && cfg.epsilon > 0.0 {
            for i in 0..batch {
                let mut r = rng::stream(cfg.seed, "pgd-restart", &[i as u64, restart as u64]);
                let xr = x.row(i);
                for (d, &xv) in delta.row_mut(i).iter_mut().zip(xr) {
                    let u: f64 = rand::Rng::random_range(&mut r, -cfg.epsilon..=cfg.epsilon);
                    *d = clip_offset(xv, S::from_f64_lossy(u), lo, hi);
                }
            }
        }
        for j in 0..=cfg.num_steps {
            let last = j == cfg.num_steps;
            let xa = x.add(&delta)?;
            let (report, grads) = net.loss_and_grads_with(&xa, y, Reduction::Sum, !last, false)?;
            if restart == 0 && j == 0 {
                clean_loss = report.per_example_loss.clone();
            }
            for (i, &loss) in report.per_example_loss.iter().enumerate() {
                if loss > best_loss[i] {
                    best_loss[i] = loss;
                    best_delta.row_mut(i).copy_from_slice(delta.row(i));
                    best_logp.row_mut(i).copy_from_slice(report.log_probs.row(i));
                }
            }
            if last {
                break;
            }
            let g = grads.by_input.expect("input gradient requested");
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    restart,
                    step: j + 1,
                });
            }
            for i in 0..batch {
                let xr = x.row(i);
                let gr = g.row(i);
                let dr = delta.row_mut(i);
                for c in 0..dim {
                    let dir = match cfg.variant {
                        StepVariant::SignStep => sign(gr[c]),
                        StepVariant::RawGradient => gr[c],
                    };
                    let moved = clamp(dr[c] + step * dir, -eps, eps);
                    dr[c] = clip_offset(xr[c], moved, lo, hi);
                }
            }
        }
    }

    Ok(AttackResult {
        delta: best_delta,
        adv_log_probs: best_logp,
        adv_loss: best_loss,
        clean_loss,
        crafted_count: batch,
    })
}

/// Accuracy on `x + craft(..).delta`.
pub fn robust_accuracy<S: Scalar>(
    net: &Network<S>,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<f64> {
    let res = craft(net, x, y, cfg)?;
    net.accuracy(&res.adversarial_inputs(x)?, y)
}
