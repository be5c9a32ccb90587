//! Case-aware batch construction.
//!
//! Each example carries a weight: an exponential moving average of its
//! adversarial margin (the best wrong-class log-probability minus the true
//! class log-probability). Batches are drawn class by class, without
//! replacement, with probabilities given by a tempered softmax over the
//! weights.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Margin of each row: `max_{k≠y} log p_k − log p_y`.
///
/// Positive means the row is misclassified; negative means it is classified
/// correctly with room to spare.
pub fn information_gain<S: Scalar>(log_probs: &Tensor<S>, y: &[usize]) -> Result<Vec<S>> {
    let k = log_probs.row_len();
    if k < 2 || log_probs.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "information_gain",
            left: log_probs.shape().to_vec(),
            right: vec![y.len(), 2],
        });
    }
    if log_probs.rows() != y.len() {
        return Err(Error::Dimension {
            op: "information_gain",
            left: log_probs.shape().to_vec(),
            right: vec![y.len(), k],
        });
    }
    y.iter()
        .enumerate()
        .map(|(i, &label)| {
            if label >= k {
                return Err(Error::validation(format!(
                    "label {label} at index {i} is outside [0, {k})"
                )));
            }
            let row = log_probs.row(i);
            let other = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != label)
                .fold(S::neg_infinity(), |m, (_, &v)| m.max(v));
            Ok(other - row[label])
        })
        .collect()
}

/// Per-example sampling weights with their moving-average coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable<S> {
    weights: Vec<S>,
    alpha: S,
    /// Iteration that last selected each example; 0 means never.
    last_selected_iter: Vec<u64>,
}

impl<S: Scalar> WeightTable<S> {
    /// Every weight starts at 1.
    pub fn new(n: usize, alpha: S) -> Result<Self> {
        if !(alpha >= S::zero() && alpha <= S::one()) {
            return Err(Error::validation(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(WeightTable {
            weights: vec![S::one(); n],
            alpha,
            last_selected_iter: vec![0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn last_selected_iter(&self) -> &[u64] {
        &self.last_selected_iter
    }

    /// `w ← α·w + (1−α)·gain` for the selected examples; others keep their
    /// weight bit for bit.
    pub fn ema_update(&mut self, selected: &[usize], gains: &[S], iteration: u64) -> Result<()> {
        if selected.len() != gains.len() {
            return Err(Error::Dimension {
                op: "ema_update",
                left: vec![selected.len()],
                right: vec![gains.len()],
            });
        }
        let mut seen = vec![false; self.weights.len()];
        for &i in selected {
            if i >= self.weights.len() {
                return Err(Error::validation(format!(
                    "index {i} outside weight table of {}",
                    self.weights.len()
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::validation(format!("duplicate index {i} in selection")));
            }
        }
        if let Some(g) = gains.iter().find(|g| !g.is_finite()) {
            return Err(Error::validation(format!("non-finite gain {g}")));
        }
        let keep = self.alpha;
        let take = S::one() - self.alpha;
        for (&i, &g) in selected.iter().zip(gains) {
            self.weights[i] = keep * self.weights[i] + take * g;
            self.last_selected_iter[i] = iteration;
        }
        Ok(())
    }

    /// CSV with columns `index,weight,last_selected_iter`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "weight", "last_selected_iter"])?;
        for (i, (wt, it)) in self.weights.iter().zip(&self.last_selected_iter).enumerate() {
            w.write_record([i.to_string(), wt.to_string(), it.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("weight table csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Tempered softmax `exp(w/τ) / Σ exp(w/τ)` with max subtraction.
///
/// `τ = +∞` yields the uniform distribution.
pub fn weights_to_probs<S: Scalar>(weights: &[S], temperature: S) -> Result<Vec<S>> {
    if !(temperature > S::zero()) {
        return Err(Error::validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = weights.iter().fold(S::neg_infinity(), |m, &w| m.max(w));
    let mut p: Vec<S> = weights
        .iter()
        .map(|&w| ((w - max) / temperature).exp())
        .collect();
    let total: S = p.iter().copied().sum();
    for v in &mut p {
        *v = *v / total;
    }
    Ok(p)
}

/// Draws `k` distinct indices; the order is the order of successive draws
/// where each draw is proportional to the remaining probability mass.
///
/// Uses exponential keys `−ln(u)/p`: the `k` smallest keys, ascending.
pub fn sample_without_replacement<S: Scalar>(probs: &[S], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut r = rng::stream(seed, "without-replacement", &[]);
    sample_with_rng(probs, k, &mut r)
}

pub(crate) fn sample_with_rng<S: Scalar>(probs: &[S], k: usize, r: &mut rng::Rng) -> Result<Vec<usize>> {
    let n = probs.len();
    if k > n {
        return Err(Error::validation(format!(
            "cannot draw {k} distinct items from {n}"
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= S::zero() && p.is_finite())) {
        return Err(Error::validation(format!("invalid probability {p}")));
    }
    let mut keys: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            // u ∈ (0, 1]
            let u = 1.0 - r.random::<f64>();
            let p = p.to_f64().unwrap_or(0.0);
            let key = if p > 0.0 { -u.ln() / p } else { f64::INFINITY };
            (key, i)
        })
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < n {
        keys.select_nth_unstable_by(k - 1, cmp);
        keys.truncate(k);
    }
    keys.sort_unstable_by(cmp);
    Ok(keys.into_iter().map(|(_, i)| i).collect())
}

/// Indices chosen for one iteration and how many came from each class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub per_class_quota: BTreeMap<usize, usize>,
}

/// Class membership lists, built once per dataset.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    members: Vec<Vec<usize>>,
    n: usize,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::validation(format!(
                    "label {l} at index {i} is outside [0, {num_classes})"
                )));
            }
            members[l].push(i);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::validation(format!("class {c} has no examples")));
        }
        Ok(BalancedSampler {
            members,
            n: labels.len(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    /// Splits `batch` slots over classes: equal shares, capped by class size,
    /// with any indivisible remainder going one slot each to the classes of
    /// largest softmax weight mass (lowest class index on ties).
    pub fn quotas(&self, masses: &[f64], batch: usize) -> Result<Vec<usize>> {
        if batch > self.n {
            return Err(Error::validation(format!(
                "batch of {batch} exceeds dataset size {}",
                self.n
            )));
        }
        let cap: Vec<usize> = self.members.iter().map(Vec::len).collect();
        let mut quota = vec![0usize; cap.len()];
        let mut remaining = batch;
        while remaining > 0 {
            let open: Vec<usize> = (0..cap.len()).filter(|&c| quota[c] < cap[c]).collect();
            let share = remaining / open.len();
            if share > 0 {
                for &c in &open {
                    let add = share.min(cap[c] - quota[c]);
                    quota[c] += add;
                    remaining -= add;
                }
            } else {
                let mut order = open;
                order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
                for &c in order.iter().take(remaining) {
                    quota[c] += 1;
                }
                remaining = 0;
            }
        }
        Ok(quota)
    }

    /// Class-balanced weighted draw without replacement.
    pub fn plan<S: Scalar>(
        &self,
        table: &WeightTable<S>,
        batch: usize,
        temperature: S,
        seed: u64,
    ) -> Result<BatchPlan> {
        if table.len() != self.n {
            return Err(Error::Dimension {
                op: "plan_balanced_batch",
                left: vec![table.len()],
                right: vec![self.n],
            });
        }
        if !(temperature > S::zero()) {
            return Err(Error::validation(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let w = table.weights();
        let global_max = w.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let masses: Vec<f64> = self
            .members
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&i| ((w[i] - global_max) / temperature).exp().to_f64().unwrap_or(0.0))
                    .sum()
            })
            .collect();
        let quota = self.quotas(&masses, batch)?;
        let mut indices = Vec::with_capacity(batch);
        let mut per_class_quota = BTreeMap::new();
        for (c, members) in self.members.iter().enumerate() {
            per_class_quota.insert(c, quota[c]);
            if quota[c] == 0 {
                continue;
            }
            let class_w: Vec<S> = members.iter().map(|&i| w[i]).collect();
            let probs = weights_to_probs(&class_w, temperature)?;
            let mut r = rng::stream(seed, "class-draw", &[c as u64]);
            let picks = sample_with_rng(&probs, quota[c], &mut r)?;
            indices.extend(picks.into_iter().map(|j| members[j]));
        }
        Ok(BatchPlan {
            indices,
            per_class_quota,
        })
    }
}

/// One-shot form of [`BalancedSampler::plan`].
pub fn plan_balanced_batch<S: Scalar>(
    table: &WeightTable<S>,
    labels: &[usize],
    batch: usize,
    num_classes: usize,
    temperature: S,
    seed: u64,
) -> Result<BatchPlan> {
    BalancedSampler::new(labels, num_classes)?.plan(table, batch, temperature, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(&[p.iter().map(|v| v.ln()).collect::<Vec<_>>()]).unwrap()
    }

    #[test]
    fn gain_examples() {
        let u = information_gain(&row(&[1.0 / 3.0; 3]), &[1]).unwrap();
        assert!(u[0].abs() < 1e-15);
        let g = information_gain(&row(&[0.7, 0.2, 0.1]), &[0]).unwrap();
        assert!((g[0] - (-1.252_762_968_495_368)).abs() < 1e-12);
        let g = information_gain(&row(&[0.1, 0.6, 0.3]), &[0]).unwrap();
        assert!((g[0] - 1.791_759_469_228_055).abs() < 1e-12);
        assert!(information_gain(&row(&[0.5, 0.5]), &[2]).is_err());
    }

    #[test]
    fn ema_rules() {
        let mut t = WeightTable::new(3, 0.5).unwrap();
        t.ema_update(&[1], &[0.0], 1).unwrap();
        assert_eq!(t.weights(), &[1.0, 0.5, 1.0]);
        assert_eq!(t.last_selected_iter(), &[0, 1, 0]);
        let mut frozen = WeightTable::new(2, 1.0).unwrap();
        frozen.ema_update(&[0, 1], &[7.0, -3.0], 4).unwrap();
        assert_eq!(frozen.weights(), &[1.0, 1.0]);
        assert!(t.ema_update(&[0, 0], &[1.0, 1.0], 2).is_err());
        assert!(t.ema_update(&[0], &[1.0, 1.0], 2).is_err());
        assert!(WeightTable::<f64>::new(2, 1.5).is_err());
    }

    #[test]
    fn probs_examples() {
        let p = weights_to_probs(&[2.0f64; 4], 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = weights_to_probs(&[-1.0f64, 0.0, 1.0, 2.0], 1e6).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let p = weights_to_probs(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = weights_to_probs(&[-3.0, 4.0], f64::INFINITY).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(weights_to_probs(&[1.0], 0.0).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut perm = sample_without_replacement(&[0.1, 0.2, 0.3, 0.4], 4, 3).unwrap();
        perm.sort();
        assert_eq!(perm, vec![0, 1, 2, 3]);
        assert_eq!(sample_without_replacement(&[0.0, 1.0, 0.0], 1, 9).unwrap(), vec![1]);
        assert!(sample_without_replacement(&[0.5, 0.5], 3, 0).is_err());
        let a = sample_without_replacement(&[0.25; 4], 2, 42).unwrap();
        assert_eq!(a, sample_without_replacement(&[0.25; 4], 2, 42).unwrap());
    }

    #[test]
    fn quota_examples() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let table = WeightTable::new(100, 0.5).unwrap();
        let plan = plan_balanced_batch(&table, &labels, 10, 10, 1.0, 1).unwrap();
        assert!(plan.per_class_quota.values().all(|&q| q == 1));
        assert_eq!(plan.indices.len(), 10);

        let mut table = WeightTable::new(100, 0.0).unwrap();
        // make classes 7 and 3 the heaviest
        let heavy: Vec<usize> = (0..100).filter(|i| i % 10 == 7 || i % 10 == 3).collect();
        let gains: Vec<f64> = heavy.iter().map(|&i| if i % 10 == 7 { 4.0 } else { 3.0 }).collect();
        table.ema_update(&heavy, &gains, 1).unwrap();
        let plan = plan_balanced_batch(&table, &labels, 12, 10, 1.0, 1).unwrap();
        let twos: Vec<usize> = plan
            .per_class_quota
            .iter()
            .filter(|(_, &q)| q == 2)
            .map(|(&c, _)| c)
            .collect();
        assert_eq!(twos, vec![3, 7]);
        for &i in &plan.indices {
            assert!(plan.indices.iter().filter(|&&j| j == i).count() == 1);
        }
    }

    #[test]
    fn small_classes_give_everything_and_shortfall_moves() {
        // class 0 has 2 members, class 1 has 10, class 2 has 10
        let mut labels = vec![0, 0];
        labels.extend(std::iter::repeat_n(1, 10));
        labels.extend(std::iter::repeat_n(2, 10));
        let table = WeightTable::new(labels.len(), 0.5).unwrap();
        let plan = plan_balanced_batch(&table, &labels, 12, 3, 1.0, 5).unwrap();
        assert_eq!(plan.per_class_quota[&0], 2);
        assert_eq!(plan.per_class_quota[&1], 5);
        assert_eq!(plan.per_class_quota[&2], 5);
        assert!(plan_balanced_batch(&table, &labels, 23, 3, 1.0, 5).is_err());
        let err = plan_balanced_batch(&table, &labels, 4, 4, 1.0, 5).unwrap_err();
        assert!(err.to_string().contains("class 3"));
    }

    #[test]
    fn weight_csv_layout() {
        let mut t = WeightTable::new(2, 0.5).unwrap();
        t.ema_update(&[1], &[2.0], 3).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,weight,last_selected_iter\n0,1,0\n1,1.5,3\n"
        );
    }
}
