#![allow(dead_code)]

use cat_core::nn::ParamId;
use cat_core::{Network, Tensor};

/// Mean cross-entropy, recomputed through the public API only.
pub fn mean_loss(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    net.loss_and_grads(x, y, false, false).unwrap().0.mean_loss
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central-difference gradient of the mean loss w.r.t. every parameter entry.
pub fn fd_param_grads(net: &Network, x: &Tensor, y: &[usize], h: f64) -> Vec<(ParamId, Vec<f64>)> {
    let ids: Vec<ParamId> = net.params().iter().map(|(id, _)| *id).collect();
    let mut out = Vec::new();
    for id in ids {
        let len = net.param(id).unwrap().len();
        let mut g = Vec::with_capacity(len);
        for j in 0..len {
            let mut plus = net.clone();
            plus.param_mut(id).unwrap().as_mut_slice()[j] += h;
            let mut minus = net.clone();
            minus.param_mut(id).unwrap().as_mut_slice()[j] -= h;
            g.push((mean_loss(&plus, x, y) - mean_loss(&minus, x, y)) / (2.0 * h));
        }
        out.push((id, g));
    }
    out
}

/// Central-difference gradient of the mean loss w.r.t. the input batch.
pub fn fd_input_grad(net: &Network, x: &Tensor, y: &[usize], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut plus = x.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[j] -= h;
            (mean_loss(net, &plus, y) - mean_loss(net, &minus, y)) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between analytic and finite-difference gradients
/// (parameters and input) for one network and batch.
pub fn worst_gradient_error(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (_, grads) = net.loss_and_grads(x, y, true, true).unwrap();
    let analytic = grads.by_parameter.unwrap();
    let mut worst: f64 = 0.0;
    for (id, fd) in fd_param_grads(net, x, y, H) {
        for (a, n) in analytic[&id].as_slice().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *n, FLOOR));
        }
    }
    let gi = grads.by_input.unwrap();
    for (a, n) in gi.as_slice().iter().zip(fd_input_grad(net, x, y, H)) {
        worst = worst.max(rel_err(*a, n, FLOOR));
    }
    worst
}

/// Triple-loop product.
pub fn naive_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * c + j];
            }
            out[i * c + j] = s;
        }
    }
    out
}

/// Small splitmix generator so test inputs do not depend on the crate's RNG.
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.range(lo, hi)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }
}
