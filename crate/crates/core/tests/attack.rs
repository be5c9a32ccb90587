mod common;

use cat_core::nn::{ParamId, ParamKind};
use cat_core::{craft, init_network, mlp_specs, project_linf, AttackConfig, Error, Network, StepVariant, Tensor};
use common::TestRng;
use proptest::prelude::*;

fn check_constraints(net: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) {
    let res = craft(net, x, y, cfg).unwrap();
    assert_eq!(res.crafted_count, x.rows());
    assert!(res.delta.max_abs() <= cfg.epsilon + 1e-12);
    let xa = res.adversarial_inputs(x).unwrap();
    assert!(xa.as_slice().iter().all(|&v| v >= cfg.clip_lo && v <= cfg.clip_hi));
    for (a, c) in res.adv_loss.iter().zip(&res.clean_loss) {
        assert!(a >= c, "adv {a} < clean {c}");
    }
    assert_eq!(craft(net, x, y, cfg).unwrap(), res);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn crafted_perturbations_respect_every_constraint(
        seed in any::<u64>(),
        eps in 0.0f64..0.6,
        steps in 1usize..6,
        restarts in 1usize..4,
        raw in any::<bool>(),
    ) {
        let mut r = TestRng(seed);
        let d = 2 + r.below(6);
        let k = 2 + r.below(3);
        let b = 1 + r.below(4);
        let net: Network = init_network(&mlp_specs(d, &[5], k), seed).unwrap();
        let x = r.matrix(b, d, 0.0, 1.0);
        let y: Vec<usize> = (0..b).map(|_| r.below(k)).collect();
        let mut cfg = AttackConfig::pgd(eps, steps, restarts).with_seed(seed ^ 1);
        if eps == 0.0 {
            cfg.step_size = 0.01;
        }
        if raw {
            cfg.variant = StepVariant::RawGradient;
        }
        check_constraints(&net, &x, &y, &cfg);
    }
}

#[test]
fn zero_radius_leaves_inputs_untouched() {
    let net: Network = init_network(&mlp_specs(3, &[4], 2), 0).unwrap();
    let x = Tensor::from_rows(&[[0.2, 0.4, 0.6]]).unwrap();
    let mut cfg = AttackConfig::pgd(0.0, 5, 3);
    cfg.step_size = 0.1;
    let res = craft(&net, &x, &[1], &cfg).unwrap();
    assert_eq!(res.delta.max_abs(), 0.0);
    assert_eq!(res.adv_loss, res.clean_loss);
}

#[test]
fn linear_model_attack_reaches_the_corner_oracle() {
    // For a two-class linear model without clipping pressure the worst case
    // in the ℓ∞ ball moves every coordinate by ε toward the other class.
    let mut net: Network = init_network(&[cat_core::LayerSpec::Dense { in_dim: 4, out_dim: 2 }], 3).unwrap();
    let w = [0.5, -1.0, 0.25, 2.0, -0.5, 0.75, -1.5, 1.0];
    net.param_mut(ParamId { layer: 0, kind: ParamKind::Weight })
        .unwrap()
        .as_mut_slice()
        .copy_from_slice(&w);
    let x = Tensor::from_rows(&[[0.5, 0.5, 0.5, 0.5]]).unwrap();
    let eps = 0.2;
    let cfg = AttackConfig::pgd(eps, 8, 1);
    let res = craft(&net, &x, &[0], &cfg).unwrap();

    let diff: Vec<f64> = (0..4).map(|j| w[4 + j] - w[j]).collect();
    for (d, g) in res.delta.as_slice().iter().zip(&diff) {
        assert!((d - eps * g.signum()).abs() <= 1e-12);
    }
    let b = net.param(ParamId { layer: 0, kind: ParamKind::Bias }).unwrap().as_slice().to_vec();
    let margin: f64 = b[1] - b[0] + diff.iter().map(|g| g * 0.5 + eps * g.abs()).sum::<f64>();
    let expected = margin.exp().ln_1p();
    assert!((res.adv_loss[0] - expected).abs() <= 1e-12);
}

#[test]
fn restarts_never_lower_the_loss() {
    let mut r = TestRng(11);
    let net: Network = init_network(&mlp_specs(6, &[8], 3), 2).unwrap();
    let x = r.matrix(4, 6, 0.0, 1.0);
    let y = [0, 1, 2, 0];
    let one = craft(&net, &x, &y, &AttackConfig::pgd(0.3, 5, 1)).unwrap();
    let many = craft(&net, &x, &y, &AttackConfig::pgd(0.3, 5, 6)).unwrap();
    for (a, b) in many.adv_loss.iter().zip(&one.adv_loss) {
        assert!(a >= b);
    }
}

#[test]
fn inputs_outside_the_clip_box_are_rejected() {
    let net: Network = init_network(&mlp_specs(2, &[3], 2), 0).unwrap();
    let x = Tensor::from_rows(&[[1.5, 0.0]]).unwrap();
    assert!(matches!(craft(&net, &x, &[0], &AttackConfig::pgd(0.1, 2, 1)), Err(Error::Validation(_))));
}

#[test]
fn overflowing_logits_are_reported_with_their_position() {
    let mut net: Network = init_network(&mlp_specs(4, &[], 2), 0).unwrap();
    for v in net.param_mut(ParamId { layer: 0, kind: ParamKind::Weight }).unwrap().as_mut_slice() {
        *v = 1e308;
    }
    let x = Tensor::from_rows(&[[1.0, 1.0, 1.0, 1.0]]).unwrap();
    let err = craft(&net, &x, &[0], &AttackConfig::pgd(0.1, 3, 1)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { restart: 0, step: 1 }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = AttackConfig::pgd(0.1, 3, 1);
    cfg.step_size = 0.5;
    assert!(cfg.validate().is_err());
    let mut cfg = AttackConfig::pgd(0.1, 3, 1);
    cfg.num_restarts = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = AttackConfig::pgd(0.1, 3, 1);
    cfg.clip_lo = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn projection_clamps_each_coordinate() {
    let d = Tensor::vector(vec![-0.7, 0.05, 0.3, -0.1]).unwrap();
    assert_eq!(project_linf(&d, 0.2).as_slice(), &[-0.2, 0.05, 0.2, -0.1]);
}
