//! Penalty and cost-factor properties checked against the f64 reference.

mod common;

use common::Arr;
use condense::costmodel::{mac_factors, uniform_factors, CostVector};
use condense::netgraph::build_unet;
use condense::penalize::{
    calibrate_alpha, channel_importance, layer_penalty, total_penalty, FactorSource, Regime, Strategy,
};
use condense::Tensor;
use proptest::prelude::*;

const STRATEGIES: [Strategy; 3] = [Strategy::Uniform, Strategy::Linear, Strategy::Exponential];

fn scaled(t: &Tensor, c: f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap()
}

#[test]
fn total_penalty_matches_reference() {
    let mut rng = common::rng(50);
    for _ in 0..10 {
        let g = common::random_unet(&mut rng);
        for factors in [mac_factors(&g, common::unet_side(&g)).unwrap(), uniform_factors(&g)] {
            for s in STRATEGIES {
                let ours = total_penalty(&g, &factors, s).unwrap();
                let reference =
                    common::total_penalty(&g, &common::weights_of(&g), &factors.layer_ids, &factors.factors, s);
                assert!((ours - reference).abs() <= 1e-9 * reference.abs().max(1.0), "{s}: {ours} vs {reference}");
            }
        }
    }
}

#[test]
fn uniform_penalty_is_plain_l1() {
    let mut g = build_unet(4, 3, 16, 16).unwrap();
    g.init_normal(&mut common::rng(51), 0.1);
    for l in g.layers() {
        let plain: f64 = g.weight(l.id).unwrap().data().iter().map(|v| (*v as f64).abs()).sum();
        let p = layer_penalty(&channel_importance(&g, l.id).unwrap(), Strategy::Uniform);
        assert!((p - plain).abs() <= 1e-9 * plain);
    }
}

#[test]
fn mac_factors_follow_counts() {
    let g = build_unet(16, 3, 512, 64).unwrap();
    let f = mac_factors(&g, 64).unwrap();
    let r = g.count_macs(64).unwrap();
    let ids = g.prunable_layer_ids();
    assert_eq!(f.layer_ids, ids);
    let raw: Vec<f64> = ids.iter().map(|&id| r.macs_of(id).unwrap() as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    for (got, want) in f.factors.iter().zip(&raw) {
        assert!((got - want / mean).abs() < 1e-12);
    }
    assert_eq!(f.source, FactorSource::Mac);
}

#[test]
fn zeroing_a_factor_removes_its_layer() {
    let mut g = build_unet(4, 2, 8, 8).unwrap();
    g.init_normal(&mut common::rng(52), 0.1);
    let ids = g.prunable_layer_ids();
    let full = CostVector::uniform(ids.clone());
    let mut partial = full.clone();
    partial.factors[1] = 0.0;
    let dropped = layer_penalty(&channel_importance(&g, ids[1]).unwrap(), Strategy::Linear);
    let a = total_penalty(&g, &full, Strategy::Linear).unwrap();
    let b = total_penalty(&g, &partial, Strategy::Linear).unwrap();
    assert!((a - b - dropped).abs() < 1e-9 * a);
}

#[test]
fn alpha_rule_examples() {
    assert_eq!(calibrate_alpha(200.0, 10.0, 0.1, Regime::High).unwrap(), 0.005);
    assert!((calibrate_alpha(200.0, 10.0, 0.1, Regime::Low).unwrap() - 0.0005).abs() < 1e-18);
    assert!((calibrate_alpha(3.5, 3.5, 0.1, Regime::High).unwrap() - 0.1).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_factors_ignore_units(raw in prop::collection::vec(1e-3f64..1e6, 1..8), scale in 1e-3f64..1e3) {
        let ids: Vec<usize> = (0..raw.len()).collect();
        let a = CostVector::from_raw(ids.clone(), raw.clone(), FactorSource::Latency).unwrap();
        let b = CostVector::from_raw(ids, raw.iter().map(|r| r * scale).collect(), FactorSource::Latency).unwrap();
        for (x, y) in a.factors.iter().zip(&b.factors) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs());
        }
        let mean = a.factors.iter().sum::<f64>() / a.factors.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_ignores_sign(seed in any::<u64>()) {
        let mut g = common::random_unet(&mut common::rng(seed));
        let before: Vec<_> = g.layers().iter().map(|l| channel_importance(&g, l.id).unwrap()).collect();
        for w in g.weights_mut() {
            *w = scaled(w, -1.0);
        }
        for (l, b) in g.layers().iter().zip(&before) {
            prop_assert_eq!(&channel_importance(&g, l.id).unwrap(), b);
        }
    }

    #[test]
    fn layer_penalty_is_homogeneous(seed in any::<u64>(), power in -3i32..4) {
        let c = 2f32.powi(power);
        let mut g = common::random_unet(&mut common::rng(seed));
        let id = g.prunable_layer_ids()[0];
        let before = channel_importance(&g, id).unwrap();
        let i = g.index_of(id).unwrap();
        g.weights_mut()[i] = scaled(&g.weights()[i], c);
        let after = channel_importance(&g, id).unwrap();
        prop_assert_eq!(&after.order, &before.order);
        for s in STRATEGIES {
            prop_assert_eq!(layer_penalty(&after, s), c as f64 * layer_penalty(&before, s));
        }
    }

    #[test]
    fn importance_matches_reference(seed in any::<u64>()) {
        let g = common::random_unet(&mut common::rng(seed));
        for l in g.layers() {
            let ours = channel_importance(&g, l.id).unwrap();
            let reference = common::gammas(&Arr::from_tensor(g.weight(l.id).unwrap()), l.out_axis());
            for (a, b) in ours.gamma.iter().zip(&reference) {
                prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
            }
            prop_assert!(ours.order.windows(2).all(|w| ours.gamma[w[0]] >= ours.gamma[w[1]]));
        }
    }
}
