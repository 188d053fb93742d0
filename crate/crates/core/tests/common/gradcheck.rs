//! Central finite differences on the f64 reference and whole-objective checks.

use condense::autodiff::Tape;
use condense::costmodel::mac_factors;
use condense::netgraph::{build_patchgan_with, NetworkGraph, UnetSpec};
use condense::penalize::{penalized_layer_ids, penalty_on_tape, Strategy};
use condense::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Arr, Counter};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

/// Largest per-element relative error and its index. Elements smaller than
/// 1e-3 of the largest numeric gradient are compared relative to that floor.
pub fn rel_error(analytic: &[f32], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale.max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / (a.abs() as f64).max(n.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let up = f(&p);
            p[i] = orig - H;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Values with magnitude in [0.05, 1], so no weight sits near |w| = 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Arr {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Arr { shape, data }
}

pub fn with(arr: &Arr, data: &[f64]) -> Arr {
    Arr { shape: arr.shape, data: data.to_vec() }
}

/// A tiny generator/discriminator pair whose weights are all ≥ 0.015 in
/// magnitude and whose channel gammas are pairwise separated by at least 1e-2.
pub fn separated_models(seed: u64, norm: bool) -> (NetworkGraph, NetworkGraph) {
    let mut rng = super::rng(seed);
    loop {
        let mut spec = UnetSpec::new(2, 2, 4, 8);
        spec.instance_norm = norm;
        let mut g = spec.build().unwrap();
        let mut d = build_patchgan_with(6, 2, 4).unwrap();
        for graph in [&mut g, &mut d] {
            for w in graph.weights_mut() {
                let s = w.shape().to_vec();
                let a = away_from_zero(&mut rng, [s[0], s[1], s[2], s[3]]);
                // Scale keeps activations out of saturation.
                *w = Tensor::new(s, a.data.iter().map(|&v| (0.3 * v) as f32).collect()).unwrap();
            }
        }
        let separated = penalized_layer_ids(&g).iter().all(|&id| {
            let l = g.layer(id).unwrap();
            let mut gam = super::gammas(&Arr::from_tensor(g.weight(id).unwrap()), l.out_axis());
            gam.sort_by(|a, b| a.partial_cmp(b).unwrap());
            gam.windows(2).all(|w| w[1] - w[0] >= 1e-2)
        });
        if separated {
            return (g, d);
        }
    }
}

pub fn flatten(ws: &[Arr]) -> Vec<f64> {
    ws.iter().flat_map(|w| w.data.iter().copied()).collect()
}

pub fn unflatten(like: &[Arr], flat: &[f64]) -> Vec<Arr> {
    let mut off = 0;
    like.iter()
        .map(|w| {
            let n = w.data.len();
            let a = Arr { shape: w.shape, data: flat[off..off + n].to_vec() };
            off += n;
            a
        })
        .collect()
}

/// Relative gradient error of the generator objective gan_g + λ·l1 + α·penal,
/// with α set so the penalty term is a tenth of the l1 term.
pub fn generator_objective_error(seed: u64, strategy: Strategy, norm: bool) -> f64 {
    let lambda = 100.0;
    let (g, d) = separated_models(seed, norm);
    let mut rng = super::rng(seed + 100);
    let x = super::random_arr(&mut rng, [1, 3, 8, 8], -1.0, 1.0);
    let y = super::random_arr(&mut rng, [1, 3, 8, 8], -1.0, 1.0);
    let factors = mac_factors(&g, 8).unwrap();
    let ids = factors.layer_ids.clone();
    let gw = super::weights_of(&g);
    let dw = super::weights_of(&d);

    let objective = |gws: &[Arr], alpha: f64| {
        let out = super::forward(&g, gws, &x, &mut Counter::default());
        let score = super::forward(&d, &dw, &super::concat(&[&x, &out]), &mut Counter::default());
        super::bce(&score, 1.0)
            + lambda * super::l1(&out, &y)
            + alpha * super::total_penalty(&g, gws, &ids, &factors.factors, strategy)
    };
    let out0 = super::forward(&g, &gw, &x, &mut Counter::default());
    let alpha = 0.1 * lambda * super::l1(&out0, &y) / super::total_penalty(&g, &gw, &ids, &factors.factors, strategy);

    let mut tape = Tape::new();
    let params = g.register(&mut tape, true);
    let xv = tape.constant(super::to_tensor(&x));
    let yv = tape.constant(super::to_tensor(&y));
    let fake = g.forward_on(&mut tape, xv, &params).unwrap();
    let dparams = d.register(&mut tape, false);
    let din = tape.concat_channels(&[xv, fake]).unwrap();
    let score = d.forward_on(&mut tape, din, &dparams).unwrap();
    let ones = tape.constant(Tensor::full(tape.value(score).shape(), 1.0));
    let gan = tape.bce_loss(score, ones).unwrap();
    let l1 = tape.l1_loss(fake, yv).unwrap();
    let pen = penalty_on_tape(&g, &mut tape, &params, &factors, strategy).unwrap();
    let total = tape.weighted_sum(&[(gan, 1.0), (l1, lambda), (pen, alpha)]).unwrap();
    let value = tape.scalar(total);
    assert!((value - objective(&gw, alpha)).abs() < 1e-3 * value.abs(), "objective value mismatch");
    tape.backward(total).unwrap();

    let numeric = numeric_grad(&flatten(&gw), |flat| objective(&unflatten(&gw, flat), alpha));
    let analytic: Vec<f32> = params.iter().flat_map(|&p| tape.grad(p).unwrap().to_vec()).collect();
    rel_error(&analytic, &numeric).0
}

/// Relative gradient error of the halved discriminator loss.
pub fn discriminator_objective_error(seed: u64) -> f64 {
    let (g, d) = separated_models(seed, false);
    let mut rng = super::rng(seed + 1);
    let x = super::random_arr(&mut rng, [1, 3, 8, 8], -1.0, 1.0);
    let y = super::random_arr(&mut rng, [1, 3, 8, 8], -1.0, 1.0);
    let fake = super::forward(&g, &super::weights_of(&g), &x, &mut Counter::default());
    let dw = super::weights_of(&d);
    let real_in = super::concat(&[&x, &y]);
    let fake_in = super::concat(&[&x, &fake]);
    let objective = |ws: &[Arr]| {
        let r = super::forward(&d, ws, &real_in, &mut Counter::default());
        let f = super::forward(&d, ws, &fake_in, &mut Counter::default());
        0.5 * (super::bce(&r, 1.0) + super::bce(&f, 0.0))
    };
    let mut tape = Tape::new();
    let params = d.register(&mut tape, true);
    let rv = tape.constant(super::to_tensor(&real_in));
    let fv = tape.constant(super::to_tensor(&fake_in));
    let sr = d.forward_on(&mut tape, rv, &params).unwrap();
    let sf = d.forward_on(&mut tape, fv, &params).unwrap();
    let ones = tape.constant(Tensor::full(tape.value(sr).shape(), 1.0));
    let zeros = tape.constant(Tensor::zeros(tape.value(sf).shape()));
    let lr = tape.bce_loss(sr, ones).unwrap();
    let lf = tape.bce_loss(sf, zeros).unwrap();
    let loss = tape.weighted_sum(&[(lr, 0.5), (lf, 0.5)]).unwrap();
    tape.backward(loss).unwrap();
    let numeric = numeric_grad(&flatten(&dw), |flat| objective(&unflatten(&dw, flat)));
    let analytic: Vec<f32> = params.iter().flat_map(|&p| tape.grad(p).unwrap().to_vec()).collect();
    rel_error(&analytic, &numeric).0
}
