//! Slow, direct f64 reference implementations used as oracles by the
//! integration tests. Nothing here shares code with the library kernels.

#![allow(dead_code)]

pub mod gradcheck;

use std::collections::HashMap;

use condense::kernels::Activation;
use condense::netgraph::{LayerKind, LayerSpec, NetworkGraph, Source};
use condense::penalize::Strategy;
use condense::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// NCHW array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self { shape: [s[0], s[1], s[2], s[3]], data: t.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let [_, cc, h, w] = self.shape;
        &mut self.data[((n * cc + c) * h + y) * w + x]
    }
}

/// Counts every multiplication performed by the reference convolutions.
#[derive(Default)]
pub struct Counter {
    pub mults: u64,
}

/// Direct convolution over a zero-padded input. Weight layout (out, in, k, k).
pub fn conv2d(x: &Arr, w: &Arr, stride: usize, pad: usize, counter: &mut Counter) -> Arr {
    let [n, ci, h, wd] = x.shape;
    let [co, wci, k, _] = w.shape;
    assert_eq!(ci, wci);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros([n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    0.0
                                } else {
                                    x.at(b, c, iy as usize, ix as usize)
                                };
                                acc += v * w.at(o, c, ky, kx);
                                counter.mults += 1;
                            }
                        }
                    }
                    *out.at_mut(b, o, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as a scatter into an uncropped canvas followed by
/// cropping `pad` on every side. Weight layout (in, out, k, k).
pub fn conv_transpose2d(x: &Arr, w: &Arr, stride: usize, pad: usize, counter: &mut Counter) -> Arr {
    let [n, ci, h, wd] = x.shape;
    let [wci, co, k, _] = w.shape;
    assert_eq!(ci, wci);
    let full_h = (h - 1) * stride + k;
    let full_w = (wd - 1) * stride + k;
    let mut canvas = Arr::zeros([n, co, full_h, full_w]);
    for b in 0..n {
        for c in 0..ci {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.at(b, c, iy, ix);
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                *canvas.at_mut(b, o, iy * stride + ky, ix * stride + kx) += v * w.at(c, o, ky, kx);
                                counter.mults += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    let mut out = Arr::zeros([n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(b, o, y, x) = canvas.at(b, o, y + pad, x + pad);
                }
            }
        }
    }
    out
}

pub fn activate(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu(s) => {
            if v > 0.0 {
                v
            } else {
                s as f64 * v
            }
        }
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
    }
}

pub fn instance_norm(x: &Arr) -> Arr {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let mut out = x.clone();
    for plane in 0..n * c {
        let s = &x.data[plane * hw..(plane + 1) * hw];
        let mean = s.iter().sum::<f64>() / hw as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (o, v) in out.data[plane * hw..(plane + 1) * hw].iter_mut().zip(s) {
            *o = (v - mean) * inv;
        }
    }
    out
}

pub fn concat(parts: &[&Arr]) -> Arr {
    let [n, _, h, w] = parts[0].shape;
    let c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = Arr::zeros([n, c, h, w]);
    for b in 0..n {
        let mut off = 0;
        for p in parts {
            for ch in 0..p.shape[1] {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(b, off + ch, y, x) = p.at(b, ch, y, x);
                    }
                }
            }
            off += p.shape[1];
        }
    }
    out
}

/// Reference weights of a graph as f64 arrays, by storage index.
pub fn weights_of(g: &NetworkGraph) -> Vec<Arr> {
    g.weights().iter().map(Arr::from_tensor).collect()
}

fn run_layer(l: &LayerSpec, x: &Arr, w: &Arr, counter: &mut Counter) -> Arr {
    let mut y = match l.kind {
        LayerKind::Conv => conv2d(x, w, l.stride, l.padding, counter),
        LayerKind::ConvTranspose => conv_transpose2d(x, w, l.stride, l.padding, counter),
    };
    if l.instance_norm {
        y = instance_norm(&y);
    }
    if let Some(a) = l.activation {
        y.data.iter_mut().for_each(|v| *v = activate(a, *v));
    }
    y
}

/// Forward pass evaluating layers whenever all their sources are ready,
/// independently of the library's scheduling.
pub fn forward(g: &NetworkGraph, weights: &[Arr], input: &Arr, counter: &mut Counter) -> Arr {
    let mut done: HashMap<usize, Arr> = HashMap::new();
    let n = g.layers().len();
    while done.len() < n {
        let before = done.len();
        for (i, l) in g.layers().iter().enumerate() {
            if done.contains_key(&l.id) {
                continue;
            }
            let ready = l.input_sources.iter().all(|s| match s {
                Source::Input => true,
                Source::Layer(p) => done.contains_key(p),
            });
            if !ready {
                continue;
            }
            let parts: Vec<&Arr> = l
                .input_sources
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Layer(p) => &done[p],
                })
                .collect();
            let x = concat(&parts);
            let y = run_layer(l, &x, &weights[i], counter);
            done.insert(l.id, y);
        }
        assert!(done.len() > before, "reference forward stalled");
    }
    let consumed: Vec<usize> = g
        .layers()
        .iter()
        .flat_map(|l| l.input_sources.iter())
        .filter_map(|s| match s {
            Source::Layer(p) => Some(*p),
            Source::Input => None,
        })
        .collect();
    let out = g.layers().iter().find(|l| !consumed.contains(&l.id)).unwrap().id;
    done.remove(&out).unwrap()
}

pub fn l1(a: &Arr, b: &Arr) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

pub fn bce(p: &Arr, target: f64) -> f64 {
    p.data
        .iter()
        .map(|&v| {
            let v = v.clamp(1e-7, 1.0 - 1e-7);
            -(target * v.ln() + (1.0 - target) * (1.0 - v).ln())
        })
        .sum::<f64>()
        / p.data.len() as f64
}

pub fn rank_factor(s: Strategy, j: usize) -> f64 {
    match s {
        Strategy::Uniform => 1.0,
        Strategy::Linear => j as f64,
        Strategy::Exponential => (0.01 * j as f64).exp(),
    }
}

/// Per-channel L1 magnitudes of a weight array, channels along `axis`.
pub fn gammas(w: &Arr, axis: usize) -> Vec<f64> {
    let [d0, d1, kh, kw] = w.shape;
    let channels = if axis == 0 { d0 } else { d1 };
    let mut g = vec![0.0; channels];
    for a in 0..d0 {
        for b in 0..d1 {
            let c = if axis == 0 { a } else { b };
            for y in 0..kh {
                for x in 0..kw {
                    g[c] += w.at(a, b, y, x).abs();
                }
            }
        }
    }
    g
}

/// Σ_j f(j)·γ_(j) with the gammas sorted in descending order.
pub fn sorted_penalty(gamma: &[f64], s: Strategy) -> f64 {
    let mut sorted = gamma.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sorted.iter().enumerate().map(|(j, g)| rank_factor(s, j + 1) * g).sum()
}

/// Σ_i l(i)·L_i over `layer_ids` with `factors` aligned to them.
pub fn total_penalty(g: &NetworkGraph, weights: &[Arr], layer_ids: &[usize], factors: &[f64], s: Strategy) -> f64 {
    layer_ids
        .iter()
        .zip(factors)
        .map(|(&id, &l)| {
            let i = g.index_of(id).unwrap();
            l * sorted_penalty(&gammas(&weights[i], g.layers()[i].out_axis()), s)
        })
        .sum()
}

pub fn random_arr(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Arr {
    let n = shape.iter().product();
    Arr { shape, data: (0..n).map(|_| rng.random_range(lo..hi)).collect() }
}

pub fn to_tensor(a: &Arr) -> Tensor {
    Tensor::new(a.shape.to_vec(), a.data.iter().map(|&v| v as f32).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small U-net with random widths, depth, optional instance norm and
/// random weights in [−0.5, 0.5].
pub fn random_unet(rng: &mut ChaCha8Rng) -> NetworkGraph {
    let depth = rng.random_range(1..=3);
    let base = rng.random_range(1..=4);
    let cap = rng.random_range(base..=8);
    let size = (1 << depth) * rng.random_range(1..=2);
    let mut spec = condense::netgraph::UnetSpec::new(base, depth, cap, size);
    spec.instance_norm = rng.random_bool(0.5);
    let mut g = spec.build().unwrap();
    for w in g.weights_mut() {
        let s = w.shape().to_vec();
        *w = to_tensor(&random_arr(rng, [s[0], s[1], s[2], s[3]], -0.5, 0.5));
    }
    g
}

/// Random non-empty output keep-sets for every layer but the output layer.
pub fn random_keep(rng: &mut ChaCha8Rng, g: &NetworkGraph) -> std::collections::BTreeMap<usize, Vec<usize>> {
    let out = g.output_layer_id().unwrap();
    g.layers()
        .iter()
        .filter(|l| l.id != out)
        .map(|l| {
            let mut keep: Vec<usize> = (0..l.out_ch).filter(|_| rng.random_bool(0.6)).collect();
            if keep.is_empty() {
                keep.push(rng.random_range(0..l.out_ch));
            }
            (l.id, keep)
        })
        .collect()
}

/// One-layer graph reading the input directly.
pub fn single_layer(
    kind: LayerKind,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> NetworkGraph {
    let layer = LayerSpec {
        id: 0,
        kind,
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        activation: None,
        instance_norm: false,
        input_sources: vec![condense::netgraph::Source::Input],
    };
    NetworkGraph::zeroed(in_ch, vec![layer], vec![]).unwrap()
}

/// Smallest side a U-net accepts: 2^(number of encoder layers).
pub fn unet_side(g: &NetworkGraph) -> usize {
    1 << g.layers().iter().filter(|l| l.kind == LayerKind::Conv).count()
}
