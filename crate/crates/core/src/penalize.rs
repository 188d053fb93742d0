//! Sorted channel-weight penalization.
//!
//! Each generator layer contributes Σ_j f(j)·γ_(j), where γ_(j) is the L1
//! magnitude of its j-th largest output channel and f grows with j, so the
//! smallest channels carry the heaviest penalty. Layer penalties are weighted
//! by per-layer cost factors and summed.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::costmodel::CostVector;
use crate::error::{Error, Result};
use crate::netgraph::NetworkGraph;

/// Scale applied to the calibrated coefficient in the low regime.
pub const LOW_REGIME_SCALE: f64 = 0.1;
pub const DEFAULT_TARGET_RATIO: f64 = 0.1;
/// Rate of the exponential rank factor e^{rate·j}.
pub const EXPONENTIAL_RATE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Uniform,
    Linear,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    High,
    Low,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorSource {
    Mac,
    Latency,
    Uniform,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: ", $($name, " "),+, ")"),
                        other
                    ))),
                }
            }
        }
    };
}

named_enum!(Strategy { Uniform => "uniform", Linear => "linear", Exponential => "exponential" });
named_enum!(Regime { High => "high", Low => "low" });
named_enum!(FactorSource { Mac => "mac", Latency => "latency", Uniform => "uniform" });

#[derive(Clone, Debug, PartialEq)]
pub struct PenalizationConfig {
    pub strategy: Strategy,
    pub regime: Regime,
    /// Set by calibration on the first training iteration.
    pub alpha: Option<f64>,
    pub layer_factor_source: FactorSource,
    pub target_ratio: f64,
}

impl Default for PenalizationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Linear,
            regime: Regime::High,
            alpha: None,
            layer_factor_source: FactorSource::Mac,
            target_ratio: DEFAULT_TARGET_RATIO,
        }
    }
}

impl PenalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(Error::Config(format!("target ratio must be in (0, 1], got {}", self.target_ratio)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

/// Per-channel L1 magnitudes of one layer and their descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImportance {
    pub layer_id: usize,
    pub gamma: Vec<f64>,
    /// Channel indices sorted by descending gamma, ties by ascending index.
    pub order: Vec<usize>,
}

impl ChannelImportance {
    /// 0-based rank of every channel (rank 0 = largest gamma).
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &c) in self.order.iter().enumerate() {
            ranks[c] = r;
        }
        ranks
    }
}

pub fn descending_order(gamma: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gamma.len()).collect();
    order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    order
}

pub fn channel_importance(graph: &NetworkGraph, layer_id: usize) -> Result<ChannelImportance> {
    let spec = graph.layer(layer_id).ok_or_else(|| Error::Config(format!("no layer {layer_id}")))?;
    let w = graph.weight(layer_id).expect("layer exists");
    let [d0, d1, kh, kw] = spec.weight_shape();
    let mut gamma = vec![0.0f64; spec.out_ch];
    for (i, block) in w.data().chunks(kh * kw).enumerate() {
        let c = if spec.out_axis() == 0 { i / d1 } else { i % d1 };
        debug_assert!(i < d0 * d1);
        gamma[c] += block.iter().map(|&v| (v as f64).abs()).sum::<f64>();
    }
    let order = descending_order(&gamma);
    Ok(ChannelImportance { layer_id, gamma, order })
}

/// f(j) for a 1-based rank `j`.
pub fn channel_weight_factor(strategy: Strategy, j: usize) -> Result<f64> {
    if j < 1 {
        return Err(Error::Domain("channel rank is 1-based".into()));
    }
    Ok(match strategy {
        Strategy::Uniform => 1.0,
        Strategy::Linear => j as f64,
        Strategy::Exponential => (EXPONENTIAL_RATE * j as f64).exp(),
    })
}

pub fn layer_penalty(importance: &ChannelImportance, strategy: Strategy) -> f64 {
    importance
        .order
        .iter()
        .enumerate()
        .map(|(r, &c)| channel_weight_factor(strategy, r + 1).expect("rank ≥ 1") * importance.gamma[c])
        .sum()
}

/// Layers that are penalized (and later prunable): every generator layer but the image output.
pub fn penalized_layer_ids(graph: &NetworkGraph) -> Vec<usize> {
    graph.prunable_layer_ids()
}

fn check_factors(graph: &NetworkGraph, factors: &CostVector) -> Result<Vec<usize>> {
    let ids = penalized_layer_ids(graph);
    if factors.layer_ids != ids {
        return Err(Error::Config(format!(
            "cost factors cover layers {:?}, penalized layers are {ids:?}",
            factors.layer_ids
        )));
    }
    Ok(ids)
}

/// Σ_i l(i)·L_i over the penalized layers.
pub fn total_penalty(graph: &NetworkGraph, factors: &CostVector, strategy: Strategy) -> Result<f64> {
    let ids = check_factors(graph, factors)?;
    let mut total = 0.0;
    for (id, &l) in ids.iter().zip(&factors.factors) {
        total += l * layer_penalty(&channel_importance(graph, *id)?, strategy);
    }
    Ok(total)
}

/// The per-channel multiplier l·f(rank(c)) with ranks taken from current weights.
pub fn rank_coefficients(importance: &ChannelImportance, strategy: Strategy, layer_factor: f64) -> Vec<f32> {
    importance
        .ranks()
        .into_iter()
        .map(|r| (layer_factor * channel_weight_factor(strategy, r + 1).expect("rank ≥ 1")) as f32)
        .collect()
}

/// Differentiable total penalty. `params` are the graph's weight handles on
/// `tape`, by storage index. The sort is recomputed from the current weights
/// and treated as constant in the backward pass.
pub fn penalty_on_tape(
    graph: &NetworkGraph,
    tape: &mut Tape,
    params: &[Var],
    factors: &CostVector,
    strategy: Strategy,
) -> Result<Var> {
    let ids = check_factors(graph, factors)?;
    let mut terms = Vec::with_capacity(ids.len());
    for (&id, &l) in ids.iter().zip(&factors.factors) {
        let imp = channel_importance(graph, id)?;
        let spec = graph.layer(id).expect("checked");
        let coef = rank_coefficients(&imp, strategy, 1.0);
        let term = tape.channel_l1(params[graph.index_of(id).expect("checked")], spec.out_axis(), &coef)?;
        terms.push((term, l));
    }
    tape.weighted_sum(&terms)
}

/// α such that α·L_PENAL = target_ratio·L_l1 on the first iteration,
/// scaled by [`LOW_REGIME_SCALE`] in the low regime.
pub fn calibrate_alpha(l_penal_first: f64, l_l1_first: f64, target_ratio: f64, regime: Regime) -> Result<f64> {
    if !(l_penal_first > 0.0 && l_penal_first.is_finite()) {
        return Err(Error::Calibration(format!(
            "first-iteration penalty must be positive, got {l_penal_first} (all-zero weights?)"
        )));
    }
    if !(l_l1_first > 0.0 && l_l1_first.is_finite()) {
        return Err(Error::Calibration(format!("first-iteration l1 loss must be positive, got {l_l1_first}")));
    }
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::Calibration(format!("target ratio must be in (0, 1], got {target_ratio}")));
    }
    let high = target_ratio * l_l1_first / l_penal_first;
    Ok(match regime {
        Regime::High => high,
        Regime::Low => LOW_REGIME_SCALE * high,
    })
}
