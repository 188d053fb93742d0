//! Per-layer cost factors l(i), normalized to mean one.
//!
//! Factors come from analytic MAC counts, from wall-clock timing of each layer
//! in isolation on the executing machine, or are uniform.
//!
//! Latency profiling must run single-threaded with no other load from this
//! process; it times whatever host executes it.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::dataio::Report;
use crate::error::{Error, Result};
use crate::kernels;
use crate::netgraph::{LayerKind, LayerSpec, NetworkGraph};
use crate::penalize::{penalized_layer_ids, FactorSource};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CostVector {
    pub layer_ids: Vec<usize>,
    /// Mean-one multiplicative factors, one per layer id.
    pub factors: Vec<f64>,
    /// The costs the factors were normalized from (MACs or median ms).
    pub raw_costs: Vec<f64>,
    pub source: FactorSource,
}

impl CostVector {
    pub fn from_raw(layer_ids: Vec<usize>, raw_costs: Vec<f64>, source: FactorSource) -> Result<Self> {
        if layer_ids.len() != raw_costs.len() || layer_ids.is_empty() {
            return Err(Error::Config(format!("{} layers with {} costs", layer_ids.len(), raw_costs.len())));
        }
        if let Some(bad) = raw_costs.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("layer costs must be positive, got {bad}")));
        }
        let mean = raw_costs.iter().sum::<f64>() / raw_costs.len() as f64;
        let factors = raw_costs.iter().map(|c| c / mean).collect();
        Ok(Self { layer_ids, factors, raw_costs, source })
    }

    pub fn uniform(layer_ids: Vec<usize>) -> Self {
        let n = layer_ids.len();
        Self { layer_ids, factors: vec![1.0; n], raw_costs: vec![1.0; n], source: FactorSource::Uniform }
    }

    pub fn factor_of(&self, layer_id: usize) -> Option<f64> {
        self.layer_ids.iter().position(|&id| id == layer_id).map(|i| self.factors[i])
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

pub fn mac_factors(graph: &NetworkGraph, input_size: usize) -> Result<CostVector> {
    let report = graph.count_macs(input_size)?;
    let ids = penalized_layer_ids(graph);
    let raw = ids.iter().map(|&id| report.macs_of(id).expect("every layer is counted") as f64).collect();
    CostVector::from_raw(ids, raw, FactorSource::Mac)
}

pub fn uniform_factors(graph: &NetworkGraph) -> CostVector {
    CostVector::uniform(penalized_layer_ids(graph))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProfileConfig {
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { repeats: 10, warmup: 2, seed: 0 }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::Config(format!("latency profiling needs at least 3 repeats, got {}", self.repeats)));
        }
        if self.warmup < 1 {
            return Err(Error::Config("latency profiling needs at least 1 warmup run".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLatency {
    pub layer_id: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    /// Invocations folded into each sample when a single call was too short to time.
    pub invocations_per_sample: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceProfile {
    pub per_layer: Vec<LayerLatency>,
    pub repeats: usize,
    pub warmup: usize,
    pub warnings: Vec<String>,
}

/// One timed sample: mean duration per call over `invocations` calls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub per_call: Duration,
    pub invocations: u32,
}

/// Source of timing samples; injectable so profiling is testable.
pub trait Stopwatch {
    fn time(&mut self, layer_id: usize, run: &mut dyn FnMut()) -> Sample;
}

/// Real clock. Calls shorter than `min_sample` are repeated, doubling the
/// count until the batch is long enough to time reliably.
#[derive(Clone, Copy, Debug)]
pub struct WallClock {
    pub min_sample: Duration,
}

impl Default for WallClock {
    fn default() -> Self {
        Self { min_sample: Duration::from_micros(500) }
    }
}

impl Stopwatch for WallClock {
    fn time(&mut self, _layer_id: usize, run: &mut dyn FnMut()) -> Sample {
        let mut invocations = 1u32;
        loop {
            let start = Instant::now();
            for _ in 0..invocations {
                run();
            }
            let elapsed = start.elapsed();
            if elapsed >= self.min_sample || invocations >= 1 << 20 {
                return Sample { per_call: elapsed / invocations, invocations };
            }
            invocations *= 2;
        }
    }
}

/// Executes one layer (conv, optional norm, activation) outside any tape.
fn run_layer(spec: &LayerSpec, weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    let mut y = match spec.kind {
        LayerKind::Conv => kernels::conv2d(input, weight, spec.stride, spec.padding)?,
        LayerKind::ConvTranspose => kernels::conv_transpose2d(input, weight, spec.stride, spec.padding)?,
    };
    if spec.instance_norm {
        y = kernels::instance_norm(&y)?.0;
    }
    if let Some(a) = spec.activation {
        y.data_mut().iter_mut().for_each(|v| *v = a.apply(*v));
    }
    Ok(y)
}

/// Times each penalized layer's forward pass on a representative input and
/// normalizes the medians to mean one.
pub fn latency_factors(
    graph: &NetworkGraph,
    input_size: usize,
    config: &ProfileConfig,
    stopwatch: &mut dyn Stopwatch,
) -> Result<(CostVector, DeviceProfile)> {
    config.validate()?;
    let sizes = graph.spatial_sizes(input_size)?;
    let ids = penalized_layer_ids(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dist = Uniform::new(-1.0f32, 1.0).expect("valid range");
    let mut per_layer = Vec::with_capacity(ids.len());
    let mut warnings = Vec::new();
    for &id in &ids {
        let idx = graph.index_of(id).expect("penalized layers exist");
        let spec = &graph.layers()[idx];
        let weight = &graph.weights()[idx];
        let side = sizes[idx].0;
        let n = spec.in_ch * side * side;
        let input = Tensor::new(vec![1, spec.in_ch, side, side], (0..n).map(|_| dist.sample(&mut rng)).collect())?;
        let mut failure = None;
        let mut run = || {
            if let Err(e) = run_layer(spec, weight, &input) {
                failure.get_or_insert(e);
            }
        };
        for _ in 0..config.warmup {
            run();
        }
        let mut samples_ms = Vec::with_capacity(config.repeats);
        let mut invocations = 1;
        for _ in 0..config.repeats {
            let s = stopwatch.time(id, &mut run);
            invocations = invocations.max(s.invocations);
            samples_ms.push(s.per_call.as_secs_f64() * 1e3);
        }
        if let Some(e) = failure {
            return Err(e);
        }
        if invocations > 1 {
            warnings.push(format!(
                "layer {id}: single call below timer resolution, batched {invocations} calls per sample"
            ));
        }
        let mean = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
        let var = samples_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples_ms.len() as f64;
        per_layer.push(LayerLatency {
            layer_id: id,
            mean_ms: mean,
            std_ms: var.sqrt(),
            median_ms: median(&mut samples_ms),
            invocations_per_sample: invocations,
        });
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let medians = per_layer.iter().map(|l| l.median_ms).collect();
    let costs = CostVector::from_raw(ids, medians, FactorSource::Latency)?;
    Ok((costs, DeviceProfile { per_layer, repeats: config.repeats, warmup: config.warmup, warnings }))
}

pub const COST_REPORT_HEADER: [&str; 8] =
    ["layer_id", "source", "raw_cost", "factor", "mean_ms", "std_ms", "median_ms", "invocations_per_sample"];

/// One row per layer. Timing columns are empty unless `profile` is given.
pub fn cost_report(costs: &CostVector, profile: Option<&DeviceProfile>) -> Report {
    let mut r = Report::new(&COST_REPORT_HEADER);
    for (i, &id) in costs.layer_ids.iter().enumerate() {
        let timing = profile.and_then(|p| p.per_layer.iter().find(|l| l.layer_id == id));
        let cells = match timing {
            Some(t) => [
                t.mean_ms.to_string(),
                t.std_ms.to_string(),
                t.median_ms.to_string(),
                t.invocations_per_sample.to_string(),
            ],
            None => Default::default(),
        };
        let mut row = vec![
            id.to_string(),
            costs.source.to_string(),
            costs.raw_costs[i].to_string(),
            costs.factors[i].to_string(),
        ];
        row.extend(cells);
        r.push(row);
    }
    r
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
