//! Python bindings: build, load, prune and run generators from Python.

use std::collections::BTreeMap;

use condense::costmodel::{mac_factors, uniform_factors};
use condense::dataio::{gen_synthetic_pairs, load_checkpoint, save_checkpoint, Checkpoint, ModelRecord};
use condense::hingeprune::{apply_pruning, build_pruning_plan, detect_all, detect_hinge, MagnitudeCurve};
use condense::netgraph::{NetworkGraph, UnetSpec};
use condense::penalize::{calibrate_alpha as calibrate, Regime};
use condense::trainer::near_zero_fraction;
use condense::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A flat buffer and its NCHW shape.
type Array = (Vec<f32>, Vec<usize>);

fn array(t: Tensor) -> Array {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

#[pyclass(module = "condense_py")]
pub struct Generator {
    graph: NetworkGraph,
}

#[pymethods]
impl Generator {
    /// U-net generator with zero weights; call `init` to randomize them.
    #[staticmethod]
    #[pyo3(signature = (base_channels, depth, cap, input_size, instance_norm = false))]
    fn unet(base_channels: usize, depth: usize, cap: usize, input_size: usize, instance_norm: bool) -> PyResult<Self> {
        let mut spec = UnetSpec::new(base_channels, depth, cap, input_size);
        spec.instance_norm = instance_norm;
        Ok(Self { graph: spec.build().map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (path, name = "generator"))]
    fn load(path: &str, name: &str) -> PyResult<Self> {
        let ckpt = load_checkpoint(path).map_err(to_py)?;
        Ok(Self { graph: ckpt.require(name).map_err(to_py)?.graph.clone() })
    }

    /// Writes a checkpoint holding this generator only.
    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            models: vec![ModelRecord { name: "generator".into(), graph: self.graph.clone(), optimizer: None }],
            metadata: BTreeMap::new(),
        };
        save_checkpoint(path, &ckpt).map_err(to_py)
    }

    #[pyo3(signature = (seed, std = 0.02))]
    fn init(&mut self, seed: u64, std: f32) {
        self.graph.init_normal(&mut ChaCha8Rng::seed_from_u64(seed), std);
    }

    fn forward(&self, data: Vec<f32>, shape: Vec<usize>) -> PyResult<Array> {
        let x = Tensor::new(shape, data).map_err(to_py)?;
        Ok(array(self.graph.forward(&x).map_err(to_py)?))
    }

    /// Total MACs and parameters at the given input size.
    fn count_macs(&self, input_size: usize) -> PyResult<(u64, u64)> {
        let r = self.graph.count_macs(input_size).map_err(to_py)?;
        Ok((r.total_macs, r.total_params))
    }

    /// Output channels by layer id.
    fn channels(&self) -> BTreeMap<usize, usize> {
        self.graph.layers().iter().map(|l| (l.id, l.out_ch)).collect()
    }

    fn prunable_layers(&self) -> Vec<usize> {
        self.graph.prunable_layer_ids()
    }

    #[pyo3(signature = (rel_threshold = 0.01))]
    fn near_zero_fraction(&self, rel_threshold: f64) -> f64 {
        near_zero_fraction(&self.graph, rel_threshold)
    }

    /// Per-layer cost factors from `"mac"` or `"uniform"`.
    fn cost_factors(&self, source: &str, input_size: usize) -> PyResult<Vec<(usize, f64)>> {
        let f = match source {
            "mac" => mac_factors(&self.graph, input_size).map_err(to_py)?,
            "uniform" => uniform_factors(&self.graph),
            other => return Err(PyValueError::new_err(format!("unknown cost source '{other}'"))),
        };
        Ok(f.layer_ids.into_iter().zip(f.factors).collect())
    }

    /// Detects hinges, applies the resulting plan and returns the pruned
    /// generator with the keep count chosen for each layer.
    #[pyo3(signature = (min_drop_ratio = 10.0, floor = 1e-12, manual_keep = BTreeMap::new()))]
    fn prune(
        &self,
        min_drop_ratio: f64,
        floor: f64,
        manual_keep: BTreeMap<usize, usize>,
    ) -> PyResult<(Generator, BTreeMap<usize, usize>)> {
        let (_, hinges) = detect_all(&self.graph, min_drop_ratio, floor, &manual_keep).map_err(to_py)?;
        let plan = build_pruning_plan(&self.graph, &hinges).map_err(to_py)?;
        let graph = apply_pruning(&self.graph, &plan).map_err(to_py)?;
        Ok((Generator { graph }, hinges.iter().map(|h| (h.layer_id, h.keep_count)).collect()))
    }

    fn __repr__(&self) -> String {
        format!("Generator(layers={}, params={})", self.graph.layers().len(), self.graph.param_count())
    }
}

/// Keep count for a descending magnitude curve.
#[pyfunction]
#[pyo3(signature = (sorted_gamma, min_drop_ratio = 10.0, floor = 1e-12))]
fn hinge_keep_count(sorted_gamma: Vec<f64>, min_drop_ratio: f64, floor: f64) -> PyResult<usize> {
    let n = sorted_gamma.len();
    let curve = MagnitudeCurve { layer_id: 0, sorted_gamma, channel_ids: (0..n).collect() };
    Ok(detect_hinge(&curve, min_drop_ratio, floor).map_err(to_py)?.keep_count)
}

#[pyfunction]
#[pyo3(signature = (l_penal_first, l_l1_first, target_ratio = 0.1, regime = "high"))]
fn calibrate_alpha(l_penal_first: f64, l_l1_first: f64, target_ratio: f64, regime: &str) -> PyResult<f64> {
    let regime: Regime = regime.parse().map_err(to_py)?;
    calibrate(l_penal_first, l_l1_first, target_ratio, regime).map_err(to_py)
}

/// Paired (mask, image) samples, each as a flat buffer and shape.
#[pyfunction]
fn synthetic_pairs(seed: u64, n: usize, size: usize) -> Vec<(Array, Array)> {
    gen_synthetic_pairs(seed, n, size).into_iter().map(|s| (array(s.mask), array(s.image))).collect()
}

#[pymodule]
fn condense_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(hinge_keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pairs, m)?)?;
    Ok(())
}
