//! Hinge detection on sorted channel-magnitude curves and structured channel
//! removal across the whole graph, skip connections included.

use std::collections::BTreeMap;
use std::fmt;

use crate::dataio::Report;
use crate::error::{Error, Result};
use crate::netgraph::{NetworkGraph, Source};
use crate::penalize::{channel_importance, penalized_layer_ids};

pub const DEFAULT_MIN_DROP_RATIO: f64 = 10.0;
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// Channel magnitudes of one layer in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeCurve {
    pub layer_id: usize,
    pub sorted_gamma: Vec<f64>,
    pub channel_ids: Vec<usize>,
}

pub fn magnitude_curve(graph: &NetworkGraph, layer_id: usize) -> Result<MagnitudeCurve> {
    let imp = channel_importance(graph, layer_id)?;
    let sorted_gamma = imp.order.iter().map(|&c| imp.gamma[c]).collect();
    Ok(MagnitudeCurve { layer_id, sorted_gamma, channel_ids: imp.order })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HingeMethod {
    MaxRatioDrop,
    Manual,
}

impl fmt::Display for HingeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HingeMethod::MaxRatioDrop => "max_ratio_drop",
            HingeMethod::Manual => "manual",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HingeReport {
    pub layer_id: usize,
    pub keep_count: usize,
    pub method: HingeMethod,
    /// γ_keep / γ_keep+1 at the cut; `None` when nothing is pruned.
    pub drop_ratio: Option<f64>,
}

impl HingeReport {
    pub fn prunes(&self) -> bool {
        self.drop_ratio.is_some()
    }
}

fn adjacent_ratio(curve: &MagnitudeCurve, keep: usize, floor: f64) -> f64 {
    curve.sorted_gamma[keep - 1] / curve.sorted_gamma[keep].max(floor)
}

/// Keeps the channels before the largest adjacent drop whose ratio reaches
/// `min_drop_ratio`. Equal ratios resolve to the larger keep count.
pub fn detect_hinge(curve: &MagnitudeCurve, min_drop_ratio: f64, floor: f64) -> Result<HingeReport> {
    if !(min_drop_ratio > 1.0) {
        return Err(Error::Config(format!("minimum drop ratio must exceed 1, got {min_drop_ratio}")));
    }
    if !(floor >= 0.0) {
        return Err(Error::Config(format!("floor must be non-negative, got {floor}")));
    }
    let n = curve.sorted_gamma.len();
    let mut best: Option<(usize, f64)> = None;
    for keep in 1..n {
        let r = adjacent_ratio(curve, keep, floor);
        if r >= min_drop_ratio && best.is_none_or(|(_, b)| r >= b) {
            best = Some((keep, r));
        }
    }
    Ok(match best {
        Some((keep_count, r)) => {
            HingeReport { layer_id: curve.layer_id, keep_count, method: HingeMethod::MaxRatioDrop, drop_ratio: Some(r) }
        }
        None => {
            HingeReport { layer_id: curve.layer_id, keep_count: n, method: HingeMethod::MaxRatioDrop, drop_ratio: None }
        }
    })
}

pub fn manual_hinge(curve: &MagnitudeCurve, keep_count: usize) -> Result<HingeReport> {
    let n = curve.sorted_gamma.len();
    if keep_count < 1 || keep_count > n {
        return Err(Error::Plan(format!("layer {}: manual keep count {keep_count} outside [1, {n}]", curve.layer_id)));
    }
    let drop_ratio = (keep_count < n).then(|| adjacent_ratio(curve, keep_count, DEFAULT_FLOOR));
    Ok(HingeReport { layer_id: curve.layer_id, keep_count, method: HingeMethod::Manual, drop_ratio })
}

/// Curves and hinge reports for every prunable layer. `manual` maps layer ids
/// to forced keep counts.
pub fn detect_all(
    graph: &NetworkGraph,
    min_drop_ratio: f64,
    floor: f64,
    manual: &BTreeMap<usize, usize>,
) -> Result<(Vec<MagnitudeCurve>, Vec<HingeReport>)> {
    let ids = penalized_layer_ids(graph);
    if let Some(bad) = manual.keys().find(|id| !ids.contains(id)) {
        return Err(Error::Plan(format!("manual keep for layer {bad}, which is not a prunable layer")));
    }
    let mut curves = Vec::with_capacity(ids.len());
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let curve = magnitude_curve(graph, id)?;
        let report = match manual.get(&id) {
            Some(&k) => manual_hinge(&curve, k)?,
            None => detect_hinge(&curve, min_drop_ratio, floor)?,
        };
        curves.push(curve);
        reports.push(report);
    }
    Ok((curves, reports))
}

/// Kept output channels per layer and the input channels they induce in consumers.
/// Ids are original channel indices in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruningPlan {
    pub output_keep: BTreeMap<usize, Vec<usize>>,
    pub input_keep: BTreeMap<usize, Vec<usize>>,
}

impl PruningPlan {
    pub fn identity(graph: &NetworkGraph) -> Self {
        let output_keep = graph.layers().iter().map(|l| (l.id, (0..l.out_ch).collect())).collect();
        let input_keep = induced_inputs(graph, &output_keep);
        Self { output_keep, input_keep }
    }

    pub fn is_identity(&self, graph: &NetworkGraph) -> bool {
        graph.layers().iter().all(|l| self.output_keep.get(&l.id).is_some_and(|k| k.len() == l.out_ch))
    }

    /// Plan from explicit output keep-sets; layers not listed keep everything.
    pub fn from_output_keep(graph: &NetworkGraph, keep: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut output_keep = BTreeMap::new();
        for l in graph.layers() {
            let mut k = keep.get(&l.id).cloned().unwrap_or_else(|| (0..l.out_ch).collect());
            k.sort_unstable();
            k.dedup();
            if k.is_empty() {
                return Err(Error::Plan(format!("layer {} would keep no channels", l.id)));
            }
            if let Some(&c) = k.iter().find(|&&c| c >= l.out_ch) {
                return Err(Error::Plan(format!("layer {}: channel {c} out of range ({} channels)", l.id, l.out_ch)));
            }
            output_keep.insert(l.id, k);
        }
        if let Some(id) = keep.keys().find(|id| graph.layer(**id).is_none()) {
            return Err(Error::Plan(format!("keep-set for unknown layer {id}")));
        }
        let out = graph.output_layer_id()?;
        if output_keep[&out].len() != graph.layer(out).expect("exists").out_ch {
            return Err(Error::Plan(format!("output layer {out} must keep all its channels")));
        }
        let input_keep = induced_inputs(graph, &output_keep);
        Ok(Self { output_keep, input_keep })
    }
}

fn induced_inputs(graph: &NetworkGraph, output_keep: &BTreeMap<usize, Vec<usize>>) -> BTreeMap<usize, Vec<usize>> {
    graph
        .layers()
        .iter()
        .map(|l| {
            let mut keep = Vec::with_capacity(l.in_ch);
            let mut offset = 0;
            for s in &l.input_sources {
                match s {
                    Source::Input => {
                        keep.extend(offset..offset + graph.input_channels());
                        offset += graph.input_channels();
                    }
                    Source::Layer(p) => {
                        keep.extend(output_keep[p].iter().map(|c| c + offset));
                        offset += graph.layer(*p).expect("validated graph").out_ch;
                    }
                }
            }
            (l.id, keep)
        })
        .collect()
}

/// Keeps the top `keep_count` channels of each reported layer.
pub fn build_pruning_plan(graph: &NetworkGraph, hinges: &[HingeReport]) -> Result<PruningPlan> {
    let ids = penalized_layer_ids(graph);
    let mut reported: Vec<usize> = hinges.iter().map(|h| h.layer_id).collect();
    reported.sort_unstable();
    let mut expected = ids.clone();
    expected.sort_unstable();
    if reported != expected {
        return Err(Error::Plan(format!("need one hinge report per prunable layer {ids:?}, got {reported:?}")));
    }
    let mut keep = BTreeMap::new();
    for h in hinges {
        let curve = magnitude_curve(graph, h.layer_id)?;
        if h.keep_count < 1 || h.keep_count > curve.channel_ids.len() {
            return Err(Error::Plan(format!(
                "layer {}: keep count {} outside [1, {}]",
                h.layer_id,
                h.keep_count,
                curve.channel_ids.len()
            )));
        }
        keep.insert(h.layer_id, curve.channel_ids[..h.keep_count].to_vec());
    }
    PruningPlan::from_output_keep(graph, keep)
}

/// Checks that every consumer's input keep-set is the concatenation of its
/// producers' output keep-sets.
pub fn check_plan(graph: &NetworkGraph, plan: &PruningPlan) -> Result<()> {
    for l in graph.layers() {
        let out = plan
            .output_keep
            .get(&l.id)
            .ok_or_else(|| Error::Structural(format!("plan has no output keep-set for layer {}", l.id)))?;
        if out.is_empty() || out.windows(2).any(|w| w[0] >= w[1]) || out.iter().any(|&c| c >= l.out_ch) {
            return Err(Error::Structural(format!("layer {}: malformed output keep-set", l.id)));
        }
    }
    let expected = induced_inputs(graph, &plan.output_keep);
    for l in graph.layers() {
        let got = plan
            .input_keep
            .get(&l.id)
            .ok_or_else(|| Error::Structural(format!("plan has no input keep-set for layer {}", l.id)))?;
        if *got != expected[&l.id] {
            let edge = l
                .input_sources
                .iter()
                .map(|s| match s {
                    Source::Input => "input".to_string(),
                    Source::Layer(p) => format!("layer {p}"),
                })
                .collect::<Vec<_>>()
                .join(" + ");
            return Err(Error::Structural(format!(
                "edge {edge} -> layer {}: input keep-set disagrees with producer keep-sets",
                l.id
            )));
        }
    }
    let out = graph.output_layer_id()?;
    if plan.output_keep[&out].len() != graph.layer(out).expect("exists").out_ch {
        return Err(Error::Structural(format!("output layer {out} must keep all its channels")));
    }
    Ok(())
}

/// Slices every weight on its output and input channel axes.
pub fn apply_pruning(graph: &NetworkGraph, plan: &PruningPlan) -> Result<NetworkGraph> {
    check_plan(graph, plan)?;
    let mut layers = Vec::with_capacity(graph.layers().len());
    let mut weights = Vec::with_capacity(graph.layers().len());
    for (l, w) in graph.layers().iter().zip(graph.weights()) {
        let out = &plan.output_keep[&l.id];
        let inp = &plan.input_keep[&l.id];
        let mut w = w.clone();
        w.clear_grad();
        if out.len() != l.out_ch {
            w = w.select(l.out_axis(), out)?;
        }
        if inp.len() != l.in_ch {
            w = w.select(l.in_axis(), inp)?;
        }
        let mut spec = l.clone();
        spec.out_ch = out.len();
        spec.in_ch = inp.len();
        layers.push(spec);
        weights.push(w);
    }
    NetworkGraph::new(graph.input_channels(), layers, weights, graph.skip_edges().to_vec())
}

/// The original graph with pruned output channels and their downstream input
/// slices set to zero.
pub fn mask_pruned(graph: &NetworkGraph, plan: &PruningPlan) -> Result<NetworkGraph> {
    check_plan(graph, plan)?;
    let mut masked = graph.clone();
    for l in graph.layers().to_vec() {
        let drop_out: Vec<usize> = complement(&plan.output_keep[&l.id], l.out_ch);
        let drop_in: Vec<usize> = complement(&plan.input_keep[&l.id], l.in_ch);
        let idx = masked.index_of(l.id).expect("same graph");
        let w = &mut masked.weights_mut()[idx];
        w.zero_along(l.out_axis(), &drop_out);
        w.zero_along(l.in_axis(), &drop_in);
    }
    Ok(masked)
}

fn complement(keep: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|c| keep.binary_search(c).is_err()).collect()
}

/// Rows of (layer id, rank, channel, gamma, keep flag) for every curve.
pub fn curve_report(curves: &[MagnitudeCurve], hinges: &[HingeReport]) -> Result<Report> {
    let mut report = Report::new(&["layer_id", "rank", "channel", "gamma", "keep"]);
    for c in curves {
        let h = hinges
            .iter()
            .find(|h| h.layer_id == c.layer_id)
            .ok_or_else(|| Error::Plan(format!("no hinge report for layer {}", c.layer_id)))?;
        for (rank, (&ch, &g)) in c.channel_ids.iter().zip(&c.sorted_gamma).enumerate() {
            report.push(vec![
                c.layer_id.to_string(),
                (rank + 1).to_string(),
                ch.to_string(),
                g.to_string(),
                u8::from(rank < h.keep_count).to_string(),
            ]);
        }
    }
    Ok(report)
}

/// One row per hinge: layer id, channel count, kept count, method, drop ratio.
pub fn hinge_report(curves: &[MagnitudeCurve], hinges: &[HingeReport]) -> Report {
    let mut report = Report::new(&["layer_id", "out_ch", "keep_count", "method", "drop_ratio"]);
    for h in hinges {
        let n = curves.iter().find(|c| c.layer_id == h.layer_id).map_or(h.keep_count, |c| c.sorted_gamma.len());
        report.push(vec![
            h.layer_id.to_string(),
            n.to_string(),
            h.keep_count.to_string(),
            h.method.to_string(),
            h.drop_ratio.map(|r| r.to_string()).unwrap_or_default(),
        ]);
    }
    report
}
