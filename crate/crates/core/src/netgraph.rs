//! Declarative convolutional graphs.
//!
//! A [`NetworkGraph`] is the single source of truth for channel connectivity:
//! every layer lists the sources whose channel concatenation feeds it, and
//! U-net skip connections are additionally recorded as explicit edges. The
//! pruning surgery in [`crate::hingeprune`] relies on nothing else.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{conv_output_size, conv_transpose_output_size, Activation};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// Where a layer's input channels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Option<Activation>,
    pub instance_norm: bool,
    /// Channel-concatenated, in order, to form the layer input.
    pub input_sources: Vec<Source>,
}

impl LayerSpec {
    /// `(out, in, k, k)` for conv, `(in, out, k, k)` for transposed conv.
    pub fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            LayerKind::Conv => [self.out_ch, self.in_ch, self.kernel, self.kernel],
            LayerKind::ConvTranspose => [self.in_ch, self.out_ch, self.kernel, self.kernel],
        }
    }

    /// Weight axis indexing this layer's output channels.
    pub fn out_axis(&self) -> usize {
        match self.kind {
            LayerKind::Conv => 0,
            LayerKind::ConvTranspose => 1,
        }
    }

    pub fn in_axis(&self) -> usize {
        1 - self.out_axis()
    }

    pub fn output_size(&self, input_size: usize) -> Result<usize> {
        match self.kind {
            LayerKind::Conv => conv_output_size(input_size, self.kernel, self.stride, self.padding),
            LayerKind::ConvTranspose => conv_transpose_output_size(input_size, self.kernel, self.stride, self.padding),
        }
    }

    pub fn params(&self) -> u64 {
        (self.kernel * self.kernel * self.in_ch * self.out_ch) as u64
    }

    /// Multiply-accumulates for one square input of side `input_size`.
    ///
    /// A convolution is charged per output position; a transposed convolution
    /// per input position (the count of the convolution it is the gradient of).
    pub fn macs(&self, input_size: usize) -> Result<u64> {
        let positions = match self.kind {
            LayerKind::Conv => self.output_size(input_size)?.pow(2),
            LayerKind::ConvTranspose => {
                self.output_size(input_size)?;
                input_size.pow(2)
            }
        };
        Ok(positions as u64 * self.params())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub layer_ids: Vec<usize>,
    pub per_layer_macs: Vec<u64>,
    pub per_layer_params: Vec<u64>,
    pub total_macs: u64,
    pub total_params: u64,
}

impl MacReport {
    pub fn macs_of(&self, layer_id: usize) -> Option<u64> {
        self.layer_ids.iter().position(|&id| id == layer_id).map(|i| self.per_layer_macs[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    layers: Vec<LayerSpec>,
    weights: Vec<Tensor>,
    skip_edges: Vec<(usize, usize)>,
    input_channels: usize,
}

impl NetworkGraph {
    /// Validates and assembles a graph. Layers may be stored in any order;
    /// execution order is derived from `input_sources`.
    pub fn new(
        input_channels: usize,
        layers: Vec<LayerSpec>,
        weights: Vec<Tensor>,
        skip_edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let graph = Self { layers, weights, skip_edges, input_channels };
        graph.validate()?;
        Ok(graph)
    }

    /// A graph with zero weights.
    pub fn zeroed(input_channels: usize, layers: Vec<LayerSpec>, skip_edges: Vec<(usize, usize)>) -> Result<Self> {
        let weights = layers.iter().map(|l| Tensor::zeros(&l.weight_shape())).collect();
        Self::new(input_channels, layers, weights, skip_edges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("graph needs at least one input channel".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("graph has no layers".into()));
        }
        if self.weights.len() != self.layers.len() {
            return Err(Error::Structural(format!(
                "{} weight tensors for {} layers",
                self.weights.len(),
                self.layers.len()
            )));
        }
        let mut out_ch = HashMap::new();
        for l in &self.layers {
            if out_ch.insert(l.id, l.out_ch).is_some() {
                return Err(Error::Structural(format!("duplicate layer id {}", l.id)));
            }
        }
        for (l, w) in self.layers.iter().zip(&self.weights) {
            if l.kernel == 0 || l.stride == 0 || l.in_ch == 0 || l.out_ch == 0 {
                return Err(Error::Config(format!("layer {}: sizes must be positive", l.id)));
            }
            if let Some(a) = l.activation {
                a.validate()?;
            }
            if l.input_sources.is_empty() {
                return Err(Error::Structural(format!("layer {} has no input sources", l.id)));
            }
            let mut fed = 0;
            for s in &l.input_sources {
                fed += match *s {
                    Source::Input => self.input_channels,
                    Source::Layer(p) if p == l.id => {
                        return Err(Error::Structural(format!("layer {} feeds itself", l.id)))
                    }
                    Source::Layer(p) => *out_ch
                        .get(&p)
                        .ok_or_else(|| Error::Structural(format!("layer {} reads unknown layer {p}", l.id)))?,
                };
            }
            if fed != l.in_ch {
                return Err(Error::Structural(format!(
                    "layer {} declares {} input channels but its sources provide {fed}",
                    l.id, l.in_ch
                )));
            }
            if w.shape() != l.weight_shape() {
                return Err(Error::Structural(format!(
                    "layer {} weight shape {:?}, expected {:?}",
                    l.id,
                    w.shape(),
                    l.weight_shape()
                )));
            }
        }
        let order = self.topo_order()?;
        let rank: HashMap<usize, usize> = order.iter().enumerate().map(|(r, &i)| (self.layers[i].id, r)).collect();
        for &(p, c) in &self.skip_edges {
            let (Some(rp), Some(rc)) = (rank.get(&p), rank.get(&c)) else {
                return Err(Error::Structural(format!("skip edge {p}→{c} names an unknown layer")));
            };
            if rp >= rc {
                return Err(Error::Structural(format!("skip edge {p}→{c} does not run forward")));
            }
            if !self.layer(c).unwrap().input_sources.contains(&Source::Layer(p)) {
                return Err(Error::Structural(format!("skip edge {p}→{c} is not among layer {c}'s sources")));
            }
        }
        self.output_layer_id()?;
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Mutable weights; shapes must be preserved.
    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn skip_edges(&self) -> &[(usize, usize)] {
        &self.skip_edges
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn layer(&self, id: usize) -> Option<&LayerSpec> {
        self.index_of(id).map(|i| &self.layers[i])
    }

    pub fn weight(&self, id: usize) -> Option<&Tensor> {
        self.index_of(id).map(|i| &self.weights[i])
    }

    /// Replaces the weight of one layer, keeping its shape.
    pub fn set_weight(&mut self, id: usize, weight: Tensor) -> Result<()> {
        let i = self.index_of(id).ok_or_else(|| Error::Structural(format!("no layer {id}")))?;
        if weight.shape() != self.layers[i].weight_shape() {
            return Err(Error::Dimension(format!(
                "layer {id} expects weight {:?}, got {:?}",
                self.layers[i].weight_shape(),
                weight.shape()
            )));
        }
        self.weights[i] = weight;
        Ok(())
    }

    pub fn into_parts(self) -> (usize, Vec<LayerSpec>, Vec<Tensor>, Vec<(usize, usize)>) {
        (self.input_channels, self.layers, self.weights, self.skip_edges)
    }

    /// Storage indices in execution order: Kahn's algorithm, lowest id first
    /// among ready layers, so the order depends only on ids and edges.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<usize, usize> = self.layers.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
        let mut indegree = vec![0usize; self.layers.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for s in &l.input_sources {
                if let Source::Layer(p) = s {
                    let pi = *index
                        .get(p)
                        .ok_or_else(|| Error::Structural(format!("layer {} reads unknown layer {p}", l.id)))?;
                    indegree[i] += 1;
                    consumers[pi].push(i);
                }
            }
        }
        let mut ready: BTreeSet<(usize, usize)> =
            self.layers.iter().enumerate().filter(|(i, _)| indegree[*i] == 0).map(|(i, l)| (l.id, i)).collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some((_, i)) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert((self.layers[c].id, c));
                }
            }
        }
        if order.len() != self.layers.len() {
            return Err(Error::Structural("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Ids of the layers that read from `id`, in storage order.
    pub fn consumers_of(&self, id: usize) -> Vec<usize> {
        self.layers.iter().filter(|l| l.input_sources.contains(&Source::Layer(id))).map(|l| l.id).collect()
    }

    /// The unique layer whose output nobody consumes.
    pub fn output_layer_id(&self) -> Result<usize> {
        let sinks: Vec<usize> =
            self.layers.iter().filter(|l| self.consumers_of(l.id).is_empty()).map(|l| l.id).collect();
        match sinks[..] {
            [id] => Ok(id),
            _ => Err(Error::Structural(format!("graph must have exactly one output layer, found {sinks:?}"))),
        }
    }

    /// Every layer except the output layer, in execution order.
    pub fn prunable_layer_ids(&self) -> Vec<usize> {
        let out = self.output_layer_id().ok();
        self.topo_order()
            .unwrap_or_default()
            .into_iter()
            .map(|i| self.layers[i].id)
            .filter(|&id| Some(id) != out)
            .collect()
    }

    /// Fills every weight with N(0, std²) draws, layers in storage order.
    pub fn init_normal<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f32) {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        for w in &mut self.weights {
            for v in w.data_mut() {
                *v = normal.sample(rng);
            }
        }
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(LayerSpec::params).sum()
    }

    /// Adds every weight to `tape`, as parameters or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights.iter().map(|w| if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) }).collect()
    }

    /// Runs the graph on `tape`. `params[i]` must hold the weight of storage index `i`.
    pub fn forward_on(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var> {
        if params.len() != self.layers.len() {
            return Err(Error::Config(format!("{} parameter handles for {} layers", params.len(), self.layers.len())));
        }
        let (_, c, _, _) = tape.value(input).dims4()?;
        if c != self.input_channels {
            return Err(Error::Dimension(format!("graph takes {} input channels, got {c}", self.input_channels)));
        }
        let order = self.topo_order()?;
        let mut outputs: HashMap<usize, Var> = HashMap::with_capacity(self.layers.len());
        for &i in &order {
            let l = &self.layers[i];
            let named = |e: Error| match e {
                Error::Dimension(m) => Error::Dimension(format!("layer {}: {m}", l.id)),
                Error::Config(m) => Error::Config(format!("layer {}: {m}", l.id)),
                other => other,
            };
            let sources: Vec<Var> = l
                .input_sources
                .iter()
                .map(|s| match s {
                    Source::Input => input,
                    Source::Layer(p) => outputs[p],
                })
                .collect();
            let x = tape.concat_channels(&sources).map_err(named)?;
            let mut y = match l.kind {
                LayerKind::Conv => tape.conv2d(x, params[i], l.stride, l.padding),
                LayerKind::ConvTranspose => tape.conv_transpose2d(x, params[i], l.stride, l.padding),
            }
            .map_err(named)?;
            if l.instance_norm {
                y = tape.instance_norm(y).map_err(named)?;
            }
            if let Some(a) = l.activation {
                y = tape.activation(y, a).map_err(named)?;
            }
            outputs.insert(l.id, y);
        }
        Ok(outputs[&self.output_layer_id()?])
    }

    /// Inference without gradient recording.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let params = self.register(&mut tape, false);
        let y = self.forward_on(&mut tape, x, &params)?;
        Ok(tape.value(y).clone())
    }

    /// Per-layer (input side, output side) for a square input of side `input_size`,
    /// by storage index.
    pub fn spatial_sizes(&self, input_size: usize) -> Result<Vec<(usize, usize)>> {
        let mut out_size: HashMap<usize, usize> = HashMap::new();
        let mut sizes = vec![(0, 0); self.layers.len()];
        for i in self.topo_order()? {
            let l = &self.layers[i];
            let mut side = None;
            for s in &l.input_sources {
                let v = match s {
                    Source::Input => input_size,
                    Source::Layer(p) => out_size[p],
                };
                if side.is_some_and(|prev| prev != v) {
                    return Err(Error::Dimension(format!("layer {}: sources disagree on spatial size", l.id)));
                }
                side = Some(v);
            }
            let inp = side.expect("validated non-empty sources");
            let out = l.output_size(inp).map_err(|e| Error::Config(format!("layer {}: {e}", l.id)))?;
            out_size.insert(l.id, out);
            sizes[i] = (inp, out);
        }
        Ok(sizes)
    }

    /// MAC and parameter counts per layer, in execution order.
    pub fn count_macs(&self, input_size: usize) -> Result<MacReport> {
        let sizes = self.spatial_sizes(input_size)?;
        let mut report = MacReport {
            layer_ids: Vec::new(),
            per_layer_macs: Vec::new(),
            per_layer_params: Vec::new(),
            total_macs: 0,
            total_params: 0,
        };
        for i in self.topo_order()? {
            let l = &self.layers[i];
            let macs = l.macs(sizes[i].0)?;
            report.layer_ids.push(l.id);
            report.per_layer_macs.push(macs);
            report.per_layer_params.push(l.params());
            report.total_macs += macs;
            report.total_params += l.params();
        }
        Ok(report)
    }

    /// Receptive field of a purely sequential convolution stack.
    pub fn receptive_field(&self) -> Result<usize> {
        let order = self.topo_order()?;
        let mut field = 1usize;
        let mut jump = 1usize;
        let mut prev = Source::Input;
        for &i in &order {
            let l = &self.layers[i];
            if l.kind != LayerKind::Conv || l.input_sources != [prev] {
                return Err(Error::UnsupportedTopology(format!(
                    "layer {} is not part of a sequential convolution stack",
                    l.id
                )));
            }
            field += (l.kernel - 1) * jump;
            jump *= l.stride;
            prev = Source::Layer(l.id);
        }
        Ok(field)
    }

    /// True when the two graphs have identical structure apart from channel counts.
    pub fn same_topology(&self, other: &NetworkGraph) -> bool {
        self.input_channels == other.input_channels
            && self.skip_edges == other.skip_edges
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.id == b.id
                    && a.kind == b.kind
                    && a.kernel == b.kernel
                    && a.stride == b.stride
                    && a.padding == b.padding
                    && a.activation == b.activation
                    && a.instance_norm == b.instance_norm
                    && a.input_sources == b.input_sources
            })
    }
}

/// Channel schedule: `min(base·2^d, cap)` for each of `depth` levels.
pub fn channel_schedule(base: usize, depth: usize, cap: usize) -> Vec<usize> {
    (0..depth).map(|d| base.saturating_mul(1usize.checked_shl(d as u32).unwrap_or(usize::MAX)).min(cap)).collect()
}

/// U-net generator shape. Encoder layers get ids `0..depth`, decoder layers
/// `depth..2·depth`; the last decoder layer is the image output.
#[derive(Clone, Debug, PartialEq)]
pub struct UnetSpec {
    pub base_channels: usize,
    pub depth: usize,
    pub cap: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    pub instance_norm: bool,
}

impl UnetSpec {
    pub fn new(base_channels: usize, depth: usize, cap: usize, input_size: usize) -> Self {
        Self { base_channels, depth, cap, input_size, input_channels: 3, output_channels: 3, instance_norm: false }
    }

    pub fn build(&self) -> Result<NetworkGraph> {
        let &Self { base_channels: base, depth, cap, input_size, .. } = self;
        if base == 0 || depth == 0 || cap == 0 || input_size == 0 {
            return Err(Error::Config("U-net sizes must be positive".into()));
        }
        if base > cap {
            return Err(Error::Config(format!("base channels {base} exceed cap {cap}")));
        }
        if depth >= usize::BITS as usize || input_size % (1usize << depth) != 0 {
            return Err(Error::Config(format!("input size {input_size} is not divisible by 2^{depth}")));
        }
        let ch = channel_schedule(base, depth, cap);
        let conv = |id, kind, in_ch, out_ch, activation, instance_norm, input_sources| LayerSpec {
            id,
            kind,
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            padding: 1,
            activation,
            instance_norm,
            input_sources,
        };
        let mut layers = Vec::with_capacity(2 * depth);
        for (i, &c) in ch.iter().enumerate() {
            let (src, in_ch) =
                if i == 0 { (Source::Input, self.input_channels) } else { (Source::Layer(i - 1), ch[i - 1]) };
            layers.push(conv(
                i,
                LayerKind::Conv,
                in_ch,
                c,
                Some(Activation::LeakyRelu(0.2)),
                self.instance_norm,
                vec![src],
            ));
        }
        let mut skips = Vec::new();
        for j in 0..depth {
            let id = depth + j;
            let last = j == depth - 1;
            let out_ch = if last { self.output_channels } else { ch[depth - 2 - j] };
            let (sources, in_ch) = if j == 0 {
                (vec![Source::Layer(depth - 1)], ch[depth - 1])
            } else {
                let skip = depth - 1 - j;
                skips.push((skip, id));
                (vec![Source::Layer(id - 1), Source::Layer(skip)], ch[depth - 1 - j] + ch[skip])
            };
            let (act, norm) = if last { (Activation::Tanh, false) } else { (Activation::Relu, self.instance_norm) };
            layers.push(conv(id, LayerKind::ConvTranspose, in_ch, out_ch, Some(act), norm, sources));
        }
        NetworkGraph::zeroed(self.input_channels, layers, skips)
    }
}

/// Zero-initialised U-net with 3 input and 3 output channels.
pub fn build_unet(base_channels: usize, depth: usize, cap: usize, input_size: usize) -> Result<NetworkGraph> {
    UnetSpec::new(base_channels, depth, cap, input_size).build()
}

/// PatchGAN discriminator with the usual 64-channel base capped at 512.
pub fn build_patchgan(input_channels: usize) -> Result<NetworkGraph> {
    build_patchgan_with(input_channels, 64, 512)
}

/// Four stride-2 convolutions (kernels 4, 4, 4, 3) followed by a 3×3 and a
/// 1×1 stride-1 convolution. Receptive field: 1+3+6+12+16+32+0 = 70.
pub fn build_patchgan_with(input_channels: usize, base_channels: usize, cap: usize) -> Result<NetworkGraph> {
    if input_channels == 0 || base_channels == 0 {
        return Err(Error::Config("PatchGAN sizes must be positive".into()));
    }
    let ch = channel_schedule(base_channels, 4, cap.max(base_channels));
    let leaky = Some(Activation::LeakyRelu(0.2));
    let geometry = [(4, 2, 1), (4, 2, 1), (4, 2, 1), (3, 2, 1), (3, 1, 1), (1, 1, 0)];
    let widths = [ch[0], ch[1], ch[2], ch[3], ch[3], 1];
    let mut layers = Vec::with_capacity(geometry.len());
    let mut in_ch = input_channels;
    for (id, (&(kernel, stride, padding), &out_ch)) in geometry.iter().zip(&widths).enumerate() {
        let last = id == geometry.len() - 1;
        layers.push(LayerSpec {
            id,
            kind: LayerKind::Conv,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            activation: if last { Some(Activation::Sigmoid) } else { leaky },
            instance_norm: false,
            input_sources: vec![if id == 0 { Source::Input } else { Source::Layer(id - 1) }],
        });
        in_ch = out_ch;
    }
    NetworkGraph::zeroed(input_channels, layers, Vec::new())
}
