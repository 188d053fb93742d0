//! Binary checkpoint format. All integers and reals are little-endian.
//!
//! ```text
//! magic            8 bytes  "CNDSCKPT"
//! version          u32
//! metadata count   u32, then (key str, value str) pairs
//! model count      u32, then per model:
//!   name           str
//!   input channels u32
//!   layer count    u32, then per layer:
//!     id u32, kind u8 (0 conv, 1 transposed), in_ch u32, out_ch u32,
//!     kernel u32, stride u32, padding u32,
//!     activation u8 (0 none, 1 relu, 2 leaky, 3 tanh, 4 sigmoid), slope f32,
//!     instance_norm u8,
//!     source count u32, then per source: tag u8 (0 input, 1 layer), id u32
//!   skip count     u32, then (from u32, to u32) pairs
//!   tensors        one per layer in storage order:
//!     name str, rank u32, dims u32 × rank, value count u64, f32 × count
//!   optimizer      u8 flag; when 1:
//!     step u64, beta1 f32, beta2 f32, epsilon f32, learning_rate f32,
//!     slot count u32, then per slot: value count u64, first f32 × count,
//!     second f32 × count
//! ```
//! A `str` is a u32 byte length followed by UTF-8 bytes. Trailing bytes are
//! rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::Activation;
use crate::netgraph::{LayerKind, LayerSpec, NetworkGraph, Source};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CNDSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRecord {
    pub name: String,
    pub graph: NetworkGraph,
    pub optimizer: Option<AdamState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub models: Vec<ModelRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn model(&self, name: &str) -> Option<&ModelRecord> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&ModelRecord> {
        self.model(name).ok_or_else(|| Error::Format(format!("checkpoint has no model named '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.models.len() as u32);
        for m in &self.models {
            write_model(&mut w, m);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return if MAGIC.starts_with(bytes) {
                Err(Error::Corruption(format!("truncated before end of magic ({} bytes)", bytes.len())))
            } else {
                Err(Error::Format("not a checkpoint (bad magic)".into()))
            };
        }
        if bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32("version")?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        if version == 0 {
            return Err(Error::Format("version 0 is not a valid checkpoint version".into()));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.count("metadata count", 8)? {
            let k = r.str("metadata key")?;
            let v = r.str("metadata value")?;
            metadata.insert(k, v);
        }
        let n = r.count("model count", 16)?;
        let mut models = Vec::with_capacity(n);
        for _ in 0..n {
            models.push(read_model(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { models, metadata })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }
}

fn write_model(w: &mut Writer, m: &ModelRecord) {
    let g = &m.graph;
    w.str(&m.name);
    w.u32(g.input_channels() as u32);
    w.u32(g.layers().len() as u32);
    for l in g.layers() {
        w.u32(l.id as u32);
        w.u8(match l.kind {
            LayerKind::Conv => 0,
            LayerKind::ConvTranspose => 1,
        });
        for v in [l.in_ch, l.out_ch, l.kernel, l.stride, l.padding] {
            w.u32(v as u32);
        }
        let (tag, slope) = match l.activation {
            None => (0, 0.0),
            Some(Activation::Relu) => (1, 0.0),
            Some(Activation::LeakyRelu(s)) => (2, s),
            Some(Activation::Tanh) => (3, 0.0),
            Some(Activation::Sigmoid) => (4, 0.0),
        };
        w.u8(tag);
        w.f32(slope);
        w.u8(u8::from(l.instance_norm));
        w.u32(l.input_sources.len() as u32);
        for s in &l.input_sources {
            match s {
                Source::Input => {
                    w.u8(0);
                    w.u32(0);
                }
                Source::Layer(p) => {
                    w.u8(1);
                    w.u32(*p as u32);
                }
            }
        }
    }
    w.u32(g.skip_edges().len() as u32);
    for &(a, b) in g.skip_edges() {
        w.u32(a as u32);
        w.u32(b as u32);
    }
    for (l, t) in g.layers().iter().zip(g.weights()) {
        w.str(&format!("layer{}.weight", l.id));
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.u64(t.numel() as u64);
        w.floats(t.data());
    }
    match &m.optimizer {
        None => w.u8(0),
        Some(st) => {
            w.u8(1);
            w.u64(st.step_count);
            for v in [st.beta1, st.beta2, st.epsilon, st.learning_rate] {
                w.f32(v);
            }
            w.u32(st.first_moment.len() as u32);
            for (m1, m2) in st.first_moment.iter().zip(&st.second_moment) {
                w.u64(m1.len() as u64);
                w.floats(m1);
                w.floats(m2);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corruption(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    /// An element count, rejected early if the remaining bytes cannot hold
    /// that many elements of at least `min_size` bytes.
    fn count(&mut self, what: &str, min_size: usize) -> Result<usize> {
        let n = self.usize(what)?;
        self.check_room(n as u64, min_size, what)?;
        Ok(n)
    }
    fn check_room(&self, n: u64, size: usize, what: &str) -> Result<()> {
        let room = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(size as u64) > room {
            return Err(Error::Corruption(format!("{what} {n} exceeds the remaining {room} bytes")));
        }
        Ok(())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.count(what, 1)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Corruption(format!("{what} is not valid UTF-8")))
    }
    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

fn read_model(r: &mut Reader) -> Result<ModelRecord> {
    let name = r.str("model name")?;
    let input_channels = r.usize("input channels")?;
    let n_layers = r.count("layer count", 32)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let id = r.usize("layer id")?;
        let kind = match r.u8("layer kind")? {
            0 => LayerKind::Conv,
            1 => LayerKind::ConvTranspose,
            k => return Err(Error::Corruption(format!("layer {id}: unknown kind tag {k}"))),
        };
        let in_ch = r.usize("in_ch")?;
        let out_ch = r.usize("out_ch")?;
        let kernel = r.usize("kernel")?;
        let stride = r.usize("stride")?;
        let padding = r.usize("padding")?;
        let tag = r.u8("activation")?;
        let slope = r.f32("slope")?;
        let activation = match tag {
            0 => None,
            1 => Some(Activation::Relu),
            2 => Some(Activation::LeakyRelu(slope)),
            3 => Some(Activation::Tanh),
            4 => Some(Activation::Sigmoid),
            t => return Err(Error::Corruption(format!("layer {id}: unknown activation tag {t}"))),
        };
        let instance_norm = match r.u8("instance norm flag")? {
            0 => false,
            1 => true,
            f => return Err(Error::Corruption(format!("layer {id}: bad instance norm flag {f}"))),
        };
        let n_src = r.count("source count", 5)?;
        let mut input_sources = Vec::with_capacity(n_src);
        for _ in 0..n_src {
            let tag = r.u8("source tag")?;
            let p = r.usize("source id")?;
            input_sources.push(match tag {
                0 => Source::Input,
                1 => Source::Layer(p),
                t => return Err(Error::Corruption(format!("layer {id}: unknown source tag {t}"))),
            });
        }
        layers.push(LayerSpec {
            id,
            kind,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            activation,
            instance_norm,
            input_sources,
        });
    }
    let n_skip = r.count("skip count", 8)?;
    let mut skips = Vec::with_capacity(n_skip);
    for _ in 0..n_skip {
        skips.push((r.usize("skip source")?, r.usize("skip target")?));
    }
    let mut weights = Vec::with_capacity(n_layers);
    for l in &layers {
        let tname = r.str("tensor name")?;
        let expect = format!("layer{}.weight", l.id);
        if tname != expect {
            return Err(Error::Corruption(format!("expected tensor '{expect}', found '{tname}'")));
        }
        let rank = r.count("tensor rank", 4)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize("tensor dim")?);
        }
        let n = r.u64("value count")?;
        let product = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if product != Some(n) {
            return Err(Error::Corruption(format!("tensor '{tname}': {n} values for shape {shape:?}")));
        }
        r.check_room(n, 4, "tensor values")?;
        let data = r.floats(n as usize, "tensor values")?;
        weights.push(Tensor::new(shape, data).map_err(|e| Error::Corruption(format!("tensor '{tname}': {e}")))?);
    }
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step_count = r.u64("step count")?;
            let beta1 = r.f32("beta1")?;
            let beta2 = r.f32("beta2")?;
            let epsilon = r.f32("epsilon")?;
            let learning_rate = r.f32("learning rate")?;
            let slots = r.count("optimizer slots", 8)?;
            let mut first_moment = Vec::with_capacity(slots);
            let mut second_moment = Vec::with_capacity(slots);
            for _ in 0..slots {
                let n = r.u64("moment length")?;
                r.check_room(n, 8, "moment values")?;
                first_moment.push(r.floats(n as usize, "first moment")?);
                second_moment.push(r.floats(n as usize, "second moment")?);
            }
            Some(AdamState { first_moment, second_moment, step_count, beta1, beta2, epsilon, learning_rate })
        }
        f => return Err(Error::Corruption(format!("bad optimizer flag {f}"))),
    };
    let graph = NetworkGraph::new(input_channels, layers, weights, skips)
        .map_err(|e| Error::Corruption(format!("model '{name}': {e}")))?;
    if let Some(st) = &optimizer {
        st.validate_for(graph.weights()).map_err(|e| Error::Corruption(format!("model '{name}': {e}")))?;
    }
    Ok(ModelRecord { name, graph, optimizer })
}
