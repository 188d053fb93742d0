//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node; node order is therefore a topological
//! order and [`Tape::backward`] simply walks it in reverse. Gradients are
//! accumulated in a fixed order, so a backward pass is reproducible bit for
//! bit. Scalar-valued nodes (losses, penalties, weighted sums) also carry an
//! `f64` value so loss bookkeeping does not suffer from `f32` rounding.

use crate::error::{Error, Result};
use crate::kernels::{self, Activation};
use crate::tensor::Tensor;

/// BCE inputs are clamped to `[BCE_EPS, 1 − BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, stride: usize, padding: usize },
    ConvTranspose2d { input: Var, weight: Var, stride: usize, padding: usize },
    Concat { parts: Vec<Var> },
    Activation { input: Var, kind: Activation },
    InstanceNorm { input: Var, inv_std: Vec<f32> },
    L1 { pred: Var, target: Var },
    Bce { pred: Var, target: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    ChannelL1 { weight: Var, axis: usize, coef: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    scalar: Option<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, scalar: Option<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, scalar, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, None, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, None, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    /// The `f64` value of a scalar node; falls back to the stored `f32`.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        n.scalar.unwrap_or_else(|| n.value.data()[0] as f64)
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), stride, padding)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(out, None, Op::Conv2d { input, weight, stride, padding }, rg))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv_transpose2d(self.value(input), self.value(weight), stride, padding)?;
        let rg = self.needs(input) || self.needs(weight);
        Ok(self.push(out, None, Op::ConvTranspose2d { input, weight, stride, padding }, rg))
    }

    /// Concatenates rank-4 tensors along the channel axis, first part first.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concatenation of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Dimension(format!(
                    "cannot concatenate {:?} with {:?}: batch/spatial sizes differ",
                    self.value(*first).shape(),
                    self.value(p).shape()
                )));
            }
            channels.push(pc);
        }
        if parts.len() == 1 {
            return Ok(*first);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&self.value(p).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], data)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, None, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        kind.validate()?;
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(input);
        Ok(self.push(out, None, Op::Activation { input, kind }, rg))
    }

    pub fn instance_norm(&mut self, input: Var) -> Result<Var> {
        let (out, inv_std) = kernels::instance_norm(self.value(input))?;
        let rg = self.needs(input);
        Ok(self.push(out, None, Op::InstanceNorm { input, inv_std }, rg))
    }

    /// mean |pred − target|.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape(p, t, "l1 loss")?;
        let sum: f64 = p.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        let loss = sum / p.numel() as f64;
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(loss as f32), Some(loss), Op::L1 { pred, target }, rg))
    }

    /// −mean[t·log p + (1−t)·log(1−p)] with p clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    /// Only `pred` receives a gradient.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape(p, t, "bce loss")?;
        if let Some(bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("bce prediction {bad} outside [0, 1]")));
        }
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| {
                let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
                let t = t as f64;
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = sum / p.numel() as f64;
        let rg = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss as f32), Some(loss), Op::Bce { pred, target }, rg))
    }

    /// Σ coefficient·term over one-element terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::Dimension(format!(
                    "weighted sum term has shape {:?}, expected a scalar",
                    self.value(v).shape()
                )));
            }
            total += c * self.scalar(v);
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total as f32), Some(total), Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Σ_c coef[c]·‖slice c of `weight` along `axis`‖₁.
    ///
    /// The coefficients are fixed for this node, so the gradient is
    /// coef[c]·sign(w) with sign(0) = 0.
    pub fn channel_l1(&mut self, weight: Var, axis: usize, coef: &[f32]) -> Result<Var> {
        let w = self.value(weight);
        let (d0, d1, kh, kw) = w.dims4()?;
        let channels = match axis {
            0 => d0,
            1 => d1,
            _ => return Err(Error::Dimension(format!("channel axis must be 0 or 1, got {axis}"))),
        };
        if coef.len() != channels {
            return Err(Error::Dimension(format!("{} channel coefficients for {channels} channels", coef.len())));
        }
        let k2 = kh * kw;
        let mut total = 0.0f64;
        for (i, block) in w.data().chunks(k2).enumerate() {
            let c = if axis == 0 { i / d1 } else { i % d1 };
            let l1: f64 = block.iter().map(|&v| (v as f64).abs()).sum();
            total += coef[c] as f64 * l1;
        }
        let rg = self.needs(weight);
        let op = Op::ChannelL1 { weight, axis, coef: coef.to_vec() };
        Ok(self.push(Tensor::scalar(total as f32), Some(total), op, rg))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a one-element node. Gradients of all nodes
    /// created before `loss` are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!("backward needs a scalar, got shape {:?}", self.value(loss).shape())));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.node_backward(i, &g)?;
            // Leaves keep their gradient; interior gradients are dropped once propagated.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
            for (v, dv) in contributions {
                self.accumulate(v, dv);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, weight, stride, padding } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.needs(input),
                    self.needs(weight),
                )?;
                out.extend(dx.map(|d| (input, d)));
                out.extend(dw.map(|d| (weight, d)));
            }
            &Op::ConvTranspose2d { input, weight, stride, padding } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    padding,
                    self.needs(input),
                    self.needs(weight),
                )?;
                out.extend(dx.map(|d| (input, d)));
                out.extend(dw.map(|d| (weight, d)));
            }
            Op::Concat { parts } => {
                let (n, total, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        out.push((p, d));
                    }
                    offset += c;
                }
            }
            &Op::Activation { input, kind } => {
                let x = self.value(input).data();
                let y = node.value.data();
                let d = g.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * kind.derivative(x, y)).collect();
                out.push((input, d));
            }
            Op::InstanceNorm { input, inv_std } => {
                out.push((*input, kernels::instance_norm_backward(&node.value, inv_std, g)?));
            }
            &Op::L1 { pred, target } => {
                let scale = g[0] / self.value(pred).numel() as f32;
                let signs: Vec<f32> = self
                    .value(pred)
                    .data()
                    .iter()
                    .zip(self.value(target).data())
                    .map(|(&p, &t)| sign(p - t) * scale)
                    .collect();
                if self.needs(target) {
                    out.push((target, signs.iter().map(|v| -v).collect()));
                }
                if self.needs(pred) {
                    out.push((pred, signs));
                }
            }
            &Op::Bce { pred, target } => {
                let n = self.value(pred).numel() as f64;
                let scale = g[0] as f64 / n;
                let d = self
                    .value(pred)
                    .data()
                    .iter()
                    .zip(self.value(target).data())
                    .map(|(&p, &t)| {
                        let p = (p as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
                        let t = t as f64;
                        (scale * (-(t / p) + (1.0 - t) / (1.0 - p))) as f32
                    })
                    .collect();
                out.push((pred, d));
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        out.push((v, vec![(g[0] as f64 * c) as f32]));
                    }
                }
            }
            Op::ChannelL1 { weight, axis, coef } => {
                let w = self.value(*weight);
                let (_, d1, kh, kw) = w.dims4()?;
                let k2 = kh * kw;
                let mut d = vec![0.0; w.numel()];
                for (i, (block, dblock)) in w.data().chunks(k2).zip(d.chunks_mut(k2)).enumerate() {
                    let c = if *axis == 0 { i / d1 } else { i % d1 };
                    let s = coef[c] * g[0];
                    for (dv, &v) in dblock.iter_mut().zip(block) {
                        *dv = s * sign(v);
                    }
                }
                out.push((*weight, d));
            }
        }
        Ok(out)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn l1_of_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], vec![1., 2.]));
        let b = tape.constant(t(&[2], vec![2., 4.]));
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.scalar(l), 1.5);
        let same = tape.l1_loss(a, a).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
    }

    #[test]
    fn bce_half_against_ones_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::full(&[1, 1, 2, 2], 0.5));
        let y = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let l = tape.bce_loss(p, y).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-7);
        tape.backward(l).unwrap();
        // d/dp of −log p / 4 at 0.5 is −0.5.
        for &g in tape.grad(p).unwrap() {
            assert!((g + 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_rejects_out_of_domain_and_clamps_saturation() {
        let mut tape = Tape::new();
        let bad = tape.constant(t(&[2], vec![1.5, 0.5]));
        let y = tape.constant(t(&[2], vec![1., 1.]));
        assert!(matches!(tape.bce_loss(bad, y), Err(Error::Domain(_))));
        let sat = tape.constant(t(&[2], vec![0.0, 1.0]));
        let l = tape.bce_loss(sat, y).unwrap();
        assert!(tape.scalar(l).is_finite());
        assert!((tape.scalar(l) - (-(BCE_EPS.ln())) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn concat_gradient_splits() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[1, 2, 4, 4], 1.0));
        let b = tape.param(Tensor::full(&[1, 3, 4, 4], 2.0));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 4, 4]);
        assert_eq!(&tape.value(c).data()[..32], &[1.0; 32]);
        assert_eq!(&tape.value(c).data()[32..], &[2.0; 48]);
        let zero = tape.constant(Tensor::zeros(&[1, 5, 4, 4]));
        let l = tape.l1_loss(c, zero).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().len(), 32);
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 1.0 / 80.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 3, 4]));
        assert!(matches!(tape.concat_channels(&[a, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn channel_l1_value_and_gradient() {
        let mut tape = Tape::new();
        // Two output channels of a 1×1 conv with two inputs.
        let w = tape.param(t(&[2, 2, 1, 1], vec![1., -1., 0.5, 0.5]));
        let l = tape.channel_l1(w, 0, &[1.0, 2.0]).unwrap();
        assert_eq!(tape.scalar(l), 2.0 + 2.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1., -1., 2., 2.]);
        let w_t = tape.param(t(&[2, 2, 1, 1], vec![1., -1., 0.5, 0.5]));
        let l_t = tape.channel_l1(w_t, 1, &[1.0, 2.0]).unwrap();
        assert_eq!(tape.scalar(l_t), 1.5 + 3.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.param(Tensor::full(&[1, 1, 3, 3], 0.5));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let l = tape.l1_loss(y, z).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 9]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
