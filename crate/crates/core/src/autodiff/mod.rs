//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. [`Tape::backward`] walks the nodes once, newest first, applying each
//! operation's chain rule. Values on the tape are never mutated after they are
//! recorded, so backward can be replayed any number of times.
//!
//! Gradients are only tracked for nodes that depend on a leaf created with
//! [`Tape::param`]; constants never accumulate gradient.

pub mod kernels;

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels::ConvGeom;

/// Label value excluded from the loss.
pub const IGNORE: u8 = 255;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernels: Var, bias: Option<Var>, geom: ConvGeom },
    TiledConv { z: Var, kernels: Var, offset: usize, pad: usize },
    Relu(Var),
    Mul { a: Var, b: Var, broadcast: bool },
    Add(Var, Var),
    Concat(Vec<Var>),
    Resize(Var),
    MaskedAverage { features: Var, mask: Var, count: T },
    CrossEntropy { logits: Var, grad: Tensor<T> },
    Sum(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Narrow { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Prototype { features: Var, pos: Var, neg: Var, temperature: T },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), rg, op)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), true, Op::Leaf)
    }

    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), true, Op::Leaf)
    }

    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), false, Op::Leaf)
    }

    pub fn constant_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), false, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let out = kernels::conv2d_forward(self.value(input), self.value(kernels), bias.map(|b| self.value(b)), &geom);
        let mut deps = vec![input, kernels];
        deps.extend(bias);
        Ok(self.push_owned(out, &deps, Op::Conv2d { input, kernels, bias, geom }))
    }

    /// Convolution (stride 1, "same" padding, no bias) of the vector `z`
    /// tiled over an `h`×`w` grid, without materializing the tiles. `z`
    /// meets kernel input channels `offset..offset + len(z)`.
    pub fn tiled_conv(&mut self, z: Var, kernels: Var, offset: usize, h: usize, w: usize) -> Result<Var> {
        let kh = self.value(kernels).shape().get(2).copied().unwrap_or(0);
        let pad = kh / 2;
        let out = kernels::tiled_conv_forward(self.value(z), self.value(kernels), offset, h, w, pad)?;
        Ok(self.push_owned(out, &[z, kernels], Op::TiledConv { z, kernels, offset, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_owned(out, &[x], Op::Relu(x))
    }

    /// Elementwise product; `b` may be `[1,H,W]` against `a`'s `[C,H,W]`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let broadcast = if sa == sb {
            false
        } else if sa.len() == 3 && sb.len() == 3 && sb[0] == 1 && sa[1..] == sb[1..] {
            true
        } else {
            return Err(Error::shape(format!("cannot multiply {sa:?} by {sb:?}")));
        };
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<T> = if broadcast {
            let hw = sb[1] * sb[2];
            av.data().iter().enumerate().map(|(i, &x)| x * bv.data()[i % hw]).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect()
        };
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push_owned(out, &[a, b], Op::Mul { a, b, broadcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("cannot add {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push_owned(out, &[a, b], Op::Add(a, b)))
    }

    /// Concatenates along the leading axis (channels for feature maps).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of no tensors"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "cannot concat {:?} with trailing extents {tail:?}",
                    v.shape()
                )));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push_owned(out, parts, Op::Concat(parts.to_vec())))
    }

    pub fn bilinear_resize(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let out = kernels::resize_forward(self.value(x), h2, w2)?;
        Ok(self.push_owned(out, &[x], Op::Resize(x)))
    }

    /// Mask-weighted mean feature vector and the mask total.
    pub fn masked_average(&mut self, features: Var, mask: Var) -> Result<(Var, T)> {
        let (z, count) = kernels::masked_average_forward(self.value(features), self.value(mask))?;
        let rg = self.requires_grad(features);
        Ok((self.push(Cow::Owned(z), rg, Op::MaskedAverage { features, mask, count }), count))
    }

    /// Mean softmax cross-entropy over pixels whose label is not [`IGNORE`].
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let (loss, grad) = kernels::cross_entropy(self.value(logits), target, IGNORE)?;
        Ok(self.push_owned(Tensor::scalar(loss), &[logits], Op::CrossEntropy { logits, grad }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_owned(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    /// `weight · input + bias` for a vector input.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let n = x.len();
        let [m, wn] = w.shape()[..] else {
            return Err(Error::shape(format!("linear weight must be 2-D, got {:?}", w.shape())));
        };
        if x.shape() != [n] || wn != n || b.shape() != [m] {
            return Err(Error::shape(format!(
                "linear {:?} x {:?} + {:?}",
                w.shape(),
                x.shape(),
                b.shape()
            )));
        }
        let out: Vec<T> = (0..m)
            .map(|j| {
                let row = &w.data()[j * n..(j + 1) * n];
                let mut acc = b.data()[j];
                for (&wi, &xi) in row.iter().zip(x.data()) {
                    acc += wi * xi;
                }
                acc
            })
            .collect();
        Ok(self.push_owned(Tensor::vector(out), &[input, weight, bias], Op::Linear { input, weight, bias }))
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(self.value(input), axis, start, len)?;
        Ok(self.push_owned(out, &[input], Op::Narrow { input, axis, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        Ok(self.push_owned(out, &[input], Op::Reshape(input)))
    }

    /// Two-class nearest-prototype logits: channel 0 is `−‖f−neg‖²/τ`,
    /// channel 1 is `−‖f−pos‖²/τ`, per feature cell.
    pub fn prototype_logits(&mut self, features: Var, pos: Var, neg: Var, temperature: T) -> Result<Var> {
        let f = self.value(features);
        let (c, h, w) = f.dims3()?;
        let (p, n) = (self.value(pos), self.value(neg));
        if p.shape() != [c] || n.shape() != [c] {
            return Err(Error::shape(format!(
                "prototypes {:?}/{:?} for {c} channels",
                p.shape(),
                n.shape()
            )));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); 2 * hw];
        for (k, proto) in [n, p].into_iter().enumerate() {
            let dst = &mut out[k * hw..(k + 1) * hw];
            for ch in 0..c {
                let pc = proto.data()[ch];
                for (d, &fv) in dst.iter_mut().zip(f.plane(ch)) {
                    let diff = fv - pc;
                    *d += diff * diff;
                }
            }
            for d in dst.iter_mut() {
                *d = -*d / temperature;
            }
        }
        let out = Tensor::new([2, h, w], out)?;
        Ok(self.push_owned(out, &[features, pos, neg], Op::Prototype { features, pos, neg, temperature }))
    }

    /// `Σ weight·part` over same-shaped parts.
    pub fn weighted_sum(&mut self, parts: &[(Var, T)]) -> Result<Var> {
        let (first, _) = parts.first().ok_or_else(|| Error::contract("weighted sum of nothing"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = Tensor::zeros(shape.clone());
        for &(v, wgt) in parts {
            let x = self.value(v);
            if x.shape() != shape {
                return Err(Error::shape(format!("weighted sum of {:?} and {shape:?}", x.shape())));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += wgt * b;
            }
        }
        let deps: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.push_owned(acc, &deps, Op::WeightedSum(parts.to_vec())))
    }

    /// Gradients of a scalar `loss` w.r.t. every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!("backward from non-scalar of shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_rule(&node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let kept = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => Some(g.unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: kept })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn apply_rule(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernels, bias, geom } => {
                let want = [
                    self.requires_grad(*input),
                    self.requires_grad(*kernels),
                    bias.is_some_and(|b| self.requires_grad(b)),
                ];
                let [gx, gk, gb] =
                    kernels::conv2d_backward(self.value(*input), self.value(*kernels), g, geom, want);
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, gx);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernels, gk);
                }
                if let (Some(gb), Some(b)) = (gb, bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::TiledConv { z, kernels, offset, pad } => {
                let want = [self.requires_grad(*z), self.requires_grad(*kernels)];
                let [gz, gk] = kernels::tiled_conv_backward(self.value(*z), self.value(*kernels), *offset, g, *pad, want);
                if let Some(gz) = gz {
                    self.accumulate(grads, *z, gz);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernels, gk);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Mul { a, b, broadcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let data: Vec<T> = if *broadcast {
                        let hw = bv.len();
                        g.data().iter().enumerate().map(|(i, &gi)| gi * bv.data()[i % hw]).collect()
                    } else {
                        g.data().iter().zip(bv.data()).map(|(&gi, &bi)| gi * bi).collect()
                    };
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
                }
                if self.requires_grad(*b) {
                    let mut data = vec![T::zero(); bv.len()];
                    let hw = bv.len();
                    for (i, (&gi, &ai)) in g.data().iter().zip(av.data()).enumerate() {
                        data[i % hw] += gi * ai;
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), data)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, slice)?);
                    }
                    offset += n;
                }
            }
            Op::Resize(x) => {
                let gx = kernels::resize_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedAverage { features, mask, count } => {
                if *count != T::zero() {
                    let f = self.value(*features);
                    let m = self.value(*mask);
                    let (c, h, w) = f.dims3()?;
                    let hw = h * w;
                    let mut gf = vec![T::zero(); c * hw];
                    for ch in 0..c {
                        let s = g.data()[ch] / *count;
                        for (i, &mi) in m.data().iter().enumerate() {
                            gf[ch * hw + i] = s * mi;
                        }
                    }
                    self.accumulate(grads, *features, Tensor::new([c, h, w], gf)?);
                }
            }
            Op::CrossEntropy { logits, grad } => {
                let s = g.item();
                self.accumulate(grads, *logits, grad.map(|v| v * s));
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), s));
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let n = x.len();
                if self.requires_grad(*input) {
                    let mut gx = vec![T::zero(); n];
                    for (j, &gj) in g.data().iter().enumerate() {
                        for (gxi, &wji) in gx.iter_mut().zip(&w.data()[j * n..(j + 1) * n]) {
                            *gxi += gj * wji;
                        }
                    }
                    self.accumulate(grads, *input, Tensor::vector(gx));
                }
                if self.requires_grad(*weight) {
                    let gw: Vec<T> =
                        g.data().iter().flat_map(|&gj| x.data().iter().map(move |&xi| gj * xi)).collect();
                    self.accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), gw)?);
                }
                self.accumulate(grads, *bias, g.clone());
            }
            Op::Narrow { input, axis, start } => {
                let gx = kernels::narrow_backward(self.value(*input).shape(), *axis, *start, g);
                self.accumulate(grads, *input, gx);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, gx);
            }
            Op::Prototype { features, pos, neg, temperature } => {
                let f = self.value(*features);
                let (c, h, w) = f.dims3()?;
                let hw = h * w;
                let two = T::lit(2.0);
                let mut gf = vec![T::zero(); c * hw];
                for (k, proto) in [*neg, *pos].into_iter().enumerate() {
                    let pv = self.value(proto);
                    let gk = &g.data()[k * hw..(k + 1) * hw];
                    let mut gp = vec![T::zero(); c];
                    for ch in 0..c {
                        let pc = pv.data()[ch];
                        for (i, (&fv, &gi)) in f.plane(ch).iter().zip(gk).enumerate() {
                            // d/df of −(f−p)²/τ
                            let d = -two * (fv - pc) / *temperature * gi;
                            gf[ch * hw + i] += d;
                            gp[ch] -= d;
                        }
                    }
                    self.accumulate(grads, proto, Tensor::vector(gp));
                }
                self.accumulate(grads, *features, Tensor::new([c, h, w], gf)?);
            }
            Op::WeightedSum(parts) => {
                for &(v, wgt) in parts {
                    self.accumulate(grads, v, g.map(|x| x * wgt));
                }
            }
        }
        Ok(())
    }

    /// Sign pattern of every ReLU input on the tape. Finite-difference checks
    /// use it to detect perturbations that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.value(x).data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
