//! Reverse-mode differentiation over a recorded tape.
//!
//! Every method on [`Tape`] computes its forward value eagerly, appends a
//! node that remembers its inputs, and returns a [`Var`] handle. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.

pub mod check;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::FocalConfig;
use crate::ops::{self, Window};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub use check::{finite_diff_check, finite_diff_check_many, FdReport};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        window: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        window: Window,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout {
        x: Var,
        mask: Tensor<T>,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    MulBroadcast {
        x: Var,
        alpha: Var,
    },
    Sum(Var),
    Mean(Var),
    /// Σ x ⊙ weights for a constant weight tensor.
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    /// Fused softmax + focal loss; the logit gradient is computed forward.
    Focal {
        logits: Var,
        dlogits: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or audited input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let window = ops::conv2d_window(self.shape(x), self.shape(w), bias, stride, pad)?;
        let out = ops::conv2d_forward(self.value(x), self.value(w), bias, &window);
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, window }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let window = ops::conv_transpose2d_window(self.shape(x), self.shape(w), stride)?;
        let out = ops::conv_transpose2d_forward(self.value(x), self.value(w), &window);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, window }, rg))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(x))?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = ops::softmax_channels(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Inverted dropout; returns `x` itself when inactive.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        ops::check_dropout_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T, R>(self.shape(x), rate, rng);
        let out = ops::mul_same(self.value(x), &mask);
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let out = ops::upsample_nearest(self.value(x), factor)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::UpsampleNearest { x, factor }, rg))
    }

    /// `x ⊙ alpha` with a single-channel `alpha` broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let out = ops::mul_channel_broadcast(self.value(x), self.value(alpha))?;
        let rg = self.any_grad(&[x, alpha]);
        Ok(self.push(out, Op::MulBroadcast { x, alpha }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_usize(v.numel().max(1)).unwrap_or_else(T::one));
        let rg = self.requires_grad(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// `Σ x ⊙ weights`; reduces a tensor-valued graph to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let total = self.value(x).dot(&weights)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(total)),
            Op::WeightedSum { x, weights },
            rg,
        ))
    }

    /// Mean focal loss of `logits` against a one-hot `target`.
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor<T>, cfg: &FocalConfig) -> Result<Var> {
        let (loss, dlogits) = crate::loss::focal_forward_backward(self.value(logits), target, cfg)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::Focal { logits, dlogits },
            rg,
        ))
    }

    /// FNV-1a hash of every piecewise branch taken in the forward pass:
    /// ReLU sign patterns and max-pool winners.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node
                    .value
                    .data()
                    .iter()
                    .for_each(|&y| mix(u64::from(y > T::zero()))),
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| mix(u64::from(i))),
                _ => {}
            }
        }
        h
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires one. Every differentiable leaf gets a gradient (zero when
    /// unreachable).
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rs = self.shape(root);
        if !rs.is_scalar() {
            return Err(Error::NotScalar(rs));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(Shape::SCALAR));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, window } => {
                let need = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let r = ops::conv2d_backward(self.value(*x), self.value(*w), window, g, need);
                accumulate(grads, *x, r.dx);
                accumulate(grads, *w, r.dw);
                if let Some(b) = b {
                    let db = r.db.map(|d| d.reshape(self.shape(*b)).expect("bias numel checked"));
                    accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, window } => {
                let need = (self.needs(*x), self.needs(*w));
                let (dx, dw) = ops::conv_transpose2d_backward(self.value(*x), self.value(*w), window, g, need);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let dx = ops::maxpool2d_backward(self.shape(*x), argmax, g);
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a).c;
                let c = g.shape().c;
                if self.needs(*a) {
                    accumulate(grads, *a, g.slice_channels(0..ca).ok());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.slice_channels(ca..c).ok());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, Some(g.clone()));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Some(g.clone()));
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let dx = zip_map(out, g, |y, d| if y > T::zero() { d } else { T::zero() });
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let dx = zip_map(out, g, |y, d| d * y * (T::one() - y));
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, Some(softmax_backward(out, g)));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    accumulate(grads, *x, Some(ops::mul_same(g, mask)));
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if self.needs(*x) {
                    let dx = ops::upsample_nearest_backward(self.shape(*x), *factor, g);
                    accumulate(grads, *x, Some(dx));
                }
            }
            Op::MulBroadcast { x, alpha } => {
                let xv = self.value(*x);
                let av = self.value(*alpha);
                if self.needs(*x) {
                    let dx = ops::mul_channel_broadcast(g, av).expect("shapes checked forward");
                    accumulate(grads, *x, Some(dx));
                }
                if self.needs(*alpha) {
                    let s = xv.shape();
                    let plane = s.plane();
                    let mut da = Tensor::zeros(av.shape());
                    for n in 0..s.n {
                        let dst = &mut da.data_mut()[n * plane..(n + 1) * plane];
                        for c in 0..s.c {
                            let off = n * s.sample() + c * plane;
                            let gx = &g.data()[off..off + plane];
                            let xx = &xv.data()[off..off + plane];
                            for ((d, &a), &b) in dst.iter_mut().zip(gx).zip(xx) {
                                *d += a * b;
                            }
                        }
                    }
                    accumulate(grads, *alpha, Some(da));
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, Some(Tensor::full(self.shape(*x), g.data()[0])));
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let scale = g.data()[0] / T::from_usize(s.numel().max(1)).unwrap_or_else(T::one);
                    accumulate(grads, *x, Some(Tensor::full(s, scale)));
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let s = g.data()[0];
                    accumulate(grads, *x, Some(weights.map(|w| w * s)));
                }
            }
            Op::Focal { logits, dlogits } => {
                if self.needs(*logits) {
                    let s = g.data()[0];
                    accumulate(grads, *logits, Some(dlogits.map(|d| d * s)));
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape matches node"),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// `dx_c = y_c (g_c - Σ_k y_k g_k)` per pixel.
fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let plane = s.plane();
    let mut dx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.sample();
        for p in 0..plane {
            let mut dot = T::zero();
            for c in 0..s.c {
                let i = base + c * plane + p;
                dot += y.data()[i] * g.data()[i];
            }
            for c in 0..s.c {
                let i = base + c * plane + p;
                dx[i] = y.data()[i] * (g.data()[i] - dot);
            }
        }
    }
    Tensor::from_vec(s, dx).expect("same shape")
}
