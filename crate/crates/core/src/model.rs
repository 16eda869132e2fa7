//! The five architectures behind one forward interface.
//!
//! Parameters are named `<stage><level>.<layer>.<w|b>`, e.g. `enc0.conv1.w`,
//! `gate2.psi.b`, `dec1.up.w`, `head.conv.w`. [`ModelSpec::layers`] lists
//! every layer in canonical order with its channel counts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionGateParams, Conv, ConvBlockParams, DecoderParams};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Unet,
    ConvUnet,
    Mnet,
    AttentionUnet,
    AttentionMnet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Unet,
        Variant::ConvUnet,
        Variant::Mnet,
        Variant::AttentionUnet,
        Variant::AttentionMnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::ConvUnet => "conv_unet",
            Variant::Mnet => "mnet",
            Variant::AttentionUnet => "attention_unet",
            Variant::AttentionMnet => "attention_mnet",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Unet => "U-Net",
            Variant::ConvUnet => "ConvU-Net",
            Variant::Mnet => "M-Net",
            Variant::AttentionUnet => "Attention U-Net",
            Variant::AttentionMnet => "Attention M-Net",
        }
    }

    /// Stable id stored in checkpoints.
    pub fn id(self) -> u8 {
        match self {
            Variant::Unet => 0,
            Variant::ConvUnet => 1,
            Variant::Mnet => 2,
            Variant::AttentionUnet => 3,
            Variant::AttentionMnet => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.id() == id)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Variant::AttentionUnet | Variant::AttentionMnet)
    }

    pub fn is_mnet(self) -> bool {
        matches!(self, Variant::Mnet | Variant::AttentionMnet)
    }

    pub fn has_skip_convs(self) -> bool {
        self == Variant::ConvUnet
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub depth: usize,
    pub base_width: usize,
    pub num_classes: usize,
    pub input_size: usize,
    /// Rate at the end of the contracting path; see [`ModelSpec::stage_dropout`].
    pub dropout: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::Unet,
            depth: 4,
            base_width: 16,
            num_classes: NUM_CLASSES,
            input_size: 64,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Square kernel; `same` padding at stride 1, none otherwise.
    Conv { kernel: usize, stride: usize },
    ConvTranspose { kernel: usize, stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Output feeds a later sum or concatenation without its own nonlinearity.
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl LayerDef {
    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> Option<String> {
        self.bias.then(|| format!("{}.b", self.name))
    }

    pub fn weight_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv { kernel, .. } => Shape::new(self.out_channels, self.in_channels, kernel, kernel),
            LayerKind::ConvTranspose { kernel, .. } => {
                Shape::new(self.in_channels, self.out_channels, kernel, kernel)
            }
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Inputs contributing to one output pixel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv { kernel, .. } => self.in_channels * kernel * kernel,
            LayerKind::ConvTranspose { kernel, stride } => {
                (self.in_channels * kernel * kernel / (stride * stride)).max(1)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.out_channels } else { 0 }
    }
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        ModelSpec {
            variant,
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.depth > 8 {
            return fail(format!("depth {} outside 1..=8", self.depth));
        }
        if self.base_width == 0 || self.width(self.depth) > usize::from(u16::MAX) {
            return fail(format!("base width {} unusable at depth {}", self.base_width, self.depth));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return fail(format!("num_classes {} outside 2..=255", self.num_classes));
        }
        if self.input_size == 0 || self.input_size > usize::from(u16::MAX) {
            return fail(format!("input size {} outside 1..=65535", self.input_size));
        }
        if self.input_size % (1 << self.depth) != 0 {
            return fail(format!(
                "input size {} not divisible by 2^{} = {}",
                self.input_size,
                self.depth,
                1 << self.depth
            ));
        }
        let pct = self.dropout * 100.0;
        if !(0.0..100.0).contains(&pct) || (pct - pct.round()).abs() > 1e-9 {
            return fail(format!(
                "dropout {} must be a whole percentage in [0, 1)",
                self.dropout
            ));
        }
        Ok(())
    }

    /// Channels at encoder level `level`; `level == depth` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Dropout after encoder block `level` (`depth` is the bottleneck): the
    /// deepest encoder block and the bottleneck carry `dropout`, the rest none.
    pub fn stage_dropout(&self, level: usize) -> f64 {
        if level + 1 >= self.depth {
            self.dropout
        } else {
            0.0
        }
    }

    pub fn gate_channels(&self, level: usize) -> usize {
        (self.width(level) / 2).max(1)
    }

    fn encoder_in(&self, level: usize) -> usize {
        let extra = usize::from(self.variant.is_mnet() && level > 0);
        if level == 0 {
            1
        } else {
            self.width(level - 1) + extra
        }
    }

    /// Every parameterised layer in canonical order.
    pub fn layers(&self) -> Vec<LayerDef> {
        let conv = |name: String, i, o, k, s, act| LayerDef {
            name,
            kind: LayerKind::Conv { kernel: k, stride: s },
            in_channels: i,
            out_channels: o,
            bias: true,
            activation: act,
        };
        let mut out = Vec::new();
        for k in 0..self.depth {
            let w = self.width(k);
            out.push(conv(format!("enc{k}.conv1"), self.encoder_in(k), w, 3, 1, Activation::Relu));
            out.push(conv(format!("enc{k}.conv2"), w, w, 3, 1, Activation::Relu));
        }
        let bw = self.width(self.depth);
        out.push(conv("bottleneck.conv1".into(), self.encoder_in(self.depth), bw, 3, 1, Activation::Relu));
        out.push(conv("bottleneck.conv2".into(), bw, bw, 3, 1, Activation::Relu));
        for k in (0..self.depth).rev() {
            let (w, coarse) = (self.width(k), self.width(k + 1));
            if self.variant.has_skip_convs() {
                out.push(conv(format!("skip{k}.conv"), w, w, 3, 1, Activation::Relu));
            }
            if self.variant.is_attention() {
                let inter = self.gate_channels(k);
                out.push(conv(format!("gate{k}.wg"), coarse, inter, 1, 1, Activation::Linear));
                out.push(conv(format!("gate{k}.wx"), w, inter, 2, 2, Activation::Linear));
                out.push(conv(format!("gate{k}.psi"), inter, 1, 1, 1, Activation::Sigmoid));
            }
            out.push(LayerDef {
                name: format!("dec{k}.up"),
                kind: LayerKind::ConvTranspose { kernel: 2, stride: 2 },
                in_channels: coarse,
                out_channels: w,
                bias: false,
                activation: Activation::Linear,
            });
            out.push(conv(format!("dec{k}.conv1"), 2 * w, w, 3, 1, Activation::Relu));
            out.push(conv(format!("dec{k}.conv2"), w, w, 3, 1, Activation::Relu));
        }
        let head_in = if self.variant.is_mnet() {
            (0..self.depth).map(|k| self.width(k)).sum()
        } else {
            self.base_width
        };
        out.push(conv("head.conv".into(), head_in, self.num_classes, 1, 1, Activation::Linear));
        out
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers().into_iter().map(|l| l.name).collect()
    }

    /// Channel count of a layer's output, if the layer exists.
    pub fn layer_channels(&self, layer: &str) -> Option<usize> {
        self.layers().into_iter().find(|l| l.name == layer).map(|l| l.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(LayerDef::param_count).sum()
    }

    /// `(name, shape)` of every parameter tensor, canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.push((l.weight_name(), l.weight_shape()));
            if let Some(b) = l.bias_name() {
                out.push((b, l.bias_shape()));
            }
        }
        out
    }
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    /// Fails on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Params(format!("duplicate tensor `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }

    /// Same names and shapes as the spec requires, all values finite.
    pub fn check_complete(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.param_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Params(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != *shape => {
                    return Err(Error::Params(format!(
                        "tensor `{name}` has shape {}, expected {shape}",
                        t.shape()
                    )))
                }
                Some(t) if !t.all_finite() => {
                    return Err(Error::Params(format!("tensor `{name}` has non-finite values")))
                }
                _ => {}
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::Params(format!(
                "unexpected tensor `{extra}` for variant {}",
                spec.variant
            )));
        }
        Ok(())
    }

    /// Put every tensor on the tape, either trainable or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Params(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Bind caller-owned handles, e.g. leaves of a gradient audit.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    fn conv(&self, layer: &str) -> Result<Conv> {
        Ok(Conv {
            w: self.get(&format!("{layer}.w"))?,
            b: self.vars.get(&format!("{layer}.b")).copied(),
        })
    }

    fn block(&self, stage: &str, dropout: f64) -> Result<ConvBlockParams> {
        Ok(ConvBlockParams {
            conv1: self.conv(&format!("{stage}.conv1"))?,
            conv2: self.conv(&format!("{stage}.conv2"))?,
            dropout,
        })
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, drawn in
/// canonical layer order.
pub fn build<T: Scalar, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut params = ParamSet::new();
    for layer in spec.layers() {
        let std = (2.0 / layer.fan_in() as f64).sqrt();
        let w = Tensor::from_fn(layer.weight_shape(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        });
        params.insert(layer.weight_name(), w)?;
        if let Some(b) = layer.bias_name() {
            params.insert(b, Tensor::zeros(layer.bias_shape()))?;
        }
    }
    Ok(params)
}

/// Output of [`forward`]: logits plus the post-activation output of every
/// layer, keyed by layer name.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub taps: Vec<(String, Var)>,
}

impl Forward {
    pub fn tap(&self, layer: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == layer).map(|&(_, v)| v)
    }
}

/// Record one forward pass on `tape`. `x` is `(N, 1, S, S)` with
/// `S = spec.input_size`.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    params: &Bound,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Forward> {
    spec.validate()?;
    let s = tape.shape(x);
    if s.c != 1 || s.h != spec.input_size || s.w != spec.input_size || s.n == 0 {
        return Err(Error::invalid(
            "forward",
            format!(
                "input {s} must be (N, 1, {0}, {0}) with N >= 1",
                spec.input_size
            ),
        ));
    }
    let v = spec.variant;
    let mut taps: Vec<(String, Var)> = Vec::new();
    let leg = if v.is_mnet() {
        nn::mnet_down_leg(tape, x, spec.depth)?
    } else {
        Vec::new()
    };

    let mut h = x;
    let mut skips = Vec::with_capacity(spec.depth);
    for k in 0..spec.depth {
        let input = if v.is_mnet() && k > 0 {
            tape.concat_channels(h, leg[k])?
        } else {
            h
        };
        let stage = format!("enc{k}");
        let block = params.block(&stage, spec.stage_dropout(k))?;
        let (skip, down, trace) = nn::encoder_step_traced(tape, input, &block, training, rng)?;
        taps.push((format!("{stage}.conv1"), trace.conv1));
        taps.push((format!("{stage}.conv2"), trace.conv2));
        skips.push(skip);
        h = down;
    }

    let input = if v.is_mnet() {
        tape.concat_channels(h, leg[spec.depth])?
    } else {
        h
    };
    let block = params.block("bottleneck", spec.stage_dropout(spec.depth))?;
    let trace = nn::conv_block_traced(tape, input, &block, training, rng)?;
    taps.push(("bottleneck.conv1".into(), trace.conv1));
    taps.push(("bottleneck.conv2".into(), trace.conv2));
    let mut d = trace.out;

    let mut dec_outs = Vec::with_capacity(spec.depth);
    for k in (0..spec.depth).rev() {
        let mut skip = skips[k];
        if v.has_skip_convs() {
            let name = format!("skip{k}.conv");
            let c = params.conv(&name)?.apply(tape, skip, 1)?;
            skip = tape.relu(c);
            taps.push((name, skip));
        }
        if v.is_attention() {
            let gate = AttentionGateParams {
                w_g: params.conv(&format!("gate{k}.wg"))?,
                w_x: params.conv(&format!("gate{k}.wx"))?,
                psi: params.conv(&format!("gate{k}.psi"))?,
            };
            let t = nn::attention_gate(tape, skip, d, &gate)?;
            taps.push((format!("gate{k}.wg"), t.phi_g));
            taps.push((format!("gate{k}.wx"), t.theta_x));
            taps.push((format!("gate{k}.psi"), t.alpha));
            skip = t.gated;
        }
        let stage = format!("dec{k}");
        let dec = DecoderParams {
            up: params.get(&format!("{stage}.up.w"))?,
            block: params.block(&stage, 0.0)?,
        };
        let t = nn::decoder_step_traced(tape, d, skip, &dec, training, rng)?;
        taps.push((format!("{stage}.up"), t.up));
        taps.push((format!("{stage}.conv1"), t.block.conv1));
        taps.push((format!("{stage}.conv2"), t.block.conv2));
        d = t.block.out;
        dec_outs.push(d);
    }

    let head_in = if v.is_mnet() {
        nn::mnet_up_leg(tape, &dec_outs)?
    } else {
        d
    };
    let logits = params.conv("head.conv")?.apply(tape, head_in, 1)?;
    taps.push(("head.conv".into(), logits));
    Ok(Forward { logits, taps })
}

/// Eval-mode logits without gradient bookkeeping.
pub fn predict_logits<T: Scalar>(spec: &ModelSpec, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, spec, &bound, xv, false, &mut NoRng)?;
    Ok(tape.value(out.logits).clone())
}

/// Per-channel activation maps of `layer` for a single image `(1, 1, S, S)`,
/// each min-max normalised to `[0, 1]`; constant maps become all zeros.
pub fn feature_maps<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    layer: &str,
) -> Result<Vec<Tensor<T>>> {
    let names = spec.layer_names();
    if !names.iter().any(|n| n == layer) {
        return Err(Error::UnknownLayer {
            name: layer.to_string(),
            valid: names,
        });
    }
    if x.shape().n != 1 {
        return Err(Error::invalid("feature_maps", format!("expected one image, got {}", x.shape())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, spec, &bound, xv, false, &mut NoRng)?;
    let act = tape.value(out.tap(layer).expect("every layer is tapped"));
    let s = act.shape();
    (0..s.c)
        .map(|c| Ok(normalize(act.slice_channels(c..c + 1)?)))
        .collect()
}

fn normalize<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let lo = t.data().iter().copied().fold(T::infinity(), T::min);
    let hi = t.data().iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) || !range.is_finite() {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / range)
}

/// Eval mode never draws; any generator satisfies the signature.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("dropout is inactive outside training")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("dropout is inactive outside training")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("dropout is inactive outside training")
    }
}
