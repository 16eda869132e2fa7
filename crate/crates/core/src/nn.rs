//! Composite layers shared by every architecture: the double-conv block,
//! encoder and decoder steps, the attention gate, and the M-Net side legs.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A convolution's weight and optional bias on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: Var,
    pub b: Option<Var>,
}

impl Conv {
    /// "Same" padding (`kernel / 2`) at the given stride.
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, stride: usize) -> Result<Var> {
        let k = tape.shape(self.w).h;
        let pad = if stride == 1 { k / 2 } else { 0 };
        tape.conv2d(x, self.w, self.b, stride, pad)
    }

    fn out_channels<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.w).n
    }

    fn in_channels<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.w).c
    }
}

/// Two 3×3 convolutions with ReLU, then dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBlockParams {
    pub conv1: Conv,
    pub conv2: Conv,
    pub dropout: f64,
}

/// Post-activation outputs inside a [`conv_block`].
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockTrace {
    pub conv1: Var,
    pub conv2: Var,
    pub out: Var,
}

pub fn conv_block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ConvBlockParams,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    conv_block_traced(tape, x, p, training, rng).map(|t| t.out)
}

pub fn conv_block_traced<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ConvBlockParams,
    training: bool,
    rng: &mut R,
) -> Result<ConvBlockTrace> {
    let (c1, c2) = (p.conv1.out_channels(tape), p.conv2.out_channels(tape));
    if p.conv2.in_channels(tape) != c1 || c2 != c1 {
        return Err(Error::invalid(
            "conv_block",
            format!(
                "layer widths disagree: conv1 -> {c1}, conv2 {} -> {c2}",
                p.conv2.in_channels(tape)
            ),
        ));
    }
    let h = p.conv1.apply(tape, x, 1)?;
    let h1 = tape.relu(h);
    let h = p.conv2.apply(tape, h1, 1)?;
    let h2 = tape.relu(h);
    let out = tape.dropout(h2, p.dropout, training, rng)?;
    Ok(ConvBlockTrace {
        conv1: h1,
        conv2: h2,
        out,
    })
}

/// Gate projections: `w_g` (1×1 on the gating signal), `w_x` (2×2 stride 2
/// on the skip features), `psi` (1×1 down to one channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGateParams {
    pub w_g: Conv,
    pub w_x: Conv,
    pub psi: Conv,
}

#[derive(Debug, Clone, Copy)]
pub struct GateTrace {
    pub theta_x: Var,
    pub phi_g: Var,
    /// Coefficients at the coarse grid, `(N, 1, H, W)`.
    pub alpha: Var,
    /// Skip features weighted by the upsampled coefficients.
    pub gated: Var,
}

/// Weigh skip features `x` (at `2H×2W`) by coefficients computed from `x`
/// and the coarser gating signal `g` (at `H×W`):
/// `alpha = sigmoid(psi(relu(W_x x + W_g g)))`, upsampled ×2, then `x ⊙ alpha`.
pub fn attention_gate<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    g: Var,
    p: &AttentionGateParams,
) -> Result<GateTrace> {
    let (sx, sg) = (tape.shape(x), tape.shape(g));
    if sx.h != 2 * sg.h || sx.w != 2 * sg.w || sx.n != sg.n {
        return Err(Error::invalid(
            "attention_gate",
            format!("skip {sx} must be exactly twice the resolution of gate {sg}"),
        ));
    }
    if p.psi.out_channels(tape) != 1 {
        return Err(Error::invalid("attention_gate", "psi must produce one channel"));
    }
    if p.w_g.out_channels(tape) != p.w_x.out_channels(tape) {
        return Err(Error::invalid(
            "attention_gate",
            "W_g and W_x must map to the same intermediate width",
        ));
    }
    let theta_x = p.w_x.apply(tape, x, 2)?;
    let phi_g = p.w_g.apply(tape, g, 1)?;
    let sum = tape.add(theta_x, phi_g)?;
    let act = tape.relu(sum);
    let score = p.psi.apply(tape, act, 1)?;
    let alpha = tape.sigmoid(score);
    let up = tape.upsample_nearest(alpha, 2)?;
    let gated = tape.mul_channel_broadcast(x, up)?;
    Ok(GateTrace {
        theta_x,
        phi_g,
        alpha,
        gated,
    })
}

/// `skip = conv_block(x)`, `down = maxpool2d(skip)`.
pub fn encoder_step<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ConvBlockParams,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let (skip, down, _) = encoder_step_traced(tape, x, p, training, rng)?;
    Ok((skip, down))
}

pub(crate) fn encoder_step_traced<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: &ConvBlockParams,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var, ConvBlockTrace)> {
    let trace = conv_block_traced(tape, x, p, training, rng)?;
    let down = tape.maxpool2d(trace.out)?;
    Ok((trace.out, down, trace))
}

/// Learned 2×2 stride-2 upsampling followed by a conv block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderParams {
    pub up: Var,
    pub block: ConvBlockParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderTrace {
    pub up: Var,
    pub block: ConvBlockTrace,
}

/// `conv_block(concat_channels(skip, conv_transpose2d(d)))`.
pub fn decoder_step<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    d: Var,
    skip: Var,
    p: &DecoderParams,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    decoder_step_traced(tape, d, skip, p, training, rng).map(|t| t.block.out)
}

pub fn decoder_step_traced<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    d: Var,
    skip: Var,
    p: &DecoderParams,
    training: bool,
    rng: &mut R,
) -> Result<DecoderTrace> {
    let up = tape.conv_transpose2d(d, p.up, 2)?;
    let (su, ss) = (tape.shape(up), tape.shape(skip));
    if (su.h, su.w) != (ss.h, ss.w) {
        return Err(Error::invalid(
            "decoder_step",
            format!("upsampled {su} does not match skip {ss}"),
        ));
    }
    let cat = tape.concat_channels(skip, up)?;
    let block = conv_block_traced(tape, cat, &p.block, training, rng)?;
    Ok(DecoderTrace { up, block })
}

/// `[x, pool(x), pool(pool(x)), ...]`, `depth + 1` entries.
pub fn mnet_down_leg<T: Scalar>(tape: &mut Tape<T>, x: Var, depth: usize) -> Result<Vec<Var>> {
    let s = tape.shape(x);
    let factor = 1usize << depth;
    if s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::invalid(
            "mnet_down_leg",
            format!("extents {}x{} not divisible by 2^{depth}", s.h, s.w),
        ));
    }
    let mut out = Vec::with_capacity(depth + 1);
    out.push(x);
    let mut cur = x;
    for _ in 0..depth {
        cur = tape.maxpool2d(cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Nearest-upsample each tensor to the largest extent among them and
/// concatenate in the given order.
pub fn mnet_up_leg<T: Scalar>(tape: &mut Tape<T>, outputs: &[Var]) -> Result<Var> {
    let target = outputs
        .iter()
        .map(|&v| tape.shape(v))
        .max_by_key(|s| s.h)
        .ok_or_else(|| Error::invalid("mnet_up_leg", "no decoder outputs"))?;
    let mut acc: Option<Var> = None;
    for &v in outputs {
        let s = tape.shape(v);
        if s.h == 0 || target.h % s.h != 0 || target.w % s.w.max(1) != 0 || target.h / s.h != target.w / s.w {
            return Err(Error::invalid(
                "mnet_up_leg",
                format!("{s} does not upsample evenly to {target}"),
            ));
        }
        let up = tape.upsample_nearest(v, target.h / s.h)?;
        acc = Some(match acc {
            Some(a) => tape.concat_channels(a, up)?,
            None => up,
        });
    }
    Ok(acc.expect("non-empty"))
}
