//! Focal loss, per-class soft Dice, mean foreground DSC and pixel accuracy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::data::LabelMask;
use crate::error::{Error, Result};
use crate::ops::softmax_channels;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::NUM_CLASSES;

/// Probabilities are clamped into `[P_MIN, 1 - P_MIN]` before any logarithm.
pub const P_MIN: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct FocalConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Per-class weight.
    pub alpha: Vec<f64>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            alpha: vec![0.25; NUM_CLASSES],
        }
    }
}

impl FocalConfig {
    /// Plain cross-entropy: `gamma = 0`, `alpha = 1`.
    pub fn cross_entropy(num_classes: usize) -> Self {
        FocalConfig {
            gamma: 0.0,
            alpha: vec![1.0; num_classes],
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("focal gamma {} must be >= 0", self.gamma)));
        }
        if self.alpha.len() != num_classes {
            return Err(Error::Config(format!(
                "focal alpha has {} entries for {num_classes} classes",
                self.alpha.len()
            )));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("focal alpha {a} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Mean focal loss over all `N·H·W` pixels and its gradient with respect to
/// the logits. Accumulated in `f64` regardless of `T`.
pub(crate) fn focal_forward_backward<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &FocalConfig,
) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            left: s,
            right: target.shape(),
        });
    }
    cfg.validate(s.c)?;
    let plane = s.plane();
    let pixels = (s.n * plane) as f64;
    let z = logits.data();
    let g = target.data();
    let mut grad = vec![T::zero(); s.numel()];
    let mut p = vec![0.0f64; s.c];
    let mut total = 0.0;
    for n in 0..s.n {
        let base = n * s.sample();
        for px in 0..plane {
            let at = |c: usize| base + c * plane + px;
            let max = (0..s.c).map(|c| z[at(c)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = (z[at(c)].as_f64() - max).exp();
                sum += *pc;
            }
            let (mut pt, mut at_w) = (0.0, 0.0);
            for (c, pc) in p.iter_mut().enumerate() {
                *pc /= sum;
                let gc = g[at(c)].as_f64();
                pt += gc * *pc;
                at_w += gc * cfg.alpha[c];
            }
            let clamped = pt.clamp(P_MIN, 1.0 - P_MIN);
            let one_minus = 1.0 - clamped;
            let modulator = if cfg.gamma == 0.0 { 1.0 } else { one_minus.powf(cfg.gamma) };
            total += -at_w * modulator * clamped.ln();
            if pt <= P_MIN || pt >= 1.0 - P_MIN {
                continue;
            }
            // dL/dp_t, then dp_t/dz_j = g_j p_j - p_t p_j.
            let focus = if cfg.gamma == 0.0 {
                0.0
            } else {
                cfg.gamma * one_minus.powf(cfg.gamma - 1.0) * clamped.ln()
            };
            let dl_dpt = -at_w * (modulator / clamped - focus) / pixels;
            for (c, &pc) in p.iter().enumerate() {
                let gc = g[at(c)].as_f64();
                grad[at(c)] = T::from_f64_lossy(dl_dpt * (gc * pc - pt * pc));
            }
        }
    }
    Ok((total / pixels, Tensor::from_vec(s, grad)?))
}

/// Mean focal loss without recording a tape.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, cfg: &FocalConfig) -> Result<f64> {
    focal_forward_backward(logits, target, cfg).map(|(l, _)| l)
}

/// `(1, C, H, W)` one-hot encoding of a mask.
pub fn one_hot<T: Scalar>(mask: &LabelMask, num_classes: usize) -> Result<Tensor<T>> {
    one_hot_batch(core::slice::from_ref(mask), num_classes)
}

/// `(B, C, H, W)` one-hot encoding of equally sized masks.
pub fn one_hot_batch<T: Scalar>(masks: &[LabelMask], num_classes: usize) -> Result<Tensor<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("one_hot", "no masks"))?;
    let (w, h) = (first.width(), first.height());
    let shape = Shape::new(masks.len(), num_classes, h, w);
    let mut out = Tensor::zeros(shape);
    for (n, m) in masks.iter().enumerate() {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::invalid("one_hot", format!("mask {n} differs in extent")));
        }
        for (i, &l) in m.labels().iter().enumerate() {
            let l = usize::from(l);
            if l >= num_classes {
                return Err(Error::invalid(
                    "one_hot",
                    format!("label {l} at pixel {i} of mask {n} outside 0..{num_classes}"),
                ));
            }
            out.data_mut()[n * shape.sample() + l * shape.plane() + i] = T::one();
        }
    }
    Ok(out)
}

/// Per-pixel argmax over channels for sample `n`, as labels.
pub fn argmax_labels<T: Scalar>(scores: &Tensor<T>, n: usize) -> Result<LabelMask> {
    let s = scores.shape();
    if n >= s.n || s.c > usize::from(u8::MAX) {
        return Err(Error::invalid("argmax_labels", format!("bad sample {n} for {s}")));
    }
    let plane = s.plane();
    let d = &scores.data()[n * s.sample()..(n + 1) * s.sample()];
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..s.c {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(s.w, s.h, labels)
}

/// One-hot of the per-pixel argmax: binarized predictions.
pub fn binarize<T: Scalar>(probs: &Tensor<T>) -> Result<Tensor<T>> {
    let s = probs.shape();
    let masks = (0..s.n)
        .map(|n| argmax_labels(probs, n))
        .collect::<Result<Vec<_>>>()?;
    one_hot_batch(&masks, s.c)
}

/// `2 Σ p g / (Σ p² + g²)` over every pixel of channel `class`.
/// Both maps identically zero gives 1.
pub fn dice_per_class<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, class: usize) -> Result<f64> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "dice",
            left: s,
            right: target.shape(),
        });
    }
    if class >= s.c {
        return Err(Error::invalid("dice", format!("class {class} outside {} channels", s.c)));
    }
    let (mut inter, mut denom) = (0.0, 0.0);
    for n in 0..s.n {
        let off = n * s.sample() + class * s.plane();
        let p = &pred.data()[off..off + s.plane()];
        let g = &target.data()[off..off + s.plane()];
        for (&pi, &gi) in p.iter().zip(g) {
            let (pi, gi) = (pi.as_f64(), gi.as_f64());
            inter += pi * gi;
            denom += pi * pi + gi * gi;
        }
    }
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / denom)
}

/// Dice of every foreground class (RV, LV, MLV for cardiac masks) plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub mean_foreground: f64,
}

pub fn dice_report<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<DiceReport> {
    let c = pred.shape().c;
    if c < 2 {
        return Err(Error::invalid("dice", format!("need background plus a class, got {c} channels")));
    }
    let per_class = (1..c)
        .map(|k| dice_per_class(pred, target, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiceReport {
        mean_foreground: per_class.iter().sum::<f64>() / (c - 1) as f64,
        per_class,
    })
}

/// Mean Dice over the foreground classes, background excluded.
pub fn mean_foreground_dsc<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    dice_report(pred, target).map(|r| r.mean_foreground)
}

/// Fraction of pixels whose predicted label equals the target.
pub fn pixel_accuracy(pred: &LabelMask, target: &LabelMask) -> Result<f64> {
    if (pred.width(), pred.height()) != (target.width(), target.height()) {
        return Err(Error::invalid("pixel_accuracy", "mask extents differ"));
    }
    let n = pred.labels().len();
    if n == 0 {
        return Ok(1.0);
    }
    let hits = pred
        .labels()
        .iter()
        .zip(target.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Softmax probabilities of raw logits.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    softmax_channels(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(values: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    fn random_logits(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0))
    }

    fn random_mask(w: usize, h: usize, seed: u64) -> LabelMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LabelMask::new(w, h, (0..w * h).map(|_| rng.random_range(0..4u8)).collect()).unwrap()
    }

    #[test]
    fn one_hot_cases() {
        let zero = LabelMask::filled(3, 2, 0).unwrap();
        let t: Tensor<f32> = one_hot(&zero, 4).unwrap();
        assert_eq!(t.slice_channels(0..1).unwrap(), Tensor::ones([1, 1, 2, 3]));
        assert_eq!(t.slice_channels(1..4).unwrap(), Tensor::zeros([1, 3, 2, 3]));

        let m = random_mask(5, 4, 1);
        let t: Tensor<f64> = one_hot(&m, 4).unwrap();
        assert_eq!(argmax_labels(&t, 0).unwrap(), m);
        let hist = m.histogram();
        for (c, &count) in hist.iter().enumerate() {
            assert_eq!(t.slice_channels(c..c + 1).unwrap().sum(), count as f64);
        }
        assert!(one_hot::<f32>(&m, 3).is_err());
    }

    #[test]
    fn focal_single_pixel_closed_form() {
        // Two classes, p_t = 0.5.
        let logits = Tensor::from_vec([1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let target = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let cfg = FocalConfig {
            gamma: 2.0,
            alpha: vec![0.25, 0.25],
        };
        let l = focal_loss(&logits, &target, &cfg).unwrap();
        let want = 0.25 * 0.25 * core::f64::consts::LN_2;
        assert!((l - want).abs() < 1e-15, "{l}");
        assert!((l - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let logits = random_logits([2, 4, 5, 5], 3);
        let mask_a = random_mask(5, 5, 4);
        let mask_b = random_mask(5, 5, 5);
        let target: Tensor<f64> = one_hot_batch(&[mask_a, mask_b], 4).unwrap();
        let l = focal_loss(&logits, &target, &FocalConfig::cross_entropy(4)).unwrap();
        // Log-sum-exp oracle.
        let s = logits.shape();
        let mut ce = 0.0;
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let z: Vec<f64> = (0..4).map(|c| logits.get([n, c, y, x])).collect();
                    let m = z.iter().copied().fold(f64::MIN, f64::max);
                    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    let t = (0..4).find(|&c| target.get([n, c, y, x]) == 1.0).unwrap();
                    ce += lse - z[t];
                }
            }
        }
        ce /= (s.n * s.h * s.w) as f64;
        assert!((l - ce).abs() < 1e-12, "{l} vs {ce}");
    }

    #[test]
    fn focal_confident_prediction_is_near_zero() {
        let mask = random_mask(4, 4, 8);
        let target: Tensor<f64> = one_hot(&mask, 4).unwrap();
        let logits = target.map(|g| g * 40.0);
        let l = focal_loss(&logits, &target, &FocalConfig::default()).unwrap();
        assert!(l < 1e-12, "{l}");
    }

    #[test]
    fn focal_rejects_bad_inputs() {
        let a = Tensor::<f64>::zeros([1, 4, 2, 2]);
        assert!(focal_loss(&a, &Tensor::zeros([1, 4, 2, 3]), &FocalConfig::default()).is_err());
        let bad = FocalConfig {
            gamma: -1.0,
            ..FocalConfig::default()
        };
        assert!(focal_loss(&a, &a, &bad).is_err());
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let target: Tensor<f64> = one_hot(&random_mask(4, 3, 9), 4).unwrap();
        for gamma in [0.0, 0.5, 2.0] {
            let cfg = FocalConfig {
                gamma,
                alpha: vec![0.25, 0.5, 0.75, 1.0],
            };
            let logits = random_logits([1, 4, 3, 4], 10);
            let r = finite_diff_check(|t, v| t.focal_loss(v, &target, &cfg), &logits, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "gamma {gamma}: {r:?}");
        }
    }

    #[test]
    fn focal_tape_value_matches_direct() {
        let target: Tensor<f32> = one_hot(&random_mask(3, 3, 2), 4).unwrap();
        let logits = random_logits([1, 4, 3, 3], 2).cast::<f32>();
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let l = tape.focal_loss(z, &target, &FocalConfig::default()).unwrap();
        let direct = focal_loss(&logits, &target, &FocalConfig::default()).unwrap();
        assert_eq!(tape.value(l).data()[0], direct as f32);
    }

    #[test]
    fn dice_hand_cases() {
        let p = flat(&[1.0, 1.0, 0.0, 0.0]);
        let g = flat(&[0.0, 1.0, 1.0, 0.0]);
        assert!((dice_per_class(&p, &g, 0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(dice_per_class(&g, &g, 0).unwrap(), 1.0);
        let disjoint = flat(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dice_per_class(&disjoint, &g, 0).unwrap(), 0.0);
        let zero = flat(&[0.0; 4]);
        assert_eq!(dice_per_class(&zero, &zero, 0).unwrap(), 1.0);
        assert!(dice_per_class(&p, &flat(&[0.0; 3]), 0).is_err());
    }

    #[test]
    fn mean_foreground_cases() {
        let m = random_mask(6, 6, 12);
        let t: Tensor<f64> = one_hot(&m, 4).unwrap();
        assert_eq!(mean_foreground_dsc(&t, &t).unwrap(), 1.0);

        // Only LV present, predicted perfectly; RV and MLV empty on both sides.
        let lv = LabelMask::new(2, 2, vec![0, 2, 2, 0]).unwrap();
        let t: Tensor<f64> = one_hot(&lv, 4).unwrap();
        assert_eq!(dice_report(&t, &t).unwrap().per_class, vec![1.0, 1.0, 1.0]);

        // Each foreground channel carries the 0.5 hand case.
        let mut pred = Tensor::<f64>::zeros([1, 4, 1, 4]);
        let mut target = Tensor::<f64>::zeros([1, 4, 1, 4]);
        for c in 1..4 {
            for (x, (&pv, &gv)) in [1.0, 1.0, 0.0, 0.0].iter().zip(&[0.0, 1.0, 1.0, 0.0]).enumerate() {
                pred.set([0, c, 0, x], pv);
                target.set([0, c, 0, x], gv);
            }
        }
        pred.set([0, 3, 0, 2], 1.0); // class 3: p=[1,1,1,0] → 2·2/(3+2) = 0.8
        let r = dice_report(&pred, &target).unwrap();
        assert!((r.per_class[0] - 0.5).abs() < 1e-12);
        assert!((r.per_class[2] - 0.8).abs() < 1e-12);
        assert!((r.mean_foreground - (0.5 + 0.5 + 0.8) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_cases() {
        let m = random_mask(5, 5, 1);
        assert_eq!(pixel_accuracy(&m, &m).unwrap(), 1.0);
        let a = LabelMask::new(2, 1, vec![0, 1]).unwrap();
        let b = LabelMask::new(2, 1, vec![1, 0]).unwrap();
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 0.0);
        let mut labels = vec![0u8; 100];
        labels[..10].iter_mut().for_each(|l| *l = 2);
        let target = LabelMask::new(10, 10, labels).unwrap();
        let bg = LabelMask::filled(10, 10, 0).unwrap();
        assert!((pixel_accuracy(&bg, &target).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn background_perturbation_leaves_hard_dice_unchanged() {
        let m = random_mask(6, 6, 21);
        let target: Tensor<f64> = one_hot(&m, 4).unwrap();
        let probs = softmax_channels(&random_logits([1, 4, 6, 6], 22));
        let before = mean_foreground_dsc(&binarize(&probs).unwrap(), &target).unwrap();
        // Shrink background mass where background is not the argmax, renormalize.
        let winners = argmax_labels(&probs, 0).unwrap();
        let mut moved = probs.clone();
        for (i, &w) in winners.labels().iter().enumerate() {
            if w != 0 {
                let bg = moved.data()[i] * 0.5;
                let rest: f64 = (1..4).map(|c| moved.data()[c * 36 + i]).sum();
                moved.data_mut()[i] = bg;
                for c in 1..4 {
                    moved.data_mut()[c * 36 + i] *= (1.0 - bg) / rest;
                }
            }
        }
        let after = mean_foreground_dsc(&binarize(&moved).unwrap(), &target).unwrap();
        assert_eq!(before, after);
    }

    proptest! {
        #[test]
        fn focal_is_non_negative(seed in 0u64..1000, gamma in 0.0f64..4.0) {
            let logits = random_logits([1, 4, 3, 3], seed);
            let target: Tensor<f64> = one_hot(&random_mask(3, 3, seed + 1), 4).unwrap();
            let cfg = FocalConfig { gamma, ..FocalConfig::default() };
            prop_assert!(focal_loss(&logits, &target, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn focal_decreases_as_true_class_gains(seed in 0u64..1000, step in 0.01f64..1.0) {
            let logits = random_logits([1, 4, 2, 2], seed);
            let target: Tensor<f64> = one_hot(&random_mask(2, 2, seed + 7), 4).unwrap();
            let cfg = FocalConfig::default();
            let boosted = Tensor::from_vec(
                logits.shape(),
                logits.data().iter().zip(target.data()).map(|(z, g)| z + step * g).collect(),
            ).unwrap();
            prop_assert!(focal_loss(&boosted, &target, &cfg).unwrap() < focal_loss(&logits, &target, &cfg).unwrap());
        }

        #[test]
        fn dice_is_bounded_and_symmetric_on_binary(a in proptest::collection::vec(0u8..2, 16), b in proptest::collection::vec(0u8..2, 16), p in proptest::collection::vec(0.0f64..=1.0, 16)) {
            let to_t = |v: &[u8]| flat(&v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
            let (ta, tb) = (to_t(&a), to_t(&b));
            prop_assert_eq!(dice_per_class(&ta, &tb, 0).unwrap(), dice_per_class(&tb, &ta, 0).unwrap());
            let d = dice_per_class(&flat(&p), &tb, 0).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
