//! Central finite-difference audit of tape gradients (double precision).
//!
//! Derivatives use the five-point stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose truncation
//! error is `O(h^4)`, so `h` can stay large enough to keep rounding noise
//! well below the tolerance. FD is only meaningful where the function is
//! smooth on `[x-2h, x+2h]`.
//! Each probe compares the tape's branch signature (ReLU sign pattern and
//! max-pool winners) at the perturbed points against the base point; if a
//! branch flips, the step is shrunk and, failing that, the coordinate is
//! reported as skipped rather than compared across a kink.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-6;

const PROJECTION_SEED: u64 = 0x5eed_f00d;
const MAX_SHRINKS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// `max |fd - tape| / max(|fd|, |tape|, REL_FLOOR)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose neighbourhood straddles a non-differentiable point.
    pub skipped: usize,
}

/// Audit a single-input function over every coordinate of `x`.
///
/// Tensor-valued outputs are reduced with a fixed random projection, so the
/// check covers the full Jacobian direction-wise.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|t, v| f(t, v[0]), core::slice::from_ref(x), eps, None, 0)
}

/// Audit a multi-input function. With `max_coords = Some(k)`, at most `k`
/// coordinates per input are drawn (seeded) instead of all of them.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    // Fix the projection from the unperturbed output shape.
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let s = tape.shape(out);
        if s.is_scalar() {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
            let scale = 1.0 / (s.numel() as f64).sqrt();
            Some(Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0) * scale))
        }
    };

    let evaluate = |values: &[Tensor<f64>]| -> Result<(f64, u64, Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let root = match &projection {
            Some(p) => tape.weighted_sum(out, p.clone())?,
            None => out,
        };
        let value = tape.value(root).data()[0];
        let sig = tape.branch_signature();
        Ok((value, sig, tape, vars, root))
    };

    let (_, base_sig, tape, vars, root) = evaluate(inputs)?;
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("every leaf has a gradient");
        let n = input.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            let mut step = eps;
            let mut numeric = None;
            for _ in 0..=MAX_SHRINKS {
                let mut at = |offset: f64| -> Result<(f64, bool)> {
                    probe[k].data_mut()[i] = orig + offset;
                    let (value, sig, ..) = evaluate(&probe)?;
                    Ok((value, sig == base_sig))
                };
                let (p1, s1) = at(step)?;
                let (m1, s2) = at(-step)?;
                let (p2, s3) = at(2.0 * step)?;
                let (m2, s4) = at(-2.0 * step)?;
                if s1 && s2 && s3 && s4 {
                    numeric = Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
                    break;
                }
                step /= 10.0;
            }
            probe[k].data_mut()[i] = orig;
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic.data()[i];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_has_zero_error() {
        let x = random([1, 1, 3, 3], 1);
        let r = finite_diff_check(|_, v| Ok(v), &x, 1e-5).unwrap();
        assert_eq!(r.checked, 9);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn conv2d_self_test() {
        let x = random([1, 2, 5, 5], 2);
        let w = random([3, 2, 3, 3], 3);
        let r = finite_diff_check(
            |t, v| {
                let w = t.constant(w.clone());
                t.conv2d(v, w, None, 1, 1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn kink_coordinates_are_skipped() {
        let x = Tensor::from_vec([1, 1, 1, 2], alloc::vec![0.0, 0.5]).unwrap();
        let r = finite_diff_check(|t, v| Ok(t.relu(v)), &x, 1e-5).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn flags_a_function_whose_tape_gradient_is_wrong() {
        // f(x) = <x, x> with the second factor captured as a constant, so the
        // tape reports x while the true gradient is 2x.
        let x = random([1, 1, 2, 2], 4);
        let r = finite_diff_check(
            |t, v| {
                let w = t.value(v).clone();
                t.weighted_sum(v, w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }
}
