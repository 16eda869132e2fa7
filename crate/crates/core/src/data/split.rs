use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::{LabelMask, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Held-out test fraction, then a validation fraction of the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.25,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<S> {
    pub train: Vec<S>,
    pub val: Vec<S>,
    pub test: Vec<S>,
}

/// Seeded shuffle, then `|test| = round(test_fraction·n)` and
/// `|val| = round(val_fraction·(n - |test|))`.
pub fn split<S: Clone>(items: &[S], spec: &SplitSpec) -> Result<Splits<S>> {
    let n = items.len();
    if n < 4 {
        return Err(Error::invalid("split", format!("need at least 4 samples, got {n}")));
    }
    for (name, f) in [("test", spec.test_fraction), ("val", spec.val_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid("split", format!("{name} fraction {f} outside (0, 1)")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_test = round(spec.test_fraction * n as f64).clamp(1, n - 2);
    let n_val = round(spec.val_fraction * (n - n_test) as f64).clamp(1, n - n_test - 1);
    let pick = |ids: &[usize]| ids.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        test: pick(&order[..n_test]),
        val: pick(&order[n_test..n_test + n_val]),
        train: pick(&order[n_test + n_val..]),
    })
}

fn round(v: f64) -> usize {
    // Half away from zero, without std.
    (v + 0.5) as usize
}

/// One mini-batch: `(B, 1, H, W)` images and their masks.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub masks: Vec<LabelMask>,
}

/// Order of sample indices for one epoch, reshuffled from `(seed, epoch)`.
/// The final short batch is kept.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn batches<'a, T: Scalar>(
    samples: &'a [Sample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Batch<T>> + 'a> {
    if batch_size == 0 {
        return Err(Error::invalid("batches", "batch size must be at least 1"));
    }
    if let Some(first) = samples.first() {
        let ext = (first.image.width(), first.image.height());
        if let Some(bad) = samples
            .iter()
            .position(|s| (s.image.width(), s.image.height()) != ext)
        {
            return Err(Error::invalid(
                "batches",
                format!("sample {bad} differs in extent from sample 0"),
            ));
        }
    }
    Ok(batch_order(samples.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |indices| make_batch(samples, indices)))
}

pub(crate) fn make_batch<T: Scalar>(samples: &[Sample], indices: Vec<usize>) -> Batch<T> {
    let parts: Vec<Tensor<T>> = indices.iter().map(|&i| samples[i].image.to_tensor()).collect();
    let images = Tensor::stack(&parts).expect("extents checked");
    let masks = indices.iter().map(|&i| samples[i].mask.clone()).collect();
    Batch {
        indices,
        images,
        masks,
    }
}
