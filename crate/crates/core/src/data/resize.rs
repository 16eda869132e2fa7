use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::grid::{Image, LabelMask};
use crate::error::{Error, Result};

fn check_target(op: &'static str, target: usize) -> Result<()> {
    if target == 0 {
        return Err(Error::invalid(op, "target extent must be at least 1"));
    }
    Ok(())
}

/// Half-pixel-centred source coordinate of destination index `d`.
fn source_coord(d: usize, src: usize, dst: usize) -> f64 {
    (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Bilinear resize to `target × target`.
pub fn resize_image(img: &Image, target: usize) -> Result<Image> {
    check_target("resize_image", target)?;
    let (sw, sh) = (img.width(), img.height());
    if sw == 0 || sh == 0 {
        return Err(Error::invalid("resize_image", "source image is empty"));
    }
    if sw == target && sh == target {
        return Ok(img.clone());
    }
    let axis = |d: usize, src: usize| -> (usize, usize, f64) {
        let s = source_coord(d, src, target).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..target).map(|x| axis(x, sw)).collect();
    let mut out = Vec::with_capacity(target * target);
    for y in 0..target {
        let (y0, y1, fy) = axis(y, sh);
        for &(x0, x1, fx) in &xs {
            let top = f64::from(img.get(x0, y0)) * (1.0 - fx) + f64::from(img.get(x1, y0)) * fx;
            let bottom = f64::from(img.get(x0, y1)) * (1.0 - fx) + f64::from(img.get(x1, y1)) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Image::new(target, target, out)
}

/// Nearest-neighbour resize to `target × target`; labels are never blended.
pub fn resize_mask(mask: &LabelMask, target: usize) -> Result<LabelMask> {
    check_target("resize_mask", target)?;
    let (sw, sh) = (mask.width(), mask.height());
    if sw == 0 || sh == 0 {
        return Err(Error::invalid("resize_mask", "source mask is empty"));
    }
    if sw == target && sh == target {
        return Ok(mask.clone());
    }
    let pick = |d: usize, src: usize| ((d * src * 2 + src) / (2 * target)).min(src - 1);
    let xs: Vec<usize> = (0..target).map(|x| pick(x, sw)).collect();
    let mut out = Vec::with_capacity(target * target);
    for y in 0..target {
        let sy = pick(y, sh);
        out.extend(xs.iter().map(|&sx| mask.get(sx, sy)));
    }
    LabelMask::new(target, target, out)
}
