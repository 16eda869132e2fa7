use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Single-channel intensity image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Values are clamped into `[0, 1]`; NaN becomes 0.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(
                "image",
                format!("{width}x{height} needs {} pixels, got {}", width * height, pixels.len()),
            ));
        }
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: alloc::vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// `1×1×H×W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect();
        Tensor::from_vec([1, 1, self.height, self.width], data).expect("extent matches")
    }
}

/// Integer label image with classes `0 = background, 1 = RV, 2 = LV, 3 = MLV`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid(
                "mask",
                format!("{width}x{height} needs {} labels, got {}", width * height, labels.len()),
            ));
        }
        if let Some(pos) = labels.iter().position(|&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::invalid(
                "mask",
                format!("label {} at index {pos} outside 0..{NUM_CLASSES}", labels[pos]),
            ));
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Result<Self> {
        LabelMask::new(width, height, alloc::vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }
}

/// An image with its ground-truth mask of equal extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: LabelMask,
}

impl Sample {
    pub fn new(image: Image, mask: LabelMask) -> Result<Self> {
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(Error::invalid(
                "sample",
                format!(
                    "image {}x{} and mask {}x{} differ",
                    image.width(),
                    image.height(),
                    mask.width(),
                    mask.height()
                ),
            ));
        }
        Ok(Sample { image, mask })
    }
}
