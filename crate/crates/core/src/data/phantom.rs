//! Seeded synthetic short-axis phantoms.
//!
//! Each slice has an LV blood pool (label 2) inside a myocardial annulus
//! (label 3), an RV crescent (label 1) hugging the annulus, and a textured
//! background (label 0) with a few bright distractor blobs that share the
//! cavity intensities but not their labels.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::grid::{Image, LabelMask, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

/// Mean intensity per region before noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intensities {
    pub background: f64,
    pub rv: f64,
    pub lv: f64,
    pub myocardium: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: 0.1,
            rv: 0.5,
            lv: 0.9,
            myocardium: 0.3,
        }
    }
}

/// Geometry ranges are fractions of `extent` unless noted.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub extent: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    /// Heart centre offset from the image centre, per axis.
    pub center_jitter: f64,
    /// LV semi-major axis.
    pub lv_radius: Range,
    /// Minor/major ratio of the LV ellipse.
    pub lv_aspect: Range,
    pub myo_thickness: Range,
    /// RV centre distance, in multiples of the myocardium's outer radius.
    pub rv_offset: Range,
    /// RV semi-major axis, in multiples of the myocardium's outer radius.
    pub rv_radius: Range,
    pub distractors: usize,
    pub intensities: Intensities,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 16,
            extent: 64,
            seed: 0,
            noise_sigma: 0.05,
            center_jitter: 0.08,
            lv_radius: Range::new(0.09, 0.14),
            lv_aspect: Range::new(0.8, 1.0),
            myo_thickness: Range::new(0.05, 0.075),
            rv_offset: Range::new(0.75, 1.0),
            rv_radius: Range::new(1.0, 1.35),
            distractors: 2,
            intensities: Intensities::default(),
        }
    }
}

/// Smallest myocardium, in pixels, that still separates the LV pool from
/// everything else under 4-connectivity.
const MIN_WALL_PX: f64 = 1.5;
const MIN_RV_FRACTION: f64 = 0.005;
const MAX_ATTEMPTS: usize = 32;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.extent < 8 {
            return bad("extent must be at least 8");
        }
        let ranges = [
            ("lv_radius", self.lv_radius),
            ("lv_aspect", self.lv_aspect),
            ("myo_thickness", self.myo_thickness),
            ("rv_offset", self.rv_offset),
            ("rv_radius", self.rv_radius),
        ];
        for (name, r) in ranges {
            if !r.is_valid() || r.min <= 0.0 {
                return bad(&format!("{name} range {}..{} is not a positive ordered range", r.min, r.max));
            }
        }
        if self.lv_aspect.max > 1.0 {
            return bad("lv_aspect must not exceed 1");
        }
        if self.myo_thickness.min * (self.extent as f64) < MIN_WALL_PX {
            return bad("myocardium thinner than 1.5 px cannot enclose the LV pool");
        }
        if self.center_jitter < 0.0 || !self.center_jitter.is_finite() {
            return bad("center_jitter must be non-negative");
        }
        if self.center_jitter + self.lv_radius.max + self.myo_thickness.max >= 0.5 {
            return bad("myocardium outer ellipse can leave the image");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Generate `cfg.count` samples. Sample `i` depends only on `(seed, i)`.
pub fn generate_phantom(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| generate_one(cfg, i as u64)).collect()
}

fn generate_one(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let ext = cfg.extent as f64;
    for _ in 0..MAX_ATTEMPTS {
        if let Some(s) = try_generate(cfg, &mut rng, ext)? {
            return Ok(s);
        }
    }
    Err(Error::Config(format!(
        "synth: could not place a visible RV for sample {index}; widen rv ranges"
    )))
}

fn try_generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng, ext: f64) -> Result<Option<Sample>> {
    let n = cfg.extent;
    let cx = ext * (0.5 + rng.random_range(-1.0..=1.0) * cfg.center_jitter);
    let cy = ext * (0.5 + rng.random_range(-1.0..=1.0) * cfg.center_jitter);
    let a = ext * cfg.lv_radius.draw(rng);
    let b = a * cfg.lv_aspect.draw(rng);
    let angle = rng.random_range(0.0..PI);
    let wall = (ext * cfg.myo_thickness.draw(rng)).max(MIN_WALL_PX);
    let lv = Ellipse::new(cx, cy, a, b, angle);
    let myo = Ellipse::new(cx, cy, a + wall, b + wall, angle);

    let outer = a + wall;
    let dir = PI + rng.random_range(-0.6..0.6);
    let dist = outer * cfg.rv_offset.draw(rng);
    let ra = outer * cfg.rv_radius.draw(rng);
    let rb = ra * rng.random_range(0.65..0.85);
    // Major axis perpendicular to the offset so the RV wraps the septum.
    let rv = Ellipse::new(
        cx + dist * dir.cos(),
        cy + dist * dir.sin(),
        ra,
        rb,
        dir + PI / 2.0,
    );

    let mut blobs = Vec::new();
    for _ in 0..cfg.distractors {
        for _ in 0..20 {
            let r = ext * rng.random_range(0.035..0.07);
            let bx = rng.random_range(r..ext - r);
            let by = rng.random_range(r..ext - r);
            let clear = (bx - cx).hypot(by - cy) > dist + ra + r + 2.0;
            if clear {
                let level = rng.random_range(0.45..0.95);
                blobs.push((Ellipse::new(bx, by, r, r * rng.random_range(0.7..1.0), 0.0), level));
                break;
            }
        }
    }

    let fx = rng.random_range(1.0..3.0);
    let fy = rng.random_range(1.0..3.0);
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("synth: noise: {e}")))?;

    let levels = cfg.intensities;
    let mut labels = Vec::with_capacity(n * n);
    let mut pixels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fxp, fyp) = (x as f64 + 0.5, y as f64 + 0.5);
            let (label, base) = if lv.contains(fxp, fyp) {
                (2u8, levels.lv)
            } else if myo.contains(fxp, fyp) {
                (3, levels.myocardium)
            } else if rv.contains(fxp, fyp) {
                (1, levels.rv)
            } else {
                let texture = 0.03
                    * (2.0 * PI * fx * fxp / ext + px).sin()
                    * (2.0 * PI * fy * fyp / ext + py).sin();
                let blob = blobs
                    .iter()
                    .find(|(e, _)| e.contains(fxp, fyp))
                    .map(|&(_, level)| level);
                (0, blob.unwrap_or(levels.background + texture))
            };
            labels.push(label);
            pixels.push((base + noise.sample(rng)).clamp(0.0, 1.0) as f32);
        }
    }
    let rv_pixels = labels.iter().filter(|&&l| l == 1).count();
    if (rv_pixels as f64) < MIN_RV_FRACTION * (n * n) as f64 || !labels.contains(&0) {
        return Ok(None);
    }
    let image = Image::new(n, n, pixels)?;
    let mask = LabelMask::new(n, n, labels)?;
    Ok(Some(Sample::new(image, mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// 4-connected flood fill from the border through pixels not labelled
    /// myocardium. Returns the reached set.
    fn reach_from_border(mask: &LabelMask) -> Vec<bool> {
        let (w, h) = (mask.width(), mask.height());
        let mut seen = vec![false; w * h];
        let mut stack = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && mask.get(x, y) != 3 {
                    seen[y * w + x] = true;
                    stack.push((x, y));
                }
            }
        }
        while let Some((x, y)) = stack.pop() {
            let mut visit = |nx: usize, ny: usize| {
                let i = ny * w + nx;
                if !seen[i] && mask.get(nx, ny) != 3 {
                    seen[i] = true;
                    stack.push((nx, ny));
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        seen
    }

    fn config(count: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            count,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_phantom(&config(4, 11)).unwrap();
        let b = generate_phantom(&config(4, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&config(4, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_mask_has_all_labels() {
        for s in generate_phantom(&config(24, 3)).unwrap() {
            assert!(s.mask.histogram().iter().all(|&c| c > 0), "{:?}", s.mask.histogram());
        }
    }

    #[test]
    fn lv_pool_is_enclosed_by_myocardium() {
        for extent in [32, 64, 128] {
            let cfg = SynthConfig {
                extent,
                ..config(12, 5)
            };
            for s in generate_phantom(&cfg).unwrap() {
                let reached = reach_from_border(&s.mask);
                for (i, &l) in s.mask.labels().iter().enumerate() {
                    assert!(!(l == 2 && reached[i]), "LV pixel {i} reachable at extent {extent}");
                }
            }
        }
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        let cfg = SynthConfig {
            noise_sigma: 0.3,
            ..config(4, 1)
        };
        for s in generate_phantom(&cfg).unwrap() {
            assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn inconsistent_ranges_rejected() {
        let inverted = SynthConfig {
            lv_radius: Range::new(0.2, 0.1),
            ..config(1, 0)
        };
        assert!(generate_phantom(&inverted).is_err());
        let too_big = SynthConfig {
            lv_radius: Range::new(0.3, 0.4),
            ..config(1, 0)
        };
        assert!(generate_phantom(&too_big).is_err());
        let thin = SynthConfig {
            extent: 16,
            myo_thickness: Range::new(0.01, 0.02),
            ..config(1, 0)
        };
        assert!(generate_phantom(&thin).is_err());
    }

    #[test]
    fn sample_depends_only_on_seed_and_index() {
        let four = generate_phantom(&config(4, 9)).unwrap();
        let two = generate_phantom(&config(2, 9)).unwrap();
        assert_eq!(&four[..2], &two[..]);
    }
}
