//! Synthetic infrared scenes, augmentation and the on-disk dataset layout.
//!
//! Scene `index` under seed `s` draws from `Stream::new(s, index)` in this
//! order:
//!
//! 1. Background: one standard normal per pixel (row-major), blurred with a
//!    separable Gaussian of σ = `clutter_scale` (kernel radius ⌈3σ⌉, edge
//!    pixels replicated), rescaled to [0, 1] by its min and max, multiplied
//!    by `clutter_contrast`. Skipped entirely when the contrast is zero.
//! 2. Edges, `edges` times: a line through a uniform point with uniform
//!    angle in [0, π), Gaussian cross profile of σ 0.8 px and height
//!    `clutter_contrast · U(0.5, 1)`, added to the background.
//! 3. Target count `int_in(min, max)`. For each target: σ, then peak, then up
//!    to 50 placement attempts of (row, col) drawn with `int_in` over
//!    `[m, size−1−m]`, `m = ⌈2σ⌉ + 1`. An attempt is rejected when another
//!    target's center lies within `3(σ₁ + σ₂) + 2` px; a target that never
//!    fits is dropped.
//! 4. Image = clip(background + Σ peak·exp(−r²/2σ²), 0, 1), quantized to
//!    8-bit levels. Mask = pixels where any single blob is ≥ half its peak.

mod pgm;

use std::f64::consts::PI;
use std::fmt;

pub use pgm::{load_dataset, read_pgm, save_dataset, write_pgm, DatasetError, Pgm};

use crate::config::{ConfigError, KvMap};
use crate::rng::Stream;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Closed interval parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: fmt::Display> fmt::Display for Range<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub targets: Range<usize>,
    pub sigma: Range<f64>,
    pub peak: Range<f64>,
    /// Smoothing length of the background noise, px.
    pub clutter_scale: f64,
    pub clutter_contrast: f64,
    /// Bright line structures per scene.
    pub edges: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            targets: Range { min: 1, max: 3 },
            sigma: Range { min: 0.7, max: 2.5 },
            peak: Range { min: 0.4, max: 1.0 },
            clutter_scale: 4.0,
            clutter_contrast: 0.3,
            edges: 1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.size < 16 {
            return bad(format!("scene size must be at least 16, got {}", self.size));
        }
        if self.targets.min > self.targets.max {
            return bad("targets range is empty".into());
        }
        if !(self.sigma.min > 0.0 && self.sigma.min <= self.sigma.max) {
            return bad("sigma range must be positive and non-empty".into());
        }
        if !(0.0 < self.peak.min && self.peak.min <= self.peak.max && self.peak.max <= 1.0) {
            return bad("peak range must be a non-empty subset of (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.clutter_contrast) {
            return bad("clutter_contrast must lie in [0, 1]".into());
        }
        if self.clutter_scale <= 0.0 {
            return bad("clutter_scale must be positive".into());
        }
        let margin = (2.0 * self.sigma.max).ceil() as usize + 1;
        if 2 * margin >= self.size {
            return bad(format!("sigma up to {} does not fit a {}-px scene", self.sigma.max, self.size));
        }
        Ok(())
    }

    /// Consume scene keys (`scene_` prefix) from `kv`.
    pub fn take_from(kv: &mut KvMap) -> Result<Self, ConfigError> {
        let d = SceneConfig::default();
        let range = |kv: &mut KvMap, key: &str, default: Range<f64>| -> Result<Range<f64>, ConfigError> {
            match kv.take_list::<f64>(key)? {
                None => Ok(default),
                Some(v) if v.len() == 2 => Ok(Range { min: v[0], max: v[1] }),
                Some(_) => Err(ConfigError::Invalid(format!("{key} needs two values: min,max"))),
            }
        };
        let targets = match kv.take_list::<usize>("scene_targets")? {
            None => d.targets,
            Some(v) if v.len() == 2 => Range { min: v[0], max: v[1] },
            Some(_) => return Err(ConfigError::Invalid("scene_targets needs two values: min,max".into())),
        };
        let config = SceneConfig {
            size: kv.take_or("scene_size", d.size)?,
            targets,
            sigma: range(kv, "scene_sigma", d.sigma)?,
            peak: range(kv, "scene_peak", d.peak)?,
            clutter_scale: kv.take_or("scene_clutter_scale", d.clutter_scale)?,
            clutter_contrast: kv.take_or("scene_clutter_contrast", d.clutter_contrast)?,
            edges: kv.take_or("scene_edges", d.edges)?,
            seed: kv.take_or("scene_seed", d.seed)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        format!(
            "scene_size={}\nscene_targets={}\nscene_sigma={}\nscene_peak={}\nscene_clutter_scale={}\nscene_clutter_contrast={}\nscene_edges={}\nscene_seed={}\n",
            self.size,
            self.targets,
            self.sigma,
            self.peak,
            self.clutter_scale,
            self.clutter_contrast,
            self.edges,
            self.seed,
        )
    }
}

/// A grayscale image with its binary ground-truth mask, both stored as
/// row-major bytes. Image levels map to `level / 255`; mask bytes are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let data = self.image.iter().map(|&v| T::lit(v as f64 / 255.0)).collect();
        Tensor4::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("sample shape")
    }

    pub fn mask_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let data = self.mask.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor4::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("sample shape")
    }

    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Stable id for scene `index`.
pub fn scene_id(index: usize) -> String {
    format!("scene{index:06}")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable blur with replicated borders.
fn blur(field: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * field[y * size + clamp(x as isize + k as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * tmp[clamp(y as isize + k as isize - r) * size + x])
                .sum();
        }
    }
    out
}

struct Blob {
    y: usize,
    x: usize,
    sigma: f64,
    peak: f64,
}

impl Blob {
    fn value(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 - self.y as f64;
        let dx = x as f64 - self.x as f64;
        self.peak * (-(dy * dy + dx * dx) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Generate scene `index`; deterministic in `(config.seed, index)`.
pub fn gen_scene(config: &SceneConfig, index: usize) -> Sample {
    let size = config.size;
    let mut rng = Stream::new(config.seed, index as u64);
    let mut background = vec![0.0; size * size];
    if config.clutter_contrast > 0.0 {
        let noise: Vec<f64> = (0..size * size).map(|_| rng.normal()).collect();
        let smooth = blur(&noise, size, config.clutter_scale);
        let (lo, hi) = smooth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (b, s) in background.iter_mut().zip(&smooth) {
            *b = (s - lo) / span * config.clutter_contrast;
        }
        for _ in 0..config.edges {
            let cy = rng.range(0.0, size as f64);
            let cx = rng.range(0.0, size as f64);
            let theta = rng.range(0.0, PI);
            let height = config.clutter_contrast * rng.range(0.5, 1.0);
            let (ny, nx) = (theta.cos(), -theta.sin());
            for y in 0..size {
                for x in 0..size {
                    let dist = (y as f64 - cy) * ny + (x as f64 - cx) * nx;
                    background[y * size + x] += height * (-dist * dist / (2.0 * 0.8 * 0.8)).exp();
                }
            }
        }
    }

    let count = rng.int_in(config.targets.min, config.targets.max);
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for _ in 0..count {
        let sigma = rng.range(config.sigma.min, config.sigma.max);
        let peak = rng.range(config.peak.min, config.peak.max);
        let margin = (2.0 * sigma).ceil() as usize + 1;
        for _ in 0..50 {
            let y = rng.int_in(margin, size - 1 - margin);
            let x = rng.int_in(margin, size - 1 - margin);
            let clear = blobs.iter().all(|b| {
                let d2 = (b.y as f64 - y as f64).powi(2) + (b.x as f64 - x as f64).powi(2);
                d2.sqrt() >= 3.0 * (b.sigma + sigma) + 2.0
            });
            if clear {
                blobs.push(Blob { y, x, sigma, peak });
                break;
            }
        }
    }

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = background[y * size + x];
            let mut hit = false;
            for b in &blobs {
                let t = b.value(y, x);
                v += t;
                hit |= t >= 0.5 * b.peak;
            }
            image.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            mask.push(hit as u8);
        }
    }
    Sample {
        id: scene_id(index),
        height: size,
        width: size,
        image,
        mask,
    }
}

/// Generate scenes `start..start + count`.
pub fn gen_dataset(config: &SceneConfig, start: usize, count: usize) -> Vec<Sample> {
    (start..start + count).map(|i| gen_scene(config, i)).collect()
}

/// One of the eight symmetries of the square, as (transpose, flip rows,
/// flip columns) applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub transpose: bool,
    pub flip_v: bool,
    pub flip_h: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        transpose: false,
        flip_v: false,
        flip_h: false,
    };

    /// Source index for destination pixel `(y, x)` of an output with
    /// extents `(oh, ow)`.
    fn source(&self, y: usize, x: usize, oh: usize, ow: usize, w: usize) -> usize {
        let y = if self.flip_v { oh - 1 - y } else { y };
        let x = if self.flip_h { ow - 1 - x } else { x };
        let (sy, sx) = if self.transpose { (x, y) } else { (y, x) };
        sy * w + sx
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let (h, w) = (sample.height, sample.width);
        let (oh, ow) = if self.transpose { (w, h) } else { (h, w) };
        let mut image = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..oh {
            for x in 0..ow {
                let s = self.source(y, x, oh, ow, w);
                image.push(sample.image[s]);
                mask.push(sample.mask[s]);
            }
        }
        Sample {
            id: sample.id.clone(),
            height: oh,
            width: ow,
            image,
            mask,
        }
    }
}

/// Random flips and 90° rotations, applied identically to image and mask.
/// Draws three bits from `Stream::new(seed, 0)`: transpose, vertical flip,
/// horizontal flip.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = Stream::new(seed, 0);
    let t = Dihedral {
        transpose: rng.bool(),
        flip_v: rng.bool(),
        flip_h: rng.bool(),
    };
    t.apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dihedral_transpose_swaps_extents() {
        let s = Sample {
            id: "a".into(),
            height: 2,
            width: 3,
            image: vec![0, 1, 2, 3, 4, 5],
            mask: vec![0, 0, 1, 0, 0, 0],
        };
        let t = Dihedral {
            transpose: true,
            flip_v: false,
            flip_h: false,
        }
        .apply(&s);
        assert_eq!((t.height, t.width), (3, 2));
        assert_eq!(t.image, vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(t.mask, vec![0, 0, 0, 0, 1, 0]);
    }
}
