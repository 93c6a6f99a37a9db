//! Positive/negative stochastic image transforms and the mask-producing
//! composition that pairs a batch with its augmented copy.
//!
//! Positive transforms (noise, smoothing) should leave every generative
//! attribute intact. Negative transform `i` is assumed to change attribute `i`
//! only. [`compose_augmentations`] walks the negatives in attribute order, then
//! the positives, applying each with probability `bernoulli_p`, and records a
//! mask bit for every negative it applied.
//!
//! One parameter instance is sampled per call and shared by the whole batch.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::Tensor;
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::RngState;

/// Noise standard deviations, on the 0–255 intensity scale.
pub const NOISE_SIGMAS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const SMOOTH_SIGMAS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];
pub const ROTATION_DEGREES: [u32; 3] = [90, 180, 270];
pub const CUTOUT_SIDES: [usize; 4] = [5, 10, 15, 20];
/// Bounds on the crop side as a fraction of the shorter image side.
pub const CROP_FRACTION: (f64, f64) = (0.6, 0.9);

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveTransform {
    GaussianNoise,
    GaussianSmooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeTransform {
    Grayscale,
    Flip,
    Rotate,
    CropResize,
    Cutout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// A transform together with the parameters it was applied with.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    /// `sigma` on the 0–255 scale; `seed` drives the per-pixel noise field.
    GaussianNoise { sigma: f64, seed: u64 },
    GaussianSmooth { sigma: f64 },
    Grayscale,
    Flip(FlipAxis),
    Rotate { degrees: u32 },
    CropResize { top: usize, left: usize, side: usize },
    Cutout { top: usize, left: usize, side: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Negative { attribute: usize },
    Positive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub stage: Stage,
    pub applied: Applied,
}

/// Sampling ranges for transform parameters; each must be a subset of the
/// defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformRanges {
    pub noise_sigmas: Vec<f64>,
    pub smooth_sigmas: Vec<f64>,
    pub flip_axes: Vec<FlipAxis>,
    pub rotation_degrees: Vec<u32>,
    pub crop_fraction: (f64, f64),
    pub cutout_sides: Vec<usize>,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            noise_sigmas: NOISE_SIGMAS.to_vec(),
            smooth_sigmas: SMOOTH_SIGMAS.to_vec(),
            flip_axes: vec![FlipAxis::Horizontal, FlipAxis::Vertical],
            rotation_degrees: ROTATION_DEGREES.to_vec(),
            crop_fraction: CROP_FRACTION,
            cutout_sides: CUTOUT_SIDES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    /// `negatives[i]` perturbs attribute `i`.
    pub negatives: Vec<NegativeTransform>,
    pub positives: Vec<PositiveTransform>,
    pub bernoulli_p: f64,
    pub ranges: TransformRanges,
}

impl AugmentationSpec {
    /// Two-attribute default: color ↔ grayscale, position ↔ crop-and-resize.
    pub fn color_position() -> Self {
        Self {
            negatives: vec![NegativeTransform::Grayscale, NegativeTransform::CropResize],
            positives: vec![PositiveTransform::GaussianNoise, PositiveTransform::GaussianSmooth],
            bernoulli_p: 0.5,
            ranges: TransformRanges::default(),
        }
    }

    pub fn k(&self) -> usize {
        self.negatives.len()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.negatives.len() != k {
            return Err(config_err!(
                "augmentation spec has {} negative transforms but k = {k}",
                self.negatives.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.bernoulli_p) {
            return Err(config_err!("bernoulli_p {} outside [0, 1]", self.bernoulli_p));
        }
        let r = &self.ranges;
        let subset = |name: &str, ok: bool, empty: bool| {
            if empty || !ok {
                Err(config_err!("{name} range must be a non-empty subset of the defaults"))
            } else {
                Ok(())
            }
        };
        subset(
            "noise sigma",
            r.noise_sigmas.iter().all(|s| NOISE_SIGMAS.contains(s)),
            r.noise_sigmas.is_empty(),
        )?;
        subset(
            "smoothing sigma",
            r.smooth_sigmas.iter().all(|s| SMOOTH_SIGMAS.contains(s)),
            r.smooth_sigmas.is_empty(),
        )?;
        subset("flip orientation", true, r.flip_axes.is_empty())?;
        subset(
            "rotation",
            r.rotation_degrees.iter().all(|d| ROTATION_DEGREES.contains(d)),
            r.rotation_degrees.is_empty(),
        )?;
        subset(
            "cutout side",
            r.cutout_sides.iter().all(|s| CUTOUT_SIDES.contains(s)),
            r.cutout_sides.is_empty(),
        )?;
        let (lo, hi) = r.crop_fraction;
        subset(
            "crop fraction",
            CROP_FRACTION.0 <= lo && lo <= hi && hi <= CROP_FRACTION.1,
            false,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationOutcome {
    pub x_aug: Tensor,
    /// `mask[i]` is set iff the negative transform for attribute `i` ran.
    pub mask: Vec<bool>,
    pub log: Vec<LogEntry>,
}

struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn dims(batch: &Tensor) -> Result<Dims> {
    match *batch.shape() {
        [b, c, h, w] => Ok(Dims { b, c, h, w }),
        _ => Err(dim_err!("expected a B×C×H×W batch, got {:?}", batch.shape())),
    }
}

impl Applied {
    /// Samples parameters for a positive transform.
    pub fn sample_positive(which: PositiveTransform, ranges: &TransformRanges, rng: &mut RngState) -> Self {
        match which {
            PositiveTransform::GaussianNoise => Applied::GaussianNoise {
                sigma: *rng.choose(&ranges.noise_sigmas),
                seed: rng.next_u64(),
            },
            PositiveTransform::GaussianSmooth => Applied::GaussianSmooth {
                sigma: *rng.choose(&ranges.smooth_sigmas),
            },
        }
    }

    /// Samples parameters for a negative transform on images of size `h×w`.
    pub fn sample_negative(
        which: NegativeTransform,
        ranges: &TransformRanges,
        h: usize,
        w: usize,
        rng: &mut RngState,
    ) -> Self {
        match which {
            NegativeTransform::Grayscale => Applied::Grayscale,
            NegativeTransform::Flip => Applied::Flip(*rng.choose(&ranges.flip_axes)),
            NegativeTransform::Rotate => Applied::Rotate {
                degrees: *rng.choose(&ranges.rotation_degrees),
            },
            NegativeTransform::CropResize => {
                let (lo, hi) = ranges.crop_fraction;
                let frac = rng.uniform_range(lo, hi);
                let side = ((frac * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
                let top = rng.below(h - side + 1);
                let left = rng.below(w - side + 1);
                Applied::CropResize { top, left, side }
            }
            NegativeTransform::Cutout => {
                let side = (*rng.choose(&ranges.cutout_sides)).min(h).min(w);
                let top = rng.below(h - side + 1);
                let left = rng.below(w - side + 1);
                Applied::Cutout { top, left, side }
            }
        }
    }

    /// Applies this exact transform instance to every image of `batch`.
    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let d = dims(batch)?;
        match *self {
            Applied::GaussianNoise { sigma, seed } => Ok(gaussian_noise(batch, sigma, seed)),
            Applied::GaussianSmooth { sigma } => Ok(gaussian_smooth(batch, &d, sigma)),
            Applied::Grayscale => grayscale(batch, &d),
            Applied::Flip(axis) => Ok(flip(batch, &d, axis)),
            Applied::Rotate { degrees } => rotate(batch, &d, degrees),
            Applied::CropResize { top, left, side } => crop_resize(batch, &d, top, left, side),
            Applied::Cutout { top, left, side } => cutout(batch, &d, top, left, side),
        }
    }
}

/// Samples and applies one positive transform.
pub fn apply_positive(
    batch: &Tensor,
    which: PositiveTransform,
    ranges: &TransformRanges,
    rng: &mut RngState,
) -> Result<(Tensor, Applied)> {
    dims(batch)?;
    let applied = Applied::sample_positive(which, ranges, rng);
    Ok((applied.apply(batch)?, applied))
}

/// Samples and applies one negative transform.
pub fn apply_negative(
    batch: &Tensor,
    which: NegativeTransform,
    ranges: &TransformRanges,
    rng: &mut RngState,
) -> Result<(Tensor, Applied)> {
    let d = dims(batch)?;
    if which == NegativeTransform::Rotate && d.h != d.w {
        return Err(Error::UnsupportedShape(format!(
            "rotation needs square images, got {}×{}",
            d.h, d.w
        )));
    }
    let applied = Applied::sample_negative(which, ranges, d.h, d.w, rng);
    Ok((applied.apply(batch)?, applied))
}

/// Composes negatives then positives, each gated by a Bernoulli draw.
pub fn compose_augmentations(
    batch: &Tensor,
    spec: &AugmentationSpec,
    rng: &mut RngState,
) -> Result<AugmentationOutcome> {
    let p = spec.bernoulli_p;
    compose_with_gates(batch, spec, rng, |rng| rng.bernoulli(p))
}

/// [`compose_augmentations`] with the gate draws supplied by `gate`.
pub fn compose_with_gates(
    batch: &Tensor,
    spec: &AugmentationSpec,
    rng: &mut RngState,
    mut gate: impl FnMut(&mut RngState) -> bool,
) -> Result<AugmentationOutcome> {
    let d = dims(batch)?;
    let mut x = batch.clone();
    let mut mask = vec![false; spec.negatives.len()];
    let mut log = Vec::new();
    for (attribute, &neg) in spec.negatives.iter().enumerate() {
        if gate(rng) {
            mask[attribute] = true;
            let (next, applied) = apply_negative(&x, neg, &spec.ranges, rng)?;
            x = next;
            log.push(LogEntry {
                stage: Stage::Negative { attribute },
                applied,
            });
        }
    }
    // The positive loop runs over the actual positive list, whatever k is.
    for &pos in &spec.positives {
        if gate(rng) {
            let (next, applied) = apply_positive(&x, pos, &spec.ranges, rng)?;
            x = next;
            log.push(LogEntry {
                stage: Stage::Positive,
                applied,
            });
        }
    }
    debug_assert_eq!(x.shape(), &[d.b, d.c, d.h, d.w]);
    Ok(AugmentationOutcome { x_aug: x, mask, log })
}

fn gaussian_noise(batch: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = RngState::new(seed);
    let scale = sigma / 255.0;
    let mut out = batch.clone();
    for v in out.data_mut() {
        let noisy = *v as f64 + scale * rng.normal();
        *v = noisy.clamp(0.0, 1.0) as f32;
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge-clamped borders.
fn gaussian_smooth(batch: &Tensor, d: &Dims, sigma: f64) -> Tensor {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut out = batch.clone();
    let plane = d.h * d.w;
    let mut tmp = vec![0.0f64; plane];
    for chunk in out.data_mut().chunks_mut(plane) {
        for y in 0..d.h {
            for x in 0..d.w {
                tmp[y * d.w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sx = (x as isize + i as isize - radius).clamp(0, d.w as isize - 1) as usize;
                        k * chunk[y * d.w + sx] as f64
                    })
                    .sum();
            }
        }
        for y in 0..d.h {
            for x in 0..d.w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let sy = (y as isize + i as isize - radius).clamp(0, d.h as isize - 1) as usize;
                        k * tmp[sy * d.w + x]
                    })
                    .sum();
                chunk[y * d.w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn grayscale(batch: &Tensor, d: &Dims) -> Result<Tensor> {
    if d.c != 3 {
        return Err(Error::UnsupportedShape(format!(
            "grayscale needs 3 channels, got {}",
            d.c
        )));
    }
    let plane = d.h * d.w;
    let mut out = batch.clone();
    for img in out.data_mut().chunks_mut(3 * plane) {
        for p in 0..plane {
            let lum: f64 = (0..3).map(|c| LUMA[c] * img[c * plane + p] as f64).sum();
            let lum = lum.clamp(0.0, 1.0) as f32;
            for c in 0..3 {
                img[c * plane + p] = lum;
            }
        }
    }
    Ok(out)
}

fn flip(batch: &Tensor, d: &Dims, axis: FlipAxis) -> Tensor {
    let mut out = batch.clone();
    let plane = d.h * d.w;
    for chunk in out.data_mut().chunks_mut(plane) {
        match axis {
            FlipAxis::Horizontal => chunk.chunks_mut(d.w).for_each(|row| row.reverse()),
            FlipAxis::Vertical => {
                for y in 0..d.h / 2 {
                    for x in 0..d.w {
                        chunk.swap(y * d.w + x, (d.h - 1 - y) * d.w + x);
                    }
                }
            }
        }
    }
    out
}

/// Counter-clockwise rotation by a multiple of 90°.
fn rotate(batch: &Tensor, d: &Dims, degrees: u32) -> Result<Tensor> {
    if d.h != d.w {
        return Err(Error::UnsupportedShape(format!(
            "rotation needs square images, got {}×{}",
            d.h, d.w
        )));
    }
    if degrees % 90 != 0 {
        return Err(Error::UnsupportedShape(format!(
            "rotation by {degrees}° is not a quarter turn"
        )));
    }
    let n = d.h;
    let mut out = batch.clone();
    for _ in 0..(degrees / 90) % 4 {
        let src = out.clone();
        for (dst, s) in out.data_mut().chunks_mut(n * n).zip(src.data().chunks(n * n)) {
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = s[j * n + (n - 1 - i)];
                }
            }
        }
    }
    Ok(out)
}

fn crop_resize(batch: &Tensor, d: &Dims, top: usize, left: usize, side: usize) -> Result<Tensor> {
    if side == 0 || top + side > d.h || left + side > d.w {
        return Err(dim_err!(
            "crop ({top}, {left}, side {side}) outside {}×{} image",
            d.h,
            d.w
        ));
    }
    let plane = d.h * d.w;
    let sample = |dst: usize, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * side as f64 / len as f64 - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, src - i0 as f64)
    };
    let rows: Vec<_> = (0..d.h).map(|y| sample(y, d.h)).collect();
    let cols: Vec<_> = (0..d.w).map(|x| sample(x, d.w)).collect();
    let mut out = batch.clone();
    for (dst, src) in out.data_mut().chunks_mut(plane).zip(batch.data().chunks(plane)) {
        let at = |y: usize, x: usize| src[(top + y) * d.w + left + x] as f64;
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                dst[y * d.w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}

fn cutout(batch: &Tensor, d: &Dims, top: usize, left: usize, side: usize) -> Result<Tensor> {
    if top + side > d.h || left + side > d.w {
        return Err(dim_err!(
            "cutout ({top}, {left}, side {side}) outside {}×{} image",
            d.h,
            d.w
        ));
    }
    let plane = d.h * d.w;
    let mut out = batch.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        for y in top..top + side {
            chunk[y * d.w + left..y * d.w + left + side].fill(0.0);
        }
    }
    Ok(out)
}

impl fmt::Display for PositiveTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositiveTransform::GaussianNoise => "gaussian_noise",
            PositiveTransform::GaussianSmooth => "gaussian_smooth",
        })
    }
}

impl FromStr for PositiveTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "gaussian_smooth" => Ok(Self::GaussianSmooth),
            other => Err(config_err!("unknown positive transform '{other}'")),
        }
    }
}

impl fmt::Display for NegativeTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeTransform::Grayscale => "grayscale",
            NegativeTransform::Flip => "flip",
            NegativeTransform::Rotate => "rotate",
            NegativeTransform::CropResize => "crop_resize",
            NegativeTransform::Cutout => "cutout",
        })
    }
}

impl FromStr for NegativeTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "grayscale" => Ok(Self::Grayscale),
            "flip" => Ok(Self::Flip),
            "rotate" => Ok(Self::Rotate),
            "crop_resize" => Ok(Self::CropResize),
            "cutout" => Ok(Self::Cutout),
            other => Err(config_err!("unknown negative transform '{other}'")),
        }
    }
}
