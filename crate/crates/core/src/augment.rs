//! Stochastic batch augmentation.
//!
//! Image operations need a CHW [`ImageShape`] on the batch; flat feature
//! vectors only accept Gaussian jitter. Every operation draws its random
//! numbers even when it ends up not firing, so the RNG position after a batch
//! depends only on the policy and the batch shape.

use ndarray::{ArrayView1, ArrayViewMut1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datastream::{Batch, ImageShape};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    HorizontalFlip { p: f64 },
    Grayscale { p: f64 },
    /// Crop area fraction drawn uniformly from `[min_scale, max_scale]`.
    ResizedCrop { min_scale: f64, max_scale: f64 },
    GaussianJitter { sigma: f64 },
}

impl AugmentOp {
    pub fn needs_image(&self) -> bool {
        !matches!(self, AugmentOp::GaussianJitter { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub ops: Vec<AugmentOp>,
    pub inner_flip_doubling: bool,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn jitter(sigma: f64) -> Self {
        Self {
            ops: vec![AugmentOp::GaussianJitter { sigma }],
            inner_flip_doubling: false,
        }
    }

    /// Flip + grayscale + resized crop, the usual image recipe.
    pub fn image_default() -> Self {
        Self {
            ops: vec![
                AugmentOp::ResizedCrop {
                    min_scale: 0.2,
                    max_scale: 1.0,
                },
                AugmentOp::HorizontalFlip { p: 0.5 },
                AugmentOp::Grayscale { p: 0.2 },
            ],
            inner_flip_doubling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            match *op {
                AugmentOp::HorizontalFlip { p } | AugmentOp::Grayscale { p } => {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidArgument(format!(
                            "probability {p} outside [0, 1]"
                        )));
                    }
                }
                AugmentOp::ResizedCrop {
                    min_scale,
                    max_scale,
                } => {
                    if !(min_scale > 0.0 && min_scale <= max_scale && max_scale <= 1.0) {
                        return Err(Error::InvalidArgument(format!(
                            "crop scale range [{min_scale}, {max_scale}] not within (0, 1]"
                        )));
                    }
                }
                AugmentOp::GaussianJitter { sigma } => {
                    if !(sigma >= 0.0 && sigma.is_finite()) {
                        return Err(Error::InvalidArgument(format!("jitter sigma {sigma} < 0")));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn augment_batch(batch: &Batch, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Batch> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty batch".into()));
    }
    policy.validate()?;
    let shape = match batch.image_shape {
        Some(s) if s.len() == batch.dim() => Some(s),
        Some(s) => {
            return Err(Error::ShapeMismatch(format!(
                "image shape {s:?} does not match feature dim {}",
                batch.dim()
            )))
        }
        None => None,
    };
    if shape.is_none() {
        if let Some(op) = policy.ops.iter().find(|op| op.needs_image()) {
            return Err(Error::ShapeMismatch(format!(
                "{op:?} needs image-shaped features"
            )));
        }
    }
    let mut out = batch.clone();
    for mut row in out.features.rows_mut() {
        for op in &policy.ops {
            match *op {
                AugmentOp::HorizontalFlip { p } => {
                    let fire = rng.random::<f64>() < p;
                    if fire {
                        hflip_in_place(&mut row, shape.unwrap());
                    }
                }
                AugmentOp::Grayscale { p } => {
                    let fire = rng.random::<f64>() < p;
                    if fire {
                        grayscale_in_place(&mut row, shape.unwrap());
                    }
                }
                AugmentOp::ResizedCrop {
                    min_scale,
                    max_scale,
                } => resized_crop_in_place(&mut row, shape.unwrap(), min_scale, max_scale, rng),
                AugmentOp::GaussianJitter { sigma } => {
                    for x in row.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *x += sigma * z;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `[batch; augment_batch(batch)]` with labels and ids duplicated in order.
pub fn double_with_aug(batch: &Batch, policy: &AugmentPolicy, rng: &mut Rng) -> Result<Batch> {
    let augmented = augment_batch(batch, policy, rng)?;
    batch.concat(&augmented)
}

/// `[batch; inner_flip(batch)]`.
pub fn double_with_inner_flip(batch: &Batch) -> Result<Batch> {
    let shape = batch
        .image_shape
        .ok_or_else(|| Error::ShapeMismatch("inner flip needs image-shaped features".into()))?;
    let mut flipped = batch.clone();
    for mut row in flipped.features.rows_mut() {
        let out = inner_flip(row.view(), shape)?;
        row.assign(&ndarray::ArrayView1::from(&out));
    }
    batch.concat(&flipped)
}

/// Mirrors the lower half of every channel left-to-right; the upper half is
/// untouched. An involution.
pub fn inner_flip(sample: ArrayView1<f64>, shape: ImageShape) -> Result<Vec<f64>> {
    if sample.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "sample of length {} is not a {shape:?} image",
            sample.len()
        )));
    }
    if !shape.height.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!(
            "inner flip needs even height, got {}",
            shape.height
        )));
    }
    let mut out = sample.to_vec();
    let (h, w) = (shape.height, shape.width);
    for c in 0..shape.channels {
        for y in h / 2..h {
            let base = (c * h + y) * w;
            out[base..base + w].reverse();
        }
    }
    Ok(out)
}

fn hflip_in_place(row: &mut ArrayViewMut1<f64>, shape: ImageShape) {
    let (h, w) = (shape.height, shape.width);
    for c in 0..shape.channels {
        for y in 0..h {
            let base = (c * h + y) * w;
            for x in 0..w / 2 {
                row.swap(base + x, base + w - 1 - x);
            }
        }
    }
}

fn grayscale_in_place(row: &mut ArrayViewMut1<f64>, shape: ImageShape) {
    let plane = shape.height * shape.width;
    let weights: Vec<f64> = if shape.channels == 3 {
        vec![0.299, 0.587, 0.114]
    } else {
        vec![1.0 / shape.channels as f64; shape.channels]
    };
    for i in 0..plane {
        let gray: f64 = weights
            .iter()
            .enumerate()
            .map(|(c, w)| w * row[c * plane + i])
            .sum();
        for c in 0..shape.channels {
            row[c * plane + i] = gray;
        }
    }
}

/// Square-aspect random crop covering a `scale` fraction of the area, resized
/// back with nearest-neighbour sampling.
fn resized_crop_in_place(
    row: &mut ArrayViewMut1<f64>,
    shape: ImageShape,
    min_scale: f64,
    max_scale: f64,
    rng: &mut Rng,
) {
    let (h, w) = (shape.height, shape.width);
    let scale = min_scale + (max_scale - min_scale) * rng.random::<f64>();
    let side = scale.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let src = row.to_vec();
    for c in 0..shape.channels {
        for y in 0..h {
            let sy = top + (y * ch) / h;
            for x in 0..w {
                let sx = left + (x * cw) / w;
                row[(c * h + y) * w + x] = src[(c * h + sy) * w + sx];
            }
        }
    }
}

/// Bitwise matrix equality.
#[cfg(test)]
pub(crate) fn rows_equal(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}
