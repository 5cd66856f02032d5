//! Training-time augmentations on (1, 3, H, W) images in [0, 1].

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::{normalize, IMAGENET_MEAN, IMAGENET_STD};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseParams {
    pub prob: f64,
    /// Erased area as a fraction of the image.
    pub area: (f64, f64),
    /// Height / width ratio of the erased rectangle.
    pub aspect: (f64, f64),
}

impl Default for EraseParams {
    fn default() -> Self {
        EraseParams {
            prob: 0.5,
            area: (0.02, 0.4),
            aspect: (0.3, 3.33),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchParams {
    pub capacity: usize,
    pub apply_prob: f64,
    /// Extracted patch area as a fraction of the image.
    pub area: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            capacity: 1000,
            apply_prob: 0.5,
            area: (0.01, 0.5),
            aspect: (0.1, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub crop_prob: f64,
    pub crop_padding: usize,
    pub erase: Option<EraseParams>,
    pub patch: Option<PatchParams>,
    pub normalize: Option<([f32; 3], [f32; 3])>,
}

impl AugmentPolicy {
    /// Flip, crop (padding 4 below 128 px height, 10 otherwise), erasing,
    /// ImageNet normalization. Random patch is opt-in.
    pub fn standard(height: usize) -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            crop_prob: 0.5,
            crop_padding: if height < 128 { 4 } else { 10 },
            erase: Some(EraseParams::default()),
            patch: None,
            normalize: Some((IMAGENET_MEAN, IMAGENET_STD)),
        }
    }

    /// Normalization only, for evaluation.
    pub fn eval() -> Self {
        AugmentPolicy {
            flip_prob: 0.0,
            crop_prob: 0.0,
            crop_padding: 0,
            erase: None,
            patch: None,
            normalize: Some((IMAGENET_MEAN, IMAGENET_STD)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{} must lie in [0,1], got {}", name, p)))
            }
        };
        let range = |name: &str, (lo, hi): (f64, f64), unit: bool| {
            let ok = lo > 0.0 && lo <= hi && (!unit || hi < 1.0);
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(format!("invalid {} range ({}, {})", name, lo, hi)))
            }
        };
        prob("flip_prob", self.flip_prob)?;
        prob("crop_prob", self.crop_prob)?;
        if let Some(e) = &self.erase {
            prob("erase prob", e.prob)?;
            range("erase area", e.area, true)?;
            range("erase aspect", e.aspect, false)?;
        }
        if let Some(p) = &self.patch {
            prob("patch apply_prob", p.apply_prob)?;
            range("patch area", p.area, true)?;
            range("patch aspect", p.aspect, false)?;
            if p.capacity == 0 {
                return Err(Error::invalid("patch pool capacity must be at least 1"));
            }
        }
        Ok(())
    }
}

fn dims(x: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    let (n, _, h, w) = x.dims4(op)?;
    if n != 1 {
        return Err(Error::shape(op, "(1,c,h,w) image", format!("{:?}", x.shape())));
    }
    Ok((h, w))
}

/// Mirrors the width axis with probability `prob`.
pub fn random_flip<R: Rng + ?Sized>(x: &Tensor<f32>, prob: f64, rng: &mut R) -> Result<Tensor<f32>> {
    dims(x, "random_flip")?;
    if rng.random::<f64>() < prob {
        flip(x)
    } else {
        Ok(x.clone())
    }
}

pub fn flip(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, _, _, w) = x.dims4("flip")?;
    let mut out = x.clone();
    for (row_out, row_in) in out.data_mut().chunks_exact_mut(w).zip(x.data().chunks_exact(w)) {
        for (o, i) in row_out.iter_mut().zip(row_in.iter().rev()) {
            *o = *i;
        }
    }
    Ok(out)
}

/// With probability `prob`, zero-pads by `padding` and takes a random
/// window of the original size.
pub fn random_crop<R: Rng + ?Sized>(x: &Tensor<f32>, padding: usize, prob: f64, rng: &mut R) -> Result<Tensor<f32>> {
    let (h, w) = dims(x, "random_crop")?;
    if padding == 0 || rng.random::<f64>() >= prob {
        return Ok(x.clone());
    }
    let dy = rng.random_range(0..=2 * padding) as isize - padding as isize;
    let dx = rng.random_range(0..=2 * padding) as isize - padding as isize;
    let c = x.shape()[1];
    let mut out = vec![0f32; x.len()];
    let d = x.data();
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for q in 0..w {
                let sx = q as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + q] = d[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Rectangle (height, width) with area fraction in `area` after rounding
/// and aspect ratio (h/w) in `aspect`, strictly smaller than the image.
fn sample_rect<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    area: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> Option<(usize, usize)> {
    let total = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.random_range(area.0..=area.1) * total;
        let ratio = rng.random_range(aspect.0..=aspect.1);
        let rh = (target * ratio).sqrt().round() as usize;
        let rw = (target / ratio).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh >= h || rw >= w {
            continue;
        }
        let frac = (rh * rw) as f64 / total;
        if frac >= area.0 && frac <= area.1 {
            return Some((rh, rw));
        }
    }
    None
}

/// With probability `p.prob`, fills one rectangle with uniform random values
/// in [0, 1).
pub fn random_erasing<R: Rng + ?Sized>(x: &Tensor<f32>, p: &EraseParams, rng: &mut R) -> Result<Tensor<f32>> {
    let (h, w) = dims(x, "random_erasing")?;
    if rng.random::<f64>() >= p.prob {
        return Ok(x.clone());
    }
    let Some((rh, rw)) = sample_rect(h, w, p.area, p.aspect, rng) else {
        return Ok(x.clone());
    };
    let top = rng.random_range(0..=h - rh);
    let left = rng.random_range(0..=w - rw);
    let c = x.shape()[1];
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in top..top + rh {
            for q in left..left + rw {
                d[(ch * h + y) * w + q] = rng.random::<f32>();
            }
        }
    }
    Ok(out)
}

/// Bounded FIFO of image patches.
#[derive(Debug, Clone)]
pub struct PatchPool {
    capacity: usize,
    patches: VecDeque<Tensor<f32>>,
}

impl PatchPool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("patch pool capacity must be at least 1"));
        }
        Ok(PatchPool {
            capacity,
            patches: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Adds a patch, evicting the oldest when full.
    pub fn push(&mut self, patch: Tensor<f32>) {
        if self.patches.len() == self.capacity {
            self.patches.pop_front();
        }
        self.patches.push_back(patch);
    }

    pub fn patches(&self) -> impl Iterator<Item = &Tensor<f32>> {
        self.patches.iter()
    }
}

fn crop(x: &Tensor<f32>, top: usize, left: usize, ph: usize, pw: usize) -> Result<Tensor<f32>> {
    let (_, c, h, w) = x.dims4("crop")?;
    let d = x.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in top..top + ph {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + left..row + left + pw]);
        }
    }
    Tensor::from_vec(&[1, c, ph, pw], out)
}

/// With probability `p.apply_prob`, pastes a random pool patch at a random
/// position; then stores a random patch of the original image in the pool.
pub fn random_patch<R: Rng + ?Sized>(
    x: &Tensor<f32>,
    pool: &mut PatchPool,
    p: &PatchParams,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let (h, w) = dims(x, "random_patch")?;
    let c = x.shape()[1];
    let mut out = x.clone();
    if !pool.is_empty() && rng.random::<f64>() < p.apply_prob {
        let patch = &pool.patches[rng.random_range(0..pool.len())];
        let (ph, pw) = (patch.shape()[2], patch.shape()[3]);
        if ph <= h && pw <= w && patch.shape()[1] == c {
            let top = rng.random_range(0..=h - ph);
            let left = rng.random_range(0..=w - pw);
            let d = out.data_mut();
            for ch in 0..c {
                for y in 0..ph {
                    let dst = (ch * h + top + y) * w + left;
                    let src = (ch * ph + y) * pw;
                    d[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
                }
            }
        }
    }
    if let Some((ph, pw)) = sample_rect(h, w, p.area, p.aspect, rng) {
        let top = rng.random_range(0..=h - ph);
        let left = rng.random_range(0..=w - pw);
        pool.push(crop(x, top, left, ph, pw)?);
    }
    Ok(out)
}

/// Applies a policy in the order crop, flip, patch, erase, normalize.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub policy: AugmentPolicy,
    pub pool: Option<PatchPool>,
}

impl Augmenter {
    pub fn new(policy: AugmentPolicy) -> Result<Self> {
        policy.validate()?;
        let pool = match &policy.patch {
            Some(p) => Some(PatchPool::new(p.capacity)?),
            None => None,
        };
        Ok(Augmenter { policy, pool })
    }

    pub fn apply<R: Rng + ?Sized>(&mut self, x: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
        let p = &self.policy;
        let mut y = random_crop(x, p.crop_padding, p.crop_prob, rng)?;
        y = random_flip(&y, p.flip_prob, rng)?;
        if let (Some(params), Some(pool)) = (&p.patch, self.pool.as_mut()) {
            y = random_patch(&y, pool, params, rng)?;
        }
        if let Some(e) = &p.erase {
            y = random_erasing(&y, e, rng)?;
        }
        if let Some((mean, std)) = &p.normalize {
            y = normalize(&y, mean, std)?;
        }
        Ok(y)
    }
}
