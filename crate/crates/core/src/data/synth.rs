//! Synthetic person-like images whose identities are defined jointly by a
//! global, a mid-scale and a small-scale attribute.
//!
//! Attributes are a global one (background hue and silhouette scale), a
//! mid-scale one (torso texture) and a small-scale one (logo row on the
//! torso centerline). Identity 0 uses value 0 on every axis; identity
//! `k > 0` changes axis `(k - 1) % 3` to value `(k - 1) / 3 + 1`. Any two
//! identities therefore agree with the base on two axes each and share at
//! least one attribute. Every attribute is symmetric under a horizontal flip.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image::save_ppm;
use super::index::{write_index, DatasetIndex, Record, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Maximum translation jitter in pixels.
    pub max_shift: isize,
    /// Brightness factor range.
    pub brightness: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_ids: 10,
            images_per_id: 40,
            height: 64,
            width: 32,
            noise: 0.03,
            max_shift: 2,
            brightness: (0.85, 1.15),
        }
    }
}

/// Values available on each attribute axis.
pub const ATTRIBUTE_VALUES: usize = 5;

/// Largest number of identities with distinct attributes.
pub const MAX_IDS: usize = 1 + 3 * (ATTRIBUTE_VALUES - 1);

/// (global, mid, small) attribute of an identity.
pub fn attributes(pid: usize) -> (usize, usize, usize) {
    if pid == 0 {
        return (0, 0, 0);
    }
    let v = (pid - 1) / 3 + 1;
    match (pid - 1) % 3 {
        0 => (v, 0, 0),
        1 => (0, v, 0),
        _ => (0, 0, v),
    }
}

/// Per-image nuisance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub dy: isize,
    pub dx: isize,
    pub brightness: f32,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        dy: 0,
        dx: 0,
        brightness: 1.0,
    };
}

fn background(g: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; ATTRIBUTE_VALUES] = [
        [0.30, 0.40, 0.60],
        [0.60, 0.50, 0.30],
        [0.35, 0.55, 0.35],
        [0.55, 0.35, 0.50],
        [0.45, 0.45, 0.45],
    ];
    PALETTE[g % ATTRIBUTE_VALUES]
}

fn silhouette_scale(g: usize) -> f32 {
    [1.0, 0.85, 0.92, 0.78, 0.95][g % ATTRIBUTE_VALUES]
}

const BODY: [f32; 3] = [0.78, 0.72, 0.66];
const DARK: [f32; 3] = [0.12, 0.12, 0.16];
const LIGHT: [f32; 3] = [0.92, 0.92, 0.88];
const LOGO: [f32; 3] = [0.95, 0.85, 0.10];

/// Torso rectangle (top, bottom, left, right), exclusive ends, before jitter.
pub fn torso_box(g: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let s = silhouette_scale(g);
    let (h, w) = (height as f32, width as f32);
    let cy = 0.45 * h;
    let half_h = 0.17 * h * s;
    let left = (w / 2.0 - 0.22 * w * s).round() as usize;
    (
        (cy - half_h).round() as usize,
        (cy + half_h).round() as usize,
        left,
        width - left,
    )
}

/// Renders an identity without noise.
pub fn render(pid: usize, height: usize, width: usize, jitter: Jitter) -> Result<Tensor<f32>> {
    let (g, m, s) = attributes(pid);
    let (h, w) = (height as isize, width as isize);
    let mut img = vec![[0f32; 3]; height * width];
    let bg = background(g);
    for px in img.iter_mut() {
        *px = bg;
    }
    let scale = silhouette_scale(g);
    let (t0, t1, l0, l1) = torso_box(g, height, width);
    let (t0, t1, l0, l1) = (t0 as isize, t1 as isize, l0 as isize, l1 as isize);
    let cx = (w - 1) as f32 / 2.0;
    let mut put = |y: isize, x: isize, c: [f32; 3]| {
        let (y, x) = (y + jitter.dy, x + jitter.dx);
        if y >= 0 && y < h && x >= 0 && x < w {
            img[(y * w + x) as usize] = c;
        }
    };
    // Head.
    let head_r = 0.09 * height as f32 * scale;
    let head_cy = t0 as f32 - head_r - 1.0;
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - head_cy, (x as f32 - cx) * 1.6);
            if dy * dy + dx * dx <= head_r * head_r {
                put(y, x, BODY);
            }
        }
    }
    // Legs.
    let leg_bottom = (t1 as f32 + 0.33 * height as f32 * scale).round() as isize;
    let half_gap = ((l1 - l0) as f32 / 8.0).max(1.0);
    for y in t1..leg_bottom.min(h) {
        for x in l0 + 1..l1 - 1 {
            if (x as f32 - cx).abs() >= half_gap {
                put(y, x, BODY);
            }
        }
    }
    // Torso texture.
    let period = 4isize;
    for y in t0..t1 {
        for x in l0..l1 {
            let (ry, rx) = (y - t0, (x - l0).min(l1 - 1 - x));
            let half = period / 2;
            let dark = match m {
                0 => (ry / half) % 2 == 0,
                1 => (rx / half) % 2 == 0,
                2 => (ry / half + rx / half) % 2 == 0,
                3 => ((ry + rx) / half) % 2 == 0,
                _ => (ry / period) % 2 == 0,
            };
            put(y, x, if dark { DARK } else { LIGHT });
        }
    }
    // Logo on the torso centerline.
    let logo_h = 3isize;
    let logo_w = if w % 2 == 0 { 4 } else { 3 };
    let span = (t1 - t0 - logo_h - 2).max(1);
    let top = t0 + 1 + span * s as isize / (ATTRIBUTE_VALUES as isize - 1);
    let left = (w - logo_w) / 2;
    for y in top..top + logo_h {
        for x in left..left + logo_w {
            put(y, x, LOGO);
        }
    }
    let mut data = vec![0f32; 3 * height * width];
    for (i, px) in img.iter().enumerate() {
        for c in 0..3 {
            data[c * height * width + i] = (px[c] * jitter.brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[1, 3, height, width], data)
}

/// Images with their index; all records in one split.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub index: DatasetIndex,
    pub images: Vec<Tensor<f32>>,
}

impl ImageSet {
    /// Loads every image of an index from disk.
    pub fn load(index: DatasetIndex) -> Result<Self> {
        let images = index
            .records
            .iter()
            .map(|r| super::image::load_ppm(index.resolve(r)))
            .collect::<Result<_>>()?;
        Ok(ImageSet { index, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn subset(&self, keep: &[usize], split: Split) -> Result<ImageSet> {
        Ok(ImageSet {
            index: DatasetIndex::new(
                keep.iter().map(|&i| self.index.records[i].clone()).collect(),
                split,
                self.index.root.clone(),
            )?,
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
        })
    }

    /// First `train_per_id` images of every identity train; the rest are
    /// test images, camera 0 as queries and other cameras as gallery.
    pub fn split_by_identity(&self, train_per_id: usize) -> Result<(ImageSet, ImageSet, ImageSet)> {
        let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
        for (_, idx) in self.index.by_pid() {
            for (k, &i) in idx.iter().enumerate() {
                if k < train_per_id {
                    train.push(i);
                } else if self.index.records[i].camid == 0 {
                    query.push(i);
                } else {
                    gallery.push(i);
                }
            }
        }
        for v in [&mut train, &mut query, &mut gallery] {
            v.sort_unstable();
        }
        Ok((
            self.subset(&train, Split::Train)?,
            self.subset(&query, Split::Query)?,
            self.subset(&gallery, Split::Gallery)?,
        ))
    }

    /// Writes images as PPM files under `dir/images` plus an index file
    /// named `<name>.txt`.
    pub fn write(&self, dir: impl AsRef<Path>, name: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("images"))?;
        for (r, img) in self.index.records.iter().zip(&self.images) {
            save_ppm(dir.join(&r.path), img)?;
        }
        let idx = DatasetIndex::new(self.index.records.clone(), self.index.split, dir)?;
        write_index(dir.join(format!("{}.txt", name)), &idx)
    }
}

/// Generates `num_ids × images_per_id` jittered images; camera ids
/// alternate 0/1 within each identity.
pub fn make_synthetic_dataset<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<ImageSet> {
    if cfg.num_ids == 0 || cfg.images_per_id == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one identity and image"));
    }
    if cfg.num_ids > MAX_IDS {
        return Err(Error::invalid(format!(
            "synthetic dataset supports at most {} identities, got {}",
            MAX_IDS, cfg.num_ids
        )));
    }
    if cfg.height < 16 || cfg.width < 8 {
        return Err(Error::invalid("synthetic images must be at least 16x8"));
    }
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut records = Vec::new();
    let mut images = Vec::new();
    for pid in 0..cfg.num_ids {
        for k in 0..cfg.images_per_id {
            let jitter = Jitter {
                dy: rng.random_range(-(cfg.max_shift as i64)..=cfg.max_shift as i64) as isize,
                dx: rng.random_range(-(cfg.max_shift as i64)..=cfg.max_shift as i64) as isize,
                brightness: rng.random_range(cfg.brightness.0..=cfg.brightness.1),
            };
            let mut img = render(pid, cfg.height, cfg.width, jitter)?;
            if cfg.noise > 0.0 {
                for v in img.data_mut() {
                    *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
            records.push(Record {
                path: format!("images/{:04}_{:03}.ppm", pid, k),
                pid,
                camid: k % 2,
            });
            images.push(img);
        }
    }
    Ok(ImageSet {
        index: DatasetIndex::new(records, Split::Train, "")?,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attributes_are_unique_and_overlapping() {
        let all: Vec<_> = (0..MAX_IDS).map(attributes).collect();
        for i in 0..MAX_IDS {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
                let (a, b) = (all[i], all[j]);
                assert!(a.0 == b.0 || a.1 == b.1 || a.2 == b.2, "{} {}", i, j);
            }
        }
    }

    #[test]
    fn render_is_flip_invariant() {
        for pid in 0..MAX_IDS {
            let img = render(pid, 64, 32, Jitter::NONE).unwrap();
            assert_eq!(crate::data::flip(&img).unwrap(), img, "pid {}", pid);
        }
    }

    #[test]
    fn counts_and_cameras() {
        let cfg = SynthConfig {
            images_per_id: 20,
            ..Default::default()
        };
        let set = make_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 200);
        for (i, r) in set.index.records.iter().enumerate() {
            assert_eq!(r.camid, i % 2);
        }
        let (train, query, gallery) = set.split_by_identity(10).unwrap();
        assert_eq!((train.len(), query.len(), gallery.len()), (100, 50, 50));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            num_ids: 3,
            images_per_id: 4,
            ..Default::default()
        };
        let a = make_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.images, b.images);
    }
}
