//! Dataset indices, image codec, augmentation, synthetic data and batching.

mod augment;
mod image;
mod index;
mod synth;

pub use augment::{
    flip, random_crop, random_erasing, random_flip, random_patch, AugmentPolicy, Augmenter, EraseParams,
    PatchParams, PatchPool,
};
pub use image::{
    decode_ppm, encode_ppm, load_ppm, normalize, resize_bilinear, save_ppm, IMAGENET_MEAN, IMAGENET_STD,
};
pub use index::{read_index, write_index, DatasetIndex, Record, Split};
pub use synth::{attributes, ATTRIBUTE_VALUES, MAX_IDS, make_synthetic_dataset, render, torso_box, ImageSet, Jitter, SynthConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a (seed, purpose...) tuple, stable across
/// platforms and releases.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let key = parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Resizes (when needed) and augments the selected images, then stacks
/// them into an (n, 3, height, width) batch.
pub fn make_batch<R: rand::Rng + ?Sized>(
    set: &ImageSet,
    indices: &[usize],
    height: usize,
    width: usize,
    augmenter: &mut Augmenter,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let mut parts = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = set
            .images
            .get(i)
            .ok_or_else(|| crate::Error::invalid(format!("image index {} out of range", i)))?;
        let img = resize_bilinear(img, height, width)?;
        parts.push(augmenter.apply(&img, rng)?);
    }
    Tensor::stack(&parts)
}
