use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use osnet::data::{
    attributes, derive_rng, load_ppm, make_batch, make_synthetic_dataset, random_crop, random_erasing, random_flip,
    random_patch, read_index, render, torso_box, AugmentPolicy, Augmenter, EraseParams, ImageSet, Jitter, PatchParams,
    PatchPool, Split, SynthConfig,
};
use osnet::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fnv1a(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn mean_image(set: &ImageSet, pid: usize) -> Vec<f64> {
    let imgs: Vec<&Tensor<f32>> = set
        .index
        .records
        .iter()
        .zip(&set.images)
        .filter(|(r, _)| r.pid == pid)
        .map(|(_, i)| i)
        .collect();
    let mut m = vec![0.0; imgs[0].len()];
    for img in &imgs {
        for (a, &v) in m.iter_mut().zip(img.data()) {
            *a += v as f64 / imgs.len() as f64;
        }
    }
    m
}

/// Average absolute mean-image difference inside and outside the torso box
/// grown by the maximum jitter shift.
fn diff_inside_outside(set: &ImageSet, a: usize, b: usize, cfg: &SynthConfig) -> (f64, f64) {
    let (ma, mb) = (mean_image(set, a), mean_image(set, b));
    let (h, w) = (cfg.height, cfg.width);
    let s = cfg.max_shift;
    let (t0, t1, l0, l1) = torso_box(attributes(a).0, h, w);
    let (mut inside, mut outside) = ((0.0f64, 0usize), (0.0f64, 0usize));
    for c in 0..3 {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = (c * h + y as usize) * w + x as usize;
                let d = (ma[i] - mb[i]).abs();
                let near = y >= t0 as isize - s
                    && y < t1 as isize + s
                    && x >= l0 as isize - s
                    && x < l1 as isize + s;
                let acc = if near { &mut inside } else { &mut outside };
                acc.0 += d;
                acc.1 += 1;
            }
        }
    }
    (inside.0 / inside.1 as f64, outside.0 / outside.1 as f64)
}

#[test]
fn shared_global_attribute_confines_mean_difference_to_torso() {
    let cfg = SynthConfig {
        num_ids: 4,
        ..SynthConfig::default()
    };
    let set = make_synthetic_dataset(&cfg, &mut derive_rng(0, &[])).unwrap();
    for other in [2, 3] {
        assert_eq!(attributes(0).0, attributes(other).0);
        let (inside, outside) = diff_inside_outside(&set, 0, other, &cfg);
        assert!(outside < 0.04, "id {} outside {}", other, outside);
        assert!(inside > 3.0 * outside, "id {} inside {} outside {}", other, inside, outside);
    }
    let (_, outside) = diff_inside_outside(&set, 0, 1, &cfg);
    assert!(outside > 0.1, "different global attribute must change the background");
}

#[test]
fn index_and_images_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_ids: 3,
        images_per_id: 4,
        ..SynthConfig::default()
    };
    let set = make_synthetic_dataset(&cfg, &mut derive_rng(1, &[])).unwrap();
    set.write(dir.path(), "all").unwrap();
    let idx = read_index(dir.path().join("all.txt"), Split::Train).unwrap();
    assert_eq!(idx.records, set.index.records);
    let back = ImageSet::load(idx).unwrap();
    for (a, b) in back.images.iter().zip(&set.images) {
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-6);
    }
    let first = load_ppm(dir.path().join(&set.index.records[0].path)).unwrap();
    assert_eq!(first.shape(), &[1, 3, 64, 32]);
}

#[test]
fn erasing_changes_one_rectangle_within_area_bounds() {
    let (h, w) = (40, 20);
    let x = Tensor::full(&[1, 3, h, w], -1.0f32).unwrap();
    let p = EraseParams {
        prob: 1.0,
        ..EraseParams::default()
    };
    for seed in 0..20 {
        let y = random_erasing(&x, &p, &mut rng(seed)).unwrap();
        let changed: Vec<(usize, usize)> = (0..h * w)
            .filter(|&i| y.data()[i] != -1.0)
            .map(|i| (i / w, i % w))
            .collect();
        let (y0, y1) = (changed.iter().map(|c| c.0).min().unwrap(), changed.iter().map(|c| c.0).max().unwrap());
        let (x0, x1) = (changed.iter().map(|c| c.1).min().unwrap(), changed.iter().map(|c| c.1).max().unwrap());
        let area = (y1 - y0 + 1) * (x1 - x0 + 1);
        assert_eq!(changed.len(), area, "changed pixels must fill their bounding box");
        let frac = area as f64 / (h * w) as f64;
        assert!((0.02..=0.4).contains(&frac), "{}", frac);
        assert!(y.data().iter().filter(|&&v| v != -1.0).all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn pasted_patch_appears_verbatim() {
    let (h, w, ph, pw) = (24, 12, 5, 4);
    let mut red = vec![0.0f32; 3 * ph * pw];
    red[..ph * pw].fill(1.0);
    let red = Tensor::from_vec(&[1, 3, ph, pw], red).unwrap();
    let x = Tensor::rand_uniform(&[1, 3, h, w], 0.2, 0.8, &mut rng(2)).unwrap();
    let p = PatchParams {
        apply_prob: 1.0,
        ..PatchParams::default()
    };
    let mut pool = PatchPool::new(1).unwrap();
    pool.push(red);
    let y = random_patch(&x, &mut pool, &p, &mut rng(3)).unwrap();
    let d = y.data();
    let at = |c: usize, r: usize, q: usize| d[(c * h + r) * w + q];
    let found = (0..=h - ph).any(|top| {
        (0..=w - pw).any(|left| {
            (0..ph).all(|r| {
                (0..pw).all(|q| {
                    at(0, top + r, left + q) == 1.0 && at(1, top + r, left + q) == 0.0 && at(2, top + r, left + q) == 0.0
                })
            })
        })
    });
    assert!(found);
    assert_eq!(pool.len(), 1);
}

#[test]
fn flip_and_crop_golden_hash() {
    let img = render(4, 64, 32, Jitter::NONE).unwrap();
    let mut r = rng(42);
    let mut outs = Vec::new();
    for _ in 0..8 {
        let y = random_crop(&img, 4, 0.5, &mut r).unwrap();
        outs.extend_from_slice(random_flip(&y, 0.5, &mut r).unwrap().data());
    }
    assert_eq!(fnv1a(&outs), GOLDEN_FLIP_CROP);
}

const GOLDEN_FLIP_CROP: u64 = 7727867459313076889;

#[test]
fn batches_are_reproducible_per_seed() {
    let cfg = SynthConfig {
        num_ids: 2,
        images_per_id: 6,
        ..SynthConfig::default()
    };
    let set = make_synthetic_dataset(&cfg, &mut derive_rng(5, &[])).unwrap();
    let policy = AugmentPolicy {
        patch: Some(PatchParams::default()),
        ..AugmentPolicy::standard(64)
    };
    let run = |seed: u64| {
        let mut aug = Augmenter::new(policy.clone()).unwrap();
        make_batch(&set, &[0, 3, 7, 11], 64, 32, &mut aug, &mut derive_rng(seed, &[2, 0, 0])).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
    assert_eq!(run(9).shape(), &[4, 3, 64, 32]);
}
