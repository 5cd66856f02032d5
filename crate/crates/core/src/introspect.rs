//! Activation maps, gating-vector collection and k-means clustering.

use rand::seq::index::sample;

use crate::arch::{Ctx, OSNetModel};
use crate::autograd::Tape;
use crate::data::{make_batch, AugmentPolicy, Augmenter, ImageSet};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Per sample, Σ_c |F_c| divided by its spatial ℓ2 norm; (n, h, w).
/// All-zero maps stay zero.
pub fn activation_map<T: Scalar>(feature_map: &Tensor<T>) -> Result<Tensor<f64>> {
    let (n, c, h, w) = feature_map.dims4("activation_map")?;
    let hw = h * w;
    let f = feature_map.data();
    let mut out = vec![0.0f64; n * hw];
    for (s, m) in out.chunks_mut(hw.max(1)).enumerate().take(n) {
        for ch in 0..c {
            for (o, v) in m.iter_mut().zip(&f[(s * c + ch) * hw..][..hw]) {
                *o += v.as_f64().abs();
            }
        }
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            m.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::from_vec(&[n, h, w], out)
}

/// Activation maps of the conv5 output for every image of a set.
pub fn activation_maps<T: Scalar>(
    model: &OSNetModel,
    store: &mut ParamStore<T>,
    set: &ImageSet,
    batch_size: usize,
) -> Result<Tensor<f64>> {
    let mut parts = Vec::new();
    for_each_batch(model, store, set, batch_size, |tape, out, _| {
        parts.push(activation_map(tape.value(out.feature_map))?);
        Ok(())
    })?;
    Tensor::stack(&parts)
}

/// Concatenated gate vectors of the last block for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingRecord {
    /// Row of the image in its set.
    pub image: usize,
    pub path: String,
    pub vector: Vec<f64>,
}

/// Eval-mode gate outputs of the last block, one record per image.
/// Per-stream scalar gates and input-independent gates are broadcast to
/// the block's mid width, so every record has length T·c.
pub fn collect_gating<T: Scalar>(
    model: &OSNetModel,
    store: &mut ParamStore<T>,
    set: &ImageSet,
    batch_size: usize,
) -> Result<Vec<GatingRecord>> {
    if !model.spec.fusion.is_gated() {
        return Err(Error::invalid(format!(
            "fusion '{}' has no gates to collect",
            model.spec.fusion
        )));
    }
    let c = model.last_block().mid_c;
    let mut records = Vec::with_capacity(set.len());
    for_each_batch(model, store, set, batch_size, |tape, out, idx| {
        for (row, &image) in idx.iter().enumerate() {
            let mut vector = Vec::with_capacity(out.last_gates.len() * c);
            for &g in &out.last_gates {
                let v = tape.value(g);
                let (gn, gc) = (v.shape()[0], v.len() / v.shape()[0]);
                let r = if gn == 1 { 0 } else { row };
                let vals = &v.data()[r * gc..(r + 1) * gc];
                if gc == c {
                    vector.extend(vals.iter().map(|x| x.as_f64()));
                } else if gc == 1 {
                    vector.extend(std::iter::repeat_n(vals[0].as_f64(), c));
                } else {
                    return Err(Error::shape("collect_gating", format!("gate width {} or 1", c), gc.to_string()));
                }
            }
            records.push(GatingRecord {
                image,
                path: set.index.records[image].path.clone(),
                vector,
            });
        }
        Ok(())
    })?;
    Ok(records)
}

fn for_each_batch<T: Scalar>(
    model: &OSNetModel,
    store: &mut ParamStore<T>,
    set: &ImageSet,
    batch_size: usize,
    mut f: impl FnMut(&Tape<T>, &crate::arch::ForwardOutput, &[usize]) -> Result<()>,
) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let (h, w) = (model.spec.input_height, model.spec.input_width);
    let mut augmenter = Augmenter::new(AugmentPolicy::eval())?;
    let mut rng = crate::data::derive_rng(0, &[]);
    let order: Vec<usize> = (0..set.len()).collect();
    for idx in order.chunks(batch_size) {
        let x: Tensor<T> = make_batch(set, idx, h, w, &mut augmenter, &mut rng)?.cast();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store, false);
        let xv = ctx.tape.constant(x);
        let out = model.forward(&mut ctx, xv)?;
        f(&tape, &out, idx)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
fn nearest_center(v: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(v, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Lloyd iterations from `k` distinct seeded points. A cluster left empty
/// is reseeded with the point farthest from its current center. Stops when
/// assignments no longer change or after `iters` rounds.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    let n = vectors.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k must lie in 1..={}, got {}", n, k)));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("vectors have different lengths"));
    }
    let mut rng = crate::data::derive_rng(seed, &[]);
    let mut centers: Vec<Vec<f64>> = sample(&mut rng, n, k).into_iter().map(|i| vectors[i].clone()).collect();
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut converged = false;
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, v) in vectors.iter().enumerate() {
            let (j, dist) = nearest_center(v, &centers);
            dists[i] = dist;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        objective.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .ok_or_else(|| Error::invalid("no point left to reseed an empty cluster"))?;
            taken[far] = true;
            centers[j] = vectors[far].clone();
        }
    }
    Ok(KMeans {
        centers,
        assignments,
        objective,
        converged,
    })
}

/// Indices of the `count` vectors closest to `center`, nearest first.
pub fn nearest(vectors: &[Vec<f64>], center: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = vectors.iter().enumerate().map(|(i, v)| (i, sq_dist(v, center))).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    order.into_iter().take(count).map(|(i, _)| i).collect()
}
