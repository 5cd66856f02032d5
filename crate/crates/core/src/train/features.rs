//! Eval-mode embedding extraction.

use crate::arch::OSNetModel;
use crate::data::{make_batch, AugmentPolicy, Augmenter, ImageSet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Row-aligned embeddings and identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    /// (n, feature_dim).
    pub matrix: Tensor<f32>,
    pub pids: Vec<usize>,
    pub camids: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape().get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.matrix.data()[i * d..(i + 1) * d]
    }
}

/// Divides every row by its ℓ2 norm (rows of zeros stay zero).
pub fn l2_normalize_rows(m: &mut Tensor<f32>) -> Result<()> {
    let (_, d) = m.dims2("l2_normalize_rows")?;
    if d == 0 {
        return Ok(());
    }
    for row in m.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
    }
    Ok(())
}

/// Embeds every image with eval-mode normalization (running statistics),
/// so results do not depend on `batch_size`.
pub fn extract_features<T: Scalar>(
    model: &OSNetModel,
    store: &mut ParamStore<T>,
    set: &ImageSet,
    batch_size: usize,
    normalize: bool,
) -> Result<Features> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let (h, w) = (model.spec.input_height, model.spec.input_width);
    let mut augmenter = Augmenter::new(AugmentPolicy::eval())?;
    let mut rng = crate::data::derive_rng(0, &[]);
    let mut rows = Vec::with_capacity(set.len() * model.spec.feature_dim);
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(batch_size) {
        let x: Tensor<T> = make_batch(set, chunk, h, w, &mut augmenter, &mut rng)?.cast();
        let f = model.embed(store, &x)?;
        rows.extend(f.data().iter().map(|v| v.as_f64() as f32));
    }
    let mut matrix = Tensor::from_vec(&[set.len(), model.spec.feature_dim], rows)?;
    if normalize {
        l2_normalize_rows(&mut matrix)?;
    }
    Ok(Features {
        matrix,
        pids: set.index.pids(),
        camids: set.index.camids(),
    })
}
