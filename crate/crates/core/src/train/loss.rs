//! Label-smoothed cross entropy, batch-hard triplet loss and their
//! weighted sum, recorded as fused tape operations.

use crate::autograd::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Distance floor under the square root, keeping gradients finite.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            label_smoothing: 0.1,
            triplet_margin: 0.3,
            triplet_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid(format!(
                "label smoothing must lie in [0,1), got {}",
                self.label_smoothing
            )));
        }
        if self.triplet_margin.is_nan() || self.triplet_margin <= 0.0 {
            return Err(Error::invalid(format!(
                "triplet margin must be positive, got {}",
                self.triplet_margin
            )));
        }
        if self.triplet_weight.is_nan() || self.triplet_weight < 0.0 {
            return Err(Error::invalid(format!(
                "triplet weight must be non-negative, got {}",
                self.triplet_weight
            )));
        }
        Ok(())
    }
}

struct CrossEntropyBackward {
    /// (softmax − target) / n, row-major (n, K).
    delta: Vec<f64>,
}

impl<T: Scalar> Backward<T> for CrossEntropyBackward {
    fn name(&self) -> &'static str {
        "cross_entropy_ls"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0].as_f64();
        let data = self.delta.iter().map(|&d| T::of(d * g)).collect();
        vec![Some(Tensor::new_unchecked(inputs[0].shape().to_vec(), data))]
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean softmax cross entropy against targets smoothed to
    /// (1 − ε)·onehot + ε/K.
    pub fn cross_entropy_ls(&mut self, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("cross_entropy_ls")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy_ls", format!("{} targets", n), targets.len().to_string()));
        }
        if n == 0 || k == 0 {
            return Err(Error::invalid("cross_entropy_ls needs a non-empty batch and class set"));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid(format!("label smoothing must lie in [0,1), got {}", epsilon)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target {} out of range for {} classes", t, k)));
        }
        let z = self.value(logits).data();
        let off = epsilon / k as f64;
        let mut total = 0.0;
        let mut delta = vec![0.0; n * k];
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + denom.ln();
            for (j, v) in row.iter().enumerate() {
                let q = off + if j == t { 1.0 - epsilon } else { 0.0 };
                let logp = v.as_f64() - lse;
                total -= q * logp;
                delta[i * k + j] = (logp.exp() - q) / n as f64;
            }
        }
        let out = Tensor::scalar(T::of(total / n as f64));
        Ok(self.push_op(out, &[logits], Box::new(CrossEntropyBackward { delta })))
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Hardest positive and negative of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSelection {
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

/// Batch-hard mining over Euclidean distances (ties resolve to the lowest
/// index). Errors when an anchor lacks a positive or a negative.
pub fn mine_hard_triplets<T: Scalar>(features: &Tensor<T>, pids: &[usize]) -> Result<Vec<TripletSelection>> {
    let (n, d) = features.dims2("hard_triplet_loss")?;
    if pids.len() != n {
        return Err(Error::shape("hard_triplet_loss", format!("{} pids", n), pids.len().to_string()));
    }
    let f = features.data();
    let row = |i: usize| &f[i * d..(i + 1) * d];
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = sq_dist(row(a), row(j)).max(DIST_EPS).sqrt();
            if pids[j] == pids[a] {
                if pos.is_none_or(|(_, best)| dist > best) {
                    pos = Some((j, dist));
                }
            } else if neg.is_none_or(|(_, best)| dist < best) {
                neg = Some((j, dist));
            }
        }
        let (Some((p, dp)), Some((q, dn))) = (pos, neg) else {
            return Err(Error::invalid(format!(
                "anchor {} (pid {}) needs at least one positive and one negative in the batch",
                a, pids[a]
            )));
        };
        out.push(TripletSelection {
            positive: p,
            negative: q,
            d_ap: dp,
            d_an: dn,
        });
    }
    Ok(out)
}

struct TripletBackward {
    selections: Vec<TripletSelection>,
    margin: f64,
}

impl TripletBackward {
    fn active(&self, s: &TripletSelection) -> bool {
        self.margin + s.d_ap - s.d_an > 0.0
    }
}

impl<T: Scalar> Backward<T> for TripletBackward {
    fn name(&self) -> &'static str {
        "hard_triplet_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let f = x.data();
        let c = grad.data()[0].as_f64() / n as f64;
        let mut g = vec![0.0f64; n * d];
        // d/dx_a of ||x_a − x_j|| is (x_a − x_j)/dist; zero when the floor is active.
        let mut pull = |a: usize, j: usize, dist: f64, sign: f64| {
            if dist * dist <= DIST_EPS {
                return;
            }
            for k in 0..d {
                let u = sign * c * (f[a * d + k].as_f64() - f[j * d + k].as_f64()) / dist;
                g[a * d + k] += u;
                g[j * d + k] -= u;
            }
        };
        for (a, s) in self.selections.iter().enumerate() {
            if self.active(s) {
                pull(a, s.positive, s.d_ap, 1.0);
                pull(a, s.negative, s.d_an, -1.0);
            }
        }
        let data = g.into_iter().map(T::of).collect();
        vec![Some(Tensor::new_unchecked(x.shape().to_vec(), data))]
    }

    fn branch_pattern(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Option<Vec<usize>> {
        Some(
            self.selections
                .iter()
                .flat_map(|s| [s.positive, s.negative, self.active(s) as usize])
                .collect(),
        )
    }
}

impl<T: Scalar> Tape<T> {
    /// mean over anchors of max(0, margin + d(a, hardest positive) − d(a, hardest negative)).
    pub fn hard_triplet_loss(&mut self, features: Var, pids: &[usize], margin: f64) -> Result<Var> {
        if margin.is_nan() || margin <= 0.0 {
            return Err(Error::invalid(format!("triplet margin must be positive, got {}", margin)));
        }
        let selections = mine_hard_triplets(self.value(features), pids)?;
        let n = selections.len();
        let total: f64 = selections.iter().map(|s| (margin + s.d_ap - s.d_an).max(0.0)).sum();
        let out = Tensor::scalar(T::of(total / n as f64));
        Ok(self.push_op(out, &[features], Box::new(TripletBackward { selections, margin })))
    }

    /// Cross entropy plus `triplet_weight` times the triplet loss on the
    /// embeddings; the triplet term is skipped when its weight is zero.
    pub fn combined_loss(&mut self, logits: Var, features: Var, targets: &[usize], cfg: &LossConfig) -> Result<Var> {
        cfg.validate()?;
        let ce = self.cross_entropy_ls(logits, targets, cfg.label_smoothing)?;
        if cfg.triplet_weight == 0.0 {
            return Ok(ce);
        }
        let tri = self.hard_triplet_loss(features, targets, cfg.triplet_margin)?;
        let tri = self.scale(tri, cfg.triplet_weight);
        self.add(ce, tri)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(shape, data).unwrap(), true)
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for eps in [0.0, 0.1, 0.5] {
            let mut tape = Tape::new();
            let z = leaf(&mut tape, &[3, 7], vec![0.25; 21]);
            let l = tape.cross_entropy_ls(z, &[0, 3, 6], eps).unwrap();
            assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_logits_give_near_zero() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1, 3], vec![0.0, 20.0, 0.0]);
        let l = tape.cross_entropy_ls(z, &[1], 0.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-3);
    }

    #[test]
    fn rejects_bad_targets() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1, 3], vec![0.0; 3]);
        assert!(tape.cross_entropy_ls(z, &[3], 0.1).is_err());
        assert!(tape.cross_entropy_ls(z, &[0, 1], 0.1).is_err());
        assert!(tape.cross_entropy_ls(z, &[0], 1.0).is_err());
    }

    #[test]
    fn identical_features_give_margin() {
        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[4, 3], vec![0.5; 12]);
        let l = tape.hard_triplet_loss(f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((tape.value(l).data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_give_zero() {
        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[4, 2], vec![0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0]);
        let l = tape.hard_triplet_loss(f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn triplet_requires_positives() {
        let mut tape = Tape::new();
        let f = leaf(&mut tape, &[3, 2], vec![0.0; 6]);
        assert!(tape.hard_triplet_loss(f, &[0, 1, 1], 0.3).is_err());
    }

    #[test]
    fn zero_weight_is_plain_cross_entropy() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let f = leaf(&mut tape, &[2, 2], vec![0.0; 4]);
        let cfg = LossConfig::default();
        let a = tape.combined_loss(z, f, &[0, 1], &cfg).unwrap();
        let b = tape.cross_entropy_ls(z, &[0, 1], 0.1).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }
}
