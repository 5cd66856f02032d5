//! Batch and instance normalization with per-channel affine parameters.

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

/// Treats (n, c) as (n, c, 1, 1).
fn norm_dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(op, "(n,c) or (n,c,h,w)", shape_str(x.shape()))),
    }
}

fn check_affine<T: Scalar>(op: &'static str, c: usize, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<()> {
    for t in [scale, shift] {
        if t.shape() != [c] {
            return Err(Error::shape(op, format!("[{}] affine parameter", c), shape_str(t.shape())));
        }
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("normalization epsilon must be positive, got {}", eps)));
    }
    Ok(())
}

struct BatchNormBackward {
    n: usize,
    c: usize,
    hw: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormBackward {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, scale) = (inputs[0].data(), inputs[1].data());
        let gy = grad.data();
        let (n, c, hw) = (self.n, self.c, self.hw);
        let count = (n * hw) as f64;
        let mut dscale = vec![0.0f64; c];
        let mut dshift = vec![0.0f64; c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x[i].as_f64() - self.mean[ch]) * self.inv_std[ch];
                    let g = gy[i].as_f64();
                    dscale[ch] += g * xhat;
                    dshift[ch] += g;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            for s in 0..n {
                for ch in 0..c {
                    let gamma = scale[ch].as_f64();
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        let g = gy[i].as_f64();
                        let v = if self.train {
                            let xhat = (x[i].as_f64() - self.mean[ch]) * self.inv_std[ch];
                            gamma * self.inv_std[ch] / count * (count * g - dshift[ch] - xhat * dscale[ch])
                        } else {
                            gamma * self.inv_std[ch] * g
                        };
                        dx[i] = T::of(v);
                    }
                }
            }
            Tensor::new_unchecked(inputs[0].shape().to_vec(), dx)
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new_unchecked(vec![c], dscale.into_iter().map(T::of).collect())),
            needs[2].then(|| Tensor::new_unchecked(vec![c], dshift.into_iter().map(T::of).collect())),
        ]
    }
}

struct InstanceNormBackward {
    n: usize,
    c: usize,
    hw: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> Backward<T> for InstanceNormBackward {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, scale) = (inputs[0].data(), inputs[1].data());
        let gy = grad.data();
        let (n, c, hw) = (self.n, self.c, self.hw);
        let count = hw as f64;
        let mut dscale = vec![0.0f64; c];
        let mut dshift = vec![0.0f64; c];
        let mut dx = vec![T::zero(); if needs[0] { x.len() } else { 0 }];
        for s in 0..n {
            for ch in 0..c {
                let k = s * c + ch;
                let off = k * hw;
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                for i in off..off + hw {
                    let xhat = (x[i].as_f64() - self.mean[k]) * self.inv_std[k];
                    let g = gy[i].as_f64();
                    sg += g;
                    sgx += g * xhat;
                }
                dscale[ch] += sgx;
                dshift[ch] += sg;
                if needs[0] {
                    let gamma = scale[ch].as_f64();
                    for i in off..off + hw {
                        let xhat = (x[i].as_f64() - self.mean[k]) * self.inv_std[k];
                        let g = gy[i].as_f64();
                        dx[i] = T::of(gamma * self.inv_std[k] / count * (count * g - sg - xhat * sgx));
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new_unchecked(inputs[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::new_unchecked(vec![c], dscale.into_iter().map(T::of).collect())),
            needs[2].then(|| Tensor::new_unchecked(vec![c], dshift.into_iter().map(T::of).collect())),
        ]
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over (n, h, w) per channel.
    ///
    /// Returns the batch statistics in train mode so the caller can update
    /// its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        check_eps(eps)?;
        let xt = self.value(x);
        let (n, c, hw) = norm_dims(xt, "batch_norm")?;
        check_affine("batch_norm", c, self.value(scale), self.value(shift))?;
        let xd = xt.data();
        let count = (n * hw) as f64;

        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0f64; c];
                for s in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let off = (s * c + ch) * hw;
                        *m += xd[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                let mut var = vec![0.0f64; c];
                for s in 0..n {
                    for (ch, v) in var.iter_mut().enumerate() {
                        let off = (s * c + ch) * hw;
                        *v += xd[off..off + hw]
                            .iter()
                            .map(|x| (x.as_f64() - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm running stats",
                        format!("{} channels", c),
                        format!("{}/{}", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                let (gm, bt) = (g[ch].as_f64(), b[ch].as_f64());
                for i in off..off + hw {
                    out[i] = T::of((xd[i].as_f64() - mean[ch]) * inv_std[ch] * gm + bt);
                }
            }
        }
        let out = Tensor::new_unchecked(xt.shape().to_vec(), out);
        let train = stats.is_some();
        let v = self.push_op(
            out,
            &[x, scale, shift],
            Box::new(BatchNormBackward {
                n,
                c,
                hw,
                mean,
                inv_std,
                train,
            }),
        );
        Ok((v, stats))
    }

    /// Instance normalization over (h, w) per sample and channel.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        check_eps(eps)?;
        let xt = self.value(x);
        let (n, c, hw) = norm_dims(xt, "instance_norm")?;
        check_affine("instance_norm", c, self.value(scale), self.value(shift))?;
        let xd = xt.data();
        let mut mean = vec![0.0f64; n * c];
        let mut inv_std = vec![0.0f64; n * c];
        for k in 0..n * c {
            let plane = &xd[k * hw..(k + 1) * hw];
            let m = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / hw as f64;
            mean[k] = m;
            inv_std[k] = 1.0 / (var + eps).sqrt();
        }
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); xd.len()];
        for k in 0..n * c {
            let ch = k % c;
            let (gm, bt) = (g[ch].as_f64(), b[ch].as_f64());
            for i in k * hw..(k + 1) * hw {
                out[i] = T::of((xd[i].as_f64() - mean[k]) * inv_std[k] * gm + bt);
            }
        }
        let out = Tensor::new_unchecked(xt.shape().to_vec(), out);
        Ok(self.push_op(
            out,
            &[x, scale, shift],
            Box::new(InstanceNormBackward {
                n,
                c,
                hw,
                mean,
                inv_std,
            }),
        ))
    }
}
