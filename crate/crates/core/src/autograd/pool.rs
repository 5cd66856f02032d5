use super::conv::conv_out_extent;
use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

fn pool_extents(op: &'static str, h: usize, w: usize, k: usize, s: usize, p: usize) -> Result<(usize, usize)> {
    if k == 0 || s == 0 || p >= k {
        return Err(Error::invalid(format!(
            "{}: invalid window {} / stride {} / padding {}",
            op, k, s, p
        )));
    }
    match (conv_out_extent(h, k, s, p), conv_out_extent(w, k, s, p)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::invalid(format!(
            "{}: window {} does not fit a {}x{} map",
            op, k, h, w
        ))),
    }
}

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = inputs[0].zeros_like();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx[src] += g;
        }
        vec![Some(dx)]
    }

    fn branch_pattern(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Option<Vec<usize>> {
        Some(self.argmax.clone())
    }
}

struct AvgPoolBackward {
    k: usize,
    s: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolBackward {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4("avg_pool2d").expect("checked in forward");
        let (_, _, oh, ow) = grad.dims4("avg_pool2d").expect("checked in forward");
        let norm = 1.0 / (self.k * self.k) as f64;
        let mut dx = vec![0.0f64; x.len()];
        let g = grad.data();
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(plane * oh + oy) * ow + ox].as_f64() * norm;
                    for ky in 0..self.k {
                        let row = (plane * h + oy * self.s + ky) * w + ox * self.s;
                        for v in &mut dx[row..row + self.k] {
                            *v += gv;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new_unchecked(x.shape().to_vec(), dx.into_iter().map(T::of).collect()))]
    }
}

struct GlobalAvgPoolBackward;

impl<T: Scalar> Backward<T> for GlobalAvgPoolBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (_, _, h, w) = x.dims4("global_avg_pool").expect("checked in forward");
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let mut dx = Vec::with_capacity(x.len());
        for &g in grad.data() {
            dx.extend(std::iter::repeat_n(g * inv, hw));
        }
        vec![Some(Tensor::new_unchecked(x.shape().to_vec(), dx))]
    }
}

impl<T: Scalar> Tape<T> {
    /// Max pooling; padded cells never win. Ties route to the first maximum
    /// in row-major scan order.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4("max_pool2d")?;
        let (oh, ow) = pool_extents("max_pool2d", h, w, window, stride, padding)?;
        let xd = xt.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(usize, T)> = None;
                    for ky in 0..window {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = xd[idx];
                            if best.is_none_or(|(_, b)| v > b) {
                                best = Some((idx, v));
                            }
                        }
                    }
                    let (idx, v) = best.expect("window overlaps the map");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let out = Tensor::new_unchecked(vec![n, c, oh, ow], out);
        Ok(self.push_op(out, &[x], Box::new(MaxPoolBackward { argmax })))
    }

    /// Average pooling without padding.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4("avg_pool2d")?;
        let (oh, ow) = pool_extents("avg_pool2d", h, w, window, stride, 0)?;
        let xd = xt.data();
        let norm = 1.0 / (window * window) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ky in 0..window {
                        let row = (plane * h + oy * stride + ky) * w + ox * stride;
                        acc += xd[row..row + window].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    out.push(T::of(acc * norm));
                }
            }
        }
        let out = Tensor::new_unchecked(vec![n, c, oh, ow], out);
        Ok(self.push_op(out, &[x], Box::new(AvgPoolBackward { k: window, s: stride })))
    }

    /// Mean over (h, w); output (n, c, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4("global_avg_pool")?;
        let hw = h * w;
        let out: Vec<T> = xt
            .data()
            .chunks(hw)
            .map(|p| T::of(p.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let out = Tensor::new_unchecked(vec![n, c, 1, 1], out);
        Ok(self.push_op(out, &[x], Box::new(GlobalAvgPoolBackward)))
    }
}

/// Output shape of a pooling layer applied to `shape`.
pub fn pooled_shape(shape: &[usize], window: usize, stride: usize, padding: usize) -> Result<Vec<usize>> {
    match shape[..] {
        [n, c, h, w] => {
            let (oh, ow) = pool_extents("pool", h, w, window, stride, padding)?;
            Ok(vec![n, c, oh, ow])
        }
        _ => Err(Error::shape("pool", "4-D (n,c,h,w)", shape_str(shape))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_pool_picks_bottom_right_of_monotone_ramp() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap(), true);
        let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_in_scan_order() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).unwrap(), true);
        let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4, 6], 2.5).unwrap());
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
        let g = tape.global_avg_pool(x).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn global_pool_mean_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let up = tape.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let prod = tape.mul(y, up).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.75; 4]);
    }

    #[test]
    fn pools_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = Tensor::<f64>::randn(&[2, 2, 7, 6], 1.0, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xt.clone());
        let mp = tape.max_pool2d(x, 3, 2, 1).unwrap();
        let ap = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(mp), &[2, 2, 4, 3]);
        for plane in 0..4 {
            for oy in 0..4usize {
                for ox in 0..3usize {
                    let mut best = f64::NEG_INFINITY;
                    for iy in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(7) {
                        for ix in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(6) {
                            best = best.max(xt[(plane * 7 + iy) * 6 + ix]);
                        }
                    }
                    assert!((tape.value(mp)[(plane * 4 + oy) * 3 + ox] - best).abs() <= 1e-6);
                }
            }
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for iy in 2 * oy..2 * oy + 2 {
                        for ix in 2 * ox..2 * ox + 2 {
                            acc += xt[(plane * 7 + iy) * 6 + ix];
                        }
                    }
                    assert!((tape.value(ap)[(plane * 3 + oy) * 3 + ox] - acc / 4.0).abs() <= 1e-6);
                }
            }
        }
    }
}
