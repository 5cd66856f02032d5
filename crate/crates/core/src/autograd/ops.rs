//! Element-wise, reduction, shape and dense-layer operations.

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

struct ReluBackward;

impl<T: Scalar> Backward<T> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        // subgradient at exactly zero is zero
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(Tensor::new_unchecked(grad.shape().to_vec(), data))]
    }

    fn branch_pattern(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Option<Vec<usize>> {
        Some(inputs[0].data().iter().map(|&x| (x > T::zero()) as usize).collect())
    }
}

struct SigmoidBackward;

impl<T: Scalar> Backward<T> for SigmoidBackward {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, _i: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let data = out
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| g * y * (T::one() - y))
            .collect();
        vec![Some(Tensor::new_unchecked(grad.shape().to_vec(), data))]
    }
}

struct AddBackward;

impl<T: Scalar> Backward<T> for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        (0..inputs.len()).map(|i| needs[i].then(|| grad.clone())).collect()
    }
}

struct MulBackward;

impl<T: Scalar> Backward<T> for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let prod = |other: &Tensor<T>| {
            let data = other.data().iter().zip(grad.data()).map(|(&a, &g)| a * g).collect();
            Tensor::new_unchecked(grad.shape().to_vec(), data)
        };
        vec![
            needs[0].then(|| prod(inputs[1])),
            needs[1].then(|| prod(inputs[0])),
        ]
    }
}

/// x: (n, c, hw...) scaled by g: (gn, gc) with gn ∈ {1, n}, gc ∈ {1, c}.
struct BroadcastMulBackward {
    n: usize,
    c: usize,
    hw: usize,
    gn: usize,
    gc: usize,
}

impl BroadcastMulBackward {
    fn gate_index(&self, s: usize, ch: usize) -> usize {
        let si = if self.gn == 1 { 0 } else { s };
        let ci = if self.gc == 1 { 0 } else { ch };
        si * self.gc + ci
    }
}

impl<T: Scalar> Backward<T> for BroadcastMulBackward {
    fn name(&self) -> &'static str {
        "mul_broadcast"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, gate) = (inputs[0].data(), inputs[1].data());
        let gy = grad.data();
        let mut dx = vec![T::zero(); if needs[0] { x.len() } else { 0 }];
        let mut dg = vec![0.0f64; gate.len()];
        for s in 0..self.n {
            for ch in 0..self.c {
                let gi = self.gate_index(s, ch);
                let gv = gate[gi];
                let off = (s * self.c + ch) * self.hw;
                let mut acc = 0.0f64;
                for i in off..off + self.hw {
                    acc += gy[i].as_f64() * x[i].as_f64();
                    if needs[0] {
                        dx[i] = gy[i] * gv;
                    }
                }
                dg[gi] += acc;
            }
        }
        vec![
            needs[0].then(|| Tensor::new_unchecked(inputs[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::new_unchecked(inputs[1].shape().to_vec(), dg.into_iter().map(T::of).collect())),
        ]
    }
}

struct ScaleBackward(f64);

impl<T: Scalar> Backward<T> for ScaleBackward {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _i: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let a = T::of(self.0);
        vec![Some(grad.map(|g| g * a))]
    }
}

struct SumBackward {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = T::of(grad[0].as_f64() * self.scale);
        vec![Some(Tensor::new_unchecked(inputs[0].shape().to_vec(), vec![g; inputs[0].len()]))]
    }
}

struct ReshapeBackward;

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, _n: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::new_unchecked(inputs[0].shape().to_vec(), grad.data().to_vec()))]
    }
}

struct ConcatBackward {
    channels: Vec<usize>,
    hw: usize,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let total: usize = self.channels.iter().sum();
        let n = grad.shape()[0];
        let g = grad.data();
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut data = Vec::with_capacity(n * c * self.hw);
                for s in 0..n {
                    let start = (s * total + offset) * self.hw;
                    data.extend_from_slice(&g[start..start + c * self.hw]);
                }
                out.push(Some(Tensor::new_unchecked(inputs[i].shape().to_vec(), data)));
            } else {
                out.push(None);
            }
            offset += c;
        }
        out
    }
}

struct LinearBackward {
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for LinearBackward {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _o: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        let cout = w.shape()[0];
        let (xd, wd, gd) = (x.data(), w.data(), grad.data());
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * cin];
            let mut acc = vec![0.0f64; cin];
            for s in 0..n {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for co in 0..cout {
                    let g = gd[s * cout + co].as_f64();
                    for (a, &wv) in acc.iter_mut().zip(&wd[co * cin..(co + 1) * cin]) {
                        *a += g * wv.as_f64();
                    }
                }
                for (d, &a) in dx[s * cin..(s + 1) * cin].iter_mut().zip(&acc) {
                    *d = T::of(a);
                }
            }
            Tensor::new_unchecked(x.shape().to_vec(), dx)
        });
        let dw = needs[1].then(|| {
            let mut acc = vec![0.0f64; cout * cin];
            for s in 0..n {
                let xrow = &xd[s * cin..(s + 1) * cin];
                for co in 0..cout {
                    let g = gd[s * cout + co].as_f64();
                    for (a, &xv) in acc[co * cin..(co + 1) * cin].iter_mut().zip(xrow) {
                        *a += g * xv.as_f64();
                    }
                }
            }
            Tensor::new_unchecked(w.shape().to_vec(), acc.into_iter().map(T::of).collect())
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(needs[2].then(|| {
                let mut acc = vec![0.0f64; cout];
                for s in 0..n {
                    for (a, g) in acc.iter_mut().zip(&gd[s * cout..(s + 1) * cout]) {
                        *a += g.as_f64();
                    }
                }
                Tensor::new_unchecked(vec![cout], acc.into_iter().map(T::of).collect())
            }));
        }
        out
    }
}

/// Dense layer kernel: `y[n][o] = Σ_i w[o][i] x[n][i] + b[o]`, i ascending.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, cin) = x.dims2("linear")?;
    let (cout, wcin) = w.dims2("linear weight")?;
    if wcin != cin {
        return Err(Error::shape(
            "linear",
            format!("input with {} features for weight {}", wcin, shape_str(w.shape())),
            format!("input {}", shape_str(x.shape())),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("linear bias", format!("[{}]", cout), shape_str(b.shape())));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(n * cout);
    for s in 0..n {
        let xrow = &xd[s * cin..(s + 1) * cin];
        for co in 0..cout {
            let mut acc = 0.0f64;
            for (&wv, &xv) in wd[co * cin..(co + 1) * cin].iter().zip(xrow) {
                acc += wv.as_f64() * xv.as_f64();
            }
            let bias = b.map_or(0.0, |b| b[co].as_f64());
            out.push(T::of(acc + bias));
        }
    }
    Ok(Tensor::new_unchecked(vec![n, cout], out))
}

impl<T: Scalar> Tape<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(out, &[x], Box::new(ReluBackward))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let v = v.as_f64();
            // split on sign so exp never overflows
            let s = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
            T::of(s)
        });
        self.push_op(out, &[x], Box::new(SigmoidBackward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Sum of equally shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("add of zero tensors"))?;
        let mut out = self.value(first).clone();
        for &v in &xs[1..] {
            let t = self.value(v);
            if t.shape() != out.shape() {
                return Err(Error::shape("add", shape_str(out.shape()), shape_str(t.shape())));
            }
            out.add_assign(t);
        }
        Ok(self.push_op(out, xs, Box::new(AddBackward)))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape("mul", shape_str(at.shape()), shape_str(bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new_unchecked(at.shape().to_vec(), data);
        Ok(self.push_op(out, &[a, b], Box::new(MulBackward)))
    }

    /// Scales `x` (n, c, ...) by a gate broadcast over the spatial axes.
    ///
    /// The gate has shape (gn, gc), or (gn, gc, 1, 1), where gn is 1 or n and
    /// gc is 1 or c.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xt, gt) = (self.value(x), self.value(gate));
        let xs = xt.shape();
        if xs.len() < 2 {
            return Err(Error::shape("mul_broadcast", "(n,c,...) input", shape_str(xs)));
        }
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        let gs = gt.shape();
        let (gn, gc) = match gs[..] {
            [a, b] | [a, b, 1, 1] => (a, b),
            _ => return Err(Error::shape("mul_broadcast", "(n,c) gate", shape_str(gs))),
        };
        if !(gn == 1 || gn == n) || !(gc == 1 || gc == c) {
            return Err(Error::shape(
                "mul_broadcast",
                format!("gate broadcastable to ({},{})", n, c),
                shape_str(gs),
            ));
        }
        let op = BroadcastMulBackward { n, c, hw, gn, gc };
        let (xd, gd) = (xt.data(), gt.data());
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let gv = gd[op.gate_index(s, ch)];
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = xd[i] * gv;
                }
            }
        }
        let out = Tensor::new_unchecked(xs.to_vec(), out);
        Ok(self.push_op(out, &[x, gate], Box::new(op)))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::of(alpha);
        let out = self.value(x).map(|v| v * a);
        self.push_op(out, &[x], Box::new(ScaleBackward(alpha)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(T::of(s)), &[x], Box::new(SumBackward { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let len = t.len() as f64;
        let s = t.sum() / len;
        self.push_op(Tensor::scalar(T::of(s)), &[x], Box::new(SumBackward { scale: 1.0 / len }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, &[x], Box::new(ReshapeBackward)))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    shape_str(self.shape(first)),
                    shape_str(self.shape(v)),
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&v, &c) in xs.iter().zip(&channels) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let out = Tensor::new_unchecked(vec![n, total, h, w], data);
        Ok(self.push_op(out, xs, Box::new(ConcatBackward { channels, hw })))
    }

    /// Dense layer on (n, c_in) input with (c_out, c_in) weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(out, &inputs, Box::new(LinearBackward { has_bias: b.is_some() })))
    }
}
