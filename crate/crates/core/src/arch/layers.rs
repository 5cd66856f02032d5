//! Parameterized building blocks: convolution, normalization, linear and
//! Lite 3×3 layers, plus the forward context they share.

use rand::Rng;

use crate::autograd::{conv_out_extent, Conv2dParams, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Everything a forward pass needs: the tape, the parameter binding and
/// the store (mutable so training-mode norms can update running stats).
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub binding: &'a mut Binding,
    pub store: &'a mut ParamStore<T>,
    pub train: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, binding: &'a mut Binding, store: &'a mut ParamStore<T>, train: bool) -> Self {
        Ctx {
            tape,
            binding,
            store,
            train,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binding.var(self.tape, self.store, id)
    }
}

/// Leaf layer description used by cost analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    },
    Linear {
        in_f: usize,
        out_f: usize,
    },
    Norm {
        channels: usize,
        instance: bool,
    },
    /// Gate network; `macs` is per sample and independent of spatial size.
    Gate {
        macs: u64,
    },
    Pool {
        window: usize,
    },
    GlobalPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<ParamId>,
    /// (c, h, w) of the input and output.
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    /// Part of the training classifier rather than the feature extractor.
    pub head: bool,
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub params: Conv2dParams,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::invalid(format!(
                "{}: channels {}->{} not divisible by groups {}",
                name, in_c, out_c, groups
            )));
        }
        let cin_g = in_c / groups;
        let w = kaiming(&[out_c, cin_g, kernel, kernel], cin_g * kernel * kernel, rng)?;
        let weight = store.add(format!("{}.weight", name), ParamKind::Weight, w)?;
        let bias = if bias {
            Some(store.add(format!("{}.bias", name), ParamKind::Bias, Tensor::zeros(&[out_c])?)?)
        } else {
            None
        };
        Ok(Conv {
            name: name.to_string(),
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            params: Conv2dParams::new(stride, padding, groups),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.params)
    }

    pub fn out_shape(&self, in_shape: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = in_shape;
        if c != self.in_c {
            return Err(Error::invalid(format!(
                "{}: expects {} input channels, got {}",
                self.name, self.in_c, c
            )));
        }
        let (s, p) = (self.params.stride.0, self.params.padding.0);
        match (
            conv_out_extent(h, self.kernel, s, p),
            conv_out_extent(w, self.kernel, s, p),
        ) {
            (Some(oh), Some(ow)) => Ok([self.out_c, oh, ow]),
            _ => Err(Error::invalid(format!(
                "input too small at {}: {}x{} map cannot pass a {}x{} stride-{} layer",
                self.name, h, w, self.kernel, self.kernel, s
            ))),
        }
    }

    pub fn record(&self, in_shape: [usize; 3], out: &mut Vec<LayerRecord>) -> Result<[usize; 3]> {
        let out_shape = self.out_shape(in_shape)?;
        out.push(LayerRecord {
            name: self.name.clone(),
            kind: LayerKind::Conv {
                in_c: self.in_c,
                out_c: self.out_c,
                kernel: self.kernel,
                stride: self.params.stride.0,
                groups: self.params.groups,
            },
            params: std::iter::once(self.weight).chain(self.bias).collect(),
            in_shape,
            out_shape,
            head: false,
        });
        Ok(out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub instance: bool,
    pub channels: usize,
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: Option<ParamId>,
    pub running_var: Option<ParamId>,
}

impl Norm {
    pub fn batch<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let mut n = Norm::affine(store, name, channels, false)?;
        n.running_mean = Some(store.add(
            format!("{}.running_mean", name),
            ParamKind::Buffer,
            Tensor::zeros(&[channels])?,
        )?);
        n.running_var = Some(store.add(
            format!("{}.running_var", name),
            ParamKind::Buffer,
            Tensor::ones(&[channels])?,
        )?);
        Ok(n)
    }

    pub fn instance<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Norm::affine(store, name, channels, true)
    }

    fn affine<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, instance: bool) -> Result<Self> {
        let scale = store.add(format!("{}.scale", name), ParamKind::NormScale, Tensor::ones(&[channels])?)?;
        let shift = store.add(format!("{}.shift", name), ParamKind::NormShift, Tensor::zeros(&[channels])?)?;
        Ok(Norm {
            name: name.to_string(),
            instance,
            channels,
            scale,
            shift,
            running_mean: None,
            running_var: None,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let scale = ctx.param(self.scale);
        let shift = ctx.param(self.shift);
        if self.instance {
            return ctx.tape.instance_norm(x, scale, shift, NORM_EPS);
        }
        let (rm, rv) = match (self.running_mean, self.running_var) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(Error::invalid(format!("{}: batch norm without running state", self.name))),
        };
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm(x, scale, shift, NORM_EPS, NormMode::Train)?;
            if let Some(stats) = stats {
                for (id, batch) in [(rm, &stats.mean), (rv, &stats.var)] {
                    let buf = &mut ctx.store.get_mut(id).value;
                    for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                        *r = T::of((1.0 - NORM_MOMENTUM) * r.as_f64() + NORM_MOMENTUM * b);
                    }
                }
            }
            Ok(y)
        } else {
            let mean = ctx.store.get(rm).value.to_f64_vec();
            let var = ctx.store.get(rv).value.to_f64_vec();
            let mode = NormMode::Eval {
                mean: &mean,
                var: &var,
            };
            Ok(ctx.tape.batch_norm(x, scale, shift, NORM_EPS, mode)?.0)
        }
    }

    pub fn record(&self, shape: [usize; 3], out: &mut Vec<LayerRecord>) {
        out.push(LayerRecord {
            name: self.name.clone(),
            kind: LayerKind::Norm {
                channels: self.channels,
                instance: self.instance,
            },
            params: vec![self.scale, self.shift],
            in_shape: shape,
            out_shape: shape,
            head: false,
        });
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = Tensor::randn(&[out_f, in_f], (1.0 / in_f as f64).sqrt(), rng)?;
        let weight = store.add(format!("{}.weight", name), ParamKind::Weight, w)?;
        let bias = if bias {
            Some(store.add(format!("{}.bias", name), ParamKind::Bias, Tensor::zeros(&[out_f])?)?)
        } else {
            None
        };
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            in_f,
            out_f,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    pub fn record(&self, head: bool, out: &mut Vec<LayerRecord>) {
        out.push(LayerRecord {
            name: self.name.clone(),
            kind: LayerKind::Linear {
                in_f: self.in_f,
                out_f: self.out_f,
            },
            params: self.param_ids(),
            in_shape: [self.in_f, 1, 1],
            out_shape: [self.out_f, 1, 1],
            head,
        });
    }
}

/// Convolution followed by optional normalizations and ReLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv,
    pub norm: Option<Norm>,
    /// Instance norm inserted after `norm`, before the activation.
    pub instance_norm: Option<Norm>,
    pub relu: bool,
}

impl ConvUnit {
    /// Bias-free convolution + batch norm (+ ReLU).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv::new(
            store,
            rng,
            &format!("{}.conv", name),
            in_c,
            out_c,
            kernel,
            stride,
            padding,
            1,
            false,
        )?;
        let norm = Norm::batch(store, &format!("{}.bn", name), out_c)?;
        Ok(ConvUnit {
            conv,
            norm: Some(norm),
            instance_norm: None,
            relu,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(ctx, x)?;
        for n in self.norm.iter().chain(self.instance_norm.iter()) {
            y = n.forward(ctx, y)?;
        }
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }

    pub fn record(&self, in_shape: [usize; 3], out: &mut Vec<LayerRecord>) -> Result<[usize; 3]> {
        let shape = self.conv.record(in_shape, out)?;
        for n in self.norm.iter().chain(self.instance_norm.iter()) {
            n.record(shape, out);
        }
        Ok(shape)
    }
}

/// Pointwise 1×1 then depthwise 3×3, then optional norm and ReLU.
#[derive(Debug, Clone)]
pub struct LiteConv3x3 {
    pub pointwise: Conv,
    pub depthwise: Conv,
    pub norm: Option<Norm>,
    pub relu: bool,
}

impl LiteConv3x3 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        let mut layer = LiteConv3x3::bare(store, rng, name, in_c, out_c)?;
        layer.norm = Some(Norm::batch(store, &format!("{}.bn", name), out_c)?);
        layer.relu = true;
        Ok(layer)
    }

    /// Without normalization or activation.
    pub fn bare<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        let pointwise = Conv::new(store, rng, &format!("{}.pointwise", name), in_c, out_c, 1, 1, 0, 1, false)?;
        let depthwise = Conv::new(store, rng, &format!("{}.depthwise", name), out_c, out_c, 3, 1, 1, out_c, false)?;
        Ok(LiteConv3x3 {
            pointwise,
            depthwise,
            norm: None,
            relu: false,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.pointwise.forward(ctx, x)?;
        let mut y = self.depthwise.forward(ctx, y)?;
        if let Some(n) = &self.norm {
            y = n.forward(ctx, y)?;
        }
        Ok(if self.relu { ctx.tape.relu(y) } else { y })
    }

    pub fn record(&self, in_shape: [usize; 3], out: &mut Vec<LayerRecord>) -> Result<[usize; 3]> {
        let s = self.pointwise.record(in_shape, out)?;
        let s = self.depthwise.record(s, out)?;
        if let Some(n) = &self.norm {
            n.record(s, out);
        }
        Ok(s)
    }
}

/// Multiply-adds of a Lite 3×3 layer: h·w·(k²+c)·c′.
pub fn lite_multadds(h: usize, w: usize, k: usize, c: usize, c_out: usize) -> u64 {
    (h * w) as u64 * (k * k + c) as u64 * c_out as u64
}

/// One 3×3 layer of a stream.
#[derive(Debug, Clone)]
pub enum StreamLayer {
    Lite(LiteConv3x3),
    Full(ConvUnit),
}

impl StreamLayer {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            StreamLayer::Lite(l) => l.forward(ctx, x),
            StreamLayer::Full(u) => u.forward(ctx, x),
        }
    }

    pub fn record(&self, in_shape: [usize; 3], out: &mut Vec<LayerRecord>) -> Result<[usize; 3]> {
        match self {
            StreamLayer::Lite(l) => l.record(in_shape, out),
            StreamLayer::Full(u) => u.record(in_shape, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lite_with_identity_weights_is_relu() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = LiteConv3x3::bare(&mut store, &mut rng, "l", 2, 2).unwrap();
        layer.relu = true;
        store.get_mut(layer.pointwise.weight).value =
            Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut delta = vec![0.0; 18];
        delta[4] = 1.0;
        delta[13] = 1.0;
        store.get_mut(layer.depthwise.weight).value = Tensor::from_vec(&[2, 1, 3, 3], delta).unwrap();
        let x = Tensor::randn(&[1, 2, 4, 3], 1.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, &mut store, true);
        let xv = ctx.tape.constant(x.clone());
        let y = layer.forward(&mut ctx, xv).unwrap();
        let expect = x.map(|v| v.max(0.0));
        assert_eq!(tape.value(y).data(), expect.data());
    }

    #[test]
    fn lite_cost_formula() {
        assert_eq!(lite_multadds(64, 32, 3, 64, 64), 64 * 32 * (9 + 64) * 64);
        assert_eq!(lite_multadds(64, 32, 3, 64, 64), 9_568_256);
    }

    #[test]
    fn running_stats_update_in_train_mode() {
        let mut store = ParamStore::<f64>::new();
        let norm = Norm::batch(&mut store, "bn", 1).unwrap();
        let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, &mut store, true);
        let xv = ctx.tape.constant(x);
        norm.forward(&mut ctx, xv).unwrap();
        let rm = store.get(norm.running_mean.unwrap()).value.data()[0];
        let rv = store.get(norm.running_var.unwrap()).value.data()[0];
        assert!((rm - 0.25).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn too_small_input_names_layer() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::new(&mut store, &mut rng, "conv9", 1, 1, 7, 2, 0, 1, false).unwrap();
        let err = conv.out_shape([1, 3, 3]).unwrap_err().to_string();
        assert!(err.contains("conv9"), "{}", err);
    }
}
