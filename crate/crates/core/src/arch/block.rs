//! Aggregation gates, stream fusion variants and the omni-scale residual
//! bottleneck.

use rand::Rng;

use super::layers::{Conv, ConvUnit, Ctx, LayerKind, LayerRecord, Linear, LiteConv3x3, Norm, StreamLayer};
use super::spec::{ConvKind, Fusion, NetworkSpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Gate parameters bound on a tape: (fc1 weight, fc1 bias, fc2 weight, fc2 bias).
pub type GateVars = [Var; 4];

/// GAP, ReLU hidden layer, sigmoid output: one weight in (0,1) per channel.
#[derive(Debug, Clone)]
pub struct AggregationGate {
    pub name: String,
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub hidden: usize,
}

impl AggregationGate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, rng, &format!("{}.fc1", name), channels, hidden, true)?;
        let fc2 = Linear::new(store, rng, &format!("{}.fc2", name), hidden, channels, true)?;
        Ok(AggregationGate {
            name: name.to_string(),
            fc1,
            fc2,
            channels,
            hidden,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [
            self.fc1.weight,
            self.fc1.bias.expect("gate fc1 has a bias"),
            self.fc2.weight,
            self.fc2.bias.expect("gate fc2 has a bias"),
        ]
    }

    pub fn bind<T: Scalar>(&self, ctx: &mut Ctx<'_, T>) -> GateVars {
        self.param_ids().map(|id| ctx.param(id))
    }

    /// Gate vector (n, c) for `x` of shape (n, c, h, w).
    pub fn apply<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GateVars) -> Result<Var> {
        let n = tape.shape(x)[0];
        let c = tape.shape(x)[1];
        let g = tape.global_avg_pool(x)?;
        let g = tape.reshape(g, &[n, c])?;
        let h = tape.linear(g, p[0], Some(p[1]))?;
        let h = tape.relu(h);
        let o = tape.linear(h, p[2], Some(p[3]))?;
        Ok(tape.sigmoid(o))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let p = self.bind(ctx);
        AggregationGate::apply(ctx.tape, x, &p)
    }

    fn macs(&self) -> u64 {
        2 * (self.channels * self.hidden) as u64
    }
}

/// Fusion of the stream outputs into one tensor of width c_mid.
#[derive(Debug, Clone)]
pub enum FusionLayer {
    Unified(AggregationGate),
    Separate(Vec<AggregationGate>),
    Streamwise { trunk: Linear, heads: Vec<Linear> },
    Static { name: String, logits: Vec<ParamId> },
    Add,
    Concat(Conv),
}

impl FusionLayer {
    fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: &NetworkSpec,
        name: &str,
        c: usize,
    ) -> Result<Self> {
        let t = spec.streams;
        let hidden = spec.gate_hidden(c);
        let gate = format!("{}.gate", name);
        Ok(match spec.fusion {
            Fusion::UnifiedAg => FusionLayer::Unified(AggregationGate::new(store, rng, &gate, c, hidden)?),
            Fusion::SeparateAgs => FusionLayer::Separate(
                (1..=t)
                    .map(|i| AggregationGate::new(store, rng, &format!("{}{}", gate, i), c, hidden))
                    .collect::<Result<_>>()?,
            ),
            Fusion::StreamwiseAg => FusionLayer::Streamwise {
                trunk: Linear::new(store, rng, &format!("{}.fc1", gate), c, hidden, true)?,
                heads: (1..=t)
                    .map(|i| Linear::new(store, rng, &format!("{}.head{}", gate, i), hidden, 1, true))
                    .collect::<Result<_>>()?,
            },
            Fusion::StaticGate => FusionLayer::Static {
                name: gate.clone(),
                logits: (1..=t)
                    .map(|i| store.add(format!("{}.logits{}", gate, i), ParamKind::GateLogit, Tensor::zeros(&[c])?))
                    .collect::<Result<_>>()?,
            },
            Fusion::Add => FusionLayer::Add,
            Fusion::Concat => FusionLayer::Concat(Conv::new(
                store,
                rng,
                &format!("{}.fuse", name),
                t * c,
                c,
                1,
                1,
                0,
                1,
                false,
            )?),
        })
    }

    /// Returns the fused tensor and the per-stream gate values: (n, c) for
    /// channel gates, (n, 1) for scalar gates, (1, c) for static gates.
    /// `unified_override` rebinds the shared gate per stream.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        xs: &[Var],
        unified_override: Option<&[GateVars]>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut gates = Vec::with_capacity(xs.len());
        let mut gated = Vec::with_capacity(xs.len());
        match self {
            FusionLayer::Unified(g) => {
                let shared = g.bind(ctx);
                for (t, &x) in xs.iter().enumerate() {
                    let p = unified_override.map_or(&shared, |o| &o[t]);
                    gates.push(AggregationGate::apply(ctx.tape, x, p)?);
                }
            }
            FusionLayer::Separate(gs) => {
                for (g, &x) in gs.iter().zip(xs) {
                    gates.push(g.forward(ctx, x)?);
                }
            }
            FusionLayer::Streamwise { trunk, heads } => {
                for (head, &x) in heads.iter().zip(xs) {
                    let (n, c) = (ctx.tape.shape(x)[0], ctx.tape.shape(x)[1]);
                    let g = ctx.tape.global_avg_pool(x)?;
                    let g = ctx.tape.reshape(g, &[n, c])?;
                    let h = trunk.forward(ctx, g)?;
                    let h = ctx.tape.relu(h);
                    let o = head.forward(ctx, h)?;
                    gates.push(ctx.tape.sigmoid(o));
                }
            }
            FusionLayer::Static { logits, .. } => {
                for &id in logits {
                    let l = ctx.param(id);
                    let c = ctx.tape.shape(l)[0];
                    let l = ctx.tape.reshape(l, &[1, c])?;
                    gates.push(ctx.tape.sigmoid(l));
                }
            }
            FusionLayer::Add => return Ok((ctx.tape.add_n(xs)?, gates)),
            FusionLayer::Concat(conv) => {
                let cat = ctx.tape.concat_channels(xs)?;
                return Ok((conv.forward(ctx, cat)?, gates));
            }
        }
        for (&x, &g) in xs.iter().zip(&gates) {
            gated.push(ctx.tape.mul_broadcast(x, g)?);
        }
        Ok((ctx.tape.add_n(&gated)?, gates))
    }

    fn record(&self, shape: [usize; 3], block: &str, streams: usize, out: &mut Vec<LayerRecord>) -> Result<()> {
        let gate = |name: String, macs: u64, params: Vec<ParamId>| LayerRecord {
            name,
            kind: LayerKind::Gate { macs },
            params,
            in_shape: shape,
            out_shape: [shape[0], 1, 1],
            head: false,
        };
        match self {
            FusionLayer::Unified(g) => {
                // One parameter set, applied once per stream.
                out.push(gate(g.name.clone(), streams as u64 * g.macs(), g.param_ids().to_vec()));
            }
            FusionLayer::Separate(gs) => {
                for g in gs {
                    out.push(gate(g.name.clone(), g.macs(), g.param_ids().to_vec()));
                }
            }
            FusionLayer::Streamwise { trunk, heads } => {
                let t = heads.len() as u64;
                let macs = t * (trunk.in_f * trunk.out_f) as u64 + heads.iter().map(|h| h.in_f as u64).sum::<u64>();
                let mut params = trunk.param_ids();
                for h in heads {
                    params.extend(h.param_ids());
                }
                out.push(gate(format!("{}.gate", block), macs, params));
            }
            FusionLayer::Static { name, logits } => out.push(gate(name.clone(), 0, logits.clone())),
            FusionLayer::Add => {}
            FusionLayer::Concat(conv) => {
                let t = conv.in_c / conv.out_c;
                conv.record([shape[0] * t, shape[1], shape[2]], out)?;
            }
        }
        Ok(())
    }
}

/// Intermediate values of one block forward pass.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub out: Var,
    pub streams: Vec<Var>,
    pub gates: Vec<Var>,
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct OSBlock {
    pub name: String,
    pub in_c: usize,
    pub mid_c: usize,
    pub out_c: usize,
    pub reduce: ConvUnit,
    pub streams: Vec<Vec<StreamLayer>>,
    pub fusion: FusionLayer,
    pub restore: ConvUnit,
    pub shortcut: Option<ConvUnit>,
    /// Instance norm after the residual addition (IBN variant).
    pub instance_norm: Option<Norm>,
}

impl OSBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        spec: &NetworkSpec,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        let mid = spec.mid_channels(out_c);
        let reduce = ConvUnit::new(store, rng, &format!("{}.reduce", name), in_c, mid, 1, 1, 0, true)?;
        let mut streams = Vec::with_capacity(spec.streams);
        for t in 1..=spec.streams {
            let mut layers = Vec::new();
            for i in 0..spec.stream_depth(t) {
                let lname = format!("{}.stream{}.{}", name, t, i);
                layers.push(match spec.conv_kind {
                    ConvKind::Lite => StreamLayer::Lite(LiteConv3x3::new(store, rng, &lname, mid, mid)?),
                    ConvKind::Full => StreamLayer::Full(ConvUnit::new(store, rng, &lname, mid, mid, 3, 1, 1, true)?),
                });
            }
            streams.push(layers);
        }
        let fusion = FusionLayer::build(store, rng, spec, name, mid)?;
        let restore = ConvUnit::new(store, rng, &format!("{}.restore", name), mid, out_c, 1, 1, 0, false)?;
        let shortcut = if in_c != out_c {
            Some(ConvUnit::new(store, rng, &format!("{}.shortcut", name), in_c, out_c, 1, 1, 0, false)?)
        } else {
            None
        };
        Ok(OSBlock {
            name: name.to_string(),
            in_c,
            mid_c: mid,
            out_c,
            reduce,
            streams,
            fusion,
            restore,
            shortcut,
            instance_norm: None,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<BlockOutput> {
        self.forward_with(ctx, x, None)
    }

    /// Forward pass where stream t of a unified gate uses `gate_vars[t]`.
    pub fn forward_with<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        gate_vars: Option<&[GateVars]>,
    ) -> Result<BlockOutput> {
        let xs = ctx.tape.shape(x);
        if xs.len() != 4 || xs[1] != self.in_c {
            return Err(Error::invalid(format!(
                "{}: expects (n,{},h,w) input, got {:?}",
                self.name, self.in_c, xs
            )));
        }
        let r = self.reduce.forward(ctx, x)?;
        let mut streams = Vec::with_capacity(self.streams.len());
        for layers in &self.streams {
            let mut s = r;
            for layer in layers {
                s = layer.forward(ctx, s)?;
            }
            streams.push(s);
        }
        let (fused, gates) = self.fusion.forward(ctx, &streams, gate_vars)?;
        let y = self.restore.forward(ctx, fused)?;
        let identity = match &self.shortcut {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        let mut out = ctx.tape.add(y, identity)?;
        if let Some(n) = &self.instance_norm {
            out = n.forward(ctx, out)?;
        }
        let out = ctx.tape.relu(out);
        Ok(BlockOutput {
            out,
            streams,
            gates,
            fused,
        })
    }

    pub fn record(&self, in_shape: [usize; 3], out: &mut Vec<LayerRecord>) -> Result<[usize; 3]> {
        let r = self.reduce.record(in_shape, out)?;
        for layers in &self.streams {
            let mut s = r;
            for layer in layers {
                s = layer.record(s, out)?;
            }
        }
        self.fusion.record(r, &self.name, self.streams.len(), out)?;
        let y = self.restore.record(r, out)?;
        if let Some(s) = &self.shortcut {
            s.record(in_shape, out)?;
        }
        if let Some(n) = &self.instance_norm {
            n.record(y, out);
        }
        Ok(y)
    }

    /// Parameter ids of the shared gate, if the block has one.
    pub fn unified_gate(&self) -> Option<&AggregationGate> {
        match &self.fusion {
            FusionLayer::Unified(g) => Some(g),
            _ => None,
        }
    }
}

/// Gate-parameter gradients of a unified-gate block under the loss
/// `sum(upstream ⊙ block(x))`, computed two ways.
#[derive(Debug, Clone)]
pub struct SharedGateGradients<T: Scalar> {
    /// Tape gradient through the single shared parameter set.
    pub shared: Vec<Tensor<T>>,
    /// Per-stream contributions: stream t sees its own copy of the gate.
    pub per_stream: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> SharedGateGradients<T> {
    /// Element-wise sum of the per-stream contributions.
    pub fn accumulated(&self) -> Vec<Tensor<T>> {
        let mut acc: Vec<Tensor<T>> = self.shared.iter().map(|t| t.zeros_like()).collect();
        for stream in &self.per_stream {
            for (a, g) in acc.iter_mut().zip(stream) {
                a.add_assign(g);
            }
        }
        acc
    }
}

/// Computes the shared gate gradient and its per-stream decomposition in
/// eval mode.
pub fn shared_gate_gradient<T: Scalar>(
    block: &OSBlock,
    store: &mut ParamStore<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<SharedGateGradients<T>> {
    let gate = block
        .unified_gate()
        .ok_or_else(|| Error::invalid(format!("{}: shared gate gradient needs fusion=unified_ag", block.name)))?;
    let ids = gate.param_ids();

    let run = |store: &mut ParamStore<T>, copies: bool| -> Result<Vec<Vec<Tensor<T>>>> {
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store, false);
        let xv = ctx.tape.constant(x.clone());
        let vars: Vec<GateVars> = if copies {
            (0..block.streams.len())
                .map(|_| ids.map(|id| ctx.tape.leaf(ctx.store.get(id).value.clone(), true)))
                .collect()
        } else {
            vec![gate.bind(&mut ctx); block.streams.len()]
        };
        let out = block.forward_with(&mut ctx, xv, Some(&vars))?;
        let u = ctx.tape.constant(upstream.clone());
        let prod = ctx.tape.mul(out.out, u)?;
        let loss = ctx.tape.sum(prod);
        let grads = tape.backward(loss)?;
        let take = if copies { vars.len() } else { 1 };
        Ok(vars[..take]
            .iter()
            .map(|vs| vs.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect())
            .collect())
    };

    let shared = run(store, false)?.remove(0);
    let per_stream = run(store, true)?;
    Ok(SharedGateGradients { shared, per_stream })
}
