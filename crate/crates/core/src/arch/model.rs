//! Full network assembly, forward pass and static shape walk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::OSBlock;
use super::layers::{ConvUnit, Ctx, LayerKind, LayerRecord, Linear, LiteConv3x3, Norm};
use super::spec::NetworkSpec;
use crate::autograd::{pooled_shape, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub blocks: Vec<OSBlock>,
    /// 1×1 conv unit followed by a 2×2 stride-2 average pool.
    pub transition: Option<ConvUnit>,
}

#[derive(Debug, Clone)]
pub struct OSNetModel {
    pub spec: NetworkSpec,
    pub conv1: ConvUnit,
    pub stages: Vec<Stage>,
    pub conv5: ConvUnit,
    pub fc: Linear,
    pub fc_bn: Norm,
    pub classifier: Option<Linear>,
}

/// One row of the shape ladder: layer name and (c, h, w) output.
pub type LadderRow = (String, [usize; 3]);

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Embedding (n, feature_dim).
    pub features: Var,
    pub logits: Option<Var>,
    /// conv5 output (n, c, h, w).
    pub feature_map: Var,
    /// Gate values of the last block, one per stream.
    pub last_gates: Vec<Var>,
    pub ladder: Vec<LadderRow>,
}

/// Builds the model and its parameter registry from a seeded RNG.
pub fn build_model<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<(OSNetModel, ParamStore<T>)> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c1, c2, c3, c4] = spec.channels();
    let conv1 = ConvUnit::new(&mut store, &mut rng, "conv1", 3, c1, 7, 2, 3, true)?;
    let widths = [(c1, c2), (c2, c3), (c3, c4)];
    let mut stages = Vec::with_capacity(3);
    for (i, &(cin, cout)) in widths.iter().enumerate() {
        let name = format!("conv{}", i + 2);
        let mut blocks = Vec::new();
        for b in 0..spec.blocks_per_stage[i] {
            let in_c = if b == 0 { cin } else { cout };
            blocks.push(OSBlock::new(&mut store, &mut rng, spec, &format!("{}.{}", name, b), in_c, cout)?);
        }
        let transition = if i < 2 {
            Some(ConvUnit::new(
                &mut store,
                &mut rng,
                &format!("transition{}", i + 2),
                cout,
                cout,
                1,
                1,
                0,
                true,
            )?)
        } else {
            None
        };
        stages.push(Stage {
            name,
            blocks,
            transition,
        });
    }
    let conv5 = ConvUnit::new(&mut store, &mut rng, "conv5", c4, c4, 1, 1, 0, true)?;
    let fc = Linear::new(&mut store, &mut rng, "fc", c4, spec.feature_dim, true)?;
    let fc_bn = Norm::batch(&mut store, "fc.bn", spec.feature_dim)?;
    let classifier = if spec.num_classes > 0 {
        Some(Linear::new(&mut store, &mut rng, "classifier", spec.feature_dim, spec.num_classes, true)?)
    } else {
        None
    };
    let mut model = OSNetModel {
        spec: spec.clone(),
        conv1,
        stages,
        conv5,
        fc,
        fc_bn,
        classifier,
    };
    if spec.ibn {
        model.spec.ibn = false;
        model.insert_instance_norm(&mut store)?;
    }
    model.layers(spec.input_height, spec.input_width)?;
    Ok((model, store))
}

fn pool_out(name: &str, shape: [usize; 3], window: usize, stride: usize, padding: usize) -> Result<[usize; 3]> {
    let s = pooled_shape(&[1, shape[0], shape[1], shape[2]], window, stride, padding).map_err(|_| {
        Error::invalid(format!(
            "input too small at {}: {}x{} map cannot pass a {}x{} stride-{} pool",
            name, shape[1], shape[2], window, window, stride
        ))
    })?;
    Ok([s[1], s[2], s[3]])
}

fn pool_record(name: &str, in_shape: [usize; 3], out_shape: [usize; 3], window: usize) -> LayerRecord {
    LayerRecord {
        name: name.to_string(),
        kind: if window == 0 {
            LayerKind::GlobalPool
        } else {
            LayerKind::Pool { window }
        },
        params: Vec::new(),
        in_shape,
        out_shape,
        head: false,
    }
}

impl OSNetModel {
    /// Adds instance norm after conv1's batch norm and after the residual
    /// addition of every conv2 block.
    pub fn insert_instance_norm<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.spec.ibn {
            return Err(Error::invalid("instance norm already inserted"));
        }
        self.conv1.instance_norm = Some(Norm::instance(store, "conv1.in", self.conv1.conv.out_c)?);
        for block in &mut self.stages[0].blocks {
            block.instance_norm = Some(Norm::instance(store, &format!("{}.in", block.name), block.out_c)?);
        }
        self.spec.ibn = true;
        Ok(())
    }

    pub fn instance_norm_layers(&self) -> usize {
        self.conv1.instance_norm.iter().count()
            + self
                .stages
                .iter()
                .flat_map(|s| &s.blocks)
                .filter(|b| b.instance_norm.is_some())
                .count()
    }

    /// The block whose gates are collected for introspection.
    pub fn last_block(&self) -> &OSBlock {
        self.stages
            .last()
            .and_then(|s| s.blocks.last())
            .expect("model has at least one block")
    }

    pub fn blocks(&self) -> impl Iterator<Item = &OSBlock> {
        self.stages.iter().flat_map(|s| &s.blocks)
    }

    /// Static walk producing every leaf layer with its shapes; fails with
    /// the offending layer named if the input is too small.
    pub fn layers(&self, height: usize, width: usize) -> Result<Vec<LayerRecord>> {
        Ok(self.walk(height, width)?.0)
    }

    /// Output shape after each stage-level layer, matching the layout of
    /// the architecture table.
    pub fn shape_ladder(&self, height: usize, width: usize) -> Result<Vec<LadderRow>> {
        Ok(self.walk(height, width)?.1)
    }

    fn walk(&self, height: usize, width: usize) -> Result<(Vec<LayerRecord>, Vec<LadderRow>)> {
        let mut recs = Vec::new();
        let mut ladder = Vec::new();
        let mut s = self.conv1.record([3, height, width], &mut recs)?;
        ladder.push(("conv1".to_string(), s));
        let p = pool_out("maxpool", s, 3, 2, 1)?;
        recs.push(pool_record("maxpool", s, p, 3));
        s = p;
        ladder.push(("maxpool".to_string(), s));
        for stage in &self.stages {
            for block in &stage.blocks {
                s = block.record(s, &mut recs)?;
            }
            ladder.push((stage.name.clone(), s));
            if let Some(t) = &stage.transition {
                let tname = t.conv.name.trim_end_matches(".conv").to_string();
                s = t.record(s, &mut recs)?;
                ladder.push((format!("{}.conv", tname), s));
                let pname = format!("{}.pool", tname);
                let p = pool_out(&pname, s, 2, 2, 0)?;
                recs.push(pool_record(&pname, s, p, 2));
                s = p;
                ladder.push((pname, s));
            }
        }
        s = self.conv5.record(s, &mut recs)?;
        ladder.push(("conv5".to_string(), s));
        let g = [s[0], 1, 1];
        recs.push(pool_record("gap", s, g, 0));
        ladder.push(("gap".to_string(), g));
        self.fc.record(false, &mut recs);
        self.fc_bn.record([self.spec.feature_dim, 1, 1], &mut recs);
        ladder.push(("fc".to_string(), [self.spec.feature_dim, 1, 1]));
        if let Some(c) = &self.classifier {
            c.record(true, &mut recs);
        }
        Ok((recs, ladder))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<ForwardOutput> {
        let xs = ctx.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 3 {
            return Err(Error::invalid(format!("model input must be (n,3,h,w), got {:?}", xs)));
        }
        self.walk(xs[2], xs[3])?;
        let mut ladder = Vec::new();
        let mut push = |tape: &Tape<T>, name: &str, v: Var| {
            let s = tape.shape(v);
            let row = match s.len() {
                4 => [s[1], s[2], s[3]],
                _ => [s[1], 1, 1],
            };
            ladder.push((name.to_string(), row));
        };
        let mut h = self.conv1.forward(ctx, x)?;
        push(ctx.tape, "conv1", h);
        h = ctx.tape.max_pool2d(h, 3, 2, 1)?;
        push(ctx.tape, "maxpool", h);
        let mut last_gates = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                let out = block.forward(ctx, h)?;
                h = out.out;
                last_gates = out.gates;
            }
            push(ctx.tape, &stage.name, h);
            if let Some(t) = &stage.transition {
                let tname = t.conv.name.trim_end_matches(".conv").to_string();
                h = t.forward(ctx, h)?;
                push(ctx.tape, &format!("{}.conv", tname), h);
                h = ctx.tape.avg_pool2d(h, 2, 2)?;
                push(ctx.tape, &format!("{}.pool", tname), h);
            }
        }
        let feature_map = self.conv5.forward(ctx, h)?;
        push(ctx.tape, "conv5", feature_map);
        let g = ctx.tape.global_avg_pool(feature_map)?;
        push(ctx.tape, "gap", g);
        let n = xs[0];
        let c = ctx.tape.shape(g)[1];
        let g = ctx.tape.reshape(g, &[n, c])?;
        let f = self.fc.forward(ctx, g)?;
        let f = self.fc_bn.forward(ctx, f)?;
        let features = ctx.tape.relu(f);
        push(ctx.tape, "fc", features);
        let logits = match &self.classifier {
            Some(cls) => Some(cls.forward(ctx, features)?),
            None => None,
        };
        Ok(ForwardOutput {
            features,
            logits,
            feature_map,
            last_gates,
            ladder,
        })
    }

    /// Eval-mode embedding of a batch.
    pub fn embed<T: Scalar>(&self, store: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store, false);
        let xv = ctx.tape.constant(x.clone());
        let out = self.forward(&mut ctx, xv)?;
        Ok(tape.value(out.features).clone())
    }
}

/// Gradient support of one output pixel of a linearized stream.
#[derive(Debug, Clone)]
pub struct ReceptiveFieldProbe {
    pub height: usize,
    pub width: usize,
    /// Row-major mask of input pixels with a non-zero gradient.
    pub support: Vec<bool>,
    /// Side of the smallest square around the probed pixel covering the support.
    pub extent: usize,
    pub centered_square: bool,
}

/// Probes a stream of `depth` Lite 3×3 layers with norm and activation
/// removed and all weights positive.
pub fn receptive_field_probe(depth: usize, seed: u64) -> Result<ReceptiveFieldProbe> {
    if depth == 0 {
        return Err(Error::invalid("stream depth must be at least 1"));
    }
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let c = 2;
    let mut layers = Vec::new();
    for i in 0..depth {
        layers.push(LiteConv3x3::bare(&mut store, &mut rng, &format!("probe.{}", i), c, c)?);
    }
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
    }
    let size = 2 * depth + 1 + 6;
    let center = size / 2;
    let x = Tensor::rand_uniform(&[1, c, size, size], 0.5, 1.5, &mut rng)?;
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut ctx = Ctx::new(&mut tape, &mut binding, &mut store, false);
    let xv = ctx.tape.leaf(x, true);
    let mut y = xv;
    for l in &layers {
        y = l.forward(&mut ctx, y)?;
    }
    let mut mask = Tensor::zeros(&[1, c, size, size])?;
    mask.data_mut()[center * size + center] = 1.0;
    let m = ctx.tape.constant(mask);
    let prod = ctx.tape.mul(y, m)?;
    let loss = ctx.tape.sum(prod);
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(&tape, xv);
    let mut support = vec![false; size * size];
    for ch in 0..c {
        for i in 0..size * size {
            if g.data()[ch * size * size + i] != 0.0 {
                support[i] = true;
            }
        }
    }
    let mut radius = 0usize;
    for (i, &s) in support.iter().enumerate() {
        if s {
            let (r, q) = (i / size, i % size);
            radius = radius.max(r.abs_diff(center)).max(q.abs_diff(center));
        }
    }
    let centered_square = support.iter().enumerate().all(|(i, &s)| {
        let (r, q) = (i / size, i % size);
        s == (r.abs_diff(center) <= radius && q.abs_diff(center) <= radius)
    });
    Ok(ReceptiveFieldProbe {
        height: size,
        width: size,
        support,
        extent: 2 * radius + 1,
        centered_square,
    })
}

/// Empirical receptive field side of stream `t` (t stacked 3×3 layers).
pub fn receptive_field(t: usize) -> Result<usize> {
    let probe = receptive_field_probe(t, 0)?;
    if !probe.centered_square {
        return Err(Error::invalid("gradient support is not a centered square"));
    }
    Ok(probe.extent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::Fusion;

    #[test]
    fn default_ladder_matches_table() {
        let (model, _) = build_model::<f32>(&NetworkSpec::default(), 0).unwrap();
        let ladder = model.shape_ladder(256, 128).unwrap();
        let expect: Vec<(&str, [usize; 3])> = vec![
            ("conv1", [64, 128, 64]),
            ("maxpool", [64, 64, 32]),
            ("conv2", [256, 64, 32]),
            ("transition2.conv", [256, 64, 32]),
            ("transition2.pool", [256, 32, 16]),
            ("conv3", [384, 32, 16]),
            ("transition3.conv", [384, 32, 16]),
            ("transition3.pool", [384, 16, 8]),
            ("conv4", [512, 16, 8]),
            ("conv5", [512, 16, 8]),
            ("gap", [512, 1, 1]),
            ("fc", [512, 1, 1]),
        ];
        let got: Vec<(&str, [usize; 3])> = ladder.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn small_input_names_stage() {
        let spec = NetworkSpec {
            input_height: 8,
            input_width: 8,
            ..NetworkSpec::tiny()
        };
        let err = build_model::<f32>(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("transition3.pool"), "{}", err);
    }

    #[test]
    fn ibn_layers_counted() {
        let (plain, store) = build_model::<f32>(&NetworkSpec::tiny(), 0).unwrap();
        assert_eq!(plain.instance_norm_layers(), 0);
        assert!(store.iter().all(|(_, p)| !p.name.ends_with(".in.scale")));
        let spec = NetworkSpec {
            ibn: true,
            ..NetworkSpec::tiny()
        };
        let (ibn, store) = build_model::<f32>(&spec, 0).unwrap();
        assert_eq!(ibn.instance_norm_layers(), 1 + spec.blocks_per_stage[0]);
        let names = store.iter().filter(|(_, p)| p.name.ends_with(".in.scale")).count();
        assert_eq!(names, 1 + spec.blocks_per_stage[0]);
    }

    #[test]
    fn registry_is_deterministic() {
        let spec = NetworkSpec {
            fusion: Fusion::SeparateAgs,
            ..NetworkSpec::tiny()
        };
        let (_, a) = build_model::<f32>(&spec, 5).unwrap();
        let (_, b) = build_model::<f32>(&spec, 5).unwrap();
        assert_eq!(a.len(), b.len());
        for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn receptive_field_grows_by_two() {
        for t in 1..=4 {
            assert_eq!(receptive_field(t).unwrap(), 2 * t + 1);
        }
    }
}
