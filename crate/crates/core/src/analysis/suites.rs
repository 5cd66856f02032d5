//! Ready-made gradient-check suites for the primitive operations and for a
//! whole model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::arch::{build_model, AggregationGate, Ctx, NetworkSpec};
use crate::autograd::{Conv2dParams, NormMode, Var};
use crate::error::Result;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::train::LossConfig;

/// Reduces `y` to a scalar through a fixed random projection so that every
/// output element carries a distinct upstream gradient.
pub fn project(ctx: &mut Ctx<'_, f64>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = Tensor::randn(ctx.tape.shape(y), 1.0, &mut rng)?;
    let r = ctx.tape.constant(r);
    let p = ctx.tape.mul(y, r)?;
    Ok(ctx.tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>>;

fn check_op(
    name: &str,
    inputs: &[(&str, &[usize])],
    seed: u64,
    f: OpFn,
    cfg: &GradcheckConfig,
) -> Result<(String, GradcheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    for (n, shape) in inputs {
        ids.push(store.add(*n, ParamKind::Weight, Tensor::randn(shape, 1.0, &mut rng)?)?);
    }
    let report = gradcheck(
        &mut store,
        |ctx| {
            let vars: Vec<Var> = ids.iter().map(|&id| ctx.param(id)).collect();
            let y = f(ctx, &vars)?;
            project(ctx, y)
        },
        cfg,
    )?;
    Ok((name.to_string(), report))
}

/// Finite-difference checks of every differentiable primitive.
pub fn op_suite(cfg: &GradcheckConfig) -> Result<Vec<(String, GradcheckReport)>> {
    let all = GradcheckConfig {
        sample_size: usize::MAX,
        ..*cfg
    };
    let cases: Vec<(&str, Vec<(&str, &[usize])>, OpFn)> = vec![
        (
            "conv2d",
            vec![("x", &[2, 4, 6, 6]), ("w", &[6, 2, 3, 3]), ("b", &[6])],
            Box::new(|c, v| c.tape.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new(2, 1, 2))),
        ),
        (
            "pointwise_conv",
            vec![("x", &[2, 3, 4, 4]), ("w", &[5, 3, 1, 1])],
            Box::new(|c, v| c.tape.pointwise_conv(v[0], v[1], None)),
        ),
        (
            "depthwise_conv",
            vec![("x", &[1, 3, 5, 5]), ("w", &[3, 1, 3, 3])],
            Box::new(|c, v| c.tape.depthwise_conv(v[0], v[1], None, 1, 1)),
        ),
        (
            "batch_norm",
            vec![("x", &[4, 3, 3, 3]), ("scale", &[3]), ("shift", &[3])],
            Box::new(|c, v| Ok(c.tape.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?.0)),
        ),
        (
            "instance_norm",
            vec![("x", &[2, 3, 4, 4]), ("scale", &[3]), ("shift", &[3])],
            Box::new(|c, v| c.tape.instance_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("relu", vec![("x", &[3, 7])], Box::new(|c, v| Ok(c.tape.relu(v[0])))),
        ("sigmoid", vec![("x", &[3, 7])], Box::new(|c, v| Ok(c.tape.sigmoid(v[0])))),
        (
            "global_avg_pool",
            vec![("x", &[2, 3, 4, 4])],
            Box::new(|c, v| c.tape.global_avg_pool(v[0])),
        ),
        (
            "max_pool2d",
            vec![("x", &[1, 2, 7, 7])],
            Box::new(|c, v| c.tape.max_pool2d(v[0], 3, 2, 1)),
        ),
        (
            "avg_pool2d",
            vec![("x", &[1, 2, 6, 4])],
            Box::new(|c, v| c.tape.avg_pool2d(v[0], 2, 2)),
        ),
        (
            "linear",
            vec![("x", &[3, 5]), ("w", &[4, 5]), ("b", &[4])],
            Box::new(|c, v| c.tape.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "mul_broadcast",
            vec![("x", &[2, 3, 4, 4]), ("g", &[2, 3])],
            Box::new(|c, v| c.tape.mul_broadcast(v[0], v[1])),
        ),
        (
            "concat_channels",
            vec![("a", &[2, 2, 3, 3]), ("b", &[2, 3, 3, 3])],
            Box::new(|c, v| c.tape.concat_channels(&[v[0], v[1]])),
        ),
        (
            "aggregation_gate",
            vec![("x", &[2, 16, 3, 3]), ("w1", &[1, 16]), ("b1", &[1]), ("w2", &[16, 1]), ("b2", &[16])],
            Box::new(|c, v| AggregationGate::apply(c.tape, v[0], &[v[1], v[2], v[3], v[4]])),
        ),
        (
            "cross_entropy_ls",
            vec![("z", &[4, 5])],
            Box::new(|c, v| c.tape.cross_entropy_ls(v[0], &[0, 3, 1, 3], 0.1)),
        ),
        (
            "hard_triplet",
            vec![("f", &[6, 4])],
            Box::new(|c, v| c.tape.hard_triplet_loss(v[0], &[0, 0, 1, 1, 2, 2], 2.0)),
        ),
        (
            "combined_loss",
            vec![("z", &[4, 3]), ("f", &[4, 5])],
            Box::new(|c, v| {
                let cfg = LossConfig {
                    triplet_weight: 0.5,
                    triplet_margin: 2.0,
                    ..Default::default()
                };
                c.tape.combined_loss(v[0], v[1], &[0, 0, 2, 2], &cfg)
            }),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| check_op(name, &inputs, 100 + i as u64, f, &all))
        .collect()
}

/// Checks parameter gradients of a full model on a random batch of shape
/// (batch, 3, H, W) from the spec, in double precision.
pub fn model_gradcheck(spec: &NetworkSpec, batch: usize, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (model, mut store) = build_model::<f64>(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11ce);
    let x = Tensor::randn(&[batch, 3, spec.input_height, spec.input_width], 1.0, &mut rng)?;
    gradcheck(
        &mut store,
        |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let out = model.forward(ctx, xv)?;
            let y = out.logits.unwrap_or(out.features);
            project(ctx, y)
        },
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_ops_pass() {
        for (name, r) in op_suite(&GradcheckConfig::default()).unwrap() {
            assert!(r.passed(), "{}: {}", name, r.summary());
            assert!(r.checked > 0, "{}", name);
        }
    }
}
