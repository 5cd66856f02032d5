use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use osnet::arch::{Ctx, NetworkSpec, OSNetModel};
use osnet::autograd::Tape;
use osnet::checkpoint::Checkpoint;
use osnet::data::{derive_rng, make_batch, make_synthetic_dataset, AugmentPolicy, Augmenter, ImageSet, SynthConfig};
use osnet::params::{Binding, ParamKind, ParamStore};
use osnet::train::{
    epoch_batches, extract_features, BatchMode, LossConfig, OptimConfig, OptimKind, Optimizer, Schedule, TrainConfig,
    Trainer,
};
use osnet::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ce_oracle(z: &Tensor<f64>, targets: &[usize], eps: f64) -> f64 {
    let (n, k) = (z.shape()[0], z.shape()[1]);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate().take(n) {
        let row = &z.data()[i * k..(i + 1) * k];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            let q = if j == t { 1.0 - eps + eps / k as f64 } else { eps / k as f64 };
            total -= q * (v - lse);
        }
    }
    total / n as f64
}

fn triplet_oracle(f: &Tensor<f64>, pids: &[usize], margin: f64) -> f64 {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let dist = |a: usize, b: usize| {
        (0..d)
            .map(|k| (f.data()[a * d + k] - f.data()[b * d + k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for a in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for p in (0..n).filter(|&p| p != a && pids[p] == pids[a]) {
            for q in (0..n).filter(|&q| pids[q] != pids[a]) {
                worst = worst.max(margin + dist(a, p) - dist(a, q));
            }
        }
        total += worst.max(0.0);
    }
    total / n as f64
}

#[test]
fn cross_entropy_matches_formula() {
    for seed in 0..5 {
        let z = Tensor::<f64>::randn(&[6, 7], 2.0, &mut rng(seed)).unwrap();
        let targets = [0, 6, 3, 3, 1, 5];
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let l = tape.cross_entropy_ls(zv, &targets, 0.1).unwrap();
        assert!((tape.value(l).data()[0] - ce_oracle(&z, &targets, 0.1)).abs() <= 1e-6);
    }
}

#[test]
fn hard_triplet_matches_exhaustive_search() {
    let pids = [0, 0, 1, 1, 2, 2, 3, 3];
    for seed in 0..10 {
        let f = Tensor::<f64>::randn(&[8, 4], 1.0, &mut rng(seed)).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let l = tape.hard_triplet_loss(fv, &pids, 0.3).unwrap();
        assert!((tape.value(l).data()[0] - triplet_oracle(&f, &pids, 0.3)).abs() <= 1e-6);
    }
}

#[test]
fn combined_loss_is_weighted_sum_in_value_and_gradient() {
    let z = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng(1)).unwrap();
    let f = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng(2)).unwrap();
    let y = [0, 0, 1, 1, 2, 2];
    let cfg = LossConfig {
        triplet_weight: 0.5,
        ..LossConfig::default()
    };
    let run = |which: u8| {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let fv = tape.leaf(f.clone(), true);
        let l = match which {
            0 => tape.combined_loss(zv, fv, &y, &cfg).unwrap(),
            1 => tape.cross_entropy_ls(zv, &y, cfg.label_smoothing).unwrap(),
            _ => tape.hard_triplet_loss(fv, &y, cfg.triplet_margin).unwrap(),
        };
        let g = tape.backward(l).unwrap();
        (
            tape.value(l).data()[0],
            g.get_or_zeros(&tape, zv),
            g.get_or_zeros(&tape, fv),
        )
    };
    let (all, gz, gf) = run(0);
    let (ce, gz_ce, _) = run(1);
    let (tri, _, gf_tri) = run(2);
    assert!((all - (ce + 0.5 * tri)).abs() <= 1e-12);
    assert!(gz.max_abs_diff(&gz_ce) <= 1e-12);
    assert!(gf.max_abs_diff(&gf_tri.map(|v| 0.5 * v)) <= 1e-12);
}

#[test]
fn two_momentum_steps_by_hand() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", ParamKind::Weight, Tensor::scalar(1.0)).unwrap();
    let mut opt = Optimizer::new(OptimConfig {
        kind: OptimKind::sgd(0.9),
        lr: 0.1,
        weight_decay: 0.0,
        schedule: Schedule::Constant,
    })
    .unwrap();
    for g in [0.5, -0.2] {
        store.get_mut(id).grad = Some(Tensor::scalar(g));
        opt.step(&mut store, 0.1).unwrap();
    }
    // buf = 0.5, w = 1 - 0.05 = 0.95; buf = 0.45 - 0.2 = 0.25, w = 0.95 - 0.025
    assert!((store.get(id).value.data()[0] - 0.925).abs() <= 1e-15);
}

#[test]
fn identity_sampler_batches() {
    let set = tiny_set(6, 5, 0);
    let (batches, stats) = epoch_batches(&set.index, BatchMode::Identity { p: 4, k: 4 }, &mut rng(3)).unwrap();
    assert!(!batches.is_empty());
    for b in &batches {
        assert_eq!(b.len(), 16);
        let mut pids: Vec<usize> = b.iter().map(|&i| set.index.records[i].pid).collect();
        pids.dedup();
        assert_eq!(pids.len(), 4);
    }
    assert!(stats.replaced_pids.is_empty());
}

fn tiny_set(ids: usize, per_id: usize, seed: u64) -> ImageSet {
    let cfg = SynthConfig {
        num_ids: ids,
        images_per_id: per_id,
        ..SynthConfig::default()
    };
    make_synthetic_dataset(&cfg, &mut derive_rng(seed, &[])).unwrap()
}

fn tiny_spec(classes: usize) -> NetworkSpec {
    NetworkSpec {
        width_multiplier: 0.25,
        input_height: 64,
        input_width: 32,
        num_classes: classes,
        ..Default::default()
    }
}

fn tiny_config(epochs: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(epochs, 64);
    cfg.batch = BatchMode::Random { batch_size: 8 };
    cfg.optim.lr = 0.003;
    cfg.augment.erase = None;
    cfg.seed = seed;
    cfg.deterministic = true;
    cfg
}

/// Label-smoothed loss over the whole set without augmentation, with batch
/// statistics and a throwaway copy of the parameters.
fn set_loss(model: &OSNetModel, store: &ParamStore<f32>, set: &ImageSet) -> f64 {
    let mut store = store.clone();
    let labels = set.index.class_labels();
    let y: Vec<usize> = set.index.records.iter().map(|r| labels[&r.pid]).collect();
    let all: Vec<usize> = (0..set.len()).collect();
    let mut aug = Augmenter::new(AugmentPolicy::eval()).unwrap();
    let x = make_batch(set, &all, 64, 32, &mut aug, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let mut binding = Binding::new();
    let mut ctx = Ctx::new(&mut tape, &mut binding, &mut store, true);
    let xv = ctx.tape.constant(x);
    let out = model.forward(&mut ctx, xv).unwrap();
    let l = ctx.tape.cross_entropy_ls(out.logits.unwrap(), &y, 0.1).unwrap();
    tape.value(l).data()[0] as f64
}

#[test]
fn one_epoch_reduces_loss_in_most_seeds() {
    let set = tiny_set(4, 8, 11);
    let mut decreased = 0;
    for seed in 0..3 {
        let mut t = Trainer::<f32>::new(&tiny_spec(4), tiny_config(1, seed).optim, seed).unwrap();
        let before = set_loss(&t.model, &t.store, &set);
        assert!((before - 4f64.ln()).abs() < 1.0, "initial loss {}", before);
        t.run(&set, &tiny_config(1, seed)).unwrap();
        if set_loss(&t.model, &t.store, &set) < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 2, "loss decreased in {} of 3 seeds", decreased);
}

#[test]
fn logged_lr_follows_schedule() {
    let set = tiny_set(2, 8, 12);
    let mut cfg = tiny_config(4, 0);
    cfg.optim.schedule = Schedule::StepDecay {
        milestones: vec![1, 3],
        factor: 0.1,
    };
    let mut t = Trainer::<f32>::new(&tiny_spec(2), cfg.optim.clone(), 0).unwrap();
    t.run(&set, &cfg).unwrap();
    let lrs: Vec<f64> = t.log.iter().map(|e| e.lr).collect();
    let want = [0.003, 0.003 * 0.1, 0.003 * 0.1, 0.003 * 0.1 * 0.1];
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() <= 1e-15 * b.max(1.0), "{:?}", lrs);
    }
}

#[test]
fn resumed_run_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let set = tiny_set(3, 8, 13);
    let straight = dir.path().join("straight.osck");
    let split = dir.path().join("split.osck");
    let mut cfg = tiny_config(3, 5);
    cfg.augment.patch = Some(Default::default());
    cfg.checkpoint = Some(straight.clone());
    Trainer::<f32>::new(&tiny_spec(3), cfg.optim.clone(), 5).unwrap().run(&set, &cfg).unwrap();

    let mut first = cfg.clone();
    first.epochs = 2;
    first.checkpoint = Some(split.clone());
    Trainer::<f32>::new(&tiny_spec(3), cfg.optim.clone(), 5).unwrap().run(&set, &first).unwrap();
    let ckpt = Checkpoint::<f32>::load(&split).unwrap();
    let mut resumed = Trainer::resume(&ckpt, cfg.optim.clone()).unwrap();
    assert_eq!(resumed.epoch, 2);
    let mut rest = cfg.clone();
    rest.checkpoint = Some(split.clone());
    resumed.run(&set, &rest).unwrap();
    assert_eq!(std::fs::read(&straight).unwrap(), std::fs::read(&split).unwrap());
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.osck");
    let set = tiny_set(2, 8, 14);
    let mut cfg = tiny_config(1, 0);
    cfg.checkpoint = Some(path.clone());
    let mut t = Trainer::<f32>::new(&tiny_spec(2), cfg.optim.clone(), 0).unwrap();
    t.run(&set, &cfg).unwrap();
    let good = std::fs::read(&path).unwrap();

    cfg.epochs = 3;
    cfg.optim.lr = 1e300;
    let mut t = Trainer::resume(&Checkpoint::<f32>::load(&path).unwrap(), cfg.optim.clone()).unwrap();
    let err = t.run(&set, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{}", err);
    assert_eq!(std::fs::read(&path).unwrap(), good);
}

#[test]
fn features_do_not_depend_on_batch_size() {
    let set = tiny_set(3, 4, 15);
    for beta in [0.25, 0.5] {
        let spec = NetworkSpec {
            width_multiplier: beta,
            ..tiny_spec(0)
        };
        let (model, mut store) = osnet::arch::build_model::<f32>(&spec, 1).unwrap();
        let one = extract_features(&model, &mut store, &set, 1, true).unwrap();
        let many = extract_features(&model, &mut store, &set, 32, true).unwrap();
        assert_eq!(one.dim(), 512);
        assert!(one.matrix.max_abs_diff(&many.matrix) <= 1e-5);
        for i in 0..one.len() {
            let norm: f64 = one.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
        }
        assert_eq!(one.pids, set.index.pids());
    }
}

#[test]
fn fixbase_epochs_train_only_open_layers() {
    let set = tiny_set(2, 8, 16);
    let mut cfg = tiny_config(2, 0);
    cfg.fixbase_epochs = 1;
    cfg.epochs = 1;
    let mut t = Trainer::<f32>::new(&tiny_spec(2), cfg.optim.clone(), 0).unwrap();
    let before = t.store.clone();
    t.run(&set, &cfg).unwrap();
    let moved = |a: &ParamStore<f32>, b: &ParamStore<f32>, open: bool| {
        a.iter()
            .zip(b.iter())
            .filter(|((_, p), _)| p.kind.is_learnable() && p.name.starts_with("classifier") == open)
            .any(|((_, p), (_, q))| p.value != q.value)
    };
    assert!(moved(&before, &t.store, true));
    assert!(!moved(&before, &t.store, false));

    let frozen = t.store.clone();
    cfg.epochs = 2;
    t.run(&set, &cfg).unwrap();
    assert!(moved(&frozen, &t.store, false));
}
