use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osnet::arch::{build_model, Fusion, NetworkSpec};
use osnet::data::{derive_rng, make_synthetic_dataset, ImageSet, SynthConfig};
use osnet::introspect::{activation_map, activation_maps, collect_gating, kmeans, nearest};
use osnet::Tensor;

fn set(ids: usize, per_id: usize, height: usize, width: usize) -> ImageSet {
    let cfg = SynthConfig {
        num_ids: ids,
        images_per_id: per_id,
        height,
        width,
        ..SynthConfig::default()
    };
    make_synthetic_dataset(&cfg, &mut derive_rng(9, &[])).unwrap()
}

fn tiny(fusion: Fusion) -> NetworkSpec {
    NetworkSpec {
        width_multiplier: 0.25,
        input_height: 64,
        input_width: 32,
        fusion,
        ..Default::default()
    }
}

#[test]
fn activation_map_matches_formula() {
    let f = Tensor::<f64>::randn(&[2, 4, 3, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let m = activation_map(&f).unwrap();
    assert_eq!(m.shape(), &[2, 3, 5]);
    for n in 0..2 {
        let raw: Vec<f64> = (0..15)
            .map(|p| (0..4).map(|c| f.data()[(n * 4 + c) * 15 + p].abs()).sum())
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for p in 0..15 {
            assert!((m.data()[n * 15 + p] - raw[p] / norm).abs() <= 1e-6);
        }
    }
    let zero = activation_map(&Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap()).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn model_activation_maps_have_conv5_resolution() {
    let s = set(2, 3, 64, 32);
    let (model, mut store) = build_model::<f32>(&tiny(Fusion::UnifiedAg), 0).unwrap();
    let maps = activation_maps(&model, &mut store, &s, 4).unwrap();
    assert_eq!(maps.shape(), &[6, 4, 2]);
    for i in 0..6 {
        let norm: f64 = maps.data()[i * 8..(i + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn default_gating_record_is_streams_times_mid_width() {
    let s = set(1, 1, 256, 128);
    let (model, mut store) = build_model::<f32>(&NetworkSpec::default(), 0).unwrap();
    let recs = collect_gating(&model, &mut store, &s, 1).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].vector.len(), 4 * 128);
    assert!(recs[0].vector.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn static_gates_ignore_the_input_and_unified_gates_do_not() {
    let s = set(3, 2, 64, 32);
    let (model, mut store) = build_model::<f32>(&tiny(Fusion::StaticGate), 0).unwrap();
    let recs = collect_gating(&model, &mut store, &s, 4).unwrap();
    assert!(recs.iter().all(|r| r.vector == recs[0].vector));

    let (model, mut store) = build_model::<f32>(&tiny(Fusion::UnifiedAg), 0).unwrap();
    let recs = collect_gating(&model, &mut store, &s, 4).unwrap();
    assert_eq!(recs.iter().map(|r| r.image).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    assert!(recs.iter().skip(1).any(|r| r.vector != recs[0].vector));

    let (model, mut store) = build_model::<f32>(&tiny(Fusion::Add), 0).unwrap();
    assert!(collect_gating(&model, &mut store, &s, 4).is_err());
}

#[test]
fn kmeans_objective_never_increases() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let vectors: Vec<Vec<f64>> = (0..120)
        .map(|i| {
            let c = (i % 4) as f64;
            (0..6).map(|_| c + r.random_range(-0.8..0.8)).collect()
        })
        .collect();
    for seed in 0..5 {
        let km = kmeans(&vectors, 4, 100, seed).unwrap();
        assert!(km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", km.objective);
        assert!(km.converged);
        let picked = nearest(&vectors, &km.centers[0], 15);
        assert_eq!(picked.len(), 15);
        assert!(picked.iter().all(|&i| km.assignments[i] == 0));
    }
}
