mod common;

use peftdml_core::encoders::{
    encode, pretrain_backbones, probe_accuracy_on, project, EncoderConfig, PretrainConfig,
};
use peftdml_core::model::{Model, ModelConfig};
use peftdml_core::peft::{lora_wrap, merge_lora, trainability_report, AdapterBlock, LinearLayer};
use peftdml_core::tensor::{grad_check, OptimizerState, Tensor};
use peftdml_core::world::{Modality, BACKGROUND};
use peftdml_core::{Graph, ParameterSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merged_layer_matches_wrapped(rank in prop::sample::select(vec![1usize, 4, 8, 16]), seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let base = LinearLayer::init(&mut ps, "layer", 16, 20, &mut rng);
        let lora = lora_wrap(&mut ps, base, rank, 2.0 * rank as f64, seed).unwrap();
        let b = random_vec(&mut rng, 20 * rank);
        ps.insert(lora.b_path(), Tensor::new(&[20, rank], b).unwrap());
        let merged = merge_lora(&mut ps, &lora, "merged").unwrap();
        for _ in 0..20 {
            let x = random_vec(&mut rng, 16);
            let a = lora.apply(&ps, &x).unwrap();
            let m = merged.apply(&ps, &x).unwrap();
            for (p, q) in a.iter().zip(&m) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
        // Merging the plain result again changes nothing.
        let w = ps.get(&merged.weight_path()).unwrap().data().to_vec();
        let bias = ps.get(&merged.bias_path()).unwrap().data().to_vec();
        let again = LinearLayer::with_values(&mut ps, "merged2", 16, 20, w, bias);
        prop_assert_eq!(ps.get(&again.weight_path()), ps.get(&merged.weight_path()));
    }

    #[test]
    fn trainable_fraction_grows_with_rank(seed in 0u64..100) {
        let fractions: Vec<f64> = [1usize, 2, 4, 8, 16]
            .iter()
            .map(|&r| trainability_report(&common::model_with_rank(seed, r).0).fraction)
            .collect();
        for w in fractions.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
    }
}

/// Parameter count of the default architecture derived from layer shapes,
/// independent of the parameter set.
fn expected_counts(rank: usize) -> (usize, usize) {
    let cfg = EncoderConfig::default();
    let (h, d, b) = (cfg.hidden, cfg.embed_dim, cfg.adapter_bottleneck);
    let linear = |i: usize, o: usize| i * o + o;
    let mut frozen = 0;
    let mut trainable = 0;
    for m in Modality::ALL {
        let dim = m.dim();
        frozen += linear(dim, h) + linear(h, h);
        let r1 = rank.min(dim).min(h);
        let r2 = rank.min(h);
        trainable += r1 * (dim + h) + r2 * (h + h);
        trainable += 2 * (linear(h, b) + linear(b, h));
        trainable += linear(h, d);
    }
    let n = Modality::ALL.len();
    trainable += d + 2 * d * d + n * (d + 1);
    let geometry = 8;
    let head_out = BACKGROUND + 1 + 8 + 2 + 1;
    trainable += linear(d + geometry, ModelConfig::default().detect_hidden)
        + linear(ModelConfig::default().detect_hidden, head_out);
    (frozen, trainable)
}

#[test]
fn trainability_matches_enumeration() {
    for rank in [4, 8, 16] {
        let (ps, _) = common::model_with_rank(1, rank);
        let report = trainability_report(&ps);
        let (frozen, trainable) = expected_counts(rank);
        assert_eq!(report.total, frozen + trainable, "rank {rank}");
        assert_eq!(report.trainable, trainable, "rank {rank}");
        let enumerated: usize = ps.iter().map(|(_, t)| t.len()).sum();
        let enumerated_trainable: usize =
            ps.trainable_paths().map(|p| ps.get(p).unwrap().len()).sum();
        assert_eq!(
            (report.total, report.trainable),
            (enumerated, enumerated_trainable)
        );
        let group_sum: usize = report.groups.values().map(|g| g.total).sum();
        assert_eq!(group_sum, report.total);
        assert_eq!(report.groups["backbone"].trainable, 0);
    }
}

#[test]
fn base_64_rank_8_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParameterSet::new();
    let base = LinearLayer::init(&mut ps, "l", 64, 64, &mut rng);
    lora_wrap(&mut ps, base, 8, 16.0, 3).unwrap();
    let r = trainability_report(&ps);
    assert_eq!(r.trainable, 1024);
    assert_eq!(r.total - r.trainable, 4160);
}

#[test]
fn adapter_gradient_skips_frozen_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParameterSet::new();
    let l = LinearLayer::init(&mut ps, "enc", 4, 6, &mut rng);
    l.freeze(&mut ps).unwrap();
    let ad = AdapterBlock::init(&mut ps, "enc.adapter", 6, 2, &mut rng);
    ps.get_mut(&ad.up.weight_path())
        .unwrap()
        .data_mut()
        .fill(0.3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 4], random_vec(&mut rng, 8)).unwrap());
    let h = l.forward(&mut g, &ps, x).unwrap();
    let y = ad.forward(&mut g, &ps, h).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap().for_params(&ps);
    assert!(!grads.contains_key(&l.weight_path()));
    assert!(grads.contains_key(&ad.down.weight_path()));
    assert!(grads[&ad.up.weight_path()].data().iter().any(|v| *v != 0.0));
}

#[test]
fn encoder_and_projection_gradcheck() {
    let ds = common::small_dataset(2);
    let (mut ps, model) = common::model(2);
    common::perturb_trainable(&mut ps, 7, 0.1);
    let batch = common::full_batch(&ds.train, 1)
        .select(&[0, 1, 2, 3])
        .unwrap();
    for m in Modality::ALL {
        let dim = m.dim();
        let x = Tensor::new(&[4, dim], batch.features[m.index()][..4 * dim].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(m.index() as u64);
        let w = Tensor::new(&[4, 32], random_vec(&mut rng, 128)).unwrap();
        // Restricting to this modality's paths keeps the check small.
        let mut sub = ps.clone();
        let others: Vec<String> = sub
            .trainable_paths()
            .filter(|p| {
                !p.contains(&format!(".{}.", m.name())) && !p.ends_with(&format!(".{}", m.name()))
            })
            .filter(|p| !p.starts_with(&format!("projection.{}", m.name())))
            .map(str::to_string)
            .collect();
        for p in others {
            sub.freeze(&p).unwrap();
        }
        let report = grad_check(
            |g, p| {
                let xv = g.constant(x.clone());
                let z = model.embed(g, p, m, xv)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(z, wv)?;
                Ok(g.sum(prod))
            },
            &sub,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.checked_scalars() > 0);
        assert!(report.pass, "{m}: {:?}", report.worst());
    }
}

#[test]
fn scalar_encode_matches_graph_and_is_unit_norm() {
    let ds = common::small_dataset(4);
    let (mut ps, model) = common::model(4);
    common::perturb_trainable(&mut ps, 1, 0.1);
    let (_, f) = ds.test.frames().next().unwrap();
    for m in Modality::ALL {
        let feats = f.modality(m);
        let latent = encode(&model.encoders[m.index()], &ps, feats, 0).unwrap();
        let z = project(&model.projections[m.index()], &ps, &latent).unwrap();
        let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::new(&[1, m.dim()], feats.row(0).to_vec()).unwrap());
        let zv = model.embed(&mut g, &ps, m, x).unwrap();
        for (a, b) in g.value(zv).data().iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pretraining_is_deterministic_frozen_and_above_chance() {
    let ds = common::small_dataset(6);
    let cfg = PretrainConfig::default();
    let a = pretrain_backbones(&ds.train, 64, &cfg, 6).unwrap();
    let b = pretrain_backbones(&ds.train, 64, &cfg, 6).unwrap();
    assert_eq!(a.params, b.params);
    assert!(a.params.iter().all(|(p, _)| a.params.is_frozen(p)));
    assert!(a.params.iter().all(|(p, _)| p.starts_with("encoder.")));

    // Optimizer steps do not touch frozen backbones.
    let mut ps = a.params.clone();
    let grads = ps
        .iter()
        .map(|(p, t)| {
            (
                p.to_string(),
                Tensor::new(t.shape(), vec![1.0; t.len()]).unwrap(),
            )
        })
        .collect();
    let mut opt = OptimizerState::new(Default::default());
    opt.step(&mut ps, &grads).unwrap();
    assert_eq!(ps, a.params);

    let acc =
        probe_accuracy_on(&a.params, Modality::Lidar, 64, &ds.train, &ds.val, &cfg, 6).unwrap();
    assert!(acc > 1.0 / 7.0, "lidar probe accuracy {acc}");
}

#[test]
fn peft_identity_at_init() {
    let ds = common::small_dataset(8);
    let (ps, model) = common::model(8);
    let batch = common::full_batch(&ds.test, 3);
    let (full, fused_full) = model.predict(&ps, &batch).unwrap();
    let (bare, fused_bare) = model.backbone_only().predict(&ps, &batch).unwrap();
    for (a, b) in fused_full.data().iter().zip(fused_bare.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in full.iter().zip(&bare) {
        for (x, y) in a.class_logits.iter().zip(&b.class_logits) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn model_config_rejects_bad_rank() {
    let mut ps = ParameterSet::new();
    peftdml_core::encoders::init_backbones(&mut ps, 64, 0);
    ps.freeze_prefix("encoder.");
    let mut cfg = ModelConfig::default();
    cfg.encoder.rank = 0;
    assert!(Model::build(&mut ps, &cfg, 0).is_err());
}
