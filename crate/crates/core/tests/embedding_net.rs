mod common;

use common::{rng, uniform};
use deepmoe::embedding::{aux_classify, build_embedding_net, embed_forward, EmbeddingConfig};
use deepmoe::flops::{static_flops, CostGroup};
use deepmoe::model::presets;
use deepmoe::{Graph, ParamGroup, ParamSet};

#[test]
fn cifar_defaults() {
    let cfg = EmbeddingConfig::cifar(100);
    assert_eq!(cfg.channels, vec![32, 64, 128, 128]);
    assert_eq!(cfg.embed_dim, 64);
    assert!(!cfg.softmax_output);
}

#[test]
fn parameter_count_matches_closed_form() {
    for (cfg, c_in) in [(EmbeddingConfig::cifar(10), 3), (EmbeddingConfig::cifar(100), 3), (presets::toy_vgg(4).embedding, 3)] {
        let mut p = ParamSet::<f32>::default();
        build_embedding_net(&cfg, c_in, 0, &mut p).unwrap();
        let mut want = 0;
        let mut prev = c_in;
        for &c in &cfg.channels {
            want += 9 * prev * c + c;
            prev = c;
        }
        want += prev * cfg.embed_dim + cfg.embed_dim;
        want += cfg.embed_dim * cfg.num_classes + cfg.num_classes;
        assert_eq!(p.count(Some(ParamGroup::Embedding)), want);
        assert_eq!(cfg.param_count(c_in), want);
    }
}

#[test]
fn seeding_is_deterministic_and_seed_sensitive() {
    let cfg = EmbeddingConfig::cifar(10);
    let build = |seed| {
        let mut p = ParamSet::<f32>::default();
        build_embedding_net(&cfg, 3, seed, &mut p).unwrap();
        p.checksum(None)
    };
    assert_eq!(build(5), build(5));
    assert_ne!(build(5), build(6));
}

#[test]
fn embedding_share_of_cifar_presets_is_at_most_five_percent() {
    for cfg in presets::cifar_presets(10).into_iter().chain(presets::cifar_presets(100)) {
        let r = static_flops(&cfg).unwrap();
        let share = r.group_static(CostGroup::Embedding) as f64 / r.group_static(CostGroup::Base) as f64;
        assert!(share <= 0.05, "{}: {share}", cfg.name);
    }
}

#[test]
fn embedding_is_deterministic_and_aux_loss_reaches_first_conv() {
    let cfg = presets::toy_vgg(4).embedding;
    let mut p = ParamSet::<f64>::default();
    build_embedding_net(&cfg, 3, 3, &mut p).unwrap();
    let mut r = rng(1);
    let x = uniform(&[4, 3, 16, 16], -1.0, 1.0, &mut r);
    let run = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = embed_forward(&mut g, &cfg, p, xv).unwrap();
        let logits = aux_classify(&mut g, p, e).unwrap();
        let l = g.softmax_cross_entropy(logits, &[0, 1, 2, 3]).unwrap();
        let ev = g.value(e).clone();
        g.backward(l).unwrap();
        (ev, g.param_grads(p))
    };
    let (e1, grads) = run(&p);
    let (e2, _) = run(&p);
    assert_eq!(e1, e2);
    assert_eq!(e1.shape(), [4, cfg.embed_dim]);
    let first = grads.iter().find(|(n, _)| n.starts_with("embed.conv0") && n.ends_with("weight")).unwrap().1;
    assert!(first.max_abs() > 0.0);
}

#[test]
fn aux_classifier_matches_linear_cross_entropy_composition() {
    let cfg = EmbeddingConfig { channels: vec![2], embed_dim: 3, num_classes: 2, softmax_output: false };
    let mut p = ParamSet::<f64>::default();
    build_embedding_net(&cfg, 1, 9, &mut p).unwrap();
    let mut r = rng(2);
    let e = uniform(&[2, 3], -1.0, 1.0, &mut r);
    let w = p.get("embed.aux.weight").unwrap().clone();
    let b = p.get("embed.aux.bias").unwrap().clone();
    let mut g = Graph::inference();
    let ev = g.constant(e.clone());
    let logits = aux_classify(&mut g, &p, ev).unwrap();
    let labels = [1, 0];
    let l = g.softmax_cross_entropy(logits, &labels).unwrap();
    let mut want = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let z: Vec<f64> = (0..2).map(|k| (0..3).map(|d| e.data()[n * 3 + d] * w.data()[d * 2 + k]).sum::<f64>() + b.data()[k]).collect();
        for k in 0..2 {
            assert!((g.value(logits).data()[n * 2 + k] - z[k]).abs() < 1e-12);
        }
        want += z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[y];
    }
    assert!((g.value(l).item() - want / 2.0).abs() < 1e-12);
}
