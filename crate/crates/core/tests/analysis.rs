mod common;

use deepmoe::analysis::{
    gate_stats, gate_stats_from_inference, gate_trace_csv, lambda_sweep, shuffle_embedding_experiment, supports_from_trace,
    sweep_csv, train_and_summarize, widening_comparison, BudgetMode,
};
use deepmoe::io::Csv;
use deepmoe::model::{compile, presets, GateSource, WideningPreset, DEFAULT_INFERENCE_BATCH};
use deepmoe::training::{make_synthetic, DataSpec, Dataset, LrSchedule, Split, TrainConfig};
use deepmoe::{build_deepmoe, ParamGroup};

fn quick(classes: usize, train: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda: 0.01,
        lr: LrSchedule { initial: 0.02, decay_epochs: vec![], factor: 0.1 },
        n0: epochs,
        n1: 1,
        batch_size: 16,
        data: DataSpec::Synthetic { train, val: 16, classes, noise: 0.35 },
        ..TrainConfig::default()
    }
}

#[test]
fn identity_donors_reproduce_the_baseline() {
    let model = build_deepmoe::<f32>(&presets::tiny_vgg(8), 3).unwrap();
    let data = make_synthetic::<f32>(32, 8, 16, 1).unwrap();
    let r = shuffle_embedding_experiment(&model, &data, &[0, 3, 5], 4, 0).unwrap();
    assert!(r.identity_matches_baseline);
    assert_eq!(r.classes.len(), 3);
    let out = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned).unwrap();
    let again = model.infer(&data.images, 7, GateSource::Donor(&out.embeddings)).unwrap();
    assert_eq!(out.logits, again.logits);
}

#[test]
fn shuffle_rejects_absent_classes_and_missing_groups() {
    let model = build_deepmoe::<f32>(&presets::tiny_vgg(8), 3).unwrap();
    let data = make_synthetic::<f32>(16, 8, 16, 1).unwrap();
    let few = data.subset(&data.indices_of_class(1));
    let few = Dataset::new(few.images, few.labels, few.coarse, 8, Split::Val).unwrap();
    assert!(shuffle_embedding_experiment(&model, &few, &[0], 2, 0).is_err());
    let plain = Dataset::new(data.images.clone(), data.labels.clone(), None, 8, Split::Val).unwrap();
    assert!(shuffle_embedding_experiment(&model, &plain, &[0], 2, 0).is_err());
    assert!(shuffle_embedding_experiment(&model, &data, &[0], 0, 0).is_err());
}

/// Class 2 is an exact copy of class 1 placed in another coarse group, so the
/// in-group and out-of-group donor pools hold the same embeddings.
#[test]
fn identical_donor_pools_give_equal_accuracy() {
    let model = build_deepmoe::<f64>(&presets::tiny_vgg(3), 5).unwrap();
    let src = make_synthetic::<f64>(60, 3, 16, 2).unwrap();
    let zero = src.indices_of_class(0);
    let one = src.indices_of_class(1);
    let idx: Vec<usize> = zero.iter().chain(&one).chain(&one).copied().collect();
    let images = src.images.gather_rows(&idx);
    let mut labels = vec![0; zero.len()];
    labels.extend(vec![1; one.len()]);
    labels.extend(vec![2; one.len()]);
    let mut coarse = vec![0; 2 * zero.len()];
    coarse.resize(labels.len(), 1);
    coarse[zero.len()..zero.len() + one.len()].fill(0);
    let data = Dataset::new(images, labels, Some(coarse), 3, Split::Val).unwrap();
    let r = shuffle_embedding_experiment(&model, &data, &[0], 200, 9).unwrap();
    let c = &r.classes[0];
    assert!((c.in_group_acc - c.out_group_acc).abs() < 0.05, "{c:?}");
}

#[test]
fn zero_gate_weights_give_one_empty_support() {
    let mut model = build_deepmoe::<f32>(&presets::toy_vgg(4), 1).unwrap();
    for e in model.params.entries_mut().filter(|e| e.group == ParamGroup::Gate) {
        e.tensor.data_mut().fill(0.0);
    }
    let data = make_synthetic::<f32>(12, 4, 16, 0).unwrap();
    let s = gate_stats(&model, &data).unwrap();
    assert_eq!(s.layers.len(), 5);
    for l in &s.layers {
        assert_eq!(l.distinct_supports, 1);
        assert_eq!(l.mean_active_fraction, 0.0);
        assert_eq!(l.active_histogram[0], 12);
        assert_eq!(l.jaccard_mean, 1.0);
    }
}

#[test]
fn all_ones_gates_give_one_full_support() {
    let model = build_deepmoe::<f32>(&presets::toy_vgg(4), 1).unwrap();
    let data = make_synthetic::<f32>(12, 4, 16, 0).unwrap();
    let out = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, GateSource::Constant(1.0)).unwrap();
    let s = gate_stats_from_inference(&model, &out);
    for l in &s.layers {
        assert_eq!(l.distinct_supports, 1);
        assert_eq!(l.mean_active_fraction, 1.0);
        assert_eq!(*l.active_histogram.last().unwrap(), 12);
        assert_eq!((l.jaccard_min, l.jaccard_max), (1.0, 1.0));
    }
}

#[test]
fn trained_gates_are_diverse_and_consistent_with_traces() {
    let cfg = presets::tiny_vgg(4);
    let tc = quick(4, 64, 4);
    let (model, _) = train_and_summarize::<f32>(&cfg, &tc).unwrap();
    let data = make_synthetic::<f32>(30, 4, 16, 99).unwrap();
    let out = model.infer(&data.images, DEFAULT_INFERENCE_BATCH, GateSource::Learned).unwrap();
    let stats = gate_stats_from_inference(&model, &out);
    assert!(stats.layers.iter().any(|l| l.distinct_supports > 1));
    let trace = Csv::parse(&gate_trace_csv(&model, &out).render());
    let sup = supports_from_trace(&trace, 30).unwrap();
    for (h, l) in stats.layers.iter().enumerate() {
        let rebuilt = sup.get(&l.head).cloned().unwrap_or_else(|| vec![Vec::new(); 30]);
        assert_eq!(rebuilt, deepmoe::analysis::supports(&out.gates[h]), "{}", l.head);
        let frac: f64 = rebuilt.iter().map(|s| s.len() as f64 / l.width as f64).sum::<f64>() / 30.0;
        assert!((frac - l.mean_active_fraction).abs() < 1e-12);
    }
}

#[test]
fn trace_examples_out_of_range_are_rejected() {
    let mut csv = Csv::new(&["example_id", "layer", "channel", "gate_value"]);
    csv.push(vec!["3".into(), "gate.0".into(), "1".into(), "0.5".into()]);
    assert!(supports_from_trace(&csv, 3).is_err());
    assert_eq!(supports_from_trace(&csv, 4).unwrap()["gate.0"][3], vec![1]);
}

#[test]
fn sweep_rows_follow_grid_and_seeds() {
    let cfg = presets::tiny_vgg(4);
    let rows = lambda_sweep::<f32>(&cfg, &quick(4, 32, 1), &[0.0, 0.5, 8.0], &[3, 4]).unwrap();
    let order: Vec<(f64, u64)> = rows.iter().map(|r| (r.lambda, r.seed)).collect();
    assert_eq!(order, [(0.0, 3), (0.0, 4), (0.5, 3), (0.5, 4), (8.0, 3), (8.0, 4)]);
    assert_eq!(sweep_csv(&rows).rows.len(), 6);
    for r in &rows {
        let s = r.result.as_ref().unwrap();
        assert!(s.dynamic_flops <= s.static_flops as f64);
    }
    let again = lambda_sweep::<f32>(&cfg, &quick(4, 32, 1), &[0.0, 0.5, 8.0], &[3, 4]).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn widening_table_has_one_row_per_preset_with_closed_form_params() {
    let tc = TrainConfig { n1: 0, ..quick(10, 20, 1) };
    let rows = widening_comparison::<f32>(&WideningPreset::ALL, BudgetMode::Params, &tc, 16, &[]).unwrap();
    assert_eq!(rows.len(), WideningPreset::ALL.len());
    for (row, preset) in rows.iter().zip(WideningPreset::ALL) {
        let cfg = presets::vgg16_widened_scaled(preset, 10, 16);
        let model = build_deepmoe::<f32>(&cfg, 0).unwrap();
        assert_eq!(row.preset, cfg.name);
        assert_eq!(row.total_params, model.params.count(None));
        assert_eq!(row.base_params, model.params.count(Some(ParamGroup::Base)));
        assert_eq!(row.total_params, compile(&cfg).unwrap().total_param_count());
        assert!(row.result.is_some(), "{:?}", row.error);
    }
    let w13 = rows.iter().find(|r| r.preset.contains("w13-all")).unwrap();
    assert_eq!(w13.gated_convs, 13);
    assert!(widening_comparison::<f32>(&WideningPreset::ALL, BudgetMode::ParamsFlops, &tc, 16, &[]).is_err());
}
