mod common;

use common::{small_dataset, tensor, tiny_config};
use numcore::{Tape, Tensor};
use proptest::prelude::*;
use vqa_core::config::{Toggles, TrainConfig};
use vqa_core::data::{generate_dataset, load_dataset, Dataset, GeneratorSpec, VqaSample, OUT_OF_SET};
use vqa_core::encoders::ImageGrid;
use vqa_core::harness::checkpoint;
use vqa_core::harness::eval::{evaluate, format_table, parse_table, predict, MetricsReport};
use vqa_core::harness::experiments::{ablate, format_rows};
use vqa_core::harness::flops::{self, attention_score_flops, cmm_stack, cmm_stream, reference_attention_stack};
use vqa_core::harness::gradcam::{gradcam, gradcam_with, Target};
use vqa_core::harness::gradsuite::{run_suite, CHECKS};
use vqa_core::harness::train::{fit_config, train, train_step, TrainOptions};
use vqa_core::model::{Batch, LossWeights, Model};
use vqa_core::par::ExecMode;
use vqa_core::params::{AdamW, Ctx};
use vqa_core::{Error, ModelConfig};

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: tiny_config(),
        epochs,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::toy()
    }
}

fn data(dir: &std::path::Path) -> Dataset {
    small_dataset(dir, 16, 24, 5)
}

fn sample(is_open: bool, class: usize) -> VqaSample {
    VqaSample {
        id: 0,
        image: ImageGrid::filled(16, 16, 3, 0.0),
        question: String::new(),
        answer: String::new(),
        is_open,
        answer_class: class,
        scene: None,
    }
}

#[test]
fn true_predictions_score_one() {
    let samples: Vec<VqaSample> = (0..9).map(|i| sample(i % 3 == 0, i % 4)).collect();
    let truth = samples.iter().map(|s| s.answer_class).collect();
    let m = MetricsReport::from_predictions(&samples, truth);
    assert_eq!(
        (m.acc_open(), m.acc_closed(), m.acc_overall()),
        (Some(1.0), Some(1.0), 1.0)
    );
}

#[test]
fn crafted_model_emits_the_true_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let cfg = fit_config(&tiny_train(1), &data);
    let mut model = Model::new(&cfg.model, 0).unwrap();
    let yes = data.answers.class("yes");
    model.store.zero_prefix("cls.fc2");
    model.store.by_name_mut("cls.fc2.b").data_mut()[yes] = 1e6;
    let subset: Vec<VqaSample> = data
        .test
        .samples
        .iter()
        .filter(|s| s.answer == "yes")
        .cloned()
        .collect();
    assert!(!subset.is_empty());
    let m = evaluate(&model, &subset, &data.vocab, ExecMode::Sequential).unwrap();
    assert_eq!(m.acc_closed(), Some(1.0));
    assert_eq!(m.acc_overall(), 1.0);
    assert_eq!(m.acc_open(), None);
}

#[test]
fn out_of_set_answers_are_never_correct() {
    let samples = vec![sample(true, OUT_OF_SET), sample(false, 1)];
    for p in [0, 1, 7, usize::MAX - 1] {
        let m = MetricsReport::from_predictions(&samples, vec![p, 1]);
        assert_eq!(m.correct_open, 0);
    }
}

#[test]
fn empty_open_subset_reports_undefined() {
    let samples: Vec<VqaSample> = (0..4).map(|i| sample(false, i % 2)).collect();
    let m = MetricsReport::from_predictions(&samples, vec![0, 0, 0, 1]);
    assert_eq!(m.acc_open(), None);
    assert_eq!(Some(m.acc_overall()), m.acc_closed());
    assert!(m.to_kv().contains("acc_open=n/a"));
    let rows = parse_table(&format_table(&[("x".into(), &m)])).unwrap();
    assert_eq!(rows[0].1, None);
}

#[test]
fn random_init_closed_accuracy_sits_at_the_base_rate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        image_size: 16,
        train: 64,
        val: 8,
        test: 200,
        ..GeneratorSpec::default()
    };
    generate_dataset(&spec, 12, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let cfg = fit_config(&tiny_train(1), &data);
    let closed: Vec<VqaSample> = data.test.samples.iter().filter(|s| !s.is_open).cloned().collect();
    let yes = data.answers.class("yes");
    let no = data.answers.class("no");
    let n_yes = closed.iter().filter(|s| s.answer_class == yes).count();
    let majority = n_yes.max(closed.len() - n_yes) as f64 / closed.len() as f64;
    let mut restricted = 0.0;
    for seed in 0..5 {
        let model = Model::new(&cfg.model, seed).unwrap();
        let full = evaluate(&model, &closed, &data.vocab, ExecMode::Sequential).unwrap();
        assert!(full.acc_closed().unwrap() <= majority + 0.1);
        // decision between the two closed answers only
        let refs: Vec<&VqaSample> = closed.iter().collect();
        let batch = Batch::new(&refs, &data.vocab, &cfg.model).unwrap();
        let tape = Tape::new();
        let cx = Ctx::frozen(&tape, &model.store);
        let logits = model.forward(&cx, &batch).unwrap().logits.value();
        let hits = closed
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                let pick = if logits.at(&[*i, no]) > logits.at(&[*i, yes]) {
                    no
                } else {
                    yes
                };
                pick == s.answer_class
            })
            .count();
        restricted += hits as f64 / closed.len() as f64 / 5.0;
    }
    assert!(
        (restricted - majority).abs() <= 0.1,
        "mean {restricted} vs majority {majority}"
    );
}

#[test]
fn table_round_trips_through_the_parser() {
    let samples: Vec<VqaSample> = (0..7).map(|i| sample(i % 2 == 0, i % 3)).collect();
    let a = MetricsReport::from_predictions(&samples, vec![0; 7]);
    let b = MetricsReport::from_predictions(&samples, vec![1, 1, 2, 0, 1, 2, 0]);
    let text = format_table(&[("with ahead".into(), &a), ("none".into(), &b)]);
    let rows = parse_table(&text).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].0, "with ahead");
    for (row, m) in rows.iter().zip([&a, &b]) {
        let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => (x - 100.0 * y).abs() < 0.006,
            (None, None) => true,
            _ => false,
        };
        assert!(close(row.1, m.acc_open()));
        assert!(close(row.2, m.acc_closed()));
        assert!(close(row.3, Some(m.acc_overall())));
    }
    assert!(parse_table("model Open Closed\n").is_err());
}

#[test]
fn ablation_has_six_rows_and_the_full_model_is_largest() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 16, 8, 1);
    let rows = ablate(&tiny_train(1), &data, ExecMode::Sequential).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].label, "none");
    assert_eq!(rows[5].config.model.toggles, Toggles::ALL);
    assert!(rows[5].params > rows[0].params);
    let text = format_rows(&rows);
    let parsed = parse_table(text.split("\n\n").next().unwrap()).unwrap();
    assert_eq!(parsed.len(), 6);
    let hashes: std::collections::HashSet<_> = rows.iter().map(|r| r.config_hash.clone()).collect();
    assert_eq!(hashes.len(), 6);
    for r in &rows {
        assert_eq!(r.config.hash(), r.config_hash);
        assert!(text.contains(&format!("config_hash={}", r.config_hash)));
    }
}

/// Unit-norm tokens from a random projection; the target is the mean
/// squared activation of one patch.
fn planted_case(seed: u64, grid: (usize, usize), patch: usize) -> (Vec<f64>, bool) {
    let n = grid.0 * grid.1;
    gradcam_with(grid, |tape| {
        let x = tape.leaf(tensor(&[n, 6], seed, 1.0));
        let w = tape.constant(tensor(&[6, 5], seed + 1000, 1.0));
        let act = x.matmul(w)?.l2_normalize(0.0)?;
        let a = act.narrow(0, patch, 1)?;
        Ok((act, a.mul(a)?.mean()))
    })
    .unwrap()
}

#[test]
fn planted_patch_attains_the_maximum() {
    for case in 0..20u64 {
        let grid = (2 + case as usize % 3, 3);
        let patch = (case as usize * 7) % (grid.0 * grid.1);
        let (map, zero) = planted_case(case, grid, patch);
        assert!(!zero);
        assert_eq!(map[patch], 1.0, "case {case}");
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn unconnected_target_gives_a_zero_map() {
    let (map, zero) = gradcam_with((2, 2), |tape| {
        let act = tape.leaf(tensor(&[4, 3], 1, 1.0));
        let other = tape.leaf(tensor(&[2], 2, 1.0));
        Ok((act, other.sum()))
    })
    .unwrap();
    assert!(zero);
    assert_eq!(map, vec![0.0; 4]);
}

#[test]
fn model_saliency_is_a_normalized_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let cfg = fit_config(&tiny_train(1), &data);
    let model = Model::new(&cfg.model, 2).unwrap();
    for s in data.test.samples.iter().take(4) {
        let map = gradcam(&model, s, &data.vocab, Target::Predicted).unwrap();
        assert_eq!((map.grid_h, map.grid_w, map.values.len()), (2, 2, 4));
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.values.contains(&1.0) || map.values.iter().all(|&v| v == 0.0));
        let fixed = gradcam(&model, s, &data.vocab, Target::Class(1)).unwrap();
        assert_eq!(fixed.target_class, 1);
    }
    let s = &data.test.samples[0];
    assert!(gradcam(&model, s, &data.vocab, Target::Class(999)).is_err());
}

#[test]
fn linear_parameter_formula() {
    for (d, c) in [(32, 2), (8, 11), (1, 1)] {
        assert_eq!(flops::linear(1, d, c, true).params, d * c + c);
    }
}

#[test]
fn cmm_stream_is_linear_and_attention_scores_are_quadratic() {
    let cfg = ModelConfig::default();
    for l in [8, 16, 32] {
        assert_eq!(cmm_stream(&cfg, 2 * l).flops, 2 * cmm_stream(&cfg, l).flops);
        assert_eq!(
            attention_score_flops(2 * l, 2 * l, 32),
            4 * attention_score_flops(l, l, 32)
        );
    }
    let f = |l| cmm_stack(&cfg, l, l).flops;
    let r = |l| reference_attention_stack(32, l, l, cfg.cmm_blocks).flops;
    assert_eq!(f(32) - f(16), 2 * (f(16) - f(8)));
    assert!(r(32) - r(16) > 2 * (r(16) - r(8)));
    assert!(cmm_stack(&cfg, 32, 24).params < reference_attention_stack(32, 32, 24, cfg.cmm_blocks).params);
}

#[test]
fn query_former_count_matches_hand_enumeration() {
    let cfg = ModelConfig::default();
    let d = cfg.d_model;
    let attention = 4 * d * d + 3 * d;
    let ffn = d * 2 * d + 2 * d + 2 * d * d + d;
    let layer = 4 * 2 * d + 2 * attention + ffn;
    let hand = cfg.n_queries * d + cfg.qformer_layers * layer;
    assert_eq!(flops::qqformer(&cfg).params, hand);
    let model = Model::new(&cfg, 0).unwrap();
    assert_eq!(model.store.numel_with_prefix("qq."), hand);
    let report = flops::count_params_flops(&cfg).unwrap();
    assert_eq!(report.params, model.num_params());
    assert!(report.peak_bytes > 0);
}

#[test]
fn parameter_counts_match_the_built_model_under_every_toggle() {
    for t in vqa_core::harness::experiments::ablation_settings() {
        let cfg = ModelConfig {
            toggles: t,
            ..tiny_config()
        };
        let counted: usize = flops::module_counts(&cfg).iter().map(|(_, c)| c.params).sum();
        assert_eq!(counted, Model::new(&cfg, 0).unwrap().num_params(), "{}", t.label());
    }
}

#[test]
fn training_is_bit_for_bit_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let a = train(&tiny_train(2), &data, &TrainOptions::default()).unwrap();
    let b = train(&tiny_train(2), &data, &TrainOptions::default()).unwrap();
    let (ta, tb) = (a.report.total_trace(), b.report.total_trace());
    assert_eq!(ta.len(), 12);
    assert!(ta.iter().zip(&tb).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.report.epochs.last().unwrap().val, b.report.epochs.last().unwrap().val);
}

#[test]
fn checkpoint_round_trip_keeps_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let path = dir.path().join("ck/best.ckpt");
    let opts = TrainOptions {
        checkpoint: Some(path.clone()),
        ..Default::default()
    };
    let out = train(&tiny_train(2), &data, &opts).unwrap();
    let before = evaluate(&out.model, &data.test.samples, &data.vocab, ExecMode::Sequential).unwrap();
    let ck = checkpoint::load_for(&path, &out.config.model).unwrap();
    assert_eq!(ck.config, out.config);
    assert_eq!(ck.answers, data.answers);
    let after = evaluate(&ck.model, &data.test.samples, &data.vocab, ExecMode::Sequential).unwrap();
    assert_eq!(before, after);

    let wider = ModelConfig {
        d_model: 12,
        ..out.config.model.clone()
    };
    assert!(matches!(
        checkpoint::load_for(&path, &wider),
        Err(Error::CheckpointMismatch { .. })
    ));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(checkpoint::decode(&bytes, &path).is_err());
    assert!(checkpoint::decode(&bytes[..20], &path).is_err());
}

#[test]
fn zero_weights_train_the_classifier_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        ..fit_config(&tiny_train(1), &data)
    };
    let out = train(&cfg, &data, &TrainOptions::default()).unwrap();
    for s in &out.report.steps {
        assert_eq!(s.total, s.l_cls);
        assert!(s.l_vtc > 0.0);
    }
    assert!(out.report.steps.iter().any(|s| s.l_aux > 0.0));
}

#[test]
fn non_finite_loss_names_the_step_and_term() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let cfg = fit_config(&tiny_train(1), &data);
    let mut model = Model::new(&cfg.model, 0).unwrap();
    model.store.by_name_mut("cls.fc2.b").data_mut()[0] = f64::NAN;
    let mut opt = AdamW::new(&model.store, 1e-3, 0.9, 0.999, 1e-8, 0.01);
    let refs: Vec<&VqaSample> = data.train.samples.iter().take(4).collect();
    let batch = Batch::new(&refs, &data.vocab, &cfg.model).unwrap();
    let err = train_step(&mut model, &mut opt, &batch, LossWeights::default(), cfg.precision, 17).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 17, term: "cls" }), "{err}");
}

#[test]
fn answer_head_leaves_closed_gradients_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = data(dir.path());
    let base = fit_config(&tiny_train(1), &data).model;
    let with = Model::new(&base, 6).unwrap();
    let without = Model::new(
        &ModelConfig {
            toggles: Toggles {
                ahead: false,
                ..Toggles::ALL
            },
            ..base.clone()
        },
        6,
    )
    .unwrap();
    let refs: Vec<&VqaSample> = data.train.samples.iter().filter(|s| !s.is_open).take(5).collect();
    let batch = Batch::new(&refs, &data.vocab, &base).unwrap();
    let grads = |m: &Model| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &m.store);
        let fwd = m.forward(&cx, &batch).unwrap();
        let l = m.losses(&cx, &fwd, &batch, LossWeights::default()).unwrap();
        let g = cx.param_grads(&tape.backward(l.total).unwrap());
        m.store
            .names()
            .iter()
            .cloned()
            .zip(g)
            .collect::<Vec<(String, Tensor)>>()
    };
    let gw = grads(&with);
    let go = grads(&without);
    let mut shared = 0;
    for (name, g) in &go {
        let other = &gw.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(g, other, "{name}");
        shared += 1;
    }
    assert_eq!(shared, without.store.len());
    assert!(gw
        .iter()
        .filter(|(n, _)| n.starts_with("dec."))
        .all(|(_, g)| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn parallel_and_sequential_predictions_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 16, 8, 2);
    let cfg = fit_config(&tiny_train(1), &data);
    let model = Model::new(&cfg.model, 1).unwrap();
    let a = predict(&model, &data.test.samples, &data.vocab, ExecMode::Sequential).unwrap();
    let b = predict(&model, &data.test.samples, &data.vocab, ExecMode::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradient_suite_passes_on_a_few_seeds() {
    let rows = run_suite(&[0, 1], ExecMode::Sequential).unwrap();
    assert_eq!(rows.len(), CHECKS.len());
    for r in &rows {
        assert!(r.passes(), "{} {}", r.name, r.max_rel_err);
        assert!(r.checked > 0);
    }
}

proptest! {
    #[test]
    fn overall_accuracy_is_the_count_weighted_mean(flags in proptest::collection::vec((any::<bool>(), 0usize..3, 0usize..3), 1..40)) {
        let samples: Vec<VqaSample> = flags.iter().map(|&(o, c, _)| sample(o, c)).collect();
        let m = MetricsReport::from_predictions(&samples, flags.iter().map(|f| f.2).collect());
        let weighted = m.acc_open().unwrap_or(0.0) * m.n_open as f64 + m.acc_closed().unwrap_or(0.0) * m.n_closed as f64;
        prop_assert!((m.acc_overall() - weighted / m.total() as f64).abs() < 1e-12);
        prop_assert_eq!(m.acc_overall(), (m.correct_open + m.correct_closed) as f64 / samples.len() as f64);
        prop_assert!((0.0..=1.0).contains(&m.acc_overall()));
    }
}
