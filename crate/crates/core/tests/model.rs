mod common;

use mgdin::features::{FeatureBatch, FeatureSchema};
use mgdin::gradcheck::{gradcheck, random_batch, DEFAULT_STEP};
use mgdin::model::{loss, Model, ModelConfig};
use mgdin::{Error, Tape, Tensor};
use proptest::prelude::*;

fn small_config() -> (ModelConfig, FeatureSchema) {
    let schema = FeatureSchema::with_default_names(vec![5, 7, 3, 2]).unwrap();
    let config = ModelConfig {
        granularities: vec![1, 2],
        layers: 2,
        ratios: None,
        d_embed: 2,
        d_model: 4,
        d_ff: Some(8),
        head_hidden: vec![8],
        ..ModelConfig::default()
    };
    (config, schema)
}

#[test]
fn parameter_count_matches_hand_count() {
    let (config, schema) = small_config();
    let model = Model::<f64>::build(&config, &schema, 1).unwrap();
    // Embeddings: (5+7+3+2)·2 table + 2 null = 36.
    let embedding = 17 * 2 + 2;
    // Per window: projection (g·2)·4 + 4 bias, frozen Q0/K0 2·16,
    // per layer Q,K,V 3·16 + ffn 4·8+8 + 8·4+4 + two norms 2·(4+4) = 140.
    let per_layer = 3 * 16 + (32 + 8) + (32 + 4) + 16;
    let window = |g: usize| (g * 2 * 4 + 4) + 2 * 16 + 2 * per_layer;
    // Head: pooled 2·4 = 8 → 8 → 1.
    let head = (8 * 8 + 8) + (8 + 1);
    let expected = embedding + window(1) + window(2) + head;
    assert_eq!(model.params().num_scalars(), expected);
    assert_eq!(model.params().num_trainable_scalars(), expected - 2 * 2 * 16);
    let mut names: Vec<&str> = model.params().iter().map(|(_, p)| p.name.as_str()).collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total, "parameter names are unique");
}

#[test]
fn build_is_deterministic_in_seed() {
    let (config, schema) = small_config();
    let a = Model::<f64>::build(&config, &schema, 7).unwrap();
    let b = Model::<f64>::build(&config, &schema, 7).unwrap();
    let c = Model::<f64>::build(&config, &schema, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
}

#[test]
fn ablation_switches_are_plain_config() {
    let (config, schema) = small_config();
    let no_di = Model::<f64>::build(&ModelConfig { without_di: true, ..config.clone() }, &schema, 1).unwrap();
    assert!(no_di.ratios().iter().all(|&r| r == 1.0));
    let bad = ModelConfig { without_mg: true, ..config.clone() };
    assert!(matches!(Model::<f64>::build(&bad, &schema, 1), Err(Error::Config(_))));
    let single = ModelConfig { without_mg: true, granularities: vec![2], ..config };
    assert_eq!(Model::<f64>::build(&single, &schema, 1).unwrap().windows().len(), 1);
}

#[test]
fn schema_mismatch_fails_at_construction() {
    let (config, _) = small_config();
    let tiny = FeatureSchema::with_default_names(vec![3]).unwrap();
    assert!(matches!(Model::<f64>::build(&config, &tiny, 1), Err(Error::Config(_))));
}

#[test]
fn single_group_model_is_an_affine_readout_of_one_token() {
    let schema = FeatureSchema::with_default_names(vec![6, 6, 6]).unwrap();
    let config =
        ModelConfig { granularities: vec![3], head_hidden: vec![], d_model: 4, d_embed: 2, ..ModelConfig::default() };
    let model = Model::<f64>::build(&config, &schema, 3).unwrap();
    let batch = random_batch(&schema, 5, 4).unwrap();
    let mut tape = Tape::with_params(model.params());
    let out = model.forward(&mut tape, &batch).unwrap();
    let masks = &out.masks[0];
    assert_eq!(masks.m(), 1);
    for l in 1..=config.layers {
        assert!(masks.mask::<f64>(l).data().iter().all(|&v| v == 1.0));
    }
    // With no hidden head layers the logit is token · w + b.
    let tokens = tape.value(out.window_outputs[0]).clone();
    let w = model.params().value(model.head()[0].weight).data().to_vec();
    let b = model.params().value(model.head()[0].bias).data()[0];
    for (i, row) in tokens.data().chunks(4).enumerate() {
        let logit: f64 = row.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + b;
        assert!((tape.value(out.logit).data()[i] - logit).abs() < 1e-12);
    }
}

#[test]
fn di_off_matches_mask_free_reference() {
    let schema = FeatureSchema::with_default_names(vec![30, 30, 5, 5, 4, 4, 2]).unwrap();
    for combine in [mgdin::grouping::GroupCombine::Concat, mgdin::grouping::GroupCombine::Sum] {
        let config = ModelConfig {
            granularities: vec![1, 2, 3],
            without_di: true,
            d_embed: 3,
            d_model: 6,
            head_hidden: vec![5, 4],
            combine,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::build(&config, &schema, 11).unwrap();
        let batch = random_batch(&schema, 6, 12).unwrap();
        let fast = model.predict(&batch).unwrap().y_hat;
        let reference = common::reference::dense_forward(&model, &batch);
        for (a, b) in fast.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn loss_examples() {
    let mut tape = Tape::<f64>::new();
    let half = tape.leaf(Tensor::full(vec![4], 0.5), false);
    let l = loss(&mut tape, half, &[0, 1, 1, 0]).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    let exact = tape.leaf(Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap(), false);
    let l = loss(&mut tape, exact, &[1, 0]).unwrap();
    assert!(tape.value(l).data()[0] < 1e-10);

    let p = tape.leaf(Tensor::from_f64(vec![2], &[0.8, 0.3]).unwrap(), false);
    let l = loss(&mut tape, p, &[1, 0]).unwrap();
    let expected = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
    assert!((tape.value(l).data()[0] - expected).abs() < 1e-12);
    assert!((expected - 0.28990).abs() < 1e-5);
}

#[test]
fn logloss_metric_matches_training_loss() {
    let scores = [0.12, 0.87, 0.5, 0.999, 1e-15];
    let labels = [0u8, 1, 1, 0, 1];
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(Tensor::from_f64(vec![5], &scores).unwrap(), false);
    let l = loss(&mut tape, p, &labels).unwrap();
    let metric = mgdin::metrics::logloss(&scores, &labels);
    assert!((tape.value(l).data()[0] - metric).abs() < 1e-12);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (config, schema) = small_config();
    let model = Model::<f64>::build(&config, &schema, 5).unwrap();
    let batch = random_batch(&schema, 4, 6).unwrap();
    let report = gradcheck(&model, &batch, DEFAULT_STEP).unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.by_group());
    assert_eq!(report.frozen_count(), 4);
    assert!(report.nonzero_frozen().is_empty());
}

#[test]
fn tied_score_projections_train_with_layer_one() {
    let (config, schema) = small_config();
    let model = Model::<f64>::build(&ModelConfig { tie_q0: true, ..config }, &schema, 5).unwrap();
    assert!(model.params().iter().all(|(_, p)| p.trainable));
    let w = &model.windows()[0];
    assert_eq!(w.score_projections(), (w.layers[0].query, w.layers[0].key));
}

#[test]
fn ranking_is_gradient_opaque() {
    let (config, schema) = small_config();
    let model = Model::<f64>::build(&config, &schema, 9).unwrap();
    let batch = random_batch(&schema, 4, 10).unwrap();
    let masks_of = |m: &Model<f64>| {
        let mut tape = Tape::with_params(m.params());
        m.forward(&mut tape, &batch).unwrap().masks
    };
    let (_, base) = model.loss_and_grads(&batch).unwrap();
    let mut nudged = model.clone();
    let q0 = nudged.windows()[1].score_query.unwrap();
    for v in nudged.params_mut().get_mut(q0).value.data_mut() {
        *v *= 1.0 + 1e-9;
    }
    assert_eq!(masks_of(&model), masks_of(&nudged), "nudge must not change the top-k sets");
    let (_, after) = nudged.loss_and_grads(&batch).unwrap();
    for w in model.windows() {
        for lp in &w.layers {
            for id in lp.ids() {
                assert_eq!(base.get(id), after.get(id));
            }
        }
    }
}

#[test]
fn windows_share_only_the_embeddings() {
    let (config, schema) = small_config();
    let model = Model::<f64>::build(&config, &schema, 13).unwrap();
    let batch = random_batch(&schema, 3, 14).unwrap();
    let outputs = |m: &Model<f64>| {
        let mut tape = Tape::with_params(m.params());
        let out = m.forward(&mut tape, &batch).unwrap();
        out.window_outputs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    let before = outputs(&model);
    let mut changed = model.clone();
    let proj = changed.windows()[1].proj;
    for v in changed.params_mut().get_mut(proj).value.data_mut() {
        *v += 0.25;
    }
    let after = outputs(&changed);
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
}

/// Swapping neighbouring slots inside every group, together with the matching
/// row blocks of each window's shared input projection.
#[test]
fn in_group_permutation_is_invariant() {
    let schema = FeatureSchema::with_default_names(vec![9, 9, 4, 4, 3, 3, 2, 2]).unwrap();
    let config = ModelConfig {
        granularities: vec![2, 4],
        d_embed: 3,
        d_model: 6,
        head_hidden: vec![5],
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(&config, &schema, 21).unwrap();
    let batch = random_batch(&schema, 5, 22).unwrap();
    let order = vec![1, 0, 3, 2, 5, 4, 7, 6];
    let permuted_cfg = ModelConfig { feature_order: Some(order), ..config.clone() };
    let mut permuted = Model::<f64>::build(&permuted_cfg, &schema, 21).unwrap();
    for (id, p) in model.params().iter() {
        permuted.params_mut().get_mut(id).value = p.value.clone();
    }
    let d = config.d_embed;
    for w in permuted.windows().to_vec() {
        let t = &mut permuted.params_mut().get_mut(w.proj).value;
        let cols = t.shape()[1];
        let data = t.data_mut();
        for slot in (0..w.granularity).step_by(2) {
            for r in 0..d {
                for c in 0..cols {
                    data.swap((slot * d + r) * cols + c, ((slot + 1) * d + r) * cols + c);
                }
            }
        }
    }
    let a = model.predict(&batch).unwrap().y_hat;
    let b = permuted.predict(&batch).unwrap().y_hat;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn mask_storage_is_sum_of_squared_group_counts() {
    let schema = FeatureSchema::with_default_names(vec![3; 10]).unwrap();
    let config = ModelConfig {
        granularities: vec![2, 3, 10],
        d_model: 4,
        d_embed: 2,
        head_hidden: vec![],
        ..ModelConfig::default()
    };
    let model = Model::<f64>::build(&config, &schema, 1).unwrap();
    let batch = random_batch(&schema, 2, 2).unwrap();
    let mut tape = Tape::with_params(model.params());
    let out = model.forward(&mut tape, &batch).unwrap();
    let measured: usize = out.masks.iter().map(|m| m.entries_per_example()).sum();
    assert_eq!(measured, 25 + 16 + 1);
    assert_eq!(measured, model.mask_entries_per_example());
}

#[test]
fn forward_rejects_out_of_range_ids() {
    let (config, schema) = small_config();
    let model = Model::<f64>::build(&config, &schema, 1).unwrap();
    let batch = FeatureBatch::new(4, vec![5, 0, 0, 0], vec![1]).unwrap();
    assert!(matches!(model.predict(&batch), Err(Error::Data { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_stay_inside_the_unit_interval(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let (config, schema) = small_config();
        let mut model = Model::<f64>::build(&config, &schema, seed).unwrap();
        let head = model.head().last().unwrap().weight;
        for v in model.params_mut().get_mut(head).value.data_mut() {
            *v *= scale;
        }
        let batch = random_batch(&schema, 8, seed ^ 1).unwrap();
        for p in model.predict(&batch).unwrap().y_hat {
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
