mod common;

use common::{rand_tensor, synthetic_dataset};
use proptest::prelude::*;
use svbi::backbone::{
    build_teacher, evaluate_top1, predict, pretrain_teacher, BackboneError, BackboneSpec,
    PretrainRecipe, SplitModel,
};
use svbi::tensor::Tape;

/// Independent count: 3×3 convs with bias, a 1×1 projection in the first
/// block of every stage, two convs per block, linear classifier.
fn closed_form(spec: &BackboneSpec) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
    let c = &spec.stage_channels;
    let mut n = conv(spec.input_channels, c[0], 3);
    let mut cin = c[0];
    for (s, &d) in spec.stage_depths.iter().enumerate() {
        for b in 0..d {
            n += conv(cin, c[s], 3) + conv(c[s], c[s], 3);
            if b == 0 {
                n += conv(cin, c[s], 1);
            }
            cin = c[s];
        }
    }
    n + cin * spec.num_classes + spec.num_classes
}

fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        stage_depths: vec![1, 1, 1],
        stage_channels: vec![4, 6, 8],
        num_classes: 10,
        head_split_stage: 2,
        input_channels: 3,
    }
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let spec = BackboneSpec::default();
    let m = build_teacher(&spec, 0).unwrap();
    assert_eq!(m.num_params(), closed_form(&spec));
    assert_eq!(spec.param_count(), closed_form(&spec));
    let deep = BackboneSpec {
        stage_depths: vec![2, 2, 4],
        ..spec
    };
    assert_eq!(build_teacher(&deep, 0).unwrap().num_params(), closed_form(&deep));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let a = build_teacher(&tiny_spec(), 9).unwrap();
    let b = build_teacher(&tiny_spec(), 9).unwrap();
    let c = build_teacher(&tiny_spec(), 10).unwrap();
    assert_eq!(a.head.store.to_checkpoint(), b.head.store.to_checkpoint());
    assert_eq!(a.tail.store.to_checkpoint(), b.tail.store.to_checkpoint());
    assert_ne!(a.head.store.to_checkpoint(), c.head.store.to_checkpoint());
}

#[test]
fn split_one_keeps_only_stem_and_first_stage_in_the_head() {
    let spec = BackboneSpec {
        head_split_stage: 1,
        ..BackboneSpec::default()
    };
    let m = build_teacher(&spec, 0).unwrap();
    let per = spec.params_per_stage();
    assert_eq!(m.head.store.num_scalars(), per[0].1 + per[1].1);
    assert!(m.head.store.iter().all(|p| p.name.starts_with("head.stem") || p.name.starts_with("head.stage0")));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = BackboneSpec {
        stage_channels: vec![4, 6],
        ..tiny_spec()
    };
    assert!(matches!(build_teacher(&bad, 0), Err(BackboneError::InvalidSpec(_))));
}

#[test]
fn head_output_shape_follows_stride_schedule() {
    let spec = BackboneSpec::default();
    assert_eq!(spec.head_output_shape(32, 32), (64, 8, 8));
    let m = build_teacher(&spec, 1).unwrap();
    let h = m.head_features(&rand_tensor(&[2, 3, 32, 32], 0)).unwrap();
    assert_eq!(h.shape(), &[2, 64, 8, 8]);
    let z = m.head_features(&svbi::tensor::Tensor::zeros([1, 3, 32, 32])).unwrap();
    assert!(z.data().iter().all(|v| v.is_finite()));
}

#[test]
fn head_rejects_wrong_channel_count() {
    let m = build_teacher(&tiny_spec(), 1).unwrap();
    assert!(m.head_features(&rand_tensor(&[1, 1, 16, 16], 0)).is_err());
}

#[test]
fn tail_of_head_equals_full_forward_bit_exactly() {
    let m = build_teacher(&tiny_spec(), 2).unwrap();
    for seed in 0..100 {
        let x = rand_tensor(&[1, 3, 16, 16], seed);
        let composed = m.tail.logits(&m.head_features(&x).unwrap()).unwrap();
        assert_eq!(composed, m.logits(&x).unwrap());
    }
}

#[test]
fn batched_predictions_match_per_sample_calls() {
    let m = build_teacher(&tiny_spec(), 3).unwrap();
    let x = rand_tensor(&[6, 3, 16, 16], 5);
    let batch = predict(&m.logits(&x).unwrap());
    let mut one_by_one = Vec::new();
    for i in 0..6 {
        let xi = svbi::tensor::Tensor::new(
            [1, 3, 16, 16],
            x.data()[i * 768..(i + 1) * 768].to_vec(),
        )
        .unwrap();
        one_by_one.extend(predict(&m.logits(&xi).unwrap()));
    }
    assert_eq!(batch, one_by_one);
}

#[test]
fn saliency_taps_are_named_per_stage() {
    let m = build_teacher(&tiny_spec(), 3).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&[1, 3, 16, 16], 1));
    let (_, taps) = m.forward_with_taps(&mut tape, x).unwrap();
    let names: Vec<_> = taps.iter().map(|(n, _)| n.clone()).collect();
    assert_eq!(names, m.spec.layer_names());
}

#[test]
fn pretrain_smoke_and_determinism() {
    let data = synthetic_dataset(10, 1);
    let recipe = PretrainRecipe {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    let run = || -> (SplitModel, f64) {
        let mut m = build_teacher(&tiny_spec(), 0).unwrap();
        let r = pretrain_teacher(&mut m, &data, &data, &recipe).unwrap();
        (m, r.best_top1)
    };
    let (m, acc) = run();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(evaluate_top1(&m, &data).unwrap(), evaluate_top1(&m, &data).unwrap());
    let (again, _) = run();
    assert_eq!(m.tail.store.to_checkpoint(), again.tail.store.to_checkpoint());

    let empty = data.take(0);
    let mut m = build_teacher(&tiny_spec(), 0).unwrap();
    assert!(matches!(
        pretrain_teacher(&mut m, &empty, &data, &recipe),
        Err(BackboneError::EmptyDataset)
    ));
}

#[test]
fn checkpoint_directory_round_trip() {
    let m = build_teacher(&tiny_spec(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = SplitModel::load(dir.path()).unwrap();
    let x = rand_tensor(&[2, 3, 16, 16], 3);
    assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn argmax_is_the_first_maximum(row in prop::collection::vec(-3i8..3, 1..12)) {
        let vals: Vec<f32> = row.iter().map(|&v| v as f32).collect();
        let t = svbi::tensor::Tensor::new([1, vals.len()], vals.clone()).unwrap();
        let p = predict(&t)[0];
        let max = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(vals[p], max);
        prop_assert!(vals[..p].iter().all(|&v| v < max));
    }
}
