mod common;

use common::rand_tensor;
use proptest::prelude::*;
use svbi::backbone::{build_teacher, BackboneSpec};
use svbi::codec::{
    quantize, quantize_eval, quantize_train, CodecError, CompressionModel, Decoder, DecoderConfig,
    Encoder, EncoderConfig,
};
use svbi::nn::seeded_rng;
use svbi::tensor::{Tape, Tensor};
use svbi::training::bottlenecked_forward;

fn wide_encoder() -> EncoderConfig {
    EncoderConfig {
        latent_channels: 48,
        param_budget: None,
        ..Default::default()
    }
}

fn wide_decoder() -> DecoderConfig {
    DecoderConfig {
        latent_channels: 48,
        ..Default::default()
    }
}

#[test]
fn analysis_shape_follows_the_stride() {
    let e = Encoder::new(wide_encoder(), 0).unwrap();
    assert_eq!(e.config.total_stride(), 4);
    let z = e.analyze_tensor(&rand_tensor(&[2, 3, 32, 32], 1)).unwrap();
    assert_eq!(z.shape(), &[2, 48, 8, 8]);
    let z0 = e.analyze_tensor(&Tensor::zeros([1, 3, 32, 32])).unwrap();
    assert!(z0.data().iter().all(|v| v.is_finite()));
}

#[test]
fn indivisible_input_is_a_padding_error() {
    let e = Encoder::new(EncoderConfig::default(), 0).unwrap();
    let err = e.analyze_tensor(&rand_tensor(&[1, 3, 30, 32], 1)).unwrap_err();
    assert!(matches!(err, CodecError::Padding { height: 30, width: 32, stride: 4 }));
}

#[test]
fn eval_rounding_rule() {
    let z = Tensor::new([3], vec![0.4, 0.6, -0.5]).unwrap();
    assert_eq!(quantize_eval(&z).data(), &[0.0, 1.0, -1.0]);
}

#[test]
fn training_noise_is_bounded_and_centered() {
    let z = rand_tensor(&[100_000], 3);
    let mut rng = seeded_rng(8);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let q = quantize_train(&mut tape, zv, &mut rng).unwrap();
    let diffs: Vec<f64> = tape
        .value(q)
        .data()
        .iter()
        .zip(z.data())
        .map(|(a, b)| (a - b) as f64)
        .collect();
    assert!(diffs.iter().all(|d| d.abs() < 0.5 + 1e-6));
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    assert!(mean.abs() < 0.005, "noise mean {mean}");
}

#[test]
fn training_quantizer_passes_gradients_straight_through() {
    let mut rng = seeded_rng(1);
    let mut tape = Tape::new();
    let zv = tape.variable(rand_tensor(&[4, 5], 2));
    let q = quantize(&mut tape, zv, true, &mut rng).unwrap();
    let s = tape.sum(q);
    let g = tape.backward(s).unwrap();
    assert!(g.get(zv).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn synthesis_reproduces_the_head_shape() {
    let spec = BackboneSpec::default();
    let (c, h, w) = spec.head_output_shape(32, 32);
    let d = Decoder::new(wide_decoder(), 0).unwrap();
    let out = d.synthesize_tensor(&Tensor::zeros([1, 48, 8, 8])).unwrap();
    assert_eq!(out.shape(), &[1, c, h, w]);
    assert!(out.data().iter().all(|v| v.is_finite()));
    assert!(d.synthesize_tensor(&Tensor::zeros([1, 47, 8, 8])).is_err());
}

#[test]
fn decoder_overhead_is_reported_against_the_backbone() {
    let teacher = build_teacher(&BackboneSpec::default(), 0).unwrap();
    let d = Decoder::new(DecoderConfig::default(), 0).unwrap();
    let pct = 100.0 * d.num_params() as f64 / teacher.num_params() as f64;
    assert!(pct > 0.0 && pct < 100.0, "{pct}");
}

#[test]
fn mismatched_latent_widths_are_rejected() {
    let dec = DecoderConfig {
        latent_channels: 7,
        ..Default::default()
    };
    assert!(matches!(
        CompressionModel::new(EncoderConfig::default(), dec, 0),
        Err(CodecError::Config(_))
    ));
}

#[test]
fn unbound_model_cannot_encode() {
    let m = CompressionModel::new(EncoderConfig::default(), DecoderConfig::default(), 0).unwrap();
    assert!(matches!(
        m.encode_latent(&rand_tensor(&[1, 3, 32, 32], 0)),
        Err(CodecError::Unbound)
    ));
}

#[test]
fn bottlenecked_forward_gives_finite_logits_deterministically() {
    let teacher = build_teacher(&BackboneSpec::default(), 0).unwrap();
    let mut m = CompressionModel::new(EncoderConfig::default(), DecoderConfig::default(), 0).unwrap();
    let x = rand_tensor(&[1, 3, 32, 32], 4);
    let b = m.observed_bounds(&x).unwrap();
    m.tables = Some(
        m.prior
            .freeze_tables(&m.prior_store, &b, 16, svbi::entropy::DEFAULT_MAX_ALPHABET)
            .unwrap(),
    );
    let a = bottlenecked_forward(&teacher.tail, &m, &x).unwrap();
    assert_eq!(a.shape(), &[1, 10]);
    assert!(a.data().iter().all(|v| v.is_finite()));
    assert_eq!(a, bottlenecked_forward(&teacher.tail, &m, &x).unwrap());

    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let mut back = CompressionModel::new(EncoderConfig::default(), DecoderConfig::default(), 5).unwrap();
    back.load(dir.path()).unwrap();
    assert_eq!(back.hash_hex(), m.hash_hex());
    assert_eq!(bottlenecked_forward(&teacher.tail, &back, &x).unwrap(), a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn eval_quantization_is_idempotent(v in prop::collection::vec(-1e3f32..1e3, 1..64)) {
        let z = Tensor::new([v.len()], v).unwrap();
        let q = quantize_eval(&z);
        prop_assert_eq!(quantize_eval(&q), q.clone());
        prop_assert!(q.data().iter().zip(z.data()).all(|(a, b)| (a - b).abs() <= 0.5));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn codec_round_trip_keeps_the_head_shape(hb in 1usize..4, wb in 1usize..4, seed in 0u64..100) {
        let m = CompressionModel::new(EncoderConfig::default(), DecoderConfig::default(), seed).unwrap();
        let x = rand_tensor(&[1, 3, hb * 8, wb * 8], seed);
        let z = quantize_eval(&m.encoder.analyze_tensor(&x).unwrap());
        let h = m.decoder.synthesize_tensor(&z).unwrap();
        let spec = BackboneSpec::default();
        let (c, eh, ew) = spec.head_output_shape(hb * 8, wb * 8);
        prop_assert_eq!(h.shape(), &[1, c, eh, ew]);
    }
}
