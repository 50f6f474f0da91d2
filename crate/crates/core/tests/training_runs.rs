mod common;

use common::synthetic_dataset;
use svbi::backbone::{build_teacher, BackboneSpec, Tail};
use svbi::codec::{CompressionModel, DecoderConfig, EncoderConfig};
use svbi::saliency::SaliencyStore;
use svbi::tensor::{Adam, AdamConfig, TensorError};
use svbi::training::{
    bpp_inversions, finetune_tail, lossless_point, parse_rd_csv, rd_csv, train_bottleneck, FinetuneConfig,
    Objective, RDPoint, TrainConfig, TrainError, RD_CSV_HEADER,
};

fn small_setup() -> (svbi::backbone::SplitModel, CompressionModel) {
    let spec = BackboneSpec {
        stage_channels: vec![8, 16, 16],
        stage_depths: vec![1, 1, 1],
        ..Default::default()
    };
    let teacher = build_teacher(&spec, 1).unwrap();
    let enc = EncoderConfig {
        hidden_channels: [8, 8],
        latent_channels: 4,
        ..Default::default()
    };
    let dec = DecoderConfig {
        latent_channels: 4,
        restoration_channels: 8,
        output_channels: 16,
        ..Default::default()
    };
    (teacher, CompressionModel::new(enc, dec, 3).unwrap())
}

fn config(objective: Objective, epochs: usize) -> TrainConfig {
    TrainConfig {
        objective,
        beta: 0.1,
        epochs,
        batch_size: 10,
        lr_start: 2e-3,
        lr_end: 1e-3,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn smoke_run_decreases_loss_and_never_reads_labels() {
    let data = synthetic_dataset(100, 1);
    let (teacher, mut model) = small_setup();
    let report = train_bottleneck(&teacher, &mut model, &data, None, &config(Objective::Hd, 2)).unwrap();
    assert_eq!(report.log.len(), 2);
    assert!(report.log[1].loss < report.log[0].loss, "{:?}", report.log);
    assert_eq!(data.label_reads(), 0);
    assert!(model.tables.is_some());
    for r in &report.log {
        assert!(r.distortion.is_finite() && r.rate_bpp > 0.0 && r.lr > 0.0);
    }
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let data = synthetic_dataset(40, 2);
    let run = || {
        let (teacher, mut model) = small_setup();
        let r = train_bottleneck(&teacher, &mut model, &data, None, &config(Objective::Hd, 2)).unwrap();
        (r.log, model.hash_hex())
    };
    assert_eq!(run(), run());
}

#[test]
fn direct_ce_reads_labels() {
    let data = synthetic_dataset(20, 3);
    let (teacher, mut model) = small_setup();
    train_bottleneck(&teacher, &mut model, &data, None, &config(Objective::DirectCe, 1)).unwrap();
    assert!(data.label_reads() > 0);
}

#[test]
fn sg_hd_needs_saliency_for_every_sample() {
    let data = synthetic_dataset(20, 4);
    let (teacher, mut model) = small_setup();
    assert!(matches!(
        train_bottleneck(&teacher, &mut model, &data, None, &config(Objective::SgHd, 1)),
        Err(TrainError::MissingSaliency)
    ));
    let partial = SaliencyStore::all_ones(&data.ids()[..10], 8, 8);
    assert!(matches!(
        train_bottleneck(&teacher, &mut model, &data, Some(&partial), &config(Objective::SgHd, 1)),
        Err(TrainError::Saliency(_))
    ));
    let full = SaliencyStore::all_ones(data.ids(), 8, 8);
    train_bottleneck(&teacher, &mut model, &data, Some(&full), &config(Objective::SgHd, 1)).unwrap();
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = synthetic_dataset(20, 5);
    let (teacher, mut model) = small_setup();
    let mut cfg = config(Objective::Hd, 1);
    cfg.beta = f64::NAN;
    match train_bottleneck(&teacher, &mut model, &data, None, &cfg) {
        Err(TrainError::NonFinite { epoch, step, batch, lr }) => {
            assert_eq!((epoch, step, batch), (0, 0, 0));
            assert_eq!(lr, cfg.lr_start);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn finetune_touches_only_the_tail() {
    let data = synthetic_dataset(30, 6);
    let (teacher, mut model) = small_setup();
    train_bottleneck(&teacher, &mut model, &data, None, &config(Objective::Hd, 1)).unwrap();
    model.freeze();
    let before = model.hash_hex();
    let mut tail: Tail = teacher.tail.clone();
    let tail_before = tail.store.to_checkpoint().hash_hex();
    let report = finetune_tail(&model, &mut tail, &data, &FinetuneConfig { epochs: 2, ..Default::default() }).unwrap();
    assert_eq!(report.compression_hash_before, before);
    assert_eq!(report.compression_hash_after, before);
    assert_eq!(model.hash_hex(), before);
    assert_ne!(tail.store.to_checkpoint().hash_hex(), tail_before);
    assert_eq!(report.epoch_losses.len(), 2);
}

#[test]
fn stepping_a_frozen_store_is_an_error() {
    let (_, mut model) = small_setup();
    model.freeze();
    let mut opt = Adam::new(&model.encoder.store, AdamConfig::default());
    assert!(matches!(opt.step(&mut model.encoder.store), Err(TensorError::FrozenParameter(_))));
}

fn point(beta: f64, bpp: f64, loss: f64) -> RDPoint {
    RDPoint {
        beta,
        bpp,
        predictive_loss: loss,
        objective: Objective::SgHd,
        seed: 2,
    }
}

#[test]
fn rd_csv_round_trip_and_selection() {
    let pts = vec![point(0.0, 4.0, 0.2), point(0.5, 2.0, 0.4), point(2.0, 1.0, 3.0)];
    let csv = rd_csv(&pts);
    assert!(csv.starts_with(&format!("{RD_CSV_HEADER}\n")));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.contains(",sg-hd,2"));
    assert_eq!(parse_rd_csv(&csv).unwrap(), pts);
    assert_eq!(lossless_point(&pts).unwrap().beta, 0.5);
    assert_eq!(bpp_inversions(&pts), 0);
    assert_eq!(bpp_inversions(&[point(1.0, 1.0, 0.0), point(0.0, 2.0, 0.0), point(2.0, 1.5, 0.0)]), 1);
    assert!(lossless_point(&[point(0.0, 1.0, 0.41)]).is_none());
}
