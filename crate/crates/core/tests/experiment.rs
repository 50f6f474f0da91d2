use std::path::Path;

use svbi::experiment::{read_payloads, write_payloads, Experiment, ExperimentConfig, ExperimentError};
use svbi::range_coder::bpp;
use svbi::training::{parse_rd_csv, Objective, RD_CSV_HEADER};

fn quick_config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(dir);
    c.data.synthetic_per_class = 4;
    c.data.val_fraction = 0.5;
    c.pretrain.epochs = 1;
    c.train.epochs = 1;
    c.beta_grid = vec![0.0, 4.0];
    c.objectives = vec![Objective::Hd, Objective::SgHd];
    c.replicate_seeds = vec![2];
    c.reattach.pretrain_epochs = 1;
    c.reattach.finetune.epochs = 1;
    c
}

#[test]
fn config_toml_round_trip_and_hash() {
    let c = ExperimentConfig::desk("/tmp/out");
    let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert_eq!(c.hash().len(), 16);
    let mut d = c.clone();
    d.beta_grid.push(64.0);
    assert_ne!(d.hash(), c.hash());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ExperimentConfig::desk("/tmp/out");
    c.beta_grid = vec![-1.0];
    assert!(matches!(c.validate(), Err(ExperimentError::Config(_))));
    let mut c = ExperimentConfig::desk("/tmp/out");
    c.seeds.clear();
    assert!(c.validate().is_err());
    assert!(ExperimentConfig::from_toml("seed = 'x'").is_err());
}

#[test]
fn stages_report_missing_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let e = Experiment::new(quick_config(dir.path())).unwrap();
    assert!(matches!(e.manifest(), Err(ExperimentError::Missing { stage: "prepare-data", .. })));
    assert!(matches!(e.teacher(), Err(ExperimentError::Missing { stage: "pretrain", .. })));
    assert!(matches!(e.saliency(), Err(ExperimentError::Missing { stage: "saliency", .. })));
    assert!(matches!(e.rd_points(), Err(ExperimentError::Missing { stage: "eval-rd", .. })));
}

#[test]
fn payload_file_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.svbp");
    write_payloads(&path, &[]).unwrap();
    assert!(read_payloads(&path).unwrap().is_empty());
    std::fs::write(&path, b"SVBP\x01\x00\x00\x00\xff").unwrap();
    assert!(read_payloads(&path).is_err());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let e = Experiment::new(quick_config(dir.path())).unwrap();
    let m = e.prepare().unwrap();
    assert_eq!(m.sample_count, 40);
    let split = e.split().unwrap();
    let (teacher, top1) = e.pretrain(&split).unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(e.teacher_dir().join("log.ndjson").exists());
    e.compute_saliency(&teacher, &split).unwrap();
    assert_eq!(e.saliency().unwrap().len(), split.train.len());

    for obj in [Objective::Hd, Objective::SgHd] {
        let pts = e.sweep(&teacher, &split, obj, 1, top1).unwrap();
        assert_eq!(pts.len(), 2);
    }
    let summary = e.eval_rd().unwrap();
    assert_eq!(summary.provenance.config_hash, e.config.hash());
    assert_eq!(summary.objectives.len(), 2);
    let csv = std::fs::read_to_string(e.rd_dir().join("rd.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(RD_CSV_HEADER));
    let points = parse_rd_csv(&csv).unwrap();
    assert_eq!(points.len(), 4);

    // bpp recomputed from the persisted payloads matches the report
    for p in &points {
        let payloads = read_payloads(&e.payload_path(p.objective, p.beta, p.seed)).unwrap();
        assert_eq!(payloads.len(), split.val.len());
        let mean: f64 = payloads
            .iter()
            .map(|q| bpp(q.len(), split.val.height, split.val.width).unwrap())
            .sum::<f64>()
            / payloads.len() as f64;
        assert!((mean - p.bpp).abs() < 1e-9, "{} vs {}", mean, p.bpp);
    }

    // training is cached: a second call loads the same model
    let a = e.train(&teacher, &split, Objective::Hd, 0.0, 1).unwrap();
    let b = e.train(&teacher, &split, Objective::Hd, 0.0, 1).unwrap();
    assert_eq!(a.hash_hex(), b.hash_hex());
    assert!(e.is_trained(Objective::Hd, 0.0, 1));
    let mut changed = e.config.clone();
    changed.train.lr_start *= 2.0;
    assert!(!Experiment::new(changed).unwrap().is_trained(Objective::Hd, 0.0, 1));

    let reps = e.replicates(&teacher, &split, 0.0, top1).unwrap();
    assert_eq!(reps.len(), 4);
    assert!(e.rd_dir().join("replicates.csv").exists());

    let re = e.reattach(&teacher, &split, &a).unwrap();
    assert_eq!(re.compression_hash_before, re.compression_hash_after);
    assert_eq!(re.compression_hash_after, a.hash_hex());

    let (report, published) = e.eval_latency(3).unwrap();
    assert_eq!(published.rows.len(), 8);
    assert!(report.rows.iter().any(|r| r.config == "raw"));
    for r in &report.rows {
        assert!((r.total_ms - (r.transfer_ms + r.client_ms + r.server_ms)).abs() < 1e-9);
    }
    assert!(e.root().join("latency").join("latency.csv").exists());

    // deleting one grid model makes eval-rd refuse
    std::fs::remove_file(e.model_dir(Objective::SgHd, 4.0, 1).join("tables.svbc")).unwrap();
    assert!(matches!(e.eval_rd(), Err(ExperimentError::Missing { stage: "train", .. })));
}
