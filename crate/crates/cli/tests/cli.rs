use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use svbi::backbone::{predict, SplitModel};
use svbi::data::load_image_file;
use svbi::experiment::{load_compression, Experiment, ExperimentConfig};
use svbi::training::{bottlenecked_forward, parse_rd_csv, Objective};

fn svbi(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svbi"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: Output) -> String {
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(o.status.success(), "command failed: {stderr}");
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn pipeline_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let mut c = ExperimentConfig::desk(&root);
    c.data.synthetic_per_class = 3;
    c.data.val_fraction = 0.34;
    c.pretrain.epochs = 1;
    c.train.epochs = 1;
    c.beta_grid = vec![0.0, 4.0];
    c.objectives = vec![Objective::Hd, Objective::SgHd];
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, c.to_toml()).unwrap();

    // nothing prepared yet: structured failure with the provenance line
    let early = svbi(&cfg, &["pretrain"]);
    assert!(!early.status.success());
    let stderr = String::from_utf8_lossy(&early.stderr);
    assert!(stderr.contains(&format!("config {} seed 1", c.hash())), "{stderr}");
    assert!(stderr.contains("error: missing artifact"), "{stderr}");

    assert!(ok(svbi(&cfg, &["prepare-data"])).contains("30 samples, 10 classes"));
    assert!(ok(svbi(&cfg, &["pretrain"])).starts_with("teacher val top-1"));
    ok(svbi(&cfg, &["saliency"]));
    let trained = ok(svbi(&cfg, &["train", "--objective", "hd", "--beta", "0"]));
    let v: serde_json::Value = serde_json::from_str(trained.trim()).unwrap();
    assert_eq!(v["point"]["beta"], 0.0);

    let sweep = ok(svbi(&cfg, &["sweep", "--objective", "sg-hd"]));
    let points = parse_rd_csv(&sweep).unwrap();
    assert_eq!(points.len(), 2);
    assert!(points.iter().all(|p| p.objective == Objective::SgHd));

    // the hd sweep is incomplete until β = 4 exists
    assert!(!svbi(&cfg, &["eval-rd"]).status.success());
    ok(svbi(&cfg, &["train", "--beta", "4"]));
    let rd = ok(svbi(&cfg, &["eval-rd"]));
    let csv: String = rd.lines().take(5).map(|l| format!("{l}\n")).collect();
    assert_eq!(parse_rd_csv(&csv).unwrap().len(), 4);

    let lat = ok(svbi(&cfg, &["eval-latency", "--images", "2"]));
    assert!(lat.starts_with("channel,transfer_ms"));
    let published = ok(svbi(&cfg, &["eval-latency", "--published-inputs"]));
    assert!(published.contains("BLE,142.5900,0.0000,17.8850,160.4750,sgfp-0.23"), "{published}");

    // split inference between two processes
    let mut server = Command::new(env!("CARGO_BIN_EXE_svbi"))
        .arg("--config")
        .arg(&cfg)
        .args(["serve", "--beta", "0", "--address", "127.0.0.1:0"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening ").expect("listening line").to_string();

    let exp = Experiment::new(c.clone()).unwrap();
    let model = load_compression(&exp.model_dir(Objective::Hd, 0.0, 1)).unwrap();
    let teacher = SplitModel::load(&exp.teacher_dir()).unwrap();
    let png = root.join("raw").join("04_ring").join("00001.png");
    let x = load_image_file(&png, 32, 32, 4).unwrap();
    let expected = predict(&bottlenecked_forward(&teacher.tail, &model, &x).unwrap())[0];

    let reply = svbi(&cfg, &["infer", "--image", png.to_str().unwrap(), "--server", &addr, "--beta", "0"]);
    let got: serde_json::Value = serde_json::from_str(ok(reply).trim()).unwrap();
    assert_eq!(got["class"], expected);
    assert_eq!(got["wire_body_bytes"], got["payload_bytes"]);
    assert!(got["timing"]["total_us"].as_u64().unwrap() >= got["timing"]["round_trip_us"].as_u64().unwrap());

    // a client holding the other model's tables is refused at the handshake
    let stale = svbi(&cfg, &["infer", "--image", png.to_str().unwrap(), "--server", &addr, "--beta", "4"]);
    assert!(!stale.status.success());
    assert!(String::from_utf8_lossy(&stale.stderr).contains("error: handshake:"));

    let refused = svbi(&cfg, &["infer", "--image", png.to_str().unwrap(), "--server", "127.0.0.1:1", "--beta", "0"]);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("error: connect:"));

    server.kill().unwrap();
    let _ = server.wait();
}

#[test]
fn synthetic_data_needs_no_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_svbi"))
        .args(["synth-data", "--per-class", "2", "--out"])
        .arg(dir.path().join("imgs"))
        .arg("--output-dir")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(ok(out).starts_with("wrote 20 images"));
    assert_eq!(std::fs::read_dir(dir.path().join("imgs")).unwrap().count(), 10);
}
