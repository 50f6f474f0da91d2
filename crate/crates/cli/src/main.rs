//! `svbi`: drives the desk experiment end to end and runs the split
//! client/server.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use svbi::backbone::evaluate_top1;
use svbi::data::{generate_synthetic, load_image_file};
use svbi::experiment::{load_compression, Experiment, ExperimentConfig};
use svbi::runtime::{serve, Client, ClientModel, ServerModel};
use svbi::training::{rd_csv, Objective};

#[derive(Parser)]
#[command(name = "svbi", version, about = "Bottleneck injection experiments and split inference")]
struct Cli {
    /// Experiment configuration (TOML). Without it, `<output-dir>/config.toml`
    /// is used when present, otherwise the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root; overrides the one in the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "hd")]
    objective: Objective,
    #[arg(long)]
    beta: f64,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the resolved configuration to `<output-dir>/config.toml`.
    Init,
    /// Render the synthetic 10-class shape set as PNG folders.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Ingest a `<class>/<image>` tree into tensors plus a manifest.
    PrepareData {
        /// Overrides `data.source`; without either a synthetic set is made.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Train the teacher classifier.
    Pretrain,
    /// Precompute training-set saliency maps from the teacher.
    Saliency,
    /// Train and evaluate one bottleneck.
    Train {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train and evaluate every grid β for one objective; prints RD CSV.
    Sweep {
        #[arg(long, default_value = "hd")]
        objective: Objective,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate all trained grid models; writes rd.csv and summary.json.
    EvalRd,
    /// Latency report for the lossless configurations and the raw baseline.
    EvalLatency {
        /// Images timed one at a time for the compute cost.
        #[arg(long, default_value_t = 50)]
        images: usize,
        /// Only print the table built from the published inputs.
        #[arg(long)]
        published_inputs: bool,
    },
    /// Host the decoder and tail of a trained model.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "127.0.0.1:7070")]
        address: String,
        /// Include logits in every response.
        #[arg(long)]
        send_logits: bool,
    },
    /// Encode one image locally and classify it on a server.
    Infer {
        /// PNG, or raw CHW `u8` planes with a `.bin` extension.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        server: String,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, &cli.output_dir) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(dir)) if dir.join("config.toml").exists() => ExperimentConfig::load(&dir.join("config.toml"))?,
        (None, dir) => ExperimentConfig::desk(dir.clone().unwrap_or_else(|| PathBuf::from("svbi-run"))),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    Ok(config)
}

fn out(line: impl AsRef<str>) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", line.as_ref());
    let _ = stdout.flush();
}

fn run(cli: Cli) -> Result<()> {
    let mut config = resolve_config(&cli)?;
    if let Command::PrepareData { source: Some(s) } = &cli.command {
        config.data.source = Some(s.clone());
    }
    eprintln!("config {} seed {}", config.hash(), config.seed);
    if let Command::SynthData { out: dir, per_class, seed } = &cli.command {
        let n = generate_synthetic(dir, *per_class, *seed)?;
        out(format!("wrote {n} images to {}", dir.display()));
        return Ok(());
    }
    let exp = Experiment::new(config)?;
    let first_seed = exp.config.seeds[0];
    match cli.command {
        Command::Init => out(exp.root().join("config.toml").display().to_string()),
        Command::SynthData { .. } => unreachable!("handled above"),
        Command::PrepareData { .. } => {
            let m = exp.prepare()?;
            out(format!(
                "{} samples, {} classes, {}×{}; train {} ({}…), val {} ({}…)",
                m.sample_count,
                m.class_count,
                m.image_height,
                m.image_width,
                m.train_ids.len(),
                &m.train_hash[..12],
                m.val_ids.len(),
                &m.val_hash[..12]
            ));
        }
        Command::Pretrain => {
            let split = exp.split()?;
            let (_, top1) = exp.pretrain(&split)?;
            out(format!("teacher val top-1 {:.4}", top1));
        }
        Command::Saliency => {
            let split = exp.split()?;
            let store = exp.compute_saliency(&exp.teacher()?, &split)?;
            out(format!("{} maps at {}×{}", store.len(), store.height, store.width));
        }
        Command::Train { model } => {
            let split = exp.split()?;
            let teacher = exp.teacher()?;
            let top1 = evaluate_top1(&teacher, &split.val)?;
            let seed = model.seed.unwrap_or(first_seed);
            let m = exp.train(&teacher, &split, model.objective, model.beta, seed)?;
            let (point, ev) = exp.evaluate(&teacher, &split, &m, model.objective, model.beta, seed, top1)?;
            out(serde_json::to_string(&serde_json::json!({
                "point": point,
                "pipeline_top1": ev.pipeline_top1,
                "teacher_top1": ev.teacher_top1,
                "mean_payload_bytes": ev.mean_payload_bytes,
                "estimated_bpp": ev.estimated_bpp,
                "clamped_symbols": ev.clamped_symbols,
                "model_dir": exp.model_dir(model.objective, model.beta, seed),
            }))?);
        }
        Command::Sweep { objective, seed } => {
            let split = exp.split()?;
            let teacher = exp.teacher()?;
            let top1 = evaluate_top1(&teacher, &split.val)?;
            let points = exp.sweep(&teacher, &split, objective, seed.unwrap_or(first_seed), top1)?;
            print!("{}", rd_csv(&points));
        }
        Command::EvalRd => {
            let summary = exp.eval_rd()?;
            print!("{}", rd_csv(&summary.points));
            out(serde_json::to_string_pretty(&summary.objectives)?);
        }
        Command::EvalLatency { images, published_inputs } => {
            if published_inputs {
                print!("{}", svbi::runtime::latency::published_input_report().to_csv());
                return Ok(());
            }
            let (report, _) = exp.eval_latency(images)?;
            print!("{}", report.to_csv());
            for row in report.rows.iter().filter(|r| r.channel == "BLE" && r.config != "raw") {
                if let Some(s) = report.speedup("BLE", "raw", &row.config) {
                    out(format!("BLE speedup over raw for {}: {s:.2}x", row.config));
                }
            }
        }
        Command::Serve {
            model,
            address,
            send_logits,
        } => {
            let seed = model.seed.unwrap_or(first_seed);
            let m = load_compression(&exp.model_dir(model.objective, model.beta, seed))?;
            let teacher = exp.teacher()?;
            let manifest = exp.manifest()?;
            let stride = m.encoder.config.total_stride();
            let server = ServerModel {
                decoder: m.decoder.clone(),
                tail: teacher.tail.clone(),
                tables: m.tables()?.clone(),
                latent_shape: (
                    m.encoder.config.latent_channels,
                    manifest.image_height / stride,
                    manifest.image_width / stride,
                ),
                send_logits,
            };
            let handle = serve(&address, server)?;
            out(format!("listening {}", handle.addr));
            handle.wait();
        }
        Command::Infer {
            image,
            server,
            model,
            height,
            width,
            timeout_ms,
        } => {
            let seed = model.seed.unwrap_or(first_seed);
            let m = load_compression(&exp.model_dir(model.objective, model.beta, seed))?;
            let stride = m.encoder.config.total_stride();
            let x = load_image_file(&image, height, width, stride).with_context(|| format!("loading {}", image.display()))?;
            let client_model = ClientModel {
                encoder: m.encoder.clone(),
                tables: m.tables()?.clone(),
            };
            let mut client = Client::connect(&server, &client_model.tables, Duration::from_millis(timeout_ms))?;
            let outcome = client.infer(&client_model, &x)?;
            if outcome.wire_body_bytes != outcome.payload_bytes {
                bail!("wire body {} bytes, payload {}", outcome.wire_body_bytes, outcome.payload_bytes);
            }
            out(serde_json::to_string(&outcome)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
