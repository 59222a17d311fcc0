use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use rev2net::data::{gen_dataset, DatasetManifest, Domain, Split, SynthConfig};
use rev2net::flow::{flows_for_clip, TvL1Params};
use rev2net::loss::DdpMode;
use rev2net::model::Rev2Net;
use rev2net::selfcheck::{gradient_suite, CheckSettings};
use rev2net::train::{
    ablation_suite, cross_domain, evaluate, grid_search, train_variant, Dataset, Modality, RunConfig, Selection,
    FLOW_DIR,
};

/// Video action recognition with auxiliary flow and reversed-frame decoders.
///
/// Exit status: 0 on success, 1 on usage or validation errors, 2 on
/// runtime and I/O errors.
#[derive(Parser)]
#[command(name = "rev2net", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a two-domain synthetic sprite dataset.
    GenData {
        /// Clips per (class, domain) cell.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives manifest.jsonl and clips/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Compute and cache TV-L1 flow for every clip of a dataset.
    Flow {
        /// Dataset manifest file or its directory.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        lambda: f64,
        #[arg(long, default_value_t = 0.3)]
        theta: f64,
        #[arg(long, default_value_t = 5)]
        warps: usize,
        /// Inner iterations per warp.
        #[arg(long, default_value_t = 25)]
        iters: usize,
        /// Cache directory [default: <dataset>/flows].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model; writes the checkpoint, metrics.jsonl and train_report.json.
    Train {
        /// JSON run config.
        #[arg(long)]
        config: PathBuf,
        /// Decoder-discrepancy terms to use [default: the config's model.ddp_mode].
        #[arg(long, value_enum)]
        ddp: Option<DdpArg>,
    },
    /// Accuracy of a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest file or its directory.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Restrict to one domain [default: both].
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
    },
    /// Train the four decoder ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-domain transfer of RGB, flow and full models in both directions.
    Xdomain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Coarse-to-fine coordinate search over the loss weights.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every op, layer and loss term.
    Gradcheck {
        /// Floating-point precision (64 uses tolerance 1e-4, 32 uses 1e-2).
        #[arg(long, value_enum, default_value_t = Precision::P64)]
        precision: Precision,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step [default: 1e-5 at 64 bits, per-precision otherwise].
        #[arg(long)]
        step: Option<f64>,
        /// Pass threshold on max relative error [default: per precision].
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Strip decoders and Gaussian heads from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DdpArg {
    Off,
    Low,
    High,
    Both,
}

impl From<DdpArg> for DdpMode {
    fn from(d: DdpArg) -> Self {
        match d {
            DdpArg::Off => DdpMode::Off,
            DdpArg::Low => DdpMode::Low,
            DdpArg::High => DdpMode::High,
            DdpArg::Both => DdpMode::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    #[value(name = "64")]
    P64,
    #[value(name = "32")]
    P32,
}

/// Loads a run config and insists on an output directory, since every
/// experiment command writes its results there.
fn load_run(path: &Path) -> Result<RunConfig> {
    let run = RunConfig::load(path)?;
    if run.train.output_dir.is_none() {
        return Err(rev2net::Error::Config {
            field: "train.output_dir".into(),
            reason: "must be set".into(),
        }
        .into());
    }
    Ok(run)
}

/// Loads the dataset and attaches flows where the run will need them.
fn prepare(run: &RunConfig, flows_for_all: bool) -> Result<(Dataset, Selection)> {
    let (manifest, mut data) = run.load_dataset()?;
    let sel = Selection::from_config(&data, &run.train)?;
    let need: Vec<usize> = if flows_for_all {
        (0..data.samples.len()).collect()
    } else if run.train.modality == Modality::Flow {
        sel.all()
    } else if run.model.flow_decoder {
        sel.train.clone()
    } else {
        Vec::new()
    };
    run.attach_flows(&manifest, &mut data, &need)?;
    Ok((data, sel))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { n, seed, out, frames, height, width } => {
            let m = gen_dataset(n, seed, &out, SynthConfig { frames, height, width })?;
            print_json(&json!({ "manifest": m.manifest_path(), "clips": m.entries.len(), "seed": seed }))?;
        }
        Command::Flow { manifest, lambda, theta, warps, iters, out } => {
            let params = TvL1Params { lambda, theta, warps, iterations: iters, ..Default::default() };
            params.validate()?;
            let m = DatasetManifest::load(&manifest)?;
            let dir = out.unwrap_or_else(|| m.root.join(FLOW_DIR));
            for e in &m.entries {
                flows_for_clip(&m.read_clip(e)?, &params, Some(&dir))
                    .with_context(|| format!("flow for clip {}", e.clip_id))?;
            }
            print_json(&json!({ "flows": dir, "clips": m.entries.len(), "params_hash": params.hash() }))?;
        }
        Command::Train { config, ddp } => {
            let mut run = load_run(&config)?;
            if let Some(d) = ddp {
                run.model.ddp_mode = d.into();
            }
            run.validate()?;
            let (data, sel) = prepare(&run, false)?;
            let (_, report) = train_variant(&run.model, &run.train, &data, &sel)?;
            let last = report.last();
            print_json(&json!({
                "epochs": last.epoch,
                "loss": last.loss,
                "train_accuracy": last.train_accuracy,
                "test_accuracy": last.test_accuracy,
                "checkpoint": report.checkpoint,
                "wall_time_s": report.wall_time_s,
            }))?;
        }
        Command::Eval { checkpoint, manifest, split, domain } => {
            let model = Rev2Net::<f32>::load(&checkpoint)?;
            let m = DatasetManifest::load(&manifest)?;
            let mut data = Dataset::from_manifest(&m)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let domain = domain.map(|d| match d {
                DomainArg::A => Domain::A,
                DomainArg::B => Domain::B,
            });
            let modality = if model.config().input_channels == 2 { Modality::Flow } else { Modality::Rgb };
            if modality == Modality::Flow {
                // Flow-input models read the dataset's cache and never write.
                let idx = data.indices(split, domain);
                data.attach_flows(&idx, &TvL1Params::default(), Some(&m.root.join(FLOW_DIR)), None)?;
            }
            let accuracy = evaluate(&model, &data, split, domain, modality)?;
            print_json(&json!({
                "accuracy": accuracy,
                "clips": data.indices(split, domain).len(),
                "checkpoint": checkpoint,
            }))?;
        }
        Command::Ablate { config } => {
            let run = load_run(&config)?;
            let (data, sel) = prepare(&run, false)?;
            print_json(&ablation_suite(&run, &data, &sel)?)?;
        }
        Command::Xdomain { config } => {
            let run = load_run(&config)?;
            let (data, _) = prepare(&run, true)?;
            print_json(&cross_domain(&run, &data)?)?;
        }
        Command::Grid { config } => {
            let run = load_run(&config)?;
            let (data, sel) = prepare(&run, false)?;
            print_json(&grid_search(&run, &data, &sel)?)?;
        }
        Command::Gradcheck { precision, seed, step, tolerance } => {
            let base = match precision {
                Precision::P64 => CheckSettings::F64,
                Precision::P32 => CheckSettings::F32,
            };
            let settings = CheckSettings {
                step: step.unwrap_or(base.step),
                tolerance: tolerance.unwrap_or(base.tolerance),
            };
            if !(settings.step > 0.0 && settings.tolerance > 0.0) {
                return Err(rev2net::Error::InvalidInput("step and tolerance must be > 0".into()).into());
            }
            let rows = match precision {
                Precision::P64 => gradient_suite::<f64>(seed, settings)?,
                Precision::P32 => gradient_suite::<f32>(seed, settings)?,
            };
            let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
            let mut failed = 0;
            for r in &rows {
                let ok = r.passed(settings.tolerance);
                failed += usize::from(!ok);
                println!("{:<width$}  {:.3e}  {}", r.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
            }
            println!("{} checks, {failed} above tolerance {:e}", rows.len(), settings.tolerance);
            if failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Export { checkpoint, out } => {
            let model = Rev2Net::<f32>::load(&checkpoint)?;
            let exported = model.export_inference()?;
            exported.save(&out)?;
            print_json(&json!({
                "checkpoint": out,
                "params": exported.num_params(),
                "source_params": model.num_params(),
            }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Validation failures exit 1; everything else that goes wrong exits 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .any(|e| e.downcast_ref::<rev2net::Error>().is_some_and(rev2net::Error::is_validation));
    if validation {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
