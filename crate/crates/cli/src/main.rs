use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use agevlm::analysis::{export_attention_heatmap, similarity_analysis};
use agevlm::data::{read_dataset, write_dataset, generate_synthetic, GeneratorConfig};
use agevlm::model::Model;
use agevlm::pipeline::{config_mismatch, evaluate, mean_padding_mass, write_metrics, write_run_manifest, RunConfig, OUT_DIR_ENV};
use agevlm::training::{load_checkpoint, train_stage, StageConfig, TrainSettings, Variant};
use agevlm::Error;

/// Desk-scale vision-language model with attention grounding guidance.
///
/// Settings come from the TOML file given with --config. A flag overrides
/// the config file. The output directory is taken from --out first, then the
/// AGEVLM_OUT_DIR environment variable, then `out_dir` in the config.
#[derive(Debug, Parser)]
#[command(name = "agevlm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Similarity,
    Heatmap,
    Padmass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    #[value(name = "age-vlm")]
    AgeVlm,
    #[value(name = "age-vlm-lm")]
    AgeVlmLm,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::AgeVlm => Variant::AgeVlm,
            VariantArg::AgeVlmLm => Variant::AgeVlmLm,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic grounded dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        guided_fraction: Option<f64>,
        #[arg(long)]
        split: Option<String>,
        /// Visual-grid rows of blank padding at top and bottom.
        #[arg(long)]
        pad_rows: Option<usize>,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
        /// Required for stage 4 only.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Start from the previous stage's checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer accuracy and attention-in-mask mass on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Checks the checkpoint's model settings against this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Similarity distributions, attention heatmaps or padding mass.
    Analyze {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Sample id for heatmaps; defaults to the first sample.
        #[arg(long)]
        sample: Option<usize>,
        /// Derangement seed for the similarity analysis.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone())
}

fn check_config(model: &Model, cfg: &RunConfig) -> Result<(), Error> {
    match config_mismatch(&cfg.model, model.config()) {
        Some(field) => Err(Error::Checkpoint {
            name: field,
            msg: "checkpoint model setting differs from the config".into(),
        }),
        None => Ok(()),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    config: Option<PathBuf>,
    seed: Option<u64>,
    count: Option<u64>,
    out: PathBuf,
    guided_fraction: Option<f64>,
    split: Option<String>,
    pad_rows: Option<usize>,
) -> CmdResult {
    let cfg = load_config(config.as_deref())?;
    let mut gen: GeneratorConfig = cfg.data.generator.clone();
    if let Some(f) = guided_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(Failure::Usage(format!("--guided-fraction {f} is not in [0, 1]")));
        }
        gen.guided_fraction = f;
    }
    if let Some(s) = split {
        gen.split = s;
    }
    if let Some(p) = pad_rows {
        gen.pad_rows = p;
    }
    let seed = seed.unwrap_or(cfg.seed);
    let count = count.map_or(cfg.data.train_count, |c| c as usize);
    let ds = generate_synthetic(seed, count, &gen)?;
    write_dataset(&ds, &out)?;
    let recorded = RunConfig {
        seed,
        ..cfg
    };
    write_run_manifest(&out, "gen-data", &recorded)?;
    let m = &ds.manifest;
    println!(
        "wrote {} samples ({} guided, split {}, seed {}, grid {}x{}) to {}",
        m.count,
        m.guided_count,
        m.split,
        m.seed,
        m.grid[0],
        m.grid[1],
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    stage: u8,
    variant: Option<VariantArg>,
    resume: bool,
    dataset: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CmdResult {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(lr) = lr {
        cfg.optimizer.lr = lr;
    }
    let variant = variant.map(Variant::from);
    let mut row = match (stage, variant) {
        (1..=3, Some(_)) => {
            return Err(Failure::Usage(format!("--variant applies to stage 4 only, not stage {stage}")))
        }
        (4, None) => return Err(Failure::Usage("stage 4 needs --variant age-vlm or age-vlm-lm".into())),
        _ => StageConfig::row(stage, variant)?,
    };
    if let Some(configured) = cfg.stages.iter().find(|s| s.stage == stage && s.variant == variant) {
        row = configured.clone();
    }
    if let Some(e) = epochs {
        row.epochs = e;
    }
    let out = resolve_out(out, &cfg);
    let data_path = dataset
        .or_else(|| row.dataset.clone())
        .unwrap_or_else(|| out.join(&cfg.data.train));
    let data = read_dataset(&data_path)?;

    let mut model = if resume {
        let previous = match stage {
            1 => return Err(Failure::Usage("--resume needs an earlier stage".into())),
            s => out.join(format!("stage{}", s - 1)),
        };
        if !previous.join("manifest.json").is_file() {
            return Err(Failure::Run(Error::Data(format!(
                "missing upstream checkpoint {}",
                previous.display()
            ))));
        }
        let model = load_checkpoint(&previous)?;
        check_config(&model, &cfg)?;
        model
    } else {
        Model::new(cfg.model.clone(), cfg.seed)?
    };
    let outcome = train_stage(
        &mut model,
        &row,
        &cfg.optimizer,
        &data,
        TrainSettings {
            seed: cfg.seed.wrapping_add(stage as u64),
            max_steps: None,
            out_dir: Some(&out),
        },
    )?;
    write_run_manifest(&out, &format!("train {}", row.label()), &cfg)?;
    let last = outcome.log.last().map(|r| &r.report);
    println!(
        "{}: {} steps, final lm_loss {:.5}, guidance_loss {:.5}, checkpoint {}",
        row.label(),
        outcome.log.len(),
        last.map_or(f64::NAN, |r| r.lm_loss),
        last.map_or(f64::NAN, |r| r.guidance_loss),
        outcome.checkpoint.as_deref().unwrap_or(Path::new("-")).display()
    );
    Ok(())
}

fn eval(checkpoint: PathBuf, dataset: PathBuf, config: Option<PathBuf>, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config.as_deref())?;
    let out = resolve_out(out, &cfg);
    let model = load_checkpoint(&checkpoint)?;
    if config.is_some() {
        check_config(&model, &cfg)?;
    }
    let data = read_dataset(&dataset)?;
    let report = evaluate(&model, &data.samples)?;
    println!("accuracy {:.4} over {} samples", report.accuracy, report.samples);
    match report.mask_mass {
        Some(m) => println!("attention mass inside mask {:.4} over {} samples", m, report.mask_samples),
        None => println!("attention mass inside mask: no samples with the queried shape present"),
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    write_metrics(&out.join("metrics.json"), &report)?;
    write_run_manifest(&out, "eval", &cfg)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    mode: Mode,
    checkpoint: PathBuf,
    dataset: PathBuf,
    sample: Option<usize>,
    seed: u64,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CmdResult {
    let cfg = load_config(config.as_deref())?;
    let out = resolve_out(out, &cfg);
    let model = load_checkpoint(&checkpoint)?;
    if config.is_some() {
        check_config(&model, &cfg)?;
    }
    let data = read_dataset(&dataset)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    match mode {
        Mode::Similarity => {
            let samples: Vec<_> = data.samples.iter().collect();
            let report = similarity_analysis(&model, &samples, seed)?;
            report.write(&out.join("similarity"))?;
            println!(
                "matched mean {:.4}, mismatched mean {:.4}, AUC {:.4}",
                report.mean_matched(),
                report.mean_mismatched(),
                report.auc
            );
        }
        Mode::Heatmap => {
            let s = match sample {
                Some(id) => data
                    .samples
                    .iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| Error::Data(format!("no sample with id {id}")))?,
                None => &data.samples[0],
            };
            let vis = model.encode_image(&s.image)?;
            let fwd = model.forward(&s.prompt, Some(&vis), true)?;
            for rec in &fwd.records {
                let stem = out.join(format!("heatmap_sample{}_layer{}", s.id, rec.layer_index));
                let export = export_attention_heatmap(rec, s.query_span, model.config().visual_grid, s.id, &stem)?;
                println!("{}", export.pgm.display());
            }
        }
        Mode::Padmass => {
            let mass = mean_padding_mass(&model, &data)?;
            write_json(
                &out.join("padmass.json"),
                &serde_json::json!({ "pad_rows": data.manifest.pad_rows, "mean_padding_mass": mass }),
            )?;
            println!("mean attention mass on padding {mass:.4}");
        }
    }
    write_run_manifest(&out, "analyze", &cfg)?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData {
            config,
            seed,
            count,
            out,
            guided_fraction,
            split,
            pad_rows,
        } => gen_data(config, seed, count, out, guided_fraction, split, pad_rows),
        Command::Train {
            config,
            stage,
            variant,
            resume,
            dataset,
            epochs,
            lr,
            seed,
            out,
        } => train(config, stage, variant, resume, dataset, epochs, lr, seed, out),
        Command::Eval {
            checkpoint,
            dataset,
            config,
            out,
        } => eval(checkpoint, dataset, config, out),
        Command::Analyze {
            mode,
            checkpoint,
            dataset,
            sample,
            seed,
            config,
            out,
        } => analyze(mode, checkpoint, dataset, sample, seed, config, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
