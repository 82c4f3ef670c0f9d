//! `fcvsr`: dataset preparation, training, ablation, evaluation and inference.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fcvsr::checkpoint::Checkpoint;
use fcvsr::config::{Preset, RunConfig};
use fcvsr::data::{load_manifest_sequences, prepare_dataset, DatasetManifest, Degradation, DegradationMode};
use fcvsr::metrics::Report;
use fcvsr::model::{param_breakdown, param_count, Fcvsr};
use fcvsr::train::{evaluate, infer_dir, Trainer, Variant};

#[derive(Parser)]
#[command(name = "fcvsr", version, about = "Frequency-aware compressed video super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Downsample HR sequences, run the encoder and write a manifest.
    PrepareData(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Train one ablation variant (same outputs as `train`).
    Ablate(TrainArgs),
    /// Score a checkpoint on a prepared dataset.
    Eval(EvalArgs),
    /// Super-resolve a directory of LR frames.
    Infer(InferArgs),
    /// Print parameter counts per module.
    Params(ConfigArgs),
    /// Write the resolved run config as TOML.
    Config(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Model preset: fcvsr, fcvsr-s or custom.
    #[arg(long, default_value = "fcvsr")]
    preset: String,
    /// Run config file (TOML); overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation variant, e.g. no-mgaa, mask:ideal, q-sweep:16, alpha-sweep:0.5.
    #[arg(long)]
    variant: Option<String>,
    /// Multiplies schedule milestones and total epochs.
    #[arg(long)]
    schedule_scale: Option<f64>,
    /// Output file (config) or directory (train/ablate).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(RunConfig, Variant)> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::from_preset(self.preset.parse::<Preset>()?),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(s) = self.schedule_scale {
            cfg.train.schedule_scale = s;
        }
        let variant = match &self.variant {
            Some(v) => v.parse()?,
            None => Variant::Baseline,
        };
        let mut applied = cfg.clone();
        variant.apply(&mut applied);
        applied.validate()?;
        Ok((cfg, variant))
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of HR sequences, one sub-directory of PNG frames each.
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// qp, crf or none.
    #[arg(long, default_value = "none")]
    mode: String,
    /// QP or CRF value.
    #[arg(long)]
    value: Option<u32>,
    /// Shell template run per sequence: {input} and {output} are frame
    /// directories, {qp}/{crf} the configured value.
    #[arg(long)]
    encoder_cmd: Option<String>,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset manifest written by prepare-data.
    #[arg(long)]
    manifest: PathBuf,
    /// Resume from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Shell template with {reference} and {distorted} frame directories;
    /// must print a VMAF score (JSON pooled mean or a bare number).
    #[arg(long)]
    vmaf_cmd: Option<String>,
    /// Report file (JSON); printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of LR PNG frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::PrepareData(a) => prepare(a),
        Command::Train(a) => train(a, false),
        Command::Ablate(a) => train(a, true),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Params(a) => params(a),
        Command::Config(a) => write_config(a),
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let degradation = Degradation {
        mode: a.mode.parse::<DegradationMode>()?,
        value: a.value,
        encoder_cmd: a.encoder_cmd,
        scale: a.scale,
    };
    let manifest = prepare_dataset(&a.src, &a.out, &degradation, a.channels)?;
    let failed = manifest.sequences.len() - manifest.usable().count();
    log::info!(
        "{} sequences prepared, {} failed; manifest at {}",
        manifest.sequences.len() - failed,
        failed,
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<Vec<fcvsr::data::Sequence>> {
    let manifest = DatasetManifest::read(path)?;
    manifest.validate()?;
    Ok(load_manifest_sequences(&manifest, cfg.model.image_channels)?)
}

fn train(a: TrainArgs, ablate: bool) -> Result<()> {
    if ablate && a.config.variant.is_none() && a.resume.is_none() {
        bail!("ablate needs --variant");
    }
    let out = a.config.out.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
    let mut trainer = match &a.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            let data = load_data(&a.manifest, &ck.config)?;
            Trainer::from_checkpoint(ck, data)?
        }
        None => {
            let (cfg, variant) = a.config.resolve()?;
            let mut applied = cfg.clone();
            variant.apply(&mut applied);
            let data = load_data(&a.manifest, &applied)?;
            Trainer::new(cfg, &variant, data)?
        }
    };
    log::info!(
        "training variant {} from step {} to {}",
        trainer.variant,
        trainer.step,
        trainer.config.train.total_steps()
    );
    let rows = trainer.run(&out)?;
    if let Some(last) = rows.last() {
        log::info!("finished at step {} with L_all {:.5}", last.step + 1, last.l_all);
    }
    Ok(())
}

fn print_report(report: &Report) {
    println!("{:<24} {:>6} {:>9} {:>8} {:>8}", "sequence", "frames", "PSNR", "SSIM", "VMAF");
    for s in &report.sequences {
        let vmaf = s.vmaf.map_or("-".into(), |v| format!("{v:.2}"));
        println!("{:<24} {:>6} {:>9.4} {:>8.4} {:>8}", s.sequence, s.frames, s.psnr, s.ssim, vmaf);
    }
    let vmaf = report.mean_vmaf.map_or("-".into(), |v| format!("{v:.2}"));
    println!("{:<24} {:>6} {:>9.4} {:>8.4} {:>8}", "mean", report.rows.len(), report.mean_psnr, report.mean_ssim, vmaf);
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = Fcvsr::new(&ck.config.model)?;
    let data = load_data(&a.manifest, &ck.config)?;
    let report = evaluate(&model, &ck.params, &data, a.vmaf_cmd.as_deref())?;
    print_report(&report);
    if let Some(path) = a.out {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = Fcvsr::new(&ck.config.model)?;
    let written = infer_dir(&model, &ck.params, &a.frames, &a.out)?;
    log::info!("wrote {} frames to {}", written.len(), a.out.display());
    Ok(())
}

fn params(a: ConfigArgs) -> Result<()> {
    let (mut cfg, variant) = a.resolve()?;
    variant.apply(&mut cfg);
    for (module, n) in param_breakdown(&cfg.model)? {
        println!("{module:<12} {n:>10}");
    }
    println!("{:<12} {:>10}", "total", param_count(&cfg.model)?);
    Ok(())
}

fn write_config(a: ConfigArgs) -> Result<()> {
    let (mut cfg, variant) = a.resolve()?;
    variant.apply(&mut cfg);
    let text = cfg.to_toml()?;
    match a.out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
