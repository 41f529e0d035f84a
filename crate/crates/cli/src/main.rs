//! `gsp`: ingest volumes, pretrain the synthesis generator, augment,
//! fine-tune the classifier and report, one stage per command.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use gsp_core::config::{resolve_data_path, ExperimentConfig};
use gsp_core::data::io::{list_volumes, read_manifest, read_volume, write_json, write_manifest, write_volume};
use gsp_core::data::phantom::{phantom_cohort, PhantomSpec};
use gsp_core::data::{
    build_augmented, count_table, ingest_volumes, split_dataset, ClassLabel, IngestOptions, Sequence,
};
use gsp_core::models::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, Classifier, Generator};
use gsp_core::training::{
    build_pairs, evaluate_classifier, evaluate_synthesis, run_finetune, run_pretrain, FinetuneConfig,
    GeneratorSynthesizer, PretrainConfig, RunLog,
};
use gsp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "gsp", version, about = "Generative self-supervised pretraining for MRI tumor classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select and normalize slices from volume containers, then split train/test.
    Ingest {
        #[arg(long)]
        volumes: Option<PathBuf>,
        /// Output directory for train.json, test.json and slices/.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tumor_k: Option<usize>,
        #[arg(long)]
        healthy_k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the generator and discriminator on paired sequences.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for generator.gspckpt and the run log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Append generator-synthesized target slices for tumor classes.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for augmented.json and slices/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the classifier, from a pretrained checkpoint or `fresh`.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: String,
        /// Output directory for classifier.gspckpt and the run log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a run log.
    Report {
        #[arg(long)]
        runlog: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Write synthetic multi-sequence phantom volumes.
    Phantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Synth,
    Classify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Tensor(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        4 => "numeric",
        _ => "data",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({"error": kind(&e), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            volumes,
            out,
            config,
            tumor_k,
            healthy_k,
            seed,
        } => ingest(volumes, &out, config.as_deref(), tumor_k, healthy_k, seed),
        Command::Pretrain {
            config,
            out,
            seed,
            resume,
        } => pretrain(&config, &out, seed, resume.as_deref()),
        Command::Synthesize { ckpt, manifest, out } => synthesize(&ckpt, &manifest, &out),
        Command::Finetune {
            config,
            init,
            out,
            seed,
            resume,
        } => finetune(&config, &init, &out, seed, resume.as_deref()),
        Command::Evaluate {
            ckpt,
            manifest,
            task,
            out,
        } => evaluate(&ckpt, &manifest, task, out.as_deref()),
        Command::Report { runlog, format } => report(&runlog, format),
        Command::Phantoms { out, per_class, seed } => phantoms(&out, per_class, seed),
    }
}

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, PathBuf)> {
    match path {
        Some(p) => {
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((ExperimentConfig::load(p)?, dir))
        }
        None => Ok((ExperimentConfig::default(), PathBuf::from("."))),
    }
}

fn data_path(cfg_value: &Option<PathBuf>, key: &str, dir: &Path) -> Result<PathBuf> {
    cfg_value
        .as_deref()
        .map(|p| resolve_data_path(p, dir))
        .ok_or_else(|| Error::config(format!("data.{key} is required for this command")))
}

fn ingest(
    volumes: Option<PathBuf>,
    out: &Path,
    config: Option<&Path>,
    tumor_k: Option<usize>,
    healthy_k: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let (cfg, dir) = load_config(config)?;
    let vol_dir = match volumes {
        Some(v) => v,
        None => data_path(&cfg.data.volumes, "volumes", &dir)?,
    };
    let opts = IngestOptions {
        tumor_slices: tumor_k.unwrap_or(cfg.data.tumor_slices),
        healthy_slices: healthy_k.unwrap_or(cfg.data.healthy_slices),
        image_size: cfg.data.image_size,
    };
    let vols = list_volumes(&vol_dir)?
        .iter()
        .map(|p| read_volume(p))
        .collect::<Result<Vec<_>>>()?;
    if vols.is_empty() {
        return Err(Error::data(format!("{}: no volume sidecars found", vol_dir.display())));
    }
    let slices = ingest_volumes(&vols, &opts)?;
    let name = vol_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let (train, test) = split_dataset(&name, slices, cfg.data.train_fraction, seed.unwrap_or(cfg.data.seed))?;
    write_manifest(out, "train.json", "slices", &train)?;
    write_manifest(out, "test.json", "slices", &test)?;
    print!("{}", count_table(&train, &test));
    Ok(())
}

fn pretrain(config: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let (mut cfg, dir) = load_config(Some(config))?;
    if let Some(s) = seed {
        cfg.pretrain.seed = s;
    }
    let train = read_manifest(&data_path(&cfg.data.train_manifest, "train_manifest", &dir)?)?;
    let test = match &cfg.data.test_manifest {
        Some(p) => Some(read_manifest(&resolve_data_path(p, &dir))?),
        None => None,
    };
    let resume = resume.map(load_checkpoint).transpose()?;
    let opts = cfg.run_options(Some(out.to_path_buf()));
    let outcome = run_pretrain(&train, test.as_ref(), &cfg.model, &cfg.pretrain, &opts, resume.as_ref())?;
    save_checkpoint(&outcome.checkpoint, &out.join("generator.gspckpt"))?;
    if let Some(r) = &outcome.report {
        write_json(&out.join("synthesis_report.json"), r)?;
        print!("{}", r.to_table());
    }
    Ok(())
}

fn stage_section<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt
        .manifest
        .config
        .get(key)
        .cloned()
        .ok_or_else(|| Error::checkpoint("manifest", format!("config has no {key} section")))?;
    serde_json::from_value(v).map_err(|e| Error::checkpoint("manifest", format!("{key}: {e}")))
}

fn max_val(ckpt: &Checkpoint) -> f64 {
    ckpt.manifest
        .config
        .pointer("/experiment/metrics/max_val")
        .and_then(|v| v.as_f64())
        .unwrap_or(1.0)
}

fn synthesize(ckpt_path: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let generator = Generator::from_checkpoint(&ckpt)?;
    let pcfg: PretrainConfig = stage_section(&ckpt, "pretrain")?;
    let mut m = read_manifest(manifest)?;
    let tumor: BTreeSet<ClassLabel> = [ClassLabel::Glioma, ClassLabel::Meningioma].into();
    let before = m.len();
    let name = m.name.clone();
    for &target in &pcfg.targets {
        let synth = GeneratorSynthesizer {
            generator: &generator,
            sources: pcfg.sources.clone(),
            target,
        };
        m = build_augmented(&m, &[], &synth, &tumor)?;
    }
    m.name = format!("{name}-augmented");
    write_manifest(out, "augmented.json", "slices", &m)?;
    println!("{} synthetic slices appended to {} records", m.len() - before, before);
    Ok(())
}

fn finetune(config: &Path, init: &str, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let (mut cfg, dir) = load_config(Some(config))?;
    if let Some(s) = seed {
        cfg.finetune.seed = s;
    }
    let train_path = match &cfg.data.finetune_train_manifest {
        Some(p) => resolve_data_path(p, &dir),
        None => data_path(&cfg.data.train_manifest, "train_manifest", &dir)?,
    };
    let train = read_manifest(&train_path)?;
    let test = read_manifest(&data_path(&cfg.data.test_manifest, "test_manifest", &dir)?)?;
    let init_params = match init {
        "fresh" => None,
        path => {
            let ck = load_checkpoint(Path::new(path))?;
            if ck.manifest.kind != CheckpointKind::Pretrain {
                return Err(Error::checkpoint("manifest", format!("{path}: --init needs a pretraining checkpoint")));
            }
            Some(ck.group(""))
        }
    };
    let resume = resume.map(load_checkpoint).transpose()?;
    let opts = cfg.run_options(Some(out.to_path_buf()));
    let outcome = run_finetune(
        &train,
        &test,
        &cfg.model,
        &cfg.finetune,
        init_params.as_ref(),
        &opts,
        resume.as_ref(),
    )?;
    save_checkpoint(&outcome.best, &out.join("classifier.gspckpt"))?;
    save_checkpoint(&outcome.last, &out.join("classifier-last.gspckpt"))?;
    write_json(&out.join("classification_report.json"), &outcome.report)?;
    let label = format!("{} (epoch {})", cfg.finetune.sequence, outcome.best_epoch);
    print!("{}", outcome.report.to_table(&label));
    Ok(())
}

fn evaluate(ckpt_path: &Path, manifest: &Path, task: Task, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let m = read_manifest(manifest)?;
    match task {
        Task::Synth => {
            let generator = Generator::from_checkpoint(&ckpt)?;
            let pcfg: PretrainConfig = stage_section(&ckpt, "pretrain")?;
            let needed: Vec<Sequence> = pcfg.sources.iter().chain(&pcfg.targets).copied().collect();
            let pairs = build_pairs(&m, &needed);
            if pairs.is_empty() {
                return Err(Error::data(format!("{}: no paired slices for {}", m.name, pcfg.task_name())));
            }
            let r = evaluate_synthesis(&generator, &pairs, &pcfg, 8, max_val(&ckpt))?;
            if let Some(p) = out {
                write_json(p, &r)?;
            }
            print!("{}", r.to_table());
        }
        Task::Classify => {
            if ckpt.manifest.kind != CheckpointKind::Classifier {
                return Err(Error::checkpoint("manifest", "classification needs a classifier checkpoint"));
            }
            let classifier = Classifier::from_checkpoint(&ckpt)?;
            let fcfg: FinetuneConfig = stage_section(&ckpt, "finetune")?;
            let r = evaluate_classifier(&classifier, &m, &fcfg)?;
            if let Some(p) = out {
                write_json(p, &r)?;
            }
            print!("{}", r.to_table(fcfg.sequence.name()));
        }
    }
    Ok(())
}

fn report(path: &Path, format: Format) -> Result<()> {
    let log = RunLog::read(path)?;
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(&log).expect("run log serializes"));
        }
        Format::Csv => print!("{}", log.to_csv()),
        Format::Table => {
            println!("{} run, seed {}, {} steps, config {}", log.kind, log.seed, log.steps.len(), &log.config_digest[..12]);
            println!("{:<10}| {:>12}| {:>12}| {:>12}", "column", "first", "last", "min");
            println!("{}", "-".repeat(52));
            for c in &log.columns {
                let v = log.column(c).unwrap_or_default();
                let (Some(first), Some(last)) = (v.first(), v.last()) else {
                    continue;
                };
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                println!("{c:<10}| {first:>12.6}| {last:>12.6}| {min:>12.6}");
            }
            if !log.evals.is_empty() {
                print!("{}", log.eval_csv());
            }
        }
    }
    Ok(())
}

fn phantoms(out: &Path, per_class: usize, seed: u64) -> Result<()> {
    let classes = [ClassLabel::NoTumor, ClassLabel::Glioma, ClassLabel::Meningioma];
    let vols = phantom_cohort(&classes, per_class, &PhantomSpec::default(), seed)?;
    for v in &vols {
        write_volume(out, &format!("{}_{}", v.case_id, v.sequence), v)?;
    }
    println!("{} volumes written to {}", vols.len(), out.display());
    Ok(())
}
