//! `pgan` subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use pgan_core::data::{write_cache, Corpus, CorpusConfig};
use pgan_core::evaluation::{benchmark_inference, evaluate_modality_transfer};
use pgan_core::training::{load_checkpoint, TrainConfig, Trainer};

use crate::service::Model;

#[derive(Debug, Parser)]
#[command(name = "pgan", version, about = "Landmark-conditioned portrait modality translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config; an empty file trains the reference run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint; only the schedule keys may differ.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for metrics.csv and checkpoints.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Score modality 0 → 1 transfer on the held-out identities.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
    },
    /// Translate one image to a target modality under the given landmarks.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON: a list of 68 `[x, y]` pairs or an object with a `points` list.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        modality: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the auxiliary outputs here as `intermediate_K.png`.
        #[arg(long)]
        intermediates: Option<PathBuf>,
    },
    /// Write rendered corpus samples with landmark sidecars.
    Data {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        modalities: usize,
    },
    /// Serve /infer, /health and /meta over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LandmarkFile {
    Bare(Vec<[f64; 2]>),
    Object { points: Vec<[f64; 2]> },
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_landmarks(path: &Path) -> anyhow::Result<Vec<[f64; 2]>> {
    let text = read(path)?;
    let parsed: LandmarkFile = serde_json::from_slice(&text).with_context(|| {
        format!(
            "{} is not a landmark file (expected [[x, y], ...] or {{\"points\": [...]}})",
            path.display()
        )
    })?;
    Ok(match parsed {
        LandmarkFile::Bare(p) | LandmarkFile::Object { points: p } => p,
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, resume, out } => {
            let cfg = TrainConfig::load(&config)?;
            let mut trainer = match resume {
                Some(ckpt) => {
                    let (mut t, id) = load_checkpoint(&ckpt)
                        .with_context(|| format!("cannot resume from {}", ckpt.display()))?;
                    t.extend_schedule(&cfg)?;
                    log::info!("resuming checkpoint {id} at step {}", t.step_count());
                    t
                }
                None => Trainer::new(cfg)?,
            };
            let last = trainer.run(&out)?;
            println!("{}", last.display());
        }
        Command::Eval {
            ckpt,
            out,
            format,
            warmup,
            repetitions,
        } => {
            let (trainer, id) =
                load_checkpoint(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
            let pairs = trainer.corpus().heldout_pairs::<f32>()?;
            let g = trainer.generator();
            let mut report = evaluate_modality_transfer(g, &pairs, trainer.corpus().config().seed, &id)?;
            report.benchmark = Some(benchmark_inference(g, &pairs[0], warmup, repetitions)?);
            let text = match format {
                ReportFormat::Json => report.to_json()?,
                ReportFormat::Table => report.to_table(),
            };
            write(&out, text.as_bytes())?;
            println!("mse {:.5} ssim {:.5}", report.mean_mse, report.mean_ssim);
        }
        Command::Infer {
            ckpt,
            image,
            landmarks,
            modality,
            out,
            intermediates,
        } => {
            let model = Model::load(&ckpt)?;
            let png = read(&image)?;
            let points = read_landmarks(&landmarks)?;
            let r = model
                .translate_png(&png, points, modality, intermediates.is_some())
                .with_context(|| format!("cannot translate {}", image.display()))?;
            write(&out, &r.image)?;
            if let Some(dir) = intermediates {
                for (k, p) in r.intermediates.iter().enumerate() {
                    write(&dir.join(format!("intermediate_{k}.png")), p)?;
                }
            }
        }
        Command::Data {
            seed,
            count,
            out,
            size,
            modalities,
        } => {
            let corpus = Corpus::new(CorpusConfig {
                seed,
                image_size: size,
                modalities,
                ..Default::default()
            })?;
            write_cache(&corpus, count, &out).with_context(|| format!("cannot write corpus to {}", out.display()))?;
        }
        Command::Serve { ckpt, port, host } => {
            let model = Arc::new(Model::load(&ckpt)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::http::serve(model, &format!("{host}:{port}")))?;
        }
    }
    Ok(())
}

/// Exit status for `main`: 0 on success, 1 with a message otherwise.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("PGAN_LOG_LEVEL", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_secs().try_init();
}
