use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longiseg::diagnostics::{diagnose_volumes, write_diagnostics, DiagnoseOptions, DEFAULT_RANK_THRESHOLD};
use longiseg::metrics::evaluate_split;
use longiseg::synth::{generate_dataset, PhantomConfig};
use longiseg::training::{finetune, pretrain, AblationRow, Budget, Checkpoint, RunOptions, TrainConfig};
use longiseg::volume::{load_volume, DatasetManifest};
use longiseg::{Error, Result};

/// Longitudinal self-supervised pretraining and segmentation finetuning.
#[derive(Debug, Parser)]
#[command(name = "longiseg", version)]
struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true, env = "LONGISEG_SEED")]
    seed: Option<u64>,
    /// Background batch-preparation threads (0 prepares inline).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal phantom dataset.
    GenData {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// `default` or `isointense`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining on longitudinal pairs.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Ablation row A..L; replaces the config's loss switches and weights.
        #[arg(long)]
        ablation: Option<AblationRow>,
    },
    /// Supervised finetuning with optional consistency regularization.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pretrained checkpoint, or `none` for random initialization.
        #[arg(long)]
        ckpt: String,
        /// `one-shot` or a fraction of the labelled training subjects.
        #[arg(long, default_value = "one-shot")]
        budget: Budget,
        #[arg(long)]
        cs_weight: Option<f64>,
    },
    /// Segment a split and write overlap and consistency metrics.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report; CSV tables are written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Covariance spectra, projection spread and similarity maps.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Second timepoint for similarity maps.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Query voxel `w,h,d`; the centre by default.
        #[arg(long, value_parser = parse_triple)]
        query: Option<[usize; 3]>,
        /// Comma-separated layers; every projected layer by default.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        /// Axial slice for the spectrum; the middle by default.
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_RANK_THRESHOLD)]
        rank_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Training configuration JSON; defaults fill missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a `last.ckpt` written by the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected w,h,d, got {s:?}"))
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_options(run: &RunArgs, workers: usize) -> RunOptions {
    RunOptions {
        workers,
        resume: run.resume.clone(),
        ..RunOptions::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, preset, out } => {
            let mut cfg = match (&config, &preset) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    serde_json::from_str(&text)?
                }
                (None, Some(name)) => PhantomConfig::preset(name)?,
                (None, None) => PhantomConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.rng_seed = s;
            }
            let m = generate_dataset(&cfg, &out)?;
            println!("{}", out.join("manifest.json").display());
            eprintln!("{} subjects", m.subjects.len());
        }
        Command::Pretrain { run, ablation } => {
            let mut cfg = train_config(run.config.as_deref(), cli.seed)?;
            if let Some(row) = ablation {
                row.apply(&mut cfg);
            }
            let manifest = DatasetManifest::load(&run.data)?;
            let o = pretrain(&cfg, &manifest, &run.out, &run_options(&run, cli.workers))?;
            println!("{}", o.best.display());
        }
        Command::Finetune {
            run,
            ckpt,
            budget,
            cs_weight,
        } => {
            let mut cfg = train_config(run.config.as_deref(), cli.seed)?;
            if let Some(w) = cs_weight {
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::Config(format!("cs-weight must be finite and non-negative, got {w}")));
                }
                cfg.weights.cs_weight = w;
                cfg.flags.use_cs = w > 0.0;
            }
            let init = (ckpt != "none").then(|| PathBuf::from(&ckpt));
            let manifest = DatasetManifest::load(&run.data)?;
            let o = finetune(&cfg, init.as_deref(), &manifest, budget, &run.out, &run_options(&run, cli.workers))?;
            println!("{}", o.best.display());
        }
        Command::Evaluate {
            ckpt,
            data,
            split,
            report,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let mut model = Checkpoint::load(&ckpt)?.segmentation_model()?;
            let r = evaluate_split(&mut model, &manifest, &split)?;
            if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            r.write(&report)?;
            if let Some(d) = r.mean_dice {
                println!("mean_dice {:.6}", d.mean);
            }
        }
        Command::Diagnose {
            ckpt,
            volume,
            key,
            query,
            layers,
            slice,
            rank_threshold,
            out,
        } => {
            let mut model = Checkpoint::load(&ckpt)?.model()?;
            let layers: BTreeSet<usize> = if layers.is_empty() {
                model
                    .heads
                    .as_ref()
                    .map(|h| h.projected_layers())
                    .unwrap_or_default()
            } else {
                layers.into_iter().collect()
            };
            let first = load_volume(&volume)?;
            let key = key.map(load_volume).transpose()?;
            let opts = DiagnoseOptions {
                layers,
                slice,
                rank_threshold,
                query,
            };
            let (report, maps) = diagnose_volumes(&mut model, first.id(), &first, key.as_ref(), &opts)?;
            write_diagnostics(&out, &report, &maps, &model, first.spacing())?;
            for (l, r) in &report.effective_rank {
                println!("L{l:02} effective_rank {r}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
