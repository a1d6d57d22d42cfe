use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use svfreg::checkpoint::Checkpoint;
use svfreg::field::{FieldKind, VectorField};
use svfreg::metrics::{summarize, write_eval_csv, write_stage_table, Stage};
use svfreg::synth::{read_index, write_dataset, SyntheticPair};
use svfreg::training::{evaluate_pairs, register, run_ablation_with, train_with, PreparedPair};
use svfreg::volume::{load_mask, load_volume};

use crate::config::{resolve, CliConfig, ConfigFlags, GlobalArgs};
use crate::error::{CliError, Result};
use crate::visualize::{render, MontageInputs, DEFAULT_UPSCALE};

#[derive(Parser, Debug)]
#[command(name = "svfreg", version, about = "Joint affine and deformable 3D image registration")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic volume pairs with masks and ground-truth fields.
    Synth(ConfigFlags),
    /// Train one model and evaluate it on held-out synthetic pairs.
    Train(ConfigFlags),
    /// Train the four ablation variants and write the comparison table.
    Ablate(ConfigFlags),
    /// Register one pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(ConfigFlags),
    /// Render figures of a displacement field.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, requires = "moving_mask")]
    pub fixed_mask: Option<PathBuf>,
    #[arg(long, requires = "fixed_mask")]
    pub moving_mask: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    /// Displacement field (`.volr`, three channels).
    #[arg(long)]
    pub field: PathBuf,
    /// Volumes for the intensity montage; all four or none.
    #[arg(long, requires_all = ["fixed", "m_a", "m_d"])]
    pub moving: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    pub fixed: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    pub m_a: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    pub m_d: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_UPSCALE)]
    pub upscale: usize,
}

fn required(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| CliError::invalid(vec![format!("`{key}` is required (flag --{})", key.rsplit('.').next().unwrap())]))
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.global.deterministic {
        // Read once by the GEMM backend on first use.
        std::env::set_var("MATMUL_NUM_THREADS", "1");
    }
    let g = &cli.global;
    match &cli.command {
        Command::Synth(flags) => cmd_synth(&resolve(g, flags)?),
        Command::Train(flags) => cmd_train(&resolve(g, flags)?),
        Command::Ablate(flags) => cmd_ablate(&resolve(g, flags)?),
        Command::Register(args) => cmd_register(&resolve(g, &args.flags)?, args),
        Command::Eval(flags) => cmd_eval(&resolve(g, flags)?),
        Command::Visualize(args) => {
            let cfg = resolve(g, &ConfigFlags::default())?;
            cmd_visualize(&cfg, args)
        }
    }
}

pub fn cmd_synth(cfg: &CliConfig) -> Result<()> {
    let out = &cfg.paths.out;
    let index = write_dataset(out, cfg.count, cfg.train.seed, cfg.train.network.dims, &cfg.train.synth)?;
    info!("wrote {} pairs to {}", index.pairs.len(), out.display());
    Ok(())
}

pub fn cmd_train(cfg: &CliConfig) -> Result<()> {
    let run = train_with(&cfg.train, &cfg.paths.out, Some(cfg.to_value()))?;
    for s in &run.summary {
        info!("{} {}: dice {:.4} assd {:.4} mm", run.label, s.stage, s.dice, s.assd_mm);
    }
    Ok(())
}

pub fn cmd_ablate(cfg: &CliConfig) -> Result<()> {
    let runs = run_ablation_with(&cfg.train, &cfg.paths.out, Some(cfg.to_value()))?;
    info!("ablation table covers {} variants", runs.len());
    Ok(())
}

pub fn cmd_register(cfg: &CliConfig, args: &RegisterArgs) -> Result<()> {
    let ckpt = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let fixed = load_volume(&args.fixed)?;
    let moving = load_volume(&args.moving)?;
    let masks = match (&args.fixed_mask, &args.moving_mask) {
        (Some(f), Some(m)) => Some((load_mask(f)?, load_mask(m)?)),
        _ => None,
    };
    let out = register(&fixed, &moving, masks.as_ref().map(|(f, m)| (f, m)), &ckpt, &cfg.paths.out)?;
    for r in &out.reports {
        info!("{}: dice {:.4} assd {:.4} mm", r.stage, r.dice, r.assd_mm);
    }
    Ok(())
}

pub const EVAL_SUMMARY_FILE: &str = "summary.csv";

/// Per-pair reports in `eval.csv` and the stage table in `summary.csv`.
pub fn cmd_eval(cfg: &CliConfig) -> Result<()> {
    let ckpt = required(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let data = required(&cfg.paths.dataset, "paths.dataset")?;
    let (model, ck) = Checkpoint::load(&ckpt)?;
    let index = read_index(&data)?;
    if index.dims != model.config.dims {
        return Err(svfreg::error::Error::DimMismatch(format!("dataset {} vs checkpoint {}", index.dims, model.config.dims)).into());
    }
    let pairs = index
        .pairs
        .iter()
        .map(|e| Ok(PreparedPair::from_synthetic(e.id.clone(), &SyntheticPair::load(&data, e)?)))
        .collect::<svfreg::error::Result<Vec<_>>>()?;
    let evals = evaluate_pairs(&model, &ck.params, &pairs, &Stage::ALL)?;
    let out = &cfg.paths.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_eval_csv(out.join(svfreg::training::EVAL_FILE), &evals)?;
    let label = ck.config.network.flags.label();
    write_stage_table(out.join(EVAL_SUMMARY_FILE), &[(label, summarize(&evals))])?;
    Ok(())
}

pub fn cmd_visualize(cfg: &CliConfig, args: &VisualizeArgs) -> Result<()> {
    let u = VectorField::load(&args.field, FieldKind::Displacement)?;
    let volumes = match (&args.moving, &args.fixed, &args.m_a, &args.m_d) {
        (Some(m), Some(f), Some(a), Some(d)) => Some(MontageInputs {
            moving: load_volume(m)?,
            fixed: load_volume(f)?,
            m_a: load_volume(a)?,
            m_d: load_volume(d)?,
        }),
        _ => None,
    };
    let files = render(&u, volumes.as_ref(), &cfg.paths.out, args.upscale)?;
    info!("wrote {} files to {}", files.len(), cfg.paths.out.display());
    Ok(())
}
