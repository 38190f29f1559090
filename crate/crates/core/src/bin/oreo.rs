//! Command-line front end: world generation, pretraining, evaluation,
//! ablation, rule extraction and gradient checks.
//!
//! Exit status is 0 on success, 2 on numerical failure and 1 otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use oreo_core::model::Model;
use oreo_core::numerics::{Checkpoint, GradCheckOptions};
use oreo_core::synth::{generate_to_dir, load_qa, Dataset, WorldSpec};
use oreo_core::train::{
    ablate, checkpoint_inverse_closure, evaluate_qa, extract_rules, grad_check, probe_batch, train_with, Drop,
    GraphContext, TrainConfig,
};
use oreo_core::OreoError;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "oreo", version, about = "Knowledge-graph reasoning language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DropArg {
    Ent,
    Rel,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into a data directory.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model and write its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hits@1 on a question file; the graph and vocabulary come from its directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long = "remove-rel")]
        remove_rel: Option<String>,
    },
    /// Train the full and an ablated objective and compare held-out Hits@1.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        drop: DropArg,
    },
    /// Average relation distributions over questions probing a removed relation.
    Paths {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rel: String,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full loss on a small batch.
    Gradcheck {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn data_dir_of(qa: &Path) -> &Path {
    qa.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn load_model(path: &Path) -> anyhow::Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((Model::from_checkpoint(&ckpt)?, ckpt))
}

fn print_json(v: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { spec, out } => {
            let spec = WorldSpec::load(&spec)?;
            let d = generate_to_dir(&spec, &out)?;
            eprintln!(
                "wrote {} entities, {} edges, {} passages, {}+{} questions to {}",
                d.kg.num_entities(),
                d.kg.num_edges(),
                d.passages.len(),
                d.qa_train.len(),
                d.qa_heldout.len(),
                out.display()
            );
        }
        Command::Pretrain { config, data, out } => {
            let cfg = TrainConfig::load(&config)?;
            let d = Dataset::load(&data)?;
            let run = train_with(&cfg, &d, |r| {
                eprintln!(
                    "step {:>6} loss {:.4} ssm {:.4} ent {:.4} rel {:.4} answer {:.4}",
                    r.step, r.loss.total, r.loss.ssm, r.loss.ent, r.loss.rel, r.loss.answer
                )
            })?;
            run.checkpoint()?.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::Eval { ckpt, qa, remove_rel } => {
            let (model, c) = load_model(&ckpt)?;
            let d = Dataset::load(data_dir_of(&qa))?;
            let items = load_qa(&qa)?;
            let mut ctx = GraphContext::new(&d.kg, checkpoint_inverse_closure(&c))?;
            if let Some(r) = &remove_rel {
                ctx = ctx.without_relation(r)?;
            }
            print_json(&evaluate_qa(&model, &items, &ctx, &d.vocab)?)?;
        }
        Command::Ablate { config, drop } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = cfg
                .data
                .clone()
                .ok_or_else(|| OreoError::Config("ablation config needs a `data` directory".into()))?;
            let d = Dataset::load(&dir)?;
            let drop = match drop {
                DropArg::Ent => Drop::Ent,
                DropArg::Rel => Drop::Rel,
                DropArg::Both => Drop::Both,
            };
            print_json(&ablate(&cfg, &d, drop)?)?;
        }
        Command::Paths { ckpt, rel, qa, out } => {
            let (model, c) = load_model(&ckpt)?;
            let d = Dataset::load(data_dir_of(&qa))?;
            let items = load_qa(&qa)?;
            let ctx = GraphContext::new(&d.kg, checkpoint_inverse_closure(&c))?.without_relation(&rel)?;
            let report = extract_rules(&model, &rel, &items, &ctx, &d.vocab)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            eprintln!("path for {rel}: {}", report.path.join(" -> "));
        }
        Command::Gradcheck { ckpt, data } => {
            let (model, c) = load_model(&ckpt)?;
            let d = Dataset::load(&data)?;
            let ctx = GraphContext::new(&d.kg, checkpoint_inverse_closure(&c))?;
            let batch = probe_batch(&model, &d, &ctx, 2, 1, 0)?;
            let report = grad_check(&model, &batch, &ctx, &GradCheckOptions::default())?;
            print_json(&report)?;
            if report.max_rel_error >= GRADCHECK_TOLERANCE {
                return Err(OreoError::Numerical(format!(
                    "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                    report.max_rel_error
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e.downcast_ref::<OreoError>().is_some_and(OreoError::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
