use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use wireseg::config::{load_config, RunConfig};
use wireseg::pipeline::{self, OutputLock};
use wireseg::prompt::PromptMode;

#[derive(Parser)]
#[command(name = "wireseg", version, about = "Guidewire segmentation under sim-to-real shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; all artifacts are written below it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset root; defaults to the target test split under --out.
    #[arg(long)]
    data: Option<PathBuf>,
    /// end2end, box, point or box+point.
    #[arg(long, default_value = "end2end")]
    prompt_mode: PromptMode,
}

#[derive(Subcommand)]
enum Command {
    /// Source scenes and target train/test frames.
    Synth(Common),
    /// Target-style background pool.
    Pool(Common),
    /// Style-transferred synthesized set.
    Composite(Common),
    /// Foundation checkpoint from generic curve scenes.
    Pretrain(Common),
    TrainCoarse(Common),
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        /// Coarse checkpoint; defaults to `<out>/coarse/coarse.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    TrainFine(Common),
    Eval(EvalArgs),
    /// Write predicted masks for a dataset.
    Infer(EvalArgs),
    BaselineDirect(Common),
    /// Prompt-free model trained on pseudo-labels only.
    BaselinePseudo(Common),
    /// Every stage plus the benchmark comparisons.
    Bench(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Pool(c)
            | Command::Composite(c)
            | Command::Pretrain(c)
            | Command::TrainCoarse(c)
            | Command::TrainFine(c)
            | Command::BaselineDirect(c)
            | Command::BaselinePseudo(c)
            | Command::Bench(c) => c,
            Command::PseudoLabel { common, .. } => common,
            Command::Eval(a) | Command::Infer(a) => &a.common,
        }
    }
}

fn config(common: &Common) -> wireseg::Result<RunConfig> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: &Command, cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    match command {
        Command::Synth(_) => pipeline::stage_synth(cfg, out)?,
        Command::Pool(_) => pipeline::stage_pool(cfg, out)?,
        Command::Composite(_) => pipeline::stage_composite(cfg, out)?,
        Command::Pretrain(_) => {
            pipeline::stage_pretrain(cfg, out)?;
        }
        Command::TrainCoarse(_) => {
            pipeline::stage_train_coarse(cfg, out)?;
        }
        Command::PseudoLabel { checkpoint, .. } => pipeline::stage_pseudo_label(cfg, out, checkpoint.as_deref())?,
        Command::TrainFine(_) => {
            let m = pipeline::stage_train_fine(cfg, out)?;
            if let Some(last) = m.epochs.last() {
                print_json(&last.student_eval)?;
            }
        }
        Command::Eval(a) => {
            let report = pipeline::stage_eval(cfg, out, &a.checkpoint, a.data.as_deref(), a.prompt_mode)?;
            println!("{} ({}): {}", a.checkpoint.display(), a.prompt_mode, report.table_row());
        }
        Command::Infer(a) => {
            let data = a
                .data
                .clone()
                .unwrap_or_else(|| out.join(&cfg.data.target_test_dir));
            let n = pipeline::stage_infer(cfg, out, &a.checkpoint, &data, a.prompt_mode)?;
            println!("wrote {n} masks");
        }
        Command::BaselineDirect(_) => {
            let report = pipeline::stage_baseline_direct(cfg, out)?;
            println!("direct transfer: {}", report.table_row());
        }
        Command::BaselinePseudo(_) => {
            pipeline::stage_baseline_pseudo(cfg, out)?;
        }
        Command::Bench(_) => {
            let summary = pipeline::run_bench(cfg, out)?;
            print_json(&summary.results)?;
            for t in &summary.trends {
                println!("{} {}: {:.4} vs {:.4}", if t.pass { "PASS" } else { "FAIL" }, t.name, t.lhs, t.rhs);
            }
        }
    }
    Ok(())
}

fn error_record(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<wireseg::Error>())
        .map_or("internal", wireseg::Error::kind);
    serde_json::json!({ "error": kind, "message": format!("{err:#}") }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    let result = config(common)
        .with_context(|| format!("loading {}", common.config.display()))
        .and_then(|cfg| {
            let _lock = OutputLock::acquire(&common.out)?;
            run(&cli.command, &cfg, &common.out)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
