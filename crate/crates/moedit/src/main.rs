use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moedit::commands::{self, Ctx, ModeArg, PlanArg, StudyArg, UsageError};
use moedit::config::RunConfig;

/// Lifelong model editing lab: a tiny frozen transformer plus a
/// mixture-of-experts editing adaptor, with the full diagnostic suite.
#[derive(Parser)]
#[command(name = "moedit", version, about)]
struct Cli {
    /// TOML config file; defaults apply for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (beats MOEDIT_OUT_DIR and the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the subcommand's primary seed (corpus seed for gen,
    /// pretrain seed for pretrain, edit seed for edit, study base seed
    /// for study).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic fact world and edit records.
    Gen,
    /// Pretrain the backbone on the fact corpus and freeze it.
    Pretrain,
    /// Run an editing session over a plan.
    Edit {
        #[arg(long, value_enum, default_value = "lifelong")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "clustered")]
        plan: PlanArg,
        /// Plan JSON (required with --plan file).
        #[arg(long)]
        plan_file: Option<PathBuf>,
        /// Records JSONL override (defaults to <out>/edits.jsonl).
        #[arg(long)]
        records: Option<PathBuf>,
        /// Resume a session checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a diagnostic study.
    Study {
        #[arg(long, value_enum)]
        study: StudyArg,
        #[arg(long, value_enum, default_value = "lifelong")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "clustered")]
        plan: PlanArg,
        /// Number of trials (order study).
        #[arg(long)]
        trials: Option<usize>,
        /// Worker threads for independent trials.
        #[arg(long)]
        parallel: Option<usize>,
        /// Also render SVG plots from the CSV data.
        #[arg(long)]
        svg: bool,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print the fully-resolved configuration as TOML.
    Dump,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| commands::usage_error(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match &cli.cmd {
            Cmd::Gen => config.corpus.seed = seed,
            Cmd::Pretrain => config.pretrain.seed = seed,
            Cmd::Edit { .. } => config.edit.seed = seed,
            Cmd::Study { .. } => config.study.base_seed = seed,
            Cmd::Config { .. } => {}
        }
    }
    let out_dir = commands::resolve_out_dir(&config, cli.out.as_deref());
    let ctx = Ctx { config, out_dir };
    match cli.cmd {
        Cmd::Gen => commands::cmd_gen(&ctx),
        Cmd::Pretrain => commands::cmd_pretrain(&ctx),
        Cmd::Edit {
            mode,
            plan,
            plan_file,
            records,
            resume,
        } => commands::cmd_edit(
            &ctx,
            mode,
            plan,
            plan_file.as_deref(),
            records.as_deref(),
            resume.as_deref(),
        ),
        Cmd::Study {
            study,
            mode,
            plan,
            trials,
            parallel,
            svg,
        } => commands::cmd_study(&ctx, study, mode, plan, trials, parallel, svg),
        Cmd::Config { action } => match action {
            ConfigCmd::Dump => {
                print!("{}", commands::cmd_config_dump(&ctx.config));
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
