mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairgrpo::config::RunConfig;
use fairgrpo::grpo::Preset;

use exit::{Failure, Outcome};

#[derive(Parser, Debug)]
#[command(name = "fairgrpo", version, about = "Fairness-oriented GRPO fine-tuning of a toy language model")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Hyperparameter preset.
    #[arg(long, global = true, value_parser = ["methods", "experiments"])]
    preset: Option<String>,
    /// Output directory; relative artifact paths resolve against it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the effective configuration as TOML.
    InitConfig {
        /// Destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate the synthetic corpus, prompt sets, and vocabulary.
    GenData {
        /// Number of corpus records.
        #[arg(long)]
        n: Option<usize>,
        /// Corpus path, overriding the configured one.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the base language model on the corpus.
    Pretrain,
    /// Train the fairness classifier and write its metrics.
    TrainClassifier,
    /// Fine-tune LoRA adapters on the base model with GRPO.
    TrainGrpo {
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Score {prompt, completion, t} lines and print reward breakdowns.
    Score {
        /// Newline-delimited JSON input; stdin when omitted or `-`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare the base and tuned models on the evaluation prompts.
    Eval {
        /// Base checkpoint, overriding the configured one.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Tuned checkpoint; defaults to the best GRPO checkpoint.
        #[arg(long)]
        tuned: Option<PathBuf>,
    },
    /// Sample completions from a checkpoint.
    Generate {
        /// Prompt text; repeatable.
        #[arg(long = "prompt")]
        prompts: Vec<String>,
        /// Prompt file in the corpus format.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Checkpoint; defaults to the best GRPO checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Outcome<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            exit::require(p, "init-config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &g.preset {
        cfg.apply_preset(Preset::parse(p).expect("clap restricts the values"));
    }
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &g.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::InitConfig { output } => commands::init_config(&cfg, output.as_deref()),
        Command::GenData { n, output } => commands::gen_data(&cfg, n, output.as_deref()),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::TrainClassifier => commands::train_classifier(&cfg),
        Command::TrainGrpo { max_steps } => commands::train_grpo(&cfg, max_steps),
        Command::Score { input, output } => commands::score(&cfg, input.as_deref(), output.as_deref()),
        Command::Eval { base, tuned } => commands::eval(&cfg, base.as_deref(), tuned.as_deref()),
        Command::Generate {
            prompts,
            input,
            model,
            output,
        } => commands::generate(&cfg, prompts, input.as_deref(), model.as_deref(), output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits with 2 on usage errors, which here means I/O
            let code = if e.use_stderr() { exit::OTHER } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
