use std::path::PathBuf;
use std::process::ExitCode;

use autoretrieve::eval::ReportFormat;
use autoretrieve::synth::SynthConfig;
use autoretrieve_cli::{
    cmd_ablate, cmd_build_index, cmd_build_vocab, cmd_eval, cmd_synth, cmd_train, default_ablation_modes,
    load_config, load_synth_config, Baseline, CliError, EvalArgs, PathOverrides, TrainArgs,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Unsupervised dense-retriever training by distilling a question-reconstruction teacher.
#[derive(Parser)]
#[command(name = "autoretrieve", version)]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic retrieval task.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator settings as TOML (all keys optional).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the vocabulary from the passage file.
    BuildVocab(Common),
    /// Encode all passages with the initial encoder.
    BuildIndex(Common),
    /// Train the retriever.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on this many questions sampled with the run seed.
        #[arg(long)]
        train_questions_limit: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Candidate mode: topk, mix:P,N,U or inbatch[:P,N].
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a checkpoint (and optionally BM25) on a question set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Question file (default: data.dev_questions).
        #[arg(long)]
        questions: Option<PathBuf>,
        /// Graded qrels TSV (default: data.dev_qrels, else answer strings).
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Comma-separated cut-offs (default: eval.ks).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per candidate mode and compare dev accuracy.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Candidate modes (default: uniform only, positive+uniform, topk).
        #[arg(long, value_delimiter = ' ', num_args = 1..)]
        modes: Option<Vec<String>>,
        #[arg(long, value_enum, default_value_t = FormatArg::Table)]
        format: FormatArg,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    passages: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    train_questions: Option<PathBuf>,
    #[arg(long)]
    train_qrels: Option<PathBuf>,
    #[arg(long)]
    dev_questions: Option<PathBuf>,
    #[arg(long)]
    dev_qrels: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<autoretrieve::RunConfig, CliError> {
        let overrides = PathOverrides {
            run_dir: self.run_dir.clone(),
            passages: self.passages.clone(),
            vocab: self.vocab.clone(),
            index: self.index.clone(),
            train_questions: self.train_questions.clone(),
            train_qrels: self.train_qrels.clone(),
            dev_questions: self.dev_questions.clone(),
            dev_qrels: self.dev_qrels.clone(),
        };
        load_config(&self.config, &overrides, |k| std::env::var(k).ok())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Bm25,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Table => ReportFormat::Table,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, config, seed } => {
            let mut cfg = match config {
                Some(path) => load_synth_config(&path)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let paths = cmd_synth(&cfg, &out)?;
            println!("wrote {}", paths.manifest.display());
        }
        Command::BuildVocab(common) => {
            let path = cmd_build_vocab(&common.load()?)?;
            println!("wrote {}", path.display());
        }
        Command::BuildIndex(common) => {
            let path = cmd_build_index(&common.load()?)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            common,
            train_questions_limit,
            resume,
            ablation,
        } => {
            let summary = cmd_train(
                &common.load()?,
                &TrainArgs {
                    train_questions_limit,
                    resume,
                    ablation,
                },
            )?;
            println!(
                "trained to step {}; final checkpoint {}",
                summary.final_step,
                summary.final_checkpoint.display()
            );
            if let Some(best) = summary.best_step {
                println!("best dev checkpoint at step {best}");
            }
        }
        Command::Eval {
            common,
            checkpoint,
            questions,
            qrels,
            ks,
            baseline,
            format,
            out,
        } => {
            cmd_eval(
                &common.load()?,
                &EvalArgs {
                    checkpoint,
                    questions,
                    qrels,
                    ks,
                    baseline: baseline.map(|BaselineArg::Bm25| Baseline::Bm25),
                    format: format.into(),
                    out,
                },
            )?;
        }
        Command::Ablate { common, modes, format } => {
            let cfg = common.load()?;
            let modes = modes.unwrap_or_else(|| default_ablation_modes(cfg.train.k));
            cmd_ablate(&cfg, &modes, format.into())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
