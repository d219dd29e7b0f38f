use std::path::PathBuf;
use std::process::ExitCode;

use cdf_cli::commands;
use cdf_cli::config::{Overrides, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdf", version, about = "Cascaded deep factorization of speech on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Base directory for relative paths instead of the config file's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus(Common),
    /// Compute log fbank and log spectrum of every WAV in a directory.
    Featurize {
        wav_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage.
    Train {
        stage: String,
        #[command(flatten)]
        common: Common,
    },
    /// Cache the factors of one trained stage.
    Extract {
        stage: String,
        #[command(flatten)]
        common: Common,
    },
    /// Speaker identification report.
    EvalSid(Common),
    /// Emotion recognition report.
    EvalAer(Common),
    /// Reconstruct one utterance and write its spectrogram panels.
    Reconstruct {
        utt: String,
        #[command(flatten)]
        common: Common,
    },
    /// PCA projection of a stage's factors.
    Project {
        stage: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus(c) | Command::EvalSid(c) | Command::EvalAer(c) => c,
            Command::Featurize { common, .. }
            | Command::Train { common, .. }
            | Command::Extract { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Project { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
    };
    let cfg = RunConfig::load(&common.config, &overrides)?;
    match &cli.command {
        Command::GenCorpus(_) => commands::gen_corpus(&cfg).map(drop),
        Command::Featurize { wav_dir, .. } => commands::featurize(&cfg, wav_dir).map(drop),
        Command::Train { stage, .. } => commands::train(&cfg, stage).map(drop),
        Command::Extract { stage, .. } => commands::extract(&cfg, stage).map(drop),
        Command::EvalSid(_) => commands::eval_sid(&cfg).map(drop),
        Command::EvalAer(_) => commands::eval_aer(&cfg).map(drop),
        Command::Reconstruct { utt, .. } => commands::reconstruct(&cfg, utt).map(drop),
        Command::Project { stage, .. } => commands::project(&cfg, stage).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDF_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cdf_cli::exit_code(&e) as u8)
        }
    }
}
