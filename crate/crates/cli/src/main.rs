use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sda_core::augment;
use sda_core::config::{AugmenterKind, RunConfig};
use sda_core::pipeline::{self, AugmentRequest, RunLayout, SelectionMode, StageError};
use sda_core::synth;

/// Selective data augmentation for dialogue generation.
#[derive(Parser, Debug)]
#[command(name = "sda", version, about)]
struct Cli {
    /// More log output (-v debug, -vv trace). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic toy corpus and matching word vectors.
    Synth(SynthArgs),
    /// Clean, split and index a raw JSONL corpus.
    Prepare(PrepareArgs),
    /// Train the selector against both discriminators.
    Train(TrainArgs),
    /// Export selection scores for every training pair.
    Score(ScoreArgs),
    /// Augment the highest-scored fraction of the training pairs.
    Augment(AugmentArgs),
    /// Train the downstream response generator on a corpus file.
    TrainDialog(TrainDialogArgs),
    /// Decode the test set and compute the evaluation metrics.
    Evaluate(EvaluateArgs),
    /// Run every stage into the configured run directory.
    Pipeline(PipelineArgs),
    /// Augment, retrain and evaluate at several selection fractions.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run even when the output is up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    hard: usize,
    #[arg(long, default_value_t = 200)]
    copy: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    /// Dimension of the generated word vectors.
    #[arg(long, default_value_t = 16)]
    dim: usize,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Prepared corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Selector run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the selected-vs-unselected BLEU table here.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AugmenterChoice {
    Mock,
    Backtranslate,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Prepared corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    multiplier: Option<usize>,
    #[arg(long, value_enum)]
    augmenter: Option<AugmenterChoice>,
    /// Pick a uniform random subset of the same size instead.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainDialogArgs {
    /// Corpus file (original or augmented JSONL).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Downstream generator directory written by `train-dialog`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Word-vector file; embedding metrics are 0 without it.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    fractions: Vec<f64>,
    #[arg(long)]
    random: bool,
    #[arg(long)]
    force: bool,
}

fn load_config(path: Option<&Path>) -> sda_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            std::fs::create_dir_all(&a.out)?;
            let pairs = synth::toy_corpus(a.hard, a.copy, a.seed);
            synth::write_jsonl(&pairs, &a.out.join("corpus.jsonl"))?;
            synth::write_embeddings(a.dim, a.seed, &a.out.join("embeddings.txt"))?;
            println!("wrote {} pairs and word vectors to {}", pairs.len(), a.out.display());
        }
        Command::Prepare(a) => {
            let mut cfg = load_config(a.common.config.as_deref())?;
            if let Some(m) = a.max_len {
                cfg.corpus.max_len = m;
            }
            if let Some(v) = a.vocab_size {
                cfg.corpus.vocab_size = v;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let s = pipeline::prepare(&a.input, &a.out, &cfg, a.common.force)?;
            println!("train {} valid {} test {} vocabulary {}", s.train, s.valid, s.test, s.vocab);
        }
        Command::Train(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            match pipeline::train_selector(&a.corpus, &a.out, &cfg, a.common.force)? {
                Some(o) => println!("{} steps ({} discriminator), {}", o.steps, o.discriminator_steps, o.convergence.reason()),
                None => println!("selector in {} is up to date", a.out.display()),
            }
        }
        Command::Score(a) => {
            let scores = pipeline::score(&a.run, &a.out, a.force)?;
            println!("scored {} pairs", scores.len());
            if let Some(d) = a.diagnostics {
                for row in pipeline::diagnostics(&a.run, &scores, &d, a.force)? {
                    println!(
                        "{:<10} n {:>6} generation BLEU {:.4} reconstruction BLEU {:.4}",
                        row.partition, row.n, row.generation_bleu, row.reconstruction_bleu
                    );
                }
            }
        }
        Command::Augment(a) => {
            let mut cfg = load_config(a.common.config.as_deref())?;
            if let Some(f) = a.fraction {
                cfg.augmenter.fraction = f;
            }
            if let Some(m) = a.multiplier {
                cfg.augmenter.multiplier = m;
            }
            if let Some(k) = a.augmenter {
                cfg.augmenter.kind = match k {
                    AugmenterChoice::Mock => AugmenterKind::Mock,
                    AugmenterChoice::Backtranslate => AugmenterKind::Backtranslate,
                };
            }
            cfg.validate()?;
            let augmenter = augment::from_config(&cfg.augmenter)?;
            let s = pipeline::augment(
                &AugmentRequest {
                    scores: &a.scores,
                    corpus_dir: &a.corpus,
                    fraction: cfg.augmenter.fraction,
                    multiplier: cfg.augmenter.multiplier,
                    mode: if a.random { SelectionMode::Random } else { SelectionMode::Selective },
                    augmenter: augmenter.as_ref(),
                    out: &a.out,
                },
                &cfg,
                a.common.force,
            )?;
            println!("{} originals + {} variants of {} selected = {} pairs", s.originals, s.variants, s.selected, s.total);
        }
        Command::TrainDialog(a) => {
            let cfg = load_config(a.common.config.as_deref())?;
            let m = pipeline::train_dialog(&a.corpus, &a.out, &cfg, a.common.force)?;
            println!("{} pairs, {} steps, final loss {:.4}", m.pairs, m.steps, m.final_loss);
        }
        Command::Evaluate(a) => {
            let r = pipeline::evaluate(&a.run, &a.test, a.embeddings.as_deref(), &a.report, a.force)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Pipeline(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let s = pipeline::run_pipeline(&cfg, a.force)?;
            if let Some(c) = s.convergence {
                info!("selector training: {}", c.reason());
            }
            println!(
                "prepared {} training pairs; augmented corpus {} pairs; dialog steps {}; report {}",
                s.prepared.train,
                s.augmented.total,
                s.dialog.steps,
                RunLayout::new(&cfg.run_dir).report().display()
            );
        }
        Command::Sweep(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let mode = if a.random { SelectionMode::Random } else { SelectionMode::Selective };
            let rows = pipeline::run_sweep(&cfg, &a.fractions, mode, a.force)?;
            print!("{}", pipeline::sweep_csv(&rows));
            info!("wrote {}", RunLayout::new(&cfg.run_dir).sweep_csv(mode).display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<StageError>() {
        return e.source.exit_code() as u8;
    }
    if let Some(e) = err.downcast_ref::<sda_core::Error>() {
        return e.exit_code() as u8;
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
