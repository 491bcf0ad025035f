//! Command-line interface: train, eval, predict, gradcheck, ablate and
//! gen-corpus. Exit codes: 0 success, 2 parse/config error, 3 numeric-check
//! failure.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ffa::attention::RunCtx;
use ffa::checkpoint::{self, CheckpointError};
use ffa::config::{Aggregation, ConfigError, ModelConfig};
use ffa::data::{self, DataError, LabeledSequence, Vocabulary, NUM_LABELS};
use ffa::model::{FfaModel, ModelError};
use ffa::tensor::{
    finite_difference_gradient, randomize_parameters, DType, Scalar, TensorError,
};
use ffa::train::{self, TrainError};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "ffa",
    about = "Two-stream attention punctuation restorer (interaction + masked attention with fusion)",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and keep the best-validation-F1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a labeled corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Overall-row pooling: micro or macro.
        #[arg(long)]
        overall: Option<String>,
    },
    /// Punctuate plain text (one sequence per line) from a file or stdin.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences (runs in f64).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Train and score every ablation variant on shared corpora and seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Where variant checkpoints go (default: a temp directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a deterministic synthetic corpus in token<TAB>LABEL format.
    GenCorpus {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        sentences: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gradient check failed: max relative error {max:.3e} > {tol:.0e}")]
    GradcheckFailed { max: f64, tol: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::GradcheckFailed { .. } => 3,
            CliError::Config(_)
            | CliError::Data(_)
            | CliError::Checkpoint(_)
            | CliError::Io { .. } => 2,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Data(_) | TrainError::Io { .. } => 2,
                _ => 1,
            },
            CliError::Model(_) | CliError::Tensor(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train {
            config,
            train,
            valid,
            out,
            seed,
        } => {
            let mut cfg = ModelConfig::from_file(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            match cfg.dtype {
                DType::F32 => cmd_train::<f32>(&cfg, &train, &valid, &out),
                DType::F64 => cmd_train::<f64>(&cfg, &train, &valid, &out),
            }
        }
        Cmd::Eval {
            checkpoint,
            test,
            overall,
        } => {
            let agg = parse_overall(overall.as_deref())?;
            let (cfg, _) = checkpoint::read_header(&checkpoint)?;
            match cfg.dtype {
                DType::F32 => cmd_eval::<f32>(&checkpoint, &test, agg),
                DType::F64 => cmd_eval::<f64>(&checkpoint, &test, agg),
            }
        }
        Cmd::Predict { checkpoint, input } => {
            let (cfg, _) = checkpoint::read_header(&checkpoint)?;
            match cfg.dtype {
                DType::F32 => cmd_predict::<f32>(&checkpoint, input.as_deref()),
                DType::F64 => cmd_predict::<f64>(&checkpoint, input.as_deref()),
            }
        }
        Cmd::Gradcheck { config, eps } => cmd_gradcheck(&config, eps),
        Cmd::Ablate {
            config,
            train,
            valid,
            test,
            out,
        } => {
            let cfg = ModelConfig::from_file(&config)?;
            let out = out.unwrap_or_else(|| {
                std::env::temp_dir().join(format!("ffa-ablate-{}", std::process::id()))
            });
            match cfg.dtype {
                DType::F32 => cmd_ablate::<f32>(&cfg, &train, &valid, &test, &out),
                DType::F64 => cmd_ablate::<f64>(&cfg, &train, &valid, &test, &out),
            }
        }
        Cmd::GenCorpus {
            seed,
            sentences,
            out,
        } => cmd_gen_corpus(seed, sentences, &out),
    }
}

fn parse_overall(s: Option<&str>) -> Result<Option<Aggregation>, CliError> {
    match s {
        None => Ok(None),
        Some(s) => Aggregation::parse(s).map(Some).ok_or_else(|| {
            CliError::Config(ConfigError::Invalid(format!(
                "unknown aggregation {s:?} (expected micro or macro)"
            )))
        }),
    }
}

fn render_distribution(dist: &[f64; NUM_LABELS]) -> String {
    let mut out = format!(
        "{:22} {:>8} {:>8} {:>8} {:>8}\n",
        "label distribution", "O", "COMMA", "PERIOD", "QUESTION"
    );
    out.push_str(&format!(
        "{:22} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
        "this corpus", dist[0], dist[1], dist[2], dist[3]
    ));
    let r = data::IWSLT2011_TRAIN_DISTRIBUTION;
    out.push_str(&format!(
        "{:22} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
        "iwslt2011 (published)", r[0], r[1], r[2], r[3]
    ));
    out
}

fn cmd_train<T: Scalar>(
    cfg: &ModelConfig,
    train_path: &Path,
    valid_path: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let train_seqs = data::read_corpus(train_path)?;
    let valid_seqs = data::read_corpus(valid_path)?;
    if let Ok(dist) = data::class_distribution(&train_seqs) {
        print!("{}", render_distribution(&dist));
    }
    println!("config_hash\t{}", cfg.hash());
    let outcome = train::train_with_progress::<T>(cfg, &train_seqs, &valid_seqs, out_dir, |e| {
        println!("{}\t{:.6}\t{:.6}", e.epoch, e.loss, e.valid_f1);
    })?;
    println!("best_epoch\t{}", outcome.log.best_epoch);
    println!("stop_reason\t{}", outcome.log.stop_reason);
    println!(
        "best valid F1 {:.4}; checkpoint at {}",
        outcome.best_f1,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval<T: Scalar>(
    checkpoint_path: &Path,
    test_path: &Path,
    agg: Option<Aggregation>,
) -> Result<(), CliError> {
    let (cfg, vocab, model) = checkpoint::load::<T>(checkpoint_path)?;
    let agg = agg.unwrap_or(cfg.overall);
    let test_seqs = data::read_corpus(test_path)?;
    if let Ok(dist) = data::class_distribution(&test_seqs) {
        print!("{}", render_distribution(&dist));
    }
    let report = train::evaluate(&model, &vocab, &test_seqs)?;
    print!("{}", report.render(agg));
    println!("token accuracy  {:.4}", report.token_accuracy());
    Ok(())
}

fn cmd_predict<T: Scalar>(checkpoint_path: &Path, input: Option<&Path>) -> Result<(), CliError> {
    let (_, vocab, model) = checkpoint::load::<T>(checkpoint_path)?;
    let text = match input {
        Some(path) => std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?,
        None => {
            let mut buf = String::new();
            std::io::stdin()
                .read_to_string(&mut buf)
                .map_err(|source| CliError::Io {
                    path: "<stdin>".into(),
                    source,
                })?;
            buf
        }
    };
    for line in text.lines() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            println!();
            continue;
        }
        let tags = model.predict_tags(&vocab, &tokens)?;
        println!("{}", data::insert_punctuation(&tokens, &tags)?);
    }
    Ok(())
}

/// Builds the configured architecture in f64, re-draws parameters at a
/// finite-difference-friendly scale, and checks every gradient on a small
/// deterministic batch.
fn cmd_gradcheck(config_path: &Path, eps: f64) -> Result<(), CliError> {
    let mut cfg = ModelConfig::from_file(config_path)?;
    if cfg.dtype != DType::F64 {
        eprintln!(
            "note: gradcheck always runs in f64 (config says {})",
            cfg.dtype
        );
        cfg.dtype = DType::F64;
    }
    cfg.dropout = 0.0;
    let seqs = data::generate_corpus(cfg.seed, 4);
    let vocab = Vocabulary::build(&seqs, 1)?;
    cfg.vocab_size = vocab.len();
    let model: FfaModel<f64> = FfaModel::init(&cfg)?;
    let window_len = cfg.max_len.min(8);
    let windows = data::window_sequences(&seqs, &vocab, window_len, window_len)?;
    let refs: Vec<&data::Window> = windows.iter().take(2).collect();
    let batch = data::collate(&refs)?;
    let params = model.named_parameters();
    randomize_parameters(&params, cfg.seed);
    let f = || {
        let mut ctx = RunCtx::eval();
        model
            .loss(&batch, &mut ctx)
            .map_err(|e| TensorError::Invalid(e.to_string()))
    };
    let report = finite_difference_gradient(f, &params, eps)?;
    print!("{report}");
    let max = report.max_relative_error();
    println!("max relative error {max:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e}, eps {eps:.0e})");
    if max > GRADCHECK_TOLERANCE {
        return Err(CliError::GradcheckFailed {
            max,
            tol: GRADCHECK_TOLERANCE,
        });
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_ablate<T: Scalar>(
    cfg: &ModelConfig,
    train_path: &Path,
    valid_path: &Path,
    test_path: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let train_seqs = data::read_corpus(train_path)?;
    let valid_seqs = data::read_corpus(valid_path)?;
    let test_seqs = data::read_corpus(test_path)?;
    let rows = train::run_ablation::<T>(cfg, &train_seqs, &valid_seqs, &test_seqs, out_dir)?;
    print!("{}", train::render_ablation_table(&rows, cfg.overall));
    println!("variant checkpoints under {}", out_dir.display());
    Ok(())
}

fn cmd_gen_corpus(seed: u64, sentences: usize, out: &Path) -> Result<(), CliError> {
    let seqs = data::generate_corpus(seed, sentences);
    data::write_corpus(out, &seqs)?;
    let tokens: usize = seqs.iter().map(LabeledSequence::len).sum();
    println!(
        "wrote {} sequences / {tokens} tokens to {}",
        seqs.len(),
        out.display()
    );
    if let Ok(dist) = data::class_distribution(&seqs) {
        print!("{}", render_distribution(&dist));
    }
    Ok(())
}
