//! Training loop with early stopping, evaluation over whole corpora, and the
//! ablation runner.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::RunCtx;
use crate::checkpoint::{self, CheckpointError};
use crate::config::{Aggregation, ConfigError, ModelConfig};
use crate::data::{self, DataError, Label, LabeledSequence, Vocabulary, Window};
use crate::metrics::{compute_metrics, MetricsError, MetricsReport};
use crate::model::{FfaModel, ModelError};
use crate::optim::{Adam, OptimError};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
    pub valid_f1: f64,
}

/// Line-oriented record of one training run: a config-hash header, one
/// `epoch<TAB>loss<TAB>valid_f1` line per epoch, then the best epoch and the
/// stop reason.
#[derive(Clone, Debug)]
pub struct TrainLog {
    pub config_hash: String,
    pub epochs: Vec<EpochStat>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn render(&self) -> String {
        let mut out = format!("config_hash\t{}\n", self.config_hash);
        for e in &self.epochs {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.loss, e.valid_f1));
        }
        out.push_str(&format!("best_epoch\t{}\n", self.best_epoch));
        out.push_str(&format!("stop_reason\t{}\n", self.stop_reason));
        out
    }
}

/// Patience counter: strict improvement resets it, `patience` consecutive
/// non-improving epochs stop the run.
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

/// Predicts every sequence and tallies metrics over all tokens.
pub fn evaluate<T: Scalar>(
    model: &FfaModel<T>,
    vocab: &Vocabulary,
    sequences: &[LabeledSequence],
) -> Result<MetricsReport, TrainError> {
    let predictions = model.predict_sequences(vocab, sequences)?;
    let mut gold: Vec<Label> = Vec::new();
    let mut predicted: Vec<Label> = Vec::new();
    for (seq, preds) in sequences.iter().zip(&predictions) {
        gold.extend_from_slice(&seq.labels);
        predicted.extend_from_slice(preds);
    }
    Ok(compute_metrics(&gold, &predicted)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoint: PathBuf,
    pub best_f1: f64,
    pub vocab: Vocabulary,
}

/// Mini-batch training with shuffling under the config seed. Validation
/// overall F1 (micro) decides the best checkpoint, which is written to
/// `out_dir/model.ckpt` on every improvement; the log goes to
/// `out_dir/train.log`.
pub fn train<T: Scalar>(
    cfg_in: &ModelConfig,
    train_seqs: &[LabeledSequence],
    valid_seqs: &[LabeledSequence],
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress::<T>(cfg_in, train_seqs, valid_seqs, out_dir, |_| {})
}

/// [`train`] with a per-epoch callback (the CLI streams log lines through it).
pub fn train_with_progress<T: Scalar>(
    cfg_in: &ModelConfig,
    train_seqs: &[LabeledSequence],
    valid_seqs: &[LabeledSequence],
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochStat),
) -> Result<TrainOutcome, TrainError> {
    if valid_seqs.is_empty() {
        return Err(TrainError::Config(ConfigError::Invalid(
            "validation set is empty".into(),
        )));
    }
    if train_seqs.is_empty() {
        return Err(TrainError::Config(ConfigError::Invalid(
            "training set is empty".into(),
        )));
    }
    fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let vocab = Vocabulary::build(train_seqs, cfg_in.min_freq)?;
    let mut cfg = cfg_in.clone();
    cfg.vocab_size = vocab.len();
    cfg.validate()?;
    let model: FfaModel<T> = FfaModel::init(&cfg)?;
    let params = model.named_parameters();
    let mut adam = Adam::new(cfg.learning_rate);

    let windows = data::window_sequences(train_seqs, &vocab, cfg.max_len, cfg.max_len)?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut ctx = RunCtx::train(cfg.seed.wrapping_add(2));

    let checkpoint_path = out_dir.join("model.ckpt");
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = data::collate(&refs)?;
            model.zero_grads();
            let loss = model.loss(&batch, &mut ctx)?;
            loss_sum += loss.item().as_f64();
            batches += 1;
            loss.backward().map_err(ModelError::Tensor)?;
            adam.step(&params)?;
        }
        let report = evaluate(&model, &vocab, valid_seqs)?;
        let valid_f1 = report.overall(Aggregation::Micro).f1;
        let stat = EpochStat {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            valid_f1,
        };
        on_epoch(&stat);
        epochs.push(stat);
        let (improved, stop) = stopper.observe(epoch, valid_f1);
        if improved {
            checkpoint::save(&checkpoint_path, &model, &vocab)?;
        }
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let log = TrainLog {
        config_hash: cfg.hash(),
        epochs,
        best_epoch: stopper.best_epoch,
        stop_reason,
    };
    let log_path = out_dir.join("train.log");
    fs::write(&log_path, log.render()).map_err(|source| TrainError::Io {
        path: log_path.display().to_string(),
        source,
    })?;
    Ok(TrainOutcome {
        log,
        checkpoint: checkpoint_path,
        best_f1: stopper.best,
        vocab,
    })
}

/// One ablation variant: its display name and the config projection that
/// produces it.
#[derive(Debug)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: MetricsReport,
    pub checkpoint: PathBuf,
}

/// Variant configs mirroring the ablation table plus the two single-stream
/// rows. Shared seed across variants.
pub fn ablation_variants(cfg: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut variants = Vec::new();
    variants.push(("FFA".to_string(), cfg.clone()));

    let mut no_interaction = cfg.clone();
    no_interaction.use_interaction = false;
    variants.push(("- Interaction".to_string(), no_interaction.clone()));

    let mut no_fusion = no_interaction.clone();
    no_fusion.use_fusion = false;
    variants.push(("- Interaction & fusion".to_string(), no_fusion.clone()));

    let mut no_rdrop = no_fusion;
    no_rdrop.rdrop_alpha = 0.0;
    variants.push(("- Interaction & fusion & R-Drop".to_string(), no_rdrop));

    let mut no_isa = cfg.clone();
    no_isa.n_isa_layers = 0;
    variants.push(("w/o ISA".to_string(), no_isa));

    let mut no_msa = cfg.clone();
    no_msa.n_msa_layers = 0;
    variants.push(("w/o MSA".to_string(), no_msa));

    variants
}

/// Trains and evaluates every variant on the same corpora. Each variant
/// trains in `out_dir/<slug>/` and is scored on `test_seqs`.
pub fn run_ablation<T: Scalar>(
    cfg: &ModelConfig,
    train_seqs: &[LabeledSequence],
    valid_seqs: &[LabeledSequence],
    test_seqs: &[LabeledSequence],
    out_dir: &Path,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for (name, variant_cfg) in ablation_variants(cfg) {
        let slug: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let dir = out_dir.join(slug);
        let outcome = train::<T>(&variant_cfg, train_seqs, valid_seqs, &dir)?;
        let (_, vocab, model) = checkpoint::load::<T>(&outcome.checkpoint)?;
        let metrics = evaluate(&model, &vocab, test_seqs)?;
        rows.push(AblationRow {
            variant: name,
            metrics,
            checkpoint: outcome.checkpoint,
        });
    }
    Ok(rows)
}

/// Fixed-schema table: one row per variant with overall P/R/F1.
pub fn render_ablation_table(rows: &[AblationRow], agg: Aggregation) -> String {
    let width = rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = format!(
        "{:width$}  {:>9}  {:>9}  {:>9}   (overall {agg})\n",
        "model", "P", "R", "F1"
    );
    for row in rows {
        let o = row.metrics.overall(agg);
        out.push_str(&format!(
            "{:width$}  {:>9.4}  {:>9.4}  {:>9.4}\n",
            row.variant, o.precision, o.recall, o.f1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::tensor::DType;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.d_emb = 16;
        cfg.n_heads = 2;
        cfg.n_isa_layers = 1;
        cfg.n_msa_layers = 1;
        cfg.d_ff = 32;
        cfg.fusion_heads = 2;
        cfg.fusion_d_ff = 48;
        cfg.max_len = 16;
        cfg.dropout = 0.0;
        cfg.rdrop_alpha = 0.0;
        cfg.learning_rate = 2e-3;
        cfg.batch_size = 8;
        cfg.max_epochs = 4;
        cfg.seed = 1;
        cfg.dtype = DType::F32;
        cfg
    }

    #[test]
    fn patience_counter_matches_spec_example() {
        // F1 per epoch: .5, .6, then nine repeats of .6. Best is epoch 2;
        // with patience 8 the run stops at epoch 10.
        let f1 = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];
        let mut stopper = EarlyStopper::new(8);
        let mut stopped_at = None;
        for (i, &score) in f1.iter().enumerate() {
            let epoch = i + 1;
            let (_, stop) = stopper.observe(epoch, score);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(10));
        assert_eq!(stopper.best_epoch, 2);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let cfg = tiny_cfg();
        let seqs = generate_corpus(5, 30);
        let valid = generate_corpus(6, 8);
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let a = train::<f32>(&cfg, &seqs, &valid, dir1.path()).unwrap();
        let b = train::<f32>(&cfg, &seqs, &valid, dir2.path()).unwrap();
        assert_eq!(a.log.render(), b.log.render());
    }

    #[test]
    fn empty_validation_set_is_config_error() {
        let cfg = tiny_cfg();
        let seqs = generate_corpus(5, 10);
        let dir = tempfile::tempdir().unwrap();
        let err = train::<f32>(&cfg, &seqs, &[], dir.path()).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)));
    }

    #[test]
    fn log_format_is_line_oriented() {
        let cfg = tiny_cfg();
        let seqs = generate_corpus(7, 20);
        let valid = generate_corpus(8, 6);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train::<f32>(&cfg, &seqs, &valid, dir.path()).unwrap();
        let text = outcome.log.render();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("config_hash\t"));
        for line in &lines[1..lines.len() - 2] {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 3, "{line}");
            fields[0].parse::<usize>().unwrap();
            fields[1].parse::<f64>().unwrap();
            fields[2].parse::<f64>().unwrap();
        }
        assert!(lines[lines.len() - 2].starts_with("best_epoch\t"));
        assert!(lines[lines.len() - 1].starts_with("stop_reason\t"));
        let on_disk = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
        assert_eq!(on_disk, text);
    }

    #[test]
    fn saved_checkpoint_holds_the_best_f1() {
        let mut cfg = tiny_cfg();
        cfg.max_epochs = 6;
        let seqs = generate_corpus(9, 24);
        let valid = generate_corpus(10, 8);
        let dir = tempfile::tempdir().unwrap();
        let outcome = train::<f32>(&cfg, &seqs, &valid, dir.path()).unwrap();
        let max_f1 = outcome
            .log
            .epochs
            .iter()
            .map(|e| e.valid_f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.best_f1, max_f1);
        let (_, vocab, model) = checkpoint::load::<f32>(&outcome.checkpoint).unwrap();
        let report = evaluate(&model, &vocab, &valid).unwrap();
        let reloaded_f1 = report.overall(Aggregation::Micro).f1;
        assert!((reloaded_f1 - max_f1).abs() < 1e-12);
    }

    #[test]
    fn ablation_variant_configs_project_correctly() {
        let cfg = tiny_cfg();
        let variants = ablation_variants(&cfg);
        assert_eq!(variants.len(), 6);
        let by_name: std::collections::HashMap<&str, &ModelConfig> = variants
            .iter()
            .map(|(n, c)| (n.as_str(), c))
            .collect();
        assert!(!by_name["- Interaction"].use_interaction);
        assert!(by_name["- Interaction"].use_fusion);
        assert!(!by_name["- Interaction & fusion"].use_fusion);
        assert_eq!(by_name["- Interaction & fusion & R-Drop"].rdrop_alpha, 0.0);
        assert_eq!(by_name["w/o ISA"].n_isa_layers, 0);
        assert_eq!(by_name["w/o MSA"].n_msa_layers, 0);
        assert_eq!(by_name["w/o MSA"].fused_width(), cfg.d_emb);
    }
}
