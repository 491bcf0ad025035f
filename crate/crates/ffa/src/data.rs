//! Corpus handling: the `token<TAB>LABEL` file format, vocabulary building,
//! windowing to the model's maximum length, prediction stitching, punctuation
//! insertion, corpus statistics, and a deterministic synthetic-corpus
//! generator used by the test and ablation harnesses.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Label id stored at padded positions; excluded from loss and metrics.
pub const IGNORE_INDEX: i64 = -100;

/// Reserved vocabulary ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const NUM_LABELS: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("tokens and labels differ in length: {tokens} vs {labels}")]
    LengthMismatch { tokens: usize, labels: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{0}")]
    Invalid(String),
}

/// Per-token punctuation label. `O` means no mark follows the token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    O = 0,
    Comma = 1,
    Period = 2,
    Question = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::O, Label::Comma, Label::Period, Label::Question];

    pub fn from_id(id: usize) -> Option<Label> {
        Label::ALL.get(id).copied()
    }

    pub fn id(self) -> usize {
        self as usize
    }

    /// Parses the corpus-format name, case-insensitively.
    pub fn parse(s: &str) -> Option<Label> {
        match s.to_ascii_uppercase().as_str() {
            "O" => Some(Label::O),
            "COMMA" => Some(Label::Comma),
            "PERIOD" => Some(Label::Period),
            "QUESTION" => Some(Label::Question),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::O => "O",
            Label::Comma => "COMMA",
            Label::Period => "PERIOD",
            Label::Question => "QUESTION",
        }
    }

    /// The mark appended after a token carrying this label.
    pub fn mark(self) -> Option<char> {
        match self {
            Label::O => None,
            Label::Comma => Some(','),
            Label::Period => Some('.'),
            Label::Question => Some('?'),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Word tokens with one label per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<Label>,
}

impl LabeledSequence {
    pub fn new(tokens: Vec<String>, labels: Vec<Label>) -> Result<LabeledSequence, DataError> {
        if tokens.len() != labels.len() {
            return Err(DataError::LengthMismatch {
                tokens: tokens.len(),
                labels: labels.len(),
            });
        }
        Ok(LabeledSequence { tokens, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads a corpus file: one `token<TAB>LABEL` pair per line, blank lines
/// separate sequences, labels case-insensitive.
pub fn read_corpus(path: &Path) -> Result<Vec<LabeledSequence>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<LabeledSequence>, DataError> {
    let mut sequences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                sequences.push(LabeledSequence {
                    tokens: std::mem::take(&mut tokens),
                    labels: std::mem::take(&mut labels),
                });
            }
            continue;
        }
        let (token, label) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: line_no,
            msg: format!("expected token<TAB>LABEL, got {line:?}"),
        })?;
        if token.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: "empty token".into(),
            });
        }
        let label = Label::parse(label.trim()).ok_or_else(|| DataError::Parse {
            line: line_no,
            msg: format!(
                "unknown label {:?} (expected O, COMMA, PERIOD or QUESTION)",
                label.trim()
            ),
        })?;
        tokens.push(token.to_string());
        labels.push(label);
    }
    if !tokens.is_empty() {
        sequences.push(LabeledSequence { tokens, labels });
    }
    Ok(sequences)
}

pub fn write_corpus(path: &Path, sequences: &[LabeledSequence]) -> Result<(), DataError> {
    let mut out = String::new();
    for (i, seq) in sequences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (token, label) in seq.tokens.iter().zip(&seq.labels) {
            out.push_str(token);
            out.push('\t');
            out.push_str(label.name());
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Token-to-id map with reserved padding (0) and unknown (1) slots.
/// Lookup is lowercased; ids are assigned by descending frequency with
/// lexicographic tie-breaks, so identical corpora yield identical maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    pub min_freq: usize,
}

impl Vocabulary {
    pub fn build(sequences: &[LabeledSequence], min_freq: usize) -> Result<Vocabulary, DataError> {
        if min_freq < 1 {
            return Err(DataError::Invalid("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seq in sequences {
            for token in &seq.tokens {
                *counts.entry(token.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            min_freq,
        })
    }

    /// Rebuilds from an id-ordered token list (checkpoint loading).
    pub fn from_id_order(tokens: Vec<String>, min_freq: usize) -> Result<Vocabulary, DataError> {
        if tokens.len() < 2 || tokens[PAD_ID] != "<pad>" || tokens[UNK_ID] != "<unk>" {
            return Err(DataError::Invalid(
                "vocabulary must start with <pad> and <unk>".into(),
            ));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn tokens_in_id_order(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }
}

/// A fixed-length slice of one corpus sequence, padded to `max_len`.
#[derive(Clone, Debug)]
pub struct Window {
    pub seq_id: usize,
    /// Offset of the window's first token within the source sequence.
    pub start: usize,
    /// Number of real (unpadded) tokens.
    pub len: usize,
    pub token_ids: Vec<usize>,
    /// Gold labels, `IGNORE_INDEX` at padded positions.
    pub label_ids: Vec<i64>,
    /// True at padded positions.
    pub pad: Vec<bool>,
}

/// Window start offsets covering a sequence of `len` tokens: multiples of
/// `stride` while a full window fits, plus a right-aligned final window when
/// the tail would otherwise be uncovered.
fn window_offsets(len: usize, max_len: usize, stride: usize) -> Vec<usize> {
    if len <= max_len {
        return vec![0];
    }
    let mut offsets = Vec::new();
    let mut start = 0;
    while start + max_len <= len {
        offsets.push(start);
        start += stride;
    }
    let covered = offsets.last().map(|&s| s + max_len).unwrap_or(0);
    if covered < len {
        offsets.push(len - max_len);
    }
    offsets
}

/// Cuts sequences into padded windows. Training uses `stride = max_len`
/// (non-overlapping except a right-aligned tail), prediction uses
/// `stride = max_len / 2` and stitches with [`stitch_picks`].
pub fn window_sequences(
    sequences: &[LabeledSequence],
    vocab: &Vocabulary,
    max_len: usize,
    stride: usize,
) -> Result<Vec<Window>, DataError> {
    if stride < 1 || stride > max_len {
        return Err(DataError::Invalid(format!(
            "stride {stride} outside [1, {max_len}]"
        )));
    }
    let mut windows = Vec::new();
    for (seq_id, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            continue;
        }
        let ids = vocab.encode(&seq.tokens);
        for start in window_offsets(seq.len(), max_len, stride) {
            let len = (seq.len() - start).min(max_len);
            let mut token_ids = vec![PAD_ID; max_len];
            let mut label_ids = vec![IGNORE_INDEX; max_len];
            let mut pad = vec![true; max_len];
            for i in 0..len {
                token_ids[i] = ids[start + i];
                label_ids[i] = seq.labels[start + i].id() as i64;
                pad[i] = false;
            }
            windows.push(Window {
                seq_id,
                start,
                len,
                token_ids,
                label_ids,
                pad,
            });
        }
    }
    Ok(windows)
}

/// For each position of a sequence of `seq_len` tokens, the index (into
/// `windows`) and in-window offset of the window where the position is most
/// central. Ties go to the earlier window, so every position is picked
/// exactly once.
pub fn stitch_picks(windows: &[&Window], seq_len: usize) -> Result<Vec<(usize, usize)>, DataError> {
    let mut picks = Vec::with_capacity(seq_len);
    for pos in 0..seq_len {
        let mut best: Option<(f64, usize, usize)> = None;
        for (wi, w) in windows.iter().enumerate() {
            if pos < w.start || pos >= w.start + w.len {
                continue;
            }
            let inside = pos - w.start;
            let centrality = (inside as f64 - (w.len as f64 - 1.0) / 2.0).abs();
            let better = match best {
                None => true,
                Some((c, _, _)) => centrality < c,
            };
            if better {
                best = Some((centrality, wi, inside));
            }
        }
        let (_, wi, inside) = best.ok_or_else(|| {
            DataError::Invalid(format!("position {pos} not covered by any window"))
        })?;
        picks.push((wi, inside));
    }
    Ok(picks)
}

/// Joins tokens with single spaces, appending each label's mark directly
/// after its token.
pub fn insert_punctuation(tokens: &[String], labels: &[Label]) -> Result<String, DataError> {
    if tokens.len() != labels.len() {
        return Err(DataError::LengthMismatch {
            tokens: tokens.len(),
            labels: labels.len(),
        });
    }
    let mut out = String::new();
    for (i, (token, label)) in tokens.iter().zip(labels).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(token);
        if let Some(mark) = label.mark() {
            out.push(mark);
        }
    }
    Ok(out)
}

/// Published label distribution of the IWSLT2011 training split, shown next
/// to any user corpus for orientation (that dataset is not bundled).
pub const IWSLT2011_TRAIN_DISTRIBUTION: [f64; NUM_LABELS] = [0.857, 0.0753, 0.063, 0.0047];

/// Fraction of tokens per label over the whole corpus.
pub fn class_distribution(sequences: &[LabeledSequence]) -> Result<[f64; NUM_LABELS], DataError> {
    let mut counts = [0usize; NUM_LABELS];
    let mut total = 0usize;
    for seq in sequences {
        for &label in &seq.labels {
            counts[label.id()] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(DataError::EmptyCorpus);
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

/// Batched windows flattened for the model: `tokens` and `labels` are
/// row-major (b, n).
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub labels: Vec<i64>,
    pub pad: Vec<bool>,
    pub b: usize,
    pub n: usize,
}

impl Batch {
    pub fn has_padding(&self) -> bool {
        self.pad.iter().any(|&p| p)
    }
}

pub fn collate(windows: &[&Window]) -> Result<Batch, DataError> {
    let n = windows
        .first()
        .map(|w| w.token_ids.len())
        .ok_or_else(|| DataError::Invalid("empty batch".into()))?;
    let mut tokens = Vec::with_capacity(windows.len() * n);
    let mut labels = Vec::with_capacity(windows.len() * n);
    let mut pad = Vec::with_capacity(windows.len() * n);
    for w in windows {
        if w.token_ids.len() != n {
            return Err(DataError::Invalid("ragged windows in batch".into()));
        }
        tokens.extend_from_slice(&w.token_ids);
        labels.extend_from_slice(&w.label_ids);
        pad.extend_from_slice(&w.pad);
    }
    Ok(Batch {
        tokens,
        labels,
        pad,
        b: windows.len(),
        n,
    })
}

// ── synthetic corpus ─────────────────────────────────────────────────

const QWORDS: &[&str] = &["where", "what", "why", "how", "when"];
const SUBJECTS: &[&str] = &[
    "alice", "bob", "carol", "dave", "erin", "students", "teachers", "birds",
];
const VERBS: &[&str] = &["sees", "likes", "finds", "helps", "watches", "draws"];
const OBJECTS: &[&str] = &[
    "apples", "rivers", "books", "trees", "songs", "clouds", "maps", "stars",
];
const CONJUNCTIONS: &[&str] = &["and", "but"];

/// Deterministic toy grammar. Each clause is `subject verb object`; a
/// sentence is one or two clauses joined by a conjunction (the token before
/// the conjunction takes COMMA); interrogative sentences are prefixed with a
/// question word and end in QUESTION, everything else ends in PERIOD. Word
/// pools are disjoint, so labels are a pure function of the token stream and
/// a perfect tagger exists.
pub fn generate_corpus(seed: u64, n_sentences: usize) -> Vec<LabeledSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    let mut in_sequence = 0usize;
    let mut per_sequence = rng.gen_range(1..=3);

    let pick = |rng: &mut ChaCha8Rng, pool: &[&str]| pool[rng.gen_range(0..pool.len())].to_string();

    for _ in 0..n_sentences {
        let interrogative = rng.gen_bool(0.3);
        let two_clauses = rng.gen_bool(0.4);
        if interrogative {
            tokens.push(pick(&mut rng, QWORDS));
            labels.push(Label::O);
        }
        let clauses = if two_clauses { 2 } else { 1 };
        for c in 0..clauses {
            tokens.push(pick(&mut rng, SUBJECTS));
            labels.push(Label::O);
            tokens.push(pick(&mut rng, VERBS));
            labels.push(Label::O);
            tokens.push(pick(&mut rng, OBJECTS));
            if c + 1 < clauses {
                labels.push(Label::Comma);
                tokens.push(pick(&mut rng, CONJUNCTIONS));
                labels.push(Label::O);
            } else {
                labels.push(if interrogative {
                    Label::Question
                } else {
                    Label::Period
                });
            }
        }
        in_sequence += 1;
        if in_sequence == per_sequence {
            sequences.push(LabeledSequence {
                tokens: std::mem::take(&mut tokens),
                labels: std::mem::take(&mut labels),
            });
            in_sequence = 0;
            per_sequence = rng.gen_range(1..=3);
        }
    }
    if !tokens.is_empty() {
        sequences.push(LabeledSequence { tokens, labels });
    }
    sequences
}
