//! Tokenizers turning flow records into fixed-length id sequences.

mod nss;
mod subword;
mod vocab;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use nss::{
    build_vocab, build_vocab_from_records, compute_window, decode, encode_flow, window_for_records,
    WindowSpec, MAX_SEQ_CAP,
};
pub use subword::{
    encode_subword, flow_text, split_words, train_subword_vocab, SubwordVocab, DEFAULT_MARKER,
    DEFAULT_MAX_INPUT_CHARS,
};
pub use vocab::{Quantization, Vocabulary, CLS, N_SPECIALS, PAD, SEP, SPECIAL_TOKENS, UNK};

use crate::ingest::{FlowRecord, FlowTable};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("table is empty")]
    EmptyTable,
    #[error("subword corpus is empty")]
    CorpusEmpty,
    #[error("target vocabulary size {target} is below alphabet + specials ({needed})")]
    TargetTooSmall { target: usize, needed: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("window {0} outside 1..=512")]
    BadWindow(usize),
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-length id sequence with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    /// Pads (or truncates) `ids` to `len` with `[PAD]`.
    pub fn from_unpadded(mut ids: Vec<u32>, len: usize) -> Self {
        ids.truncate(len);
        let true_length = ids.len();
        ids.resize(len, PAD);
        let mask = ids.iter().map(|&i| u8::from(i != PAD)).collect();
        Self {
            ids,
            mask,
            true_length,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Nss,
    Subword,
}

impl std::fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenizerKind::Nss => "nss",
            TokenizerKind::Subword => "subword",
        })
    }
}

pub const DEFAULT_SUBWORD_VOCAB: usize = 1000;

/// A fitted tokenizer plus the padded length it produces.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowTokenizer {
    Nss { vocab: Vocabulary, window: WindowSpec },
    Subword { vocab: SubwordVocab, seq_len: usize },
}

impl FlowTokenizer {
    /// Fits on training records only.
    pub fn fit_nss(train: &[FlowRecord], quantization: Quantization) -> Result<Self, TokenizerError> {
        let vocab = build_vocab_from_records(train, quantization)?;
        let window = window_for_records(train)?;
        Ok(FlowTokenizer::Nss { vocab, window })
    }

    /// Trains a subword vocabulary; padded length is the longest framed
    /// training sequence, capped at 512.
    pub fn fit_subword(train: &[FlowRecord], target_size: usize) -> Result<Self, TokenizerError> {
        let texts: Vec<String> = train.iter().map(flow_text).collect();
        let vocab = train_subword_vocab(&texts, target_size)?;
        let longest = texts
            .iter()
            .map(|t| vocab.piece_ids(t).len() + 2)
            .max()
            .ok_or(TokenizerError::EmptyTable)?;
        Ok(FlowTokenizer::Subword {
            vocab,
            seq_len: longest.min(MAX_SEQ_CAP),
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        match self {
            FlowTokenizer::Nss { .. } => TokenizerKind::Nss,
            FlowTokenizer::Subword { .. } => TokenizerKind::Subword,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            FlowTokenizer::Nss { window, .. } => window.seq_len(),
            FlowTokenizer::Subword { seq_len, .. } => *seq_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            FlowTokenizer::Nss { vocab, .. } => vocab.len(),
            FlowTokenizer::Subword { vocab, .. } => vocab.len(),
        }
    }

    pub fn encode(&self, record: &FlowRecord) -> TokenSequence {
        match self {
            FlowTokenizer::Nss { vocab, window } => encode_flow(record, vocab, window),
            FlowTokenizer::Subword { vocab, seq_len } => encode_subword(&flow_text(record), vocab, *seq_len),
        }
    }

    pub fn encode_all(&self, records: &[FlowRecord]) -> Vec<TokenSequence> {
        records.iter().map(|r| self.encode(r)).collect()
    }

    /// Vocabulary file contents.
    pub fn vocab_text(&self) -> String {
        match self {
            FlowTokenizer::Nss { vocab, .. } => vocab.to_text(),
            FlowTokenizer::Subword { vocab, .. } => vocab.to_text(),
        }
    }

    pub fn stats_vocab(&self) -> StatsVocab<'_> {
        match self {
            FlowTokenizer::Nss { vocab, window } => StatsVocab::Nss(vocab, *window),
            FlowTokenizer::Subword { vocab, .. } => StatsVocab::Subword(vocab),
        }
    }

    /// Quantization of an NSS vocabulary; `None` for subword.
    pub fn quantization(&self) -> Option<Quantization> {
        match self {
            FlowTokenizer::Nss { vocab, .. } => Some(vocab.quantization()),
            FlowTokenizer::Subword { .. } => None,
        }
    }

    pub fn read_vocab(kind: TokenizerKind, path: &Path, seq_len: usize) -> Result<Self, TokenizerError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(match kind {
            TokenizerKind::Nss => FlowTokenizer::Nss {
                vocab: Vocabulary::read_from(file)?,
                window: WindowSpec::new(seq_len.saturating_sub(2).max(1))?,
            },
            TokenizerKind::Subword => FlowTokenizer::Subword {
                vocab: SubwordVocab::read_from(file)?,
                seq_len,
            },
        })
    }
}

/// One row of the tokenizer comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dataset: String,
    pub tokenizer: TokenizerKind,
    pub max_length: usize,
    pub mean_length: f64,
    pub tokenize_seconds: f64,
}

/// Vocabulary input for [`corpus_stats`].
pub enum StatsVocab<'a> {
    Nss(&'a Vocabulary, WindowSpec),
    Subword(&'a SubwordVocab),
}

/// Token lengths (pre-padding, framing included) over a full pass.
pub fn corpus_stats(table: &FlowTable, vocab: StatsVocab<'_>) -> Result<CorpusStats, TokenizerError> {
    if table.is_empty() {
        return Err(TokenizerError::EmptyTable);
    }
    let start = Instant::now();
    let lengths: Vec<usize> = match &vocab {
        StatsVocab::Nss(v, w) => table
            .records
            .iter()
            .map(|r| encode_flow(r, v, w).true_length)
            .collect(),
        StatsVocab::Subword(v) => table
            .records
            .iter()
            .map(|r| encode_subword(&flow_text(r), v, MAX_SEQ_CAP).true_length)
            .collect(),
    };
    let tokenize_seconds = start.elapsed().as_secs_f64();
    Ok(CorpusStats {
        dataset: table.schema.dataset_name.clone(),
        tokenizer: match vocab {
            StatsVocab::Nss(..) => TokenizerKind::Nss,
            StatsVocab::Subword(_) => TokenizerKind::Subword,
        },
        max_length: lengths.iter().copied().max().unwrap_or(0),
        mean_length: lengths.iter().sum::<usize>() as f64 / lengths.len() as f64,
        tokenize_seconds,
    })
}
