//! Feature-boundary tokenization: one token per feature value, framed by
//! `[CLS]`/`[SEP]` and padded to a window derived from the training split.

use serde::{Deserialize, Serialize};

use super::vocab::{Quantization, Vocabulary, CLS, N_SPECIALS, PAD, SEP, UNK};
use super::{TokenSequence, TokenizerError};
use crate::ingest::{FlowRecord, FlowTable};

/// Hard upper bound on any model input length.
pub const MAX_SEQ_CAP: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window: usize,
    pub cap: usize,
}

impl WindowSpec {
    pub fn new(window: usize) -> Result<Self, TokenizerError> {
        if !(1..=MAX_SEQ_CAP).contains(&window) {
            return Err(TokenizerError::BadWindow(window));
        }
        Ok(Self {
            window,
            cap: MAX_SEQ_CAP,
        })
    }

    /// Padded sequence length: window plus `[CLS]` and `[SEP]`, never above the cap.
    pub fn seq_len(&self) -> usize {
        (self.window + 2).min(self.cap)
    }

    /// Number of feature tokens that fit between `[CLS]` and `[SEP]`.
    pub fn feature_slots(&self) -> usize {
        self.seq_len() - 2
    }
}

pub fn build_vocab(train: &FlowTable, quantization: Quantization) -> Result<Vocabulary, TokenizerError> {
    build_vocab_from_records(&train.records, quantization)
}

pub fn build_vocab_from_records(
    records: &[FlowRecord],
    quantization: Quantization,
) -> Result<Vocabulary, TokenizerError> {
    if records.is_empty() {
        return Err(TokenizerError::EmptyTable);
    }
    Ok(Vocabulary::from_tokens(
        records
            .iter()
            .flat_map(|r| r.values.iter())
            .map(|v| quantization.apply(v)),
        quantization,
    ))
}

/// `min(max feature-token count over the training flows, 512)`.
///
/// Counts exclude `[CLS]`/`[SEP]`; each feature value is exactly one token so
/// the vocabulary does not change the count. An all-empty table yields 1.
pub fn compute_window(train: &FlowTable, _vocab: &Vocabulary) -> Result<WindowSpec, TokenizerError> {
    window_for_records(&train.records)
}

pub fn window_for_records(records: &[FlowRecord]) -> Result<WindowSpec, TokenizerError> {
    let longest = records
        .iter()
        .map(|r| r.values.len())
        .max()
        .ok_or(TokenizerError::EmptyTable)?;
    WindowSpec::new(longest.clamp(1, MAX_SEQ_CAP))
}

pub fn encode_flow(record: &FlowRecord, vocab: &Vocabulary, spec: &WindowSpec) -> TokenSequence {
    let len = spec.seq_len();
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend(
        record
            .values
            .iter()
            .take(spec.feature_slots())
            .map(|v| vocab.value_id(v)),
    );
    ids.push(SEP);
    TokenSequence::from_unpadded(ids, len)
}

/// Text of every non-special position; UNK positions render as `[UNK]`.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Vec<String>, TokenizerError> {
    let mut out = Vec::new();
    for &id in &seq.ids {
        let tok = vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
        match id {
            PAD | CLS | SEP => {}
            UNK => out.push(tok.to_string()),
            _ if (id as usize) < N_SPECIALS => {}
            _ => out.push(tok.to_string()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Label;

    fn rec(values: &[&str]) -> FlowRecord {
        FlowRecord::new(values.iter().map(|s| s.to_string()).collect(), Label::Normal, "t")
    }

    #[test]
    fn vocab_dedups_in_first_occurrence_order() {
        let v = build_vocab_from_records(&[rec(&["tcp", "http", "tcp"])], Quantization::Raw).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("tcp"), Some(4));
        assert_eq!(v.id("http"), Some(5));
    }

    #[test]
    fn vocab_is_deterministic() {
        let recs = [rec(&["b", "a", "c"]), rec(&["c", "d", "a"])];
        let a = build_vocab_from_records(&recs, Quantization::Raw).unwrap();
        let b = build_vocab_from_records(&recs, Quantization::Raw).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(matches!(
            build_vocab_from_records(&[], Quantization::Raw),
            Err(TokenizerError::EmptyTable)
        ));
        assert!(matches!(window_for_records(&[]), Err(TokenizerError::EmptyTable)));
    }

    #[test]
    fn miniature_three_feature_encoding() {
        let r = rec(&["0", "tcp", "SF"]);
        let v = build_vocab_from_records(&[r.clone()], Quantization::Raw).unwrap();
        let w = window_for_records(&[r.clone()]).unwrap();
        assert_eq!(w.window, 3);
        let s = encode_flow(&r, &v, &w);
        // CLS 0 tcp SF SEP
        assert_eq!(s.ids, [CLS, 4, 5, 6, SEP]);
        assert_eq!(s.true_length, 5);
        assert_eq!(s.mask, [1, 1, 1, 1, 1]);
    }

    #[test]
    fn unknown_values_become_unk() {
        let v = build_vocab_from_records(&[rec(&["tcp"])], Quantization::Raw).unwrap();
        let w = WindowSpec::new(41).unwrap();
        let s = encode_flow(&rec(&["tcp", "never-seen"]), &v, &w);
        assert_eq!(s.ids.len(), 43);
        assert_eq!(s.ids[1], v.id("tcp").unwrap());
        assert_eq!(s.ids[2], UNK);
        assert_eq!(s.ids[3], SEP);
        assert!(s.ids[4..].iter().all(|&i| i == PAD));
        assert_eq!(decode(&s, &v).unwrap(), ["tcp", "[UNK]"]);
    }

    #[test]
    fn special_strings_in_data_are_not_specials() {
        let v = build_vocab_from_records(&[rec(&["[PAD]", "x"])], Quantization::Raw).unwrap();
        let s = encode_flow(&rec(&["[PAD]", "x"]), &v, &WindowSpec::new(2).unwrap());
        assert_eq!(s.ids, [CLS, UNK, 4, SEP]);
        assert_eq!(s.true_length, 4);
    }

    #[test]
    fn long_flows_are_truncated_at_the_head() {
        let values: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let r = FlowRecord::new(values, Label::Attack, "t");
        let v = build_vocab_from_records(&[r.clone()], Quantization::Raw).unwrap();
        let w = WindowSpec::new(5).unwrap();
        let s = encode_flow(&r, &v, &w);
        assert_eq!(s.ids.len(), 7);
        assert_eq!(decode(&s, &v).unwrap(), ["0", "1", "2", "3", "4"]);
        assert_eq!(*s.ids.last().unwrap(), SEP);
    }

    #[test]
    fn cap_bounds_window_and_length() {
        let r = FlowRecord::new((0..600).map(|i| i.to_string()).collect(), Label::Attack, "t");
        let w = window_for_records(&[r.clone()]).unwrap();
        assert_eq!(w.window, 512);
        assert_eq!(w.seq_len(), 512);
        let v = build_vocab_from_records(&[r.clone()], Quantization::Raw).unwrap();
        let s = encode_flow(&r, &v, &w);
        assert_eq!(s.true_length, 512);
        assert!(WindowSpec::new(0).is_err());
        assert!(WindowSpec::new(513).is_err());
    }

    #[test]
    fn pad_only_decodes_to_nothing() {
        let v = build_vocab_from_records(&[rec(&["x"])], Quantization::Raw).unwrap();
        let s = TokenSequence::from_unpadded(vec![CLS], 6);
        assert!(decode(&s, &v).unwrap().is_empty());
        let bad = TokenSequence::from_unpadded(vec![CLS, 99], 4);
        assert!(matches!(decode(&bad, &v), Err(TokenizerError::UnknownId(99))));
    }
}
