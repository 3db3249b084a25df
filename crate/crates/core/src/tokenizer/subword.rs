//! WordPiece-style baseline: pieces learned by greedy pair merging, applied
//! by greedy longest match inside whitespace/punctuation-delimited words.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use super::vocab::{escape, unescape, CLS, N_SPECIALS, SEP, SPECIAL_TOKENS, UNK};
use super::{TokenSequence, TokenizerError};
use crate::ingest::FlowRecord;

pub const DEFAULT_MARKER: &str = "##";
pub const DEFAULT_MAX_INPUT_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    pieces: HashMap<String, u32>,
    id_to_piece: Vec<String>,
    longest_piece: usize,
    pub continuation_marker: String,
    pub max_input_chars: usize,
}

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

/// Splits on whitespace; every punctuation character is a word of its own.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_split_punct(c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Comma-joined text form of a flow, as a generic text tokenizer would see it.
pub fn flow_text(record: &FlowRecord) -> String {
    record.values.join(",")
}

pub fn train_subword_vocab<S: AsRef<str>>(
    corpus: &[S],
    target_size: usize,
) -> Result<SubwordVocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::CorpusEmpty);
    }
    let mut word_counts: HashMap<&str, u64> = HashMap::new();
    for text in corpus {
        for w in split_words(text.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::CorpusEmpty);
    }
    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    if target_size < alphabet.len() + N_SPECIALS {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            needed: alphabet.len() + N_SPECIALS,
        });
    }

    let mut id_to_piece: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    id_to_piece.extend(alphabet.iter().map(|c| c.to_string()));
    let mut known: BTreeSet<String> = id_to_piece.iter().cloned().collect();

    // Sorted for a deterministic iteration order independent of hashing.
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(w, n)| (w.chars().map(String::from).collect(), n))
        .collect();
    words.sort();

    while id_to_piece.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (pieces, n) in &words {
            for pair in pieces.windows(2) {
                *pair_counts.entry((&pair[0], &pair[1])).or_default() += n;
            }
        }
        // Highest frequency first, ties to the lexicographically smallest pair.
        let Some(((left, right), _)) = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for (pieces, _) in &mut words {
            if pieces.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && pieces[i] == left && pieces[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut pieces[i]));
                    i += 1;
                }
            }
            *pieces = out;
        }
        if known.insert(merged.clone()) {
            id_to_piece.push(merged);
        }
    }
    Ok(SubwordVocab::from_pieces(
        id_to_piece,
        DEFAULT_MARKER.to_string(),
        DEFAULT_MAX_INPUT_CHARS,
    ))
}

impl SubwordVocab {
    fn from_pieces(id_to_piece: Vec<String>, continuation_marker: String, max_input_chars: usize) -> Self {
        let pieces = id_to_piece
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let longest_piece = id_to_piece[N_SPECIALS..]
            .iter()
            .map(|p| p.chars().count())
            .max()
            .unwrap_or(1);
        Self {
            pieces,
            id_to_piece,
            longest_piece,
            continuation_marker,
            max_input_chars,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_piece.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_piece.is_empty()
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.pieces
            .get(piece)
            .is_some_and(|&id| id as usize >= N_SPECIALS)
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.id_to_piece.get(id as usize).map(String::as_str)
    }

    fn lookup(&self, piece: &str) -> Option<u32> {
        self.pieces.get(piece).copied().filter(|&id| id as usize >= N_SPECIALS)
    }

    /// Greedy longest-match ids for one word.
    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        if n_chars > self.max_input_chars {
            out.push(UNK);
            return;
        }
        let mut start = 0;
        while start < n_chars {
            let mut end = (start + self.longest_piece).min(n_chars);
            let mut hit = None;
            while end > start {
                if let Some(id) = self.lookup(&word[bounds[start]..bounds[end]]) {
                    hit = Some(id);
                    break;
                }
                end -= 1;
            }
            match hit {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    start += 1;
                }
            }
        }
    }

    /// Piece ids for `text` without framing or truncation.
    pub fn piece_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in split_words(text) {
            self.encode_word(w, &mut ids);
        }
        ids
    }

    /// Human-readable pieces with the continuation marker on non-initial pieces.
    pub fn pieces_of(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for w in split_words(text) {
            let mut ids = Vec::new();
            self.encode_word(w, &mut ids);
            for (i, id) in ids.into_iter().enumerate() {
                let p = self.piece(id).unwrap_or("[UNK]");
                if i == 0 || id == UNK {
                    out.push(p.to_string());
                } else {
                    out.push(format!("{}{p}", self.continuation_marker));
                }
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "#subword\tmarker={}\tmax_input_chars={}",
            escape(&self.continuation_marker),
            self.max_input_chars
        )?;
        for (id, p) in self.id_to_piece.iter().enumerate() {
            writeln!(w, "{id}\t{}", escape(p))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("vocabulary is valid UTF-8")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let bad = |m: String| TokenizerError::BadVocabFile(m);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let mut fields = header.split('\t');
        if fields.next() != Some("#subword") {
            return Err(bad("missing #subword header".into()));
        }
        let marker = fields
            .next()
            .and_then(|f| f.strip_prefix("marker="))
            .ok_or_else(|| bad("missing marker".into()))?;
        let max_input_chars = fields
            .next()
            .and_then(|f| f.strip_prefix("max_input_chars="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing max_input_chars".into()))?;
        let mut id_to_piece = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let (id, p) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected id<TAB>piece", n + 2)))?;
            if id.parse::<usize>().ok() != Some(id_to_piece.len()) {
                return Err(bad(format!("line {}: ids must be dense and ascending", n + 2)));
            }
            id_to_piece.push(unescape(p));
        }
        if id_to_piece.len() < N_SPECIALS
            || id_to_piece[..N_SPECIALS].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(bad("special tokens must occupy ids 0-3".into()));
        }
        Ok(Self::from_pieces(id_to_piece, unescape(marker), max_input_chars))
    }
}

/// `[CLS] pieces.. [SEP]`, truncated and padded to `max_len`.
pub fn encode_subword(flow_text: &str, vocab: &SubwordVocab, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    let mut pieces = vocab.piece_ids(flow_text);
    pieces.truncate(max_len - 2);
    ids.extend(pieces);
    ids.push(SEP);
    TokenSequence::from_unpadded(ids, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation() {
        assert_eq!(split_words("0,tcp,5449.73"), ["0", ",", "tcp", ",", "5449", ".", "73"]);
        assert_eq!(split_words(" a  b\u{241F}c "), ["a", "b", "\u{241F}", "c"]);
    }

    #[test]
    fn two_merges_on_repeated_word() {
        let corpus = vec!["aaab"; 20];
        // Alphabet {a, b} + 4 specials, one slot for the first merge.
        let v = train_subword_vocab(&corpus, 7).unwrap();
        assert!(v.contains("a") && v.contains("b") && v.contains("aa"));
        assert_eq!(v.len(), 7);
        // Second merge: pairs (aa,a) and (a,b) tie at 20, (a,b) sorts first.
        let v = train_subword_vocab(&corpus, 8).unwrap();
        assert!(v.contains("ab"));
        assert_eq!(v.pieces_of("aaab"), ["aa", "##ab"]);
    }

    #[test]
    fn alphabet_sized_target_is_character_only() {
        let v = train_subword_vocab(&["aaab"; 5], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert!(!v.contains("aa"));
        assert!(matches!(
            train_subword_vocab(&["aaab"], 5),
            Err(TokenizerError::TargetTooSmall { target: 5, needed: 6 })
        ));
        assert!(matches!(
            train_subword_vocab::<&str>(&[], 10),
            Err(TokenizerError::CorpusEmpty)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["0,tcp,http,SF,181,5450", "0,udp,private,SF,105,146", "2,tcp,ftp,S0,0,0"];
        let a = train_subword_vocab(&corpus, 40).unwrap();
        let b = train_subword_vocab(&corpus, 40).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn single_piece_encodes_to_three_tokens() {
        // Alphabet {c, p, t}: merges (c,p) then (t,cp).
        let v = train_subword_vocab(&["tcp"; 3], 9).unwrap();
        assert!(v.contains("tcp"));
        let s = encode_subword("tcp", &v, 512);
        assert_eq!(s.true_length, 3);
        assert_eq!(s.ids.len(), 512);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let v = train_subword_vocab(&["ab"], 6).unwrap();
        let ids = v.piece_ids("azb");
        assert_eq!(ids, [v.pieces["a"], UNK, v.pieces["b"]]);
    }

    #[test]
    fn overlong_words_are_unk() {
        let mut v = train_subword_vocab(&["ab"], 6).unwrap();
        v.max_input_chars = 3;
        assert_eq!(v.piece_ids("abab"), [UNK]);
    }

    #[test]
    fn truncates_at_max_len() {
        let v = train_subword_vocab(&["a,b"], 7).unwrap();
        let s = encode_subword(&"a,".repeat(100), &v, 10);
        assert_eq!(s.true_length, 10);
        assert_eq!(s.ids[9], SEP);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = train_subword_vocab(&["0,tcp,http", "1,udp,dns"], 30).unwrap();
        let text = v.to_text();
        let back = SubwordVocab::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
    }
}
