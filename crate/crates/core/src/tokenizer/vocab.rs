use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TokenizerError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const N_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; N_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// How numeric feature values become tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum Quantization {
    /// Every distinct string is its own token.
    #[default]
    Raw,
    /// `round(per_decade * log10(1 + |x|))`, sign-prefixed.
    LogBucket { per_decade: u32 },
}

impl Quantization {
    pub fn log_bucket() -> Self {
        Quantization::LogBucket { per_decade: 10 }
    }

    pub fn apply<'a>(&self, value: &'a str) -> Cow<'a, str> {
        match *self {
            Quantization::Raw => Cow::Borrowed(value),
            Quantization::LogBucket { per_decade } => match value.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => {
                    let bucket = (per_decade as f64 * (1.0 + x.abs()).log10()).round() as i64;
                    let sign = if x < 0.0 && bucket != 0 { "-" } else { "" };
                    Cow::Owned(format!("num:{sign}b{bucket}"))
                }
                _ => Cow::Borrowed(value),
            },
        }
    }
}

impl fmt::Display for Quantization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Quantization::Raw => f.write_str("raw"),
            Quantization::LogBucket { per_decade } => write!(f, "log-bucket:{per_decade}"),
        }
    }
}

impl FromStr for Quantization {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Quantization::Raw),
            "log-bucket" => Ok(Quantization::log_bucket()),
            other => other
                .strip_prefix("log-bucket:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &u32| n > 0)
                .map(|per_decade| Quantization::LogBucket { per_decade })
                .ok_or_else(|| TokenizerError::BadVocabFile(format!("unknown quantization `{other}`"))),
        }
    }
}

/// Frozen token/id mapping with reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    quantization: Quantization,
}

impl Vocabulary {
    /// Builds a vocabulary from corpus tokens in first-occurrence order.
    pub(crate) fn from_tokens<'a>(
        tokens: impl IntoIterator<Item = Cow<'a, str>>,
        quantization: Quantization,
    ) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in tokens {
            if !token_to_id.contains_key(tok.as_ref()) {
                let id = id_to_token.len() as u32;
                token_to_id.insert(tok.to_string(), id);
                id_to_token.push(tok.into_owned());
            }
        }
        Self {
            token_to_id,
            id_to_token,
            quantization,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn corpus_len(&self) -> usize {
        self.len() - N_SPECIALS
    }

    pub fn quantization(&self) -> Quantization {
        self.quantization
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Id of a raw feature value after quantization, UNK when absent.
    pub fn value_id(&self, value: &str) -> u32 {
        self.id(&self.quantization.apply(value))
            .filter(|&id| id as usize >= N_SPECIALS)
            .unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Writes `id<TAB>token` lines after a `#quantization` header line.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "#quantization\t{}", self.quantization)?;
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(w, "{id}\t{}", escape(tok))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("vocabulary is valid UTF-8")
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, TokenizerError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::BadVocabFile("empty file".into()))??;
        let quantization: Quantization = header
            .strip_prefix("#quantization\t")
            .ok_or_else(|| TokenizerError::BadVocabFile("missing #quantization header".into()))?
            .parse()?;
        let mut id_to_token = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let (id, tok) = line.split_once('\t').ok_or_else(|| {
                TokenizerError::BadVocabFile(format!("line {}: expected id<TAB>token", lineno + 2))
            })?;
            let id: usize = id
                .parse()
                .map_err(|_| TokenizerError::BadVocabFile(format!("line {}: bad id", lineno + 2)))?;
            if id != id_to_token.len() {
                return Err(TokenizerError::BadVocabFile(format!(
                    "line {}: ids must be dense and ascending",
                    lineno + 2
                )));
            }
            id_to_token.push(unescape(tok));
        }
        if id_to_token.len() < N_SPECIALS
            || id_to_token[..N_SPECIALS].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(TokenizerError::BadVocabFile("special tokens must occupy ids 0-3".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadVocabFile(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            quantization,
        })
    }
}

pub(crate) fn escape(s: &str) -> Cow<'_, str> {
    if !s.contains(['\\', '\t', '\n', '\r']) {
        return Cow::Borrowed(s);
    }
    let mut out = String::with_capacity(s.len() + 4);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    Cow::Owned(out)
}

pub(crate) fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_bucket_matches_formula() {
        let q = Quantization::log_bucket();
        // 10 * log10(5451) = 37.365...
        assert_eq!(q.apply("5450.0"), "num:b37");
        assert_eq!(q.apply("0"), "num:b0");
        assert_eq!(q.apply("-5450"), "num:-b37");
        assert_eq!(q.apply("tcp"), "tcp");
        assert_eq!(Quantization::Raw.apply("5450.0"), "5450.0");
    }

    #[test]
    fn quantization_parses_from_text() {
        assert_eq!("raw".parse::<Quantization>().unwrap(), Quantization::Raw);
        assert_eq!(
            "log-bucket:4".parse::<Quantization>().unwrap(),
            Quantization::LogBucket { per_decade: 4 }
        );
        assert!("log-bucket:0".parse::<Quantization>().is_err());
        for q in [Quantization::Raw, Quantization::log_bucket()] {
            assert_eq!(q.to_string().parse::<Quantization>().unwrap(), q);
        }
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let v = Vocabulary::from_tokens(
            ["tcp", "a\tb", "back\\slash", "line\nbreak", "udp"].map(Cow::Borrowed),
            Quantization::Raw,
        );
        let text = v.to_text();
        let back = Vocabulary::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(text.starts_with("#quantization\traw\n0\t[PAD]\n1\t[UNK]\n2\t[CLS]\n3\t[SEP]\n4\ttcp\n"));
    }

    #[test]
    fn rejects_missing_specials() {
        let err = Vocabulary::read_from("#quantization\traw\n0\ttcp\n".as_bytes()).unwrap_err();
        assert!(matches!(err, TokenizerError::BadVocabFile(_)));
    }
}
