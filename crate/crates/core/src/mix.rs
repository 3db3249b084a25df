//! Joint dataset construction across several flow tables.
//!
//! Each source contributes `per_source` uniformly sampled records to a shared
//! pool which is shuffled and split 4:1 into train/validation. Test sets are
//! drawn per source from the records left over, deduplicated and kept disjoint
//! from the pool.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FlowRecord, FlowTable, Label, Schema};

/// U+241F SYMBOL FOR UNIT SEPARATOR.
pub const DEFAULT_SEPARATOR: char = '\u{241F}';
pub const FORMAT_VERSION: &str = "flowdetect-mix/1";
pub const SPLIT_POLICY: &str = "global-after-shuffle";

#[derive(Debug, Error)]
pub enum MixError {
    #[error("source `{source_name}` has {available} records, needs {needed}")]
    InsufficientRecords {
        source_name: String,
        available: usize,
        needed: usize,
    },
    #[error(transparent)]
    SeparatorCollision(#[from] SeparatorCollision),
    #[error("no source tables given")]
    NoSources,
    #[error("duplicate source name `{0}`")]
    DuplicateSource(String),
    #[error("unsupported or corrupted mix header: {0}")]
    FormatVersionMismatch(String),
    #[error("malformed split file {file}: line {line}")]
    MalformedSplit { file: String, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// First cell whose value contains the reserved separator.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("separator {separator:?} found in source `{source_name}`, row {row}, column {column}")]
pub struct SeparatorCollision {
    pub separator: char,
    pub source_name: String,
    pub row: usize,
    pub column: usize,
}

pub fn validate_separator(tables: &[FlowTable], separator: char) -> Result<(), SeparatorCollision> {
    for table in tables {
        for (row, rec) in table.records.iter().enumerate() {
            if let Some(column) = rec.values.iter().position(|v| v.contains(separator)) {
                return Err(SeparatorCollision {
                    separator,
                    source_name: table.schema.dataset_name.clone(),
                    row,
                    column,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixDataset {
    pub train: Vec<FlowRecord>,
    pub val: Vec<FlowRecord>,
    pub tests: BTreeMap<String, Vec<FlowRecord>>,
    pub schemas: Vec<Schema>,
    pub separator: char,
    pub seed: u64,
}

impl MixDataset {
    pub fn schema(&self, source: &str) -> Option<&Schema> {
        self.schemas.iter().find(|s| s.dataset_name == source)
    }

    /// Test records of one source as a table under that source's schema.
    pub fn test_table(&self, source: &str) -> Option<FlowTable> {
        Some(FlowTable::new(
            self.schema(source)?.clone(),
            self.tests.get(source)?.clone(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixConfig {
    pub per_source: usize,
    pub test_per_source: usize,
    pub seed: u64,
    pub separator: char,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            per_source: 100_000,
            test_per_source: 10_000,
            seed: 0,
            separator: DEFAULT_SEPARATOR,
        }
    }
}

pub fn build_mix(
    tables: &[FlowTable],
    per_source: usize,
    test_per_source: usize,
    seed: u64,
) -> Result<MixDataset, MixError> {
    build_mix_with(
        tables,
        &MixConfig {
            per_source,
            test_per_source,
            seed,
            separator: DEFAULT_SEPARATOR,
        },
    )
}

pub fn build_mix_with(tables: &[FlowTable], cfg: &MixConfig) -> Result<MixDataset, MixError> {
    if tables.is_empty() {
        return Err(MixError::NoSources);
    }
    let mut names = HashSet::new();
    for t in tables {
        if !names.insert(t.schema.dataset_name.as_str()) {
            return Err(MixError::DuplicateSource(t.schema.dataset_name.clone()));
        }
        let needed = cfg.per_source + cfg.test_per_source;
        if t.len() < needed {
            return Err(MixError::InsufficientRecords {
                source_name: t.schema.dataset_name.clone(),
                available: t.len(),
                needed,
            });
        }
    }
    validate_separator(tables, cfg.separator)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = Vec::with_capacity(cfg.per_source * tables.len());
    let mut leftovers = Vec::with_capacity(tables.len());
    for t in tables {
        let mut picked = index::sample(&mut rng, t.len(), cfg.per_source).into_vec();
        picked.sort_unstable();
        let mut taken = vec![false; t.len()];
        for &i in &picked {
            taken[i] = true;
            pool.push(t.records[i].clone());
        }
        let rest: Vec<usize> = (0..t.len()).filter(|&i| !taken[i]).collect();
        leftovers.push(rest);
    }
    pool.shuffle(&mut rng);
    let n_val = pool.len() / 5;
    let val = pool.split_off(pool.len() - n_val);
    let train = pool;

    let seen: HashSet<&FlowRecord> = train.iter().chain(val.iter()).collect();
    let mut tests = BTreeMap::new();
    for (t, mut rest) in tables.iter().zip(leftovers) {
        rest.shuffle(&mut rng);
        let mut chosen: HashSet<&FlowRecord> = HashSet::with_capacity(cfg.test_per_source);
        let mut test = Vec::with_capacity(cfg.test_per_source);
        for i in rest {
            if test.len() == cfg.test_per_source {
                break;
            }
            let r = &t.records[i];
            if !seen.contains(r) && chosen.insert(r) {
                test.push(r.clone());
            }
        }
        if test.len() < cfg.test_per_source {
            return Err(MixError::InsufficientRecords {
                source_name: t.schema.dataset_name.clone(),
                available: test.len(),
                needed: cfg.test_per_source,
            });
        }
        tests.insert(t.schema.dataset_name.clone(), test);
    }

    Ok(MixDataset {
        train,
        val,
        tests,
        schemas: tables.iter().map(|t| t.schema.clone()).collect(),
        separator: cfg.separator,
        seed: cfg.seed,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct MixHeader {
    format_version: String,
    seed: u64,
    separator_code_point: u32,
    split_policy: String,
    train_records: usize,
    val_records: usize,
    sources: Vec<SourceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SourceEntry {
    name: String,
    test_file: String,
    test_records: usize,
    schema: Schema,
}

const HEADER_FILE: &str = "header.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MixError + '_ {
    move |source| MixError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn write_split(path: &Path, records: &[FlowRecord], sep: char) -> Result<(), MixError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    for r in records {
        line.clear();
        line.push_str(&escape_field(&r.source));
        line.push(sep);
        line.push_str(r.label.as_str());
        for v in &r.values {
            line.push(sep);
            line.push_str(&escape_field(v));
        }
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_split(path: &Path, sep: char) -> Result<Vec<FlowRecord>, MixError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let malformed = || MixError::MalformedSplit {
            file: path.display().to_string(),
            line: n + 1,
        };
        let mut fields = line.split(sep);
        let source = unescape_field(fields.next().ok_or_else(malformed)?);
        let label = match fields.next() {
            Some("normal") => Label::Normal,
            Some("attack") => Label::Attack,
            _ => return Err(malformed()),
        };
        let values = fields.map(unescape_field).collect();
        out.push(FlowRecord { values, label, source });
    }
    Ok(out)
}

fn test_file_name(i: usize, source: &str) -> String {
    let safe: String = source
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("test_{i:02}_{safe}.txt")
}

/// Writes `header.json`, `train.txt`, `val.txt` and one test file per source.
pub fn serialize_mix(mix: &MixDataset, dir: impl AsRef<Path>) -> Result<(), MixError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut sources = Vec::new();
    for (i, schema) in mix.schemas.iter().enumerate() {
        let name = &schema.dataset_name;
        let records = mix.tests.get(name).map(Vec::as_slice).unwrap_or(&[]);
        let test_file = test_file_name(i, name);
        write_split(&dir.join(&test_file), records, mix.separator)?;
        sources.push(SourceEntry {
            name: name.clone(),
            test_file,
            test_records: records.len(),
            schema: schema.clone(),
        });
    }
    write_split(&dir.join("train.txt"), &mix.train, mix.separator)?;
    write_split(&dir.join("val.txt"), &mix.val, mix.separator)?;
    let header = MixHeader {
        format_version: FORMAT_VERSION.to_string(),
        seed: mix.seed,
        separator_code_point: mix.separator as u32,
        split_policy: SPLIT_POLICY.to_string(),
        train_records: mix.train.len(),
        val_records: mix.val.len(),
        sources,
    };
    let path = dir.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_mix(dir: impl AsRef<Path>) -> Result<MixDataset, MixError> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let header: MixHeader =
        serde_json::from_str(&text).map_err(|e| MixError::FormatVersionMismatch(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(MixError::FormatVersionMismatch(format!(
            "expected {FORMAT_VERSION}, found {}",
            header.format_version
        )));
    }
    let separator = char::from_u32(header.separator_code_point).ok_or_else(|| {
        MixError::FormatVersionMismatch(format!("bad separator {}", header.separator_code_point))
    })?;
    let train = read_split(&dir.join("train.txt"), separator)?;
    let val = read_split(&dir.join("val.txt"), separator)?;
    if train.len() != header.train_records || val.len() != header.val_records {
        return Err(MixError::FormatVersionMismatch("split sizes disagree with header".into()));
    }
    let mut tests = BTreeMap::new();
    let mut schemas = Vec::new();
    for s in header.sources {
        let records = read_split(&dir.join(&s.test_file), separator)?;
        if records.len() != s.test_records {
            return Err(MixError::FormatVersionMismatch(format!(
                "test split {} size disagrees with header",
                s.name
            )));
        }
        tests.insert(s.name, records);
        schemas.push(s.schema);
    }
    Ok(MixDataset {
        train,
        val,
        tests,
        schemas,
        separator,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Column, ColumnKind};

    fn source(name: &str, n: usize, width: usize) -> FlowTable {
        let mut cols: Vec<Column> = (0..width)
            .map(|i| Column::new(format!("f{i}"), ColumnKind::Numeric))
            .collect();
        cols.push(Column::new("label", ColumnKind::Label));
        let schema = Schema::new(name, cols, ["normal"]).unwrap();
        let records = (0..n)
            .map(|i| {
                let label = if i % 3 == 0 { Label::Attack } else { Label::Normal };
                FlowRecord::new((0..width).map(|j| format!("{}", i * 10 + j)).collect(), label, name)
            })
            .collect();
        FlowTable::new(schema, records)
    }

    #[test]
    fn ratio_on_small_single_source() {
        let mix = build_mix(&[source("a", 20, 3)], 10, 5, 1).unwrap();
        assert_eq!((mix.train.len(), mix.val.len()), (8, 2));
        assert_eq!(mix.tests["a"].len(), 5);
    }

    #[test]
    fn non_multiple_of_five_floors_validation() {
        let mix = build_mix(&[source("a", 30, 2)], 13, 0, 3).unwrap();
        assert_eq!((mix.train.len(), mix.val.len()), (11, 2));
    }

    #[test]
    fn same_seed_same_splits() {
        let tables = [source("a", 50, 3), source("b", 40, 5)];
        let x = build_mix(&tables, 20, 10, 9).unwrap();
        let y = build_mix(&tables, 20, 10, 9).unwrap();
        assert_eq!(x, y);
        let z = build_mix(&tables, 20, 10, 10).unwrap();
        assert_ne!(x.train, z.train);
    }

    #[test]
    fn heterogeneous_widths_coexist() {
        let mix = build_mix(&[source("a", 30, 3), source("b", 30, 7)], 10, 5, 2).unwrap();
        let widths: HashSet<usize> = mix.train.iter().map(|r| r.values.len()).collect();
        assert_eq!(widths, HashSet::from([3, 7]));
    }

    #[test]
    fn insufficient_records_names_source() {
        let err = build_mix(&[source("a", 30, 2), source("tiny", 5, 2)], 10, 5, 0).unwrap_err();
        match err {
            MixError::InsufficientRecords { source_name, available, needed } => {
                assert_eq!((source_name.as_str(), available, needed), ("tiny", 5, 15));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_never_leak_into_tests() {
        // Every record appears twice; the test split must skip copies of pool records.
        let mut t = source("dup", 20, 2);
        let copy = t.records.clone();
        t.records.extend(copy);
        let mix = build_mix(&[t], 10, 5, 4).unwrap();
        let pool: HashSet<&FlowRecord> = mix.train.iter().chain(&mix.val).collect();
        let test = &mix.tests["dup"];
        assert!(test.iter().all(|r| !pool.contains(r)));
        let uniq: HashSet<&FlowRecord> = test.iter().collect();
        assert_eq!(uniq.len(), test.len());
    }

    #[test]
    fn separator_collisions_are_located() {
        let mut t = source("a", 4, 3);
        t.records[2].values[1] = format!("x{DEFAULT_SEPARATOR}y");
        let err = validate_separator(&[source("ok", 3, 2), t.clone()], DEFAULT_SEPARATOR).unwrap_err();
        assert_eq!((err.source_name.as_str(), err.row, err.column), ("a", 2, 1));
        assert!(matches!(
            build_mix(&[t], 1, 1, 0),
            Err(MixError::SeparatorCollision(_))
        ));
    }

    #[test]
    fn comma_separator_checks_parsed_values() {
        // Parsed values of plain CSV hold no commas; quoted ones can.
        assert!(validate_separator(&[source("a", 10, 3)], ',').is_ok());
        let mut t = source("a", 3, 2);
        t.records[0].values[0] = "1,2".into();
        assert!(validate_separator(&[t], ',').is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut a = source("a", 30, 3);
        a.records[0].values[0] = "multi\nline\\x".into();
        let mix = build_mix(&[a, source("b c", 30, 4)], 12, 6, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        serialize_mix(&mix, dir.path()).unwrap();
        let back = load_mix(dir.path()).unwrap();
        assert_eq!(back, mix);
    }

    #[test]
    fn corrupted_header_is_version_mismatch() {
        let mix = build_mix(&[source("a", 20, 3)], 10, 5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        serialize_mix(&mix, dir.path()).unwrap();
        let hp = dir.path().join(HEADER_FILE);
        let text = fs::read_to_string(&hp).unwrap();
        fs::write(&hp, text.replace(FORMAT_VERSION, "flowdetect-mix/99")).unwrap();
        assert!(matches!(load_mix(dir.path()), Err(MixError::FormatVersionMismatch(_))));
        fs::write(&hp, "{ not json").unwrap();
        assert!(matches!(load_mix(dir.path()), Err(MixError::FormatVersionMismatch(_))));
    }
}
