//! Net-flow CSV ingestion.
//!
//! Each dataset is described by a [`Schema`] declared in a manifest file. Parsing
//! keeps feature columns in order, drops ignored columns and folds the label
//! column into a binary [`Label`].

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: row {row} has {found} fields, schema `{dataset}` expects {expected}")]
    MalformedRow {
        path: String,
        dataset: String,
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("schema `{0}` must declare exactly one label column")]
    MissingLabelColumn(String),
    #[error("schema `{dataset}` declares column `{column}` more than once")]
    DuplicateColumn { dataset: String, column: String },
    #[error("delimiter must be a single ASCII character, got {0:?}")]
    BadDelimiter(char),
    #[error("table is empty")]
    EmptyTable,
    #[error("invalid schema manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// How a schema column is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Label,
    Ignored,
    /// Resolved to numeric or categorical by [`column_kinds`].
    Auto,
}

/// Resolved kind of a feature column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub dataset_name: String,
    pub columns: Vec<Column>,
    pub label_normal_values: BTreeSet<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
}

impl Schema {
    /// Builds and validates a schema.
    pub fn new(
        dataset_name: impl Into<String>,
        columns: Vec<Column>,
        label_normal_values: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, IngestError> {
        let schema = Self {
            dataset_name: dataset_name.into(),
            columns,
            label_normal_values: label_normal_values
                .into_iter()
                .map(|v| fold_label(&v.into()))
                .collect(),
            delimiter: ',',
            has_header: false,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_header(mut self, has_header: bool) -> Self {
        self.has_header = has_header;
        self
    }

    pub fn with_delimiter(mut self, delimiter: char) -> Result<Self, IngestError> {
        self.delimiter = delimiter;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let labels = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Label)
            .count();
        if labels != 1 {
            return Err(IngestError::MissingLabelColumn(self.dataset_name.clone()));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(IngestError::DuplicateColumn {
                    dataset: self.dataset_name.clone(),
                    column: c.name.clone(),
                });
            }
        }
        if !self.delimiter.is_ascii() || self.delimiter == '"' {
            return Err(IngestError::BadDelimiter(self.delimiter));
        }
        Ok(())
    }

    pub fn label_index(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.kind == ColumnKind::Label)
            .expect("validated schema has a label column")
    }

    /// Feature columns in record order (label and ignored columns removed).
    pub fn feature_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns
            .iter()
            .filter(|c| !matches!(c.kind, ColumnKind::Label | ColumnKind::Ignored))
    }

    pub fn feature_count(&self) -> usize {
        self.feature_columns().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Attack,
}

impl Label {
    /// Class index used by the classifier: normal = 0, attack = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Attack => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Self {
        if idx == 0 {
            Label::Normal
        } else {
            Label::Attack
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Attack => "attack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowRecord {
    pub values: Vec<String>,
    pub label: Label,
    pub source: String,
}

impl FlowRecord {
    pub fn new(values: Vec<String>, label: Label, source: impl Into<String>) -> Self {
        Self {
            values,
            label,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTable {
    pub schema: Schema,
    pub records: Vec<FlowRecord>,
}

impl FlowTable {
    pub fn new(schema: Schema, records: Vec<FlowRecord>) -> Self {
        Self { schema, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Serializes back to CSV under the table's own schema.
    ///
    /// Ignored columns are written as empty fields and the label column
    /// carries the first normal value or `attack`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(self.schema.delimiter as u8)
            .has_headers(false)
            .from_writer(writer);
        if self.schema.has_header {
            w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        }
        let normal = self
            .schema
            .label_normal_values
            .iter()
            .next()
            .map(String::as_str)
            .unwrap_or("normal");
        let mut row: Vec<&str> = Vec::with_capacity(self.schema.columns.len());
        for record in &self.records {
            row.clear();
            let mut values = record.values.iter();
            for col in &self.schema.columns {
                row.push(match col.kind {
                    ColumnKind::Label => match record.label {
                        Label::Normal => normal,
                        Label::Attack => "attack",
                    },
                    ColumnKind::Ignored => "",
                    _ => values.next().map(String::as_str).unwrap_or(""),
                });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Case-folds, trims and strips one trailing `.` (KDD99 writes `normal.`).
fn fold_label(raw: &str) -> String {
    let t = raw.trim().to_lowercase();
    t.strip_suffix('.').unwrap_or(&t).trim().to_string()
}

pub fn normalize_label(raw: &str, schema: &Schema) -> Label {
    if schema.label_normal_values.contains(&fold_label(raw)) {
        Label::Normal
    } else {
        Label::Attack
    }
}

pub fn parse_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<FlowTable, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_reader(file, schema, &path.display().to_string())
}

/// Parses CSV from any reader; `origin` is used in error messages.
pub fn parse_reader<R: Read>(
    reader: R,
    schema: &Schema,
    origin: &str,
) -> Result<FlowTable, IngestError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let expected = schema.columns.len();
    let label_idx = schema.label_index();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|source| IngestError::Csv {
            path: origin.to_string(),
            source,
        })?;
        if i == 0 && schema.has_header {
            continue;
        }
        let line = row.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if row.len() != expected {
            return Err(IngestError::MalformedRow {
                path: origin.to_string(),
                dataset: schema.dataset_name.clone(),
                row: line,
                found: row.len(),
                expected,
            });
        }
        let values = schema
            .columns
            .iter()
            .zip(row.iter())
            .filter(|(c, _)| !matches!(c.kind, ColumnKind::Label | ColumnKind::Ignored))
            .map(|(_, v)| v.to_string())
            .collect();
        records.push(FlowRecord {
            values,
            label: normalize_label(&row[label_idx], schema),
            source: schema.dataset_name.clone(),
        });
    }
    Ok(FlowTable::new(schema.clone(), records))
}

/// True iff `s` parses as a finite decimal number.
pub fn parses_finite(s: &str) -> bool {
    s.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false)
}

/// Resolved numeric/categorical kind per feature column.
pub fn column_kinds(table: &FlowTable) -> Result<Vec<FeatureKind>, IngestError> {
    if table.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    let kinds = table
        .schema
        .feature_columns()
        .enumerate()
        .map(|(j, col)| match col.kind {
            ColumnKind::Numeric => FeatureKind::Numeric,
            ColumnKind::Categorical => FeatureKind::Categorical,
            _ => {
                let mut non_empty = table
                    .records
                    .iter()
                    .filter_map(|r| r.values.get(j))
                    .filter(|v| !v.trim().is_empty())
                    .peekable();
                if non_empty.peek().is_some() && non_empty.all(|v| parses_finite(v)) {
                    FeatureKind::Numeric
                } else {
                    FeatureKind::Categorical
                }
            }
        })
        .collect();
    Ok(kinds)
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    #[serde(rename = "dataset")]
    datasets: Vec<Schema>,
}

/// Loads a TOML schema manifest with one `[[dataset]]` table per dataset.
pub fn load_schema_manifest(path: impl AsRef<Path>) -> Result<Vec<Schema>, IngestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_schema_manifest(&text)
}

pub fn parse_schema_manifest(text: &str) -> Result<Vec<Schema>, IngestError> {
    let file: ManifestFile =
        toml::from_str(text).map_err(|e| IngestError::Manifest(e.to_string()))?;
    let mut names = HashSet::new();
    let mut out = Vec::with_capacity(file.datasets.len());
    for mut schema in file.datasets {
        if !names.insert(schema.dataset_name.clone()) {
            return Err(IngestError::Manifest(format!(
                "dataset `{}` declared twice",
                schema.dataset_name
            )));
        }
        schema.label_normal_values = schema
            .label_normal_values
            .iter()
            .map(|v| fold_label(v))
            .collect();
        schema.validate()?;
        out.push(schema);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_schema() -> Schema {
        Schema::new(
            "toy",
            vec![
                Column::new("duration", ColumnKind::Numeric),
                Column::new("proto", ColumnKind::Categorical),
                Column::new("service", ColumnKind::Auto),
                Column::new("class", ColumnKind::Label),
                Column::new("difficulty", ColumnKind::Ignored),
            ],
            ["normal"],
        )
        .unwrap()
    }

    #[test]
    fn label_folding() {
        let s = small_schema();
        assert_eq!(normalize_label("normal.", &s), Label::Normal);
        assert_eq!(normalize_label("NORMAL", &s), Label::Normal);
        assert_eq!(normalize_label("  Normal \n", &s), Label::Normal);
        assert_eq!(normalize_label("neptune", &s), Label::Attack);
        assert_eq!(normalize_label("", &s), Label::Attack);
    }

    #[test]
    fn drops_label_and_ignored_columns() {
        let t = parse_reader("0,tcp,http,normal,21\n5,udp,dns,smurf.,3\n".as_bytes(), &small_schema(), "mem")
            .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.records[0].values, ["0", "tcp", "http"]);
        assert_eq!(t.records[0].label, Label::Normal);
        assert_eq!(t.records[1].label, Label::Attack);
        assert_eq!(t.records[1].source, "toy");
    }

    #[test]
    fn header_only_file_is_empty_table() {
        let s = small_schema().with_header(true);
        let t = parse_reader("duration,proto,service,class,difficulty\n".as_bytes(), &s, "mem").unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse_reader("0,tcp,http,normal,21\n1,tcp,normal,2\n".as_bytes(), &small_schema(), "f.csv")
            .unwrap_err();
        match err {
            IngestError::MalformedRow { row, found, expected, .. } => {
                assert_eq!((row, found, expected), (2, 4, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_needs_exactly_one_label() {
        let err = Schema::new("x", vec![Column::new("a", ColumnKind::Numeric)], ["normal"]).unwrap_err();
        assert!(matches!(err, IngestError::MissingLabelColumn(_)));
        let err = Schema::new(
            "x",
            vec![Column::new("a", ColumnKind::Label), Column::new("a", ColumnKind::Numeric)],
            ["normal"],
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::DuplicateColumn { .. }));
    }

    #[test]
    fn quoted_fields_keep_delimiter() {
        let t = parse_reader("1,\"tcp,x\",http,normal,0\n".as_bytes(), &small_schema(), "mem").unwrap();
        assert_eq!(t.records[0].values[1], "tcp,x");
    }

    #[test]
    fn auto_kinds_are_inferred() {
        let mut schema = small_schema();
        schema.columns[0].kind = ColumnKind::Auto;
        let t = parse_reader(
            "0,tcp,1.5,normal,0\n181,udp,NaN-like text,normal,0\n5450,icmp,2,normal,0\n".as_bytes(),
            &schema,
            "mem",
        )
        .unwrap();
        let kinds = column_kinds(&t).unwrap();
        assert_eq!(
            kinds,
            [FeatureKind::Numeric, FeatureKind::Categorical, FeatureKind::Categorical]
        );
    }

    #[test]
    fn column_kinds_rejects_empty() {
        let t = FlowTable::new(small_schema(), vec![]);
        assert!(matches!(column_kinds(&t), Err(IngestError::EmptyTable)));
    }

    #[test]
    fn manifest_parses_and_folds_labels() {
        let text = r#"
            [[dataset]]
            dataset_name = "kdd99"
            has_header = false
            label_normal_values = ["Normal."]
            columns = [
                { name = "duration", kind = "numeric" },
                { name = "protocol_type", kind = "categorical" },
                { name = "label", kind = "label" },
            ]
        "#;
        let schemas = parse_schema_manifest(text).unwrap();
        assert_eq!(schemas.len(), 1);
        assert_eq!(schemas[0].delimiter, ',');
        assert!(schemas[0].label_normal_values.contains("normal"));
        assert_eq!(schemas[0].feature_count(), 2);
    }
}
