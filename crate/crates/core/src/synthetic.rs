//! Deterministic synthetic flow tables.
//!
//! [`separable_corpus`] is a toy task where the label is fully determined by
//! one categorical column. [`styled_table`] imitates the column layout of the
//! four public IDS corpora (width, categorical prefix, numeric formats) for
//! tokenizer comparisons.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Column, ColumnKind, FlowRecord, FlowTable, Label, Schema};

/// Value of the `flag` column that marks an attack in [`separable_corpus`].
pub const ATTACK_FLAG: &str = "flagX";
const BENIGN_FLAGS: [&str; 4] = ["SF", "S0", "REJ", "RSTO"];
const PROTOCOLS: [&str; 3] = ["tcp", "udp", "icmp"];
const SERVICES: [&str; 8] = ["http", "smtp", "ftp_data", "domain_u", "private", "ecr_i", "telnet", "other"];

pub const SEPARABLE_SOURCE: &str = "synthetic";

pub fn separable_schema() -> Schema {
    let cols = [
        ("duration", ColumnKind::Numeric),
        ("protocol_type", ColumnKind::Categorical),
        ("service", ColumnKind::Categorical),
        ("flag", ColumnKind::Categorical),
        ("src_bytes", ColumnKind::Numeric),
        ("dst_bytes", ColumnKind::Numeric),
        ("rate", ColumnKind::Numeric),
        ("label", ColumnKind::Label),
    ];
    Schema::new(
        SEPARABLE_SOURCE,
        cols.iter().map(|(n, k)| Column::new(*n, *k)).collect(),
        ["normal"],
    )
    .expect("static schema is valid")
}

/// `n` flows, balanced in expectation: attack iff `flag` (the fourth feature)
/// equals [`ATTACK_FLAG`]. Every other column is independent of the label.
pub fn separable_corpus(n: usize, seed: u64) -> FlowTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| {
            let attack = rng.gen_bool(0.5);
            let flag = if attack {
                ATTACK_FLAG
            } else {
                BENIGN_FLAGS[rng.gen_range(0..BENIGN_FLAGS.len())]
            };
            let values = vec![
                rng.gen_range(0..60u32).to_string(),
                PROTOCOLS.choose(&mut rng).unwrap().to_string(),
                SERVICES.choose(&mut rng).unwrap().to_string(),
                flag.to_string(),
                rng.gen_range(0..1_000_000u32).to_string(),
                rng.gen_range(0..1_000_000u32).to_string(),
                format!("{:.2}", rng.gen_range(0.0..1.0f64)),
            ];
            let label = if attack { Label::Attack } else { Label::Normal };
            FlowRecord::new(values, label, SEPARABLE_SOURCE)
        })
        .collect();
    FlowTable::new(separable_schema(), records)
}

/// Column layout of a public IDS corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetStyle {
    NslKdd,
    Kdd99,
    UnswNb15,
    XIiotid,
}

impl DatasetStyle {
    pub const ALL: [DatasetStyle; 4] = [
        DatasetStyle::NslKdd,
        DatasetStyle::Kdd99,
        DatasetStyle::UnswNb15,
        DatasetStyle::XIiotid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetStyle::NslKdd => "nsl-kdd",
            DatasetStyle::Kdd99 => "kdd99",
            DatasetStyle::UnswNb15 => "unsw-nb15",
            DatasetStyle::XIiotid => "x-iiotid",
        }
    }

    /// Number of feature columns (label and ignored columns excluded).
    pub fn feature_count(self) -> usize {
        match self {
            DatasetStyle::NslKdd | DatasetStyle::Kdd99 => 41,
            DatasetStyle::UnswNb15 => 43,
            DatasetStyle::XIiotid => 65,
        }
    }

    fn categorical_prefix(self) -> usize {
        match self {
            DatasetStyle::NslKdd | DatasetStyle::Kdd99 | DatasetStyle::UnswNb15 => 3,
            DatasetStyle::XIiotid => 6,
        }
    }

    fn normal_label(self) -> &'static str {
        match self {
            DatasetStyle::NslKdd => "normal",
            DatasetStyle::Kdd99 => "normal.",
            DatasetStyle::UnswNb15 => "0",
            DatasetStyle::XIiotid => "Normal",
        }
    }

    fn attack_labels(self) -> &'static [&'static str] {
        match self {
            DatasetStyle::NslKdd => &["neptune", "smurf", "satan", "ipsweep", "portsweep"],
            DatasetStyle::Kdd99 => &["neptune.", "smurf.", "back.", "teardrop."],
            DatasetStyle::UnswNb15 => &["1"],
            DatasetStyle::XIiotid => &["Attack"],
        }
    }

    pub fn schema(self) -> Schema {
        let mut cols: Vec<Column> = (0..self.feature_count())
            .map(|j| {
                let kind = if j < self.categorical_prefix() {
                    ColumnKind::Categorical
                } else {
                    ColumnKind::Numeric
                };
                Column::new(format!("f{j:02}"), kind)
            })
            .collect();
        cols.push(Column::new("class", ColumnKind::Label));
        if self == DatasetStyle::NslKdd {
            cols.push(Column::new("difficulty", ColumnKind::Ignored));
        }
        Schema::new(self.name(), cols, [self.normal_label()])
            .expect("static schema is valid")
            .with_header(true)
    }
}

impl std::fmt::Display for DatasetStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DatasetStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetStyle::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown dataset style `{s}`"))
    }
}

fn numeric_cell(rng: &mut ChaCha8Rng, j: usize, attack: bool) -> String {
    match j % 4 {
        // byte and packet counters
        0 => {
            let hi = if attack { 50_000 } else { 5_000 };
            rng.gen_range(0..hi).to_string()
        }
        // rates in [0, 1] at two decimals
        1 => format!("{:.2}", rng.gen_range(0.0..1.0f64)),
        // small counts
        2 => rng.gen_range(0..256u32).to_string(),
        // durations and means with a few decimals
        _ => format!("{:.3}", rng.gen_range(0.0..100.0f64)),
    }
}

/// `n` records shaped like `style`, values drawn from `seed`.
pub fn styled_table(style: DatasetStyle, n: usize, seed: u64) -> FlowTable {
    let schema = style.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (style as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let cats: [&[&str]; 6] = [
        &PROTOCOLS,
        &SERVICES,
        &BENIGN_FLAGS,
        &["-", "dns", "ssl"],
        &["edge", "fog", "cloud"],
        &["mqtt", "coap", "http"],
    ];
    let records = (0..n)
        .map(|_| {
            let attack = rng.gen_bool(0.5);
            let values = (0..style.feature_count())
                .map(|j| {
                    if j < style.categorical_prefix() {
                        cats[j].choose(&mut rng).unwrap().to_string()
                    } else {
                        numeric_cell(&mut rng, j, attack)
                    }
                })
                .collect();
            let label = if attack { Label::Attack } else { Label::Normal };
            FlowRecord::new(values, label, style.name())
        })
        .collect();
    FlowTable::new(schema, records)
}

/// The label as the original corpus would spell it.
pub fn raw_label(style: DatasetStyle, label: Label, row: usize) -> &'static str {
    match label {
        Label::Normal => style.normal_label(),
        Label::Attack => {
            let l = style.attack_labels();
            l[row % l.len()]
        }
    }
}

/// Writes `table` as CSV with the style's raw label spellings (and a
/// difficulty column for NSL-KDD), the way the public files look.
pub fn write_styled_csv<W: std::io::Write>(
    style: DatasetStyle,
    table: &FlowTable,
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(table.schema.columns.iter().map(|c| c.name.as_str()))?;
    for (i, rec) in table.records.iter().enumerate() {
        let mut row: Vec<&str> = rec.values.iter().map(String::as_str).collect();
        row.push(raw_label(style, rec.label, i));
        if style == DatasetStyle::NslKdd {
            row.push("21");
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
