//! On-disk layouts: tables as `<name>.csv` plus `<name>.schema.json`, and
//! model directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowdetect::ingest::{parse_dataset, FlowTable, Schema};
use flowdetect::model::{load_adapter, load_checkpoint, save_adapter, save_checkpoint, TokenizerMeta};
use flowdetect::train::{EpochRecord, TrainConfig, TrainedModel};
use flowdetect::FlowTokenizer;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const SCHEMA_SUFFIX: &str = ".schema.json";

pub fn schema_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}{SCHEMA_SUFFIX}"))
}

/// Writes `<dir>/<dataset>.csv` and its schema sidecar; returns both paths.
pub fn save_table(dir: &Path, table: &FlowTable) -> Result<[PathBuf; 2]> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}.csv", table.schema.dataset_name));
    let file = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    table.write_csv(BufWriter::new(file))?;
    let sp = schema_path(&csv_path);
    write_json_pretty(&sp, &table.schema)?;
    Ok([csv_path, sp])
}

pub fn load_table(csv_path: &Path) -> Result<FlowTable> {
    let sp = schema_path(csv_path);
    let schema: Schema = read_json(&sp).with_context(|| format!("table {} needs a schema sidecar", csv_path.display()))?;
    Ok(parse_dataset(csv_path, &schema)?)
}

/// Every table in `dir` that has a schema sidecar, by file name.
pub fn load_table_dir(dir: &Path) -> Result<Vec<(PathBuf, FlowTable)>> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && schema_path(p).exists())
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        bail!("no tables (<name>.csv + <name>{SCHEMA_SUFFIX}) in {}", dir.display());
    }
    csvs.into_iter().map(|p| Ok((p.clone(), load_table(&p)?))).collect()
}

/// Tables from a mix of table files and directories of tables.
pub fn load_tables(paths: &[PathBuf]) -> Result<Vec<(PathBuf, FlowTable)>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(load_table_dir(p)?);
        } else {
            out.push((p.clone(), load_table(p)?));
        }
    }
    Ok(out)
}

pub fn write_json_pretty<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub const MODEL_FILE: &str = "model.json";
pub const ADAPTER_FILE: &str = "adapter.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const COLUMN_STATS_FILE: &str = "column_stats.json";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Per-source numeric column deviations from the training split.
pub type ColumnStats = BTreeMap<String, Vec<f64>>;

pub struct ModelDir {
    pub model: TrainedModel,
    pub tokenizer: FlowTokenizer,
    pub train_config: TrainConfig,
    pub column_stats: ColumnStats,
}

pub fn save_model_dir(
    dir: &Path,
    model: &TrainedModel,
    tokenizer: &FlowTokenizer,
    config: &TrainConfig,
    stats: &ColumnStats,
    history: &[EpochRecord],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let vocab = dir.join(VOCAB_FILE);
    fs::write(&vocab, tokenizer.vocab_text())?;
    written.push(vocab);
    let meta = TokenizerMeta {
        kind: tokenizer.kind(),
        seq_len: tokenizer.seq_len(),
        quantization: tokenizer.quantization().map(|q| q.to_string()),
        vocab_file: VOCAB_FILE.into(),
    };
    let ckpt = dir.join(MODEL_FILE);
    save_checkpoint(&ckpt, &model.params, Some(meta))?;
    written.push(ckpt);
    if let Some(a) = &model.adapter {
        let p = dir.join(ADAPTER_FILE);
        save_adapter(&p, a)?;
        written.push(p);
    }
    for (name, value) in [
        (TRAIN_CONFIG_FILE, serde_json::to_value(config)?),
        (COLUMN_STATS_FILE, serde_json::to_value(stats)?),
    ] {
        let p = dir.join(name);
        write_json_pretty(&p, &value)?;
        written.push(p);
    }
    let h = dir.join(HISTORY_FILE);
    write_jsonl(&h, history)?;
    written.push(h);
    Ok(written)
}

pub fn load_model_dir(dir: &Path) -> Result<ModelDir> {
    let ckpt = load_checkpoint(&dir.join(MODEL_FILE)).with_context(|| format!("loading model from {}", dir.display()))?;
    let Some(meta) = ckpt.tokenizer else {
        bail!("{} has no tokenizer block", dir.join(MODEL_FILE).display());
    };
    let tokenizer = FlowTokenizer::read_vocab(meta.kind, &dir.join(&meta.vocab_file), meta.seq_len)?;
    if tokenizer.vocab_size() != ckpt.config.vocab_size {
        bail!(
            "vocabulary has {} entries but the model expects {}",
            tokenizer.vocab_size(),
            ckpt.config.vocab_size
        );
    }
    let adapter_path = dir.join(ADAPTER_FILE);
    let adapter = if adapter_path.exists() {
        Some(load_adapter(&adapter_path, &ckpt.params)?)
    } else {
        None
    };
    Ok(ModelDir {
        model: TrainedModel {
            params: ckpt.params,
            adapter,
        },
        tokenizer,
        train_config: read_json(&dir.join(TRAIN_CONFIG_FILE))?,
        column_stats: read_json(&dir.join(COLUMN_STATS_FILE))?,
    })
}
