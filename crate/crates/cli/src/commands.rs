use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use flowdetect::ingest::{column_kinds, load_schema_manifest, parse_dataset, FlowRecord, FlowTable};
use flowdetect::mix::{build_mix_with, load_mix, serialize_mix, MixConfig, MixDataset, SPLIT_POLICY};
use flowdetect::model::LoraTarget;
use flowdetect::perturb::{column_stds, perturb_table, perturb_table_with_stats, NoiseKind, PerturbSpec};
use flowdetect::synthetic::{separable_corpus, styled_table, write_styled_csv, DatasetStyle, SEPARABLE_SOURCE};
use flowdetect::tokenizer::{corpus_stats, CorpusStats, FlowTokenizer, TokenizerKind};
use flowdetect::train::{
    ablation_run, config_hash, evaluate, family_specs, render_ablation, render_reports, render_stats,
    robustness_run, sft_train, AblationData, AblationFlags, AblationSettings, EncodedSplit, EvalReport, RunMeta,
    TrainConfig, TrainedModel, PRETRAINED_LR,
};
use serde::Serialize;

use crate::config::{set, FileConfig};
use crate::manifest::ManifestBuilder;
use crate::store::{self, ColumnStats};
use crate::{
    AblateArgs, BuildMixArgs, Cli, Command, EvalArgs, IngestArgs, PerturbArgs, PerturbFlags, RobustnessArgs,
    SynthArgs, TestSource, TokenizerFlags, TokreportArgs, TrainArgs, TrainFlags,
};

struct Ctx {
    out: PathBuf,
    seed: u64,
    file: FileConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = file.resolve_seed(cli.seed)?;
    let out = cli.out.ok_or_else(|| anyhow!("--out <DIR> is required"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx { out, seed, file };
    let mut manifest = ManifestBuilder::new(command_name(&cli.command), seed);
    if let Some(c) = &cli.config {
        manifest.input(c);
    }
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a, &mut manifest)?,
        Command::BuildMix(a) => build_mix_cmd(&ctx, a, &mut manifest)?,
        Command::Train(a) => train(&ctx, a, &mut manifest)?,
        Command::Eval(a) => eval(&ctx, a, &mut manifest)?,
        Command::Perturb(a) => perturb(&ctx, a, &mut manifest)?,
        Command::Tokreport(a) => tokreport(&ctx, a, &mut manifest)?,
        Command::Ablate(a) => ablate(&ctx, a, &mut manifest)?,
        Command::Robustness(a) => robustness(&ctx, a, &mut manifest)?,
        Command::Synth(a) => synth(&ctx, a, &mut manifest)?,
    }
    manifest.finish(&ctx.out)?;
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest(_) => "ingest",
        Command::BuildMix(_) => "build-mix",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Perturb(_) => "perturb",
        Command::Tokreport(_) => "tokreport",
        Command::Ablate(_) => "ablate",
        Command::Robustness(_) => "robustness",
        Command::Synth(_) => "synth",
    }
}

fn write_text(path: &Path, text: &str, m: &mut ManifestBuilder) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    m.output(path);
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T, m: &mut ManifestBuilder) -> Result<()> {
    store::write_json_pretty(path, value)?;
    m.output(path);
    Ok(())
}

fn ingest(ctx: &Ctx, a: IngestArgs, m: &mut ManifestBuilder) -> Result<()> {
    let schemas = load_schema_manifest(&a.manifest)?;
    m.input(&a.manifest);
    let mut counts = BTreeMap::new();
    for (i, input) in a.inputs.iter().enumerate() {
        let (name, path) = match input.split_once('=') {
            Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
            None => (None, PathBuf::from(input)),
        };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        let schema = match name.or(stem) {
            Some(n) if schemas.iter().any(|s| s.dataset_name == n) => {
                schemas.iter().find(|s| s.dataset_name == n).unwrap()
            }
            _ => schemas.get(i).ok_or_else(|| {
                anyhow!(
                    "no schema for {}: name it NAME=PATH with NAME in the manifest",
                    path.display()
                )
            })?,
        };
        if !path.exists() {
            bail!("input file {} does not exist", path.display());
        }
        let table = parse_dataset(&path, schema)?;
        m.input(&path);
        counts.insert(schema.dataset_name.clone(), table.len());
        for p in store::save_table(&ctx.out, &table)? {
            m.output(&p);
        }
        eprintln!("{}: {} records", schema.dataset_name, table.len());
    }
    m.note("records", counts)?;
    Ok(())
}

fn build_mix_cmd(ctx: &Ctx, a: BuildMixArgs, m: &mut ManifestBuilder) -> Result<()> {
    let mut section = ctx.file.mix.clone();
    set(&mut section.per_source, a.per_source);
    set(&mut section.test_per_source, a.test_per_source);
    let loaded = store::load_tables(&a.tables)?;
    for (p, _) in &loaded {
        m.input(p);
        m.input(&store::schema_path(p));
    }
    let tables: Vec<FlowTable> = loaded.into_iter().map(|(_, t)| t).collect();
    let cfg = MixConfig {
        per_source: section.per_source,
        test_per_source: section.test_per_source,
        seed: ctx.seed,
        ..MixConfig::default()
    };
    m.config(&section)?;
    let mix = build_mix_with(&tables, &cfg)?;
    serialize_mix(&mix, &ctx.out)?;
    for entry in fs::read_dir(&ctx.out)? {
        let p = entry?.path();
        if p.file_name().is_some_and(|n| n != crate::manifest::MANIFEST_FILE) {
            m.output(&p);
        }
    }
    m.note("split_policy", SPLIT_POLICY)?;
    m.note(
        "sizes",
        serde_json::json!({
            "train": mix.train.len(),
            "val": mix.val.len(),
            "test": mix.tests.iter().map(|(k, v)| (k.clone(), v.len())).collect::<BTreeMap<_, _>>(),
        }),
    )?;
    eprintln!(
        "train {} / val {} / tests {}",
        mix.train.len(),
        mix.val.len(),
        mix.tests.values().map(Vec::len).map(|n| n.to_string()).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("{x:?}: {e}")))
        .collect()
}

fn resolve_train(ctx: &Ctx, f: &TrainFlags) -> Result<TrainConfig> {
    let mut c = ctx.file.train.clone();
    c.seed = ctx.seed;
    if let Some(mode) = &f.mode {
        c.mode = mode.parse().map_err(|e: String| anyhow!(e))?;
    }
    set(&mut c.lora_rank, f.rank);
    if let Some(t) = &f.targets {
        c.lora_targets = parse_list::<LoraTarget>(t)?;
    }
    if f.lora_alpha.is_some() {
        c.lora_alpha = f.lora_alpha;
    }
    set(&mut c.learning_rate, f.lr);
    if f.pretrained_lr {
        c.learning_rate = PRETRAINED_LR;
    }
    set(&mut c.max_epochs, f.epochs);
    set(&mut c.batch_size, f.batch_size);
    set(&mut c.l2_coeff, f.l2);
    set(&mut c.early_stop_patience, f.patience);
    if f.max_steps.is_some() {
        c.max_steps = f.max_steps;
    }
    if let Some(w) = &f.class_weights {
        c.class_weights = Some(parse_list::<f64>(w)?);
    }
    set(&mut c.dropout_p, f.dropout);
    set(&mut c.d_model, f.d_model);
    set(&mut c.n_layers, f.layers);
    set(&mut c.n_heads, f.heads);
    set(&mut c.d_ff, f.d_ff);
    c.validate()?;
    Ok(c)
}

fn resolve_tokenizer(ctx: &Ctx, f: &TokenizerFlags) -> Result<crate::config::TokenizerSection> {
    let mut t = ctx.file.tokenizer.clone();
    if let Some(k) = &f.tokenizer {
        t.kind = match k.as_str() {
            "nss" => TokenizerKind::Nss,
            "subword" => TokenizerKind::Subword,
            other => bail!("unknown tokenizer `{other}` (nss | subword)"),
        };
    }
    set(&mut t.quantization, f.quantization.clone());
    set(&mut t.subword_vocab, f.subword_vocab);
    t.quantization()?;
    Ok(t)
}

fn fit_tokenizer(t: &crate::config::TokenizerSection, train: &[FlowRecord]) -> Result<FlowTokenizer> {
    Ok(match t.kind {
        TokenizerKind::Nss => FlowTokenizer::fit_nss(train, t.quantization()?)?,
        TokenizerKind::Subword => FlowTokenizer::fit_subword(train, t.subword_vocab)?,
    })
}

fn load_mix_input(dir: &Path, m: &mut ManifestBuilder) -> Result<MixDataset> {
    let mix = load_mix(dir).with_context(|| format!("loading mix from {}", dir.display()))?;
    m.input(dir);
    Ok(mix)
}

/// Training-split deviations per source, for auto-scaled perturbation later.
fn train_column_stats(mix: &MixDataset) -> Result<ColumnStats> {
    let mut out = ColumnStats::new();
    for schema in &mix.schemas {
        let records: Vec<FlowRecord> = mix
            .train
            .iter()
            .filter(|r| r.source == schema.dataset_name)
            .cloned()
            .collect();
        if records.is_empty() {
            continue;
        }
        let table = FlowTable::new(schema.clone(), records);
        let kinds = column_kinds(&table)?;
        out.insert(schema.dataset_name.clone(), column_stds(&table, &kinds));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    train: &'a TrainConfig,
    tokenizer: &'a crate::config::TokenizerSection,
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    epochs_run: usize,
    stopped_early: bool,
    steps: usize,
    trainable_params: usize,
    total_params: usize,
    vocab_size: usize,
    seq_len: usize,
    best_val_loss: f64,
    best_val_accuracy: Option<f64>,
}

fn train(ctx: &Ctx, a: TrainArgs, m: &mut ManifestBuilder) -> Result<()> {
    let cfg = resolve_train(ctx, &a.train)?;
    let tok_cfg = resolve_tokenizer(ctx, &a.tokenizer)?;
    m.config(&TrainSettings {
        train: &cfg,
        tokenizer: &tok_cfg,
    })?;
    let mix = load_mix_input(&a.mix, m)?;
    if mix.train.is_empty() {
        bail!("training split of {} is empty", a.mix.display());
    }
    let started = Instant::now();
    let tokenizer = fit_tokenizer(&tok_cfg, &mix.train)?;
    let train_split = EncodedSplit::encode(&tokenizer, &mix.train);
    let val_split = EncodedSplit::encode(&tokenizer, &mix.val);
    m.timings.insert("tokenize_seconds".into(), started.elapsed().as_secs_f64());

    let model = TrainedModel::init(&cfg, &cfg.model_config(tokenizer.vocab_size(), tokenizer.seq_len()))?;
    let trainable = model.trainable_count();
    let total = model.params.param_count();
    let started = Instant::now();
    let outcome = sft_train(&cfg, model, &train_split, &val_split)?;
    m.timings.insert("train_seconds".into(), started.elapsed().as_secs_f64());

    let stats = train_column_stats(&mix)?;
    for p in store::save_model_dir(&ctx.out, &outcome.model, &tokenizer, &cfg, &stats, &outcome.history)? {
        m.output(&p);
    }
    let best = outcome.history.get(outcome.best_epoch.saturating_sub(1));
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        steps: outcome.steps,
        trainable_params: trainable,
        total_params: total,
        vocab_size: tokenizer.vocab_size(),
        seq_len: tokenizer.seq_len(),
        best_val_loss: best.map_or(f64::NAN, |h| h.val_loss),
        best_val_accuracy: best.and_then(|h| h.val_accuracy),
    };
    write_json(&ctx.out.join("train_summary.json"), &summary, m)?;
    for h in &outcome.history {
        eprintln!(
            "epoch {:>2}  train {:.4}  val {:.4}  acc {}",
            h.epoch,
            h.train_loss,
            h.val_loss,
            h.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
    eprintln!(
        "best epoch {} of {}; {trainable} trainable of {total} parameters",
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok(())
}

fn run_meta(md: &store::ModelDir) -> RunMeta {
    let c = &md.train_config;
    RunMeta {
        seed: c.seed,
        mode: c.mode.to_string(),
        tokenizer: md.tokenizer.kind().to_string(),
        learning_rate: c.learning_rate,
        config_hash: config_hash(c),
    }
}

/// Test tables named by `--mix`/`--source` or `--table`.
fn test_tables(src: &TestSource, m: &mut ManifestBuilder) -> Result<Vec<FlowTable>> {
    if let Some(p) = &src.table {
        m.input(p);
        m.input(&store::schema_path(p));
        return Ok(vec![store::load_table(p)?]);
    }
    let Some(dir) = &src.mix else {
        bail!("give --mix DIR or --table FILE");
    };
    let mix = load_mix_input(dir, m)?;
    let names: Vec<String> = match &src.source {
        Some(s) => vec![s.clone()],
        None => mix.tests.keys().cloned().collect(),
    };
    names
        .iter()
        .map(|n| {
            mix.test_table(n)
                .ok_or_else(|| anyhow!("mix has no test set for source `{n}`"))
        })
        .collect()
}

fn perturb_spec(ctx: &Ctx, f: &PerturbFlags, kind: NoiseKind) -> Result<PerturbSpec> {
    let scale = match &f.scale {
        Some(s) => s.parse()?,
        None => ctx.file.perturb.scale()?,
    };
    Ok(PerturbSpec {
        kind,
        scale,
        seed: f.perturb_seed.unwrap_or(ctx.seed),
        clip_nonnegative: ctx.file.perturb.clip_nonnegative && !f.no_clip,
        round: ctx.file.perturb.round && !f.no_round,
    })
}

/// Writes `report.json` with timings moved to the manifest, and `report.txt`.
fn write_reports(ctx: &Ctx, mut reports: Vec<EvalReport>, m: &mut ManifestBuilder) -> Result<()> {
    for (i, r) in reports.iter_mut().enumerate() {
        if let Some(s) = r.wall_seconds.take() {
            m.timings.insert(format!("report_{i}_{}_seconds", r.dataset), s);
        }
    }
    write_json(&ctx.out.join("report.json"), &reports, m)?;
    let text = render_reports(&reports);
    write_text(&ctx.out.join("report.txt"), &text, m)?;
    print!("{text}");
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs, m: &mut ManifestBuilder) -> Result<()> {
    let md = store::load_model_dir(&a.model)?;
    m.input(&a.model);
    let meta = run_meta(&md);
    let spec = match &a.perturb.kind {
        Some(k) => Some(perturb_spec(ctx, &a.perturb, k.parse()?)?),
        None => None,
    };
    m.config(&serde_json::json!({ "model": a.model, "perturbation": spec }))?;
    let mut reports = Vec::new();
    for table in test_tables(&a.data, m)? {
        let name = table.schema.dataset_name.clone();
        let (records, label) = match &spec {
            Some(s) => {
                let kinds = column_kinds(&table)?;
                let stds = md.column_stats.get(&name).map(Vec::as_slice);
                let r = perturb_table_with_stats(&table, s, &kinds, stds)?;
                if r.no_numeric_columns {
                    eprintln!("warning: {name} has no numeric columns; evaluated unperturbed");
                }
                (r.table.records, Some(s.summary()))
            }
            None => (table.records, None),
        };
        reports.push(evaluate(&md.model, &md.tokenizer, &records, &name, label, &meta)?);
    }
    write_reports(ctx, reports, m)
}

fn perturb(ctx: &Ctx, a: PerturbArgs, m: &mut ManifestBuilder) -> Result<()> {
    let kind: NoiseKind = a
        .perturb
        .kind
        .as_deref()
        .ok_or_else(|| anyhow!("--perturb <FAMILY> is required"))?
        .parse()?;
    let spec = perturb_spec(ctx, &a.perturb, kind)?;
    m.config(&spec)?;
    let table = store::load_table(&a.table)?;
    m.input(&a.table);
    m.input(&store::schema_path(&a.table));
    let kinds = column_kinds(&table)?;
    let result = perturb_table(&table, &spec, &kinds)?;
    if result.no_numeric_columns {
        eprintln!("warning: no numeric columns; table written unchanged");
    }
    for p in store::save_table(&ctx.out, &result.table)? {
        m.output(&p);
    }
    m.note("numeric_cells", result.numeric_cells)?;
    m.note("no_numeric_columns", result.no_numeric_columns)?;
    m.note("perturbation", spec.summary())?;
    Ok(())
}

fn tokreport(ctx: &Ctx, a: TokreportArgs, m: &mut ManifestBuilder) -> Result<()> {
    let tok_cfg = resolve_tokenizer(ctx, &a.tokenizer)?;
    let specs = if a.with_perturbations {
        NoiseKind::ALL
            .into_iter()
            .map(|k| perturb_spec(ctx, &a.perturb, k))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    m.config(&serde_json::json!({ "tokenizer": tok_cfg, "perturbations": specs }))?;
    let mut rows: Vec<CorpusStats> = Vec::new();
    for (path, table) in store::load_tables(&a.tables)? {
        m.input(&path);
        let nss = FlowTokenizer::fit_nss(&table.records, tok_cfg.quantization()?)?;
        let subword = FlowTokenizer::fit_subword(&table.records, tok_cfg.subword_vocab)?;
        let mut variants = vec![(String::new(), table.clone())];
        if !specs.is_empty() {
            let kinds = column_kinds(&table)?;
            for s in &specs {
                variants.push((format!(" +{}", s.kind), perturb_table(&table, s, &kinds)?.table));
            }
        }
        for (suffix, t) in variants {
            for tok in [&nss, &subword] {
                let mut st = corpus_stats(&t, tok.stats_vocab())?;
                st.dataset.push_str(&suffix);
                rows.push(st);
            }
        }
    }
    let mut timings = Vec::new();
    for r in &rows {
        timings.push((format!("{} {}", r.dataset, r.tokenizer), r.tokenize_seconds));
    }
    for (k, v) in timings {
        m.timings.insert(k, v);
    }
    write_json(&ctx.out.join("stats.json"), &rows, m)?;
    let text = render_stats(&rows);
    write_text(&ctx.out.join("stats.txt"), &text, m)?;
    print!("{text}");
    Ok(())
}

fn ablate(ctx: &Ctx, a: AblateArgs, m: &mut ManifestBuilder) -> Result<()> {
    let cfg = resolve_train(ctx, &a.train)?;
    let tok_cfg = resolve_tokenizer(ctx, &a.tokenizer)?;
    let settings = AblationSettings {
        train: cfg,
        quantization: tok_cfg.quantization()?,
        subword_vocab: tok_cfg.subword_vocab,
    };
    m.config(&settings)?;
    let mix = load_mix_input(&a.mix, m)?;
    let (name, test): (String, Vec<FlowRecord>) = match &a.source {
        Some(s) => (
            s.clone(),
            mix.tests
                .get(s)
                .cloned()
                .ok_or_else(|| anyhow!("mix has no test set for source `{s}`"))?,
        ),
        None => ("mix".into(), mix.tests.values().flatten().cloned().collect()),
    };
    let data = AblationData {
        name: &name,
        train: &mix.train,
        val: &mix.val,
        test: &test,
    };
    let rows = ablation_run(&data, &AblationFlags::STANDARD, &settings)?;
    write_json(&ctx.out.join("ablation.json"), &rows, m)?;
    let text = render_ablation(&rows);
    write_text(&ctx.out.join("ablation.txt"), &text, m)?;
    print!("{text}");
    Ok(())
}

fn robustness(ctx: &Ctx, a: RobustnessArgs, m: &mut ManifestBuilder) -> Result<()> {
    let md = store::load_model_dir(&a.model)?;
    m.input(&a.model);
    let meta = run_meta(&md);
    let template = perturb_spec(ctx, &a.perturb, NoiseKind::Gaussian)?;
    let specs = family_specs(template.scale, template.seed, template.round)
        .into_iter()
        .map(|s| PerturbSpec {
            clip_nonnegative: template.clip_nonnegative,
            ..s
        })
        .collect::<Vec<_>>();
    m.config(&serde_json::json!({ "model": a.model, "perturbations": specs }))?;
    let mut reports = Vec::new();
    for table in test_tables(&a.data, m)? {
        let stds = md.column_stats.get(&table.schema.dataset_name).map(Vec::as_slice);
        reports.extend(robustness_run(&md.model, &md.tokenizer, &table, &specs, stds, &meta)?);
    }
    write_reports(ctx, reports, m)
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    dataset: Vec<&'a flowdetect::ingest::Schema>,
}

fn synth(ctx: &Ctx, a: SynthArgs, m: &mut ManifestBuilder) -> Result<()> {
    m.config(&serde_json::json!({ "styles": a.styles, "rows": a.rows }))?;
    let mut schemas = Vec::new();
    for (i, style) in a.styles.iter().enumerate() {
        let seed = ctx.seed.wrapping_add(i as u64);
        let (name, schema, bytes) = if style == SEPARABLE_SOURCE || style == "separable" {
            let t = separable_corpus(a.rows, seed);
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            (SEPARABLE_SOURCE.to_string(), t.schema, buf)
        } else {
            let s: DatasetStyle = style.parse().map_err(|e: String| anyhow!(e))?;
            let t = styled_table(s, a.rows, seed);
            let mut buf = Vec::new();
            write_styled_csv(s, &t, &mut buf)?;
            (s.name().to_string(), t.schema, buf)
        };
        let path = ctx.out.join(format!("{name}.csv"));
        fs::write(&path, bytes)?;
        m.output(&path);
        schemas.push(schema);
    }
    let manifest = toml::to_string(&ManifestOut {
        dataset: schemas.iter().collect(),
    })?;
    write_text(&ctx.out.join("schemas.toml"), &manifest, m)?;
    Ok(())
}
