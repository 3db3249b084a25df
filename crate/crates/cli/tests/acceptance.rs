//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::collections::HashSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use flowdetect::ingest::{column_kinds, FlowRecord, FlowTable, Label};
use flowdetect::mix::load_mix;
use flowdetect::model::{
    attach_lora, forward, init_model, loss_and_grads, merge_lora, LoraAdapter, LoraTarget, LossOptions, Matrix,
    ModelConfig, ModelParams, HEAD_B, HEAD_W,
};
use flowdetect::perturb::{moment_report, perturb_table, NoiseKind, PerturbSpec, Scale, DEFAULT_POISSON_LAMBDA};
use flowdetect::synthetic::{separable_corpus, styled_table, DatasetStyle};
use flowdetect::tokenizer::{corpus_stats, window_for_records, FlowTokenizer, Quantization, TokenSequence, CLS, SEP};
use flowdetect::train::{
    evaluate, family_specs, f1_score, robustness_run, sft_train, trainable_mut, Adam, Confusion, EncodedSplit,
    RunMeta, TrainConfig, TrainMode, TrainedModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_flowdetect")
}

fn cli(args: &[&str], env_seed: Option<&str>) -> Result<(), String> {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("FLOWDETECT_SEED");
    if let Some(s) = env_seed {
        cmd.env("FLOWDETECT_SEED", s);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "flowdetect {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

// 1. window law
fn window_law() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut capped = 0;
    for corpus in 0..1000 {
        let n = rng.gen_range(1..=8);
        let records: Vec<FlowRecord> = (0..n)
            .map(|_| {
                let width = rng.gen_range(1..=600);
                FlowRecord::new(vec!["1".to_string(); width], Label::Normal, "w")
            })
            .collect();
        let mut longest = 0;
        for r in &records {
            if r.values.len() > longest {
                longest = r.values.len();
            }
        }
        let expected = if longest > 512 { 512 } else { longest };
        capped += usize::from(longest > 512);
        let got = window_for_records(&records).map_err(|e| e.to_string())?.window;
        if got != expected {
            return Err(format!("corpus {corpus}: window {got}, expected {expected}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("1000 corpora ({capped} capped) in {secs:.2}s"))
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> TokenSequence {
    let body = rng.gen_range(1..=len - 2);
    let mut ids = vec![CLS];
    ids.extend((0..body).map(|_| rng.gen_range(4..vocab as u32)));
    ids.push(SEP);
    TokenSequence::from_unpadded(ids, len)
}

fn randomize_b(adapter: &mut LoraAdapter<f64>, rng: &mut ChaCha8Rng, amp: f64) {
    for pair in adapter.pairs.values_mut() {
        for b in pair.b.data.iter_mut() {
            *b = rng.gen_range(-amp..amp);
        }
    }
}

// 2. merge equivalence
fn merge_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let d = [8, 16, 32, 64][rng.gen_range(0..4)];
        let mut cfg = ModelConfig::new(24, 8);
        cfg.d_model = d;
        cfg.n_heads = 2;
        cfg.d_ff = 2 * d;
        cfg.n_layers = rng.gen_range(1..=2);
        let params = init_model::<f64>(&cfg, trial).map_err(|e| e.to_string())?;
        let rank = rng.gen_range(1..=d / 4);
        let targets = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value];
        let pick: Vec<LoraTarget> = targets.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
        let pick = if pick.is_empty() { vec![LoraTarget::Query] } else { pick };
        let mut adapter = attach_lora(&params, rank, &pick, trial + 7).map_err(|e| e.to_string())?;
        if rng.gen_bool(0.5) {
            adapter = adapter.with_alpha(rng.gen_range(1.0..32.0));
        }
        randomize_b(&mut adapter, &mut rng, 0.5);
        let batch: Vec<TokenSequence> = (0..3).map(|_| random_seq(&mut rng, 24, 8)).collect();
        let merged = merge_lora(&params, &adapter).map_err(|e| e.to_string())?;
        let y_adapter = forward(&params, Some(&adapter), &batch, false, 0).map_err(|e| e.to_string())?;
        let y_merged = forward(&merged, None, &batch, false, 0).map_err(|e| e.to_string())?;
        let norm = y_adapter.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let dev = y_adapter
            .data
            .iter()
            .zip(&y_merged.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / norm;
        worst = worst.max(dev);
    }
    ensure(worst < 1e-6, format!("100 triples, max relative deviation {worst:.2e}"))
}

fn tensor_mut<'a>(
    params: &'a mut ModelParams<f64>,
    adapter: Option<&'a mut LoraAdapter<f64>>,
    name: &str,
) -> &'a mut Matrix<f64> {
    if name.starts_with("lora.") {
        let a = adapter.expect("adapter present for lora names");
        return a.named_mut().into_iter().find(|n| n.name == name).unwrap().tensor;
    }
    params.named_mut().into_iter().find(|n| n.name == name).unwrap().tensor
}

fn gradcheck_one(lora: bool, rng: &mut ChaCha8Rng) -> Result<(usize, f64), String> {
    let mut cfg = ModelConfig::new(12, 7);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.n_layers = 2;
    cfg.dropout_p = 0.0;
    let params = init_model::<f64>(&cfg, 11).map_err(|e| e.to_string())?;
    let adapter = if lora {
        let mut a = attach_lora(&params, 2, &[LoraTarget::Query, LoraTarget::Key, LoraTarget::Value], 12)
            .map_err(|e| e.to_string())?;
        randomize_b(&mut a, rng, 0.3);
        Some(a)
    } else {
        None
    };
    let batch: Vec<TokenSequence> = (0..4).map(|_| random_seq(rng, 12, 7)).collect();
    let labels = vec![0, 1, 1, 0];
    let opts = LossOptions {
        train_mode: false,
        dropout_seed: 0,
        l2_coeff: 0.01,
        class_weights: Some(vec![1.0, 2.5]),
    };
    let (_, grads) = loss_and_grads(&params, adapter.as_ref(), &batch, &labels, &opts).map_err(|e| e.to_string())?;
    let eps = 1e-4;
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (name, g) in &grads.tensors {
        let picks: Vec<usize> = (0..5).map(|_| rng.gen_range(0..g.len())).collect();
        for idx in picks {
            let eval = |delta: f64| -> Result<f64, String> {
                let mut pp = params.clone();
                let mut aa = adapter.clone();
                tensor_mut(&mut pp, aa.as_mut(), name).data[idx] += delta;
                let (l, _) = loss_and_grads(&pp, aa.as_ref(), &batch, &labels, &opts).map_err(|e| e.to_string())?;
                Ok(l)
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let an = g.data[idx];
            let scale = fd.abs().max(an.abs());
            let err = if scale < 1e-7 { 0.0 } else { (fd - an).abs() / scale };
            if err >= 1e-4 {
                return Err(format!(
                    "{} {name}[{idx}]: analytic {an:.6e}, numeric {fd:.6e}, rel {err:.2e}",
                    if lora { "lora" } else { "full" }
                ));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    if lora {
        let base_grads = grads.tensors.keys().filter(|k| !k.starts_with("lora.") && *k != HEAD_W && *k != HEAD_B);
        if base_grads.count() > 0 {
            return Err("LoRA mode produced gradients for base weights".into());
        }
    }
    Ok((checked, worst))
}

// 3. finite-difference gradients
fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n_full, w_full) = gradcheck_one(false, &mut rng)?;
    let (n_lora, w_lora) = gradcheck_one(true, &mut rng)?;
    Ok(format!(
        "{n_full} full + {n_lora} LoRA coordinates, max relative error {:.2e}",
        w_full.max(w_lora)
    ))
}

fn separable_splits(seed: u64) -> (Vec<FlowRecord>, Vec<FlowRecord>, Vec<FlowRecord>) {
    let mut all = separable_corpus(3000, seed).records;
    let test = all.split_off(2500);
    let val = all.split_off(2000);
    (all, val, test)
}

// 4. LoRA steps leave W0 untouched
fn lora_freezes_base() -> Outcome {
    let (train, _, _) = separable_splits(4);
    let tok = FlowTokenizer::fit_nss(&train, Quantization::Raw).map_err(|e| e.to_string())?;
    let split = EncodedSplit::encode(&tok, &train);
    let cfg = TrainConfig {
        mode: TrainMode::Lora,
        ..TrainConfig::default()
    };
    let mut model = TrainedModel::init(&cfg, &cfg.model_config(tok.vocab_size(), tok.seq_len()))
        .map_err(|e| e.to_string())?;
    let before = model.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let opts = LossOptions {
        train_mode: true,
        l2_coeff: cfg.l2_coeff,
        ..LossOptions::default()
    };
    for step in 0..50 {
        let lo = (step * 32) % (split.len() - 32);
        let seqs = &split.seqs[lo..lo + 32];
        let labels = &split.labels[lo..lo + 32];
        let opts = LossOptions {
            dropout_seed: step as u64,
            ..opts.clone()
        };
        let (_, grads) =
            loss_and_grads(&model.params, model.adapter.as_ref(), seqs, labels, &opts).map_err(|e| e.to_string())?;
        adam.step(trainable_mut(&mut model.params, model.adapter.as_mut()), &grads);
    }
    let mut base_same = true;
    for (a, b) in before.params.named().into_iter().zip(model.params.named()) {
        if a.name == HEAD_W || a.name == HEAD_B {
            continue;
        }
        let bitwise = a.tensor.data.iter().zip(&b.tensor.data).all(|(x, y)| x.to_bits() == y.to_bits());
        base_same &= bitwise;
    }
    let adapter_changed = before.adapter != model.adapter;
    let head_changed = before.params.head_w != model.params.head_w;
    ensure(
        base_same && adapter_changed && head_changed,
        format!("after 50 steps: base unchanged {base_same}, adapter changed {adapter_changed}, head changed {head_changed}"),
    )
}

fn min_seconds(table: &FlowTable, tok: &FlowTokenizer) -> Result<(usize, f64), String> {
    let mut best = f64::INFINITY;
    let mut max_len = 0;
    for _ in 0..3 {
        let s = corpus_stats(table, tok.stats_vocab()).map_err(|e| e.to_string())?;
        best = best.min(s.tokenize_seconds);
        max_len = s.max_length;
    }
    Ok((max_len, best))
}

// 5. NSS vs subword on styled tables
fn tokenizer_comparison() -> Outcome {
    let mut notes = Vec::new();
    for style in DatasetStyle::ALL {
        let table = styled_table(style, 1000, 5);
        let nss = FlowTokenizer::fit_nss(&table.records, Quantization::Raw).map_err(|e| e.to_string())?;
        let sub = FlowTokenizer::fit_subword(&table.records, 1000).map_err(|e| e.to_string())?;
        let (nss_len, nss_t) = min_seconds(&table, &nss)?;
        let (sub_len, sub_t) = min_seconds(&table, &sub)?;
        if nss_len >= sub_len || nss_t >= sub_t {
            return Err(format!(
                "{style}: nss len {nss_len} / {nss_t:.4}s, subword len {sub_len} / {sub_t:.4}s"
            ));
        }
        let kinds = column_kinds(&table).map_err(|e| e.to_string())?;
        let clean_sub = corpus_stats(&table, sub.stats_vocab()).map_err(|e| e.to_string())?;
        for kind in NoiseKind::ALL {
            let spec = PerturbSpec {
                round: false,
                ..PerturbSpec::new(kind, Scale::Auto, 9)
            };
            let noisy = perturb_table(&table, &spec, &kinds).map_err(|e| e.to_string())?.table;
            let lens_nss: Vec<usize> = noisy.records.iter().map(|r| nss.encode(r).true_length).collect();
            let clean_nss: Vec<usize> = table.records.iter().map(|r| nss.encode(r).true_length).collect();
            let noisy_sub = corpus_stats(&noisy, sub.stats_vocab()).map_err(|e| e.to_string())?;
            if lens_nss != clean_nss {
                return Err(format!("{style} +{kind}: NSS lengths changed"));
            }
            if noisy_sub.mean_length == clean_sub.mean_length && noisy_sub.max_length == clean_sub.max_length {
                return Err(format!("{style} +{kind}: subword lengths unchanged"));
            }
        }
        notes.push(format!("{style} {nss_len}<{sub_len}"));
    }
    Ok(format!("{}; NSS invariant under 4 families", notes.join(", ")))
}

fn record_key(r: &FlowRecord) -> (String, Label, Vec<String>) {
    (r.source.clone(), r.label, r.values.clone())
}

// 6. build-mix via the CLI
fn mix_split(work: &Path) -> Outcome {
    let raw = work.join("raw");
    let tables = work.join("tables");
    let mix = work.join("mix");
    let mut synth = vec!["--out", p(&raw), "synth", "--rows", "6500"];
    for s in DatasetStyle::ALL {
        synth.extend(["--style", s.name()]);
    }
    cli(&synth, None)?;
    let mut ingest = vec!["--out".to_string(), p(&tables).into(), "ingest".into(), "--manifest".into()];
    ingest.push(p(&raw.join("schemas.toml")).into());
    for s in DatasetStyle::ALL {
        ingest.push(p(&raw.join(format!("{}.csv", s.name()))).into());
    }
    cli(&ingest.iter().map(String::as_str).collect::<Vec<_>>(), None)?;
    cli(
        &[
            "--out",
            p(&mix),
            "--seed",
            "6",
            "build-mix",
            "--tables",
            p(&tables),
            "--per-source",
            "5000",
            "--test-per-source",
            "1000",
        ],
        None,
    )?;
    let m = load_mix(&mix).map_err(|e| e.to_string())?;
    if m.train.len() != 16000 || m.val.len() != 4000 {
        return Err(format!("split {}/{}", m.train.len(), m.val.len()));
    }
    for s in DatasetStyle::ALL {
        let n = m.train.iter().chain(&m.val).filter(|r| r.source == s.name()).count();
        if n != 5000 {
            return Err(format!("{s} contributes {n} records to train+val"));
        }
    }
    let pool: Vec<&FlowRecord> = m.train.iter().chain(&m.val).collect();
    let mut test_total = 0;
    for (name, test) in &m.tests {
        for (i, t) in test.iter().enumerate() {
            if pool.iter().any(|r| *r == t) {
                return Err(format!("{name}: test record {i} also in train/val"));
            }
            if test[..i].iter().any(|u| u == t) {
                return Err(format!("{name}: test record {i} duplicated"));
            }
        }
        test_total += test.len();
    }
    let keys: HashSet<_> = m.tests.values().flatten().map(record_key).collect();
    ensure(
        keys.len() == test_total,
        format!("16000/4000, {test_total} test records disjoint and unique"),
    )
}

// 7. noise moments
fn noise_moments() -> Outcome {
    let n = 1_000_000usize;
    let mut parts = Vec::new();
    for (i, kind) in NoiseKind::ALL.into_iter().enumerate() {
        let scale = if kind == NoiseKind::Poisson { DEFAULT_POISSON_LAMBDA } else { 1.5 };
        let r = moment_report(kind, scale, n, 70 + i as u64);
        let var = kind.variance(scale);
        let mu4 = kind.fourth_moment(scale);
        let se_mean = (var / n as f64).sqrt();
        let se_var = ((mu4 - var * var) / n as f64).sqrt();
        let z_mean = r.mean / se_mean;
        let z_var = (r.variance - var) / se_var;
        if z_mean.abs() > 3.0 || z_var.abs() > 3.0 {
            return Err(format!("{kind}: mean z {z_mean:.2}, variance z {z_var:.2}"));
        }
        parts.push(format!("{kind} z=({z_mean:+.2},{z_var:+.2})"));
    }
    Ok(parts.join(", "))
}

// 8. metrics
fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..200 {
        let n = rng.gen_range(0..300);
        let bias = rng.gen_range(0.0..1.0);
        let draw = |rng: &mut ChaCha8Rng| if rng.gen_bool(bias) { Label::Attack } else { Label::Normal };
        let truth: Vec<Label> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<Label> = (0..n).map(|_| draw(&mut rng)).collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            match (pred[i], truth[i]) {
                (Label::Attack, Label::Attack) => tp += 1,
                (Label::Attack, Label::Normal) => fp += 1,
                (Label::Normal, Label::Normal) => tn += 1,
                (Label::Normal, Label::Attack) => fn_ += 1,
            }
        }
        let c = Confusion::from_labels(&pred, &truth);
        if (c.tp, c.fp, c.tn, c.fn_) != (tp, fp, tn, fn_) {
            return Err(format!("case {case}: confusion mismatch"));
        }
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let acc = div(tp + tn, n as u64);
        let prec = div(tp, tp + fp);
        let rec = div(tp, tp + fn_);
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        let m = c.metrics();
        for (what, got, want) in [("accuracy", m.accuracy, acc), ("precision", m.precision, prec), ("recall", m.recall, rec), ("f1", m.f1, f1)] {
            if (got - want).abs() > 1e-12 {
                return Err(format!("case {case}: {what} {got} vs {want}"));
            }
        }
    }
    let f1 = f1_score(0.9880, 0.9989);
    ensure(
        (f1 - 0.9934).abs() <= 5e-5,
        format!("200 vectors match oracle; F1(0.9880, 0.9989) = {f1:.5}"),
    )
}

struct Trained {
    model: TrainedModel,
    tokenizer: FlowTokenizer,
    test: Vec<FlowRecord>,
    meta: RunMeta,
}

fn train_mode(mode: TrainMode) -> Result<(Trained, f64, f64, usize, usize), String> {
    let (train, val, test) = separable_splits(9);
    let cfg = TrainConfig {
        mode,
        max_epochs: 10,
        seed: 9,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let tokenizer = FlowTokenizer::fit_nss(&train, Quantization::Raw).map_err(|e| e.to_string())?;
    let tr = EncodedSplit::encode(&tokenizer, &train);
    let va = EncodedSplit::encode(&tokenizer, &val);
    let model = TrainedModel::init(&cfg, &cfg.model_config(tokenizer.vocab_size(), tokenizer.seq_len()))
        .map_err(|e| e.to_string())?;
    let trainable = model.trainable_count();
    let total = model.params.param_count();
    let out = sft_train(&cfg, model, &tr, &va).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let meta = RunMeta {
        seed: cfg.seed,
        mode: cfg.mode.to_string(),
        tokenizer: "nss".into(),
        learning_rate: cfg.learning_rate,
        config_hash: String::new(),
    };
    let report = evaluate(&out.model, &tokenizer, &test, "synthetic", None, &meta).map_err(|e| e.to_string())?;
    if out.history.len() > 10 {
        return Err(format!("{mode}: ran {} epochs", out.history.len()));
    }
    Ok((
        Trained {
            model: out.model,
            tokenizer,
            test,
            meta,
        },
        report.accuracy,
        secs,
        trainable,
        total,
    ))
}

// 9. both modes learn the separable task
fn convergence(slot: &mut Option<Trained>) -> Outcome {
    let (_, acc_full, t_full, _, total) = train_mode(TrainMode::FullFt)?;
    let (lora, acc_lora, t_lora, trainable, _) = train_mode(TrainMode::Lora)?;
    *slot = Some(lora);
    let ratio = trainable as f64 / total as f64;
    let limit = Duration::from_secs(300).as_secs_f64();
    ensure(
        acc_full >= 0.95 && acc_lora >= 0.95 && t_full < limit && t_lora < limit && ratio < 0.05,
        format!(
            "full acc {acc_full:.4} in {t_full:.1}s, LoRA acc {acc_lora:.4} in {t_lora:.1}s, LoRA trains {:.2}% of weights",
            ratio * 100.0
        ),
    )
}

// 10. robustness ordering
fn robustness(trained: Option<&Trained>) -> Outcome {
    let t = trained.ok_or("no trained model from criterion 9")?;
    let table = FlowTable::new(flowdetect::synthetic::separable_schema(), t.test.clone());
    let reports = robustness_run(
        &t.model,
        &t.tokenizer,
        &table,
        &family_specs(Scale::Auto, 10, true),
        None,
        &t.meta,
    )
    .map_err(|e| e.to_string())?;
    let clean = reports[0].accuracy;
    for r in &reports[1..] {
        if r.accuracy > clean {
            return Err(format!("{:?} accuracy {} above clean {clean}", r.perturbation, r.accuracy));
        }
    }
    let zero = robustness_run(
        &t.model,
        &t.tokenizer,
        &table,
        &[PerturbSpec::new(NoiseKind::Gaussian, Scale::Absolute(0.0), 10)],
        None,
        &t.meta,
    )
    .map_err(|e| e.to_string())?;
    let same = zero[0].counts == zero[1].counts && zero[1].accuracy == clean;
    let accs: Vec<String> = reports[1..].iter().map(|r| format!("{:.4}", r.accuracy)).collect();
    ensure(
        same,
        format!("clean {clean:.4} >= [{}]; sigma=0 identical {same}", accs.join(", ")),
    )
}

fn train_eval_run(work: &Path, mix: &Path, tag: &str, via_env: bool) -> Result<Vec<u8>, String> {
    let model = work.join(format!("model_{tag}"));
    let ev = work.join(format!("eval_{tag}"));
    let mut train = vec!["--out", p(&model)];
    if !via_env {
        train.extend(["--seed", "11"]);
    }
    train.extend(["train", "--mix", p(mix), "--epochs", "2"]);
    cli(&train, via_env.then_some("11"))?;
    cli(&["--out", p(&ev), "eval", "--model", p(&model), "--mix", p(mix)], None)?;
    std::fs::read(ev.join("report.json")).map_err(|e| e.to_string())
}

// 11. determinism
fn determinism(work: &Path) -> Outcome {
    let raw = work.join("raw11");
    let tables = work.join("tables11");
    let mix = work.join("mix11");
    cli(&["--out", p(&raw), "synth", "--rows", "900"], None)?;
    cli(
        &[
            "--out",
            p(&tables),
            "ingest",
            "--manifest",
            p(&raw.join("schemas.toml")),
            p(&raw.join("synthetic.csv")),
        ],
        None,
    )?;
    cli(
        &["--out", p(&mix), "build-mix", "--tables", p(&tables), "--per-source", "600", "--test-per-source", "200"],
        Some("11"),
    )?;
    let a = train_eval_run(work, &mix, "a", false)?;
    let b = train_eval_run(work, &mix, "b", true)?;
    ensure(
        a == b,
        format!("report.json {} bytes, identical {}", a.len(), a == b),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    match res {
        Ok(d) => {
            println!("criterion {n:>2} {name}: PASS ({d}) [{secs:.1}s]");
            true
        }
        Err(d) => {
            println!("criterion {n:>2} {name}: FAIL ({d}) [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let work: PathBuf = tmp.path().to_path_buf();
    let mut trained = None;
    let results = [
        run(1, "window law", window_law),
        run(2, "merge equivalence", merge_equivalence),
        run(3, "finite-difference gradients", gradients),
        run(4, "LoRA freezes base weights", lora_freezes_base),
        run(5, "NSS vs subword", tokenizer_comparison),
        run(6, "mix split and disjoint tests", || mix_split(&work)),
        run(7, "noise moments", noise_moments),
        run(8, "metrics", metrics_oracle),
        run(9, "separable convergence", || convergence(&mut trained)),
        run(10, "robustness ordering", || robustness(trained.as_ref())),
        run(11, "deterministic reports", || determinism(&work)),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
