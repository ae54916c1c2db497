use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tsjoint::checkpoint::load_model;
use tsjoint::codec::{read_series_jsonl, write_series_jsonl, RawSeries};
use tsjoint::inference::{
    embedding_layout, extract_embedding, train_linear_probe, train_mlp_head, Decode, DenseHead, ForecastRequest,
    Forecaster, HeadConfig,
};
use tsjoint::metrics::{accuracy, auc, macro_f1, mase, season_for_freq, seasonal_naive, wql, MetricReport};
use tsjoint::objectives::QuantileGrid;
use tsjoint::pipeline::{run_training, RunConfig};
use tsjoint::synth::{sample_forced, sample_series, series_rng, KernelKind, SynthConfig};
use tsjoint::tokenizer::BpeVocab;
use tsjoint::{Error, Result};

use crate::manifest::{Recorder, RunManifest};
use crate::{Cli, Command, EvalCmd, HeadKind, ProbeArgs, SynthCmd, TokenizeCmd};

pub fn dispatch(cli: &Cli, args: &[String]) -> Result<RunManifest> {
    let seed = cli.seed.unwrap_or(0);
    let name = match &cli.command {
        Command::Tokenize(TokenizeCmd::Train { .. }) => "tokenize train",
        Command::Tokenize(TokenizeCmd::Encode { .. }) => "tokenize encode",
        Command::Tokenize(TokenizeCmd::Decode { .. }) => "tokenize decode",
        Command::Synth(_) => "synth generate",
        Command::Train(_) => "train",
        Command::Forecast(_) => "forecast",
        Command::Embed(_) => "embed",
        Command::Probe(_) => "probe",
        Command::Eval(EvalCmd::Forecast { .. }) => "eval forecast",
        Command::Eval(EvalCmd::Cls { .. }) => "eval cls",
    };
    let mut rec = Recorder::new(name, args, seed);
    match &cli.command {
        Command::Tokenize(c) => tokenize(c, &mut rec)?,
        Command::Synth(SynthCmd::Generate {
            n,
            len,
            force_kernel,
            config,
            out,
        }) => {
            let cfg = match config {
                Some(p) => {
                    rec.input(p)?;
                    read_toml::<SynthConfig>(p)?
                }
                None => SynthConfig::default(),
            };
            cfg.validate()?;
            let kind = force_kernel.as_deref().map(KernelKind::from_name).transpose()?;
            let mut series = Vec::with_capacity(*n);
            for i in 0..*n {
                let mut rng = series_rng(seed, i as u64);
                let s = match kind {
                    Some(k) => sample_forced(&cfg, k, *len, &mut rng)?,
                    None => sample_series(&cfg, *len, &mut rng)?,
                };
                series.push(s.into_series(format!("synth-{i}")));
            }
            let mut buf = Vec::new();
            write_series_jsonl(&mut buf, &series)?;
            rec.emit(out.as_ref(), &buf)?;
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            rec.input(&a.config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(o) = &a.out {
                cfg.out_dir = o.clone();
            }
            for p in [&cfg.data.text, &cfg.data.series, &cfg.data.tokenizer].into_iter().flatten() {
                rec.input(p)
                    .map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            }
            if let Some(r) = &a.resume {
                rec.input(r)?;
            }
            let fin = run_training(&cfg, a.resume.as_deref())?;
            for f in ["metrics.jsonl", "tokenizer.json", "latest.ckpt"] {
                let p = cfg.out_dir.join(f);
                if p.exists() {
                    rec.output_file(&p)?;
                }
            }
            rec.output_file(&fin)?;
        }
        Command::Forecast(a) => {
            rec.input(&a.ckpt)?;
            rec.input(&a.input)?;
            let (cfg, params) = load_model(&a.ckpt)?;
            let text = read_text(a.text.as_ref(), &mut rec)?;
            let tok = tokenizer_for(text.is_some(), a.tokenizer.as_ref(), &a.ckpt, &mut rec)?;
            let decode = if a.no_cache { Decode::Recompute } else { Decode::Cached };
            let f = Forecaster::new(&params, &cfg)?.with_tokenizer(tok.as_ref()).with_decode(decode);
            let mut buf = String::new();
            for (i, s) in read_series_jsonl(&a.input)?.iter().enumerate() {
                let id = series_id(s, i);
                for (c, ch) in s.values.iter().enumerate() {
                    let r = f.forecast(&ForecastRequest {
                        context: ch.clone(),
                        horizon: a.horizon,
                        text: text.clone(),
                    })?;
                    let mut line = json!({"id": id, "quantiles": r.quantiles, "median": r.median});
                    if s.channels() > 1 {
                        line["channel"] = json!(c);
                    }
                    writeln!(buf, "{line}").expect("string write");
                }
            }
            rec.emit(a.out.as_ref(), buf.as_bytes())?;
        }
        Command::Embed(a) => {
            rec.input(&a.ckpt)?;
            rec.input(&a.input)?;
            let (cfg, params) = load_model(&a.ckpt)?;
            let text = read_text(a.text.as_ref(), &mut rec)?;
            let tok = tokenizer_for(text.is_some(), a.tokenizer.as_ref(), &a.ckpt, &mut rec)?;
            let mut buf = String::new();
            for (i, s) in read_series_jsonl(&a.input)?.iter().enumerate() {
                let layout = embedding_layout(s, cfg.patch_size, a.repeat, tok.as_ref(), text.as_deref())?;
                let e = extract_embedding(&params, &cfg, &layout)?;
                writeln!(buf, "{}", json!({"id": series_id(s, i), "embedding": e})).expect("string write");
            }
            rec.emit(a.out.as_ref(), buf.as_bytes())?;
        }
        Command::Probe(a) => probe(a, seed, cli.pretty, &mut rec)?,
        Command::Eval(EvalCmd::Forecast {
            pred,
            truth,
            context,
            baseline,
            season,
            out,
        }) => {
            if baseline != "seasonal-naive" {
                return Err(Error::Config(format!("unknown baseline {baseline:?}")));
            }
            for p in [pred, truth, context] {
                rec.input(p)?;
            }
            let report = eval_forecast(pred, truth, context, *season)?;
            let bytes = if cli.pretty {
                forecast_table(&report)
            } else {
                format!("{}\n", serde_json::to_string(&report)?)
            };
            rec.emit(out.as_ref(), bytes.as_bytes())?;
        }
        Command::Eval(EvalCmd::Cls { pred, truth, out }) => {
            rec.input(pred)?;
            rec.input(truth)?;
            let report = eval_cls(pred, truth)?;
            rec.emit(out.as_ref(), render(&report, cli.pretty)?.as_bytes())?;
        }
    }
    Ok(rec.finish())
}

fn read_toml<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let s = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
    toml::from_str(&s).map_err(|e| Error::Config(e.to_string()))
}

fn read_text(path: Option<&PathBuf>, rec: &mut Recorder) -> Result<Option<String>> {
    let Some(p) = path else { return Ok(None) };
    rec.input(p)?;
    let s = std::fs::read_to_string(p)?;
    Ok(Some(s.trim_end().to_owned()))
}

fn tokenizer_for(needed: bool, explicit: Option<&PathBuf>, ckpt: &Path, rec: &mut Recorder) -> Result<Option<BpeVocab>> {
    if !needed {
        return Ok(None);
    }
    let path = match explicit {
        Some(p) => p.clone(),
        None => ckpt.with_file_name("tokenizer.json"),
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "a text prefix needs a tokenizer; {} does not exist",
            path.display()
        )));
    }
    rec.input(&path)?;
    BpeVocab::load(&path).map(Some)
}

fn series_id(s: &RawSeries, i: usize) -> String {
    s.id.clone().unwrap_or_else(|| format!("series-{i}"))
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(p)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

fn tokenize(c: &TokenizeCmd, rec: &mut Recorder) -> Result<()> {
    match c {
        TokenizeCmd::Train { input, vocab_size, out } => {
            let mut docs = Vec::new();
            for p in input {
                rec.input(p)?;
                docs.extend(read_lines(p)?);
            }
            let tok = BpeVocab::train(&docs, *vocab_size)?;
            rec.emit(Some(out), tok.to_json()?.as_bytes())?;
        }
        TokenizeCmd::Encode { vocab, input, out } => {
            rec.input(vocab)?;
            rec.input(input)?;
            let tok = BpeVocab::load(vocab)?;
            let mut buf = String::new();
            for line in std::fs::read_to_string(input)?.lines() {
                writeln!(buf, "{}", serde_json::to_string(&tok.encode(line.as_bytes()))?).expect("string write");
            }
            rec.emit(out.as_ref(), buf.as_bytes())?;
        }
        TokenizeCmd::Decode { vocab, input, out } => {
            rec.input(vocab)?;
            rec.input(input)?;
            let tok = BpeVocab::load(vocab)?;
            let mut buf = Vec::new();
            for line in read_lines(input)? {
                let ids: Vec<u32> = serde_json::from_str(&line)?;
                buf.extend(tok.decode(&ids)?);
                buf.push(b'\n');
            }
            rec.emit(out.as_ref(), &buf)?;
        }
    }
    Ok(())
}

fn label_key(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    id: String,
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct LabelLine {
    id: String,
    label: Value,
}

fn read_labels(p: &Path) -> Result<Vec<(String, String)>> {
    read_lines(p)?
        .iter()
        .map(|l| {
            let r: LabelLine = serde_json::from_str(l)?;
            Ok((r.id, label_key(&r.label)))
        })
        .collect()
}

/// Embeddings joined with their labels, in embedding-file order.
fn labelled(emb: &Path, labels: &Path) -> Result<(Vec<String>, Vec<Vec<f32>>, Vec<String>)> {
    let map: HashMap<String, String> = read_labels(labels)?.into_iter().collect();
    let (mut ids, mut xs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for l in read_lines(emb)? {
        let e: EmbeddingLine = serde_json::from_str(&l)?;
        let y = map
            .get(&e.id)
            .ok_or_else(|| Error::Data(format!("no label for {}", e.id)))?;
        ids.push(e.id);
        xs.push(e.embedding);
        ys.push(y.clone());
    }
    if xs.is_empty() {
        return Err(Error::Data(format!("{} holds no embeddings", emb.display())));
    }
    Ok((ids, xs, ys))
}

#[derive(Serialize)]
struct ClsScores {
    n: usize,
    accuracy: f64,
    macro_f1: f64,
    /// Absent when undefined, e.g. a single class.
    auc: Option<f64>,
}

fn cls_scores(preds: &[usize], labels: &[usize], scores: Option<&[Vec<f64>]>) -> Result<ClsScores> {
    let auc = match scores.map(|s| auc(s, labels)) {
        Some(Ok(a)) => Some(a),
        Some(Err(Error::Undefined(_))) | None => None,
        Some(Err(e)) => return Err(e),
    };
    Ok(ClsScores {
        n: labels.len(),
        accuracy: accuracy(preds, labels)?,
        macro_f1: macro_f1(preds, labels)?,
        auc,
    })
}

fn probe(a: &ProbeArgs, seed: u64, pretty: bool, rec: &mut Recorder) -> Result<()> {
    rec.input(&a.embeddings)?;
    rec.input(&a.labels)?;
    let (ids, x, y) = labelled(&a.embeddings, &a.labels)?;
    let classes: Vec<String> = y.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index = |s: &String| {
        classes
            .binary_search(s)
            .map_err(|_| Error::Data(format!("label {s:?} does not occur in the training labels")))
    };
    let labels = y.iter().map(index).collect::<Result<Vec<_>>>()?;
    let mut cfg = match a.head {
        HeadKind::Linear => HeadConfig::linear_probe(),
        HeadKind::Mlp => HeadConfig::mlp(),
    };
    cfg.seed = seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.class_balanced = a.class_balanced.unwrap_or(cfg.class_balanced);
    let head = match a.head {
        HeadKind::Linear => train_linear_probe(&x, &labels, &cfg)?,
        HeadKind::Mlp => train_mlp_head(&x, &labels, &cfg)?,
    };
    let eval = |x: &[Vec<f32>], labels: &[usize], head: &DenseHead| -> Result<(ClsScores, Vec<usize>, Vec<Vec<f64>>)> {
        let proba = head.predict_proba(x)?;
        let preds = head.predict(x)?;
        Ok((cls_scores(&preds, labels, Some(&proba))?, preds, proba))
    };
    let (train, p_train, s_train) = eval(&x, &labels, &head)?;
    let mut test = None;
    let mut pred_rows = (ids, p_train, s_train);
    if let (Some(te), Some(tl)) = (&a.test_embeddings, &a.test_labels) {
        rec.input(te)?;
        rec.input(tl)?;
        let (tids, tx, ty) = labelled(te, tl)?;
        let tlabels = ty.iter().map(index).collect::<Result<Vec<_>>>()?;
        let (s, p, pr) = eval(&tx, &tlabels, &head)?;
        test = Some(s);
        pred_rows = (tids, p, pr);
    } else if a.test_embeddings.is_some() || a.test_labels.is_some() {
        return Err(Error::Config("--test-embeddings and --test-labels go together".into()));
    }
    if let Some(path) = &a.predictions {
        let mut buf = String::new();
        for ((id, p), s) in pred_rows.0.iter().zip(&pred_rows.1).zip(&pred_rows.2) {
            let scores: BTreeMap<&str, f64> = classes.iter().map(String::as_str).zip(s.iter().copied()).collect();
            writeln!(buf, "{}", json!({"id": id, "label": classes[*p], "scores": scores})).expect("string write");
        }
        rec.emit(Some(path), buf.as_bytes())?;
    }
    let report = json!({
        "head": match a.head { HeadKind::Linear => "linear", HeadKind::Mlp => "mlp" },
        "classes": classes,
        "train": train,
        "test": test,
    });
    rec.emit(a.out.as_ref(), render(&report, pretty)?.as_bytes())
}

fn render<T: Serialize>(v: &T, pretty: bool) -> Result<String> {
    if !pretty {
        return Ok(format!("{}\n", serde_json::to_string(v)?));
    }
    let mut out = String::new();
    flatten("", &serde_json::to_value(v)?, &mut out);
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Number(n) if n.is_f64() => {
            writeln!(out, "{prefix:<24} {:.4}", n.as_f64().unwrap_or(f64::NAN)).expect("string write");
        }
        other => writeln!(out, "{prefix:<24} {other}").expect("string write"),
    }
}

#[derive(Deserialize)]
struct PredLine {
    id: String,
    #[serde(default)]
    channel: usize,
    quantiles: Vec<Vec<f64>>,
    median: Vec<f64>,
}

#[derive(Serialize)]
struct ForecastReport {
    mase: MetricReport,
    wql: MetricReport,
}

fn eval_forecast(pred: &Path, truth: &Path, context: &Path, season: Option<usize>) -> Result<ForecastReport> {
    let index = |v: Vec<RawSeries>| -> HashMap<String, RawSeries> {
        v.into_iter().enumerate().map(|(i, s)| (series_id(&s, i), s)).collect()
    };
    let truth = index(read_series_jsonl(truth)?);
    let ctx = index(read_series_jsonl(context)?);
    let mut report = ForecastReport {
        mase: MetricReport::new("mase"),
        wql: MetricReport::new("wql"),
    };
    for line in read_lines(pred)? {
        let p: PredLine = serde_json::from_str(&line)?;
        let missing = |what: &str| Error::Data(format!("no {what} series for {} channel {}", p.id, p.channel));
        let t = truth
            .get(&p.id)
            .and_then(|s| s.values.get(p.channel))
            .ok_or_else(|| missing("truth"))?;
        let cs = ctx.get(&p.id).ok_or_else(|| missing("context"))?;
        let c = cs.values.get(p.channel).ok_or_else(|| missing("context"))?;
        let h = p.median.len();
        if t.len() < h || p.quantiles.len() != h {
            return Err(Error::Data(format!("{}: forecast of {h} steps against {} observed", p.id, t.len())));
        }
        let t = &t[..h];
        let m = season.unwrap_or_else(|| season_for_freq(cs.freq.as_deref()));
        let naive = seasonal_naive(c, m, h)?;
        let q = p.quantiles.first().map_or(0, Vec::len);
        let levels = QuantileGrid::uniform(q)?.levels().to_vec();
        let naive_q: Vec<Vec<f64>> = naive.iter().map(|&v| vec![v; q]).collect();
        let task = if p.channel > 0 { format!("{}#{}", p.id, p.channel) } else { p.id.clone() };
        report
            .mase
            .push(task.clone(), mase(&p.median, t, c, m), mase(&naive, t, c, m))?;
        report
            .wql
            .push(task, wql(&p.quantiles, t, &levels), wql(&naive_q, t, &levels))?;
    }
    Ok(report)
}

fn forecast_table(r: &ForecastReport) -> String {
    let mut out = String::new();
    for m in [&r.mase, &r.wql] {
        writeln!(out, "{:<24} {:>10} {:>10} {:>8}", m.metric, "model", "baseline", "ratio").expect("string write");
        for t in &m.tasks {
            writeln!(out, "{:<24} {:>10.4} {:>10.4} {:>8.4}", t.task, t.metric, t.baseline, t.ratio)
                .expect("string write");
        }
        for s in &m.skipped {
            writeln!(out, "{:<24} skipped: {}", s.task, s.reason).expect("string write");
        }
        match m.geomean {
            Some(g) => writeln!(out, "{:<24} {:>30.4}\n", "geomean", g),
            None => writeln!(out, "{:<24} {:>30}\n", "geomean", "undefined"),
        }
        .expect("string write");
    }
    out
}

#[derive(Deserialize)]
struct ClsPredLine {
    id: String,
    label: Value,
    #[serde(default)]
    scores: Option<BTreeMap<String, f64>>,
}

fn eval_cls(pred: &Path, truth: &Path) -> Result<ClsScores> {
    let truth: HashMap<String, String> = read_labels(truth)?.into_iter().collect();
    let preds: Vec<ClsPredLine> = read_lines(pred)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect::<Result<_>>()?;
    if preds.is_empty() {
        return Err(Error::Data("no predictions".into()));
    }
    let mut classes: BTreeSet<String> = truth.values().cloned().collect();
    for p in &preds {
        classes.insert(label_key(&p.label));
        if let Some(s) = &p.scores {
            classes.extend(s.keys().cloned());
        }
    }
    let classes: Vec<String> = classes.into_iter().collect();
    let idx = |s: &str| classes.binary_search_by(|c| c.as_str().cmp(s)).expect("collected above");
    let mut y = Vec::new();
    let mut yhat = Vec::new();
    let mut scores = Vec::new();
    for p in &preds {
        let t = truth
            .get(&p.id)
            .ok_or_else(|| Error::Data(format!("no truth label for {}", p.id)))?;
        y.push(idx(t));
        yhat.push(idx(&label_key(&p.label)));
        if let Some(s) = &p.scores {
            scores.push(classes.iter().map(|c| s.get(c).copied().unwrap_or(0.0)).collect::<Vec<f64>>());
        }
    }
    let have_scores = scores.len() == preds.len();
    cls_scores(&yhat, &y, have_scores.then_some(scores.as_slice()))
}
