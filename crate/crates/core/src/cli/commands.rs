use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::args::{AblateArgs, DataArgs, HeatmapArgs, ModelArgs, ModuleArgs, ReplayArgs, SweepArgs, TrainArgs};
use super::artifacts::{cell, heatmap_svg, line_chart_svg, write_csv, write_json, write_jsonl, InputDigest, RunManifest};
use crate::backbone::{load_precomputed, split_tokens, tokenize, Vocab, UNK};
use crate::data::{make_synthetic, parse_tsv, LabeledCorpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::head::Pooling;
use crate::sam::SamConfig;
use crate::train::{
    ablation_suite, delta_sweep, parse_delta_grid, AblationSetting, Batch, Dataset, EvalReport, Example, FoldFailure, Model,
    RunResult, RunSummary, TrainConfig,
};

pub const ABLATION_HEADER: [&str; 7] = ["setting", "metric", "accuracy", "macro_f1", "binary_f1", "seconds_per_epoch", "status"];
pub const SWEEP_HEADER: [&str; 8] = [
    "delta",
    "metric",
    "accuracy",
    "macro_f1",
    "binary_f1",
    "seconds_per_epoch",
    "max_feature_weight",
    "status",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Tsv { path: PathBuf },
    Synthetic { spec: String },
    Precomputed { path: PathBuf },
}

impl DataSource {
    fn resolve(args: &DataArgs) -> Result<Self> {
        let precomputed = match args.emb.as_str() {
            "table" => None,
            s => match s.strip_prefix("precomputed:") {
                Some(p) if !p.is_empty() => Some(PathBuf::from(p)),
                _ => return Err(Error::Config(format!("--emb must be `table` or `precomputed:PATH`, got `{s}`"))),
            },
        };
        match (&args.data, &args.synthetic, precomputed) {
            (Some(p), None, None) => Ok(Self::Tsv { path: p.clone() }),
            (None, Some(s), None) => Ok(Self::Synthetic { spec: s.clone() }),
            (None, None, Some(p)) => Ok(Self::Precomputed { path: p }),
            (None, None, None) => Err(Error::Config(
                "no data source: pass --data PATH, --synthetic SPEC or --emb precomputed:PATH".into(),
            )),
            _ => Err(Error::Config(
                "pass exactly one of --data, --synthetic and --emb precomputed:PATH; precomputed vectors carry their own labels".into(),
            )),
        }
    }

    fn load(&self) -> Result<(Dataset, Vec<InputDigest>)> {
        match self {
            Self::Tsv { path } => Ok((Dataset::Text(parse_tsv(path)?), vec![InputDigest::of_file(path)?])),
            Self::Synthetic { spec } => {
                let spec = SyntheticSpec::parse(spec).map_err(as_usage)?;
                Ok((Dataset::Text(make_synthetic(&spec)?), vec![]))
            }
            Self::Precomputed { path } => Ok((Dataset::from_precomputed(load_precomputed(path)?)?, vec![InputDigest::of_file(path)?])),
        }
    }
}

fn as_usage(e: Error) -> Error {
    match e {
        Error::Data(m) | Error::Parse { msg: m, .. } => Error::Config(m),
        e => e,
    }
}

/// The data source, model and training configuration a run resolves to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub source: DataSource,
    pub sam: SamConfig,
    pub pooling: Pooling,
    pub train: TrainConfig,
}

struct Prepared {
    cfg: ResolvedConfig,
    dataset: Dataset,
    inputs: Vec<InputDigest>,
}

fn prepare(data: &DataArgs, model: &ModelArgs, module: Option<&ModuleArgs>, train: TrainConfig) -> Result<Prepared> {
    let source = DataSource::resolve(data)?;
    train.validate()?;
    if model.max_len == 0 || model.bottleneck == 0 {
        return Err(Error::Config("--max-len and --bottleneck must be positive".into()));
    }
    let (dataset, inputs) = source.load()?;
    let dim = match (model.dim, dataset.vector_dim()) {
        (Some(d), Some(v)) if d != v => {
            return Err(Error::Config(format!("--dim {d} does not match the precomputed vector width {v}")));
        }
        (Some(d), _) => d,
        (None, Some(v)) => v,
        (None, None) => 32,
    };
    let mut sam = SamConfig::new(dim, model.max_len);
    sam.bottleneck_ratio = model.bottleneck;
    if let Some(m) = module {
        sam.delta = m.delta.unwrap_or(0.0);
        sam.order = m.order;
        sam.fam_enabled = !m.no_fam;
        sam.tam_enabled = !m.no_tam;
    }
    sam.validate()?;
    Ok(Prepared {
        cfg: ResolvedConfig {
            source,
            sam,
            pooling: model.pool,
            train,
        },
        dataset,
        inputs,
    })
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Worst failure among folds, for the exit status.
fn failure_code<'a>(failures: impl IntoIterator<Item = &'a FoldFailure>) -> i32 {
    failures
        .into_iter()
        .map(|f| if f.numeric { 4 } else { 3 })
        .max()
        .unwrap_or(0)
}

#[derive(Serialize)]
struct EpochLine<'a> {
    run_id: &'a str,
    fold: usize,
    epoch: usize,
    split: &'static str,
    metrics: serde_json::Value,
    seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub best_epoch: Option<usize>,
    pub best: Option<EvalReport>,
    pub failure: Option<FoldFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub label_values: Vec<i64>,
    pub summary: Option<RunSummary>,
    pub folds: Vec<FoldReport>,
    pub warnings: Vec<String>,
}

/// Parameters of the best fold plus what is needed to encode new input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_id: String,
    pub fold: usize,
    pub label_values: Vec<i64>,
    pub vocab: Option<Vocab>,
    pub model: Model,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        ck.model.check()?;
        match (&ck.vocab, &ck.model.embedding) {
            (Some(v), Some(t)) if v.len() != t.vocab_size() => {
                return Err(Error::Data(format!(
                    "checkpoint vocabulary has {} entries but the embedding table has {} rows",
                    v.len(),
                    t.vocab_size()
                )))
            }
            (None, Some(_)) | (Some(_), None) => {
                return Err(Error::Data("checkpoint vocabulary and embedding table disagree".into()));
            }
            _ => {}
        }
        if ck.label_values.len() != ck.model.config.num_classes {
            return Err(Error::Data("checkpoint label list does not match the number of classes".into()));
        }
        Ok(ck)
    }
}

fn epoch_lines<'a>(run_id: &'a str, run: &RunResult) -> Vec<EpochLine<'a>> {
    let mut lines = Vec::new();
    for f in &run.folds {
        for r in &f.history {
            lines.push(EpochLine {
                run_id,
                fold: f.fold,
                epoch: r.epoch,
                split: "train",
                metrics: serde_json::json!({ "loss": r.train_loss }),
                seconds: r.dev.wall_seconds,
            });
            lines.push(EpochLine {
                run_id,
                fold: f.fold,
                epoch: r.epoch,
                split: "dev",
                metrics: serde_json::json!({
                    "accuracy": r.dev.accuracy,
                    "macro_f1": r.dev.macro_f1,
                    "binary_f1": r.dev.binary_f1,
                }),
                seconds: r.dev.wall_seconds,
            });
        }
    }
    lines
}

pub fn train(args: &TrainArgs, argv: &[String]) -> Result<i32> {
    let p = prepare(&args.data, &args.model, Some(&args.module), args.optim.train_config())?;
    out_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", argv, Some(p.cfg.train.seed), serde_json::to_value(&p.cfg)?, p.inputs);
    let run = crate::train::train_run(&p.dataset, &p.cfg.sam, p.cfg.pooling, &p.cfg.train)?;
    let run_id = manifest.run_id.clone();

    write_jsonl(&args.out.join("epochs.jsonl"), &epoch_lines(&run_id, &run))?;
    manifest.artifacts.push("epochs.jsonl".into());

    let report = TrainReport {
        run_id: run_id.clone(),
        label_values: p.dataset.label_values().to_vec(),
        summary: run.summary(),
        folds: run
            .folds
            .iter()
            .map(|f| FoldReport {
                fold: f.fold,
                best_epoch: f.best_epoch,
                best: f.best().cloned(),
                failure: f.failure.clone(),
            })
            .collect(),
        warnings: run.warnings.clone(),
    };
    write_json(&args.out.join("report.json"), &report)?;
    manifest.artifacts.push("report.json".into());

    if let Some(best) = run.best_fold() {
        let ck = Checkpoint {
            run_id: run_id.clone(),
            fold: best.fold,
            label_values: report.label_values.clone(),
            vocab: best.vocab.clone(),
            model: best.model.clone().expect("best fold has a model"),
        };
        write_json(&args.out.join("checkpoint.json"), &ck)?;
        manifest.artifacts.push("checkpoint.json".into());
    }
    if let (DataSource::Synthetic { .. }, Dataset::Text(corpus)) = (&p.cfg.source, &p.dataset) {
        fs::write(args.out.join("corpus.tsv"), corpus.to_tsv())?;
        manifest.artifacts.push("corpus.tsv".into());
    }
    manifest.artifacts.push("manifest.json".into());
    manifest.store(&args.out.join("manifest.json"))?;

    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    match &report.summary {
        Some(s) => println!(
            "accuracy {:.4}  macro_f1 {:.4}  binary_f1 {}  ({} of {} folds)",
            s.accuracy,
            s.macro_f1,
            s.binary_f1.map_or("-".to_string(), |v| format!("{v:.4}")),
            s.completed_folds,
            run.folds.len()
        ),
        None => eprintln!("every fold failed"),
    }
    for f in run.folds.iter().filter_map(|f| f.failure.as_ref().map(|e| (f.fold, e))) {
        eprintln!("fold {} failed at epoch {}: {}", f.0, f.1.epoch, f.1.message);
    }
    Ok(failure_code(run.folds.iter().filter_map(|f| f.failure.as_ref())))
}

fn summary_cells(s: &Option<RunSummary>) -> [String; 5] {
    let get = |f: fn(&RunSummary) -> Option<f64>| cell(s.as_ref().and_then(f));
    [
        get(|s| Some(s.binary_f1.unwrap_or(s.accuracy))),
        get(|s| Some(s.accuracy)),
        get(|s| Some(s.macro_f1)),
        get(|s| s.binary_f1),
        get(|s| Some(s.seconds_per_epoch)),
    ]
}

pub fn ablate(args: &AblateArgs, argv: &[String]) -> Result<i32> {
    let p = prepare(&args.data, &args.model, None, args.optim.train_config())?;
    let settings: Vec<AblationSetting> = if args.settings.is_empty() {
        AblationSetting::ALL.to_vec()
    } else {
        args.settings.clone()
    };
    out_dir(&args.out)?;
    let config = serde_json::json!({
        "run": &p.cfg,
        "settings": settings.iter().map(|s| s.name()).collect::<Vec<_>>(),
    });
    let mut manifest = RunManifest::new("ablate", argv, Some(p.cfg.train.seed), config, p.inputs);
    let rows = ablation_suite(&p.dataset, &p.cfg.sam, p.cfg.pooling, &p.cfg.train, &settings)?;

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.setting.name().to_string()];
            row.extend(summary_cells(&r.summary));
            row.push(r.status.clone());
            row
        })
        .collect();
    write_csv(&args.out.join("ablation.csv"), &ABLATION_HEADER, &table)?;
    write_json(
        &args.out.join("ablation.json"),
        &serde_json::json!({ "run_id": &manifest.run_id, "rows": &rows }),
    )?;
    manifest.artifacts.extend(["ablation.csv".into(), "ablation.json".into(), "manifest.json".into()]);
    manifest.store(&args.out.join("manifest.json"))?;

    for r in &rows {
        println!("{:<10} {}", r.setting.name(), r.summary.as_ref().map_or(r.status.clone(), |s| format!("{:.4}", s.accuracy)));
    }
    Ok(if rows.iter().all(|r| r.status == "ok") { 0 } else { 3 })
}

pub fn sweep(args: &SweepArgs, argv: &[String]) -> Result<i32> {
    let grid = parse_delta_grid(&args.grid)?;
    let p = prepare(&args.data, &args.model, None, args.optim.train_config())?;
    out_dir(&args.out)?;
    let config = serde_json::json!({ "run": &p.cfg, "grid": &grid });
    let mut manifest = RunManifest::new("sweep-delta", argv, Some(p.cfg.train.seed), config, p.inputs);
    let points = delta_sweep(&p.dataset, &p.cfg.sam, p.cfg.pooling, &p.cfg.train, &grid)?;

    let table: Vec<Vec<String>> = points
        .iter()
        .map(|pt| {
            let mut row = vec![pt.delta.to_string()];
            row.extend(summary_cells(&pt.summary));
            row.push(cell(pt.max_feature_weight));
            row.push(pt.status.clone());
            row
        })
        .collect();
    write_csv(&args.out.join("sweep.csv"), &SWEEP_HEADER, &table)?;
    write_json(
        &args.out.join("sweep.json"),
        &serde_json::json!({ "run_id": &manifest.run_id, "points": &points }),
    )?;

    let metric = |f: fn(&RunSummary) -> Option<f64>| -> Vec<Option<f64>> { points.iter().map(|pt| pt.summary.as_ref().and_then(f)).collect() };
    let mut series = vec![("accuracy", metric(|s| Some(s.accuracy))), ("macro_f1", metric(|s| Some(s.macro_f1)))];
    if points.iter().any(|pt| pt.summary.as_ref().is_some_and(|s| s.binary_f1.is_some())) {
        series.push(("binary_f1", metric(|s| s.binary_f1)));
    }
    fs::write(
        args.out.join("sweep.svg"),
        line_chart_svg("dev metric against filter threshold", "delta", &grid, &series),
    )?;
    manifest.artifacts.extend(["sweep.csv".into(), "sweep.json".into(), "sweep.svg".into(), "manifest.json".into()]);
    manifest.store(&args.out.join("manifest.json"))?;

    for pt in &points {
        println!("delta {:<5} {}", pt.delta, pt.summary.as_ref().map_or(pt.status.clone(), |s| format!("{:.4}", s.accuracy)));
    }
    Ok(if points.iter().all(|pt| pt.status == "ok") { 0 } else { 3 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub tokens: Vec<String>,
    pub token_weights: Vec<f64>,
    pub feature_weights: Vec<f64>,
    pub predicted_label: i64,
    pub probabilities: Vec<f64>,
    pub zero_signal: bool,
}

/// Token and feature weights the checkpointed model assigns to `text`.
pub fn heatmap_for(ck: &Checkpoint, text: &str) -> Result<Heatmap> {
    let vocab = ck
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint was trained on precomputed vectors; it cannot embed raw text".into()))?;
    let max_len = ck.model.config.sam.max_len;
    let encoded = tokenize(text, vocab, max_len);
    let mut tokens: Vec<String> = split_tokens(text).into_iter().take(max_len).collect();
    if tokens.is_empty() {
        tokens.push(vocab.token(UNK).unwrap_or("<unk>").to_string());
    }
    debug_assert_eq!(tokens.len(), encoded.len);
    let example = Example::from_text(text, 0, vocab, max_len);
    let batch = Batch::from_examples(&[&example], max_len, ck.model.input_dim())?;
    let (logits, preds, trace) = ck.model.predict(&batch)?;

    let n = tokens.len();
    let token_weights = if trace.tam_map.is_some() {
        trace.token_weights(0, &batch.mask)[..n].to_vec()
    } else {
        vec![1.0 / n as f64; n]
    };
    let feature_weights = trace.feature_weights(0, ck.model.config.sam.d_model);
    let zero_signal = feature_weights.iter().all(|&v| v == 0.0);

    let row = logits.data();
    let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(Heatmap {
        tokens,
        token_weights,
        feature_weights,
        predicted_label: ck.label_values[preds[0]],
        probabilities: exp.iter().map(|e| e / z).collect(),
        zero_signal,
    })
}

fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.to_path_buf();
    if matches!(path.extension().and_then(|e| e.to_str()), Some("json" | "svg")) {
        p.set_extension(ext);
    } else {
        let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(format!(".{ext}"));
        p.set_file_name(name);
    }
    p
}

pub fn heatmap(args: &HeatmapArgs, argv: &[String]) -> Result<i32> {
    let mut inputs = vec![InputDigest::of_file(&args.checkpoint)?];
    let text = match (&args.text, &args.data, args.index) {
        (Some(t), _, _) => t.clone(),
        (None, Some(path), Some(i)) => {
            let corpus: LabeledCorpus = parse_tsv(path)?;
            inputs.push(InputDigest::of_file(path)?);
            corpus
                .records
                .get(i)
                .ok_or_else(|| Error::Data(format!("--index {i} is past the last record ({} records)", corpus.len())))?
                .text
                .clone()
        }
        _ => return Err(Error::Config("pass --text STRING, or --data PATH with --index N".into())),
    };
    let ck = Checkpoint::load(&args.checkpoint)?;
    let map = heatmap_for(&ck, &text)?;

    let note = map
        .zero_signal
        .then_some("zero signal: every feature weight is 0 after filtering; shading is uniform");
    if let Some(n) = note {
        eprintln!("warning: {n}");
    }
    let json_path = with_suffix(&args.out, "json");
    let svg_path = with_suffix(&args.out, "svg");
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json(&json_path, &map)?;
    let shade = (!map.zero_signal).then_some(map.token_weights.as_slice());
    fs::write(&svg_path, heatmap_svg(&map.tokens, shade, note))?;

    let config = serde_json::json!({ "text": &text, "checkpoint_run": &ck.run_id });
    let mut manifest = RunManifest::new("heatmap", argv, None, config, inputs);
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest_path = with_suffix(&args.out, "manifest.json");
    manifest.artifacts.extend([name(&json_path), name(&svg_path), name(&manifest_path)]);
    manifest.store(&manifest_path)?;
    Ok(0)
}

/// `argv` with the value of `--out` replaced by `out`.
pub fn rewrite_out(argv: &[String], out: &Path) -> Vec<String> {
    let out = out.display().to_string();
    let mut result = Vec::with_capacity(argv.len() + 2);
    let mut replaced = false;
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--out" {
            result.push(a.clone());
            result.push(out.clone());
            replaced = true;
            i += 2;
            continue;
        }
        if a.starts_with("--out=") {
            result.push(format!("--out={out}"));
            replaced = true;
        } else {
            result.push(a.clone());
        }
        i += 1;
    }
    if !replaced {
        result.push("--out".into());
        result.push(out);
    }
    result
}

pub fn replay(args: &ReplayArgs) -> Result<i32> {
    let manifest = RunManifest::load(&args.manifest)?;
    if manifest.command == "replay" || manifest.argv.first().map(String::as_str) != Some(manifest.command.as_str()) {
        return Err(Error::Data(format!("manifest {} does not record a replayable command", args.manifest.display())));
    }
    for input in &manifest.inputs {
        let now = InputDigest::of_file(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(Error::Data(format!("input {} changed since the manifest was written", input.path)));
        }
    }
    let argv = rewrite_out(&manifest.argv, &args.out);
    let mut full = vec![manifest.tool.clone()];
    full.extend(argv);
    Ok(super::run(full))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn out_rewriting() {
        let new = Path::new("/tmp/b");
        assert_eq!(rewrite_out(&s(&["train", "--out", "a", "--seed", "1"]), new), s(&["train", "--out", "/tmp/b", "--seed", "1"]));
        assert_eq!(rewrite_out(&s(&["train", "--out=a"]), new), s(&["train", "--out=/tmp/b"]));
        assert_eq!(rewrite_out(&s(&["train"]), new), s(&["train", "--out", "/tmp/b"]));
    }

    #[test]
    fn suffixes() {
        assert_eq!(with_suffix(Path::new("x/map.json"), "svg"), PathBuf::from("x/map.svg"));
        assert_eq!(with_suffix(Path::new("x/map"), "json"), PathBuf::from("x/map.json"));
        assert_eq!(with_suffix(Path::new("x/map"), "manifest.json"), PathBuf::from("x/map.manifest.json"));
    }
}
