use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use molalign_core::data::{
    build_triples, gen_toy_corpus, read_jsonl, split_dataset, template, triples_to_kto, write_atomic, write_jsonl,
    CorruptionGenerator, Direction, IdentityGenerator, KtoExample, LmPair, PreferenceTriple, Record, TargetGenerator,
};
use molalign_core::eval::{aggregate_report, evaluate, LexicalBaseline, MetricReport, NliScorer, PairRecord, ProcessScorer};
use molalign_core::losses::LossConfig;
use molalign_core::merge::{check_compatible, load_checkpoint, merge, save_checkpoint, MergeConfig};
use molalign_core::policy::{init_params, ModelConfig, PolicyParams, Vocab};
use molalign_core::train::{train, translate_all, LogRecord, Method, TrainConfig, TrainSet};

use crate::error::CliError;
use crate::manifest::{manifest_path, ManifestBuilder};
use crate::{
    BuildTriplesArgs, Command, EvalArgs, GenDataArgs, GeneratorKind, MergeArgs, ReportArgs, SplitArgs, TrainArgs,
    TranslateArgs,
};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Split(a) => split(&a),
        Command::BuildTriples(a) => build(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Translate(a) => translate(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => report(&a),
    }
}

/// One translation output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub direction: Direction,
    #[serde(alias = "target")]
    pub prediction: String,
}

impl Record for Prediction {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, &e)),
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, &e))
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let m = ManifestBuilder::new("gen-data", a);
    let pairs = gen_toy_corpus(a.n, a.seed)?;
    ensure_parent(&a.out)?;
    write_jsonl(&a.out, &pairs)?;
    m.finish(&manifest_path(&a.out), std::slice::from_ref(&a.out))
}

fn split(a: &SplitArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("split", a);
    m.input(&a.data)?;
    let pairs: Vec<LmPair> = read_jsonl(&a.data)?;
    let fractions: [f64; 3] = a.fractions.as_slice().try_into().map_err(|_| CliError::Config("--fractions takes three values".into()))?;
    let (train, val, test) = split_dataset(&pairs, fractions, a.seed).map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(&a.out_dir)?;
    let mut outputs = Vec::new();
    for (name, part) in [("train", train), ("val", val), ("test", test)] {
        let p = a.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&p, &part)?;
        outputs.push(p);
    }
    m.finish(&a.out_dir.join("split.manifest.json"), &outputs)
}

fn build(a: &BuildTriplesArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("build-triples", a);
    m.input(&a.data)?;
    let pairs: Vec<LmPair> = read_jsonl(&a.data)?;
    let mut generator: Box<dyn TargetGenerator> = match a.generator {
        GeneratorKind::Identity => Box::new(IdentityGenerator),
        GeneratorKind::Corruption => {
            let seed = a.seed.ok_or_else(|| CliError::Config("the corruption generator needs --seed".into()))?;
            if !(a.strength > 0.0 && a.strength <= 1.0) {
                return Err(CliError::Config(format!("--strength must lie in (0, 1], got {}", a.strength)));
            }
            Box::new(CorruptionGenerator::new(a.strength, seed))
        }
    };
    let built = build_triples(&pairs, generator.as_mut());
    if built.degenerate > 0 {
        log::warn!("{} of {} triples are degenerate (preferred == dispreferred)", built.degenerate, built.triples.len());
    }
    ensure_parent(&a.out)?;
    write_jsonl(&a.out, &built.triples)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(k) = &a.kto_out {
        ensure_parent(k)?;
        write_jsonl(k, &triples_to_kto(&built.triples))?;
        outputs.push(k.clone());
    }
    m.finish(&manifest_path(&a.out), &outputs)
}

/// Printable ASCII, newline, the instruction templates and every character
/// of the training texts.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
    let mut all: String = (' '..='~').chain(['\n']).collect();
    for d in Direction::ALL {
        all.push_str(template(d).text);
    }
    for t in texts {
        all.push_str(t);
    }
    Vocab::from_corpus([all.as_str()])
}

fn keep(direction: Direction, only: Option<Direction>) -> bool {
    only.is_none_or(|d| d == direction)
}

/// Training records before encoding; the vocabulary is only known once the
/// starting model is.
enum RawData {
    Pairs(Vec<LmPair>),
    Triples(Vec<PreferenceTriple>),
    Kto(Vec<KtoExample>),
}

impl RawData {
    fn load(a: &TrainArgs) -> Result<Self, CliError> {
        let only = a.direction;
        let data = match a.method {
            Method::Sft => {
                let mut v: Vec<LmPair> = read_jsonl(&a.data)?;
                v.retain(|p| keep(p.direction, only));
                Self::Pairs(v)
            }
            Method::Dpo | Method::Cpo => {
                let mut v: Vec<PreferenceTriple> = read_jsonl(&a.data)?;
                v.retain(|t| keep(t.direction, only));
                Self::Triples(v)
            }
            Method::Kto => {
                let mut v: Vec<KtoExample> = read_jsonl(&a.data)?;
                v.retain(|k| keep(k.direction, only));
                Self::Kto(v)
            }
        };
        if data.is_empty() {
            return Err(CliError::Data(format!("{}: no training records for the selected direction", a.data.display())));
        }
        Ok(data)
    }

    fn is_empty(&self) -> bool {
        match self {
            Self::Pairs(v) => v.is_empty(),
            Self::Triples(v) => v.is_empty(),
            Self::Kto(v) => v.is_empty(),
        }
    }

    fn texts(&self) -> Vec<&str> {
        match self {
            Self::Pairs(v) => v.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]).collect(),
            Self::Triples(v) => {
                v.iter().flat_map(|t| [t.source.as_str(), t.preferred.as_str(), t.dispreferred.as_str()]).collect()
            }
            Self::Kto(v) => v.iter().flat_map(|k| [k.source.as_str(), k.output.as_str()]).collect(),
        }
    }

    fn encode(&self, vocab: &Vocab) -> Result<TrainSet, CliError> {
        Ok(match self {
            Self::Pairs(v) => TrainSet::from_pairs(vocab, v)?,
            Self::Triples(v) => TrainSet::from_triples(vocab, v)?,
            Self::Kto(v) => TrainSet::from_kto(vocab, v)?,
        })
    }
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("train", a);
    let cfg = TrainConfig {
        method: a.method,
        loss: LossConfig { beta: a.beta, lambda_p: a.lambda_p, lambda_d: a.lambda_d },
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        clip_norm: a.clip_norm,
    };
    // Reject rule violations before touching any file.
    cfg.validate(a.reference.is_some())?;

    m.input(&a.data)?;
    let raw = RawData::load(a)?;
    let init = match &a.init {
        Some(p) => {
            m.input(p)?;
            load_checkpoint(p)?
        }
        None => {
            let config = ModelConfig {
                vocab: build_vocab(raw.texts()),
                d_model: a.d_model,
                blocks: a.blocks,
                heads: a.heads,
                context: a.context,
                seed: a.seed,
            };
            init_params(&config)?
        }
    };
    let reference = match &a.reference {
        Some(p) => {
            m.input(p)?;
            let r = load_checkpoint(p)?;
            check_compatible(&init, &r)?;
            Some(r)
        }
        None => None,
    };
    let data = raw.encode(init.vocab())?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    ensure_parent(&a.out)?;
    ensure_parent(&log_path)?;
    let file = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, &e))?;
    let mut log_out = std::io::BufWriter::new(file);
    let mut curve = Vec::new();
    let mut write_err = None;
    let trained = train(&init, reference.as_ref(), &data, &cfg, &mut |r: &LogRecord| {
        curve.push(r.loss);
        let line = serde_json::to_string(r).expect("log record serializes");
        if let Err(e) = writeln!(log_out, "{line}").and_then(|_| log_out.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, &e));
    }
    let trained = trained?;
    save_checkpoint(&trained, &a.out)?;
    m.model_fingerprint = Some(trained.config().fingerprint());
    m.loss_curve = curve;
    m.finish(&manifest_path(&a.out), &[a.out.clone(), log_path])
}

fn translate(a: &TranslateArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("translate", a);
    m.input(&a.model)?;
    m.input(&a.data)?;
    let params = load_checkpoint(&a.model)?;
    let mut pairs: Vec<LmPair> = read_jsonl(&a.data)?;
    pairs.retain(|p| keep(p.direction, a.direction));
    let sources: Vec<(Direction, &str)> = pairs.iter().map(|p| (p.direction, p.source.as_str())).collect();
    let outputs = translate_all(&params, &sources, a.max_len)?;
    let preds: Vec<Prediction> = pairs
        .iter()
        .zip(outputs)
        .map(|(p, prediction)| Prediction { id: p.id.clone(), direction: p.direction, prediction })
        .collect();
    ensure_parent(&a.out)?;
    write_jsonl(&a.out, &preds)?;
    m.model_fingerprint = Some(params.config().fingerprint());
    m.finish(&manifest_path(&a.out), std::slice::from_ref(&a.out))
}

fn cmd_merge(a: &MergeArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("merge", a);
    let weights = if a.weights.is_empty() { vec![1.0; a.models.len()] } else { a.weights.clone() };
    let cfg = MergeConfig { density: a.density, lambda: a.lambda, ..MergeConfig::new(a.algo, weights) };
    cfg.validate()?;
    let mut models = Vec::with_capacity(a.models.len());
    for p in &a.models {
        m.input(p)?;
        models.push(load_checkpoint(p)?);
    }
    let base = match &a.base {
        Some(p) => {
            m.input(p)?;
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    let refs: Vec<&PolicyParams> = models.iter().collect();
    let merged = merge(&cfg, base.as_ref(), &refs)?;
    ensure_parent(&a.out)?;
    save_checkpoint(&merged, &a.out)?;
    m.model_fingerprint = Some(merged.config().fingerprint());
    m.finish(&manifest_path(&a.out), std::slice::from_ref(&a.out))
}

/// Joins predictions to references by id. Any id present on one side only
/// is an error that lists them.
pub fn align(preds: &[Prediction], refs: &[LmPair]) -> Result<Vec<PairRecord>, CliError> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(CliError::Data(format!("duplicate prediction id {}", p.id)));
        }
    }
    let mut seen = HashSet::with_capacity(refs.len());
    for r in refs {
        if !seen.insert(r.id.as_str()) {
            return Err(CliError::Data(format!("duplicate reference id {}", r.id)));
        }
    }
    let no_pred: Vec<&str> = refs.iter().map(|r| r.id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    let no_ref: Vec<&str> = preds.iter().map(|p| p.id.as_str()).filter(|id| !seen.contains(id)).collect();
    if !no_pred.is_empty() || !no_ref.is_empty() {
        return Err(CliError::Data(format!(
            "predictions and references are not aligned; missing predictions: [{}]; missing references: [{}]",
            no_pred.join(", "),
            no_ref.join(", ")
        )));
    }
    refs.iter()
        .map(|r| {
            let p = by_id[r.id.as_str()];
            if p.direction != r.direction {
                return Err(CliError::Data(format!("id {} is {} in the predictions but {} in the references", r.id, p.direction, r.direction)));
            }
            Ok(PairRecord { id: r.id.clone(), direction: r.direction, prediction: p.prediction.clone(), reference: r.target.clone() })
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("eval", a);
    m.input(&a.predictions)?;
    m.input(&a.references)?;
    let preds: Vec<Prediction> = read_jsonl(&a.predictions)?;
    let refs: Vec<LmPair> = read_jsonl(&a.references)?;
    let records = align(&preds, &refs)?;

    let mut baseline = LexicalBaseline;
    let mut process;
    let scorer: Option<&mut dyn NliScorer> = match a.nli_scorer.as_deref() {
        None => None,
        Some("baseline") => Some(&mut baseline),
        Some(cmd) => {
            process = ProcessScorer::from_command_line(cmd)?;
            process.timeout = Duration::from_secs(a.nli_timeout_secs);
            Some(&mut process)
        }
    };
    let scored = evaluate(&records, scorer, a.max_in_flight)?;

    ensure_dir(&a.out_dir)?;
    let records_path = a.out_dir.join("records.jsonl");
    write_jsonl(&records_path, &scored)?;
    let mut outputs = vec![records_path];
    let mut reports: BTreeMap<String, MetricReport> = BTreeMap::new();
    for d in Direction::ALL {
        let part: Vec<_> = scored.iter().filter(|r| r.direction == d).cloned().collect();
        if part.is_empty() {
            continue;
        }
        let rep = aggregate_report(&part)?;
        let hist_dir = a.out_dir.join("hist").join(d.as_str());
        ensure_dir(&hist_dir)?;
        for (metric, summary) in &rep.metrics {
            let p = hist_dir.join(format!("{metric}.csv"));
            write_atomic(&p, summary.histogram.to_csv().as_bytes())?;
            outputs.push(p);
        }
        reports.insert(d.as_str().to_string(), rep);
    }
    let report_path = a.out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&reports).expect("report serializes");
    text.push('\n');
    write_atomic(&report_path, text.as_bytes())?;
    outputs.push(report_path);
    m.finish(&a.out_dir.join("manifest.json"), &outputs)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut m = ManifestBuilder::new("report", a);
    if !a.labels.is_empty() && a.labels.len() != a.reports.len() {
        return Err(CliError::Config(format!("{} labels for {} reports", a.labels.len(), a.reports.len())));
    }
    let mut rows = Vec::new();
    for (i, path) in a.reports.iter().enumerate() {
        m.input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, &e))?;
        let parsed: BTreeMap<String, MetricReport> =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| path.display().to_string());
        for rep in parsed.into_values() {
            rows.push((label.clone(), rep));
        }
    }
    let metrics: Vec<String> = {
        let mut names: Vec<String> = rows.iter().flat_map(|(_, r)| r.metrics.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    };
    let mut out = String::from("label,direction,count,wins,win_rate,nli_excluded");
    for name in &metrics {
        out.push_str(&format!(",{name}_mean,{name}_median"));
    }
    out.push('\n');
    for (label, rep) in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            csv_field(label),
            rep.direction,
            rep.count,
            rep.wins,
            rep.win_rate,
            rep.nli_excluded
        ));
        for name in &metrics {
            let s = rep.metrics.get(name);
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(",{},{}", cell(s.and_then(|s| s.mean)), cell(s.and_then(|s| s.median))));
        }
        out.push('\n');
    }
    ensure_parent(&a.out)?;
    write_atomic(&a.out, out.as_bytes())?;
    m.finish(&manifest_path(&a.out), std::slice::from_ref(&a.out))
}
