use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use arr_core::eval::{option_accuracy, per_example_csv};
use arr_core::{
    build_bank as build, embedder_from_config, ingest_corpus, micro_f1, retrieval_ablation,
    EvalExample, KnowledgeBank, MatchRule, MetricsReport, Pipeline, QueryItem, RankedRun,
};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{AblateArgs, BuildBankArgs, CommonArgs, EvalArgs, PipelineArgs, RetrieveArgs};

/// Bad invocation; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| usage(format!("missing {flag} (flag or config file)")))
}

fn existing(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    let path = required(path, flag)?;
    if !path.exists() {
        return Err(usage(format!("{flag} {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_config(
    common: &CommonArgs,
    tweak: impl FnOnce(&mut crate::config::Overrides),
) -> Result<RunConfig> {
    if let Some(p) = &common.config {
        if !p.exists() {
            return Err(usage(format!("--config {} does not exist", p.display())));
        }
    }
    let mut o = common.overrides();
    tweak(&mut o);
    RunConfig::resolve(common.config.as_deref(), &o)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Writes to `path`, or stdout when `None`.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_bank_checked(cfg: &RunConfig) -> Result<KnowledgeBank> {
    let path = existing(cfg.bank_path.clone(), "--bank")?;
    let bank =
        KnowledgeBank::load(&path).with_context(|| format!("loading bank {}", path.display()))?;
    if bank.dim() != cfg.embedder.dim {
        bail!(
            "dimension mismatch: embedder is configured for dim {} but bank {} has dim {}",
            cfg.embedder.dim,
            path.display(),
            bank.dim()
        );
    }
    Ok(bank)
}

fn id_key(v: &Value) -> String {
    v.to_string()
}

pub fn build_bank(args: BuildBankArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common, |o| o.corpus = args.corpus.clone())?;
    let corpus = existing(cfg.corpus_path.clone(), "--corpus")?;
    let bank_path = required(cfg.bank_path.clone(), "--bank")?;
    let paragraphs = ingest_corpus(&corpus)?;
    let embedder = embedder_from_config(&cfg.embedder)?;
    let bank = build(paragraphs, embedder.as_ref())?;
    if let Some(dir) = bank_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    bank.save(&bank_path)?;
    println!("{} entries, dim {}", bank.len(), bank.dim());
    Ok(ExitCode::SUCCESS)
}

pub fn retrieve(args: RetrieveArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common, |_| {})?;
    let queries: Vec<(Option<Value>, String)> = match (&args.text, &args.file) {
        (Some(t), None) => vec![(None, t.clone())],
        (None, Some(f)) => {
            if !f.exists() {
                return Err(usage(format!("--file {} does not exist", f.display())));
            }
            read_jsonl::<QueryItem>(f)?
                .into_iter()
                .map(|q| (Some(q.id), q.query))
                .collect()
        }
        _ => return Err(usage("exactly one of --text or --file is required")),
    };
    let bank = load_bank_checked(&cfg)?;
    let embedder = embedder_from_config(&cfg.embedder)?;
    let k = cfg.pipeline.k;
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let mut out = output(cfg.out_path.as_deref())?;
    for (query_id, text) in &queries {
        let key = embedder.embed(text)?;
        for hit in bank.knn(&key, k)? {
            let p = bank.paragraph(hit.paragraph_id).expect("hit from bank");
            let mut line = json!({
                "id": hit.paragraph_id,
                "title": p.title,
                "distance": hit.distance,
                "rank": hit.rank,
            });
            if let Some(qid) = query_id {
                line["query_id"] = qid.clone();
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

pub fn pipeline(args: PipelineArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common, |o| o.queries = args.queries.clone())?;
    let queries_path = existing(cfg.queries_path.clone(), "--queries")?;
    let queries: Vec<QueryItem> = read_jsonl(&queries_path)?;
    let bank = load_bank_checked(&cfg)?;
    let embedder = embedder_from_config(&cfg.embedder)?;
    let gateways = cfg.gateways()?;
    let pipeline = Pipeline::new(&bank, embedder.as_ref(), &gateways, cfg.pipeline.clone())?;
    let entries = pipeline.run_batch(&queries, cfg.concurrency);

    let mut out = output(cfg.out_path.as_deref())?;
    for e in &entries {
        writeln!(out, "{}", e.to_json_line())?;
    }
    out.flush()?;
    let failed: Vec<&arr_core::BatchEntry> = entries.iter().filter(|e| !e.is_ok()).collect();
    eprintln!("{} records, {} failed", entries.len(), failed.len());
    for f in &failed {
        if let Err(err) = &f.result {
            eprintln!("  {}: {err}", id_key(&f.id));
        }
    }
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

#[derive(Deserialize)]
struct GoldLine {
    id: Value,
    #[serde(default)]
    query: String,
    gold_titles: Option<BTreeSet<String>>,
    relevant_ids: Option<BTreeSet<u32>>,
    /// Correct option letters for multiple-choice items.
    answer: Option<String>,
}

#[derive(Deserialize)]
struct PredictionLine {
    id: Value,
    #[serde(rename = "final")]
    final_answer: Option<String>,
    answer: Option<String>,
    ranked_ids: Option<Vec<u32>>,
    iterations: Option<Vec<arr_core::IterationTrace>>,
    error: Option<Value>,
}

impl PredictionLine {
    fn text(&self) -> String {
        self.final_answer
            .clone()
            .or_else(|| self.answer.clone())
            .unwrap_or_default()
    }

    /// Explicit ranking, else the first retrieval round of a pipeline record.
    fn ranking(&self) -> Option<Vec<u32>> {
        self.ranked_ids.clone().or_else(|| {
            self.iterations
                .as_ref()
                .and_then(|it| it.first())
                .map(|t| t.evidence.iter().map(|e| e.paragraph_id).collect())
        })
    }
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common, |o| o.gold = args.gold.clone())?;
    let gold_path = existing(cfg.gold_path.clone(), "--gold")?;
    if !args.predictions.exists() {
        return Err(usage(format!(
            "--predictions {} does not exist",
            args.predictions.display()
        )));
    }
    let gold: Vec<GoldLine> = read_jsonl(&gold_path)?;
    let preds: Vec<PredictionLine> = read_jsonl(&args.predictions)?;
    if gold.is_empty() {
        bail!("gold file {} is empty", gold_path.display());
    }
    if args.ks.contains(&0) {
        return Err(usage("--ks values must be at least 1"));
    }
    let by_id: HashMap<String, &PredictionLine> =
        preds.iter().map(|p| (id_key(&p.id), p)).collect();
    let mut aligned = Vec::with_capacity(gold.len());
    for g in &gold {
        let p = by_id
            .get(&id_key(&g.id))
            .ok_or_else(|| anyhow!("no prediction for gold id {}", id_key(&g.id)))?;
        aligned.push((g, *p));
    }
    let failed = aligned.iter().filter(|(_, p)| p.error.is_some()).count();
    let rule = if args.raw_match {
        MatchRule::Raw
    } else {
        MatchRule::Normalized
    };

    let title_task = gold.iter().all(|g| g.gold_titles.is_some());
    let ranked_task = gold.iter().all(|g| g.relevant_ids.is_some());
    let mut report;
    let mut csv_rows = None;
    if title_task {
        let examples: Vec<EvalExample> = gold
            .iter()
            .map(|g| EvalExample {
                id: g.id.clone(),
                query: g.query.clone(),
                gold_titles: g.gold_titles.clone().unwrap_or_default(),
            })
            .collect();
        let answers: Vec<String> = aligned.iter().map(|(_, p)| p.text()).collect();
        let catalog: BTreeSet<String> = match &args.catalog {
            Some(path) => ingest_corpus(path)?.into_iter().map(|p| p.title).collect(),
            None => examples
                .iter()
                .flat_map(|e| e.gold_titles.iter().cloned())
                .collect(),
        };
        let scores = micro_f1(&examples, &answers, &catalog, rule)?;
        report = MetricsReport::from_answers(&scores, examples.len(), rule);
        csv_rows = Some(scores.per_example);
    } else if ranked_task {
        let runs: Vec<RankedRun> = aligned
            .iter()
            .map(|(g, p)| {
                let ranked = p
                    .ranking()
                    .ok_or_else(|| anyhow!("prediction {} has no ranked_ids", id_key(&p.id)))?;
                RankedRun::try_new(
                    g.id.clone(),
                    ranked,
                    g.relevant_ids.clone().unwrap_or_default(),
                )
                .map_err(anyhow::Error::from)
            })
            .collect::<Result<_>>()?;
        report = MetricsReport::from_runs(&runs, &args.ks)?;
    } else {
        bail!("gold file must give gold_titles for every line or relevant_ids for every line");
    }
    if gold.iter().all(|g| g.answer.is_some()) {
        let golds: Vec<String> = gold
            .iter()
            .map(|g| g.answer.clone().unwrap_or_default())
            .collect();
        let predicted: Vec<String> = aligned.iter().map(|(_, p)| p.text()).collect();
        report.accuracy = Some(option_accuracy(&golds, &predicted)?);
        report
            .conventions
            .push("accuracy is exact match over normalized option letters (a lower bound)".into());
    }

    let doc = json!({
        "metrics": report,
        "config": {
            "gold": gold_path,
            "predictions": args.predictions,
            "catalog": args.catalog,
            "match_rule": rule,
            "ks": args.ks,
            "failed_records": failed,
        },
    });
    let mut out = output(cfg.out_path.as_deref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    out.flush()?;
    if let (Some(path), Some(rows)) = (&args.csv, csv_rows) {
        fs::write(path, per_example_csv(&rows))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if failed > 0 {
        eprintln!("{failed} prediction record(s) had failed; scored as empty answers");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(args: AblateArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common, |o| {
        o.queries = args.queries.clone();
        o.gold = args.gold.clone();
    })?;
    let max_k = args.common.k.unwrap_or(10);
    if max_k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let queries_path = existing(cfg.queries_path.clone(), "--queries")?;
    let gold_path = existing(cfg.gold_path.clone(), "--gold")?;
    let queries: Vec<QueryItem> = read_jsonl(&queries_path)?;
    let gold: Vec<GoldLine> = read_jsonl(&gold_path)?;
    let bank = load_bank_checked(&cfg)?;
    let embedder = embedder_from_config(&cfg.embedder)?;
    let drafter = cfg.drafter.gateway().context("drafter endpoint")?;

    let title_to_id: HashMap<&str, u32> = bank
        .paragraphs()
        .iter()
        .map(|p| (p.title.as_str(), p.id))
        .collect();
    let gold_by_id: HashMap<String, &GoldLine> = gold.iter().map(|g| (id_key(&g.id), g)).collect();
    let mut relevant = Vec::with_capacity(queries.len());
    for q in &queries {
        let g = gold_by_id
            .get(&id_key(&q.id))
            .ok_or_else(|| anyhow!("no gold entry for query id {}", id_key(&q.id)))?;
        let ids: BTreeSet<u32> = match (&g.relevant_ids, &g.gold_titles) {
            (Some(ids), _) => ids.clone(),
            (None, Some(titles)) => titles
                .iter()
                .filter_map(|t| title_to_id.get(t.as_str()).copied())
                .collect(),
            (None, None) => bail!(
                "gold entry {} has neither relevant_ids nor gold_titles",
                id_key(&g.id)
            ),
        };
        relevant.push(ids);
    }
    let report = retrieval_ablation(
        &bank,
        embedder.as_ref(),
        &drafter,
        &queries,
        &relevant,
        max_k,
        cfg.concurrency,
    )
    .map_err(anyhow::Error::msg)?;

    let json = serde_json::to_string_pretty(&report)?;
    match &cfg.out_path {
        Some(path) => {
            let mut out = output(Some(path))?;
            writeln!(out, "{json}")?;
            out.flush()?;
            println!("{:>3}  {:>11}  {:>12}", "k", "query_based", "answer_based");
            for row in &report.rows {
                println!(
                    "{:>3}  {:>11.4}  {:>12.4}",
                    row.k, row.query_based, row.answer_based
                );
            }
        }
        None => println!("{json}"),
    }
    if !report.failures.is_empty() {
        eprintln!(
            "{} of {} queries failed",
            report.failures.len(),
            queries.len()
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
