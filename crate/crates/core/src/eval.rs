//! Answer and retrieval metrics: title-inclusion micro P/R/F1, recall@k,
//! precision@k, MAP, and exact-match accuracy over option letters.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{examples} examples but {answers} answers")]
    LengthMismatch { examples: usize, answers: usize },
    #[error("no runs")]
    NoRuns,
    #[error("no examples")]
    NoExamples,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("run {0} has no relevant ids")]
    NoRelevant(String),
    #[error("run {query_id} ranks id {id} more than once")]
    DuplicateRankedId { query_id: String, id: u32 },
    #[error("example {0} has no gold titles")]
    NoGoldTitles(String),
}

/// How catalog titles are located inside an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// NFKC plus whitespace collapsing on both sides.
    #[default]
    Normalized,
    /// Plain substring test.
    Raw,
}

/// NFKC, then every whitespace run becomes one space, trimmed.
pub fn normalize_text(s: &str) -> String {
    let nfkc: String = s.nfkc().collect();
    nfkc.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn extract_titles(
    answer: &str,
    catalog: &BTreeSet<String>,
    rule: MatchRule,
) -> BTreeSet<String> {
    match rule {
        MatchRule::Raw => catalog
            .iter()
            .filter(|t| !t.is_empty() && answer.contains(t.as_str()))
            .cloned()
            .collect(),
        MatchRule::Normalized => {
            let haystack = normalize_text(answer);
            catalog
                .iter()
                .filter(|t| {
                    let needle = normalize_text(t);
                    !needle.is_empty() && haystack.contains(&needle)
                })
                .cloned()
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: Value,
    #[serde(default)]
    pub query: String,
    pub gold_titles: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScore {
    pub id: Value,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
    /// Share of examples with at least one gold title found.
    pub example_hit_rate: f64,
    pub per_example: Vec<ExampleScore>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged title-inclusion precision, recall and F1.
pub fn micro_f1<S: AsRef<str>>(
    examples: &[EvalExample],
    answers: &[S],
    catalog: &BTreeSet<String>,
    rule: MatchRule,
) -> Result<MicroScores, EvalError> {
    if examples.len() != answers.len() {
        return Err(EvalError::LengthMismatch {
            examples: examples.len(),
            answers: answers.len(),
        });
    }
    if examples.is_empty() {
        return Err(EvalError::NoExamples);
    }
    let mut per_example = Vec::with_capacity(examples.len());
    let (mut tp, mut pred, mut gold, mut hits) = (0, 0, 0, 0);
    for (ex, answer) in examples.iter().zip(answers) {
        if ex.gold_titles.is_empty() {
            return Err(EvalError::NoGoldTitles(ex.id.to_string()));
        }
        let predicted = extract_titles(answer.as_ref(), catalog, rule);
        let t = predicted.intersection(&ex.gold_titles).count();
        tp += t;
        pred += predicted.len();
        gold += ex.gold_titles.len();
        hits += usize::from(t > 0);
        per_example.push(ExampleScore {
            id: ex.id.clone(),
            predicted,
            gold: ex.gold_titles.clone(),
            true_positives: t,
        });
    }
    Ok(MicroScores {
        precision: ratio(tp, pred),
        recall: ratio(tp, gold),
        // 2PR/(P+R) reduces to 2TP/(|pred|+|gold|).
        f1: ratio(2 * tp, pred + gold),
        true_positives: tp,
        predicted: pred,
        gold,
        example_hit_rate: ratio(hits, examples.len()),
        per_example,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub query_id: Value,
    pub ranked_ids: Vec<u32>,
    pub relevant_ids: BTreeSet<u32>,
}

impl RankedRun {
    /// Builds a run; repeated ranked ids keep their first position.
    pub fn new(query_id: Value, ranked_ids: Vec<u32>, relevant_ids: BTreeSet<u32>) -> Self {
        let mut seen = HashSet::new();
        let ranked_ids = ranked_ids
            .into_iter()
            .filter(|id| seen.insert(*id))
            .collect();
        Self {
            query_id,
            ranked_ids,
            relevant_ids,
        }
    }

    pub fn try_new(
        query_id: Value,
        ranked_ids: Vec<u32>,
        relevant_ids: BTreeSet<u32>,
    ) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        if let Some(id) = ranked_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(EvalError::DuplicateRankedId {
                query_id: query_id.to_string(),
                id: *id,
            });
        }
        Ok(Self {
            query_id,
            ranked_ids,
            relevant_ids,
        })
    }

    fn hits_in_top(&self, k: usize) -> usize {
        self.ranked_ids
            .iter()
            .take(k)
            .filter(|id| self.relevant_ids.contains(id))
            .count()
    }
}

/// Fraction of runs with a relevant id among the first k.
pub fn recall_at_k(runs: &[RankedRun], k: usize) -> Result<f64, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let found = runs.iter().filter(|r| r.hits_in_top(k) > 0).count();
    Ok(ratio(found, runs.len()))
}

pub fn precision_at_k(run: &RankedRun, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(ratio(run.hits_in_top(k), k))
}

pub fn mean_precision_at_k(runs: &[RankedRun], k: usize) -> Result<f64, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let sum: f64 = runs
        .iter()
        .map(|r| precision_at_k(r, k))
        .sum::<Result<f64, _>>()?;
    Ok(sum / runs.len() as f64)
}

/// Sum of precision@r over the ranks r of relevant hits, divided by the
/// number of relevant ids. Zero when nothing relevant is retrieved.
pub fn average_precision(run: &RankedRun) -> Result<f64, EvalError> {
    if run.relevant_ids.is_empty() {
        return Err(EvalError::NoRelevant(run.query_id.to_string()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in run.ranked_ids.iter().enumerate() {
        if run.relevant_ids.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / run.relevant_ids.len() as f64)
}

pub fn mean_average_precision(runs: &[RankedRun]) -> Result<f64, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let sum: f64 = runs.iter().map(average_precision).sum::<Result<f64, _>>()?;
    Ok(sum / runs.len() as f64)
}

/// Sorted, de-duplicated option letters in an answer, e.g. "b, A" -> "AB".
/// Letters count when they form a one-letter token or an all-caps token
/// ("AB"), so ordinary words are ignored.
pub fn normalize_options(answer: &str) -> String {
    let text: String = answer.nfkc().collect();
    let letters: BTreeSet<char> = text
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|tok| {
            tok.len() == 1 || (!tok.is_empty() && tok.chars().all(|c| c.is_ascii_uppercase()))
        })
        .flat_map(str::chars)
        .map(|c| c.to_ascii_uppercase())
        .collect();
    letters.into_iter().collect()
}

/// Exact-match accuracy over normalized option letters. This is a lower
/// bound on a human judgment of the same answers.
pub fn option_accuracy<S: AsRef<str>, T: AsRef<str>>(
    gold: &[S],
    predicted: &[T],
) -> Result<f64, EvalError> {
    if gold.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            examples: gold.len(),
            answers: predicted.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::NoExamples);
    }
    let correct = gold
        .iter()
        .zip(predicted)
        .filter(|(g, p)| normalize_options(g.as_ref()) == normalize_options(p.as_ref()))
        .count();
    Ok(ratio(correct, gold.len()))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub n_examples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub example_hit_rate: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub recall_at_k: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub precision_at_k: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Zero-denominator and matching conventions in force.
    pub conventions: Vec<String>,
}

impl MetricsReport {
    pub fn from_answers(scores: &MicroScores, n_examples: usize, rule: MatchRule) -> Self {
        Self {
            n_examples,
            micro_precision: Some(scores.precision),
            micro_recall: Some(scores.recall),
            micro_f1: Some(scores.f1),
            example_hit_rate: Some(scores.example_hit_rate),
            conventions: vec![
                format!("title matching: {rule:?}"),
                "precision with no predicted titles is 0".into(),
            ],
            ..Default::default()
        }
    }

    pub fn from_runs(runs: &[RankedRun], ks: &[usize]) -> Result<Self, EvalError> {
        let mut report = Self {
            n_examples: runs.len(),
            conventions: vec!["average precision of a run with no relevant hit is 0".into()],
            ..Default::default()
        };
        for &k in ks {
            report.recall_at_k.insert(k, recall_at_k(runs, k)?);
            report
                .precision_at_k
                .insert(k, mean_precision_at_k(runs, k)?);
        }
        report.map_score = Some(mean_average_precision(runs)?);
        Ok(report)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn join_titles(set: &BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join(" | ")
}

/// Per-example rows for error analysis: id, predicted, gold, true_positives.
pub fn per_example_csv(rows: &[ExampleScore]) -> String {
    let mut out = String::from("id,predicted,gold,true_positives\n");
    for r in rows {
        let id = match &r.id {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&id),
            csv_field(&join_titles(&r.predicted)),
            csv_field(&join_titles(&r.gold)),
            r.true_positives
        ));
    }
    out
}
