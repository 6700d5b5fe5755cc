//! Draft, retrieve, revise.
//!
//! For each query the drafting model writes an answer, that answer (or the
//! raw query, in query-based mode) is embedded and used to pull the k nearest
//! paragraphs from the bank, and the reviser rewrites the draft given the
//! evidence. Extra rounds re-retrieve with the previous revision.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bank::{BankError, KnowledgeBank, Paragraph};
use crate::embed::{EmbedError, Embedder};
use crate::eval::{recall_at_k, RankedRun};
use crate::gateway::{Gateway, GatewayError};
use crate::prompt::{assemble_revision_prompt, PromptError, DEFAULT_REVISION_INSTRUCTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    QueryBased,
    #[default]
    AnswerBased,
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "query" | "query_based" => Ok(Self::QueryBased),
            "answer" | "answer_based" => Ok(Self::AnswerBased),
            other => Err(format!(
                "unknown retrieval mode {other:?} (expected query or answer)"
            )),
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::QueryBased => "query_based",
            Self::AnswerBased => "answer_based",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: RetrievalMode,
    pub k: usize,
    pub iterations: usize,
    pub instruction_template: String,
    /// Defaults to the reviser's `max_input_tokens` when unset.
    pub token_budget: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::AnswerBased,
            k: 5,
            iterations: 1,
            instruction_template: DEFAULT_REVISION_INSTRUCTION.to_string(),
            token_budget: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iterations >= 1 && self.k == 0 {
            return Err("k must be at least 1 when iterations >= 1".into());
        }
        if self.token_budget == Some(0) {
            return Err("token_budget must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Draft,
    Embed,
    Retrieve,
    Assemble,
    Revise,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Draft => "draft",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Assemble => "assemble",
            Stage::Revise => "revise",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed (round {round}): {source}")]
pub struct PipelineError {
    pub stage: Stage,
    /// 0 for the draft, 1-based for retrieval/revision rounds.
    pub round: usize,
    #[source]
    pub source: StageError,
}

impl PipelineError {
    fn at(stage: Stage, round: usize) -> impl FnOnce(StageError) -> Self {
        move |source| Self {
            stage,
            round,
            source,
        }
    }
}

/// A retrieved neighbor resolved to its paragraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub paragraph_id: u32,
    pub rank: usize,
    pub distance: f32,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub round: usize,
    pub retrieval_text: String,
    pub evidence: Vec<Evidence>,
    /// How many of `evidence` fit into the prompt.
    pub evidence_in_prompt: usize,
    pub prompt: String,
    pub revised: String,
}

impl IterationTrace {
    pub fn evidence_ids(&self) -> BTreeSet<u32> {
        self.evidence.iter().map(|e| e.paragraph_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub query: String,
    pub draft: String,
    pub iterations: Vec<IterationTrace>,
    #[serde(rename = "final")]
    pub final_answer: String,
}

/// The two model roles.
#[derive(Debug)]
pub struct Gateways {
    pub drafter: Gateway,
    pub reviser: Gateway,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: Value,
    pub query: String,
}

#[derive(Debug)]
pub struct BatchEntry {
    pub id: Value,
    pub query: String,
    pub result: Result<PipelineRecord, PipelineError>,
}

#[derive(Serialize)]
struct RecordLine<'a> {
    id: &'a Value,
    query: &'a str,
    draft: &'a str,
    #[serde(rename = "final")]
    final_answer: &'a str,
    iterations: &'a [IterationTrace],
}

#[derive(Serialize)]
struct FailureLine<'a> {
    id: &'a Value,
    query: &'a str,
    error: FailureInfo,
}

#[derive(Serialize)]
struct FailureInfo {
    stage: Stage,
    round: usize,
    message: String,
}

impl BatchEntry {
    pub fn is_ok(&self) -> bool {
        self.result.is_ok()
    }

    /// One JSONL line (no trailing newline).
    pub fn to_json_line(&self) -> String {
        let out = match &self.result {
            Ok(r) => serde_json::to_string(&RecordLine {
                id: &self.id,
                query: &self.query,
                draft: &r.draft,
                final_answer: &r.final_answer,
                iterations: &r.iterations,
            }),
            Err(e) => serde_json::to_string(&FailureLine {
                id: &self.id,
                query: &self.query,
                error: FailureInfo {
                    stage: e.stage,
                    round: e.round,
                    message: e.source.to_string(),
                },
            }),
        };
        out.expect("record serializes")
    }
}

pub struct Pipeline<'a> {
    bank: &'a KnowledgeBank,
    embedder: &'a dyn Embedder,
    gateways: &'a Gateways,
    config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        bank: &'a KnowledgeBank,
        embedder: &'a dyn Embedder,
        gateways: &'a Gateways,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config
            .validate()
            .map_err(|m| PipelineError::at(Stage::Config, 0)(StageError::Config(m)))?;
        if embedder.dim() != bank.dim() {
            return Err(PipelineError::at(Stage::Config, 0)(StageError::Config(
                format!(
                    "embedder dimension {} does not match bank dimension {}",
                    embedder.dim(),
                    bank.dim()
                ),
            )));
        }
        Ok(Self {
            bank,
            embedder,
            gateways,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn budget(&self) -> usize {
        self.config
            .token_budget
            .unwrap_or(self.gateways.reviser.config().max_input_tokens)
    }

    /// Embeds `text` and resolves its k nearest paragraphs.
    pub fn retrieve(
        &self,
        text: &str,
        k: usize,
        round: usize,
    ) -> Result<Vec<Evidence>, PipelineError> {
        let key = self
            .embedder
            .embed(text)
            .map_err(|e| PipelineError::at(Stage::Embed, round)(e.into()))?;
        let hits = self
            .bank
            .knn(&key, k)
            .map_err(|e| PipelineError::at(Stage::Retrieve, round)(e.into()))?;
        Ok(hits
            .into_iter()
            .map(|h| {
                let p = self
                    .bank
                    .paragraph(h.paragraph_id)
                    .expect("hit ids come from the bank");
                Evidence {
                    paragraph_id: h.paragraph_id,
                    rank: h.rank,
                    distance: h.distance,
                    title: p.title.clone(),
                    body: p.body.clone(),
                }
            })
            .collect())
    }

    pub fn run_query(&self, query: &str) -> Result<PipelineRecord, PipelineError> {
        if query.is_empty() {
            return Err(PipelineError::at(Stage::Draft, 0)(
                GatewayError::EmptyQuery.into(),
            ));
        }
        let draft = self
            .gateways
            .drafter
            .generate_draft(query)
            .map_err(|e| PipelineError::at(Stage::Draft, 0)(e.into()))?;

        let mut retrieval_text = match self.config.mode {
            RetrievalMode::AnswerBased => draft.clone(),
            RetrievalMode::QueryBased => query.to_string(),
        };
        let mut iterations = Vec::with_capacity(self.config.iterations);
        for round in 1..=self.config.iterations {
            let evidence = self.retrieve(&retrieval_text, self.config.k, round)?;
            let paragraphs: Vec<Paragraph> = evidence
                .iter()
                .map(|e| Paragraph {
                    id: e.paragraph_id,
                    title: e.title.clone(),
                    body: e.body.clone(),
                    source: String::new(),
                })
                .collect();
            // Every round revises the original draft; only the retrieval
            // text changes between rounds.
            let prompt = assemble_revision_prompt(
                &self.config.instruction_template,
                query,
                &draft,
                &paragraphs,
                self.budget(),
            )
            .map_err(|e| PipelineError::at(Stage::Assemble, round)(e.into()))?;
            let revised = self
                .gateways
                .reviser
                .revise(&prompt.text)
                .map_err(|e| PipelineError::at(Stage::Revise, round)(e.into()))?;
            let next_text = revised.clone();
            iterations.push(IterationTrace {
                round,
                retrieval_text,
                evidence,
                evidence_in_prompt: prompt.evidence_included,
                prompt: prompt.text,
                revised,
            });
            retrieval_text = next_text;
        }
        let final_answer = iterations
            .last()
            .map(|t| t.revised.clone())
            .unwrap_or_else(|| draft.clone());
        Ok(PipelineRecord {
            query: query.to_string(),
            draft,
            iterations,
            final_answer,
        })
    }

    /// Runs every query with up to `concurrency` workers. Output order
    /// follows input order; failures are captured per entry.
    pub fn run_batch(&self, queries: &[QueryItem], concurrency: usize) -> Vec<BatchEntry> {
        parallel_map(queries, concurrency, |item| BatchEntry {
            id: item.id.clone(),
            query: item.query.clone(),
            result: self.run_query(&item.query),
        })
    }
}

/// Order-preserving map over `items` with at most `workers` threads.
pub(crate) fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub fn run_query(
    query: &str,
    bank: &KnowledgeBank,
    embedder: &dyn Embedder,
    gateways: &Gateways,
    config: &PipelineConfig,
) -> Result<PipelineRecord, PipelineError> {
    Pipeline::new(bank, embedder, gateways, config.clone())?.run_query(query)
}

pub fn run_batch(
    queries: &[QueryItem],
    bank: &KnowledgeBank,
    embedder: &dyn Embedder,
    gateways: &Gateways,
    config: &PipelineConfig,
    concurrency: usize,
) -> Result<Vec<BatchEntry>, PipelineError> {
    Ok(Pipeline::new(bank, embedder, gateways, config.clone())?.run_batch(queries, concurrency))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub k: usize,
    pub query_based: f64,
    pub answer_based: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub n_queries: usize,
    pub rows: Vec<AblationRow>,
    pub failures: Vec<AblationFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationFailure {
    pub id: Value,
    pub message: String,
}

/// Retrieval-only comparison of query text vs. draft answer as the search
/// key: recall@k for k in 1..=max_k under both modes, on the same drafts.
pub fn retrieval_ablation(
    bank: &KnowledgeBank,
    embedder: &dyn Embedder,
    drafter: &Gateway,
    queries: &[QueryItem],
    relevant: &[BTreeSet<u32>],
    max_k: usize,
    concurrency: usize,
) -> Result<AblationReport, String> {
    if queries.len() != relevant.len() {
        return Err(format!(
            "{} queries but {} relevance sets",
            queries.len(),
            relevant.len()
        ));
    }
    if max_k == 0 {
        return Err("max_k must be at least 1".into());
    }
    if embedder.dim() != bank.dim() {
        return Err(format!(
            "embedder dimension {} does not match bank dimension {}",
            embedder.dim(),
            bank.dim()
        ));
    }
    let ranked_ids = |text: &str| -> Result<Vec<u32>, String> {
        let key = embedder.embed(text).map_err(|e| e.to_string())?;
        Ok(bank
            .knn(&key, max_k)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|h| h.paragraph_id)
            .collect())
    };
    let outcomes = parallel_map(queries, concurrency, |item| {
        let draft = drafter
            .generate_draft(&item.query)
            .map_err(|e| e.to_string())?;
        Ok::<_, String>((ranked_ids(&item.query)?, ranked_ids(&draft)?))
    });

    let mut by_query = Vec::new();
    let mut by_answer = Vec::new();
    let mut failures = Vec::new();
    for ((item, rel), outcome) in queries.iter().zip(relevant).zip(outcomes) {
        match outcome {
            Ok((q, a)) => {
                by_query.push(RankedRun::new(item.id.clone(), q, rel.clone()));
                by_answer.push(RankedRun::new(item.id.clone(), a, rel.clone()));
            }
            Err(message) => failures.push(AblationFailure {
                id: item.id.clone(),
                message,
            }),
        }
    }
    let mut rows = Vec::with_capacity(max_k);
    if !by_query.is_empty() {
        for k in 1..=max_k {
            rows.push(AblationRow {
                k,
                query_based: recall_at_k(&by_query, k).map_err(|e| e.to_string())?,
                answer_based: recall_at_k(&by_answer, k).map_err(|e| e.to_string())?,
            });
        }
    }
    Ok(AblationReport {
        n_queries: by_query.len(),
        rows,
        failures,
    })
}
