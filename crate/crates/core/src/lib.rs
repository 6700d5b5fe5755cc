//! Draft-retrieve-revise question answering over a key-value knowledge bank.
//!
//! A domain model drafts an answer, the draft is embedded and used to fetch
//! the nearest paragraphs from the bank, and a stronger model revises the
//! draft given that evidence. The [`eval`] module scores the results.

pub mod bank;
pub mod embed;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod transport;

pub use bank::{
    build_bank, ingest_corpus, knn, load_bank, save_bank, BankError, KnowledgeBank, Paragraph,
    RetrievalHit,
};
pub use embed::{
    embed, embedder_from_config, hash_embed, EmbedError, Embedder, EmbedderConfig, EmbeddingVector,
    HashEmbedder, RemoteEmbedder,
};
pub use eval::{
    average_precision, extract_titles, mean_average_precision, mean_precision_at_k, micro_f1,
    precision_at_k, recall_at_k, EvalError, EvalExample, MatchRule, MetricsReport, MicroScores,
    RankedRun,
};
pub use gateway::{
    ChatBackend, ChatMessage, Gateway, GatewayError, ModelEndpointConfig, Role, ScriptRule,
    ScriptedResponder,
};
pub use pipeline::{
    retrieval_ablation, run_batch, run_query, AblationReport, BatchEntry, Gateways, IterationTrace,
    Pipeline, PipelineConfig, PipelineError, PipelineRecord, QueryItem, RetrievalMode,
};
pub use prompt::{assemble_revision_prompt, estimate_tokens, AssembledPrompt, PromptError};
pub use transport::{RetryPolicy, TransportError, API_KEY_ENV};
