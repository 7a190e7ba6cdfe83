//! Self-diagnosis and self-debiasing for language-model decoding.
//!
//! The toolkit does two things with nothing but a model's own next-token
//! probabilities:
//!
//! - **Self-diagnosis** ([`diagnosis`]): ask the model whether a text
//!   contains an undesired attribute and read the Yes/No probabilities at
//!   the answer slot, giving a score in `[0, 1]` plus threshold calibration
//!   and correlation metrics.
//! - **Self-debiasing** ([`debias`]): while generating, also score a context
//!   that *encourages* the attribute; tokens the encouraging context favors
//!   get exponentially down-weighted before the next token is chosen.
//!
//! Models implement the [`lm::LanguageModel`] contract. Deterministic table
//! models and add-k smoothed n-gram models run everything at desk scale;
//! the [`lm::RemoteLm`] client speaks a small HTTP protocol so the same
//! algorithms drive a full-size model server. The [`eval`] module ingests
//! prompt sets, scores generated continuations (remote moderation API or a
//! deterministic lexicon double) and produces per-lambda report tables.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `sdlm` binary for the command-line front end.

pub mod cli;
pub mod debias;
pub mod diagnosis;
mod error;
pub mod eval;
pub mod lm;
pub mod templates;

pub use error::{Error, Result};

pub use debias::{
    alpha, delta, DebiasStepTrace, Debiaser, DecodingConfig, GenerationResult, ScaleMode, Strategy,
};
pub use diagnosis::{
    calibrate_threshold, classification_accuracy, diagnose, pearson_correlation,
    run_diagnosis_study, CalibrationResult, DiagnosisReport, DiagnosisScore, LabeledExample,
    StudyOptions,
};
pub use eval::{
    empirical_attribute_probability, load_prompts, load_prompts_with, render_report_table,
    run_generation_eval, select_extremes, AttributeScorer, EvalOptions, EvalReport, LexiconScorer,
    OnMalformed, PromptRecord, RemoteScorer,
};
pub use lm::{
    LanguageModel, NGramModel, NextTokenDistribution, RemoteLm, TableModel, TokenSequence,
    Vocabulary,
};
pub use templates::{
    default_registry, keyword_registry, render_sdb, render_sdb_keyword, render_sdg,
    AttributeDescription, AttributeRegistry, TemplateSpec,
};
