//! Command-line front end: one subcommand per operation, a JSON run-config
//! file with flag overrides, and stable exit codes (0 ok, 2 configuration,
//! 3 data, 4 remote).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::debias::{Debiaser, DecodingConfig, ScaleMode, Strategy};
use crate::error::{Error, Result};
use crate::eval::{
    load_prompts, render_report_table, run_generation_eval, select_extremes, AttributeScorer,
    EvalOptions, LexiconScorer, PromptRecord, RemoteScorer,
};
use crate::lm::{LanguageModel, NGramModel, RemoteLm, TableModel, TokenSequence};
use crate::templates::{default_registry, AttributeDescription, AttributeRegistry, TemplateSpec};

/// Environment variable holding the remote-scorer credential. The value is
/// sent as a bearer token and never logged.
pub const SCORER_API_KEY_VAR: &str = "SDLM_SCORER_API_KEY";

#[derive(Parser)]
#[command(
    name = "sdlm",
    version,
    about = "Self-diagnosis and self-debiasing decoding toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a diagnosis study: score labeled examples, calibrate the
    /// threshold on a dev split and report test accuracy and correlation.
    Diagnose(DiagnoseArgs),
    /// Generate continuations with debiased decoding.
    Generate(GenerateArgs),
    /// Windowed perplexity of a corpus under debiased scoring.
    Perplexity(PerplexityArgs),
    /// Generate and score continuations across a lambda grid, producing one
    /// report row per configuration.
    Eval(EvalArgs),
    /// Pick the most and least attribute-likely records from a prompt file.
    SelectExtremes(SelectExtremesArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run-config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Table-model file (exactly one model source must be configured).
    #[arg(long)]
    table_model: Option<PathBuf>,
    /// Corpus file to train an n-gram model on.
    #[arg(long)]
    ngram_corpus: Option<PathBuf>,
    #[arg(long)]
    ngram_order: Option<usize>,
    /// Add-k smoothing constant for the n-gram model.
    #[arg(long)]
    ngram_k: Option<f64>,
    /// Endpoint of a remote model server.
    #[arg(long)]
    remote_model: Option<String>,
    /// Attribute registry file (defaults to the six stock attributes).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Override template for diagnosis inputs.
    #[arg(long)]
    sdg_template: Option<PathBuf>,
    /// Override template for debiasing inputs.
    #[arg(long)]
    sdb_template: Option<PathBuf>,
    /// Decay constant.
    #[arg(long)]
    lambda: Option<f64>,
    /// Probability floor applied to the scaling factor.
    #[arg(long)]
    floor: Option<f64>,
    /// Disable the probability floor (ablation).
    #[arg(long)]
    no_floor: bool,
    /// soft | hard
    #[arg(long)]
    mode: Option<String>,
    /// greedy | beam | sample
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Seed for sampling and dev/test splits.
    #[arg(long)]
    seed: Option<u64>,
    /// Use parenthesized-keyword debiasing inputs.
    #[arg(long)]
    keywords: bool,
    /// Omit timestamps so identical invocations are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
    /// Worker threads for prompt-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Lexicon scorer word-list file.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Endpoint of a remote attribute scorer.
    #[arg(long)]
    remote_scorer: Option<String>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Labeled-examples file (JSON lines with "text" and "scores").
    #[arg(long)]
    examples: PathBuf,
    /// Attribute to diagnose.
    #[arg(long)]
    attribute: String,
    /// Fraction of examples used for threshold calibration.
    #[arg(long)]
    dev_fraction: Option<f64>,
    /// Report file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// A single prompt.
    #[arg(long, conflicts_with = "prompts")]
    prompt: Option<String>,
    /// A prompt file (JSON lines).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// all | none | comma-separated attribute names.
    #[arg(long, default_value = "all")]
    attributes: String,
    /// Write per-step traces as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write results as JSON instead of plain continuations on stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PerplexityArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Plain-text corpus file (whitespace tokens).
    #[arg(long)]
    corpus: PathBuf,
    /// Window length for non-overlapping evaluation windows.
    #[arg(long, default_value_t = 992)]
    window: usize,
    #[arg(long, default_value = "all")]
    attributes: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    prompts: PathBuf,
    /// Comma-separated decay constants, one report row each.
    #[arg(long, default_value = "0,10,50,100")]
    lambdas: String,
    #[arg(long, default_value = "all")]
    attributes: String,
    /// Exhibit threshold on scorer probabilities.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Corpus file for the optional perplexity column.
    #[arg(long)]
    ppl_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 992)]
    ppl_window: usize,
    /// Resumable checkpoint file for long runs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also print the plain-text table.
    #[arg(long)]
    table: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectExtremesArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    attribute: String,
    /// Examples per side (top n and bottom n).
    #[arg(short = 'n', long)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run-config file contents. Every field is optional; flags override.
#[derive(Debug, Default, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    model: Option<ModelSpec>,
    registry: Option<PathBuf>,
    sdg_template: Option<PathBuf>,
    sdb_template: Option<PathBuf>,
    lambda: Option<f64>,
    floor_epsilon: Option<f64>,
    mode: Option<String>,
    strategy: Option<String>,
    beam_width: Option<usize>,
    temperature: Option<f64>,
    max_new_tokens: Option<usize>,
    apply_floor_in_generation: Option<bool>,
    seed: Option<u64>,
    scorer: Option<ScorerSpec>,
    jobs: Option<usize>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModelSpec {
    Table(PathBuf),
    Ngram {
        corpus: PathBuf,
        order: usize,
        smoothing_k: f64,
    },
    Remote(String),
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
enum ScorerSpec {
    Lexicon(PathBuf),
    Remote(String),
}

/// Fully merged configuration for one invocation.
#[derive(Debug)]
struct Resolved {
    model: ModelSpec,
    registry: AttributeRegistry,
    sdg_template: TemplateSpec,
    sdb_template: Option<TemplateSpec>,
    decoding: DecodingConfig,
    seed: u64,
    scorer: Option<ScorerSpec>,
    keywords: bool,
    no_timestamp: bool,
    jobs: usize,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let file: RunConfigFile = match &common.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::config(format!("config file {}: {e}", path.display()))
            })?
        }
        None => RunConfigFile::default(),
    };

    // Model: flags override the file; exactly one source in the end.
    let mut model_flags: Vec<ModelSpec> = Vec::new();
    if let Some(path) = &common.table_model {
        model_flags.push(ModelSpec::Table(path.clone()));
    }
    if let Some(corpus) = &common.ngram_corpus {
        model_flags.push(ModelSpec::Ngram {
            corpus: corpus.clone(),
            order: common.ngram_order.unwrap_or(2),
            smoothing_k: common.ngram_k.unwrap_or(1.0),
        });
    }
    if let Some(endpoint) = &common.remote_model {
        model_flags.push(ModelSpec::Remote(endpoint.clone()));
    }
    if model_flags.len() > 1 {
        return Err(Error::config(
            "more than one model source given; use exactly one of --table-model, --ngram-corpus, --remote-model",
        ));
    }
    let model = model_flags
        .into_iter()
        .next()
        .or(file.model)
        .ok_or_else(|| {
            Error::config("no model configured; give --table-model, --ngram-corpus or --remote-model")
        })?;
    match &model {
        ModelSpec::Table(path) => require_file(path, "table model")?,
        ModelSpec::Ngram { corpus, .. } => require_file(corpus, "n-gram corpus")?,
        ModelSpec::Remote(_) => {}
    }

    let registry = match common.registry.as_ref().or(file.registry.as_ref()) {
        Some(path) => {
            require_file(path, "registry")?;
            AttributeRegistry::load(path).map_err(|e| match e {
                Error::Format { path, location, message } => Error::config(format!(
                    "registry {path}{}: {message}",
                    location.map(|l| format!(" ({l})")).unwrap_or_default()
                )),
                other => other,
            })?
        }
        None => default_registry(),
    };

    let sdg_template = match common.sdg_template.as_ref().or(file.sdg_template.as_ref()) {
        Some(path) => {
            require_file(path, "diagnosis template")?;
            TemplateSpec::from_file(path)?
        }
        None => TemplateSpec::sdg_default(),
    };
    let sdb_template = match common.sdb_template.as_ref().or(file.sdb_template.as_ref()) {
        Some(path) => {
            require_file(path, "debiasing template")?;
            Some(TemplateSpec::from_file(path)?)
        }
        None => None,
    };

    let seed = common.seed.or(file.seed).unwrap_or(0);
    let mode = match common
        .mode
        .as_deref()
        .or(file.mode.as_deref())
        .unwrap_or("soft")
    {
        "soft" => ScaleMode::Soft,
        "hard" => ScaleMode::Hard,
        other => return Err(Error::config(format!("unknown mode {other:?}"))),
    };
    let beam_width = common.beam_width.or(file.beam_width).unwrap_or(3);
    let temperature = common.temperature.or(file.temperature).unwrap_or(1.0);
    let strategy = match common
        .strategy
        .as_deref()
        .or(file.strategy.as_deref())
        .unwrap_or("beam")
    {
        "greedy" => Strategy::Greedy,
        "beam" => Strategy::Beam { width: beam_width },
        "sample" => Strategy::Sample { seed, temperature },
        other => return Err(Error::config(format!("unknown strategy {other:?}"))),
    };
    let decoding = DecodingConfig {
        lambda: common.lambda.or(file.lambda).unwrap_or(10.0),
        floor_epsilon: common.floor.or(file.floor_epsilon).unwrap_or(0.01),
        mode,
        strategy,
        max_new_tokens: common.max_new_tokens.or(file.max_new_tokens).unwrap_or(20),
        apply_floor_in_generation: if common.no_floor {
            false
        } else {
            file.apply_floor_in_generation.unwrap_or(true)
        },
    };
    decoding.validate()?;

    let scorer = if let Some(path) = &common.lexicon {
        require_file(path, "lexicon")?;
        Some(ScorerSpec::Lexicon(path.clone()))
    } else if let Some(endpoint) = &common.remote_scorer {
        Some(ScorerSpec::Remote(endpoint.clone()))
    } else {
        if let Some(ScorerSpec::Lexicon(path)) = &file.scorer {
            require_file(path, "lexicon")?;
        }
        file.scorer
    };

    Ok(Resolved {
        model,
        registry,
        sdg_template,
        sdb_template,
        decoding,
        seed,
        scorer,
        keywords: common.keywords,
        no_timestamp: common.no_timestamp,
        jobs: common.jobs.or(file.jobs).unwrap_or(1),
    })
}

fn build_model(spec: &ModelSpec) -> Result<Box<dyn LanguageModel>> {
    match spec {
        ModelSpec::Table(path) => Ok(Box::new(TableModel::load(path)?)),
        ModelSpec::Ngram {
            corpus,
            order,
            smoothing_k,
        } => {
            let text = std::fs::read_to_string(corpus)
                .map_err(|e| Error::io(corpus.display().to_string(), e))?;
            let tokens = TokenSequence::from_text(&text);
            Ok(Box::new(NGramModel::train(&tokens, *order, *smoothing_k)?))
        }
        ModelSpec::Remote(endpoint) => Ok(Box::new(RemoteLm::connect(endpoint)?)),
    }
}

fn build_scorer(resolved: &Resolved) -> Result<Box<dyn AttributeScorer>> {
    match &resolved.scorer {
        Some(ScorerSpec::Lexicon(path)) => Ok(Box::new(LexiconScorer::from_file(path)?)),
        Some(ScorerSpec::Remote(endpoint)) => {
            let mut scorer = RemoteScorer::new(endpoint);
            if let Ok(key) = std::env::var(SCORER_API_KEY_VAR) {
                scorer = scorer.with_api_key(key);
            }
            Ok(Box::new(scorer.with_max_in_flight(resolved.jobs.max(1))))
        }
        None => Err(Error::config(
            "no scorer configured; give --lexicon or --remote-scorer",
        )),
    }
}

/// Attribute selection: "all" for the whole registry, "none" for plain
/// decoding, otherwise comma-separated registry names.
fn pick_attributes(registry: &AttributeRegistry, spec: &str) -> Result<Vec<AttributeDescription>> {
    match spec {
        "all" => Ok(registry.entries().to_vec()),
        "none" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(str::trim)
            .filter(|name| !name.is_empty())
            .map(|name| {
                registry.get(name).cloned().ok_or_else(|| {
                    Error::config(format!("attribute {name:?} is not in the registry"))
                })
            })
            .collect(),
    }
}

fn timestamp_field(resolved: &Resolved, value: &mut serde_json::Value) {
    if resolved.no_timestamp {
        return;
    }
    if let serde_json::Value::Object(map) = value {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        map.insert("generated_at_unix".into(), now.into());
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
        }
        None => {
            print!("{text}");
            std::io::stdout()
                .flush()
                .map_err(|e| Error::io("stdout", e))
        }
    }
}

fn to_pretty_json(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let resolved = resolve(&args.common)?;
    let attribute = resolved
        .registry
        .get(&args.attribute)
        .cloned()
        .ok_or_else(|| {
            Error::config(format!(
                "attribute {:?} is not in the registry",
                args.attribute
            ))
        })?;
    let model = build_model(&resolved.model)?;
    let records = load_prompts(&args.examples)?;
    if records.is_empty() {
        return Err(Error::input(format!(
            "examples file {} is empty",
            args.examples.display()
        )));
    }
    let mut examples = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let score = record.scores.get(&attribute.name).copied().ok_or_else(|| {
            Error::input(format!(
                "example {index} has no score for attribute {:?}",
                attribute.name
            ))
        })?;
        examples.push(crate::diagnosis::LabeledExample::from_score(
            record.text.clone(),
            score,
        )?);
    }
    let options = crate::diagnosis::StudyOptions {
        dev_fraction: args.dev_fraction.unwrap_or(0.5),
        seed: resolved.seed,
        template: resolved.sdg_template.clone(),
    };
    let report = crate::diagnosis::run_diagnosis_study(&*model, &examples, &attribute, &options)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    timestamp_field(&resolved, &mut value);
    emit(&args.out, &to_pretty_json(&value))
}

fn make_debiaser<'m>(
    model: &'m dyn LanguageModel,
    resolved: &Resolved,
    attributes: Vec<AttributeDescription>,
    decoding: DecodingConfig,
) -> Result<Debiaser<'m>> {
    let mut debiaser = Debiaser::new(model, attributes, decoding)?;
    if let Some(template) = &resolved.sdb_template {
        debiaser = debiaser.with_sdb_template(template.clone());
    }
    if resolved.keywords {
        debiaser = debiaser.with_keyword_inputs()?;
    }
    Ok(debiaser)
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let resolved = resolve(&args.common)?;
    let attributes = pick_attributes(&resolved.registry, &args.attributes)?;
    let model = build_model(&resolved.model)?;
    let debiaser = make_debiaser(&*model, &resolved, attributes, resolved.decoding.clone())?;

    let prompts: Vec<String> = match (&args.prompt, &args.prompts) {
        (Some(prompt), None) => vec![prompt.clone()],
        (None, Some(path)) => load_prompts(path)?.into_iter().map(|r| r.text).collect(),
        (None, None) => return Err(Error::config("give --prompt or --prompts")),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let record_traces = args.trace.is_some();
    let mut results = Vec::with_capacity(prompts.len());
    for prompt in &prompts {
        results.push(debiaser.generate_with(prompt, record_traces)?);
    }

    if let Some(path) = &args.trace {
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for result in &results {
            for trace in result.per_step_traces.as_deref().unwrap_or(&[]) {
                let line = serde_json::to_string(trace).expect("trace serializes");
                writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
            }
        }
    }

    match &args.out {
        Some(_) => {
            let mut value = serde_json::json!({
                "results": results
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "prompt": r.prompt,
                            "continuation": r.continuation_text(),
                            "total_logprob": r.total_logprob,
                        })
                    })
                    .collect::<Vec<_>>(),
            });
            timestamp_field(&resolved, &mut value);
            emit(&args.out, &to_pretty_json(&value))
        }
        None => {
            let mut text = String::new();
            for result in &results {
                text.push_str(&result.continuation_text());
                text.push('\n');
            }
            emit(&None, &text)
        }
    }
}

fn cmd_perplexity(args: &PerplexityArgs) -> Result<()> {
    let resolved = resolve(&args.common)?;
    let attributes = pick_attributes(&resolved.registry, &args.attributes)?;
    let model = build_model(&resolved.model)?;
    let debiaser = make_debiaser(&*model, &resolved, attributes, resolved.decoding.clone())?;
    let text = std::fs::read_to_string(&args.corpus)
        .map_err(|e| Error::io(args.corpus.display().to_string(), e))?;
    let corpus = TokenSequence::from_text(&text);
    let ppl = debiaser.perplexity(&corpus, args.window)?;
    let mut value = serde_json::json!({
        "perplexity": ppl,
        "window": args.window,
        "corpus_tokens": corpus.len(),
        "lambda": resolved.decoding.lambda,
    });
    timestamp_field(&resolved, &mut value);
    match &args.out {
        Some(_) => emit(&args.out, &to_pretty_json(&value)),
        None => emit(&None, &format!("{ppl}\n")),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let resolved = resolve(&args.common)?;
    let attributes = pick_attributes(&resolved.registry, &args.attributes)?;
    if attributes.is_empty() {
        return Err(Error::config("eval needs at least one attribute"));
    }
    let model = build_model(&resolved.model)?;
    let scorer = build_scorer(&resolved)?;
    let prompts: Vec<PromptRecord> = load_prompts(&args.prompts)?;
    if prompts.is_empty() {
        return Err(Error::input(format!(
            "prompt file {} is empty",
            args.prompts.display()
        )));
    }
    let mut lambdas = Vec::new();
    for part in args.lambdas.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let lambda: f64 = part
            .parse()
            .map_err(|_| Error::config(format!("bad lambda value {part:?}")))?;
        lambdas.push(lambda);
    }
    if lambdas.is_empty() {
        return Err(Error::config("no lambda values given"));
    }
    let configs: Vec<DecodingConfig> = lambdas
        .iter()
        .map(|&lambda| DecodingConfig {
            lambda,
            ..resolved.decoding.clone()
        })
        .collect();
    let corpus = match &args.ppl_corpus {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some(TokenSequence::from_text(&text))
        }
        None => None,
    };
    let options = EvalOptions {
        threshold: args.threshold,
        jobs: resolved.jobs,
        checkpoint: args.checkpoint.clone(),
        perplexity_corpus: corpus,
        perplexity_window: args.ppl_window,
        sdb_template: resolved.sdb_template.clone(),
        keyword_inputs: resolved.keywords,
    };
    let reports = run_generation_eval(&*model, &prompts, &attributes, &configs, &*scorer, &options)?;
    if args.table {
        print!("{}", render_report_table(&reports));
    }
    let mut value = serde_json::json!({ "reports": reports });
    timestamp_field(&resolved, &mut value);
    emit(&args.out, &to_pretty_json(&value))
}

fn cmd_select_extremes(args: &SelectExtremesArgs) -> Result<()> {
    let resolved = resolve(&args.common).ok();
    let records = load_prompts(&args.prompts)?;
    let extremes = select_extremes(&records, &args.attribute, args.n)?;
    let mut text = String::new();
    for example in &extremes {
        let mut scores = BTreeMap::new();
        scores.insert(args.attribute.clone(), example.silver_score);
        let line = serde_json::json!({
            "text": example.text,
            "scores": scores,
            "label": example.silver_label,
        });
        text.push_str(&serde_json::to_string(&line).expect("line serializes"));
        text.push('\n');
    }
    let _ = resolved;
    emit(&args.out, &text)
}

/// Parses arguments and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Perplexity(args) => cmd_perplexity(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SelectExtremes(args) => cmd_select_extremes(args),
    };
    match result {
        Ok(()) => 0,
        Err(error) => {
            eprintln!("error: {error}");
            error.exit_code()
        }
    }
}
