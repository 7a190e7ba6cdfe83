//! Evaluation harness: prompt-set ingestion, extreme-example selection,
//! attribute scoring of generated continuations, and Table-style reports
//! across decoding configurations.

mod scorer;

pub use scorer::{AttributeScorer, LexiconScorer, RemoteScorer};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::debias::{Debiaser, DecodingConfig, ScaleMode, Strategy};
use crate::diagnosis::LabeledExample;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, TokenSequence};
use crate::templates::{AttributeDescription, TemplateSpec};

/// A prompt with optional silver attribute scores.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

/// What to do with a line that fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnMalformed {
    /// Stop at the first bad line (default).
    Fail,
    /// Skip bad lines, reporting them as warnings.
    Skip,
}

/// Loads a JSON-lines prompt file. Each line carries `"text"` (or `"prompt"`)
/// plus an optional `"scores"` object; lines in the public toxicity-prompts
/// shape (`{"prompt": {"text": ..., "toxicity": ...}}`) are adapted, with
/// underscored attribute names mapped to the spaced registry names.
pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<PromptRecord>> {
    let (records, _) = load_prompts_with(path, OnMalformed::Fail)?;
    Ok(records)
}

/// [`load_prompts`] with explicit malformed-line handling; returns warnings
/// for skipped lines.
pub fn load_prompts_with(
    path: impl AsRef<Path>,
    on_malformed: OnMalformed,
) -> Result<(Vec<PromptRecord>, Vec<String>)> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (number, line) in text.lines().enumerate() {
        let number = number + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_prompt_line(line) {
            Ok(record) => records.push(record),
            Err(message) => match on_malformed {
                OnMalformed::Fail => {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        location: Some(format!("line {number}")),
                        message,
                    })
                }
                OnMalformed::Skip => warnings.push(format!("line {number}: {message}")),
            },
        }
    }
    Ok((records, warnings))
}

fn parse_prompt_line(line: &str) -> Result<PromptRecord, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let object = value.as_object().ok_or("line is not a JSON object")?;

    let mut scores = BTreeMap::new();
    let mut text: Option<String> = None;

    if let Some(t) = object.get("text").and_then(|v| v.as_str()) {
        text = Some(t.to_string());
    }
    match object.get("prompt") {
        Some(serde_json::Value::String(t)) if text.is_none() => text = Some(t.clone()),
        Some(serde_json::Value::Object(prompt)) if text.is_none() => {
            // Public dataset shape: text plus per-attribute numeric fields.
            let t = prompt
                .get("text")
                .and_then(|v| v.as_str())
                .ok_or("\"prompt\" object has no \"text\" field")?;
            text = Some(t.to_string());
            for (key, v) in prompt {
                if key == "text" {
                    continue;
                }
                if let Some(score) = v.as_f64() {
                    scores.insert(key.replace('_', " "), score);
                }
            }
        }
        _ => {}
    }
    let text = text.ok_or("line has neither \"text\" nor \"prompt\"")?;

    if let Some(raw) = object.get("scores") {
        let map = raw.as_object().ok_or("\"scores\" is not an object")?;
        for (key, v) in map {
            let score = v
                .as_f64()
                .ok_or_else(|| format!("score for {key:?} is not a number"))?;
            scores.insert(key.clone(), score);
        }
    }
    for (key, &score) in &scores {
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("score for {key:?} is {score}, outside [0, 1]"));
        }
    }
    let id = object
        .get("id")
        .and_then(|v| v.as_str())
        .map(str::to_string);
    Ok(PromptRecord { id, text, scores })
}

/// Picks the `n` records most and least likely to exhibit `attribute`.
///
/// Selection is positional on one ordering (score descending, earlier record
/// first on ties): the top block keeps its descending order and is labeled
/// true, the bottom block is presented ascending and labeled false. With
/// `2n = |records|` this partitions the whole set.
pub fn select_extremes(
    records: &[PromptRecord],
    attribute: &str,
    n: usize,
) -> Result<Vec<LabeledExample>> {
    if n == 0 {
        return Err(Error::input("need n >= 1 extremes per side"));
    }
    if 2 * n > records.len() {
        return Err(Error::input(format!(
            "need at least {} records for n = {n}, got {}",
            2 * n,
            records.len()
        )));
    }
    let mut scored = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let score = record.scores.get(attribute).copied().ok_or_else(|| {
            Error::input(format!(
                "record {index} has no score for attribute {attribute:?}"
            ))
        })?;
        scored.push((index, score));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut out = Vec::with_capacity(2 * n);
    for &(index, score) in &scored[..n] {
        out.push(LabeledExample {
            text: records[index].text.clone(),
            silver_score: score,
            silver_label: true,
        });
    }
    let mut bottom: Vec<(usize, f64)> = scored[scored.len() - n..].to_vec();
    bottom.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    for (index, score) in bottom {
        out.push(LabeledExample {
            text: records[index].text.clone(),
            silver_score: score,
            silver_label: false,
        });
    }
    Ok(out)
}

/// Fraction of texts whose score for `attribute` is at least `threshold`
/// (inclusive, matching the at-least-50% convention).
pub fn empirical_attribute_probability(
    texts: &[String],
    scorer: &dyn AttributeScorer,
    attribute: &str,
    threshold: f64,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::input("need at least one text"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::input(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let attributes = [attribute.to_string()];
    let mut exhibit = 0usize;
    for text in texts {
        let scores = scorer.score(text, &attributes)?;
        if scores[attribute] >= threshold {
            exhibit += 1;
        }
    }
    Ok(exhibit as f64 / texts.len() as f64)
}

/// Options for a generation evaluation run.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Exhibit threshold on scorer probabilities.
    pub threshold: f64,
    /// Worker threads for prompt-level parallelism.
    pub jobs: usize,
    /// Resumable checkpoint file; completed (config, prompt) pairs are
    /// flushed here when a scorer fails mid-run and skipped on restart.
    pub checkpoint: Option<PathBuf>,
    /// Corpus for the optional perplexity column.
    pub perplexity_corpus: Option<TokenSequence>,
    pub perplexity_window: usize,
    /// Override for the debiasing template.
    pub sdb_template: Option<TemplateSpec>,
    /// Use parenthesized-keyword debiasing inputs.
    pub keyword_inputs: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            jobs: 1,
            checkpoint: None,
            perplexity_corpus: None,
            perplexity_window: 992,
            sdb_template: None,
            keyword_inputs: false,
        }
    }
}

/// One report row per decoding configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub lambda: f64,
    pub mode: ScaleMode,
    pub strategy: Strategy,
    pub n_prompts: usize,
    pub exhibit_counts: BTreeMap<String, usize>,
    pub attribute_probability: BTreeMap<String, f64>,
    /// `(baseline - this) / baseline` per attribute, against the first
    /// configuration; absent for the baseline row and for attributes whose
    /// baseline probability is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_reduction: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct CheckpointEntry {
    config: usize,
    prompt: usize,
    continuation: String,
    scores: BTreeMap<String, f64>,
}

/// Generates continuations for every prompt under every configuration,
/// scores them, and aggregates empirical attribute probabilities plus the
/// relative reduction against the first configuration.
///
/// Generation and scoring of distinct prompts run on `jobs` workers; the
/// aggregation is an ordered reduction by prompt index, so reports are
/// deterministic given the config seeds.
pub fn run_generation_eval(
    model: &dyn LanguageModel,
    prompts: &[PromptRecord],
    attributes: &[AttributeDescription],
    configs: &[DecodingConfig],
    scorer: &dyn AttributeScorer,
    options: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    if prompts.is_empty() {
        return Err(Error::input("need at least one prompt"));
    }
    if configs.is_empty() {
        return Err(Error::input("need at least one decoding configuration"));
    }
    let attribute_names: Vec<String> = attributes.iter().map(|a| a.name.clone()).collect();
    let mut done: BTreeMap<(usize, usize), (String, BTreeMap<String, f64>)> = BTreeMap::new();
    if let Some(path) = &options.checkpoint {
        if path.exists() {
            for entry in read_checkpoint(path)? {
                done.insert(
                    (entry.config, entry.prompt),
                    (entry.continuation, entry.scores),
                );
            }
        }
    }

    let mut reports = Vec::with_capacity(configs.len());
    for (config_index, config) in configs.iter().enumerate() {
        let mut debiaser = Debiaser::new(model, attributes.to_vec(), config.clone())?;
        if let Some(template) = &options.sdb_template {
            debiaser = debiaser.with_sdb_template(template.clone());
        }
        if options.keyword_inputs {
            debiaser = debiaser.with_keyword_inputs()?;
        }

        let outcome = score_all_prompts(
            &debiaser,
            prompts,
            &attribute_names,
            scorer,
            options.jobs,
            |prompt_index| done.get(&(config_index, prompt_index)).cloned(),
        );
        let rows = match outcome {
            Ok(rows) => rows,
            Err((partial, error)) => {
                for (prompt_index, row) in partial.into_iter().enumerate() {
                    if let Some(row) = row {
                        done.insert((config_index, prompt_index), row);
                    }
                }
                if let Some(path) = &options.checkpoint {
                    write_checkpoint(path, &done)?;
                }
                return Err(error);
            }
        };
        for (prompt_index, row) in rows.iter().enumerate() {
            done.insert((config_index, prompt_index), row.clone());
        }

        let mut exhibit_counts: BTreeMap<String, usize> = BTreeMap::new();
        for name in &attribute_names {
            let count = rows
                .iter()
                .filter(|(_, scores)| scores[name] >= options.threshold)
                .count();
            exhibit_counts.insert(name.clone(), count);
        }
        let attribute_probability: BTreeMap<String, f64> = exhibit_counts
            .iter()
            .map(|(name, &count)| (name.clone(), count as f64 / prompts.len() as f64))
            .collect();
        let perplexity = match &options.perplexity_corpus {
            Some(corpus) => Some(debiaser.perplexity(corpus, options.perplexity_window)?),
            None => None,
        };
        reports.push(EvalReport {
            lambda: config.lambda,
            mode: config.mode,
            strategy: config.strategy,
            n_prompts: prompts.len(),
            exhibit_counts,
            attribute_probability,
            relative_reduction: None,
            perplexity,
        });
    }

    let baseline = reports[0].attribute_probability.clone();
    for report in reports.iter_mut().skip(1) {
        let mut reduction = BTreeMap::new();
        for (name, &base) in &baseline {
            if base > 0.0 {
                let current = report.attribute_probability[name];
                reduction.insert(name.clone(), (base - current) / base);
            }
        }
        report.relative_reduction = Some(reduction);
    }
    Ok(reports)
}

type ScoredRow = (String, BTreeMap<String, f64>);

/// Generates and scores every prompt, reusing checkpointed rows. On failure,
/// returns what completed so the caller can flush it.
fn score_all_prompts(
    debiaser: &Debiaser<'_>,
    prompts: &[PromptRecord],
    attribute_names: &[String],
    scorer: &dyn AttributeScorer,
    jobs: usize,
    reuse: impl Fn(usize) -> Option<ScoredRow>,
) -> std::result::Result<Vec<ScoredRow>, (Vec<Option<ScoredRow>>, Error)> {
    let n = prompts.len();
    let mut rows: Vec<Option<ScoredRow>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for index in 0..n {
        let cached = reuse(index);
        if cached.is_none() {
            pending.push(index);
        }
        rows.push(cached);
    }

    let rows = Mutex::new(rows);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = jobs.max(1).min(pending.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    return;
                }
                let slot = next.fetch_add(1, Ordering::SeqCst);
                if slot >= pending.len() {
                    return;
                }
                let prompt_index = pending[slot];
                let result = debiaser.generate(&prompts[prompt_index].text).and_then(
                    |generation| {
                        let text = generation.continuation_text();
                        let scores = scorer.score(&text, attribute_names)?;
                        Ok((text, scores))
                    },
                );
                match result {
                    Ok(row) => {
                        rows.lock().unwrap()[prompt_index] = Some(row);
                    }
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    let rows = rows.into_inner().unwrap();
    if let Some(error) = failure.into_inner().unwrap() {
        return Err((rows, error));
    }
    Ok(rows
        .into_iter()
        .map(|row| row.expect("all prompts scored"))
        .collect())
}

fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CheckpointEntry = serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            location: Some(format!("line {}", number + 1)),
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn write_checkpoint(
    path: &Path,
    done: &BTreeMap<(usize, usize), (String, BTreeMap<String, f64>)>,
) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for (&(config, prompt), (continuation, scores)) in done {
        let entry = CheckpointEntry {
            config,
            prompt,
            continuation: continuation.clone(),
            scores: scores.clone(),
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| Error::validation(format!("serializing checkpoint: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Plain-text table with one row per configuration and one column per
/// attribute plus perplexity.
pub fn render_report_table(reports: &[EvalReport]) -> String {
    if reports.is_empty() {
        return String::new();
    }
    let attributes: Vec<&String> = reports[0].attribute_probability.keys().collect();
    let mut header = vec!["config".to_string()];
    header.extend(attributes.iter().map(|a| a.to_string()));
    header.push("PPL".to_string());

    let mut rows = vec![header];
    for report in reports {
        let mut row = vec![format!("lambda={}", report.lambda)];
        for &attribute in &attributes {
            let probability = report.attribute_probability[attribute];
            let cell = match report
                .relative_reduction
                .as_ref()
                .and_then(|r| r.get(attribute))
            {
                Some(reduction) => {
                    format!("{:.1}% ({:+.0}%)", probability * 100.0, -reduction * 100.0)
                }
                None => format!("{:.1}%", probability * 100.0),
            };
            row.push(cell);
        }
        row.push(match report.perplexity {
            Some(ppl) => format!("{ppl:.2}"),
            None => "-".to_string(),
        });
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|col| rows.iter().map(|r| r[col].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TableModel, Vocabulary};

    fn write_lines(dir: &tempfile::TempDir, name: &str, lines: &[&str]) -> PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn load_prompts_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "p.jsonl",
            &[
                r#"{"text": "one", "scores": {"toxicity": 0.9}}"#,
                r#"{"text": "two"}"#,
                r#"{"prompt": "three", "id": "x3"}"#,
            ],
        );
        let records = load_prompts(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].text, "one");
        assert_eq!(records[0].scores["toxicity"], 0.9);
        assert_eq!(records[2].text, "three");
        assert_eq!(records[2].id.as_deref(), Some("x3"));
    }

    #[test]
    fn load_prompts_adapts_public_dataset_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "rtp.jsonl",
            &[r#"{"prompt": {"text": "so then he", "toxicity": 0.25, "identity_attack": 0.75}}"#],
        );
        let records = load_prompts(&path).unwrap();
        assert_eq!(records[0].text, "so then he");
        assert_eq!(records[0].scores["toxicity"], 0.25);
        assert_eq!(records[0].scores["identity attack"], 0.75);
    }

    #[test]
    fn out_of_range_score_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[
                r#"{"text": "fine"}"#,
                r#"{"text": "bad", "scores": {"toxicity": 1.3}}"#,
            ],
        );
        let err = load_prompts(&path).unwrap_err();
        match err {
            Error::Format { location, .. } => assert_eq!(location.unwrap(), "line 2"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, "empty.jsonl", &[]);
        assert!(load_prompts(&path).unwrap().is_empty());
    }

    #[test]
    fn skip_mode_reports_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "mixed.jsonl",
            &[r#"{"text": "ok"}"#, "not json", r#"{"text": "ok2"}"#],
        );
        let (records, warnings) = load_prompts_with(&path, OnMalformed::Skip).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].starts_with("line 2"));
    }

    fn records_with_scores(scores: &[f64]) -> Vec<PromptRecord> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| PromptRecord {
                id: None,
                text: format!("t{i}"),
                scores: BTreeMap::from([("toxicity".to_string(), s)]),
            })
            .collect()
    }

    #[test]
    fn select_extremes_sorts_and_labels() {
        let records = records_with_scores(&[0.1, 0.9, 0.5, 0.95, 0.05, 0.2]);
        let out = select_extremes(&records, "toxicity", 2).unwrap();
        let scores: Vec<f64> = out.iter().map(|e| e.silver_score).collect();
        assert_eq!(scores, [0.95, 0.9, 0.05, 0.1]);
        let labels: Vec<bool> = out.iter().map(|e| e.silver_label).collect();
        assert_eq!(labels, [true, true, false, false]);
    }

    #[test]
    fn select_extremes_is_balanced() {
        let records = records_with_scores(&[0.3, 0.8, 0.6, 0.2, 0.5, 0.9, 0.4, 0.1]);
        for n in 1..=4 {
            let out = select_extremes(&records, "toxicity", n).unwrap();
            assert_eq!(out.iter().filter(|e| e.silver_label).count(), n);
            assert_eq!(out.iter().filter(|e| !e.silver_label).count(), n);
        }
    }

    #[test]
    fn select_extremes_partitions_at_half() {
        let records = records_with_scores(&[0.4, 0.6, 0.2, 0.8]);
        let out = select_extremes(&records, "toxicity", 2).unwrap();
        let mut texts: Vec<&str> = out.iter().map(|e| e.text.as_str()).collect();
        texts.sort_unstable();
        assert_eq!(texts, ["t0", "t1", "t2", "t3"]);
    }

    #[test]
    fn tie_at_the_cut_prefers_the_earlier_record_for_the_top_block() {
        let records = records_with_scores(&[0.5, 0.9, 0.5, 0.1]);
        let out = select_extremes(&records, "toxicity", 2).unwrap();
        // records 0 and 2 tie at 0.5; the earlier one (t0) wins the top slot.
        assert_eq!(out[0].text, "t1");
        assert_eq!(out[1].text, "t0");
        assert_eq!(out[2].text, "t3");
        assert_eq!(out[3].text, "t2");
        // Even with every score equal, n = |records|/2 still partitions.
        let equal = records_with_scores(&[0.5, 0.5, 0.5, 0.5]);
        let out = select_extremes(&equal, "toxicity", 2).unwrap();
        let mut texts: Vec<&str> = out.iter().map(|e| e.text.as_str()).collect();
        texts.sort_unstable();
        assert_eq!(texts, ["t0", "t1", "t2", "t3"]);
    }

    #[test]
    fn select_extremes_input_errors() {
        let records = records_with_scores(&[0.5, 0.6]);
        assert!(matches!(
            select_extremes(&records, "toxicity", 2).unwrap_err(),
            Error::Input(_)
        ));
        let missing = vec![PromptRecord {
            id: None,
            text: "x".into(),
            scores: BTreeMap::new(),
        }];
        assert!(matches!(
            select_extremes(&missing, "toxicity", 0).unwrap_err(),
            Error::Input(_)
        ));
    }

    #[test]
    fn empirical_probability_counts_inclusively() {
        let scorer = LexiconScorer::new([("toxicity", ["bad"])]).unwrap();
        // one match scores exactly 0.5, which is >= the 0.5 threshold
        let texts: Vec<String> = ["bad day", "fine day", "bad bad day"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = empirical_attribute_probability(&texts, &scorer, "toxicity", 0.5).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);

        let none: Vec<String> = vec!["ok".into(), "fine".into()];
        assert_eq!(
            empirical_attribute_probability(&none, &scorer, "toxicity", 0.5).unwrap(),
            0.0
        );
        let all: Vec<String> = vec!["bad".into(), "bad bad".into()];
        assert_eq!(
            empirical_attribute_probability(&all, &scorer, "toxicity", 0.5).unwrap(),
            1.0
        );
    }

    #[test]
    fn empirical_probability_is_permutation_invariant() {
        let scorer = LexiconScorer::new([("toxicity", ["bad"])]).unwrap();
        let a: Vec<String> = vec!["bad".into(), "ok".into(), "bad x".into()];
        let b: Vec<String> = vec!["bad x".into(), "bad".into(), "ok".into()];
        assert_eq!(
            empirical_attribute_probability(&a, &scorer, "toxicity", 0.5).unwrap(),
            empirical_attribute_probability(&b, &scorer, "toxicity", 0.5).unwrap()
        );
    }

    #[test]
    fn empirical_probability_rejects_empty_texts() {
        let scorer = LexiconScorer::new([("toxicity", ["bad"])]).unwrap();
        assert!(matches!(
            empirical_attribute_probability(&[], &scorer, "toxicity", 0.5).unwrap_err(),
            Error::Input(_)
        ));
    }

    /// Single-token prompts; the trigger token's row decides whether the
    /// first continuation token is flagged, and the chain then self-loops.
    fn trend_model() -> (TableModel, Vec<PromptRecord>) {
        let mut tokens = vec!["bad".to_string(), "good".to_string(), "tox".to_string()];
        let triggers: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        tokens.extend(triggers.iter().cloned());
        let vocab = Vocabulary::new(tokens).unwrap();
        let v = vocab.len();
        let row = |bad: f64, good: f64| {
            let mut probs = vec![0.0; v];
            probs[0] = bad;
            probs[1] = good;
            probs
        };
        let mut builder = TableModel::builder(vocab)
            .default_row(row(0.5, 0.5))
            .row(["bad"], row(0.9, 0.1))
            .row(["good"], row(0.1, 0.9));
        // Per-prompt base and debias rows: (base bad prob, debias-context bad prob)
        let settings = [(0.6, 0.8), (0.6, 0.62), (0.6, 0.605), (0.1, 0.3)];
        for (trigger, (base, sdb)) in triggers.iter().zip(settings) {
            builder = builder
                .row([trigger.clone()], row(base, 1.0 - base))
                .row(["tox".to_string(), trigger.clone()], row(sdb, 1.0 - sdb));
        }
        let prompts = triggers
            .iter()
            .map(|t| PromptRecord {
                id: None,
                text: t.clone(),
                scores: BTreeMap::new(),
            })
            .collect();
        (builder.build().unwrap(), prompts)
    }

    fn trend_configs(lambdas: &[f64]) -> Vec<DecodingConfig> {
        lambdas
            .iter()
            .map(|&lambda| DecodingConfig {
                lambda,
                strategy: Strategy::Beam { width: 3 },
                max_new_tokens: 4,
                ..DecodingConfig::default()
            })
            .collect()
    }

    fn trend_attribute() -> AttributeDescription {
        AttributeDescription::new("toxicity", "tox").unwrap()
    }

    #[test]
    fn eval_reports_monotone_reduction_and_reproducible_baseline() {
        let (model, prompts) = trend_model();
        let scorer = LexiconScorer::new([("toxicity", ["bad"])]).unwrap();
        let options = EvalOptions {
            sdb_template: Some(TemplateSpec::new("{attribute} {text}").unwrap()),
            ..EvalOptions::default()
        };
        let configs = trend_configs(&[0.0, 10.0, 50.0, 0.0]);
        let reports = run_generation_eval(
            &model,
            &prompts,
            &[trend_attribute()],
            &configs,
            &scorer,
            &options,
        )
        .unwrap();
        assert_eq!(reports.len(), 4);
        let p: Vec<f64> = reports
            .iter()
            .map(|r| r.attribute_probability["toxicity"])
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
        // A second lambda=0 run reproduces the baseline row.
        assert_eq!(reports[3].attribute_probability, reports[0].attribute_probability);
        assert_eq!(reports[3].exhibit_counts, reports[0].exhibit_counts);
        // Reduction bookkeeping.
        assert!(reports[0].relative_reduction.is_none());
        let red = reports[1].relative_reduction.as_ref().unwrap()["toxicity"];
        assert!((red - (p[0] - p[1]) / p[0]).abs() < 1e-12);
    }

    #[test]
    fn eval_runs_identically_in_parallel() {
        let (model, prompts) = trend_model();
        let scorer = LexiconScorer::new([("toxicity", ["bad"])]).unwrap();
        let base = EvalOptions {
            sdb_template: Some(TemplateSpec::new("{attribute} {text}").unwrap()),
            ..EvalOptions::default()
        };
        let parallel = EvalOptions { jobs: 4, ..base.clone() };
        let configs = trend_configs(&[0.0, 50.0]);
        let a = run_generation_eval(&model, &prompts, &[trend_attribute()], &configs, &scorer, &base)
            .unwrap();
        let b = run_generation_eval(
            &model,
            &prompts,
            &[trend_attribute()],
            &configs,
            &scorer,
            &parallel,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    /// Scorer that fails after a fixed number of calls, for checkpoint tests.
    struct FlakyScorer {
        inner: LexiconScorer,
        calls: AtomicUsize,
        fail_after: usize,
    }

    impl AttributeScorer for FlakyScorer {
        fn score(&self, text: &str, attributes: &[String]) -> Result<BTreeMap<String, f64>> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            if call >= self.fail_after {
                return Err(Error::transport("scorer quota exhausted"));
            }
            self.inner.score(text, attributes)
        }
    }

    #[test]
    fn checkpoint_flushes_partial_results_and_resumes() {
        let (model, prompts) = trend_model();
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = dir.path().join("eval.ckpt.jsonl");
        let options = EvalOptions {
            checkpoint: Some(checkpoint.clone()),
            sdb_template: Some(TemplateSpec::new("{attribute} {text}").unwrap()),
            ..EvalOptions::default()
        };
        let configs = trend_configs(&[0.0, 50.0]);

        let flaky = FlakyScorer {
            inner: LexiconScorer::new([("toxicity", ["bad"])]).unwrap(),
            calls: AtomicUsize::new(0),
            fail_after: 3,
        };
        let err = run_generation_eval(
            &model,
            &prompts,
            &[trend_attribute()],
            &configs,
            &flaky,
            &options,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Transport { .. }));
        assert!(checkpoint.exists());
        let flushed = read_checkpoint(&checkpoint).unwrap();
        assert_eq!(flushed.len(), 3);

        // Resume with a healthy scorer: only the remaining prompts are scored.
        let counting = FlakyScorer {
            inner: LexiconScorer::new([("toxicity", ["bad"])]).unwrap(),
            calls: AtomicUsize::new(0),
            fail_after: usize::MAX,
        };
        let reports = run_generation_eval(
            &model,
            &prompts,
            &[trend_attribute()],
            &configs,
            &counting,
            &options,
        )
        .unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), 2 * prompts.len() - 3);

        // And the resumed reports match a from-scratch run.
        let fresh = run_generation_eval(
            &model,
            &prompts,
            &[trend_attribute()],
            &configs,
            &LexiconScorer::new([("toxicity", ["bad"])]).unwrap(),
            &EvalOptions {
                checkpoint: None,
                ..options.clone()
            },
        )
        .unwrap();
        assert_eq!(reports, fresh);
    }

    #[test]
    fn report_table_has_a_row_per_config() {
        let (model, prompts) = trend_model();
        let scorer = LexiconScorer::new([("toxicity", ["bad"])]).unwrap();
        let options = EvalOptions {
            sdb_template: Some(TemplateSpec::new("{attribute} {text}").unwrap()),
            ..EvalOptions::default()
        };
        let reports = run_generation_eval(
            &model,
            &prompts,
            &[trend_attribute()],
            &trend_configs(&[0.0, 10.0, 50.0, 100.0]),
            &scorer,
            &options,
        )
        .unwrap();
        let table = render_report_table(&reports);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("toxicity"));
        assert!(lines[1].starts_with("lambda=0"));
        assert!(lines[4].starts_with("lambda=100"));
    }
}
