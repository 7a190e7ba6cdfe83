//! The debiasing decoder: per-step distribution rescaling from the gap
//! between the plain context and attribute-encouraging contexts, plus
//! greedy/beam/sampling generation and windowed perplexity.
//!
//! Per step, with `p` the distribution given the plain context `x` and
//! `q_y` the distribution given the debiasing input for attribute `y`:
//!
//! - `delta_y(w) = p(w) - q_y(w)`; the per-token minimum over attributes
//!   flags tokens that any debiasing input makes more likely.
//! - `alpha(d) = 1` for `d >= 0`, else `exp(lambda * d)` (soft) or `0` (hard).
//! - the emitted distribution is `max(floor, alpha(delta_min(w))) * p(w)`,
//!   renormalized. The floor keeps every token's mass positive so perplexity
//!   stays finite; a flag disables it for ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{LanguageModel, NextTokenDistribution, TokenSequence};
use crate::templates::{render_sdb_keyword, AttributeDescription, TemplateSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Exponential decay of attribute-leaning tokens.
    Soft,
    /// Indicator: attribute-leaning tokens are zeroed (before any floor).
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Sample { seed: u64, temperature: f64 },
}

/// Decoding configuration: decay constant, probability floor, scale mode,
/// search strategy and token budget.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecodingConfig {
    pub lambda: f64,
    pub floor_epsilon: f64,
    pub mode: ScaleMode,
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    /// Applies the floor during generation and perplexity scoring.
    pub apply_floor_in_generation: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            lambda: 10.0,
            floor_epsilon: 0.01,
            mode: ScaleMode::Soft,
            strategy: Strategy::Beam { width: 3 },
            max_new_tokens: 20,
            apply_floor_in_generation: true,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config(format!(
                "decay constant must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.floor_epsilon) {
            return Err(Error::config(format!(
                "floor must be in [0, 1], got {}",
                self.floor_epsilon
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be positive"));
        }
        match self.strategy {
            Strategy::Beam { width } if width == 0 => {
                Err(Error::config("beam width must be at least 1"))
            }
            Strategy::Sample { temperature, .. } if temperature <= 0.0 => Err(Error::config(
                format!("temperature must be positive, got {temperature}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Elementwise difference `p_orig - p_sdb`; negative entries flag tokens the
/// debiasing input favors.
pub fn delta(p_orig: &NextTokenDistribution, p_sdb: &NextTokenDistribution) -> Result<Vec<f64>> {
    if p_orig.len() != p_sdb.len() {
        return Err(Error::input(format!(
            "distribution lengths differ: {} vs {}",
            p_orig.len(),
            p_sdb.len()
        )));
    }
    Ok(p_orig
        .probs()
        .iter()
        .zip(p_sdb.probs())
        .map(|(&p, &q)| p - q)
        .collect())
}

/// Scaling function: 1 for nonnegative differences; for negative differences,
/// `exp(lambda * x)` in soft mode and 0 in hard mode. The floor is applied by
/// the caller, not here.
pub fn alpha(x: f64, lambda: f64, mode: ScaleMode) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        match mode {
            ScaleMode::Soft => (lambda * x).exp(),
            ScaleMode::Hard => 0.0,
        }
    }
}

/// Everything computed in one decoding step.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DebiasStepTrace {
    pub original: NextTokenDistribution,
    pub per_attribute_sdb: Vec<NextTokenDistribution>,
    pub delta_min: Vec<f64>,
    pub scale: Vec<f64>,
    pub debiased: NextTokenDistribution,
}

/// A finished generation: the emitted continuation, its cumulative log
/// probability under the per-step debiased distributions, and optionally the
/// full per-step traces.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GenerationResult {
    pub prompt: String,
    pub continuation: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step_traces: Option<Vec<DebiasStepTrace>>,
    pub total_logprob: f64,
}

impl GenerationResult {
    pub fn continuation_text(&self) -> String {
        self.continuation.join(" ")
    }
}

/// The plain context plus one debiasing context per attribute; continuation
/// tokens are appended to all of them as generation proceeds so the compared
/// histories stay aligned.
#[derive(Debug, Clone)]
struct StepContexts {
    x: TokenSequence,
    /// (prefix length to preserve under truncation, context)
    sdb: Vec<(usize, TokenSequence)>,
}

impl StepContexts {
    fn push(&mut self, token: &str) {
        self.x.push(token);
        for (_, ctx) in &mut self.sdb {
            ctx.push(token);
        }
    }
}

/// Debiased scoring and generation against one model, one attribute set and
/// one configuration.
pub struct Debiaser<'m> {
    model: &'m dyn LanguageModel,
    attributes: Vec<AttributeDescription>,
    config: DecodingConfig,
    sdb_template: TemplateSpec,
    keyword_inputs: bool,
}

impl<'m> Debiaser<'m> {
    pub fn new(
        model: &'m dyn LanguageModel,
        attributes: Vec<AttributeDescription>,
        config: DecodingConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Debiaser {
            model,
            attributes,
            config,
            sdb_template: TemplateSpec::sdb_default(),
            keyword_inputs: false,
        })
    }

    /// Overrides the debiasing input template.
    pub fn with_sdb_template(mut self, template: TemplateSpec) -> Self {
        self.sdb_template = template;
        self
    }

    /// Uses the parenthesized-keyword debiasing inputs instead of the
    /// description template. Every attribute must carry a keyword.
    pub fn with_keyword_inputs(mut self) -> Result<Self> {
        for y in &self.attributes {
            if y.keyword.as_deref().map_or(true, str::is_empty) {
                return Err(Error::config(format!(
                    "attribute {:?} has no keyword for keyword-style debiasing",
                    y.name
                )));
            }
        }
        self.keyword_inputs = true;
        Ok(self)
    }

    pub fn config(&self) -> &DecodingConfig {
        &self.config
    }

    pub fn attributes(&self) -> &[AttributeDescription] {
        &self.attributes
    }

    fn sdb_text(&self, x_text: &str, y: &AttributeDescription) -> Result<String> {
        if self.keyword_inputs {
            render_sdb_keyword(x_text, y)
        } else {
            Ok(self.sdb_template.render(x_text, y))
        }
    }

    fn contexts_for(&self, x: &TokenSequence) -> Result<StepContexts> {
        let x_text = x.text();
        let mut sdb = Vec::with_capacity(self.attributes.len());
        for y in &self.attributes {
            let ctx = TokenSequence::from_text(&self.sdb_text(&x_text, y)?);
            let prefix_len = ctx.len().saturating_sub(x.len());
            sdb.push((prefix_len, ctx));
        }
        Ok(StepContexts { x: x.clone(), sdb })
    }

    /// Scores one step. With a declared context limit, the plain context is
    /// truncated from the left; debiasing contexts keep their prefix intact
    /// and truncate only the continuation part.
    fn step(&self, contexts: &StepContexts) -> Result<DebiasStepTrace> {
        let original = self.score_truncated(&contexts.x, 0)?;
        if contexts.sdb.is_empty() {
            let len = original.len();
            return Ok(DebiasStepTrace {
                per_attribute_sdb: Vec::new(),
                delta_min: vec![0.0; len],
                scale: vec![1.0; len],
                debiased: original.clone(),
                original,
            });
        }
        let mut per_attribute_sdb = Vec::with_capacity(contexts.sdb.len());
        for (prefix_len, ctx) in &contexts.sdb {
            per_attribute_sdb.push(self.score_truncated(ctx, *prefix_len)?);
        }
        let mut delta_min = delta(&original, &per_attribute_sdb[0])?;
        for sdb_dist in &per_attribute_sdb[1..] {
            for (dm, d) in delta_min.iter_mut().zip(delta(&original, sdb_dist)?) {
                *dm = dm.min(d);
            }
        }
        let scale: Vec<f64> = delta_min
            .iter()
            .map(|&d| {
                let a = alpha(d, self.config.lambda, self.config.mode);
                if self.config.apply_floor_in_generation {
                    a.max(self.config.floor_epsilon)
                } else {
                    a
                }
            })
            .collect();
        let weights: Vec<f64> = scale
            .iter()
            .zip(original.probs())
            .map(|(&s, &p)| s * p)
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::DegenerateModel(
                "every token was suppressed to zero mass; enable the floor or lower lambda".into(),
            ));
        }
        let debiased = NextTokenDistribution::from_weights(weights)?;
        Ok(DebiasStepTrace {
            original,
            per_attribute_sdb,
            delta_min,
            scale,
            debiased,
        })
    }

    fn score_truncated(
        &self,
        context: &TokenSequence,
        keep_prefix: usize,
    ) -> Result<NextTokenDistribution> {
        match self.model.context_limit() {
            Some(limit) if context.len() > limit => {
                let tokens = context.tokens();
                let keep_prefix = keep_prefix.min(tokens.len()).min(limit);
                let budget = limit - keep_prefix;
                let tail_start = tokens.len().saturating_sub(budget).max(keep_prefix);
                let truncated: TokenSequence = tokens[..keep_prefix]
                    .iter()
                    .chain(&tokens[tail_start..])
                    .cloned()
                    .collect();
                self.model.next_token_distribution(&truncated)
            }
            _ => self.model.next_token_distribution(context),
        }
    }

    /// The debiased next-token distribution for context `x`, with the full
    /// step trace. Requires at least one attribute.
    pub fn distribution(&self, x: &TokenSequence) -> Result<DebiasStepTrace> {
        if self.attributes.is_empty() {
            return Err(Error::input(
                "debiased distribution needs at least one attribute",
            ));
        }
        let contexts = self.contexts_for(x)?;
        self.step(&contexts)
    }

    /// Generates a continuation for `prompt` under the configured strategy.
    /// With an empty attribute set this is plain decoding.
    pub fn generate(&self, prompt: &str) -> Result<GenerationResult> {
        self.generate_with(prompt, false)
    }

    /// Like [`Debiaser::generate`], optionally recording one step trace per
    /// emitted token (for the winning hypothesis under beam search).
    pub fn generate_with(&self, prompt: &str, record_traces: bool) -> Result<GenerationResult> {
        let x = TokenSequence::from_text(prompt);
        match self.config.strategy {
            Strategy::Greedy => self.run_sequential(prompt, &x, record_traces, None),
            Strategy::Sample { seed, temperature } => {
                self.run_sequential(prompt, &x, record_traces, Some((seed, temperature)))
            }
            Strategy::Beam { width } => self.run_beam(prompt, &x, width, record_traces),
        }
    }

    fn run_sequential(
        &self,
        prompt: &str,
        x: &TokenSequence,
        record_traces: bool,
        sampling: Option<(u64, f64)>,
    ) -> Result<GenerationResult> {
        let vocab = self.model.vocabulary();
        let mut contexts = self.contexts_for(x)?;
        let mut rng = sampling.map(|(seed, _)| ChaCha8Rng::seed_from_u64(seed));
        let mut continuation = Vec::new();
        let mut traces = Vec::new();
        let mut total_logprob = 0.0;
        for _ in 0..self.config.max_new_tokens {
            let trace = self.step(&contexts)?;
            let index = match sampling {
                None => trace.debiased.argmax(),
                Some((_, temperature)) => {
                    sample_index(&trace.debiased, temperature, rng.as_mut().unwrap())
                }
            };
            let prob = trace.debiased.get(index);
            if prob <= 0.0 {
                return Err(Error::DegenerateModel(
                    "selected token has zero probability".into(),
                ));
            }
            total_logprob += prob.ln();
            let token = vocab.token(index).to_string();
            contexts.push(&token);
            continuation.push(token);
            if record_traces {
                traces.push(trace);
            }
            if vocab.end_token() == Some(index) {
                break;
            }
        }
        Ok(GenerationResult {
            prompt: prompt.to_string(),
            continuation,
            per_step_traces: record_traces.then_some(traces),
            total_logprob,
        })
    }

    fn run_beam(
        &self,
        prompt: &str,
        x: &TokenSequence,
        width: usize,
        record_traces: bool,
    ) -> Result<GenerationResult> {
        struct Hypothesis {
            contexts: StepContexts,
            tokens: Vec<String>,
            logprob: f64,
            traces: Vec<DebiasStepTrace>,
            finished: bool,
        }

        let vocab = self.model.vocabulary();
        let mut beams = vec![Hypothesis {
            contexts: self.contexts_for(x)?,
            tokens: Vec::new(),
            logprob: 0.0,
            traces: Vec::new(),
            finished: false,
        }];

        for _ in 0..self.config.max_new_tokens {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            // (source hypothesis, token index or carried-as-finished, score)
            let mut candidates: Vec<(usize, Option<usize>, f64)> = Vec::new();
            let mut step_traces: Vec<Option<DebiasStepTrace>> = Vec::with_capacity(beams.len());
            for (source, beam) in beams.iter().enumerate() {
                if beam.finished {
                    candidates.push((source, None, beam.logprob));
                    step_traces.push(None);
                    continue;
                }
                let trace = self.step(&beam.contexts)?;
                for (token, &p) in trace.debiased.probs().iter().enumerate() {
                    if p > 0.0 {
                        candidates.push((source, Some(token), beam.logprob + p.ln()));
                    }
                }
                step_traces.push(Some(trace));
            }
            // Score-descending; ties resolved by source then token index so
            // pruning is deterministic.
            candidates.sort_by(|a, b| {
                b.2.total_cmp(&a.2)
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            candidates.truncate(width);

            let mut next = Vec::with_capacity(candidates.len());
            for (source, token, score) in candidates {
                let beam = &beams[source];
                match token {
                    None => next.push(Hypothesis {
                        contexts: beam.contexts.clone(),
                        tokens: beam.tokens.clone(),
                        logprob: score,
                        traces: beam.traces.clone(),
                        finished: true,
                    }),
                    Some(index) => {
                        let token = vocab.token(index).to_string();
                        let mut contexts = beam.contexts.clone();
                        contexts.push(&token);
                        let mut tokens = beam.tokens.clone();
                        tokens.push(token);
                        let mut traces = beam.traces.clone();
                        if record_traces {
                            traces.push(step_traces[source].clone().expect("scored this step"));
                        }
                        next.push(Hypothesis {
                            contexts,
                            tokens,
                            logprob: score,
                            traces,
                            finished: vocab.end_token() == Some(index),
                        });
                    }
                }
            }
            beams = next;
        }

        // Hypotheses are ranked by cumulative log probability with no length
        // normalization; ties keep the earliest hypothesis in beam order.
        let mut best_index = 0;
        for i in 1..beams.len() {
            if beams[i].logprob > beams[best_index].logprob {
                best_index = i;
            }
        }
        let best = beams.swap_remove(best_index);
        Ok(GenerationResult {
            prompt: prompt.to_string(),
            continuation: best.tokens,
            per_step_traces: record_traces.then_some(best.traces),
            total_logprob: best.logprob,
        })
    }

    /// Windowed perplexity of `corpus` under the debiased (floored)
    /// distributions: the corpus is split into consecutive non-overlapping
    /// windows of at most `window` tokens, and within each window every token
    /// after the first is scored given the in-window prefix.
    ///
    /// With an empty attribute set (or lambda 0) this is ordinary model
    /// perplexity.
    pub fn perplexity(&self, corpus: &TokenSequence, window: usize) -> Result<f64> {
        if corpus.len() < 2 {
            return Err(Error::input(format!(
                "perplexity needs at least 2 corpus tokens, got {}",
                corpus.len()
            )));
        }
        if window < 2 {
            return Err(Error::input(format!(
                "window must be at least 2, got {window}"
            )));
        }
        let vocab = self.model.vocabulary();
        let mut log_sum = 0.0;
        let mut scored = 0usize;
        for (chunk_index, chunk) in corpus.tokens().chunks(window).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let window_start = chunk_index * window;
            let mut contexts = self.contexts_for(&TokenSequence::new([chunk[0].clone()]))?;
            for (offset, token) in chunk.iter().enumerate().skip(1) {
                let trace = self.step(&contexts)?;
                let position = vocab.require_position(token)?;
                let p = trace.debiased.get(position);
                if p <= 0.0 {
                    return Err(Error::InfinitePerplexity {
                        position: window_start + offset,
                    });
                }
                log_sum += p.ln();
                scored += 1;
                contexts.push(token);
            }
        }
        Ok((-log_sum / scored as f64).exp())
    }
}

fn sample_index(dist: &NextTokenDistribution, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let weights: Vec<f64> = dist
        .probs()
        .iter()
        .map(|&p| if p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 && w > 0.0 {
            return i;
        }
    }
    // Numeric slack: fall back to the last positive-weight token.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(dist.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TableModel, Vocabulary};

    fn dist(probs: &[f64]) -> NextTokenDistribution {
        NextTokenDistribution::new(probs.to_vec()).unwrap()
    }

    /// Minimal debiasing template whose rendering stays inside a tiny
    /// vocabulary: the description token followed by the text.
    fn tiny_sdb() -> TemplateSpec {
        TemplateSpec::new("{attribute} {text}").unwrap()
    }

    fn attr(token: &str) -> AttributeDescription {
        AttributeDescription::new(token, token).unwrap()
    }

    #[test]
    fn delta_hand_examples() {
        let d = delta(&dist(&[0.6, 0.4]), &dist(&[0.8, 0.2])).unwrap();
        assert!((d[0] + 0.2).abs() < 1e-15 && (d[1] - 0.2).abs() < 1e-15);
        assert!(d.iter().all(|&x| (-1.0..=1.0).contains(&x)));

        let p = dist(&[0.3, 0.7]);
        assert_eq!(delta(&p, &p).unwrap(), vec![0.0, 0.0]);

        let d = delta(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert_eq!(d, vec![1.0, -1.0]);
    }

    #[test]
    fn delta_length_mismatch_is_an_input_error() {
        let err = delta(&dist(&[0.5, 0.5]), &dist(&[0.4, 0.3, 0.3])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn alpha_branches() {
        assert_eq!(alpha(0.3, 123.0, ScaleMode::Soft), 1.0);
        assert_eq!(alpha(0.0, 50.0, ScaleMode::Soft), 1.0);
        assert_eq!(alpha(0.0, 50.0, ScaleMode::Hard), 1.0);
        assert_eq!(alpha(-0.3, 10.0, ScaleMode::Hard), 0.0);
        let a = alpha(-0.05, 10.0, ScaleMode::Soft);
        assert_eq!(a, (-0.5f64).exp());
        assert!((a - 0.606530).abs() < 1e-6);
    }

    /// Model over {a, b} with a designated plain-context row and a debiasing
    /// row keyed on the description token "d".
    fn two_token_model(p_x: [f64; 2], p_sdb: [f64; 2]) -> TableModel {
        let vocab = Vocabulary::new(["a", "b", "d", "x"]).unwrap();
        let pad = |p: [f64; 2]| [p[0], p[1], 0.0, 0.0];
        TableModel::builder(vocab)
            .default_row([0.25, 0.25, 0.25, 0.25])
            .row(["x"], pad(p_x))
            .row(["d", "x"], pad(p_sdb))
            .build()
            .unwrap()
    }

    #[test]
    fn worked_two_token_rescaling() {
        let model = two_token_model([0.6, 0.4], [0.8, 0.2]);
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d")],
            DecodingConfig {
                lambda: 10.0,
                strategy: Strategy::Greedy,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let trace = debiaser.distribution(&TokenSequence::new(["x"])).unwrap();

        assert!((trace.delta_min[0] + 0.2).abs() < 1e-15);
        assert!((trace.delta_min[1] - 0.2).abs() < 1e-15);
        assert!((trace.scale[0] - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(trace.scale[1], 1.0);

        // Independent arithmetic for the expected rescaled distribution.
        let expected_a = 0.6 * (-2.0f64).exp() / (0.6 * (-2.0f64).exp() + 0.4);
        assert!((trace.debiased.get(0) - expected_a).abs() < 1e-15);
        assert!((trace.debiased.get(0) - 0.168746825681576).abs() < 1e-12);
        assert!((trace.debiased.get(1) - 0.831253174318424).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_identity() {
        let model = two_token_model([0.6, 0.4], [0.8, 0.2]);
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d")],
            DecodingConfig {
                lambda: 0.0,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let trace = debiaser.distribution(&TokenSequence::new(["x"])).unwrap();
        for (got, want) in trace.debiased.probs().iter().zip(trace.original.probs()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_penalty_cancels_under_normalization() {
        let vocab = Vocabulary::new(["a", "b", "d", "e", "x"]).unwrap();
        let pad = |p: [f64; 2]| [p[0], p[1], 0.0, 0.0, 0.0];
        let model = TableModel::builder(vocab)
            .default_row([0.2, 0.2, 0.2, 0.2, 0.2])
            .row(["x"], pad([0.6, 0.4]))
            .row(["d", "x"], pad([0.7, 0.3]))
            .row(["e", "x"], pad([0.5, 0.5]))
            .build()
            .unwrap();
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d"), attr("e")],
            DecodingConfig {
                lambda: 10.0,
                strategy: Strategy::Greedy,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let trace = debiaser.distribution(&TokenSequence::new(["x"])).unwrap();
        assert!((trace.delta_min[0] + 0.1).abs() < 1e-15);
        assert!((trace.delta_min[1] + 0.1).abs() < 1e-15);
        assert_eq!(trace.debiased.get(0), 0.6);
        assert_eq!(trace.debiased.get(1), 0.4);
    }

    #[test]
    fn empty_attribute_set_is_an_input_error_for_distribution() {
        let model = two_token_model([0.6, 0.4], [0.8, 0.2]);
        let debiaser = Debiaser::new(&model, vec![], DecodingConfig::default()).unwrap();
        let err = debiaser.distribution(&TokenSequence::new(["x"])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn hard_mode_without_floor_can_reject_everything() {
        // Both tokens are favored by some debiasing input, so hard scaling
        // with the floor disabled zeroes the whole vocabulary.
        let vocab = Vocabulary::new(["a", "b", "d", "e", "x"]).unwrap();
        let pad = |p: [f64; 2]| [p[0], p[1], 0.0, 0.0, 0.0];
        let model = TableModel::builder(vocab)
            .default_row([0.2, 0.2, 0.2, 0.2, 0.2])
            .row(["x"], pad([0.5, 0.5]))
            .row(["d", "x"], pad([0.9, 0.1]))
            .row(["e", "x"], pad([0.1, 0.9]))
            .build()
            .unwrap();
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d"), attr("e")],
            DecodingConfig {
                mode: ScaleMode::Hard,
                apply_floor_in_generation: false,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let err = debiaser.distribution(&TokenSequence::new(["x"])).unwrap_err();
        assert!(matches!(err, Error::DegenerateModel(_)));
    }

    /// The bar-scene model: plain context prefers "fight", the debiasing
    /// context prefers it far more.
    fn bar_model() -> TableModel {
        let vocab =
            Vocabulary::new(["fight", "chat", "two", "guys", "start", "a", "d"]).unwrap();
        let row = |fight: f64, chat: f64| {
            let mut probs = vec![0.0; 7];
            probs[0] = fight;
            probs[1] = chat;
            probs
        };
        TableModel::builder(vocab)
            .default_row(row(0.5, 0.5))
            .row(["a"], row(0.7, 0.3))
            .row(["d", "two", "guys", "start", "a"], row(0.95, 0.05))
            .build()
            .unwrap()
    }

    fn bar_debiaser(model: &TableModel, lambda: f64, strategy: Strategy) -> Debiaser<'_> {
        Debiaser::new(
            model,
            vec![attr("d")],
            DecodingConfig {
                lambda,
                strategy,
                max_new_tokens: 1,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb())
    }

    #[test]
    fn debiased_greedy_flips_the_continuation() {
        let model = bar_model();
        let debiased = bar_debiaser(&model, 10.0, Strategy::Greedy);
        let result = debiased.generate("two guys start a").unwrap();
        assert_eq!(result.continuation, ["chat"]);

        let plain = bar_debiaser(&model, 0.0, Strategy::Greedy);
        let result = plain.generate("two guys start a").unwrap();
        assert_eq!(result.continuation, ["fight"]);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let model = bar_model();
        for lambda in [0.0, 10.0, 50.0] {
            let greedy = bar_debiaser(&model, lambda, Strategy::Greedy)
                .generate("two guys start a")
                .unwrap();
            let beam = bar_debiaser(&model, lambda, Strategy::Beam { width: 1 })
                .generate("two guys start a")
                .unwrap();
            assert_eq!(greedy.continuation, beam.continuation);
            assert!((greedy.total_logprob - beam.total_logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_respects_token_budget_and_counts_logprob() {
        let model = bar_model();
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d")],
            DecodingConfig {
                lambda: 10.0,
                strategy: Strategy::Greedy,
                max_new_tokens: 5,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let result = debiaser.generate_with("two guys start a", true).unwrap();
        assert_eq!(result.continuation.len(), 5);
        let traces = result.per_step_traces.as_ref().unwrap();
        assert_eq!(traces.len(), 5);
        let vocab = model.vocabulary();
        let recomputed: f64 = result
            .continuation
            .iter()
            .zip(traces)
            .map(|(tok, tr)| tr.debiased.get(vocab.position(tok).unwrap()).ln())
            .sum();
        assert!((result.total_logprob - recomputed).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let model = bar_model();
        let make = |seed| {
            Debiaser::new(
                &model,
                vec![attr("d")],
                DecodingConfig {
                    lambda: 10.0,
                    strategy: Strategy::Sample {
                        seed,
                        temperature: 1.0,
                    },
                    max_new_tokens: 8,
                    ..DecodingConfig::default()
                },
            )
            .unwrap()
            .with_sdb_template(tiny_sdb())
        };
        let a = make(7).generate("two guys start a").unwrap();
        let b = make(7).generate("two guys start a").unwrap();
        assert_eq!(a.continuation, b.continuation);
        let c = make(8).generate("two guys start a").unwrap();
        let d = make(9).generate("two guys start a").unwrap();
        // Different seeds need not differ, but across several seeds the walk
        // should not be constant for this mixed distribution.
        assert!(a.continuation != c.continuation || a.continuation != d.continuation);
    }

    #[test]
    fn declared_end_token_stops_generation() {
        let vocab = Vocabulary::new(["go", "stop", "d"])
            .unwrap()
            .with_end_token("stop")
            .unwrap();
        let model = TableModel::builder(vocab)
            .default_row([0.6, 0.4, 0.0])
            .row(["go"], [0.1, 0.9, 0.0])
            .build()
            .unwrap();
        let debiaser = Debiaser::new(
            &model,
            vec![],
            DecodingConfig {
                strategy: Strategy::Greedy,
                max_new_tokens: 10,
                ..DecodingConfig::default()
            },
        )
        .unwrap();
        let result = debiaser.generate("").unwrap();
        assert_eq!(result.continuation, ["go", "stop"]);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let vocab = Vocabulary::new(["a", "b", "c", "d"]).unwrap();
        let model = TableModel::builder(vocab)
            .default_row([0.25; 4])
            .build()
            .unwrap();
        // Debiasing against contexts that produce the same rows changes
        // nothing, for any lambda.
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d")],
            DecodingConfig {
                lambda: 100.0,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let corpus = TokenSequence::from_text("a b c d a b c d a");
        let ppl = debiaser.perplexity(&corpus, 4).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_half_model_perplexity_is_two() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let model = TableModel::builder(vocab)
            .default_row([0.5, 0.5])
            .build()
            .unwrap();
        let debiaser = Debiaser::new(&model, vec![], DecodingConfig::default()).unwrap();
        let corpus = TokenSequence::from_text("a b b a a");
        let ppl = debiaser.perplexity(&corpus, 992).unwrap();
        assert!((ppl - 2.0).abs() < 1e-12);
    }

    #[test]
    fn three_token_windowed_perplexity_hand_case() {
        // Window covers the whole corpus; the first scored token has a
        // negative difference and gets floored-soft rescaling, the second
        // sees equal rows.
        let vocab = Vocabulary::new(["a", "b", "d"]).unwrap();
        let model = TableModel::builder(vocab)
            .default_row([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
            .row(["a"], [0.3, 0.6, 0.1])
            .row(["d", "a"], [0.1, 0.8, 0.1])
            .row(["b"], [0.5, 0.4, 0.1])
            .build()
            .unwrap();
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d")],
            DecodingConfig {
                lambda: 10.0,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        let corpus = TokenSequence::from_text("a b a");
        let ppl = debiaser.perplexity(&corpus, 10).unwrap();

        // By hand: p(b | a) rescales to 0.6 e^{-2} / (0.3 + 0.6 e^{-2} + 0.1),
        // p(a | a b) comes from the shared row, so stays 0.5.
        let p1 = 0.6 * (-2.0f64).exp() / (0.3 + 0.6 * (-2.0f64).exp() + 0.1);
        let p2 = 0.5f64;
        let expected = (-(p1.ln() + p2.ln()) / 2.0).exp();
        assert!((ppl - expected).abs() < 1e-12, "{ppl} vs {expected}");
    }

    #[test]
    fn perplexity_windows_are_non_overlapping() {
        // Corpus of 5 with window 3 scores positions 1,2 in the first window
        // and position 4 in the second: 3 scored tokens.
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let model = TableModel::builder(vocab)
            .default_row([0.5, 0.5])
            .row(["a"], [0.9, 0.1])
            .build()
            .unwrap();
        let debiaser = Debiaser::new(&model, vec![], DecodingConfig::default()).unwrap();
        let corpus = TokenSequence::from_text("a a a a a");
        let ppl = debiaser.perplexity(&corpus, 3).unwrap();
        // First window: p(a|a) = 0.9, p(a|a a) = 0.9 (suffix row).
        // Second window: p(a|a) = 0.9.
        let expected = (-(0.9f64.ln() * 3.0) / 3.0).exp();
        assert!((ppl - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_token_reports_its_position() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let model = TableModel::builder(vocab)
            .default_row([1.0, 0.0])
            .build()
            .unwrap();
        let debiaser = Debiaser::new(&model, vec![], DecodingConfig::default()).unwrap();
        let corpus = TokenSequence::from_text("a a b a");
        let err = debiaser.perplexity(&corpus, 992).unwrap_err();
        assert!(matches!(err, Error::InfinitePerplexity { position: 2 }));
    }

    #[test]
    fn perplexity_preconditions() {
        let vocab = Vocabulary::new(["a", "b"]).unwrap();
        let model = TableModel::builder(vocab)
            .default_row([0.5, 0.5])
            .build()
            .unwrap();
        let debiaser = Debiaser::new(&model, vec![], DecodingConfig::default()).unwrap();
        assert!(debiaser
            .perplexity(&TokenSequence::from_text("a"), 4)
            .is_err());
        assert!(debiaser
            .perplexity(&TokenSequence::from_text("a b"), 1)
            .is_err());
    }

    #[test]
    fn config_validation() {
        let bad = DecodingConfig {
            lambda: -1.0,
            ..DecodingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodingConfig {
            strategy: Strategy::Beam { width: 0 },
            ..DecodingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodingConfig {
            strategy: Strategy::Sample {
                seed: 0,
                temperature: 0.0,
            },
            ..DecodingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodingConfig {
            max_new_tokens: 0,
            ..DecodingConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(DecodingConfig::default().validate().is_ok());
    }

    #[test]
    fn keyword_inputs_require_keywords() {
        let model = bar_model();
        let no_kw = Debiaser::new(&model, vec![attr("d")], DecodingConfig::default())
            .unwrap()
            .with_keyword_inputs();
        assert!(matches!(no_kw.err(), Some(Error::Config(_))));
    }

    #[test]
    fn context_limit_truncates_continuation_not_prefix() {
        // Vocabulary tokens double as context markers; the model returns the
        // default row unless the *first* context token is the prefix "d",
        // which only survives truncation if the prefix is preserved.
        struct PrefixSensitive {
            vocab: Vocabulary,
        }
        impl LanguageModel for PrefixSensitive {
            fn vocabulary(&self) -> &Vocabulary {
                &self.vocab
            }
            fn next_token_distribution(
                &self,
                context: &TokenSequence,
            ) -> Result<NextTokenDistribution> {
                let first_is_prefix = context.tokens().first().map(String::as_str) == Some("d");
                let probs = if first_is_prefix {
                    vec![0.9, 0.1, 0.0]
                } else {
                    vec![0.2, 0.8, 0.0]
                };
                NextTokenDistribution::new(probs)
            }
            fn context_limit(&self) -> Option<usize> {
                Some(3)
            }
        }
        let model = PrefixSensitive {
            vocab: Vocabulary::new(["a", "b", "d"]).unwrap(),
        };
        let debiaser = Debiaser::new(
            &model,
            vec![attr("d")],
            DecodingConfig {
                lambda: 10.0,
                ..DecodingConfig::default()
            },
        )
        .unwrap()
        .with_sdb_template(tiny_sdb());
        // Plain context has 4 tokens; the debiasing context has 5 and must
        // keep "d" in front after truncation to 3.
        let trace = debiaser
            .distribution(&TokenSequence::from_text("a b a b"))
            .unwrap();
        assert_eq!(trace.per_attribute_sdb[0].probs(), [0.9, 0.1, 0.0]);
        assert_eq!(trace.original.probs(), [0.2, 0.8, 0.0]);
    }
}
