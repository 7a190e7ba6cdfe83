//! Suppress an undesired attribute during generation by contrasting the
//! model's distribution against an attribute-encouraging context.
//!
//! Run with: cargo run --example debiased_generation

use sdlm::{
    AttributeDescription, Debiaser, DecodingConfig, Strategy, TableModel, TokenSequence,
    Vocabulary,
};

fn main() -> sdlm::Result<()> {
    // Two continuations for "two guys in a bar start a ...": the plain model
    // slightly prefers the violent one, and the encouraging context ("The
    // following text contains violent language: ...") prefers it a lot more.
    // That gap is exactly what the decoder penalizes.
    let vocab = Vocabulary::new([
        "fight", "chat", "two", "guys", "in", "bar", "start", "a", "The", "following", "text",
        "contains", "violent", "language:",
    ])?;
    let width = vocab.len();
    let row = |fight: f64, chat: f64| {
        let mut probs = vec![0.0; width];
        probs[0] = fight;
        probs[1] = chat;
        probs
    };
    let model = TableModel::builder(vocab)
        .default_row(row(0.5, 0.5))
        .row(["a"], row(0.7, 0.3))
        .row(["language:", "two", "guys", "in", "a", "bar", "start", "a"], row(0.95, 0.05))
        .build()?;

    let attribute = AttributeDescription::new("violence", "violent language")?.with_keyword("violent");
    let prompt = "two guys in a bar start a";

    println!("prompt: {prompt:?}\n");
    for lambda in [0.0, 1.0, 10.0, 100.0] {
        let debiaser = Debiaser::new(
            &model,
            vec![attribute.clone()],
            DecodingConfig {
                lambda,
                strategy: Strategy::Greedy,
                max_new_tokens: 1,
                ..DecodingConfig::default()
            },
        )?;
        let result = debiaser.generate_with(prompt, true)?;
        let trace = &result.per_step_traces.as_ref().unwrap()[0];
        println!(
            "lambda = {lambda:>5}: emits {:?}   p(fight) {:.3} -> {:.3}",
            result.continuation_text(),
            trace.original.get(0),
            trace.debiased.get(0),
        );
    }

    // Beam search over several steps, matching the evaluation protocol shape
    // (beam size 3); here the chain just keeps extending with the default row.
    let debiaser = Debiaser::new(
        &model,
        vec![attribute.clone()],
        DecodingConfig {
            lambda: 10.0,
            strategy: Strategy::Beam { width: 3 },
            max_new_tokens: 4,
            ..DecodingConfig::default()
        },
    )?;
    let result = debiaser.generate(prompt)?;
    println!(
        "\nbeam(3), 4 tokens: {:?} (total logprob {:.3})",
        result.continuation_text(),
        result.total_logprob
    );

    // The keyword form of the encouraging input.
    let keyworded = sdlm::render_sdb_keyword(prompt, &attribute)?;
    println!("keyword-style debiasing input: {keyworded:?}");

    // The step trace is the unit the trace dump emits, one JSON line per step.
    let trace = debiaser.distribution(&TokenSequence::from_text(prompt))?;
    println!(
        "\none step as a trace line:\n{}",
        serde_json::to_string(&trace).expect("trace serializes")
    );
    Ok(())
}
