//! Full evaluation loop at desk scale: generate continuations for a prompt
//! set under several decay constants, score them for an attribute, and print
//! the report table. The empirical attribute probability drops as the decay
//! constant grows.
//!
//! Run with: cargo run --example attribute_eval

use sdlm::eval::{EvalOptions, LexiconScorer};
use sdlm::{
    render_report_table, run_generation_eval, AttributeDescription, DecodingConfig, PromptRecord,
    Strategy, TableModel, TemplateSpec, Vocabulary,
};

fn main() -> sdlm::Result<()> {
    // Prompts are single trigger tokens. Each trigger row sets how much the
    // model wants the flagged token; the matching encouraging-context row
    // sets how much *more* the debiasing input wants it, which controls the
    // decay constant at which that prompt flips to the clean continuation.
    let settings: [(f64, f64); 6] = [
        (0.6, 0.9),      // flips below lambda 10
        (0.6, 0.7),      // flips below lambda 10
        (0.6, 0.63),     // flips between 10 and 50
        (0.6, 0.605),    // flips between 50 and 100
        (0.995, 0.999),  // the floor keeps this one flagged at any lambda
        (0.2, 0.5),      // clean from the start
    ];
    let triggers: Vec<String> = (0..settings.len()).map(|i| format!("p{i}")).collect();
    let mut tokens = vec!["bad".to_string(), "good".to_string(), "tox".to_string()];
    tokens.extend(triggers.iter().cloned());
    let vocab = Vocabulary::new(tokens)?;
    let width = vocab.len();
    let row = |bad: f64, good: f64| {
        let mut probs = vec![0.0; width];
        probs[0] = bad;
        probs[1] = good;
        probs
    };
    let mut builder = TableModel::builder(vocab)
        .default_row(row(0.5, 0.5))
        .row(["bad"], row(0.9, 0.1))
        .row(["good"], row(0.1, 0.9));
    for (trigger, (base, encouraged)) in triggers.iter().zip(settings) {
        builder = builder
            .row([trigger.clone()], row(base, 1.0 - base))
            .row(["tox".to_string(), trigger.clone()], row(encouraged, 1.0 - encouraged));
    }
    let model = builder.build()?;

    let prompts: Vec<PromptRecord> = triggers
        .iter()
        .map(|t| PromptRecord {
            id: None,
            text: t.clone(),
            scores: Default::default(),
        })
        .collect();
    let attribute = AttributeDescription::new("toxicity", "tox")?;
    let scorer = LexiconScorer::new([("toxicity", ["bad"])])?;

    let configs: Vec<DecodingConfig> = [0.0, 10.0, 50.0, 100.0]
        .iter()
        .map(|&lambda| DecodingConfig {
            lambda,
            strategy: Strategy::Beam { width: 3 },
            max_new_tokens: 20,
            ..DecodingConfig::default()
        })
        .collect();
    let options = EvalOptions {
        sdb_template: Some(TemplateSpec::new("{attribute} {text}")?),
        jobs: 2,
        ..EvalOptions::default()
    };
    let reports = run_generation_eval(&model, &prompts, &[attribute], &configs, &scorer, &options)?;
    print!("{}", render_report_table(&reports));
    println!(
        "\nfull report JSON:\n{}",
        serde_json::to_string_pretty(&reports).expect("reports serialize")
    );
    Ok(())
}
