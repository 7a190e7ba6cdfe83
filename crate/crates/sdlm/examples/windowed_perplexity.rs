//! The quality cost of suppression: windowed perplexity rises with the decay
//! constant when the evaluation text legitimately contains tokens the
//! encouraging context also favors.
//!
//! Run with: cargo run --example windowed_perplexity

use sdlm::{
    AttributeDescription, Debiaser, DecodingConfig, TableModel, TemplateSpec, TokenSequence,
    Vocabulary,
};

fn main() -> sdlm::Result<()> {
    // After "a" the model gives "b" probability 0.6, while the encouraging
    // context pushes it to 0.8: "b" plays an attribute-leaning word that the
    // corpus nevertheless uses. Rows keyed on longer shared suffixes see no
    // difference, so only window-initial positions are suppressed.
    let vocab = Vocabulary::new(["a", "b", "d"])?;
    let model = TableModel::builder(vocab)
        .default_row([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
        .row(["a"], [0.3, 0.6, 0.1])
        .row(["d", "a"], [0.1, 0.8, 0.1])
        .row(["b"], [0.55, 0.35, 0.1])
        .row(["d", "b"], [0.3, 0.6, 0.1])
        .build()?;

    let attribute = AttributeDescription::new("gruffness", "d")?;
    let template = TemplateSpec::new("{attribute} {text}")?;
    let corpus = TokenSequence::from_text(&"a b ".repeat(600));

    println!(
        "corpus of {} tokens, window 3 (each window scores two tokens):",
        corpus.len()
    );
    for lambda in [0.0, 1.0, 10.0, 50.0, 100.0] {
        let debiaser = Debiaser::new(
            &model,
            vec![attribute.clone()],
            DecodingConfig {
                lambda,
                ..DecodingConfig::default()
            },
        )?
        .with_sdb_template(template.clone());
        let ppl = debiaser.perplexity(&corpus, 3)?;
        println!("  lambda = {lambda:>5}: perplexity {ppl:.4}");
    }

    // Reference point: no attributes, ordinary model perplexity. The floor
    // guarantees the debiased runs above stay finite.
    let plain = Debiaser::new(&model, vec![], DecodingConfig::default())?;
    println!("  plain model:     perplexity {:.4}", plain.perplexity(&corpus, 3)?);
    Ok(())
}
