//! Ask a model whether texts exhibit an attribute, using nothing but its own
//! next-token probabilities for the answer words.
//!
//! Run with: cargo run --example self_diagnosis

use sdlm::{diagnose, AttributeDescription, TableModel, TemplateSpec, Vocabulary};

fn main() -> sdlm::Result<()> {
    let attribute = AttributeDescription::new("threat", "a threat")?;
    let template = TemplateSpec::sdg_default();

    // A toy model that has "seen enough" to answer the diagnosis question:
    // one row per fully rendered question, keyed on its exact token sequence.
    let texts = ["I will hurt you", "lovely weather today"];
    let answers = [(0.48, 0.02), (0.03, 0.57)]; // (p_yes, p_no) per text

    let mut tokens: Vec<String> = vec!["Yes".into(), "No".into(), "pad".into()];
    let mut renderings = Vec::new();
    for text in &texts {
        let rendered = template.render(text, &attribute);
        for token in rendered.split_whitespace() {
            if !tokens.iter().any(|t| t == token) {
                tokens.push(token.to_string());
            }
        }
        renderings.push(rendered);
    }
    let vocab = Vocabulary::new(tokens)?;
    let width = vocab.len();
    let answer_row = |p_yes: f64, p_no: f64| {
        let mut probs = vec![0.0; width];
        probs[0] = p_yes;
        probs[1] = p_no;
        probs[2] = 1.0 - p_yes - p_no;
        probs
    };
    let mut builder = TableModel::builder(vocab).default_row(answer_row(0.1, 0.1));
    for (rendered, &(p_yes, p_no)) in renderings.iter().zip(&answers) {
        let context: Vec<String> = rendered.split_whitespace().map(str::to_string).collect();
        builder = builder.row(context, answer_row(p_yes, p_no));
    }
    let model = builder.build()?;

    println!("diagnosis input for {:?}:\n---\n{}\n---\n", texts[0], renderings[0]);
    for text in &texts {
        let score = diagnose(&model, text, &attribute, &template)?;
        println!(
            "p({} | {:?}) = {:.4}   (p_yes = {:.3}, p_no = {:.3})",
            attribute.name, text, score.value, score.p_yes, score.p_no
        );
    }
    Ok(())
}
