//! Train an add-k smoothed n-gram model, persist it, and inspect its
//! next-token distributions.
//!
//! Run with: cargo run --example train_ngram

use sdlm::{LanguageModel, NGramModel, TokenSequence};

fn main() -> sdlm::Result<()> {
    let corpus = TokenSequence::from_text(
        "the cat sat on the mat the dog sat on the rug the cat ran to the dog",
    );
    let model = NGramModel::train(&corpus, 2, 0.5)?;
    println!(
        "trained order-{} model, k = {}, vocabulary of {} tokens",
        model.order(),
        model.smoothing_k(),
        model.vocabulary().len()
    );

    for context in ["the", "sat", "unseen-elsewhere"] {
        let ctx = TokenSequence::from_text(context);
        match model.next_token_distribution(&ctx) {
            Ok(dist) => {
                let mut ranked: Vec<(&str, f64)> = model
                    .vocabulary()
                    .tokens()
                    .iter()
                    .map(|t| t.as_str())
                    .zip(dist.probs().iter().copied())
                    .collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
                let top: Vec<String> = ranked
                    .iter()
                    .take(3)
                    .map(|(t, p)| format!("{t} {p:.3}"))
                    .collect();
                println!("P(. | {context:?}): {}", top.join(", "));
            }
            Err(e) => println!("P(. | {context:?}): {e}"),
        }
    }

    // Round-trip through the sparse-counts file format.
    let dir = std::env::temp_dir();
    let path = dir.join("sdlm_example_ngram.json");
    model.save(&path)?;
    let loaded = NGramModel::load(&path)?;
    let ctx = TokenSequence::from_text("the");
    assert_eq!(
        model.next_token_distribution(&ctx)?.probs(),
        loaded.next_token_distribution(&ctx)?.probs()
    );
    println!("saved and reloaded identically from {}", path.display());
    std::fs::remove_file(&path).ok();
    Ok(())
}
