//! The two wire protocols end to end, against a throwaway in-process server:
//!
//! - model server: `GET /v1/vocab` -> `{"tokens": [...]}` and
//!   `POST /v1/next_token_logprobs` `{"context": [...]}` ->
//!   `{"vocab_size": N, "logprobs": [...]}`
//! - attribute scorer: `POST /v1/score` `{"text": ..., "attributes": [...]}`
//!   -> `{"scores": {attr: real}}`
//!
//! Point the same clients at a real model server to run everything at full
//! scale.
//!
//! Run with: cargo run --example remote_protocol

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use sdlm::eval::{AttributeScorer, RemoteScorer};
use sdlm::{LanguageModel, RemoteLm, TokenSequence};

/// One-file demo server; real deployments put a model behind these routes.
fn spawn_demo_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind demo server");
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream);
                loop {
                    let mut request_line = String::new();
                    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                        return;
                    }
                    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
                    let mut content_length = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).is_err() {
                            return;
                        }
                        let line = line.trim_end();
                        if line.is_empty() {
                            break;
                        }
                        if let Some((name, value)) = line.split_once(':') {
                            if name.eq_ignore_ascii_case("content-length") {
                                content_length = value.trim().parse().unwrap_or(0);
                            }
                        }
                    }
                    let mut body = vec![0u8; content_length];
                    if reader.read_exact(&mut body).is_err() {
                        return;
                    }
                    let request: serde_json::Value =
                        serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                    let reply = route(&path, &request).to_string();
                    let head = format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
                        reply.len()
                    );
                    let out = reader.get_mut();
                    if out.write_all(head.as_bytes()).is_err()
                        || out.write_all(reply.as_bytes()).is_err()
                    {
                        return;
                    }
                }
            });
        }
    });
    endpoint
}

fn route(path: &str, request: &serde_json::Value) -> serde_json::Value {
    match path {
        "/v1/vocab" => serde_json::json!({ "tokens": ["calm", "grr"] }),
        "/v1/next_token_logprobs" => {
            // The demo model leans toward "grr" after seeing it.
            let saw_grr = request["context"]
                .as_array()
                .is_some_and(|ctx| ctx.iter().any(|t| t == "grr"));
            let probs: [f64; 2] = if saw_grr { [0.3, 0.7] } else { [0.8, 0.2] };
            serde_json::json!({
                "vocab_size": 2,
                "logprobs": [probs[0].ln(), probs[1].ln()],
            })
        }
        "/v1/score" => {
            let text = request["text"].as_str().unwrap_or_default();
            let growls = text.split_whitespace().filter(|t| *t == "grr").count();
            let score = 1.0 - 0.5f64.powi(growls as i32);
            serde_json::json!({ "scores": { "gruffness": score } })
        }
        _ => serde_json::json!({ "error": "no such route" }),
    }
}

fn main() -> sdlm::Result<()> {
    let endpoint = spawn_demo_server();
    println!("demo server at {endpoint}\n");

    let model = RemoteLm::connect(&endpoint)?;
    println!("session vocabulary: {:?}", model.vocabulary().tokens());
    for context in [vec!["calm"], vec!["grr", "calm"]] {
        let dist = model.next_token_distribution(&TokenSequence::new(context.clone()))?;
        println!("P(. | {context:?}) = {:?}", dist.probs());
    }

    let scorer = RemoteScorer::new(&endpoint);
    for text in ["calm calm calm", "grr grr calm"] {
        let scores = scorer.score(text, &["gruffness".to_string()])?;
        println!("score({text:?}) = {:?}", scores);
    }
    Ok(())
}
