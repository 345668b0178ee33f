//! Line-protocol peer for backend tests.
//!
//! Modes: `echo`, `gold <dataset.jsonl>`, `die-after <n> <dataset.jsonl>`,
//! `garbage`, `silent`.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use groundst::backend::{request_id, PredictRequest, PredictResponse};
use groundst::promptgen::read_dataset;

fn gold_map(path: &str) -> HashMap<String, String> {
    read_dataset(path)
        .expect("readable dataset")
        .into_iter()
        .map(|e| (request_id(&e), e.target))
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("echo");
    let (gold, limit) = match mode {
        "gold" => (gold_map(&args[1]), usize::MAX),
        "die-after" => (gold_map(&args[2]), args[1].parse().expect("count")),
        _ => (HashMap::new(), usize::MAX),
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for (served, line) in stdin.lock().lines().enumerate() {
        let Ok(line) = line else { break };
        if served >= limit {
            std::process::exit(0);
        }
        let Ok(req) = serde_json::from_str::<PredictRequest>(&line) else {
            continue;
        };
        let reply = match mode {
            "garbage" => "not json".to_string(),
            "silent" => continue,
            "echo" => serde_json::to_string(&PredictResponse {
                output_text: req.input_text.clone(),
                example_id: req.example_id,
            })
            .unwrap(),
            _ => serde_json::to_string(&PredictResponse {
                output_text: gold.get(&req.example_id).cloned().unwrap_or_default(),
                example_id: req.example_id,
            })
            .unwrap(),
        };
        writeln!(out, "{reply}").unwrap();
        out.flush().unwrap();
    }
}
