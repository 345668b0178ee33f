mod common;

use std::time::Duration;

use rand::Rng;

use groundst::backend::{
    noisy_predict, open, request_id, BackendError, BackendOptions, HttpBackend, NoiseConfig, NoisyPredictor,
    OraclePredictor, PredictRequest, PredictResponse, Predictor, ProcessBackend, CORRUPTION_TOKEN,
};
use groundst::corpus::SchemaVariant;
use groundst::eval::{joint_goal_accuracy, ExactMatcher};
use groundst::promptgen::{build_dataset, parse_target, write_dataset, LinearizedExample, PromptFormat};
use groundst::seed;

const PEER: &str = env!("CARGO_BIN_EXE_groundst-stub-peer");

fn examples() -> Vec<LinearizedExample> {
    let corpus = common::test_split();
    let variant = SchemaVariant::new(0, corpus.services.clone()).unwrap();
    build_dataset(&corpus, &variant, PromptFormat::D3st, None, 21).unwrap()
}

fn gold_file(examples: &[LinearizedExample]) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gold.jsonl");
    write_dataset(&path, examples).unwrap();
    let s = path.to_str().unwrap().to_string();
    (dir, s)
}

#[test]
fn oracle_is_order_preserving() {
    let ex = examples();
    let out = OraclePredictor.predict(&ex).unwrap();
    assert_eq!(out.len(), ex.len());
    for (e, p) in ex.iter().zip(&out) {
        assert_eq!(p.example_id, request_id(e));
        assert_eq!(p.output_text, e.target);
    }
}

/// Independent re-simulation of the noise model.
fn resimulate(example: &LinearizedExample, noise: &NoiseConfig, s: u64) -> (usize, usize, bool) {
    let (gold, _) = parse_target(&example.target, &example.index_map);
    let mut rng = seed::rng(seed::derive(s, &request_id(example)));
    let (mut kept, mut corrupted) = (0, 0);
    for slot in example.index_map.slots.values() {
        if !gold.pairs.contains_key(slot) {
            continue;
        }
        let drop = rng.random::<f64>() < noise.slot_drop_p;
        let corrupt = rng.random::<f64>() < noise.value_corrupt_p;
        if !drop {
            kept += 1;
            corrupted += corrupt as usize;
        }
    }
    let flipped = gold.active_intent.is_some() && rng.random::<f64>() < noise.intent_flip_p;
    (kept, corrupted, flipped)
}

#[test]
fn noisy_matches_resimulation() {
    let ex = examples();
    let noise = NoiseConfig {
        slot_drop_p: 0.5,
        value_corrupt_p: 0.2,
        intent_flip_p: 0.3,
    };
    let mut any_correct = false;
    let mut any_wrong = false;
    for e in &ex {
        let out = noisy_predict(e, &noise, 77);
        let (state, flags) = parse_target(&out, &e.index_map);
        assert!(flags.is_clean());
        let (kept, corrupted, flipped) = resimulate(e, &noise, 77);
        assert_eq!(state.pairs.len(), kept, "{out}");
        assert_eq!(state.pairs.values().filter(|v| *v == CORRUPTION_TOKEN).count(), corrupted);
        let gold = e.gold_state();
        if !flipped {
            assert_eq!(state.active_intent, gold.active_intent);
        } else {
            assert_ne!(state.active_intent, gold.active_intent);
        }
        let correct = kept == gold.pairs.len() && corrupted == 0;
        any_correct |= correct;
        any_wrong |= !correct;
    }
    assert!(any_correct && any_wrong);
    let p = NoisyPredictor::new(noise, 77).unwrap();
    assert_eq!(p.predict(&ex).unwrap(), p.predict(&ex).unwrap());
}

#[test]
fn echo_peer_outputs_are_malformed() {
    let ex = examples();
    let backend = ProcessBackend::spawn(&format!("{PEER} echo"), 4, Duration::from_secs(10)).unwrap();
    let out = backend.predict(&ex).unwrap();
    assert_eq!(out.len(), ex.len());
    for (e, p) in ex.iter().zip(&out) {
        assert!(!p.failed);
        assert_eq!(p.output_text, e.input_text());
        assert!(parse_target(&p.output_text, &e.index_map).1.malformed);
    }
}

#[test]
fn gold_peer_equals_oracle() {
    let ex = examples();
    let (_dir, gold) = gold_file(&ex);
    let backend = ProcessBackend::spawn(&format!("{PEER} gold {gold}"), 5, Duration::from_secs(10)).unwrap();
    let out = backend.predict(&ex).unwrap();
    assert_eq!(out, OraclePredictor.predict(&ex).unwrap());
    let jga = joint_goal_accuracy(&ex, &out, &ExactMatcher);
    assert_eq!(jga.overall, 100.0);
}

#[test]
fn dying_peer_fails_the_rest() {
    let ex = examples();
    let (_dir, gold) = gold_file(&ex);
    let backend = ProcessBackend::spawn(&format!("{PEER} die-after 7 {gold}"), 4, Duration::from_secs(10)).unwrap();
    let out = backend.predict(&ex).unwrap();
    assert_eq!(out.len(), ex.len());
    assert!(out[..7].iter().all(|p| !p.failed));
    assert!(out[7..].iter().all(|p| p.failed && p.output_text.is_empty()));
    for (e, p) in ex.iter().zip(&out) {
        assert_eq!(p.example_id, request_id(e));
    }
}

#[test]
fn garbage_and_silence_are_flagged() {
    let ex = &examples()[..3];
    let garbage = ProcessBackend::spawn(&format!("{PEER} garbage"), 8, Duration::from_secs(10)).unwrap();
    assert!(garbage.predict(ex).unwrap().iter().all(|p| p.failed));
    let silent = ProcessBackend::spawn(&format!("{PEER} silent"), 8, Duration::from_millis(200)).unwrap();
    assert!(silent.predict(ex).unwrap().iter().all(|p| p.failed));
}

#[test]
fn unknown_command_is_an_error() {
    let err = ProcessBackend::spawn("/definitely/not/here", 1, Duration::from_secs(1)).err().unwrap();
    assert!(matches!(err, BackendError::Spawn { .. }));
}

/// Serves gold targets over HTTP, answering each batch in reverse order.
fn gold_server(examples: &[LinearizedExample], batches: usize) -> (String, std::thread::JoinHandle<usize>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let gold: std::collections::HashMap<String, String> =
        examples.iter().map(|e| (request_id(e), e.target.clone())).collect();
    let handle = std::thread::spawn(move || {
        let mut served = 0;
        for _ in 0..batches {
            let mut req = server.recv().unwrap();
            assert_eq!(req.url(), "/predict");
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let reqs: Vec<PredictRequest> = serde_json::from_str(&body).unwrap();
            served += reqs.len();
            let resp: Vec<PredictResponse> = reqs
                .into_iter()
                .rev()
                .map(|r| PredictResponse {
                    output_text: gold[&r.example_id].clone(),
                    example_id: r.example_id,
                })
                .collect();
            let body = serde_json::to_string(&resp).unwrap();
            req.respond(tiny_http::Response::from_string(body)).unwrap();
        }
        served
    });
    (url, handle)
}

#[test]
fn http_backend_round_trip() {
    let ex = examples();
    let batch = 8;
    let n_batches = ex.len().div_ceil(batch);
    let (url, handle) = gold_server(&ex, n_batches);
    let backend = HttpBackend::new(&url, batch, 3, Duration::from_secs(10)).unwrap();
    let out = backend.predict(&ex).unwrap();
    assert_eq!(out, OraclePredictor.predict(&ex).unwrap());
    assert_eq!(handle.join().unwrap(), ex.len());
}

#[test]
fn http_unreachable_is_an_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(&format!("http://127.0.0.1:{port}"), 4, 1, Duration::from_secs(2)).unwrap();
    let err = backend.predict(&examples()[..2]).unwrap_err();
    assert!(matches!(err, BackendError::Unreachable(_)));
}

#[test]
fn open_cmd_spec() {
    let ex = &examples()[..2];
    let options = BackendOptions::default();
    let backend = open(&format!("cmd:{PEER} echo"), &options).unwrap();
    assert_eq!(backend.predict(ex).unwrap().len(), 2);
    assert!(backend.name().starts_with("cmd:"));
}
