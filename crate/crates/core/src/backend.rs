//! Prediction contract between the toolkit and a DST model.
//!
//! Built-in predictors: the gold-replaying oracle and a seeded noisy oracle.
//! External models are reached over newline-delimited JSON, either on the
//! standard streams of a persistent child process or via `POST /predict`.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DialogueState;
use crate::promptgen::{parse_target, serialize_target, LinearizedExample};
use crate::seed;

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_CONCURRENCY: usize = 4;
/// Value written in place of a corrupted slot value.
pub const CORRUPTION_TOKEN: &str = "corrupted";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend spec {0:?} (expected oracle, noisy[:k=v,...], cmd:<command> or http:<url>)")]
    InvalidSpec(String),
    #[error("noise probability {name} = {value} is outside [0, 1]")]
    InvalidNoise { name: &'static str, value: f64 },
    #[error("cannot start {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("peer unreachable: {0}")]
    Unreachable(String),
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub example_id: String,
    pub input_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub example_id: String,
    pub output_text: String,
}

/// One model output, aligned with the request it answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub output_text: String,
    /// No usable response arrived (peer died, timed out or sent garbage).
    #[serde(default)]
    pub failed: bool,
}

impl Prediction {
    fn ok(example_id: String, output_text: String) -> Self {
        Prediction {
            example_id,
            output_text,
            failed: false,
        }
    }

    fn failed(example_id: String) -> Self {
        Prediction {
            example_id,
            output_text: String::new(),
            failed: true,
        }
    }
}

/// Wire id of an example. Schema-variant copies and grounded prompt
/// variants share an `example_id`, so they get `#v<rank>` / `#p<n>`
/// suffixes.
pub fn request_id(example: &LinearizedExample) -> String {
    let mut id = example.example_id.clone();
    if example.variant_rank > 0 {
        id.push_str(&format!("#v{}", example.variant_rank));
    }
    if example.prompt_variant > 0 {
        id.push_str(&format!("#p{}", example.prompt_variant));
    }
    id
}

pub fn to_request(example: &LinearizedExample) -> PredictRequest {
    PredictRequest {
        example_id: request_id(example),
        input_text: example.input_text(),
    }
}

/// Anything that maps examples to output strings. Output `i` answers
/// example `i`.
pub trait Predictor: Send + Sync {
    fn predict(&self, examples: &[LinearizedExample]) -> Result<Vec<Prediction>>;

    fn name(&self) -> String;
}

/// Returns each example's gold target verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

pub fn oracle_predict(example: &LinearizedExample) -> String {
    example.target.clone()
}

impl Predictor for OraclePredictor {
    fn predict(&self, examples: &[LinearizedExample]) -> Result<Vec<Prediction>> {
        Ok(examples
            .iter()
            .map(|e| Prediction::ok(request_id(e), oracle_predict(e)))
            .collect())
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub slot_drop_p: f64,
    pub value_corrupt_p: f64,
    pub intent_flip_p: f64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("slot_drop_p", self.slot_drop_p),
            ("value_corrupt_p", self.value_corrupt_p),
            ("intent_flip_p", self.intent_flip_p),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(BackendError::InvalidNoise { name, value });
            }
        }
        Ok(())
    }

    /// Parses `drop=0.3,corrupt=0.1,flip=0.05`; absent keys stay as in
    /// `self`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || BackendError::InvalidSpec(format!("noisy:{spec}"));
            let (k, v) = part.split_once('=').ok_or_else(bad)?;
            let v: f64 = v.trim().parse().map_err(|_| bad())?;
            match k.trim() {
                "drop" | "slot_drop_p" => self.slot_drop_p = v,
                "corrupt" | "value_corrupt_p" => self.value_corrupt_p = v,
                "flip" | "intent_flip_p" => self.intent_flip_p = v,
                _ => return Err(bad()),
            }
        }
        self.validate()?;
        Ok(self)
    }
}

/// Gold target with seeded noise. For every gold pair in index order two
/// uniforms are drawn (drop, corrupt); then one for the intent. A flipped
/// intent moves to the next intent index, or disappears when the service
/// has only one intent.
pub fn noisy_predict(example: &LinearizedExample, noise: &NoiseConfig, seed: u64) -> String {
    let map = &example.index_map;
    let (gold, _) = parse_target(&example.target, map);
    let mut rng = seed::rng(seed::derive(seed, &request_id(example)));
    let mut out = DialogueState::default();
    for slot in map.slots.values() {
        let Some(value) = gold.pairs.get(slot) else { continue };
        let u_drop: f64 = rng.random();
        let u_corrupt: f64 = rng.random();
        if u_drop < noise.slot_drop_p {
            continue;
        }
        let value = if u_corrupt < noise.value_corrupt_p {
            CORRUPTION_TOKEN.to_string()
        } else {
            value.clone()
        };
        out.pairs.insert(slot.clone(), value);
    }
    if let Some(intent) = &gold.active_intent {
        let u_flip: f64 = rng.random();
        out.active_intent = if u_flip < noise.intent_flip_p {
            let n = map.intents.len() as u32;
            map.intent_index(intent)
                .filter(|_| n > 1)
                .and_then(|i| map.intents.get(&((i + 1) % n)).cloned())
        } else {
            Some(intent.clone())
        };
    }
    serialize_target(&out, map).unwrap_or_else(|_| example.target.clone())
}

#[derive(Debug, Clone, Copy)]
pub struct NoisyPredictor {
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl NoisyPredictor {
    pub fn new(noise: NoiseConfig, seed: u64) -> Result<Self> {
        noise.validate()?;
        Ok(NoisyPredictor { noise, seed })
    }
}

impl Predictor for NoisyPredictor {
    fn predict(&self, examples: &[LinearizedExample]) -> Result<Vec<Prediction>> {
        Ok(examples
            .iter()
            .map(|e| Prediction::ok(request_id(e), noisy_predict(e, &self.noise, self.seed)))
            .collect())
    }

    fn name(&self) -> String {
        format!(
            "noisy(drop={},corrupt={},flip={})",
            self.noise.slot_drop_p, self.noise.value_corrupt_p, self.noise.intent_flip_p
        )
    }
}

/// Matches responses to requests by id. Ids may repeat within a batch;
/// repeated ids are answered in request order. A response that does not
/// parse or names no pending request fails the earliest outstanding one.
struct Matcher {
    ids: Vec<String>,
    by_id: HashMap<String, VecDeque<usize>>,
    outstanding: BTreeSet<usize>,
    results: Vec<Option<Prediction>>,
}

impl Matcher {
    fn new(requests: &[PredictRequest], sent: usize) -> Self {
        let mut by_id: HashMap<String, VecDeque<usize>> = HashMap::new();
        for (i, r) in requests.iter().enumerate().take(sent) {
            by_id.entry(r.example_id.clone()).or_default().push_back(i);
        }
        Matcher {
            ids: requests.iter().map(|r| r.example_id.clone()).collect(),
            by_id,
            outstanding: (0..sent).collect(),
            results: vec![None; requests.len()],
        }
    }

    fn done(&self) -> bool {
        self.outstanding.is_empty()
    }

    fn accept(&mut self, response: Option<PredictResponse>) {
        if let Some(resp) = response {
            if let Some(queue) = self.by_id.get_mut(&resp.example_id) {
                while let Some(i) = queue.pop_front() {
                    if self.outstanding.remove(&i) {
                        self.results[i] = Some(Prediction::ok(resp.example_id, resp.output_text));
                        return;
                    }
                }
            }
            tracing::warn!(id = %resp.example_id, "response for unknown request");
        } else {
            tracing::warn!("malformed response line");
        }
        if let Some(i) = self.outstanding.pop_first() {
            self.results[i] = Some(Prediction::failed(self.ids[i].clone()));
        }
    }

    fn finish(self) -> Vec<Prediction> {
        self.results
            .into_iter()
            .zip(self.ids)
            .map(|(r, id)| r.unwrap_or_else(|| Prediction::failed(id)))
            .collect()
    }
}

struct Peer {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    alive: bool,
}

impl Peer {
    fn shut_down(&mut self) {
        self.alive = false;
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Persistent child process speaking the line protocol on stdin/stdout.
/// Batches are strictly sequential. Once the peer dies or times out, every
/// later request comes back failed.
pub struct ProcessBackend {
    command: String,
    peer: Mutex<Peer>,
    pub batch_size: usize,
    pub timeout: Duration,
}

impl ProcessBackend {
    /// Starts `command` (split on whitespace, no shell).
    pub fn spawn(command: &str, batch_size: usize, timeout: Duration) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| BackendError::InvalidSpec(format!("cmd:{command}")))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BackendError::Spawn {
                command: command.to_string(),
                source,
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ProcessBackend {
            command: command.to_string(),
            peer: Mutex::new(Peer {
                child,
                stdin,
                lines: rx,
                alive: true,
            }),
            batch_size: batch_size.max(1),
            timeout,
        })
    }

    fn run_batch(&self, peer: &mut Peer, requests: &[PredictRequest]) -> Vec<Prediction> {
        let mut sent = 0;
        if peer.alive {
            if let Some(stdin) = peer.stdin.as_mut() {
                for r in requests {
                    let mut line = serde_json::to_string(r).expect("request serializes");
                    line.push('\n');
                    if stdin.write_all(line.as_bytes()).is_err() {
                        break;
                    }
                    sent += 1;
                }
                if stdin.flush().is_err() {
                    tracing::warn!(command = %self.command, "peer closed its input");
                }
            }
        }
        let mut matcher = Matcher::new(requests, sent);
        while peer.alive && !matcher.done() {
            match peer.lines.recv_timeout(self.timeout) {
                Ok(line) if line.trim().is_empty() => {}
                Ok(line) => matcher.accept(serde_json::from_str(&line).ok()),
                Err(RecvTimeoutError::Timeout) => {
                    tracing::warn!(command = %self.command, "peer timed out");
                    peer.shut_down();
                }
                Err(RecvTimeoutError::Disconnected) => {
                    tracing::warn!(command = %self.command, "peer exited mid-batch");
                    peer.shut_down();
                }
            }
        }
        if sent < requests.len() {
            peer.alive = false;
        }
        matcher.finish()
    }
}

impl Predictor for ProcessBackend {
    fn predict(&self, examples: &[LinearizedExample]) -> Result<Vec<Prediction>> {
        let mut peer = self.peer.lock().expect("peer lock");
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.batch_size) {
            let requests: Vec<_> = chunk.iter().map(to_request).collect();
            out.extend(self.run_batch(&mut peer, &requests));
        }
        Ok(out)
    }

    fn name(&self) -> String {
        format!("cmd:{}", self.command)
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        if let Ok(peer) = self.peer.get_mut() {
            peer.stdin = None;
            let _ = peer.child.kill();
            let _ = peer.child.wait();
        }
    }
}

/// `POST <url>/predict` with a JSON array of requests; up to
/// `concurrency` batches in flight.
pub struct HttpBackend {
    url: String,
    client: reqwest::blocking::Client,
    pub batch_size: usize,
    pub concurrency: usize,
}

impl HttpBackend {
    pub fn new(base: &str, batch_size: usize, concurrency: usize, timeout: Duration) -> Result<Self> {
        let base = base.trim_end_matches('/');
        let url = if base.ends_with("/predict") {
            base.to_string()
        } else {
            format!("{base}/predict")
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(HttpBackend {
            url,
            client,
            batch_size: batch_size.max(1),
            concurrency: concurrency.max(1),
        })
    }

    fn run_batch(&self, requests: &[PredictRequest]) -> Result<Vec<Prediction>> {
        let sent = self
            .client
            .post(&self.url)
            .json(requests)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json::<Vec<serde_json::Value>>());
        let mut matcher = Matcher::new(requests, requests.len());
        match sent {
            Ok(values) => {
                for v in values {
                    if matcher.done() {
                        break;
                    }
                    matcher.accept(serde_json::from_value(v).ok());
                }
            }
            Err(e) if e.is_connect() => return Err(BackendError::Unreachable(format!("{}: {e}", self.url))),
            Err(e) => tracing::warn!(url = %self.url, error = %e, "batch failed"),
        }
        Ok(matcher.finish())
    }
}

impl Predictor for HttpBackend {
    fn predict(&self, examples: &[LinearizedExample]) -> Result<Vec<Prediction>> {
        let batches: Vec<Vec<PredictRequest>> = examples
            .chunks(self.batch_size)
            .map(|c| c.iter().map(to_request).collect())
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for wave in batches.chunks(self.concurrency) {
            let results: Vec<Result<Vec<Prediction>>> = std::thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|b| s.spawn(|| self.run_batch(b))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("batch thread panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }

    fn name(&self) -> String {
        format!("http:{}", self.url)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackendOptions {
    pub batch_size: usize,
    pub concurrency: usize,
    pub timeout: Duration,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for BackendOptions {
    fn default() -> Self {
        BackendOptions {
            batch_size: DEFAULT_BATCH_SIZE,
            concurrency: DEFAULT_CONCURRENCY,
            timeout: DEFAULT_TIMEOUT,
            seed: 0,
            noise: NoiseConfig::default(),
        }
    }
}

/// Opens a predictor from `oracle`, `noisy[:drop=..,corrupt=..,flip=..]`,
/// `cmd:<command line>` or `http:<url>`.
pub fn open(spec: &str, options: &BackendOptions) -> Result<Box<dyn Predictor>> {
    let spec = spec.trim();
    if spec == "oracle" {
        return Ok(Box::new(OraclePredictor));
    }
    if spec == "noisy" || spec.starts_with("noisy:") {
        let overrides = spec.strip_prefix("noisy").unwrap().trim_start_matches(':');
        let noise = options.noise.with_overrides(overrides)?;
        return Ok(Box::new(NoisyPredictor::new(noise, options.seed)?));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        return Ok(Box::new(ProcessBackend::spawn(cmd, options.batch_size, options.timeout)?));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Box::new(HttpBackend::new(
            spec,
            options.batch_size,
            options.concurrency,
            options.timeout,
        )?));
    }
    if let Some(url) = spec.strip_prefix("http:") {
        let url = if url.starts_with("//") {
            format!("http:{url}")
        } else {
            format!("http://{url}")
        };
        return Ok(Box::new(HttpBackend::new(
            &url,
            options.batch_size,
            options.concurrency,
            options.timeout,
        )?));
    }
    Err(BackendError::InvalidSpec(spec.to_string()))
}
