//! Augmented training sets: EDA perturbation, backtranslation, KST
//! replacement variants and merging of schema variants into one dataset.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, SchemaVariant, Service};
use crate::mining::{Key, TurnLibrary};
use crate::promptgen::{DatasetBuilder, LinearizedExample, PromptError};
use crate::seed;
use crate::text;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("probability {name} = {value} is outside [0, 1]")]
    InvalidProbability { name: &'static str, value: f64 },
    #[error("cannot perturb an empty text")]
    EmptyText,
    #[error("synonym replacement requires a lexicon")]
    MissingLexicon,
    #[error("at most 5 schema variants are supported, asked for {0}")]
    TooManyVariants(usize),
    #[error("turn library has no turns for {0}")]
    EmptyLibraryEntry(String),
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdaConfig {
    pub synonym_p: f64,
    pub insert_p: f64,
    pub delete_p: f64,
    pub swap_p: f64,
}

impl Default for EdaConfig {
    fn default() -> Self {
        EdaConfig {
            synonym_p: 0.25,
            insert_p: 0.05,
            delete_p: 0.05,
            swap_p: 0.05,
        }
    }
}

impl EdaConfig {
    pub fn zero() -> Self {
        EdaConfig {
            synonym_p: 0.0,
            insert_p: 0.0,
            delete_p: 0.0,
            swap_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("synonym_p", self.synonym_p),
            ("insert_p", self.insert_p),
            ("delete_p", self.delete_p),
            ("swap_p", self.swap_p),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AugmentError::InvalidProbability { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Number of extra schema variants.
    pub k: usize,
    pub eda: EdaConfig,
    pub seed: u64,
    pub pivot_languages: Vec<String>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            k: 5,
            eda: EdaConfig::default(),
            seed: 0,
            pivot_languages: vec!["zh".into(), "ja".into(), "ko".into()],
        }
    }
}

/// Flat synonym table: lowercase token -> synonyms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    /// Parses `token<TAB>syn1,syn2` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        let mut entries = BTreeMap::new();
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((token, syns)) = line.split_once('\t') else {
                continue;
            };
            let syns: Vec<String> = syns
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if !syns.is_empty() {
                entries.insert(token.trim().to_lowercase(), syns);
            }
        }
        Lexicon { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|source| AugmentError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Small general-purpose lexicon shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/lexicon.tsv"))
    }

    pub fn insert(&mut self, token: &str, synonyms: &[&str]) {
        self.entries.insert(
            token.to_lowercase(),
            synonyms.iter().map(|s| s.to_string()).collect(),
        );
    }

    pub fn synonyms(&self, token: &str) -> &[String] {
        self.entries
            .get(&token.to_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// EDA word-level perturbation: synonym replacement (per token), one random
/// insertion, per-token deletion and one adjacent swap, in that order.
/// The result is never empty; text that no operation touched is returned
/// verbatim.
pub fn eda_perturb(text: &str, config: &EdaConfig, lexicon: Option<&Lexicon>, seed: u64) -> Result<String> {
    config.validate()?;
    if text.trim().is_empty() {
        return Err(AugmentError::EmptyText);
    }
    if config.synonym_p > 0.0 && lexicon.is_none() {
        return Err(AugmentError::MissingLexicon);
    }
    let empty = Lexicon::default();
    let lexicon = lexicon.unwrap_or(&empty);
    let mut rng = seed::rng(seed);
    let mut tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
    let mut changed = false;

    for tok in tokens.iter_mut() {
        let hit = rng.random::<f64>() < config.synonym_p;
        let syns = lexicon.synonyms(tok);
        if hit && !syns.is_empty() {
            *tok = syns[rng.random_range(0..syns.len())].clone();
            changed = true;
        }
    }

    if rng.random::<f64>() < config.insert_p {
        let with_syns: Vec<usize> = (0..tokens.len())
            .filter(|&i| !lexicon.synonyms(&tokens[i]).is_empty())
            .collect();
        if !with_syns.is_empty() {
            let src = with_syns[rng.random_range(0..with_syns.len())];
            let syns = lexicon.synonyms(&tokens[src]);
            let word = syns[rng.random_range(0..syns.len())].clone();
            let pos = rng.random_range(0..=tokens.len());
            tokens.insert(pos, word);
            changed = true;
        }
    }

    if config.delete_p > 0.0 {
        let before = tokens.clone();
        tokens.retain(|_| rng.random::<f64>() >= config.delete_p);
        if tokens.is_empty() {
            tokens.push(before[rng.random_range(0..before.len())].clone());
        }
        changed |= tokens.len() != before.len();
    }

    if tokens.len() >= 2 && rng.random::<f64>() < config.swap_p {
        let i = rng.random_range(0..tokens.len() - 1);
        tokens.swap(i, i + 1);
        changed = true;
    }

    Ok(if changed { tokens.join(" ") } else { text.to_string() })
}

/// Rewrites every slot and intent description of `base` with `f`.
fn map_descriptions<E>(
    base: &[Service],
    mut f: impl FnMut(&Key, &str) -> Result<String, E>,
) -> Result<Vec<Service>, E> {
    let mut out = base.to_vec();
    for service in &mut out {
        let name = service.name.clone();
        for slot in &mut service.slots {
            slot.description = f(&Key::slot(&name, &slot.name), &slot.description)?;
        }
        for intent in &mut service.intents {
            intent.description = f(&Key::intent(&name, &intent.name), &intent.description)?;
        }
    }
    Ok(out)
}

fn check_k(k: usize) -> Result<()> {
    if k > 5 {
        return Err(AugmentError::TooManyVariants(k));
    }
    Ok(())
}

/// `k` EDA variants of the rank-0 schema, perturbing slot and intent
/// descriptions with per-(variant, key) sub-seeds.
pub fn eda_variants(base: &[Service], config: &AugmentConfig, lexicon: Option<&Lexicon>) -> Result<Vec<SchemaVariant>> {
    check_k(config.k)?;
    (1..=config.k as u8)
        .map(|rank| {
            let services = map_descriptions(base, |key, desc| {
                if desc.trim().is_empty() {
                    return Ok(desc.to_string());
                }
                let s = seed::derive(config.seed, &format!("eda/v{rank}/{key}"));
                eda_perturb(desc, &config.eda, lexicon, s)
            })?;
            Ok(SchemaVariant::new(rank, services)?)
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error("no cached translation for {text:?} via {pivot} and no translator configured")]
    Uncached { pivot: String, text: String },
    #[error("translator command failed: {0}")]
    Command(String),
    #[error("translator endpoint failed: {0}")]
    Http(String),
    #[error("translation cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

/// Round-trip translation of `text` through the `pivot` language.
pub trait Backtranslator: Send + Sync {
    fn backtranslate(&self, text: &str, pivot: &str) -> Result<String, TranslateError>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Backtranslator for IdentityTranslator {
    fn backtranslate(&self, text: &str, _pivot: &str) -> Result<String, TranslateError> {
        Ok(text.to_string())
    }
}

/// Runs `program args... <pivot>` with the text on stdin and reads the
/// round-trip result from stdout.
#[derive(Debug, Clone)]
pub struct CommandTranslator {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandTranslator {
    /// Splits a command line on whitespace.
    pub fn from_command_line(cmd: &str) -> Option<Self> {
        let mut parts = cmd.split_whitespace().map(String::from);
        let program = parts.next()?;
        Some(CommandTranslator {
            program,
            args: parts.collect(),
        })
    }
}

impl Backtranslator for CommandTranslator {
    fn backtranslate(&self, text: &str, pivot: &str) -> Result<String, TranslateError> {
        let err = |e: std::io::Error| TranslateError::Command(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg(pivot)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(err)?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(text.as_bytes())
            .map_err(err)?;
        let out = child.wait_with_output().map_err(err)?;
        if !out.status.success() {
            return Err(TranslateError::Command(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
    }
}

/// POSTs `{"text", "pivot"}` to `url` and expects `{"result"}` back.
#[derive(Debug, Clone)]
pub struct HttpTranslator {
    pub url: String,
    client: reqwest::blocking::Client,
}

impl HttpTranslator {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, TranslateError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TranslateError::Http(e.to_string()))?;
        Ok(HttpTranslator {
            url: url.into(),
            client,
        })
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    pivot: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    result: String,
}

impl Backtranslator for HttpTranslator {
    fn backtranslate(&self, text: &str, pivot: &str) -> Result<String, TranslateError> {
        let http = |e: reqwest::Error| TranslateError::Http(e.to_string());
        let resp = self
            .client
            .post(&self.url)
            .json(&TranslateRequest { text, pivot })
            .send()
            .map_err(http)?
            .error_for_status()
            .map_err(http)?;
        Ok(resp.json::<TranslateResponse>().map_err(http)?.result)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub pivot: String,
    pub source: String,
    pub result: String,
}

/// Line-record translation cache keyed by (pivot, exact source text).
/// Lookups share a read lock; new records are appended under one writer.
#[derive(Debug)]
pub struct TranslationCache {
    path: PathBuf,
    entries: RwLock<BTreeMap<(String, String), String>>,
    writer: Mutex<()>,
}

impl TranslationCache {
    /// Opens (or starts) the cache file at `path`.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, TranslateError> {
        let path = path.into();
        let cache_err = |message: String| TranslateError::Cache {
            path: path.clone(),
            message,
        };
        let mut entries = BTreeMap::new();
        if path.exists() {
            let file = fs::File::open(&path).map_err(|e| cache_err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
                entries.insert((rec.pivot, rec.source), rec.result);
            }
        }
        Ok(TranslationCache {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn get(&self, pivot: &str, source: &str) -> Option<String> {
        self.entries
            .read()
            .expect("cache lock")
            .get(&(pivot.to_string(), source.to_string()))
            .cloned()
    }

    pub fn insert(&self, pivot: &str, source: &str, result: &str) -> Result<(), TranslateError> {
        let _guard = self.writer.lock().expect("cache writer lock");
        let key = (pivot.to_string(), source.to_string());
        if self.entries.read().expect("cache lock").contains_key(&key) {
            return Ok(());
        }
        let rec = CacheRecord {
            pivot: pivot.to_string(),
            source: source.to_string(),
            result: result.to_string(),
        };
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let err = |e: std::io::Error| TranslateError::Cache {
            path: self.path.clone(),
            message: e.to_string(),
        };
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(err)?;
        }
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(err)?;
        self.entries.write().expect("cache lock").insert(key, rec.result);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Consults the cache first and only calls `inner` (if any) on a miss.
pub struct CachedTranslator {
    pub cache: TranslationCache,
    pub inner: Option<Box<dyn Backtranslator>>,
}

impl Backtranslator for CachedTranslator {
    fn backtranslate(&self, text: &str, pivot: &str) -> Result<String, TranslateError> {
        if let Some(hit) = self.cache.get(pivot, text) {
            return Ok(hit);
        }
        let inner = self.inner.as_ref().ok_or_else(|| TranslateError::Uncached {
            pivot: pivot.to_string(),
            text: text.to_string(),
        })?;
        let result = inner.backtranslate(text, pivot)?;
        self.cache.insert(pivot, text, &result)?;
        Ok(result)
    }
}

/// One variant per pivot (ranks in pivot order), each description replaced
/// by its round-trip translation. Names are untouched.
pub fn backtranslate_schema(
    base: &[Service],
    translator: &dyn Backtranslator,
    pivots: &[String],
) -> Result<Vec<SchemaVariant>> {
    check_k(pivots.len())?;
    pivots
        .iter()
        .enumerate()
        .map(|(i, pivot)| {
            let services = map_descriptions(base, |_, desc| {
                if desc.trim().is_empty() {
                    Ok(desc.to_string())
                } else {
                    translator.backtranslate(desc, pivot)
                }
            })?;
            Ok(SchemaVariant::new(i as u8 + 1, services)?)
        })
        .collect()
}

/// Five variants where variant `r` replaces every slot and intent
/// description by the `r`-th turn of its (distance-sorted) library list.
/// Lists shorter than five cycle.
pub fn kst_variants(base: &[Service], library: &TurnLibrary) -> Result<Vec<SchemaVariant>> {
    (1..=5u8)
        .map(|rank| {
            let services = map_descriptions(base, |key, _| {
                let turns = library
                    .get(key)
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| AugmentError::EmptyLibraryEntry(key.to_string()))?;
                Ok::<_, AugmentError>(turns[(rank as usize - 1) % turns.len()].text.clone())
            })?;
            Ok(SchemaVariant::new(rank, services)?)
        })
        .collect()
}

/// Mean Jaccard distance between each slot/intent description of `variant`
/// and its rank-0 counterpart.
pub fn mean_description_distance(base: &[Service], variant: &SchemaVariant) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in base {
        let Some(v) = variant.service(&b.name) else { continue };
        for slot in &b.slots {
            if let Some(vs) = v.slot(&slot.name) {
                total += text::jaccard_distance(&slot.description, &vs.description);
                count += 1;
            }
        }
        for intent in &b.intents {
            if let Some(vi) = v.intent(&intent.name) {
                total += text::jaccard_distance(&intent.description, &vi.description);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Base dataset followed by one copy per variant, each tagged with its
/// rank: `(k + 1) * |base|` examples.
pub fn merge_variants(
    builder: &DatasetBuilder<'_>,
    base: &SchemaVariant,
    variants: &[SchemaVariant],
) -> Result<Vec<LinearizedExample>> {
    for v in variants {
        v.check_aligned(&base.services)?;
    }
    let mut out = builder.build(base)?.0;
    for v in variants {
        out.extend(builder.build(v)?.0);
    }
    Ok(out)
}
