//! Knowledge-seeking turn mining and the curated turn library.
//!
//! A knowledge-seeking turn (KST) for slot `s` is a turn whose frame for the
//! service carries exactly one act, `REQUEST(s)`, with no values. Intent
//! turns carry exactly one `INFORM_INTENT` or `OFFER_INTENT` act naming the
//! intent. Slots with fewer than [`FALLBACK_THRESHOLD`] distinct turns can be
//! topped up by copying turns of same-named slots from other services or by
//! registering a span of an informational turn.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ActType, Corpus, Frame, Service, Turn};
use crate::text;

/// Per-key cap on curated turns, also the "enough candidates" threshold for
/// the copy and span fallbacks.
pub const MAX_SELECTIONS: usize = 5;
pub const FALLBACK_THRESHOLD: usize = 5;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown slot {slot} in service {service}")]
    UnknownSlot { service: String, slot: String },
    #[error("unknown intent {intent} in service {service}")]
    UnknownIntent { service: String, intent: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("no turn {turn_index} in dialogue {dialogue_id}")]
    UnknownTurn {
        dialogue_id: String,
        turn_index: usize,
    },
    #[error("span {span:?} not found in utterance {utterance:?}")]
    SpanNotFound { span: String, utterance: String },
    #[error("empty span")]
    EmptySpan,
    #[error("suggestion count must be at least 1")]
    ZeroSuggestions,
    #[error("{0}: empty selection")]
    EmptySelection(String),
    #[error("{key}: {count} selections exceed the limit of {MAX_SELECTIONS}")]
    TooManySelections { key: String, count: usize },
    #[error("{key}: selection {text:?} is not among the candidates")]
    UnknownCandidate { key: String, text: String },
    #[error("{key}: turn {text:?} selected twice")]
    DuplicateSelection { key: String, text: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = MiningError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    Slot,
    Intent,
}

/// A slot or intent of a service, written `service.name`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Key {
    pub service: String,
    pub kind: KeyKind,
    pub name: String,
}

impl Key {
    pub fn slot(service: impl Into<String>, name: impl Into<String>) -> Self {
        Key {
            service: service.into(),
            kind: KeyKind::Slot,
            name: name.into(),
        }
    }

    pub fn intent(service: impl Into<String>, name: impl Into<String>) -> Self {
        Key {
            service: service.into(),
            kind: KeyKind::Intent,
            name: name.into(),
        }
    }

    /// Resolves `service.name` against a schema; slots shadow intents.
    pub fn parse(qualified: &str, services: &[Service]) -> Result<Self> {
        let unknown = || MiningError::UnknownKey(qualified.to_string());
        let (service, name) = qualified.split_once('.').ok_or_else(unknown)?;
        let svc = services
            .iter()
            .find(|s| s.name == service)
            .ok_or_else(unknown)?;
        if svc.slot(name).is_some() {
            Ok(Key::slot(service, name))
        } else if svc.intent(name).is_some() {
            Ok(Key::intent(service, name))
        } else {
            Err(unknown())
        }
    }

    /// Rank-0 description of the slot or intent.
    pub fn description<'a>(&self, services: &'a [Service]) -> Option<&'a str> {
        let svc = services.iter().find(|s| s.name == self.service)?;
        match self.kind {
            KeyKind::Slot => svc.slot(&self.name).map(|s| s.description.as_str()),
            KeyKind::Intent => svc.intent(&self.name).map(|i| i.description.as_str()),
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.service, self.name)
    }
}

/// Every slot and intent key of a schema, in schema order.
pub fn all_keys(services: &[Service]) -> Vec<Key> {
    services
        .iter()
        .flat_map(|s| {
            s.slots
                .iter()
                .map(|x| Key::slot(&s.name, &x.name))
                .chain(s.intents.iter().map(|i| Key::intent(&s.name, &i.name)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TurnRef {
    pub dialogue_id: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CandidateKind {
    Mined,
    Copied,
    Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTurn {
    /// Utterance without terminal punctuation, original casing.
    pub text: String,
    pub source: TurnRef,
    pub key: String,
    pub kind: CandidateKind,
}

impl CandidateTurn {
    pub fn to_library_turn(&self) -> LibraryTurn {
        LibraryTurn {
            text: self.text.clone(),
            kind: self.kind,
            source: self.source.clone(),
        }
    }
}

pub fn find_turn<'a>(corpus: &'a Corpus, source: &TurnRef) -> Option<&'a Turn> {
    corpus
        .dialogues
        .iter()
        .find(|d| d.dialogue_id == source.dialogue_id)?
        .turns
        .get(source.turn_index)
}

fn single_act_frame<'a>(turn: &'a Turn, service: &str) -> impl Iterator<Item = &'a Frame> {
    let service = service.to_string();
    turn.frames
        .iter()
        .filter(move |f| f.service == service && f.acts.len() == 1)
}

pub fn is_slot_kst(turn: &Turn, service: &str, slot: &str) -> bool {
    single_act_frame(turn, service).any(|f| {
        let act = &f.acts[0];
        act.act == ActType::Request && act.slot.as_deref() == Some(slot) && act.values.is_empty()
    })
}

pub fn is_intent_kst(turn: &Turn, service: &str, intent: &str) -> bool {
    single_act_frame(turn, service).any(|f| f.acts[0].intent() == Some(intent))
}

fn mine(corpus: &Corpus, key: &Key, accept: impl Fn(&Turn) -> bool) -> Vec<CandidateTurn> {
    let qualified = key.to_string();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for dialogue in &corpus.dialogues {
        for (turn_index, turn) in dialogue.turns.iter().enumerate() {
            if !accept(turn) {
                continue;
            }
            let text = text::strip_terminal_punct(&turn.utterance);
            if text.is_empty() || !seen.insert(text::normalize(text)) {
                continue;
            }
            out.push(CandidateTurn {
                text: text.to_string(),
                source: TurnRef {
                    dialogue_id: dialogue.dialogue_id.clone(),
                    turn_index,
                },
                key: qualified.clone(),
                kind: CandidateKind::Mined,
            });
        }
    }
    out
}

fn service<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a Service> {
    corpus
        .service(name)
        .ok_or_else(|| MiningError::UnknownService(name.to_string()))
}

/// Distinct knowledge-seeking turns for `service.slot`, in corpus order.
pub fn mine_slot_candidates(corpus: &Corpus, service_name: &str, slot: &str) -> Result<Vec<CandidateTurn>> {
    if service(corpus, service_name)?.slot(slot).is_none() {
        return Err(MiningError::UnknownSlot {
            service: service_name.to_string(),
            slot: slot.to_string(),
        });
    }
    let key = Key::slot(service_name, slot);
    Ok(mine(corpus, &key, |t| is_slot_kst(t, service_name, slot)))
}

/// Distinct single-act INFORM_INTENT / OFFER_INTENT turns for an intent.
pub fn mine_intent_candidates(
    corpus: &Corpus,
    service_name: &str,
    intent: &str,
) -> Result<Vec<CandidateTurn>> {
    if service(corpus, service_name)?.intent(intent).is_none() {
        return Err(MiningError::UnknownIntent {
            service: service_name.to_string(),
            intent: intent.to_string(),
        });
    }
    let key = Key::intent(service_name, intent);
    Ok(mine(corpus, &key, |t| is_intent_kst(t, service_name, intent)))
}

/// Candidates per key. Mined turns come first; spans and copies are appended.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidatePool {
    pub entries: BTreeMap<Key, Vec<CandidateTurn>>,
}

impl CandidatePool {
    pub fn get(&self, key: &Key) -> &[CandidateTurn] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn distinct_count(&self, key: &Key) -> usize {
        distinct_texts(self.get(key)).len()
    }

    /// Adds a candidate unless its normalized text is already present.
    /// Returns whether it was added.
    pub fn push(&mut self, key: &Key, candidate: CandidateTurn) -> bool {
        let list = self.entries.entry(key.clone()).or_default();
        let norm = text::normalize(&candidate.text);
        if list.iter().any(|c| text::normalize(&c.text) == norm) {
            return false;
        }
        list.push(candidate);
        true
    }
}

fn distinct_texts(candidates: &[CandidateTurn]) -> BTreeSet<String> {
    candidates.iter().map(|c| text::normalize(&c.text)).collect()
}

/// Mines every slot and intent of the corpus schema, in parallel over keys.
pub fn mine_all(corpus: &Corpus) -> CandidatePool {
    let keys = all_keys(&corpus.services);
    let entries = keys
        .into_par_iter()
        .map(|key| {
            let list = match key.kind {
                KeyKind::Slot => mine(corpus, &key, |t| is_slot_kst(t, &key.service, &key.name)),
                KeyKind::Intent => {
                    mine(corpus, &key, |t| is_intent_kst(t, &key.service, &key.name))
                }
            };
            (key, list)
        })
        .collect();
    CandidatePool { entries }
}

/// Fraction-of-candidates statistics over distinct candidate texts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub candidate_count: usize,
    pub token_frequency: BTreeMap<String, f64>,
    pub ngram_frequency: BTreeMap<String, f64>,
}

pub fn diversity_stats(candidates: &[CandidateTurn]) -> DiversityStats {
    let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
    diversity_stats_of_texts(&texts)
}

/// Case-insensitive; each distinct text contributes at most once per token
/// and per bigram.
pub fn diversity_stats_of_texts<S: AsRef<str>>(texts: &[S]) -> DiversityStats {
    let mut distinct = BTreeSet::new();
    let mut token_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut bigram_counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        if !distinct.insert(text::normalize(t.as_ref())) {
            continue;
        }
        let tokens = text::tokenize(t.as_ref());
        for tok in tokens.iter().collect::<BTreeSet<_>>() {
            *token_counts.entry(tok.clone()).or_default() += 1;
        }
        let bigrams: BTreeSet<String> = tokens.windows(2).map(|w| w.join(" ")).collect();
        for bg in bigrams {
            *bigram_counts.entry(bg).or_default() += 1;
        }
    }
    let n = distinct.len();
    let frac = |m: BTreeMap<String, usize>| {
        m.into_iter()
            .map(|(k, c)| (k, c as f64 / n as f64))
            .collect()
    };
    DiversityStats {
        candidate_count: n,
        token_frequency: frac(token_counts),
        ngram_frequency: frac(bigram_counts),
    }
}

/// Slot base names treated as equivalent when copying turns across services.
/// Empty by default, so only identical base names match.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotSynonyms {
    groups: Vec<BTreeSet<String>>,
}

impl SlotSynonyms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group<I: IntoIterator<Item = S>, S: Into<String>>(&mut self, names: I) -> &mut Self {
        self.groups.push(names.into_iter().map(Into::into).collect());
        self
    }

    /// One group per line, names separated by commas.
    pub fn parse(text: &str) -> Self {
        let mut table = SlotSynonyms::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            table.add_group(line.split(',').map(str::trim).filter(|s| !s.is_empty()));
        }
        table
    }

    pub fn matches(&self, a: &str, b: &str) -> bool {
        a == b || self.groups.iter().any(|g| g.contains(a) && g.contains(b))
    }
}

/// Turns of equivalent slots in other services, marked COPIED.
///
/// Returns `None` when `key` already has at least [`FALLBACK_THRESHOLD`]
/// distinct candidates. Copied text is kept verbatim.
pub fn copy_from_other_services(
    pool: &CandidatePool,
    key: &Key,
    synonyms: &SlotSynonyms,
) -> Option<Vec<CandidateTurn>> {
    if key.kind != KeyKind::Slot || pool.distinct_count(key) >= FALLBACK_THRESHOLD {
        return None;
    }
    let mut seen = distinct_texts(pool.get(key));
    let qualified = key.to_string();
    let mut out = Vec::new();
    for (other, list) in &pool.entries {
        if other.kind != KeyKind::Slot
            || other.service == key.service
            || !synonyms.matches(&other.name, &key.name)
        {
            continue;
        }
        for c in list.iter().filter(|c| c.kind == CandidateKind::Mined) {
            if seen.insert(text::normalize(&c.text)) {
                out.push(CandidateTurn {
                    text: c.text.clone(),
                    source: c.source.clone(),
                    key: qualified.clone(),
                    kind: CandidateKind::Copied,
                });
            }
        }
    }
    Some(out)
}

/// Registers a contiguous span of a corpus utterance as a SPAN candidate.
pub fn register_span(
    pool: &mut CandidatePool,
    corpus: &Corpus,
    key: &Key,
    span: &str,
    source: &TurnRef,
) -> Result<CandidateTurn> {
    let span = span.trim();
    if span.is_empty() {
        return Err(MiningError::EmptySpan);
    }
    let turn = find_turn(corpus, source).ok_or_else(|| MiningError::UnknownTurn {
        dialogue_id: source.dialogue_id.clone(),
        turn_index: source.turn_index,
    })?;
    if !turn.utterance.contains(span) {
        return Err(MiningError::SpanNotFound {
            span: span.to_string(),
            utterance: turn.utterance.clone(),
        });
    }
    let candidate = CandidateTurn {
        text: span.to_string(),
        source: source.clone(),
        key: key.to_string(),
        kind: CandidateKind::Span,
    };
    pool.push(key, candidate.clone());
    Ok(candidate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suggestion {
    pub picks: Vec<CandidateTurn>,
    /// Fewer distinct candidates than requested.
    pub short: bool,
}

/// Greedy max-min Jaccard selection of `n` distinct candidates.
///
/// The description seeds the selected set, so the first pick is the
/// candidate farthest from it and every later pick maximizes its minimum
/// distance to the description and all earlier picks. Ties go to the
/// earliest candidate.
pub fn suggest_diverse(candidates: &[CandidateTurn], description: &str, n: usize) -> Result<Suggestion> {
    if n == 0 {
        return Err(MiningError::ZeroSuggestions);
    }
    let mut seen = BTreeSet::new();
    let pool: Vec<&CandidateTurn> = candidates
        .iter()
        .filter(|c| seen.insert(text::normalize(&c.text)))
        .collect();
    let sets: Vec<_> = pool.iter().map(|c| text::token_set(&c.text)).collect();
    let desc = text::token_set(description);
    let mut min_dist: Vec<f64> = sets.iter().map(|s| text::set_jaccard_distance(s, &desc)).collect();
    let mut picked = vec![false; pool.len()];
    let mut picks = Vec::new();
    while picks.len() < n {
        let best = (0..pool.len())
            .filter(|&i| !picked[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if min_dist[b] >= min_dist[i] => Some(b),
                _ => Some(i),
            });
        let Some(best) = best else { break };
        picked[best] = true;
        picks.push(pool[best].clone());
        for i in 0..pool.len() {
            if !picked[i] {
                min_dist[i] = min_dist[i].min(text::set_jaccard_distance(&sets[i], &sets[best]));
            }
        }
    }
    Ok(Suggestion {
        short: picks.len() < n,
        picks,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryTurn {
    pub text: String,
    pub kind: CandidateKind,
    pub source: TurnRef,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceTurns {
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<LibraryTurn>>,
    #[serde(default)]
    pub intents: BTreeMap<String, Vec<LibraryTurn>>,
}

/// Curated turns per slot and intent, each list sorted by ascending Jaccard
/// distance to the rank-0 description.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TurnLibrary {
    pub services: BTreeMap<String, ServiceTurns>,
}

impl TurnLibrary {
    pub fn get(&self, key: &Key) -> Option<&[LibraryTurn]> {
        let svc = self.services.get(&key.service)?;
        let map = match key.kind {
            KeyKind::Slot => &svc.slots,
            KeyKind::Intent => &svc.intents,
        };
        map.get(&key.name).map(Vec::as_slice)
    }

    pub fn set(&mut self, key: &Key, turns: Vec<LibraryTurn>) {
        let svc = self.services.entry(key.service.clone()).or_default();
        let map = match key.kind {
            KeyKind::Slot => &mut svc.slots,
            KeyKind::Intent => &mut svc.intents,
        };
        map.insert(key.name.clone(), turns);
    }

    pub fn keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.services.iter().flat_map(|(s, t)| {
            t.slots
                .keys()
                .map(move |n| Key::slot(s, n))
                .chain(t.intents.keys().map(move |n| Key::intent(s, n)))
        })
    }

    pub fn len(&self) -> usize {
        self.keys().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| MiningError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| MiningError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("library always serializes");
        s.push('\n');
        s
    }

    /// Writes to a temporary file next to `path` and renames it into place,
    /// so readers never observe a partial library.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| MiningError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
        tmp.write_all(self.to_json().as_bytes()).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

/// Sorts turns by ascending Jaccard distance to `description`; equal
/// distances keep their input order.
pub fn sort_by_distance(turns: &mut [LibraryTurn], description: &str) {
    let desc = text::token_set(description);
    turns.sort_by_cached_key(|t| {
        let d = text::set_jaccard_distance(&text::token_set(&t.text), &desc);
        // total order on non-negative floats via their bit patterns
        d.to_bits()
    });
}

/// Validates one key's selection against its candidates and returns the
/// sorted library entry.
pub fn finalize_entry(
    key: &Key,
    chosen: &[String],
    candidates: &[CandidateTurn],
    description: &str,
) -> Result<Vec<LibraryTurn>> {
    let name = key.to_string();
    if chosen.is_empty() {
        return Err(MiningError::EmptySelection(name));
    }
    if chosen.len() > MAX_SELECTIONS {
        return Err(MiningError::TooManySelections {
            key: name,
            count: chosen.len(),
        });
    }
    let mut used = BTreeSet::new();
    let mut turns = Vec::with_capacity(chosen.len());
    for text_ref in chosen {
        let norm = text::normalize(text_ref);
        let candidate = candidates
            .iter()
            .find(|c| text::normalize(&c.text) == norm)
            .ok_or_else(|| MiningError::UnknownCandidate {
                key: name.clone(),
                text: text_ref.clone(),
            })?;
        if !used.insert(norm) {
            return Err(MiningError::DuplicateSelection {
                key: name.clone(),
                text: text_ref.clone(),
            });
        }
        turns.push(candidate.to_library_turn());
    }
    sort_by_distance(&mut turns, description);
    Ok(turns)
}

/// Builds a library from per-key selections (candidate texts).
pub fn finalize_library(
    selections: &BTreeMap<Key, Vec<String>>,
    candidates: &BTreeMap<Key, Vec<CandidateTurn>>,
    services: &[Service],
) -> Result<TurnLibrary> {
    let mut library = TurnLibrary::default();
    for (key, chosen) in selections {
        let description = key
            .description(services)
            .ok_or_else(|| MiningError::UnknownKey(key.to_string()))?;
        let empty = Vec::new();
        let list = candidates.get(key).unwrap_or(&empty);
        library.set(key, finalize_entry(key, chosen, list, description)?);
    }
    Ok(library)
}

/// Candidates a curator may choose from for `key`: mined turns and spans,
/// plus copied turns when the key needs the fallback.
pub fn served_candidates(pool: &CandidatePool, key: &Key, synonyms: &SlotSynonyms) -> Vec<CandidateTurn> {
    let mut list = pool.get(key).to_vec();
    if let Some(copied) = copy_from_other_services(pool, key, synonyms) {
        list.extend(copied);
    }
    list
}

/// Fully automatic curation: for every key, the first `n` diverse
/// suggestions from its served candidates. Keys without any candidate are
/// left out of the library.
pub fn auto_library(
    pool: &CandidatePool,
    services: &[Service],
    synonyms: &SlotSynonyms,
    n: usize,
) -> Result<TurnLibrary> {
    let mut selections = BTreeMap::new();
    let mut universe = BTreeMap::new();
    for key in all_keys(services) {
        let candidates = served_candidates(pool, &key, synonyms);
        let description = key.description(services).unwrap_or_default();
        let picks = suggest_diverse(&candidates, description, n.min(MAX_SELECTIONS))?.picks;
        if picks.is_empty() {
            continue;
        }
        selections.insert(key.clone(), picks.into_iter().map(|c| c.text).collect());
        universe.insert(key, candidates);
    }
    finalize_library(&selections, &universe, services)
}
