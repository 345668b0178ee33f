//! Curation state independent of the HTTP layer.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use groundst::corpus::Corpus;
use groundst::mining::{
    all_keys, copy_from_other_services, diversity_stats, diversity_stats_of_texts, finalize_entry, mine_all,
    register_span, served_candidates, suggest_diverse, CandidateKind, CandidatePool, CandidateTurn, DiversityStats,
    Key, KeyKind, LibraryTurn, MiningError, SlotSynonyms, TurnLibrary, TurnRef, FALLBACK_THRESHOLD, MAX_SELECTIONS,
};
use groundst::text::{jaccard_distance, normalize};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Mining(MiningError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<MiningError> for CurationError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::UnknownKey(k) => CurationError::UnknownKey(k),
            MiningError::UnknownService(s) => CurationError::UnknownService(s),
            MiningError::Io { path, source } => CurationError::Io { path, source },
            other => CurationError::Mining(other),
        }
    }
}

pub type Result<T, E = CurationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSummary {
    pub name: String,
    pub description: String,
    pub slots: Vec<String>,
    pub intents: Vec<String>,
    pub seen_in_training: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySummary {
    pub key: String,
    pub kind: KeyKind,
    pub name: String,
    pub description: String,
    pub candidate_count: usize,
    pub selected_count: usize,
    pub curated: bool,
    pub needs_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedCandidate {
    pub text: String,
    pub kind: CandidateKind,
    pub source: TurnRef,
    pub distance_to_description: f64,
}

impl ServedCandidate {
    fn new(c: &CandidateTurn, description: &str) -> Self {
        ServedCandidate {
            text: c.text.clone(),
            kind: c.kind,
            source: c.source.clone(),
            distance_to_description: jaccard_distance(&c.text, description),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fallback {
    /// Fewer than the threshold of distinct mined candidates.
    pub needed: bool,
    /// Turns of equivalent slots in other services.
    pub copied: Vec<ServedCandidate>,
    pub span_allowed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesView {
    pub key: String,
    pub kind: KeyKind,
    pub description: String,
    /// Mined and span candidates in diverse-suggestion order.
    pub candidates: Vec<ServedCandidate>,
    pub stats: DiversityStats,
    pub suggestions: Vec<String>,
    pub short: bool,
    /// Jaccard distances between `candidates`, row-major.
    pub pairwise: Vec<Vec<f64>>,
    pub fallback: Fallback,
    pub selected: Vec<LibraryTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    #[serde(default)]
    pub key: String,
    pub chosen: Vec<String>,
    #[serde(default)]
    pub curator: String,
    /// Unix seconds; filled in by the service when absent.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRequest {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total_keys: usize,
    pub curated_keys: usize,
    pub keys_needing_fallback: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRequest {
    pub chosen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityView {
    /// Minimum pairwise Jaccard distance; absent for fewer than two turns.
    pub min_pairwise_distance: Option<f64>,
    pub mean_pairwise_distance: Option<f64>,
    pub stats: DiversityStats,
}

/// Candidate pool, library and where it is persisted.
pub struct CurationState {
    corpus: Corpus,
    synonyms: SlotSynonyms,
    pool: CandidatePool,
    library: TurnLibrary,
    library_path: PathBuf,
}

fn audit_path(library_path: &Path) -> PathBuf {
    let mut name = library_path.file_name().unwrap_or_default().to_os_string();
    name.push(".selections.jsonl");
    library_path.with_file_name(name)
}

impl CurationState {
    /// Mines the corpus and loads the library at `library_path` if it exists.
    /// SPAN turns in the library are put back into the candidate pool.
    pub fn open(corpus: Corpus, synonyms: SlotSynonyms, library_path: impl Into<PathBuf>) -> Result<Self> {
        let library_path = library_path.into();
        let library = if library_path.exists() {
            TurnLibrary::load(&library_path)?
        } else {
            TurnLibrary::default()
        };
        let pool = mine_all(&corpus);
        let mut state = CurationState {
            corpus,
            synonyms,
            pool,
            library: TurnLibrary::default(),
            library_path,
        };
        state.install(library)?;
        Ok(state)
    }

    pub fn library(&self) -> &TurnLibrary {
        &self.library
    }

    pub fn library_path(&self) -> &Path {
        &self.library_path
    }

    pub fn key(&self, qualified: &str) -> Result<Key> {
        Ok(Key::parse(qualified, &self.corpus.services)?)
    }

    pub fn services(&self) -> Vec<ServiceSummary> {
        self.corpus
            .services
            .iter()
            .map(|s| ServiceSummary {
                name: s.name.clone(),
                description: s.description.clone(),
                slots: s.slots.iter().map(|x| x.name.clone()).collect(),
                intents: s.intents.iter().map(|x| x.name.clone()).collect(),
                seen_in_training: s.seen_in_training,
            })
            .collect()
    }

    fn needs_fallback(&self, key: &Key) -> bool {
        self.pool.distinct_count(key) < FALLBACK_THRESHOLD
    }

    pub fn keys(&self, service: &str) -> Result<Vec<KeySummary>> {
        let svc = self
            .corpus
            .service(service)
            .ok_or_else(|| CurationError::UnknownService(service.to_string()))?;
        Ok(all_keys(std::slice::from_ref(svc))
            .into_iter()
            .map(|key| {
                let selected = self.library.get(&key).map_or(0, <[_]>::len);
                KeySummary {
                    key: key.to_string(),
                    kind: key.kind,
                    name: key.name.clone(),
                    description: key.description(&self.corpus.services).unwrap_or_default().to_string(),
                    candidate_count: self.pool.get(&key).len(),
                    selected_count: selected,
                    curated: selected > 0,
                    needs_fallback: self.needs_fallback(&key),
                }
            })
            .collect())
    }

    pub fn candidates(&self, qualified: &str) -> Result<CandidatesView> {
        let key = self.key(qualified)?;
        let description = key.description(&self.corpus.services).unwrap_or_default();
        let own = self.pool.get(&key);
        let (ordered, short, suggestions) = if own.is_empty() {
            (Vec::new(), true, Vec::new())
        } else {
            let all = suggest_diverse(own, description, own.len())?;
            let n = MAX_SELECTIONS.min(all.picks.len());
            let suggestions = all.picks[..n].iter().map(|c| c.text.clone()).collect();
            (all.picks, n < MAX_SELECTIONS, suggestions)
        };
        let pairwise = ordered
            .iter()
            .map(|a| ordered.iter().map(|b| jaccard_distance(&a.text, &b.text)).collect())
            .collect();
        let copied = copy_from_other_services(&self.pool, &key, &self.synonyms).unwrap_or_default();
        Ok(CandidatesView {
            key: key.to_string(),
            kind: key.kind,
            description: description.to_string(),
            stats: diversity_stats(&ordered),
            candidates: ordered.iter().map(|c| ServedCandidate::new(c, description)).collect(),
            suggestions,
            short,
            pairwise,
            fallback: Fallback {
                needed: self.needs_fallback(&key),
                copied: copied.iter().map(|c| ServedCandidate::new(c, description)).collect(),
                span_allowed: true,
            },
            selected: self.library.get(&key).map(<[_]>::to_vec).unwrap_or_default(),
        })
    }

    /// Replaces the library entry of one key and persists the library.
    pub fn submit(&mut self, qualified: &str, mut record: SelectionRecord) -> Result<Vec<LibraryTurn>> {
        let key = self.key(qualified)?;
        if !record.key.is_empty() && record.key != key.to_string() {
            return Err(CurationError::Invalid(format!(
                "record key {} does not match {key}",
                record.key
            )));
        }
        let served = served_candidates(&self.pool, &key, &self.synonyms);
        let description = key.description(&self.corpus.services).unwrap_or_default();
        let entry = finalize_entry(&key, &record.chosen, &served, description)?;
        let mut next = self.library.clone();
        next.set(&key, entry.clone());
        next.save(&self.library_path)?;
        self.library = next;
        record.key = key.to_string();
        record.timestamp.get_or_insert_with(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        });
        self.append_audit(&record)?;
        tracing::info!(key = %key, turns = entry.len(), curator = %record.curator, "selection saved");
        Ok(entry)
    }

    fn append_audit(&self, record: &SelectionRecord) -> Result<()> {
        let path = audit_path(&self.library_path);
        let io = |source| CurationError::Io {
            path: path.clone(),
            source,
        };
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(f, "{line}").map_err(io)
    }

    pub fn register_span(&mut self, qualified: &str, req: &SpanRequest) -> Result<ServedCandidate> {
        let key = self.key(qualified)?;
        let source = TurnRef {
            dialogue_id: req.dialogue_id.clone(),
            turn_index: req.turn_index,
        };
        let c = register_span(&mut self.pool, &self.corpus, &key, &req.text, &source)?;
        let description = key.description(&self.corpus.services).unwrap_or_default();
        Ok(ServedCandidate::new(&c, description))
    }

    pub fn progress(&self) -> Progress {
        let keys = all_keys(&self.corpus.services);
        let curated = |k: &Key| self.library.get(k).is_some_and(|t| !t.is_empty());
        Progress {
            total_keys: keys.len(),
            curated_keys: keys.iter().filter(|k| curated(k)).count(),
            keys_needing_fallback: keys
                .iter()
                .filter(|k| !curated(k) && self.needs_fallback(k))
                .map(Key::to_string)
                .collect(),
        }
    }

    pub fn diversity(&self, qualified: &str, req: &DiversityRequest) -> Result<DiversityView> {
        self.key(qualified)?;
        let mut distances = Vec::new();
        for (i, a) in req.chosen.iter().enumerate() {
            for b in &req.chosen[i + 1..] {
                distances.push(jaccard_distance(a, b));
            }
        }
        let min = distances.iter().copied().reduce(f64::min);
        let mean = (!distances.is_empty()).then(|| distances.iter().sum::<f64>() / distances.len() as f64);
        Ok(DiversityView {
            min_pairwise_distance: min,
            mean_pairwise_distance: mean,
            stats: diversity_stats_of_texts(&req.chosen),
        })
    }

    /// Replaces the whole library after validating every entry against the
    /// candidates, then persists it.
    pub fn replace_library(&mut self, library: TurnLibrary) -> Result<()> {
        let pool = self.pool.clone();
        if let Err(e) = self.install(library) {
            self.pool = pool;
            return Err(e);
        }
        self.library.save(&self.library_path)?;
        Ok(())
    }

    /// Validates `library`, registering its SPAN turns, and makes it current.
    fn install(&mut self, library: TurnLibrary) -> Result<()> {
        let mut entries = BTreeMap::new();
        for key in library.keys() {
            let qualified = key.to_string();
            let key = self.key(&qualified)?;
            let turns = library.get(&key).unwrap_or_default();
            if turns.len() > MAX_SELECTIONS {
                return Err(MiningError::TooManySelections {
                    key: qualified,
                    count: turns.len(),
                }
                .into());
            }
            for t in turns.iter().filter(|t| t.kind == CandidateKind::Span) {
                let known = self.pool.get(&key).iter().any(|c| normalize(&c.text) == normalize(&t.text));
                if !known {
                    register_span(&mut self.pool, &self.corpus, &key, &t.text, &t.source)?;
                }
            }
            let served = served_candidates(&self.pool, &key, &self.synonyms);
            for t in turns {
                if !served.iter().any(|c| normalize(&c.text) == normalize(&t.text)) {
                    return Err(MiningError::UnknownCandidate {
                        key: qualified.clone(),
                        text: t.text.clone(),
                    }
                    .into());
                }
            }
            entries.insert(key, turns.to_vec());
        }
        let mut next = TurnLibrary::default();
        for (key, turns) in entries {
            next.set(&key, turns);
        }
        self.library = next;
        Ok(())
    }
}
