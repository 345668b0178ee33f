//! In-memory model of an SGD-format corpus: service schemas, schema variants
//! and annotated dialogues.
//!
//! Files follow the public SGD layout. A corpus directory looks like
//!
//! ```text
//! <root>/seen_services.txt           optional split config
//! <root>/<split>/schema.json         rank-0 schema
//! <root>/<split>/dialogues_*.json
//! <root>/variants/v<r>/<split>/schema.json   rank r = 1..5
//! ```
//!
//! Once loaded the corpus is never mutated, except for the `seen_in_training`
//! flag which [`split_seen_unseen`] sets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a JSON array of records: {message}")]
    NotAnArray { path: PathBuf, message: String },
    #[error("{path}: service record {index}: {message}")]
    MalformedService {
        path: PathBuf,
        index: usize,
        message: String,
    },
    #[error("{path}: dialogue record {index}: {message}")]
    MalformedDialogue {
        path: PathBuf,
        index: usize,
        message: String,
    },
    #[error("service {service}: {message}")]
    InvalidService { service: String, message: String },
    #[error("service {service}: categorical slot without values: {slot}")]
    CategoricalWithoutValues { service: String, slot: String },
    #[error("service {service}: duplicate slot name {slot}")]
    DuplicateSlot { service: String, slot: String },
    #[error("service {service}: duplicate intent name {intent}")]
    DuplicateIntent { service: String, intent: String },
    #[error("duplicate service name {0}")]
    DuplicateService(String),
    #[error("dialogue {dialogue_id}, turn {turn}: unknown service {service}")]
    UnknownService {
        dialogue_id: String,
        turn: usize,
        service: String,
    },
    #[error("dialogue {dialogue_id}, turn {turn}: unknown slot {slot} in service {service}")]
    UnknownSlot {
        dialogue_id: String,
        turn: usize,
        service: String,
        slot: String,
    },
    #[error("dialogue {dialogue_id}, turn {turn}: unknown intent {intent} in service {service}")]
    UnknownIntent {
        dialogue_id: String,
        turn: usize,
        service: String,
        intent: String,
    },
    #[error("dialogue {dialogue_id}, turn {turn}: empty utterance")]
    EmptyUtterance { dialogue_id: String, turn: usize },
    #[error("split config names a nonexistent service: {0}")]
    UnknownSplitService(String),
    #[error("schema variant v{rank} is not aligned with the original schema: {detail}")]
    Misaligned { rank: u8, detail: String },
    #[error("schema variant rank must be in 0..=5, got {0}")]
    InvalidRank(u8),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub is_categorical: bool,
    #[serde(default)]
    pub possible_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Service {
    #[serde(rename = "service_name")]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub slots: Vec<Slot>,
    #[serde(default)]
    pub intents: Vec<Intent>,
    #[serde(skip)]
    pub seen_in_training: bool,
}

impl Service {
    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn intent(&self, name: &str) -> Option<&Intent> {
        self.intents.iter().find(|i| i.name == name)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |message: &str| CorpusError::InvalidService {
            service: self.name.clone(),
            message: message.to_string(),
        };
        if self.name.trim().is_empty() {
            return Err(invalid("empty service name"));
        }
        if self.slots.is_empty() {
            return Err(invalid("service has no slots"));
        }
        let mut seen = BTreeSet::new();
        for slot in &self.slots {
            if slot.name.trim().is_empty() {
                return Err(invalid("empty slot name"));
            }
            if !seen.insert(slot.name.as_str()) {
                return Err(CorpusError::DuplicateSlot {
                    service: self.name.clone(),
                    slot: slot.name.clone(),
                });
            }
            if slot.is_categorical && slot.possible_values.is_empty() {
                return Err(CorpusError::CategoricalWithoutValues {
                    service: self.name.clone(),
                    slot: slot.name.clone(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for intent in &self.intents {
            if intent.name.trim().is_empty() {
                return Err(invalid("empty intent name"));
            }
            if !seen.insert(intent.name.as_str()) {
                return Err(CorpusError::DuplicateIntent {
                    service: self.name.clone(),
                    intent: intent.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One schema rendering of the service set. Rank 0 is the original schema,
/// ranks 1..=5 are paraphrased variants (v1..v5) or synthetic ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaVariant {
    pub rank: u8,
    pub services: Vec<Service>,
}

impl SchemaVariant {
    pub fn new(rank: u8, services: Vec<Service>) -> Result<Self> {
        if rank > 5 {
            return Err(CorpusError::InvalidRank(rank));
        }
        Ok(Self { rank, services })
    }

    pub fn service(&self, name: &str) -> Option<&Service> {
        self.services.iter().find(|s| s.name == name)
    }

    /// Checks that this variant describes exactly the services, slots and
    /// intents of `base`, by name.
    pub fn check_aligned(&self, base: &[Service]) -> Result<()> {
        let misaligned = |detail: String| CorpusError::Misaligned {
            rank: self.rank,
            detail,
        };
        let names = |services: &[Service]| {
            services
                .iter()
                .map(|s| s.name.clone())
                .collect::<BTreeSet<_>>()
        };
        if names(&self.services) != names(base) {
            return Err(misaligned("service name sets differ".into()));
        }
        for b in base {
            let v = self.service(&b.name).expect("names checked above");
            let slots = |s: &Service| s.slots.iter().map(|x| x.name.clone()).collect::<BTreeSet<_>>();
            let intents =
                |s: &Service| s.intents.iter().map(|x| x.name.clone()).collect::<BTreeSet<_>>();
            if slots(v) != slots(b) {
                return Err(misaligned(format!("slot names differ in {}", b.name)));
            }
            if intents(v) != intents(b) {
                return Err(misaligned(format!("intent names differ in {}", b.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActType {
    Request,
    Inform,
    InformIntent,
    OfferIntent,
    Confirm,
    Other(String),
}

impl FromStr for ActType {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "REQUEST" => ActType::Request,
            "INFORM" => ActType::Inform,
            "INFORM_INTENT" => ActType::InformIntent,
            "OFFER_INTENT" => ActType::OfferIntent,
            "CONFIRM" => ActType::Confirm,
            other => ActType::Other(other.to_string()),
        })
    }
}

impl fmt::Display for ActType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActType::Request => "REQUEST",
            ActType::Inform => "INFORM",
            ActType::InformIntent => "INFORM_INTENT",
            ActType::OfferIntent => "OFFER_INTENT",
            ActType::Confirm => "CONFIRM",
            ActType::Other(tag) => tag,
        })
    }
}

impl Serialize for ActType {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActType {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(s.parse().unwrap_or_else(|e| match e {}))
    }
}

/// Slot fields on acts that do not name a schema slot.
const PSEUDO_SLOTS: [&str; 2] = ["intent", "count"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueAct {
    pub act: ActType,
    #[serde(
        default,
        deserialize_with = "empty_as_none",
        serialize_with = "none_as_empty"
    )]
    pub slot: Option<String>,
    #[serde(default)]
    pub values: Vec<String>,
}

impl DialogueAct {
    /// Intent named by an INFORM_INTENT / OFFER_INTENT act.
    pub fn intent(&self) -> Option<&str> {
        match self.act {
            ActType::InformIntent | ActType::OfferIntent if self.values.len() == 1 => {
                Some(self.values[0].as_str())
            }
            _ => None,
        }
    }

    /// The schema slot this act refers to, if any.
    pub fn schema_slot(&self) -> Option<&str> {
        self.slot
            .as_deref()
            .filter(|s| !PSEUDO_SLOTS.contains(s))
    }
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let s = Option::<String>::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()))
}

fn none_as_empty<S: serde::Serializer>(v: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(v.as_deref().unwrap_or(""))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "USER")]
    User,
    #[serde(rename = "SYSTEM")]
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "[user]",
            Speaker::System => "[system]",
        }
    }
}

/// Active slot values and intent for one service at one turn.
///
/// Stored text is kept verbatim; [`DialogueState::canonical`] applies
/// lowercase + trim + whitespace collapse for comparisons.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "RawState", into = "RawState")]
pub struct DialogueState {
    pub pairs: BTreeMap<String, String>,
    pub active_intent: Option<String>,
}

impl DialogueState {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty() && self.active_intent.is_none()
    }

    pub fn canonical(&self) -> DialogueState {
        DialogueState {
            pairs: self
                .pairs
                .iter()
                .map(|(k, v)| (k.clone(), text::normalize(v)))
                .collect(),
            active_intent: self.active_intent.clone(),
        }
    }

    /// Stable text key of the canonical form, used for voting and hashing.
    pub fn canonical_key(&self) -> String {
        let c = self.canonical();
        let mut out = String::new();
        for (k, v) in &c.pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\u{1f}');
        }
        out.push('#');
        if let Some(i) = &c.active_intent {
            out.push_str(i);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct RawState {
    #[serde(default)]
    active_intent: String,
    #[serde(default)]
    requested_slots: Vec<String>,
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

impl From<RawState> for DialogueState {
    fn from(raw: RawState) -> Self {
        // SGD lists acceptable surface forms per slot; the first is the gold value.
        let pairs = raw
            .slot_values
            .into_iter()
            .filter_map(|(k, vs)| vs.into_iter().next().map(|v| (k, v)))
            .collect();
        let active_intent = match raw.active_intent.as_str() {
            "" | "NONE" => None,
            _ => Some(raw.active_intent),
        };
        DialogueState {
            pairs,
            active_intent,
        }
    }
}

impl From<DialogueState> for RawState {
    fn from(state: DialogueState) -> Self {
        RawState {
            active_intent: state.active_intent.unwrap_or_else(|| "NONE".into()),
            requested_slots: Vec::new(),
            slot_values: state.pairs.into_iter().map(|(k, v)| (k, vec![v])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub service: String,
    #[serde(default, rename = "actions")]
    pub acts: Vec<DialogueAct>,
    #[serde(default, skip_serializing_if = "DialogueState::is_empty")]
    pub state: DialogueState,
}

impl Frame {
    pub fn active_intent(&self) -> Option<&str> {
        self.state.active_intent.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(default)]
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub services: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    fn validate(&self, schema: &HashMap<&str, &Service>) -> Result<()> {
        let id = || self.dialogue_id.clone();
        for (t, turn) in self.turns.iter().enumerate() {
            if turn.utterance.trim().is_empty() {
                return Err(CorpusError::EmptyUtterance {
                    dialogue_id: id(),
                    turn: t,
                });
            }
            for frame in &turn.frames {
                let service = schema.get(frame.service.as_str()).ok_or_else(|| {
                    CorpusError::UnknownService {
                        dialogue_id: id(),
                        turn: t,
                        service: frame.service.clone(),
                    }
                })?;
                let unknown_slot = |slot: &str| CorpusError::UnknownSlot {
                    dialogue_id: id(),
                    turn: t,
                    service: service.name.clone(),
                    slot: slot.to_string(),
                };
                let unknown_intent = |intent: &str| CorpusError::UnknownIntent {
                    dialogue_id: id(),
                    turn: t,
                    service: service.name.clone(),
                    intent: intent.to_string(),
                };
                for slot in frame.state.pairs.keys() {
                    if service.slot(slot).is_none() {
                        return Err(unknown_slot(slot));
                    }
                }
                if let Some(intent) = frame.active_intent() {
                    if service.intent(intent).is_none() {
                        return Err(unknown_intent(intent));
                    }
                }
                for act in &frame.acts {
                    if let Some(slot) = act.schema_slot() {
                        if service.slot(slot).is_none() {
                            return Err(unknown_slot(slot));
                        }
                    }
                    if let Some(intent) = act.intent() {
                        if service.intent(intent).is_none() {
                            return Err(unknown_intent(intent));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Schema plus dialogues of one split, read-only after construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub services: Vec<Service>,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn service(&self, name: &str) -> Option<&Service> {
        self.services.iter().find(|s| s.name == name)
    }
}

fn read_array(path: &Path) -> Result<Vec<serde_json::Value>> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CorpusError::NotAnArray {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Parses a schema file: an array of service records.
pub fn load_schema(path: impl AsRef<Path>) -> Result<Vec<Service>> {
    let path = path.as_ref();
    let mut services = Vec::new();
    let mut names = BTreeSet::new();
    for (index, value) in read_array(path)?.into_iter().enumerate() {
        let service: Service =
            serde_json::from_value(value).map_err(|e| CorpusError::MalformedService {
                path: path.to_path_buf(),
                index,
                message: e.to_string(),
            })?;
        service.validate()?;
        if !names.insert(service.name.clone()) {
            return Err(CorpusError::DuplicateService(service.name));
        }
        services.push(service);
    }
    Ok(services)
}

/// Parses dialogue files (concurrently, one file per task) and checks every
/// frame against `schema`. File and record order is preserved.
pub fn load_dialogues<P: AsRef<Path> + Sync>(
    paths: &[P],
    schema: &[Service],
) -> Result<Vec<Dialogue>> {
    let by_name: HashMap<&str, &Service> = schema.iter().map(|s| (s.name.as_str(), s)).collect();
    let per_file = paths
        .par_iter()
        .map(|p| {
            let path = p.as_ref();
            read_array(path)?
                .into_iter()
                .enumerate()
                .map(|(index, value)| {
                    let dialogue: Dialogue = serde_json::from_value(value).map_err(|e| {
                        CorpusError::MalformedDialogue {
                            path: path.to_path_buf(),
                            index,
                            message: e.to_string(),
                        }
                    })?;
                    dialogue.validate(&by_name)?;
                    Ok(dialogue)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_file.into_iter().flatten().collect())
}

pub fn write_schema(path: impl AsRef<Path>, services: &[Service]) -> Result<()> {
    write_json(path.as_ref(), services)
}

pub fn write_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    write_json(path.as_ref(), dialogues)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("corpus types always serialize");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io)
}

/// Names of services seen in training, one per line (`#` comments allowed).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen: BTreeSet<String>,
}

impl SplitSpec {
    pub fn parse(text: &str) -> Self {
        let seen = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        SplitSpec { seen }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        SplitSpec {
            seen: names.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

/// Sets `seen_in_training` on every service and returns the two classes in
/// schema order.
pub fn split_seen_unseen(services: &mut [Service], spec: &SplitSpec) -> Result<Partition> {
    for name in &spec.seen {
        if !services.iter().any(|s| &s.name == name) {
            return Err(CorpusError::UnknownSplitService(name.clone()));
        }
    }
    let mut partition = Partition::default();
    for service in services.iter_mut() {
        service.seen_in_training = spec.seen.contains(&service.name);
        if service.seen_in_training {
            partition.seen.push(service.name.clone());
        } else {
            partition.unseen.push(service.name.clone());
        }
    }
    Ok(partition)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Paths of a corpus directory (see the module docs for the layout).
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub root: PathBuf,
}

impl CorpusLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CorpusLayout { root: root.into() }
    }

    pub fn schema_path(&self, split: Split, rank: u8) -> PathBuf {
        if rank == 0 {
            self.root.join(split.as_str()).join("schema.json")
        } else {
            self.root
                .join("variants")
                .join(format!("v{rank}"))
                .join(split.as_str())
                .join("schema.json")
        }
    }

    pub fn split_config_path(&self) -> PathBuf {
        self.root.join("seen_services.txt")
    }

    /// `dialogues_*.json` files of a split, sorted by name.
    pub fn dialogue_paths(&self, split: Split) -> Result<Vec<PathBuf>> {
        let dir = self.root.join(split.as_str());
        let entries = fs::read_dir(&dir).map_err(|source| CorpusError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("dialogues_") && n.ends_with(".json"))
            })
            .collect();
        paths.sort();
        Ok(paths)
    }

    /// Split config if the file exists, otherwise everything is unseen.
    pub fn split_spec(&self) -> Result<SplitSpec> {
        let path = self.split_config_path();
        if path.exists() {
            SplitSpec::from_file(path)
        } else {
            Ok(SplitSpec::default())
        }
    }

    /// Loads the rank-0 schema and dialogues of `split`, with seen flags set.
    /// Split-config names missing from this split's schema are ignored.
    pub fn load(&self, split: Split) -> Result<Corpus> {
        let mut services = load_schema(self.schema_path(split, 0))?;
        self.apply_split(&mut services)?;
        let dialogues = load_dialogues(&self.dialogue_paths(split)?, &services)?;
        Ok(Corpus {
            services,
            dialogues,
        })
    }

    /// Loads schema variant `rank` of `split`, checked against `base`.
    pub fn load_variant(&self, split: Split, rank: u8, base: &[Service]) -> Result<SchemaVariant> {
        if rank == 0 {
            return SchemaVariant::new(0, base.to_vec());
        }
        let mut services = load_schema(self.schema_path(split, rank))?;
        self.apply_split(&mut services)?;
        let variant = SchemaVariant::new(rank, services)?;
        variant.check_aligned(base)?;
        Ok(variant)
    }

    fn apply_split(&self, services: &mut [Service]) -> Result<()> {
        let mut spec = self.split_spec()?;
        spec.seen.retain(|n| services.iter().any(|s| &s.name == n));
        split_seen_unseen(services, &spec)?;
        Ok(())
    }
}
