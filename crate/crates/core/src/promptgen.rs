//! Linearization of (schema, turn library, dialogue prefix) into encoder
//! prompts, dialogue contexts and target strings, and parsing of model
//! outputs back into dialogue states.
//!
//! Prompt grammar, for a service with slots in schema order:
//!
//! ```text
//! <i>=<payload> [<i>a) <v1> <i>b) <v2> ...] ... i<j>) <payload> ...
//! ```
//!
//! Slot indices are a seeded permutation of `0..n`, intent indices a seeded
//! permutation of `0..m`. Targets look like `[states] 3=london 7=dontcare
//! [intents] i1`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, DialogueState, SchemaVariant, Service, Speaker};
use crate::mining::{Key, TurnLibrary};
use crate::seed;
use crate::text;

/// Context length limit in whitespace tokens.
pub const CONTEXT_TOKEN_LIMIT: usize = 1024;

pub const STATES_HEADER: &str = "[states]";
pub const INTENTS_HEADER: &str = "[intents]";

const DONTCARE: &str = "dontcare";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{0} prompts need a turn library")]
    MissingLibrary(PromptFormat),
    #[error("turn library has no turns for {0}")]
    MissingTurns(String),
    #[error("turn {turn} out of range for dialogue {dialogue_id} with {len} turns")]
    TurnOutOfRange {
        dialogue_id: String,
        turn: usize,
        len: usize,
    },
    #[error("turn {turn} of dialogue {dialogue_id} is not a user turn")]
    NotUserTurn { dialogue_id: String, turn: usize },
    #[error("{0} is not in the index map")]
    MissingFromIndexMap(String),
    #[error("value {value:?} of slot {slot} cannot be written unambiguously in a target")]
    UnrepresentableValue { slot: String, value: String },
    #[error("schema variant has no service {0}")]
    UnknownService(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = PromptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    D3st,
    Turn,
    TurnSlot,
    SlotName,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 4] = [
        PromptFormat::D3st,
        PromptFormat::Turn,
        PromptFormat::TurnSlot,
        PromptFormat::SlotName,
    ];

    /// Turn and TurnSlot prompts embed knowledge-seeking turns.
    pub fn is_grounded(self) -> bool {
        matches!(self, PromptFormat::Turn | PromptFormat::TurnSlot)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptFormat::D3st => "d3st",
            PromptFormat::Turn => "turn",
            PromptFormat::TurnSlot => "turnslot",
            PromptFormat::SlotName => "slotname",
        }
    }
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown prompt format {s:?} (expected d3st, turn, turnslot or slotname)"))
    }
}

/// Prompt index -> slot / intent name of the example's service.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptIndexMap {
    pub slots: BTreeMap<u32, String>,
    pub intents: BTreeMap<u32, String>,
}

impl PromptIndexMap {
    pub fn slot_index(&self, name: &str) -> Option<u32> {
        self.slots.iter().find(|(_, n)| *n == name).map(|(i, _)| *i)
    }

    pub fn intent_index(&self, name: &str) -> Option<u32> {
        self.intents.iter().find(|(_, n)| *n == name).map(|(i, _)| *i)
    }
}

/// `0 -> a`, `25 -> z`, `26 -> aa`.
fn value_letter(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'a' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Everything about a prompt that is fixed across prompt variants: index
/// assignment and the per-key order in which library turns are used.
#[derive(Debug, Clone)]
pub struct PromptPlan<'a> {
    service: &'a Service,
    format: PromptFormat,
    seed: u64,
    index_map: PromptIndexMap,
    slot_index: Vec<u32>,
    intent_index: Vec<u32>,
    slot_turns: Vec<Vec<&'a str>>,
    intent_turns: Vec<Vec<&'a str>>,
}

impl<'a> PromptPlan<'a> {
    pub fn new(
        service: &'a Service,
        format: PromptFormat,
        library: Option<&'a TurnLibrary>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let mut slot_index: Vec<u32> = (0..service.slots.len() as u32).collect();
        slot_index.shuffle(&mut rng);
        let mut intent_index: Vec<u32> = (0..service.intents.len() as u32).collect();
        intent_index.shuffle(&mut rng);

        let mut slot_turns = Vec::new();
        let mut intent_turns = Vec::new();
        if format.is_grounded() {
            let library = library.ok_or(PromptError::MissingLibrary(format))?;
            let mut turns_for = |key: Key| -> Result<Vec<&'a str>> {
                let mut turns: Vec<&'a str> = library
                    .get(&key)
                    .unwrap_or(&[])
                    .iter()
                    .map(|t| t.text.as_str())
                    .collect();
                if turns.is_empty() {
                    return Err(PromptError::MissingTurns(key.to_string()));
                }
                turns.shuffle(&mut rng);
                Ok(turns)
            };
            for slot in &service.slots {
                slot_turns.push(turns_for(Key::slot(&service.name, &slot.name))?);
            }
            for intent in &service.intents {
                intent_turns.push(turns_for(Key::intent(&service.name, &intent.name))?);
            }
        }

        let index_map = PromptIndexMap {
            slots: service
                .slots
                .iter()
                .zip(&slot_index)
                .map(|(s, &i)| (i, s.name.clone()))
                .collect(),
            intents: service
                .intents
                .iter()
                .zip(&intent_index)
                .map(|(x, &i)| (i, x.name.clone()))
                .collect(),
        };
        Ok(PromptPlan {
            service,
            format,
            seed,
            index_map,
            slot_index,
            intent_index,
            slot_turns,
            intent_turns,
        })
    }

    pub fn index_map(&self) -> &PromptIndexMap {
        &self.index_map
    }

    /// Prompt variant `variant`: uses the `variant`-th turn (cyclically) of
    /// each key's shuffled turn list and a variant-specific element order.
    /// Variant 0 is the standard prompt.
    pub fn render(&self, variant: usize) -> String {
        let mut rng = seed::sub_rng(self.seed, &format!("prompt-variant/{variant}"));
        let mut entries = Vec::with_capacity(self.service.slots.len() + self.service.intents.len());
        for (pos, slot) in self.service.slots.iter().enumerate() {
            let turn = self.slot_turns.get(pos).map(|t| t[variant % t.len()]);
            let payload = self.payload(&slot.name, &slot.description, turn, &mut rng);
            let idx = self.slot_index[pos];
            let mut entry = format!("{idx}={payload}");
            if slot.is_categorical {
                let values = slot
                    .possible_values
                    .iter()
                    .filter(|v| !v.trim().eq_ignore_ascii_case(DONTCARE));
                for (k, v) in values.enumerate() {
                    entry.push_str(&format!(" {idx}{}) {}", value_letter(k), text::normalize(v)));
                }
            }
            entries.push(entry);
        }
        for (pos, intent) in self.service.intents.iter().enumerate() {
            let turn = self.intent_turns.get(pos).map(|t| t[variant % t.len()]);
            let payload = self.payload(&intent.name, &intent.description, turn, &mut rng);
            entries.push(format!("i{}) {payload}", self.intent_index[pos]));
        }
        entries.join(" ").to_lowercase()
    }

    fn payload(
        &self,
        name: &str,
        description: &str,
        turn: Option<&str>,
        rng: &mut impl rand::Rng,
    ) -> String {
        let grounded = |s: &str| text::normalize(text::strip_terminal_punct(s));
        match self.format {
            PromptFormat::D3st => text::normalize(description),
            PromptFormat::SlotName => text::humanize_name(name),
            PromptFormat::Turn => {
                let mut parts = vec![grounded(description), grounded(turn.unwrap_or_default())];
                parts.shuffle(rng);
                parts.join(" ")
            }
            PromptFormat::TurnSlot => {
                let mut parts = vec![
                    text::humanize_name(name),
                    grounded(description),
                    grounded(turn.unwrap_or_default()),
                ];
                parts.shuffle(rng);
                parts.join(" ")
            }
        }
    }
}

/// Prompt and index map for `service`, deterministic in `seed`.
pub fn build_prompt(
    service: &Service,
    format: PromptFormat,
    library: Option<&TurnLibrary>,
    seed: u64,
) -> Result<(String, PromptIndexMap)> {
    let plan = PromptPlan::new(service, format, library, seed)?;
    Ok((plan.render(0), plan.index_map))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub text: String,
    pub truncated: bool,
}

/// Speaker-tagged, lowercased history up to and including the user turn
/// `up_to_turn`, cut to its last [`CONTEXT_TOKEN_LIMIT`] whitespace tokens.
pub fn build_context(dialogue: &Dialogue, up_to_turn: usize) -> Result<Context> {
    let turn = dialogue
        .turns
        .get(up_to_turn)
        .ok_or_else(|| PromptError::TurnOutOfRange {
            dialogue_id: dialogue.dialogue_id.clone(),
            turn: up_to_turn,
            len: dialogue.turns.len(),
        })?;
    if turn.speaker != Speaker::User {
        return Err(PromptError::NotUserTurn {
            dialogue_id: dialogue.dialogue_id.clone(),
            turn: up_to_turn,
        });
    }
    let mut tokens: Vec<String> = Vec::new();
    for t in &dialogue.turns[..=up_to_turn] {
        tokens.push(t.speaker.tag().to_string());
        tokens.extend(t.utterance.split_whitespace().map(str::to_lowercase));
    }
    let truncated = tokens.len() > CONTEXT_TOKEN_LIMIT;
    let start = tokens.len().saturating_sub(CONTEXT_TOKEN_LIMIT);
    Ok(Context {
        text: tokens[start..].join(" "),
        truncated,
    })
}

fn pair_token(token: &str) -> Option<(&str, &str)> {
    let eq = token.find('=')?;
    let digits = &token[..eq];
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((digits, &token[eq + 1..]))
}

fn intent_token(token: &str) -> Option<&str> {
    let digits = token.strip_prefix('i')?;
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())).then_some(digits)
}

fn is_header(token: &str) -> bool {
    token.eq_ignore_ascii_case(STATES_HEADER) || token.eq_ignore_ascii_case(INTENTS_HEADER)
}

/// Target string for `state`: slot pairs ascending by index, then the
/// active intent. Values are written in canonical (normalized) form.
pub fn serialize_target(state: &DialogueState, index_map: &PromptIndexMap) -> Result<String> {
    let mut pairs = Vec::with_capacity(state.pairs.len());
    for (slot, value) in &state.pairs {
        let idx = index_map
            .slot_index(slot)
            .ok_or_else(|| PromptError::MissingFromIndexMap(slot.clone()))?;
        let value = text::normalize(value);
        let ambiguous = value
            .split(' ')
            .skip(1)
            .any(|t| pair_token(t).is_some() || is_header(t));
        if ambiguous {
            return Err(PromptError::UnrepresentableValue {
                slot: slot.clone(),
                value,
            });
        }
        pairs.push((idx, value));
    }
    pairs.sort_by_key(|(i, _)| *i);
    let mut out = String::from(STATES_HEADER);
    for (idx, value) in pairs {
        out.push_str(&format!(" {idx}={value}"));
    }
    out.push(' ');
    out.push_str(INTENTS_HEADER);
    if let Some(intent) = &state.active_intent {
        let idx = index_map
            .intent_index(intent)
            .ok_or_else(|| PromptError::MissingFromIndexMap(intent.clone()))?;
        out.push_str(&format!(" i{idx}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFlags {
    /// Missing section headers or tokens that fit nowhere in the grammar.
    pub malformed: bool,
    /// Pairs or intents whose index is not in the index map.
    pub dropped: usize,
    /// Indices seen more than once (the last occurrence is kept).
    pub duplicates: usize,
}

impl ParseFlags {
    pub fn is_clean(&self) -> bool {
        !self.malformed && self.dropped == 0 && self.duplicates == 0
    }
}

#[derive(PartialEq)]
enum Section {
    Preamble,
    States,
    Intents,
}

/// Best-effort inverse of [`serialize_target`]. Never fails: whatever can be
/// recovered is returned together with flags describing what could not.
pub fn parse_target(output: &str, index_map: &PromptIndexMap) -> (DialogueState, ParseFlags) {
    let mut flags = ParseFlags::default();
    let mut section = Section::Preamble;
    let (mut saw_states, mut saw_intents) = (false, false);
    let mut pairs: Vec<(&str, Vec<&str>)> = Vec::new();
    let mut intents: Vec<&str> = Vec::new();
    let mut open_pair = false;

    for token in output.split_whitespace() {
        if token.eq_ignore_ascii_case(STATES_HEADER) {
            if saw_states || saw_intents {
                flags.malformed = true;
            }
            saw_states = true;
            section = Section::States;
            open_pair = false;
            continue;
        }
        if token.eq_ignore_ascii_case(INTENTS_HEADER) {
            if saw_intents {
                flags.malformed = true;
            }
            saw_intents = true;
            section = Section::Intents;
            open_pair = false;
            continue;
        }
        match section {
            Section::Preamble | Section::States => {
                if let Some((idx, first)) = pair_token(token) {
                    let value = if first.is_empty() { vec![] } else { vec![first] };
                    pairs.push((idx, value));
                    open_pair = true;
                } else if open_pair {
                    pairs.last_mut().expect("open pair").1.push(token);
                } else {
                    flags.malformed = true;
                }
            }
            Section::Intents => match intent_token(token) {
                Some(idx) => intents.push(idx),
                None => flags.malformed = true,
            },
        }
    }
    if !saw_states || !saw_intents {
        flags.malformed = true;
    }

    let mut state = DialogueState::default();
    for (idx, value) in pairs {
        let name = idx.parse::<u32>().ok().and_then(|i| index_map.slots.get(&i));
        match name {
            Some(name) => {
                if state.pairs.insert(name.clone(), value.join(" ")).is_some() {
                    flags.duplicates += 1;
                }
            }
            None => flags.dropped += 1,
        }
    }
    for idx in intents {
        match idx.parse::<u32>().ok().and_then(|i| index_map.intents.get(&i)) {
            Some(name) => {
                if state.active_intent.replace(name.clone()).is_some() {
                    flags.duplicates += 1;
                }
            }
            None => flags.dropped += 1,
        }
    }
    (state, flags)
}

/// One (prompt, context, target) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedExample {
    /// `dialogue_id/turn_index/service`
    pub example_id: String,
    pub prompt: String,
    pub context: String,
    pub target: String,
    pub index_map: PromptIndexMap,
    pub service: String,
    pub variant_rank: u8,
    pub format: PromptFormat,
    pub seed: u64,
    /// Whether the service is seen in training (drives the seen/unseen
    /// breakdown at evaluation time).
    #[serde(default)]
    pub seen: bool,
    /// Grounded prompt variant number, 0 for ordinary datasets.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub prompt_variant: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl LinearizedExample {
    /// Encoder input: prompt and context joined by a space.
    pub fn input_text(&self) -> String {
        format!("{} {}", self.prompt, self.context)
    }

    /// Gold state recovered from the target.
    pub fn gold_state(&self) -> DialogueState {
        parse_target(&self.target, &self.index_map).0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildStats {
    pub examples: usize,
    /// Contexts cut to the token limit (D3ST and slot-name formats).
    pub truncated: usize,
    /// Over-long examples dropped (grounded formats).
    pub dropped: usize,
}

/// Builds datasets from a fixed set of dialogues under any schema variant.
#[derive(Debug, Clone, Copy)]
pub struct DatasetBuilder<'a> {
    pub dialogues: &'a [Dialogue],
    pub format: PromptFormat,
    pub library: Option<&'a TurnLibrary>,
    pub seed: u64,
}

impl<'a> DatasetBuilder<'a> {
    pub fn new(
        dialogues: &'a [Dialogue],
        format: PromptFormat,
        library: Option<&'a TurnLibrary>,
        seed: u64,
    ) -> Self {
        DatasetBuilder {
            dialogues,
            format,
            library,
            seed,
        }
    }

    /// Sub-seed of one example. Rank 0 keeps the plain example id so a
    /// base dataset is identical whether or not it is later merged.
    pub fn example_seed(&self, example_id: &str, rank: u8) -> u64 {
        if rank == 0 {
            seed::derive(self.seed, example_id)
        } else {
            seed::derive(self.seed, &format!("{example_id}#v{rank}"))
        }
    }

    /// One example per (user turn, frame), dialogues in input order.
    pub fn build(&self, variant: &SchemaVariant) -> Result<(Vec<LinearizedExample>, BuildStats)> {
        let (groups, stats) = self.build_grouped(variant, 1)?;
        Ok((groups.into_iter().flatten().collect(), stats))
    }

    /// Like [`build`](Self::build) but with `n` grounded prompt variants per
    /// example. Variants share context, target and index map; variant 0 is
    /// identical to the plain build.
    pub fn build_grouped(
        &self,
        variant: &SchemaVariant,
        n: usize,
    ) -> Result<(Vec<Vec<LinearizedExample>>, BuildStats)> {
        let per_dialogue = self
            .dialogues
            .par_iter()
            .map(|d| self.dialogue_examples(d, variant, n))
            .collect::<Result<Vec<_>>>()?;
        let mut stats = BuildStats::default();
        let mut groups = Vec::new();
        for (g, s) in per_dialogue {
            stats.truncated += s.truncated;
            stats.dropped += s.dropped;
            groups.extend(g);
        }
        stats.examples = groups.len();
        Ok((groups, stats))
    }

    fn dialogue_examples(
        &self,
        dialogue: &Dialogue,
        variant: &SchemaVariant,
        n: usize,
    ) -> Result<(Vec<Vec<LinearizedExample>>, BuildStats)> {
        let mut stats = BuildStats::default();
        let mut groups = Vec::new();
        for (t, turn) in dialogue.turns.iter().enumerate() {
            if turn.speaker != Speaker::User || turn.frames.is_empty() {
                continue;
            }
            let context = build_context(dialogue, t)?;
            if context.truncated {
                if self.format.is_grounded() {
                    stats.dropped += turn.frames.len();
                    continue;
                }
                stats.truncated += turn.frames.len();
            }
            for frame in &turn.frames {
                let service = variant
                    .service(&frame.service)
                    .ok_or_else(|| PromptError::UnknownService(frame.service.clone()))?;
                let example_id = format!("{}/{}/{}", dialogue.dialogue_id, t, frame.service);
                let seed = self.example_seed(&example_id, variant.rank);
                let plan = PromptPlan::new(service, self.format, self.library, seed)?;
                let target = serialize_target(&frame.state, plan.index_map())?;
                let group = (0..n.max(1))
                    .map(|v| LinearizedExample {
                        example_id: example_id.clone(),
                        prompt: plan.render(v),
                        context: context.text.clone(),
                        target: target.clone(),
                        index_map: plan.index_map().clone(),
                        service: frame.service.clone(),
                        variant_rank: variant.rank,
                        format: self.format,
                        seed,
                        seen: service.seen_in_training,
                        prompt_variant: v as u32,
                    })
                    .collect();
                groups.push(group);
            }
        }
        Ok((groups, stats))
    }
}

/// All examples of `corpus` under `variant`.
pub fn build_dataset(
    corpus: &Corpus,
    variant: &SchemaVariant,
    format: PromptFormat,
    library: Option<&TurnLibrary>,
    seed: u64,
) -> Result<Vec<LinearizedExample>> {
    Ok(DatasetBuilder::new(&corpus.dialogues, format, library, seed)
        .build(variant)?
        .0)
}

/// Writes one JSON record per line.
pub fn write_dataset(path: impl AsRef<Path>, examples: &[LinearizedExample]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).expect("examples always serialize");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LinearizedExample>> {
    let path = path.as_ref();
    let io = |source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PromptError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Frame, Intent, Slot, Turn};
    use crate::mining::{CandidateKind, LibraryTurn, TurnRef};

    fn weather() -> Service {
        Service {
            name: "Weather_1".into(),
            description: String::new(),
            slots: vec![
                Slot {
                    name: "name".into(),
                    description: "name of the person".into(),
                    is_categorical: false,
                    possible_values: vec![],
                },
                Slot {
                    name: "city".into(),
                    description: "Name of the city".into(),
                    is_categorical: false,
                    possible_values: vec![],
                },
            ],
            intents: vec![Intent {
                name: "GetWeather".into(),
                description: "get the weather".into(),
            }],
            seen_in_training: false,
        }
    }

    fn lib_turn(text: &str) -> LibraryTurn {
        LibraryTurn {
            text: text.into(),
            kind: CandidateKind::Mined,
            source: TurnRef {
                dialogue_id: "d".into(),
                turn_index: 0,
            },
        }
    }

    fn weather_library() -> TurnLibrary {
        let mut lib = TurnLibrary::default();
        lib.set(&Key::slot("Weather_1", "name"), vec![lib_turn("Who is asking")]);
        lib.set(
            &Key::slot("Weather_1", "city"),
            vec![lib_turn("In which location should I check?")],
        );
        lib.set(&Key::intent("Weather_1", "GetWeather"), vec![lib_turn("Want the forecast?")]);
        lib
    }

    /// Seed whose permutations are the identity for 2 slots and 1 intent.
    fn identity_seed(service: &Service) -> u64 {
        (0..1000)
            .find(|&s| {
                let (_, map) = build_prompt(service, PromptFormat::SlotName, None, s).unwrap();
                map.slots[&0] == "name"
            })
            .unwrap()
    }

    #[test]
    fn slotname_prompt_pattern() {
        let service = weather();
        let seed = identity_seed(&service);
        let (prompt, map) = build_prompt(&service, PromptFormat::SlotName, None, seed).unwrap();
        assert_eq!(prompt, "0=name 1=city i0) get weather");
        assert_eq!(map.slots[&1], "city");
        assert_eq!(map.intents[&0], "GetWeather");
    }

    #[test]
    fn d3st_prompt_uses_descriptions_lowercased() {
        let service = weather();
        let seed = identity_seed(&service);
        let (prompt, _) = build_prompt(&service, PromptFormat::D3st, None, seed).unwrap();
        assert_eq!(prompt, "0=name of the person 1=name of the city i0) get the weather");
    }

    #[test]
    fn turn_prompt_grounds_descriptions() {
        let service = weather();
        let lib = weather_library();
        let (prompt, map) = build_prompt(&service, PromptFormat::Turn, Some(&lib), 3).unwrap();
        let idx = map.slot_index("city").unwrap();
        let a = format!("{idx}=name of the city in which location should i check");
        let b = format!("{idx}=in which location should i check name of the city");
        assert!(prompt.contains(&a) || prompt.contains(&b), "{prompt}");
        assert_eq!(prompt, prompt.to_lowercase());
    }

    #[test]
    fn turnslot_prompt_contains_name() {
        let lib = weather_library();
        let (prompt, _) = build_prompt(&weather(), PromptFormat::TurnSlot, Some(&lib), 11).unwrap();
        assert!(prompt.contains("city"));
        assert!(prompt.contains("who is asking"));
        assert!(prompt.contains("want the forecast"));
    }

    #[test]
    fn grounded_formats_need_turns() {
        let service = weather();
        assert!(matches!(
            build_prompt(&service, PromptFormat::Turn, None, 0),
            Err(PromptError::MissingLibrary(_))
        ));
        let mut lib = weather_library();
        lib.services.get_mut("Weather_1").unwrap().intents.clear();
        assert!(matches!(
            build_prompt(&service, PromptFormat::Turn, Some(&lib), 0),
            Err(PromptError::MissingTurns(k)) if k == "Weather_1.GetWeather"
        ));
    }

    #[test]
    fn no_intents_means_no_intent_entries() {
        let mut service = weather();
        service.intents.clear();
        let (prompt, map) = build_prompt(&service, PromptFormat::D3st, None, 5).unwrap();
        assert!(!prompt.contains("i0)"));
        assert!(map.intents.is_empty());
    }

    #[test]
    fn categorical_values_enumerated_without_dontcare() {
        let mut service = weather();
        service.slots[1].is_categorical = true;
        service.slots[1].possible_values = vec!["London".into(), "dontcare".into(), "Paris".into()];
        let (prompt, map) = build_prompt(&service, PromptFormat::D3st, None, 1).unwrap();
        let i = map.slot_index("city").unwrap();
        assert!(prompt.contains(&format!("{i}=name of the city {i}a) london {i}b) paris")), "{prompt}");
        assert!(!prompt.contains("dontcare"));
    }

    #[test]
    fn value_letters() {
        assert_eq!(value_letter(0), "a");
        assert_eq!(value_letter(25), "z");
        assert_eq!(value_letter(26), "aa");
        assert_eq!(value_letter(27), "ab");
    }

    fn dialogue(turns: &[(Speaker, &str)]) -> Dialogue {
        Dialogue {
            dialogue_id: "d1".into(),
            services: vec![],
            turns: turns
                .iter()
                .map(|(s, u)| Turn {
                    speaker: *s,
                    utterance: u.to_string(),
                    frames: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn context_tags_and_lowercases() {
        let d = dialogue(&[
            (Speaker::System, "Where do you want to dine?"),
            (Speaker::User, "I want Nando's."),
        ]);
        let c = build_context(&d, 1).unwrap();
        assert_eq!(c.text, "[system] where do you want to dine? [user] i want nando's.");
        assert!(!c.truncated);
        assert_eq!(build_context(&dialogue(&[(Speaker::User, "Hi")]), 0).unwrap().text, "[user] hi");
        assert!(matches!(build_context(&d, 0), Err(PromptError::NotUserTurn { .. })));
        assert!(matches!(build_context(&d, 2), Err(PromptError::TurnOutOfRange { .. })));
    }

    #[test]
    fn context_keeps_last_1024_tokens() {
        // 2 turns x (1 tag + 999 words) = 2000 tokens
        let words: Vec<String> = (0..999).map(|i| format!("w{i}")).collect();
        let long = words.join(" ");
        let d = dialogue(&[(Speaker::System, &long), (Speaker::User, &long)]);
        let c = build_context(&d, 1).unwrap();
        assert!(c.truncated);
        let toks: Vec<&str> = c.text.split(' ').collect();
        assert_eq!(toks.len(), 1024);
        assert_eq!(toks[1023], "w998");
        assert_eq!(toks[1024 - 1000], "[user]");
        assert_eq!(toks[0], "w975");
    }

    fn city_map() -> PromptIndexMap {
        PromptIndexMap {
            slots: [(1, "city".to_string()), (0, "name".to_string())].into(),
            intents: [(0, "GetWeather".to_string())].into(),
        }
    }

    #[test]
    fn serialize_examples() {
        let mut s = DialogueState::default();
        s.pairs.insert("city".into(), "London".into());
        s.active_intent = Some("GetWeather".into());
        assert_eq!(serialize_target(&s, &city_map()).unwrap(), "[states] 1=london [intents] i0");
        assert_eq!(
            serialize_target(&DialogueState::default(), &city_map()).unwrap(),
            "[states] [intents]"
        );
        let mut d = DialogueState::default();
        d.pairs.insert("name".into(), "dontcare".into());
        assert_eq!(serialize_target(&d, &city_map()).unwrap(), "[states] 0=dontcare [intents]");
        d.pairs.insert("zip".into(), "1".into());
        assert!(matches!(serialize_target(&d, &city_map()), Err(PromptError::MissingFromIndexMap(_))));
        let mut bad = DialogueState::default();
        bad.pairs.insert("city".into(), "a 3=b".into());
        assert!(matches!(serialize_target(&bad, &city_map()), Err(PromptError::UnrepresentableValue { .. })));
    }

    #[test]
    fn parse_examples() {
        let (s, f) = parse_target("[states] 1=london [intents] i0", &city_map());
        assert_eq!(s.pairs["city"], "london");
        assert_eq!(s.active_intent.as_deref(), Some("GetWeather"));
        assert!(f.is_clean());

        let (s, f) = parse_target("garbage !!", &city_map());
        assert!(s.is_empty());
        assert!(f.malformed);

        let (s, f) = parse_target("[states] 9=x 1=paris [intents]", &city_map());
        assert_eq!(s.pairs.len(), 1);
        assert_eq!(s.pairs["city"], "paris");
        assert_eq!(f.dropped, 1);
        assert!(!f.malformed);

        let (s, f) = parse_target("[states] 1=new york 0=ann lee [intents] i0", &city_map());
        assert_eq!(s.pairs["city"], "new york");
        assert_eq!(s.pairs["name"], "ann lee");
        assert!(f.is_clean());

        let (s, f) = parse_target("[states] 1=rome 1=oslo [intents]", &city_map());
        assert_eq!(s.pairs["city"], "oslo");
        assert_eq!(f.duplicates, 1);

        let (s, f) = parse_target("1=rome", &city_map());
        assert_eq!(s.pairs["city"], "rome");
        assert!(f.malformed);

        // intent-like words inside values stay values
        let (s, f) = parse_target("[states] 1=bmw i3 [intents]", &city_map());
        assert_eq!(s.pairs["city"], "bmw i3");
        assert!(f.is_clean());
    }

    #[test]
    fn dataset_roundtrip_file() {
        let dir = tempfile::tempdir().unwrap();
        let service = weather();
        let mut state = DialogueState::default();
        state.pairs.insert("city".into(), "Oslo".into());
        let d = Dialogue {
            dialogue_id: "d9".into(),
            services: vec!["Weather_1".into()],
            turns: vec![Turn {
                speaker: Speaker::User,
                utterance: "Weather in Oslo".into(),
                frames: vec![Frame {
                    service: "Weather_1".into(),
                    acts: vec![],
                    state,
                }],
            }],
        };
        let corpus = Corpus {
            services: vec![service.clone()],
            dialogues: vec![d],
        };
        let variant = SchemaVariant::new(0, vec![service]).unwrap();
        let examples = build_dataset(&corpus, &variant, PromptFormat::D3st, None, 42).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].example_id, "d9/0/Weather_1");
        assert_eq!(examples[0].gold_state().pairs["city"], "oslo");
        let path = dir.path().join("ds.jsonl");
        write_dataset(&path, &examples).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), examples);
    }
}
