//! Grounded prompt ensembling: several grounded prompts per example, one
//! backend call each, majority vote over the canonicalized parsed states.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Prediction, Predictor};
use crate::corpus::{DialogueState, SchemaVariant};
use crate::eval::{evaluate, EvalReport, ValueMatcher};
use crate::promptgen::{parse_target, DatasetBuilder, LinearizedExample, PromptError, PromptFormat, PromptIndexMap};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("prompt ensembling needs a grounded format (turn or turnslot), got {0}")]
    NotGrounded(PromptFormat),
    #[error("n_variants must be at least 1")]
    NoVariants,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_variants: usize,
    pub seed: u64,
    /// Vote on trimmed output strings instead of parsed states.
    pub raw_string_vote: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_variants: 3,
            seed: 0,
            raw_string_vote: false,
        }
    }
}

/// `n` grounded prompt variants per example, sharing context, target and
/// index map.
pub fn make_variants(
    builder: &DatasetBuilder<'_>,
    variant: &SchemaVariant,
    n: usize,
) -> Result<Vec<Vec<LinearizedExample>>> {
    if !builder.format.is_grounded() {
        return Err(EnsembleError::NotGrounded(builder.format));
    }
    if n == 0 {
        return Err(EnsembleError::NoVariants);
    }
    Ok(builder.build_grouped(variant, n)?.0)
}

/// Regroups a flat dataset written with several prompt variants per
/// example, keeping first-appearance order.
pub fn group_variants(examples: &[LinearizedExample]) -> Vec<Vec<LinearizedExample>> {
    let mut index: HashMap<(&str, u8), usize> = HashMap::new();
    let mut groups: Vec<Vec<LinearizedExample>> = Vec::new();
    for ex in examples {
        let slot = *index
            .entry((ex.example_id.as_str(), ex.variant_rank))
            .or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
        groups[slot].push(ex.clone());
    }
    for g in &mut groups {
        g.sort_by_key(|e| e.prompt_variant);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub state: DialogueState,
    /// Variant whose prediction won; `None` when nothing parsed.
    pub winner: Option<usize>,
    pub all_malformed: bool,
}

/// Modal prediction. Malformed outputs do not vote; ties go to the lowest
/// variant index among the tied candidates.
pub fn vote<S: AsRef<str>>(predictions: &[S], index_map: &PromptIndexMap, raw_string: bool) -> Vote {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut states = Vec::with_capacity(predictions.len());
    for (i, p) in predictions.iter().enumerate() {
        let (state, flags) = parse_target(p.as_ref(), index_map);
        if flags.malformed {
            states.push(None);
            continue;
        }
        let key = if raw_string {
            p.as_ref().trim().to_string()
        } else {
            state.canonical_key()
        };
        counts.entry(key).or_insert((0, i)).0 += 1;
        states.push(Some(state));
    }
    let best = counts
        .values()
        .max_by(|(ca, ia), (cb, ib)| ca.cmp(cb).then(ib.cmp(ia)))
        .map(|&(_, i)| i);
    match best {
        Some(i) => Vote {
            state: states[i].clone().expect("winner parsed").canonical(),
            winner: Some(i),
            all_malformed: false,
        },
        None => Vote {
            state: DialogueState::default(),
            winner: None,
            all_malformed: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpeReport {
    pub n_variants: usize,
    pub single_pass: EvalReport,
    pub ensembled: EvalReport,
    pub all_malformed_votes: usize,
    pub backend_calls: usize,
}

impl GpeReport {
    pub fn to_table(&self) -> String {
        format!(
            "== single pass ==\n{}\n== ensembled (n={}) ==\n{}all-malformed votes {}\nbackend calls    {}\n",
            self.single_pass.to_table(),
            self.n_variants,
            self.ensembled.to_table(),
            self.all_malformed_votes,
            self.backend_calls
        )
    }
}

/// Queries every variant of every group once, then scores variant 0 alone
/// (single pass) and the vote winner (ensembled) against the same gold.
pub fn run_gpe(
    groups: &[Vec<LinearizedExample>],
    predictor: &dyn Predictor,
    matcher: &dyn ValueMatcher,
    config: &EnsembleConfig,
) -> Result<GpeReport> {
    let flat: Vec<LinearizedExample> = groups.iter().flatten().cloned().collect();
    let predictions = predictor.predict(&flat)?;
    let mut firsts = Vec::with_capacity(groups.len());
    let mut single = Vec::with_capacity(groups.len());
    let mut ensembled = Vec::with_capacity(groups.len());
    let mut all_malformed = 0;
    let mut offset = 0;
    for group in groups.iter().filter(|g| !g.is_empty()) {
        let preds = &predictions[offset..offset + group.len()];
        offset += group.len();
        let base = &group[0];
        let base_id = crate::backend::request_id(base);
        firsts.push(base.clone());
        single.push(Prediction {
            example_id: base_id.clone(),
            ..preds[0].clone()
        });
        let texts: Vec<&str> = preds
            .iter()
            .map(|p| if p.failed { "" } else { p.output_text.as_str() })
            .collect();
        let v = vote(&texts, &base.index_map, config.raw_string_vote);
        all_malformed += v.all_malformed as usize;
        ensembled.push(match v.winner {
            Some(i) => Prediction {
                example_id: base_id,
                output_text: preds[i].output_text.clone(),
                failed: false,
            },
            None => Prediction {
                example_id: base_id,
                ..preds[0].clone()
            },
        });
    }
    let name = predictor.name();
    Ok(GpeReport {
        n_variants: config.n_variants,
        single_pass: evaluate(&firsts, &single, matcher, &name),
        ensembled: evaluate(&firsts, &ensembled, matcher, &name),
        all_malformed_votes: all_malformed,
        backend_calls: flat.len(),
    })
}
