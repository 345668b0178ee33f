//! Joint goal accuracy, schema sensitivity and lexical-diversity metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{request_id, Prediction};
use crate::corpus::DialogueState;
use crate::promptgen::{parse_target, LinearizedExample};
use crate::text;

pub use crate::text::jaccard_distance;

/// Smoothing added to zero n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("schema sensitivity needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("schema sensitivity is undefined when mean JGA is 0")]
    ZeroMean,
    #[error("self-BLEU needs at least 2 sentences, got {0}")]
    TooFewSentences(usize),
    #[error("{candidates} candidates but {references} reference sets")]
    Misaligned { candidates: usize, references: usize },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Decides whether a predicted value counts as the gold value.
pub trait ValueMatcher: Send + Sync {
    fn matches(&self, slot: &str, gold: &str, predicted: &str) -> bool;
}

/// Equality after normalization.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatcher;

impl ValueMatcher for ExactMatcher {
    fn matches(&self, _slot: &str, gold: &str, predicted: &str) -> bool {
        text::normalize(gold) == text::normalize(predicted)
    }
}

/// Optional semantic-similarity hook (e.g. an entailment model) for
/// scoring grounding turns against descriptions.
pub trait SimilarityScorer: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// 1 - Jaccard distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardSimilarity;

impl SimilarityScorer for JaccardSimilarity {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        1.0 - jaccard_distance(a, b)
    }
}

/// Same slots, every value matching. The active intent is not part of
/// the joint goal.
pub fn slots_match(gold: &DialogueState, predicted: &DialogueState, matcher: &dyn ValueMatcher) -> bool {
    gold.pairs.len() == predicted.pairs.len()
        && gold.pairs.iter().all(|(slot, g)| {
            predicted
                .pairs
                .get(slot)
                .is_some_and(|p| matcher.matches(slot, g, p))
        })
}

/// Additive tallies; merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JgaCounts {
    pub total: usize,
    pub correct: usize,
    pub seen_total: usize,
    pub seen_correct: usize,
    pub unseen_total: usize,
    pub unseen_correct: usize,
    pub intent_total: usize,
    pub intent_correct: usize,
    pub missing: usize,
    pub failed: usize,
    pub parse_failures: usize,
}

impl JgaCounts {
    pub fn merge(&mut self, other: &JgaCounts) {
        self.total += other.total;
        self.correct += other.correct;
        self.seen_total += other.seen_total;
        self.seen_correct += other.seen_correct;
        self.unseen_total += other.unseen_total;
        self.unseen_correct += other.unseen_correct;
        self.intent_total += other.intent_total;
        self.intent_correct += other.intent_correct;
        self.missing += other.missing;
        self.failed += other.failed;
        self.parse_failures += other.parse_failures;
    }

    fn record(&mut self, seen: bool, correct: bool) {
        self.total += 1;
        self.correct += correct as usize;
        if seen {
            self.seen_total += 1;
            self.seen_correct += correct as usize;
        } else {
            self.unseen_total += 1;
            self.unseen_correct += correct as usize;
        }
    }

    pub fn overall(&self) -> f64 {
        percent(self.correct, self.total).unwrap_or(0.0)
    }

    pub fn seen(&self) -> Option<f64> {
        percent(self.seen_correct, self.seen_total)
    }

    pub fn unseen(&self) -> Option<f64> {
        percent(self.unseen_correct, self.unseen_total)
    }

    pub fn intent_accuracy(&self) -> Option<f64> {
        percent(self.intent_correct, self.intent_total)
    }
}

fn percent(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Scores one example against its (possibly absent) prediction.
pub fn score_example(
    example: &LinearizedExample,
    prediction: Option<&Prediction>,
    matcher: &dyn ValueMatcher,
) -> JgaCounts {
    let mut c = JgaCounts::default();
    let gold = example.gold_state();
    let correct = match prediction {
        None => {
            c.missing += 1;
            false
        }
        Some(p) if p.failed => {
            c.failed += 1;
            false
        }
        Some(p) => {
            let (pred, flags) = parse_target(&p.output_text, &example.index_map);
            c.parse_failures += flags.malformed as usize;
            if gold.active_intent.is_some() {
                c.intent_total += 1;
                c.intent_correct += (gold.active_intent == pred.active_intent) as usize;
            }
            slots_match(&gold, &pred, matcher)
        }
    };
    c.record(example.seen, correct);
    c
}

/// Predictions are aligned to examples by request id; an example without a
/// prediction counts as incorrect and is tallied in `missing`.
pub fn jga_counts(
    examples: &[LinearizedExample],
    predictions: &[Prediction],
    matcher: &dyn ValueMatcher,
) -> JgaCounts {
    let by_id: HashMap<&str, &Prediction> = predictions
        .iter()
        .rev()
        .map(|p| (p.example_id.as_str(), p))
        .collect();
    let mut total = JgaCounts::default();
    for ex in examples {
        let id = request_id(ex);
        total.merge(&score_example(ex, by_id.get(id.as_str()).copied(), matcher));
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jga {
    pub overall: f64,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
}

pub fn joint_goal_accuracy(
    examples: &[LinearizedExample],
    predictions: &[Prediction],
    matcher: &dyn ValueMatcher,
) -> Jga {
    let c = jga_counts(examples, predictions, matcher);
    Jga {
        overall: c.overall(),
        seen: c.seen(),
        unseen: c.unseen(),
    }
}

/// Coefficient of variation in percent, population standard deviation.
pub fn schema_sensitivity(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(EvalError::TooFewValues(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(EvalError::ZeroMean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(100.0 * var.sqrt() / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backend: String,
    pub jga_overall: f64,
    pub jga_seen: Option<f64>,
    pub jga_unseen: Option<f64>,
    pub per_variant_jga: BTreeMap<u8, f64>,
    /// Across variants; absent with fewer than two variants or zero mean.
    pub ss: Option<f64>,
    pub ss_seen: Option<f64>,
    pub ss_unseen: Option<f64>,
    pub intent_accuracy: Option<f64>,
    pub turns_evaluated: usize,
    pub parse_failures: usize,
    pub missing: usize,
    pub failed: usize,
}

/// Full report over a dataset that may mix schema variants.
pub fn evaluate(
    examples: &[LinearizedExample],
    predictions: &[Prediction],
    matcher: &dyn ValueMatcher,
    backend: &str,
) -> EvalReport {
    let by_id: HashMap<&str, &Prediction> = predictions
        .iter()
        .rev()
        .map(|p| (p.example_id.as_str(), p))
        .collect();
    let mut total = JgaCounts::default();
    let mut per_variant: BTreeMap<u8, JgaCounts> = BTreeMap::new();
    for ex in examples {
        let id = request_id(ex);
        let c = score_example(ex, by_id.get(id.as_str()).copied(), matcher);
        total.merge(&c);
        per_variant.entry(ex.variant_rank).or_default().merge(&c);
    }
    let ss_of = |f: &dyn Fn(&JgaCounts) -> Option<f64>| -> Option<f64> {
        let values: Option<Vec<f64>> = per_variant.values().map(f).collect();
        values.and_then(|v| schema_sensitivity(&v).ok())
    };
    EvalReport {
        backend: backend.to_string(),
        jga_overall: total.overall(),
        jga_seen: total.seen(),
        jga_unseen: total.unseen(),
        per_variant_jga: per_variant.iter().map(|(r, c)| (*r, c.overall())).collect(),
        ss: ss_of(&|c| Some(c.overall())),
        ss_seen: ss_of(&|c| c.seen()),
        ss_unseen: ss_of(&|c| c.unseen()),
        intent_accuracy: total.intent_accuracy(),
        turns_evaluated: total.total,
        parse_failures: total.parse_failures,
        missing: total.missing,
        failed: total.failed,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "backend          {}", self.backend);
        let _ = writeln!(s, "turns evaluated  {}", self.turns_evaluated);
        let _ = writeln!(s, "JGA overall      {:.2}", self.jga_overall);
        let _ = writeln!(s, "JGA seen         {}", fmt_opt(self.jga_seen));
        let _ = writeln!(s, "JGA unseen       {}", fmt_opt(self.jga_unseen));
        let _ = writeln!(s, "intent accuracy  {}", fmt_opt(self.intent_accuracy));
        for (rank, jga) in &self.per_variant_jga {
            let _ = writeln!(s, "JGA v{rank}           {jga:.2}");
        }
        let _ = writeln!(s, "SS               {}", fmt_opt(self.ss));
        let _ = writeln!(s, "SS seen          {}", fmt_opt(self.ss_seen));
        let _ = writeln!(s, "SS unseen        {}", fmt_opt(self.ss_unseen));
        let _ = writeln!(s, "parse failures   {}", self.parse_failures);
        let _ = writeln!(s, "missing          {}", self.missing);
        let _ = writeln!(s, "failed           {}", self.failed);
        s
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in [0, 100] with clipped n-gram counts up to 4-grams and
/// the closest-reference brevity penalty. Orders with no candidate n-grams
/// at all are left out of the geometric mean; zero precisions get
/// [`BLEU_EPSILON`].
pub fn corpus_bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(EvalError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        let c = text::tokenize(cand.as_ref());
        let rs: Vec<Vec<String>> = refs.iter().map(|r| text::tokenize(r.as_ref())).collect();
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        for n in 1..=BLEU_MAX_ORDER {
            let cc = ngram_counts(&c, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cc {
                totals[n - 1] += k;
                matches[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let logs: Vec<f64> = (0..BLEU_MAX_ORDER)
        .filter(|&i| totals[i] > 0)
        .map(|i| {
            let p = if matches[i] == 0 {
                BLEU_EPSILON
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .collect();
    let geo = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * geo)
}

/// Mean over i of BLEU of sentence i against all the others.
pub fn self_bleu<S: AsRef<str>>(sentences: &[S]) -> Result<f64> {
    if sentences.len() < 2 {
        return Err(EvalError::TooFewSentences(sentences.len()));
    }
    let mut sum = 0.0;
    for (i, s) in sentences.iter().enumerate() {
        let others: Vec<&str> = sentences
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| o.as_ref())
            .collect();
        sum += corpus_bleu(&[s.as_ref()], &[others])?;
    }
    Ok(sum / sentences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ss_examples() {
        assert_eq!(schema_sensitivity(&[80.0; 5]).unwrap(), 0.0);
        let ss = schema_sensitivity(&[90.0, 80.0, 70.0, 60.0, 50.0]).unwrap();
        assert!((ss - 20.203).abs() < 1e-3);
        assert_eq!(schema_sensitivity(&[50.0]), Err(EvalError::TooFewValues(1)));
        assert_eq!(schema_sensitivity(&[0.0, 0.0]), Err(EvalError::ZeroMean));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let s = ["the cat sat on the mat"];
        assert!((corpus_bleu(&s, &[vec!["the cat sat on the mat"]]).unwrap() - 100.0).abs() < 1e-9);
        assert!(corpus_bleu(&s, &[vec!["dogs run far away quickly now"]]).unwrap() < 0.1);
        assert!((corpus_bleu(&["a b"], &[vec!["a b"]]).unwrap() - 100.0).abs() < 1e-9);
        assert!(corpus_bleu(&s, &[vec!["x"], vec!["y"]]).is_err());
    }

    #[test]
    fn self_bleu_identical() {
        let s = ["what city are you in", "what city are you in", "what city are you in"];
        assert!((self_bleu(&s).unwrap() - 100.0).abs() < 1e-9);
        assert!(self_bleu(&["one"]).is_err());
    }

    #[test]
    fn exact_matcher_normalizes() {
        assert!(ExactMatcher.matches("city", "San Jose", "san  jose "));
        assert!(!ExactMatcher.matches("city", "san jose", "san jose ca"));
    }
}
