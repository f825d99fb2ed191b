// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive prompt datasets built from human fluency sequences.
//!
//! From each sequence one cluster (non-switch) transition and one switch
//! transition are sampled. The prefix up to the transition's source item is
//! rendered with a neutral, convergent or divergent instruction, and the
//! true next animal is swapped for the norm animal whose embedding is most
//! (or least) similar to the last animal, drawn from the same-category pool
//! for cluster transitions and the other-category pool for switches.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::norms::{CategoryNorms, LabeledSequence};
use crate::par::Execution;
use crate::SCHEMA_VERSION;

const PROMPT_HEAD: &str =
    "Without repeating yourself, provide the next animal in the comma separated list that comes immediately to mind";
const CONVERGENT_CLAUSE: &str =
    " that sticks/stays/clusters/converges to the same kind/type/category of last animal in the list";
const DIVERGENT_CLAUSE: &str =
    " that diverges/moves/switches/changes drastically away from the kind/type/category of last animal in the list";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContrastiveError {
    #[error("i/o error reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("embedding line {line} has dimension {found}, expected {expected}")]
    InconsistentDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("zero-length vector")]
    ZeroVector,
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no embedding for {0:?}")]
    NoEmbedding(String),
    #[error("animal {0:?} is not in the category norms")]
    UnknownAnimal(String),
    #[error("no candidate animals left for {0:?}")]
    EmptyPool(String),
    #[error("subsequence is empty")]
    EmptySubsequence,
    #[error("unknown prompt condition {0:?}")]
    UnknownCondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptCondition {
    Neutral,
    Convergent,
    Divergent,
}

impl PromptCondition {
    pub const ALL: [PromptCondition; 3] = [
        PromptCondition::Neutral,
        PromptCondition::Convergent,
        PromptCondition::Divergent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptCondition::Neutral => "neutral",
            PromptCondition::Convergent => "convergent",
            PromptCondition::Divergent => "divergent",
        }
    }

    fn clause(self) -> &'static str {
        match self {
            PromptCondition::Neutral => "",
            PromptCondition::Convergent => CONVERGENT_CLAUSE,
            PromptCondition::Divergent => DIVERGENT_CLAUSE,
        }
    }
}

impl FromStr for PromptCondition {
    type Err = ContrastiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neutral" | "n" | "N" => Ok(PromptCondition::Neutral),
            "convergent" | "c" | "C" => Ok(PromptCondition::Convergent),
            "divergent" | "d" | "D" => Ok(PromptCondition::Divergent),
            other => Err(ContrastiveError::UnknownCondition(other.to_string())),
        }
    }
}

/// Candidate pool for a replacement animal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarKind {
    /// Shares at least one category with the last animal.
    Convergent,
    /// Shares no category with the last animal.
    Divergent,
}

impl ExemplarKind {
    pub fn for_transition(is_switch: bool) -> Self {
        if is_switch {
            ExemplarKind::Divergent
        } else {
            ExemplarKind::Convergent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Max,
    Min,
}

/// Prompt text for `condition` with the subsequence filled in.
pub fn render_prompt(condition: PromptCondition, subsequence: &[String]) -> Result<String, ContrastiveError> {
    if subsequence.is_empty() {
        return Err(ContrastiveError::EmptySubsequence);
    }
    Ok(format!(
        "{PROMPT_HEAD}{}: {},",
        condition.clause(),
        subsequence.join(", ")
    ))
}

/// Inverse of [`render_prompt`].
pub fn parse_prompt(prompt: &str) -> Option<(PromptCondition, Vec<String>)> {
    PromptCondition::ALL.into_iter().find_map(|c| {
        let prefix = format!("{PROMPT_HEAD}{}: ", c.clause());
        let body = prompt.strip_prefix(&prefix)?.strip_suffix(',')?;
        Some((c, body.split(", ").map(str::to_string).collect()))
    })
}

/// Word vectors restricted to the words of norm animals.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub words: HashMap<String, Vec<f64>>,
    /// Per-animal vector: mean of its word vectors.
    pub animals: BTreeMap<String, Vec<f64>>,
    /// Norm animals with at least one out-of-vocabulary word.
    pub unavailable: BTreeSet<String>,
}

impl EmbeddingTable {
    pub fn get(&self, animal: &str) -> Option<&[f64]> {
        self.animals.get(animal).map(Vec::as_slice)
    }
}

/// Parse whitespace-separated `word v1 .. v_dim` lines.
///
/// The dimension is taken from the first entry and every line must match
/// it. Only words occurring in norm animal names are kept.
pub fn parse_embeddings(text: &str, norms: &CategoryNorms) -> Result<EmbeddingTable, ContrastiveError> {
    let needed: HashSet<&str> = norms.animals().flat_map(|a| a.split(' ')).collect();
    let mut dim = None;
    let mut words = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            continue;
        };
        let fields: Vec<&str> = parts.collect();
        let expected = *dim.get_or_insert(fields.len());
        if fields.len() != expected || expected == 0 {
            return Err(ContrastiveError::InconsistentDim {
                line: i + 1,
                expected,
                found: fields.len(),
            });
        }
        if !needed.contains(word) || words.contains_key(word) {
            continue;
        }
        let v = fields
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ContrastiveError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ContrastiveError::Parse {
                line: i + 1,
                message: "non-finite value".into(),
            });
        }
        words.insert(word.to_string(), v);
    }
    let dim = dim.unwrap_or(0);
    let mut animals = BTreeMap::new();
    let mut unavailable = BTreeSet::new();
    for animal in norms.animals() {
        let parts: Option<Vec<&Vec<f64>>> = animal.split(' ').map(|w| words.get(w)).collect();
        match parts {
            Some(vs) => {
                let mut mean = vec![0.0; dim];
                for v in &vs {
                    for (m, x) in mean.iter_mut().zip(v.iter()) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= vs.len() as f64);
                animals.insert(animal.to_string(), mean);
            }
            None => {
                unavailable.insert(animal.to_string());
            }
        }
    }
    Ok(EmbeddingTable {
        dim,
        words,
        animals,
        unavailable,
    })
}

pub fn load_embeddings(path: &Path, norms: &CategoryNorms) -> Result<EmbeddingTable, ContrastiveError> {
    let text = std::fs::read_to_string(path).map_err(|e| ContrastiveError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_embeddings(&text, norms)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, ContrastiveError> {
    if a.len() != b.len() {
        return Err(ContrastiveError::LengthMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(ContrastiveError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The pool member with the highest (`Max`) or lowest (`Min`) cosine
/// similarity to `last_animal`; exact ties go to the lexicographically
/// smallest name.
pub fn select_exemplar(
    last_animal: &str,
    produced: &BTreeSet<String>,
    kind: ExemplarKind,
    polarity: Polarity,
    norms: &CategoryNorms,
    emb: &EmbeddingTable,
) -> Result<String, ContrastiveError> {
    if !norms.contains(last_animal) {
        return Err(ContrastiveError::UnknownAnimal(last_animal.to_string()));
    }
    let anchor = emb
        .get(last_animal)
        .ok_or_else(|| ContrastiveError::NoEmbedding(last_animal.to_string()))?;
    let mut best: Option<(&str, f64)> = None;
    // animals iterate in lexicographic order; only strict improvements replace
    for (candidate, vec) in &emb.animals {
        if produced.contains(candidate) || candidate == last_animal {
            continue;
        }
        let shares = norms.share_category(last_animal, candidate) == Some(true);
        if shares != (kind == ExemplarKind::Convergent) {
            continue;
        }
        let Ok(sim) = cosine(anchor, vec) else {
            continue;
        };
        let better = match (best, polarity) {
            (None, _) => true,
            (Some((_, b)), Polarity::Max) => sim > b,
            (Some((_, b)), Polarity::Min) => sim < b,
        };
        if better {
            best = Some((candidate, sim));
        }
    }
    best.map(|(a, _)| a.to_string())
        .ok_or_else(|| ContrastiveError::EmptyPool(last_animal.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastivePair {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub sequence_id: String,
    /// Transition index in the source sequence; the subsequence ends at it.
    pub position: usize,
    pub base_subsequence: Vec<String>,
    pub condition: PromptCondition,
    /// `None` for neutral pairs, which keep the true next animal.
    pub polarity: Option<Polarity>,
    pub replacement_kind: ExemplarKind,
    pub replacement: String,
    pub rendered_prompt: String,
    pub label_is_switch: bool,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub sequence_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<PromptCondition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n_sequences: usize,
    pub n_pairs: usize,
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub conditions: Vec<PromptCondition>,
    pub polarities: Vec<Polarity>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            conditions: PromptCondition::ALL.to_vec(),
            polarities: vec![Polarity::Max, Polarity::Min],
        }
    }
}

/// Build the contrastive dataset; see the module docs for the procedure.
///
/// Each sequence draws its transitions from its own RNG stream keyed by
/// `(rng_seed, sequence index)`.
pub fn build_dataset(
    human_seqs: &[LabeledSequence],
    norms: &CategoryNorms,
    emb: &EmbeddingTable,
    config: &DatasetConfig,
    rng_seed: u64,
    exec: Execution,
) -> (Vec<ContrastivePair>, ContrastiveReport) {
    let per_seq = exec.map_range(human_seqs.len(), |i| {
        pairs_for_sequence(i, &human_seqs[i], norms, emb, config, rng_seed)
    });
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (p, s) in per_seq {
        pairs.extend(p);
        skipped.extend(s);
    }
    let report = ContrastiveReport {
        schema_version: SCHEMA_VERSION,
        seed: rng_seed,
        n_sequences: human_seqs.len(),
        n_pairs: pairs.len(),
        skipped,
    };
    (pairs, report)
}

fn pairs_for_sequence(
    index: usize,
    seq: &LabeledSequence,
    norms: &CategoryNorms,
    emb: &EmbeddingTable,
    config: &DatasetConfig,
    rng_seed: u64,
) -> (Vec<ContrastivePair>, Vec<SkipRecord>) {
    let skip = |position, condition, polarity, reason: String| SkipRecord {
        sequence_id: seq.id.clone(),
        position,
        condition,
        polarity,
        reason,
    };
    let clusters: Vec<usize> = (0..seq.switch_flags.len()).filter(|&t| !seq.switch_flags[t]).collect();
    let switches: Vec<usize> = (0..seq.switch_flags.len()).filter(|&t| seq.switch_flags[t]).collect();
    if clusters.is_empty() || switches.is_empty() {
        let missing = if clusters.is_empty() { "non-switch" } else { "switch" };
        return (vec![], vec![skip(None, None, None, format!("no {missing} transition"))]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(index as u64);
    let sampled = [
        *clusters.choose(&mut rng).expect("non-empty"),
        *switches.choose(&mut rng).expect("non-empty"),
    ];

    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for t in sampled {
        let is_switch = seq.switch_flags[t];
        let kind = ExemplarKind::for_transition(is_switch);
        let base: Vec<String> = seq.items[..=t].to_vec();
        let produced: BTreeSet<String> = base.iter().cloned().collect();
        let last = &seq.items[t];
        for &condition in &config.conditions {
            let prompt = render_prompt(condition, &base).expect("non-empty prefix");
            let mut emit = |polarity, replacement: String| {
                let label_is_switch = norms.share_category(last, &replacement) == Some(false);
                pairs.push(ContrastivePair {
                    schema_version: SCHEMA_VERSION,
                    sequence_id: seq.id.clone(),
                    position: t,
                    base_subsequence: base.clone(),
                    condition,
                    polarity,
                    replacement_kind: kind,
                    replacement,
                    rendered_prompt: prompt.clone(),
                    label_is_switch,
                });
            };
            if condition == PromptCondition::Neutral {
                emit(None, seq.items[t + 1].clone());
                continue;
            }
            for &polarity in &config.polarities {
                match select_exemplar(last, &produced, kind, polarity, norms, emb) {
                    Ok(r) => emit(Some(polarity), r),
                    Err(e) => skipped.push(skip(Some(t), Some(condition), Some(polarity), e.to_string())),
                }
            }
        }
    }
    (pairs, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norms::Source;
    use proptest::prelude::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(
            render_prompt(PromptCondition::Neutral, &strings(&["dog"])).unwrap(),
            "Without repeating yourself, provide the next animal in the comma separated list that comes immediately to mind: dog,"
        );
        let c = render_prompt(PromptCondition::Convergent, &strings(&["dog", "cat"])).unwrap();
        assert!(c.contains("sticks/stays/clusters/converges"));
        assert!(c.ends_with("of last animal in the list: dog, cat,"));
        let d = render_prompt(PromptCondition::Divergent, &strings(&["dog"])).unwrap();
        assert!(d.contains("diverges/moves/switches/changes drastically away"));
        assert_eq!(
            render_prompt(PromptCondition::Neutral, &[]),
            Err(ContrastiveError::EmptySubsequence)
        );
        assert!("sideways".parse::<PromptCondition>().is_err());
    }

    #[test]
    fn embeddings_parse() {
        let norms = CategoryNorms::from_memberships([
            ("pets", "dog"),
            ("pets", "cat"),
            ("arctic", "polar bear"),
            ("arctic", "snowy owl"),
        ])
        .unwrap();
        let text = "dog 1 0\ncat 0 1\npolar 2 0\nbear 0 2\nowl 1 1\nzebra 5 5\n";
        let t = parse_embeddings(text, &norms).unwrap();
        assert_eq!(t.dim, 2);
        assert_eq!(t.get("dog").unwrap(), [1.0, 0.0]);
        assert_eq!(t.get("polar bear").unwrap(), [1.0, 1.0]);
        assert!(t.unavailable.contains("snowy owl"));
        assert!(!t.words.contains_key("zebra"));
        assert_eq!(
            parse_embeddings("dog 1 0\ncat 0 1 2\n", &norms),
            Err(ContrastiveError::InconsistentDim { line: 2, expected: 2, found: 3 })
        );
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(ContrastiveError::ZeroVector));
    }

    fn table(entries: &[(&str, &[f64])], norms: &CategoryNorms) -> EmbeddingTable {
        let text: String = entries
            .iter()
            .map(|(w, v)| {
                let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                format!("{w} {}\n", nums.join(" "))
            })
            .collect();
        parse_embeddings(&text, norms).unwrap()
    }

    #[test]
    fn pool_filter_dominates() {
        let norms = CategoryNorms::from_memberships([("pets", "dog"), ("pets", "cat"), ("sea", "eel")]).unwrap();
        // eel is far more similar to dog than cat is
        let emb = table(&[("dog", &[1.0, 0.0]), ("cat", &[-1.0, 0.1]), ("eel", &[1.0, 0.01])], &norms);
        let produced = BTreeSet::from(["dog".to_string()]);
        let pick = |k, p| select_exemplar("dog", &produced, k, p, &norms, &emb).unwrap();
        assert_eq!(pick(ExemplarKind::Convergent, Polarity::Max), "cat");
        assert_eq!(pick(ExemplarKind::Divergent, Polarity::Min), "eel");
        let all = BTreeSet::from(["dog".to_string(), "cat".to_string()]);
        assert_eq!(
            select_exemplar("dog", &all, ExemplarKind::Convergent, Polarity::Max, &norms, &emb),
            Err(ContrastiveError::EmptyPool("dog".into()))
        );
    }

    #[test]
    fn max_min_and_ties() {
        let norms =
            CategoryNorms::from_memberships([("a", "x"), ("a", "p"), ("a", "q"), ("a", "r")]).unwrap();
        // cos(x,p) = 0.9-ish, cos(x,q) = 0.2-ish, r ties with p
        let emb = table(
            &[("x", &[1.0, 0.0]), ("p", &[0.9, 0.43589]), ("q", &[0.2, 0.9798]), ("r", &[0.9, 0.43589])],
            &norms,
        );
        let produced = BTreeSet::from(["x".to_string()]);
        let sel = |p| select_exemplar("x", &produced, ExemplarKind::Convergent, p, &norms, &emb).unwrap();
        assert_eq!(sel(Polarity::Max), "p");
        assert_eq!(sel(Polarity::Min), "q");
    }

    fn labeled(id: &str, items: &[&str], norms: &CategoryNorms) -> LabeledSequence {
        LabeledSequence::label(id, Source::Human, None, strings(items), norms)
            .unwrap()
            .unwrap()
    }

    fn fixture() -> (CategoryNorms, EmbeddingTable) {
        let norms = CategoryNorms::from_memberships([
            ("pets", "dog"),
            ("pets", "cat"),
            ("pets", "hamster"),
            ("pets", "rabbit"),
            ("sea", "octopus"),
            ("sea", "squid"),
            ("sea", "shark"),
            ("farm", "cow"),
            ("farm", "pig"),
            ("farm", "rabbit"),
        ])
        .unwrap();
        let emb = table(
            &[
                ("dog", &[1.0, 0.1, 0.0]),
                ("cat", &[0.9, 0.2, 0.1]),
                ("hamster", &[0.7, 0.0, 0.4]),
                ("rabbit", &[0.6, 0.5, 0.2]),
                ("octopus", &[0.0, 1.0, 0.1]),
                ("squid", &[0.1, 0.9, 0.0]),
                ("shark", &[0.3, 0.8, 0.3]),
                ("cow", &[0.2, 0.1, 1.0]),
                ("pig", &[0.4, 0.0, 0.9]),
            ],
            &norms,
        );
        (norms, emb)
    }

    #[test]
    fn dataset_pairs_and_skips() {
        let (norms, emb) = fixture();
        let seqs = vec![
            labeled("a", &["dog", "cat", "octopus", "squid", "cow"], &norms),
            labeled("b", &["dog", "cat", "hamster"], &norms),
        ];
        let (pairs, report) =
            build_dataset(&seqs, &norms, &emb, &DatasetConfig::default(), 7, Execution::default());
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].sequence_id, "b");
        // 2 transitions x (1 neutral + 2 convergent + 2 divergent)
        assert_eq!(pairs.len(), 10);
        assert!(pairs.len() <= 2 * 3 * 2 * seqs.len());
        for p in &pairs {
            let last = p.base_subsequence.last().unwrap();
            let shares = norms.share_category(last, &p.replacement).unwrap();
            assert_eq!(p.label_is_switch, !shares);
            assert_eq!(p.replacement_kind == ExemplarKind::Convergent, shares);
            assert!(!p.base_subsequence.contains(&p.replacement));
            assert_eq!(
                parse_prompt(&p.rendered_prompt).unwrap(),
                (p.condition, p.base_subsequence.clone())
            );
        }
        let (again, _) =
            build_dataset(&seqs, &norms, &emb, &DatasetConfig::default(), 7, Execution::Sequential);
        assert_eq!(again, pairs);
    }

    #[test]
    fn unavailable_last_animal_is_reported() {
        let (norms, mut emb) = fixture();
        emb.animals.remove("cat");
        let seqs = vec![labeled("a", &["dog", "cat", "octopus"], &norms)];
        let (pairs, report) =
            build_dataset(&seqs, &norms, &emb, &DatasetConfig::default(), 1, Execution::default());
        // the switch from cat has no anchor vector; neutral pairs survive
        assert!(report.skipped.iter().any(|s| s.reason.contains("no embedding")));
        assert!(pairs.iter().any(|p| p.condition == PromptCondition::Neutral));
    }

    proptest! {
        #[test]
        fn prompt_round_trip(items in proptest::collection::vec("[a-z]{1,8}( [a-z]{1,8})?", 1..6), c in 0usize..3) {
            let cond = PromptCondition::ALL[c];
            let p = render_prompt(cond, &items).unwrap();
            prop_assert_eq!(parse_prompt(&p), Some((cond, items)));
        }
    }
}
