// SPDX-License-Identifier: MIT OR Apache-2.0

//! Category norms, fluency-sequence ingestion and switch labeling.
//!
//! A transition between two consecutive animals is a *switch* when their
//! category sets are disjoint and a *cluster* (non-switch) step otherwise.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SCHEMA_VERSION;

/// Default number of items kept per sequence.
pub const DEFAULT_TRUNCATE_LEN: usize = 35;

#[derive(Debug, thiserror::Error)]
pub enum NormsError {
    #[error("i/o error reading norms {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("norms line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("norms file is empty")]
    Empty,
    #[error("norms header must be `category,animal`, found `{0}`")]
    Header(String),
    #[error("raw names {first:?} and {second:?} both canonicalize to {canonical:?} with different categories")]
    Conflict {
        canonical: String,
        first: String,
        second: String,
    },
    #[error("truncate_len must be at least 2, got {0}")]
    TruncateLen(usize),
    #[error("switch ratio is undefined for sequence {0:?} with fewer than two items")]
    TooShortForRatio(String),
}

/// Canonical form of an animal name: lowercase, ASCII punctuation removed
/// except hyphens inside a word, whitespace runs collapsed to one space.
pub fn canonicalize(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut words = Vec::new();
    for word in lowered.split_whitespace() {
        let kept: String = word
            .chars()
            .filter(|c| *c == '-' || !c.is_ascii_punctuation())
            .collect();
        let trimmed = kept.trim_matches('-');
        if !trimmed.is_empty() {
            words.push(trimmed.to_string());
        }
    }
    words.join(" ")
}

/// Mapping from canonical animal name to its category labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryNorms {
    categories: Vec<String>,
    // sorted, deduplicated category indices
    entries: BTreeMap<String, Vec<usize>>,
}

impl CategoryNorms {
    /// Build from `(category, raw animal)` memberships in file order.
    ///
    /// Distinct raw spellings that collapse to the same canonical name must
    /// carry identical category sets.
    pub fn from_memberships<'a, I>(memberships: I) -> Result<Self, NormsError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut categories: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        // raw (trimmed) spelling -> category set, in first-appearance order
        let mut raw_sets: Vec<(String, BTreeSet<usize>)> = Vec::new();
        let mut raw_pos: BTreeMap<String, usize> = BTreeMap::new();

        for (line, (category, animal)) in memberships.into_iter().enumerate() {
            let category = category.trim();
            let animal = animal.trim();
            let line = line as u64 + 2;
            if category.is_empty() {
                return Err(NormsError::Parse {
                    line,
                    message: "empty category label".into(),
                });
            }
            if canonicalize(animal).is_empty() {
                return Err(NormsError::Parse {
                    line,
                    message: format!("animal name {animal:?} is empty after canonicalization"),
                });
            }
            let ci = *index.entry(category.to_string()).or_insert_with(|| {
                categories.push(category.to_string());
                categories.len() - 1
            });
            let slot = *raw_pos.entry(animal.to_string()).or_insert_with(|| {
                raw_sets.push((animal.to_string(), BTreeSet::new()));
                raw_sets.len() - 1
            });
            raw_sets[slot].1.insert(ci);
        }
        if raw_sets.is_empty() {
            return Err(NormsError::Empty);
        }

        let mut entries: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut origin: BTreeMap<String, String> = BTreeMap::new();
        for (raw, set) in raw_sets {
            let canonical = canonicalize(&raw);
            let cats: Vec<usize> = set.into_iter().collect();
            match entries.get(&canonical) {
                Some(existing) if *existing != cats => {
                    return Err(NormsError::Conflict {
                        canonical,
                        first: origin[&canonicalize(&raw)].clone(),
                        second: raw,
                    });
                }
                Some(_) => {}
                None => {
                    origin.insert(canonical.clone(), raw);
                    entries.insert(canonical, cats);
                }
            }
        }
        Ok(Self {
            categories,
            entries,
        })
    }

    /// Parse a UTF-8 CSV with header `category,animal`.
    pub fn parse_csv(text: &str) -> Result<Self, NormsError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(csv_err)?.clone();
        if headers.is_empty() && text.trim().is_empty() {
            return Err(NormsError::Empty);
        }
        let header: Vec<&str> = headers.iter().map(str::trim).collect();
        if header != ["category", "animal"] {
            return Err(NormsError::Header(header.join(",")));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            rows.push((rec[0].to_string(), rec[1].to_string()));
        }
        Self::from_memberships(rows.iter().map(|(c, a)| (c.as_str(), a.as_str())))
    }

    /// Read and parse a norms CSV file.
    pub fn parse_file(path: &Path) -> Result<Self, NormsError> {
        let text = std::fs::read_to_string(path).map_err(|source| NormsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_csv(&text)
    }

    /// Category labels in first-appearance order; position is the matrix index.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn n_animals(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, animal: &str) -> bool {
        self.entries.contains_key(animal)
    }

    /// Sorted category indices of a canonical animal.
    pub fn category_ids(&self, animal: &str) -> Option<&[usize]> {
        self.entries.get(animal).map(Vec::as_slice)
    }

    pub fn category_labels(&self, animal: &str) -> Option<Vec<String>> {
        self.category_ids(animal)
            .map(|ids| ids.iter().map(|&i| self.categories[i].clone()).collect())
    }

    /// Canonical animal names in lexicographic order.
    pub fn animals(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// True when both animals are known and share at least one category.
    pub fn share_category(&self, a: &str, b: &str) -> Option<bool> {
        Some(sorted_intersects(self.category_ids(a)?, self.category_ids(b)?))
    }
}

fn csv_err(e: csv::Error) -> NormsError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    NormsError::Parse {
        line,
        message: e.to_string(),
    }
}

pub(crate) fn sorted_intersects(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Human,
    Model,
}

/// A fluency sequence as produced, before any validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSequence {
    pub id: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_tag: Option<String>,
    pub items: Vec<String>,
}

/// A validated, truncated sequence with per-transition switch labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub id: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_tag: Option<String>,
    pub items: Vec<String>,
    pub category_sets: Vec<Vec<String>>,
    pub switch_flags: Vec<bool>,
    pub switch_ratio: f64,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl LabeledSequence {
    /// Label already-canonical items against `norms`.
    ///
    /// Returns `None` if any item is unknown to the norms.
    pub fn label(
        id: impl Into<String>,
        source: Source,
        model_tag: Option<String>,
        items: Vec<String>,
        norms: &CategoryNorms,
    ) -> Result<Option<Self>, NormsError> {
        let id = id.into();
        let mut ids = Vec::with_capacity(items.len());
        for item in &items {
            match norms.category_ids(item) {
                Some(c) => ids.push(c),
                None => return Ok(None),
            }
        }
        let switch_flags: Vec<bool> = ids
            .windows(2)
            .map(|w| !sorted_intersects(w[0], w[1]))
            .collect();
        if switch_flags.is_empty() {
            return Err(NormsError::TooShortForRatio(id));
        }
        let switch_ratio =
            switch_flags.iter().filter(|&&f| f).count() as f64 / switch_flags.len() as f64;
        let category_sets = ids
            .iter()
            .map(|c| c.iter().map(|&i| norms.categories[i].clone()).collect())
            .collect();
        Ok(Some(Self {
            schema_version: SCHEMA_VERSION,
            id,
            source,
            model_tag,
            items,
            category_sets,
            switch_flags,
            switch_ratio,
        }))
    }

    pub fn to_raw(&self) -> RawSequence {
        RawSequence {
            id: self.id.clone(),
            source: self.source,
            model_tag: self.model_tag.clone(),
            items: self.items.clone(),
        }
    }

    pub fn n_transitions(&self) -> usize {
        self.switch_flags.len()
    }
}

/// Why a sequence was dropped by [`validate_and_filter`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DiscardReason {
    TooShort { len: usize },
    InvalidItem { index: usize, item: String },
    Repeat { index: usize, item: String },
}

impl std::fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiscardReason::TooShort { len } => write!(f, "too short ({len} items)"),
            DiscardReason::InvalidItem { index, item } => {
                write!(f, "invalid item {item:?} at position {index}")
            }
            DiscardReason::Repeat { index, item } => {
                write!(f, "repeated item {item:?} at position {index}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disposition {
    pub id: String,
    pub kept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none", flatten)]
    pub discard: Option<DiscardReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub schema_version: u32,
    pub truncate_len: usize,
    pub n_input: usize,
    pub n_kept: usize,
    pub n_discarded: usize,
    pub dispositions: Vec<Disposition>,
}

/// Truncate each sequence to `truncate_len`, then validate the prefix.
///
/// A sequence is discarded when it is shorter than `truncate_len`, or when
/// its prefix contains an item absent from `norms` or a repeated item.
pub fn validate_and_filter(
    seqs: &[RawSequence],
    norms: &CategoryNorms,
    truncate_len: usize,
) -> Result<(Vec<LabeledSequence>, FilterReport), NormsError> {
    if truncate_len < 2 {
        return Err(NormsError::TruncateLen(truncate_len));
    }
    let mut kept = Vec::new();
    let mut dispositions = Vec::with_capacity(seqs.len());
    for seq in seqs {
        match check_prefix(seq, norms, truncate_len) {
            Ok(items) => {
                let labeled = LabeledSequence::label(
                    seq.id.clone(),
                    seq.source,
                    seq.model_tag.clone(),
                    items,
                    norms,
                )?
                .expect("prefix items were checked against the norms");
                kept.push(labeled);
                dispositions.push(Disposition {
                    id: seq.id.clone(),
                    kept: true,
                    discard: None,
                });
            }
            Err(reason) => dispositions.push(Disposition {
                id: seq.id.clone(),
                kept: false,
                discard: Some(reason),
            }),
        }
    }
    let report = FilterReport {
        schema_version: SCHEMA_VERSION,
        truncate_len,
        n_input: seqs.len(),
        n_kept: kept.len(),
        n_discarded: seqs.len() - kept.len(),
        dispositions,
    };
    Ok((kept, report))
}

fn check_prefix(
    seq: &RawSequence,
    norms: &CategoryNorms,
    truncate_len: usize,
) -> Result<Vec<String>, DiscardReason> {
    if seq.items.len() < truncate_len {
        return Err(DiscardReason::TooShort {
            len: seq.items.len(),
        });
    }
    let mut seen = HashSet::with_capacity(truncate_len);
    let mut items = Vec::with_capacity(truncate_len);
    for (index, raw) in seq.items[..truncate_len].iter().enumerate() {
        let item = canonicalize(raw);
        if !norms.contains(&item) {
            return Err(DiscardReason::InvalidItem {
                index,
                item: raw.clone(),
            });
        }
        if !seen.insert(item.clone()) {
            return Err(DiscardReason::Repeat { index, item });
        }
        items.push(item);
    }
    Ok(items)
}

/// Split a model's free-text continuation into list items.
///
/// Lines are consumed while the list continues, i.e. while the previous
/// non-empty line ended with a comma. A blank line or a line without a
/// trailing comma ends the list; anything after it is ignored.
pub fn parse_generation(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut started = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if started {
                break;
            }
            continue;
        }
        started = true;
        items.extend(
            line.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string),
        );
        if !line.ends_with(',') {
            break;
        }
    }
    items
}
