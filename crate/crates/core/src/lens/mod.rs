// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens analysis of residual-stream dumps.
//!
//! Each transition event (the context ending with the comma after item `t`,
//! predicting item `t + 1`) is decoded at every layer through the model's
//! final norm and unembedding. The resulting next-token distribution is
//! summarized over three token sets: first tokens of animals that would
//! continue the current category (*within*), those that would leave it
//! (*between*), and the first token of the animal that actually came next.

pub mod dump;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::norms::CategoryNorms;
use crate::par::Execution;
use crate::seqstats::{self, StatsError};
use crate::SCHEMA_VERSION;

pub use dump::{read_dump, DumpError, DumpWriter, Tensor, TensorDump, TensorInfo};

/// Default alignment window around a switch, inclusive.
pub const DEFAULT_WINDOW: (i32, i32) = (-3, 2);
/// Default "late layer" cut-off; layers strictly above it are summarized.
pub const DEFAULT_LAYER_THRESHOLD: usize = 39;

#[derive(Debug, thiserror::Error)]
pub enum LensError {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("vector has length {found}, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("norm_eps must be positive, got {0}")]
    BadEps(f64),
    #[error("animal {0:?} is not in the category norms")]
    UnknownAnimal(String),
    #[error("no first-token id for animal {0:?}")]
    MissingFirstToken(String),
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("no switch events to align on")]
    NoSwitchEvents,
    #[error("window ({0}, {1}) must satisfy lo < 0 <= hi")]
    BadWindow(i32, i32),
    #[error("event {event} has {found} layers, expected {expected}")]
    LayerCountMismatch {
        event: usize,
        expected: usize,
        found: usize,
    },
    #[error("layer threshold {threshold} must be below the layer count {n_layers}")]
    BadThreshold { threshold: usize, n_layers: usize },
    #[error("no events supplied")]
    NoEvents,
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Layer,
}

/// Metadata for one captured transition event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMeta {
    pub sequence_id: String,
    /// Transition index `t`: the context ends after item `t`, target is item `t + 1`.
    pub position: usize,
    pub is_switch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

/// Sidecar JSON describing a dump: model shape, tokenizer map and events.
///
/// Event `i` owns tensors `resid.{i}.{layer}` for `layer` in `0..=n_layers`
/// and optionally `final_dist.{i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub model_tag: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    #[serde(default)]
    pub first_token_ids: BTreeMap<String, u32>,
    pub events: Vec<EventMeta>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, LensError> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| LensError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), LensError> {
        if self.d_model == 0 || self.vocab_size == 0 {
            return Err(LensError::Manifest("d_model and vocab_size must be positive".into()));
        }
        if self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(LensError::BadEps(self.norm_eps));
        }
        if let Some((animal, id)) = self
            .first_token_ids
            .iter()
            .find(|(_, &id)| id as usize >= self.vocab_size)
        {
            return Err(LensError::Manifest(format!(
                "first token {id} of {animal:?} is outside the vocabulary"
            )));
        }
        Ok(())
    }

    pub fn resid_name(event: usize, layer: usize) -> String {
        format!("resid.{event}.{layer}")
    }

    pub fn final_dist_name(event: usize) -> String {
        format!("final_dist.{event}")
    }

    /// Residual vectors of one event, layers `0..=n_layers`.
    pub fn read_residuals(&self, dump: &TensorDump, event: usize) -> Result<Vec<Vec<f32>>, LensError> {
        (0..=self.n_layers)
            .map(|l| {
                dump.read_shaped(&Self::resid_name(event, l), &[self.d_model])
                    .map_err(LensError::from)
            })
            .collect()
    }

    /// Check that every event has its full residual stack.
    pub fn check_dump(&self, dump: &TensorDump) -> Result<(), LensError> {
        for e in 0..self.events.len() {
            for l in 0..=self.n_layers {
                let name = Self::resid_name(e, l);
                let info = dump.info(&name)?;
                if info.shape != [self.d_model] {
                    return Err(DumpError::ShapeMismatch {
                        name,
                        expected: vec![self.d_model],
                        found: info.shape.clone(),
                    }
                    .into());
                }
            }
        }
        Ok(())
    }
}

/// Final normalization and unembedding of a causal language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    /// Row-major `[d_model, vocab_size]`.
    pub unembed: Vec<f32>,
    pub final_norm_weight: Vec<f32>,
    /// Only used by [`NormKind::Layer`].
    pub final_norm_bias: Option<Vec<f32>>,
    pub norm_eps: f64,
    pub norm_kind: NormKind,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl ModelHead {
    pub fn new(
        unembed: Vec<f32>,
        final_norm_weight: Vec<f32>,
        norm_kind: NormKind,
        norm_eps: f64,
    ) -> Result<Self, LensError> {
        let d_model = final_norm_weight.len();
        if d_model == 0 || !unembed.len().is_multiple_of(d_model) || unembed.is_empty() {
            return Err(LensError::ShapeMismatch {
                expected: d_model,
                found: unembed.len(),
            });
        }
        if norm_eps.is_nan() || norm_eps <= 0.0 {
            return Err(LensError::BadEps(norm_eps));
        }
        Ok(Self {
            vocab_size: unembed.len() / d_model,
            unembed,
            final_norm_weight,
            final_norm_bias: None,
            norm_eps,
            norm_kind,
            d_model,
        })
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self, LensError> {
        if bias.len() != self.d_model {
            return Err(LensError::ShapeMismatch {
                expected: self.d_model,
                found: bias.len(),
            });
        }
        self.final_norm_bias = Some(bias);
        Ok(self)
    }

    /// Load `unembed`, `final_norm_weight` and optional `final_norm_bias`
    /// from a head dump, with shapes taken from the manifest.
    pub fn from_dump(dump: &TensorDump, manifest: &Manifest) -> Result<Self, LensError> {
        let unembed = dump.read_shaped("unembed", &[manifest.d_model, manifest.vocab_size])?;
        let weight = dump.read_shaped("final_norm_weight", &[manifest.d_model])?;
        let head = Self::new(unembed, weight, manifest.norm_kind, manifest.norm_eps)?;
        if dump.contains("final_norm_bias") {
            head.with_bias(dump.read_shaped("final_norm_bias", &[manifest.d_model])?)
        } else {
            Ok(head)
        }
    }

    fn normalize(&self, h: &[f32]) -> Vec<f64> {
        let d = h.len() as f64;
        let eps = self.norm_eps;
        let centred: Vec<f64> = match self.norm_kind {
            NormKind::Rms => h.iter().map(|&v| v as f64).collect(),
            NormKind::Layer => {
                let m = h.iter().map(|&v| v as f64).sum::<f64>() / d;
                h.iter().map(|&v| v as f64 - m).collect()
            }
        };
        let scale = 1.0 / (centred.iter().map(|v| v * v).sum::<f64>() / d + eps).sqrt();
        centred
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut out = v * scale * self.final_norm_weight[i] as f64;
                if let (NormKind::Layer, Some(b)) = (self.norm_kind, &self.final_norm_bias) {
                    out += b[i] as f64;
                }
                out
            })
            .collect()
    }
}

/// Next-token distribution obtained by decoding `h` through `head`.
pub fn logitlens(h: &[f32], head: &ModelHead) -> Result<Vec<f64>, LensError> {
    if h.len() != head.d_model {
        return Err(LensError::ShapeMismatch {
            expected: head.d_model,
            found: h.len(),
        });
    }
    let normed = head.normalize(h);
    let v = head.vocab_size;
    let mut logits = vec![0.0f64; v];
    for (i, &x) in normed.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &head.unembed[i * v..(i + 1) * v];
        for (l, &u) in logits.iter_mut().zip(row) {
            *l += x * u as f64;
        }
    }
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Within-/between-category first-token sets for one context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSetPartition {
    pub within: BTreeSet<u32>,
    pub between: BTreeSet<u32>,
    /// First token of the animal that actually came next.
    pub actual: u32,
    /// Tokens shared by a within-animal and a between-animal.
    pub excluded_ambiguous: BTreeSet<u32>,
}

/// Partition the first tokens of all not-yet-produced norm animals by
/// whether the animal shares a category with `prev_animal`.
pub fn partition_vocab(
    prev_animal: &str,
    next_animal: &str,
    produced: &BTreeSet<String>,
    norms: &CategoryNorms,
    first_token: &BTreeMap<String, u32>,
) -> Result<TokenSetPartition, LensError> {
    if !norms.contains(prev_animal) {
        return Err(LensError::UnknownAnimal(prev_animal.to_string()));
    }
    let token_of = |a: &str| {
        first_token
            .get(a)
            .copied()
            .ok_or_else(|| LensError::MissingFirstToken(a.to_string()))
    };
    let actual = token_of(next_animal)?;
    let mut within = BTreeSet::new();
    let mut between = BTreeSet::new();
    for animal in norms.animals().filter(|a| !produced.contains(*a)) {
        let tok = token_of(animal)?;
        if norms.share_category(prev_animal, animal) == Some(true) {
            within.insert(tok);
        } else {
            between.insert(tok);
        }
    }
    let excluded_ambiguous: BTreeSet<u32> = within.intersection(&between).copied().collect();
    within.retain(|t| !excluded_ambiguous.contains(t));
    between.retain(|t| !excluded_ambiguous.contains(t));
    Ok(TokenSetPartition {
        within,
        between,
        actual,
        excluded_ambiguous,
    })
}

/// Mean probability over each token set plus the actual token's probability.
/// An empty set yields `None` rather than a value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetProbabilities {
    pub within: Option<f64>,
    pub between: Option<f64>,
    pub actual: f64,
}

impl SetProbabilities {
    pub fn get(&self, kind: SeriesKind) -> Option<f64> {
        match kind {
            SeriesKind::Within => self.within,
            SeriesKind::Between => self.between,
            SeriesKind::Actual => Some(self.actual),
        }
    }
}

pub fn set_probability(dist: &[f64], part: &TokenSetPartition) -> Result<SetProbabilities, LensError> {
    let lookup = |t: u32| {
        dist.get(t as usize)
            .copied()
            .ok_or(LensError::TokenOutOfRange(t))
    };
    let set_mean = |s: &BTreeSet<u32>| -> Result<Option<f64>, LensError> {
        if s.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for &t in s {
            total += lookup(t)?;
        }
        Ok(Some(total / s.len() as f64))
    };
    Ok(SetProbabilities {
        within: set_mean(&part.within)?,
        between: set_mean(&part.between)?,
        actual: lookup(part.actual)?,
    })
}

/// Build each event's partition from its labeled sequence.
pub fn event_partition(
    items: &[String],
    position: usize,
    norms: &CategoryNorms,
    first_token: &BTreeMap<String, u32>,
) -> Result<TokenSetPartition, LensError> {
    if position + 1 >= items.len() {
        return Err(LensError::Manifest(format!(
            "position {position} has no next item in a sequence of {}",
            items.len()
        )));
    }
    let produced: BTreeSet<String> = items[..=position].iter().cloned().collect();
    partition_vocab(&items[position], &items[position + 1], &produced, norms, first_token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Within,
    Between,
    Actual,
}

impl SeriesKind {
    pub const ALL: [SeriesKind; 3] = [SeriesKind::Within, SeriesKind::Between, SeriesKind::Actual];

    pub fn as_str(self) -> &'static str {
        match self {
            SeriesKind::Within => "within",
            SeriesKind::Between => "between",
            SeriesKind::Actual => "actual",
        }
    }
}

/// Set probabilities of one transition position in one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub sequence_id: String,
    pub position: usize,
    pub is_switch: bool,
    pub probs: SetProbabilities,
}

/// Per-switch-event values at each relative position, after per-sequence
/// z-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEvents {
    pub series_kind: SeriesKind,
    pub relative_positions: Vec<i32>,
    /// One row per switch event; `None` where the window leaves the sequence.
    pub values: Vec<Vec<Option<f64>>>,
    pub skipped_sequences: Vec<String>,
}

impl AlignedEvents {
    pub fn column(&self, rel: i32) -> Option<usize> {
        self.relative_positions.iter().position(|&r| r == rel)
    }

    /// Pairs of values at two relative positions, for events with both.
    pub fn paired(&self, a: i32, b: i32) -> (Vec<f64>, Vec<f64>) {
        let (Some(ia), Some(ib)) = (self.column(a), self.column(b)) else {
            return (vec![], vec![]);
        };
        self.values
            .iter()
            .filter_map(|row| Some((row[ia]?, row[ib]?)))
            .unzip()
    }

    pub fn curve(&self) -> AlignedCurve {
        let k = self.relative_positions.len();
        let mut mean = Vec::with_capacity(k);
        let mut sem = Vec::with_capacity(k);
        let mut n_events = Vec::with_capacity(k);
        for col in 0..k {
            let vals: Vec<f64> = self.values.iter().filter_map(|r| r[col]).collect();
            n_events.push(vals.len());
            mean.push((!vals.is_empty()).then(|| seqstats::mean(&vals)));
            sem.push(
                (vals.len() >= 2)
                    .then(|| seqstats::sample_sd(&vals) / (vals.len() as f64).sqrt()),
            );
        }
        AlignedCurve {
            series_kind: self.series_kind,
            relative_positions: self.relative_positions.clone(),
            mean,
            sem,
            n_events,
            skipped_sequences: self.skipped_sequences.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedCurve {
    pub series_kind: SeriesKind,
    pub relative_positions: Vec<i32>,
    pub mean: Vec<Option<f64>>,
    pub sem: Vec<Option<f64>>,
    pub n_events: Vec<usize>,
    pub skipped_sequences: Vec<String>,
}

impl AlignedCurve {
    pub fn argmax(&self) -> Option<i32> {
        self.arg_by(|a, b| a > b)
    }

    pub fn argmin(&self) -> Option<i32> {
        self.arg_by(|a, b| a < b)
    }

    fn arg_by(&self, better: impl Fn(f64, f64) -> bool) -> Option<i32> {
        let mut best: Option<(i32, f64)> = None;
        for (&rel, m) in self.relative_positions.iter().zip(&self.mean) {
            if let Some(v) = *m {
                if best.is_none_or(|(_, b)| better(v, b)) {
                    best = Some((rel, v));
                }
            }
        }
        best.map(|(r, _)| r)
    }
}

/// Z-score each sequence's series over all its positions, then collect the
/// values at `t + lo ..= t + hi` around every switch event `t`.
///
/// Sequences whose series has fewer than two defined values or zero
/// variance are skipped and listed.
pub fn align_events(
    points: &[SeriesPoint],
    window: (i32, i32),
    kind: SeriesKind,
) -> Result<AlignedEvents, LensError> {
    let (lo, hi) = window;
    if !(lo < 0 && hi >= 0) {
        return Err(LensError::BadWindow(lo, hi));
    }
    let mut by_seq: BTreeMap<&str, Vec<&SeriesPoint>> = BTreeMap::new();
    for p in points {
        by_seq.entry(p.sequence_id.as_str()).or_default().push(p);
    }
    if !points.iter().any(|p| p.is_switch) {
        return Err(LensError::NoSwitchEvents);
    }
    let relative_positions: Vec<i32> = (lo..=hi).collect();
    let mut values = Vec::new();
    let mut skipped_sequences = Vec::new();
    for (seq_id, pts) in by_seq {
        let defined: Vec<(usize, f64)> = pts
            .iter()
            .filter_map(|p| p.probs.get(kind).map(|v| (p.position, v)))
            .collect();
        let raw: Vec<f64> = defined.iter().map(|d| d.1).collect();
        let z = match seqstats::zscore(&raw) {
            Ok(z) => z,
            Err(StatsError::ZeroVariance | StatsError::TooFew { .. }) => {
                skipped_sequences.push(seq_id.to_string());
                continue;
            }
            Err(e) => return Err(LensError::Manifest(format!("sequence {seq_id:?}: {e}"))),
        };
        let z_at: BTreeMap<usize, f64> = defined.iter().map(|d| d.0).zip(z).collect();
        let mut switches: Vec<usize> = pts.iter().filter(|p| p.is_switch).map(|p| p.position).collect();
        switches.sort_unstable();
        switches.dedup();
        for t in switches {
            let row = relative_positions
                .iter()
                .map(|&r| {
                    let pos = t as i64 + r as i64;
                    if pos < 0 {
                        None
                    } else {
                        z_at.get(&(pos as usize)).copied()
                    }
                })
                .collect();
            values.push(row);
        }
    }
    Ok(AlignedEvents {
        series_kind: kind,
        relative_positions,
        values,
        skipped_sequences,
    })
}

/// Switch-aligned mean z-scored curve with SEM and per-position counts.
pub fn align_on_switch(
    points: &[SeriesPoint],
    window: (i32, i32),
    kind: SeriesKind,
) -> Result<AlignedCurve, LensError> {
    Ok(align_events(points, window, kind)?.curve())
}

/// Set probabilities at every layer for one event.
pub fn event_layer_probs(
    residuals: &[Vec<f32>],
    head: &ModelHead,
    part: &TokenSetPartition,
) -> Result<Vec<SetProbabilities>, LensError> {
    residuals
        .iter()
        .map(|h| set_probability(&logitlens(h, head)?, part))
        .collect()
}

/// One event's per-layer set probabilities with its switch label.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLayerValues {
    pub is_switch: bool,
    pub layers: Vec<SetProbabilities>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    Switch,
    NonSwitch,
}

impl EventClass {
    pub fn of(is_switch: bool) -> Self {
        if is_switch {
            EventClass::Switch
        } else {
            EventClass::NonSwitch
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::Switch => "switch",
            EventClass::NonSwitch => "non_switch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurveRow {
    pub layer: usize,
    pub series: SeriesKind,
    pub class: EventClass,
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    pub n: usize,
}

/// Per-layer mean set probabilities, split by switch class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurves {
    /// Number of residual positions, i.e. transformer layers + 1.
    pub n_residuals: usize,
    pub rows: Vec<LayerCurveRow>,
}

impl LayerCurves {
    pub fn get(&self, layer: usize, series: SeriesKind, class: EventClass) -> Option<&LayerCurveRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.series == series && r.class == class)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,series,class,mean,sem,n\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer,
                r.series.as_str(),
                r.class.as_str(),
                fmt_opt(r.mean),
                fmt_opt(r.sem),
                r.n
            ));
        }
        out
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Aggregate per-event layer values into switch / non-switch mean curves.
pub fn layer_curves_from_values(values: &[EventLayerValues]) -> Result<LayerCurves, LensError> {
    let first = values.first().ok_or(LensError::NoEvents)?;
    let n_residuals = first.layers.len();
    for (i, v) in values.iter().enumerate() {
        if v.layers.len() != n_residuals {
            return Err(LensError::LayerCountMismatch {
                event: i,
                expected: n_residuals,
                found: v.layers.len(),
            });
        }
    }
    let mut rows = Vec::with_capacity(n_residuals * 6);
    for layer in 0..n_residuals {
        for series in SeriesKind::ALL {
            for class in [EventClass::Switch, EventClass::NonSwitch] {
                let vals: Vec<f64> = values
                    .iter()
                    .filter(|v| EventClass::of(v.is_switch) == class)
                    .filter_map(|v| v.layers[layer].get(series))
                    .collect();
                rows.push(LayerCurveRow {
                    layer,
                    series,
                    class,
                    mean: (!vals.is_empty()).then(|| seqstats::mean(&vals)),
                    sem: (vals.len() >= 2)
                        .then(|| seqstats::sample_sd(&vals) / (vals.len() as f64).sqrt()),
                    n: vals.len(),
                });
            }
        }
    }
    Ok(LayerCurves { n_residuals, rows })
}

/// An event with its residual stack and token-set partition, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LensEvent {
    pub meta: EventMeta,
    pub residuals: Vec<Vec<f32>>,
    pub partition: TokenSetPartition,
}

/// Logit-lens every layer of every event and aggregate by switch class.
pub fn layer_curves(
    events: &[LensEvent],
    head: &ModelHead,
    exec: Execution,
) -> Result<(LayerCurves, Vec<EventLayerValues>), LensError> {
    let first = events.first().ok_or(LensError::NoEvents)?;
    let expected = first.residuals.len();
    if let Some((i, e)) = events
        .iter()
        .enumerate()
        .find(|(_, e)| e.residuals.len() != expected)
    {
        return Err(LensError::LayerCountMismatch {
            event: i,
            expected,
            found: e.residuals.len(),
        });
    }
    let values = exec
        .map_slice(events, |e| {
            Ok(EventLayerValues {
                is_switch: e.meta.is_switch,
                layers: event_layer_probs(&e.residuals, head, &e.partition)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, LensError>>()?;
    Ok((layer_curves_from_values(&values)?, values))
}

/// Mean within/between probability over layers above the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateLayerSummary {
    pub layer_threshold: usize,
    pub switch_within: Option<f64>,
    pub switch_between: Option<f64>,
    pub non_switch_within: Option<f64>,
    pub non_switch_between: Option<f64>,
}

impl LateLayerSummary {
    pub fn get(&self, class: EventClass, series: SeriesKind) -> Option<f64> {
        match (class, series) {
            (EventClass::Switch, SeriesKind::Within) => self.switch_within,
            (EventClass::Switch, SeriesKind::Between) => self.switch_between,
            (EventClass::NonSwitch, SeriesKind::Within) => self.non_switch_within,
            (EventClass::NonSwitch, SeriesKind::Between) => self.non_switch_between,
            (_, SeriesKind::Actual) => None,
        }
    }
}

fn check_threshold(n_residuals: usize, threshold: usize) -> Result<(), LensError> {
    // residual index 0 is the embedding output; the last index equals the layer count
    let n_layers = n_residuals.saturating_sub(1);
    if threshold >= n_layers {
        return Err(LensError::BadThreshold {
            threshold,
            n_layers,
        });
    }
    Ok(())
}

/// Average the per-layer curve means over layers strictly above `threshold`.
pub fn late_layer_summary(curves: &LayerCurves, threshold: usize) -> Result<LateLayerSummary, LensError> {
    check_threshold(curves.n_residuals, threshold)?;
    let cell = |class, series| {
        let vals: Vec<f64> = (threshold + 1..curves.n_residuals)
            .filter_map(|l| curves.get(l, series, class).and_then(|r| r.mean))
            .collect();
        (!vals.is_empty()).then(|| seqstats::mean(&vals))
    };
    Ok(LateLayerSummary {
        layer_threshold: threshold,
        switch_within: cell(EventClass::Switch, SeriesKind::Within),
        switch_between: cell(EventClass::Switch, SeriesKind::Between),
        non_switch_within: cell(EventClass::NonSwitch, SeriesKind::Within),
        non_switch_between: cell(EventClass::NonSwitch, SeriesKind::Between),
    })
}

/// Per-event late-layer mean of one series, for between-class tests.
pub fn late_layer_event_means(
    values: &[EventLayerValues],
    threshold: usize,
    series: SeriesKind,
) -> Result<(Vec<f64>, Vec<f64>), LensError> {
    let n_residuals = values.first().ok_or(LensError::NoEvents)?.layers.len();
    check_threshold(n_residuals, threshold)?;
    let mut switch = Vec::new();
    let mut non_switch = Vec::new();
    for v in values {
        let vals: Vec<f64> = v.layers[threshold + 1..]
            .iter()
            .filter_map(|p| p.get(series))
            .collect();
        if vals.is_empty() {
            continue;
        }
        let m = seqstats::mean(&vals);
        if v.is_switch {
            switch.push(m);
        } else {
            non_switch.push(m);
        }
    }
    Ok((switch, non_switch))
}
