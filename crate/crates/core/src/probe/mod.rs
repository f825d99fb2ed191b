// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes for switch vs non-switch events.
//!
//! Each probe is PCA fitted on the training split, column standardization
//! of the PCA scores, then logistic regression; it is scored by AUROC on a
//! held-out split of whole sequences.

pub mod logreg;
pub mod pca;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::PromptCondition;
use crate::lens::{
    fmt_opt, set_probability, DumpError, LensError, Manifest, SetProbabilities, TensorDump,
    TokenSetPartition,
};
use crate::par::Execution;
use crate::reference::ReferenceValues;
use crate::seqstats;
use crate::SCHEMA_VERSION;

pub use logreg::{logreg_fit, loss_and_grad, LogisticConfig, LogisticModel};
pub use pca::{pca_fit, pca_transform, PcaConfig, PcaModel};

/// Probabilities below this are clamped before taking logs.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("expected {expected} columns/rows, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("non-finite feature value")]
    NonFinite,
    #[error("zero total variance")]
    ZeroVariance,
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot split {0} groups so that both sides contain both classes")]
    ImpossibleStratification(usize),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Dump(#[from] DumpError),
}

/// Feature rows with binary labels (true = switch) and sequence groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
    pub groups: Vec<String>,
    pub layer: usize,
}

impl ProbeDataset {
    pub fn new(x: DMatrix<f64>, y: Vec<bool>, groups: Vec<String>, layer: usize) -> Result<Self, ProbeError> {
        if x.nrows() != y.len() || y.len() != groups.len() {
            return Err(ProbeError::ShapeMismatch {
                expected: x.nrows(),
                found: y.len().min(groups.len()),
            });
        }
        if y.len() < 4 {
            return Err(ProbeError::TooFewRows { need: 4, got: y.len() });
        }
        if !(y.iter().any(|&v| v) && y.iter().any(|&v| !v)) {
            return Err(ProbeError::SingleClass);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite);
        }
        Ok(Self { x, y, groups, layer })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<bool>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }
}

/// Area under the ROC curve, ties counted one half.
///
/// Computed from mid-ranks, which gives exactly
/// `(#{pos > neg} + 0.5 #{pos == neg}) / (n_pos n_neg)`.
pub fn auroc(scores: &[f64], y: &[bool]) -> Result<f64, ProbeError> {
    if scores.len() != y.len() {
        return Err(ProbeError::ShapeMismatch {
            expected: y.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ProbeError::NonFinite);
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ProbeError::SingleClass);
    }
    let ranks = seqstats::midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(y).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub train_groups: BTreeSet<String>,
    pub eval_groups: BTreeSet<String>,
}

const SPLIT_ATTEMPTS: u64 = 64;

/// Group-level stratified split: whole groups go to one side, roughly
/// `frac` of the groups to training, and both sides contain both classes.
///
/// Groups are stratified by whether they hold positives only, negatives
/// only, or both; each stratum is shuffled and allocated proportionally.
pub fn split_train_eval(groups: &[String], y: &[bool], frac: f64, seed: u64) -> Result<Split, ProbeError> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(ProbeError::Config(format!("split fraction {frac} must be in (0, 1)")));
    }
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g.as_str()).or_default().push(i);
    }
    let n_groups = members.len();
    if n_groups < 2 {
        return Err(ProbeError::ImpossibleStratification(n_groups));
    }
    let mut strata: [Vec<&str>; 3] = Default::default();
    for (g, idx) in &members {
        let pos = idx.iter().any(|&i| y[i]);
        let neg = idx.iter().any(|&i| !y[i]);
        let s = match (pos, neg) {
            (true, true) => 0,
            (true, false) => 1,
            _ => 2,
        };
        strata[s].push(g);
    }
    let n_eval = (((1.0 - frac) * n_groups as f64).round() as usize).clamp(1, n_groups - 1);
    let quotas = proportional_quotas(&strata.iter().map(Vec::len).collect::<Vec<_>>(), n_eval);

    for attempt in 0..SPLIT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let mut eval_groups = BTreeSet::new();
        for (stratum, &q) in strata.iter().zip(&quotas) {
            let mut s = stratum.clone();
            s.shuffle(&mut rng);
            eval_groups.extend(s.into_iter().take(q).map(str::to_string));
        }
        let mut split = Split {
            train: Vec::new(),
            eval: Vec::new(),
            train_groups: BTreeSet::new(),
            eval_groups: BTreeSet::new(),
        };
        for (g, idx) in &members {
            if eval_groups.contains(*g) {
                split.eval.extend(idx);
                split.eval_groups.insert(g.to_string());
            } else {
                split.train.extend(idx);
                split.train_groups.insert(g.to_string());
            }
        }
        split.train.sort_unstable();
        split.eval.sort_unstable();
        let both = |idx: &[usize]| idx.iter().any(|&i| y[i]) && idx.iter().any(|&i| !y[i]);
        if both(&split.train) && both(&split.eval) {
            return Ok(split);
        }
    }
    Err(ProbeError::ImpossibleStratification(n_groups))
}

/// Largest-remainder allocation of `total` across strata of the given sizes.
fn proportional_quotas(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut remaining = total - quotas.iter().sum::<usize>();
    for i in order {
        if remaining == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            remaining -= 1;
        }
    }
    quotas
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub frac: f64,
    /// Independent splits per cell; 1 is a single holdout.
    pub repeats: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { frac: 0.8, repeats: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub pca: PcaConfig,
    pub logreg: LogisticConfig,
    pub split: SplitConfig,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pca: PcaConfig::default(),
            logreg: LogisticConfig::default(),
            split: SplitConfig::default(),
            top_k: 3,
            seed: 0,
        }
    }
}

/// Deterministic child seed for a cell or repeat.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Outcome of one train/eval round.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutResult {
    pub auroc: f64,
    pub n_components: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub converged: bool,
}

/// Fit on the training rows and score the evaluation rows.
///
/// With `pca` set, PCA is fitted on the training rows only; scores are
/// standardized with training statistics before the logistic fit.
pub fn fit_and_score(
    ds: &ProbeDataset,
    split: &Split,
    pca: Option<&PcaConfig>,
    logreg: &LogisticConfig,
) -> Result<HoldoutResult, ProbeError> {
    let (x_train, y_train) = ds.rows(&split.train);
    let (x_eval, y_eval) = ds.rows(&split.eval);
    let (mut f_train, mut f_eval) = match pca {
        Some(cfg) => {
            let model = pca_fit(&x_train, cfg.variance_target, cfg.k_max)?;
            (model.transform(&x_train)?, model.transform(&x_eval)?)
        }
        None => (x_train, x_eval),
    };
    standardize(&mut f_train, &mut f_eval);
    let model = logreg_fit(&f_train, &y_train, logreg)?;
    Ok(HoldoutResult {
        auroc: auroc(&model.decision_function(&f_eval), &y_eval)?,
        n_components: f_train.ncols(),
        n_train: y_train.len(),
        n_eval: y_eval.len(),
        converged: model.converged,
    })
}

/// Scale columns by the training mean and SD; constant columns are only centred.
fn standardize(train: &mut DMatrix<f64>, eval: &mut DMatrix<f64>) {
    let n = train.nrows() as f64;
    for j in 0..train.ncols() {
        let m = train.column(j).sum() / n;
        let var = train.column(j).iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for mut col in [train.column_mut(j), eval.column_mut(j)] {
            col.apply(|v| *v = (*v - m) / sd);
        }
    }
}

/// Per-layer feature matrices for one (model, condition) probe input.
pub trait LayerSource: Sync {
    fn model_tag(&self) -> &str;
    fn condition(&self) -> PromptCondition;
    /// Number of residual positions (layers + 1).
    fn n_residuals(&self) -> usize;
    fn labels(&self) -> &[bool];
    fn groups(&self) -> &[String];
    fn layer_matrix(&self, layer: usize) -> Result<DMatrix<f64>, ProbeError>;
}

/// Layer matrices held in memory.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    pub model_tag: String,
    pub condition: PromptCondition,
    pub labels: Vec<bool>,
    pub groups: Vec<String>,
    pub layers: Vec<DMatrix<f64>>,
}

impl LayerSource for InMemorySource {
    fn model_tag(&self) -> &str {
        &self.model_tag
    }
    fn condition(&self) -> PromptCondition {
        self.condition
    }
    fn n_residuals(&self) -> usize {
        self.layers.len()
    }
    fn labels(&self) -> &[bool] {
        &self.labels
    }
    fn groups(&self) -> &[String] {
        &self.groups
    }
    fn layer_matrix(&self, layer: usize) -> Result<DMatrix<f64>, ProbeError> {
        Ok(self.layers[layer].clone())
    }
}

/// Layer matrices read lazily from an FLNS dump described by a manifest.
#[derive(Debug)]
pub struct DumpSource {
    pub condition: PromptCondition,
    pub manifest: Manifest,
    pub dump: TensorDump,
    labels: Vec<bool>,
    groups: Vec<String>,
}

impl DumpSource {
    pub fn new(manifest: Manifest, dump: TensorDump, condition: PromptCondition) -> Result<Self, ProbeError> {
        manifest.check_dump(&dump)?;
        let labels = manifest.events.iter().map(|e| e.is_switch).collect();
        let groups = manifest.events.iter().map(|e| e.sequence_id.clone()).collect();
        Ok(Self {
            condition,
            manifest,
            dump,
            labels,
            groups,
        })
    }
}

impl LayerSource for DumpSource {
    fn model_tag(&self) -> &str {
        &self.manifest.model_tag
    }
    fn condition(&self) -> PromptCondition {
        self.condition
    }
    fn n_residuals(&self) -> usize {
        self.manifest.n_layers + 1
    }
    fn labels(&self) -> &[bool] {
        &self.labels
    }
    fn groups(&self) -> &[String] {
        &self.groups
    }
    fn layer_matrix(&self, layer: usize) -> Result<DMatrix<f64>, ProbeError> {
        let d = self.manifest.d_model;
        let n = self.manifest.events.len();
        let mut x = DMatrix::zeros(n, d);
        for e in 0..n {
            let v = self
                .dump
                .read_shaped(&Manifest::resid_name(e, layer), &[d])?;
            for (j, val) in v.into_iter().enumerate() {
                x[(e, j)] = val as f64;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub model_tag: String,
    pub condition: PromptCondition,
    pub layer: usize,
    /// Mean eval AUROC over repeats; `None` when the cell failed.
    pub auroc: Option<f64>,
    pub auroc_sd: Option<f64>,
    pub repeat_aurocs: Vec<f64>,
    pub n_components: Option<usize>,
    pub n_train: Option<usize>,
    pub n_eval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKSummary {
    pub model_tag: String,
    pub condition: PromptCondition,
    pub k: usize,
    pub layers: Vec<usize>,
    pub mean_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    pub split_seed: u64,
    pub config: ProbeConfig,
    pub cells: Vec<ProbeCell>,
    pub top_k: Vec<TopKSummary>,
    pub reference: ReferenceValues,
}

impl ProbeReport {
    pub fn cell(&self, model_tag: &str, condition: PromptCondition, layer: usize) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.model_tag == model_tag && c.condition == condition && c.layer == layer)
    }

    /// Long-format `model_tag,condition,layer,auroc` table.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("model_tag,condition,layer,auroc\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.model_tag,
                c.condition.as_str(),
                c.layer,
                fmt_opt(c.auroc)
            ));
        }
        out
    }
}

/// Repeated holdout of one dataset; all repeats share nothing but the seed.
pub fn evaluate_repeats(
    ds: &ProbeDataset,
    pca: Option<&PcaConfig>,
    logreg: &LogisticConfig,
    split: &SplitConfig,
    seed: u64,
) -> Result<Vec<HoldoutResult>, ProbeError> {
    (0..split.repeats.max(1))
        .map(|r| {
            let s = split_train_eval(&ds.groups, &ds.y, split.frac, derive_seed(seed, r as u64))?;
            fit_and_score(ds, &s, pca, logreg)
        })
        .collect()
}

fn run_cell(source: &dyn LayerSource, layer: usize, config: &ProbeConfig, seed: u64) -> Result<Vec<HoldoutResult>, ProbeError> {
    let ds = ProbeDataset::new(
        source.layer_matrix(layer)?,
        source.labels().to_vec(),
        source.groups().to_vec(),
        layer,
    )?;
    evaluate_repeats(&ds, Some(&config.pca), &config.logreg, &config.split, seed)
}

/// Train an independent probe per (input, layer) cell and summarize the
/// best `top_k` layers of each input.
///
/// Splits are seeded per input, so every layer of an input is evaluated on
/// the same held-out sequences. Failed cells are recorded, not fatal.
pub fn train_layerwise(
    sources: &[&dyn LayerSource],
    config: &ProbeConfig,
    exec: Execution,
) -> Result<ProbeReport, ProbeError> {
    if config.top_k == 0 {
        return Err(ProbeError::Config("top_k must be positive".into()));
    }
    let tasks: Vec<(usize, usize)> = sources
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.n_residuals()).map(move |l| (i, l)))
        .collect();
    let cells = exec.map_slice(&tasks, |&(i, layer)| {
        let src = sources[i];
        let seed = derive_seed(config.seed, i as u64);
        let mut cell = ProbeCell {
            model_tag: src.model_tag().to_string(),
            condition: src.condition(),
            layer,
            auroc: None,
            auroc_sd: None,
            repeat_aurocs: vec![],
            n_components: None,
            n_train: None,
            n_eval: None,
            error: None,
        };
        match run_cell(src, layer, config, seed) {
            Ok(results) => {
                let a: Vec<f64> = results.iter().map(|r| r.auroc).collect();
                cell.auroc = Some(seqstats::mean(&a));
                cell.auroc_sd = (a.len() >= 2).then(|| seqstats::sample_sd(&a));
                cell.n_components = Some(results[0].n_components);
                cell.n_train = Some(results[0].n_train);
                cell.n_eval = Some(results[0].n_eval);
                cell.repeat_aurocs = a;
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        cell
    });

    let mut top_k = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let mut scored: Vec<(usize, f64)> = tasks
            .iter()
            .zip(&cells)
            .filter(|((si, _), _)| *si == i)
            .filter_map(|((_, l), c)| c.auroc.map(|a| (*l, a)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(config.top_k);
        let vals: Vec<f64> = scored.iter().map(|s| s.1).collect();
        top_k.push(TopKSummary {
            model_tag: src.model_tag().to_string(),
            condition: src.condition(),
            k: config.top_k,
            layers: scored.iter().map(|s| s.0).collect(),
            mean_auroc: (!vals.is_empty()).then(|| seqstats::mean(&vals)),
        });
    }
    Ok(ProbeReport {
        schema_version: SCHEMA_VERSION,
        split_seed: config.seed,
        config: *config,
        cells,
        top_k,
        reference: ReferenceValues::default(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    /// `[-ln p(actual), -ln mean p(within), -ln mean p(between)]`
    #[default]
    Full,
    /// `[-ln p(actual)]`
    ActualOnly,
}

/// One event's final-layer set probabilities with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NllEvent {
    pub sequence_id: String,
    pub is_switch: bool,
    pub probs: SetProbabilities,
}

impl NllEvent {
    /// Score `partition` against a final next-token distribution.
    pub fn from_dist(
        sequence_id: impl Into<String>,
        is_switch: bool,
        dist: &[f64],
        partition: &TokenSetPartition,
    ) -> Result<Self, ProbeError> {
        Ok(Self {
            sequence_id: sequence_id.into(),
            is_switch,
            probs: set_probability(dist, partition)?,
        })
    }
}

/// NLL features per event; also returns how many values were clamped at
/// [`NLL_FLOOR`] (including empty token sets).
pub fn nll_features(events: &[NllEvent], mode: NllMode) -> Result<(ProbeDataset, usize), ProbeError> {
    let width = match mode {
        NllMode::Full => 3,
        NllMode::ActualOnly => 1,
    };
    let mut clamped = 0;
    let mut nll = |p: Option<f64>| match p {
        Some(p) if p >= NLL_FLOOR => -p.ln(),
        _ => {
            clamped += 1;
            -NLL_FLOOR.ln()
        }
    };
    let mut data = Vec::with_capacity(events.len() * width);
    for e in events {
        data.push(nll(Some(e.probs.actual)));
        if mode == NllMode::Full {
            data.push(nll(e.probs.within));
            data.push(nll(e.probs.between));
        }
    }
    let x = DMatrix::from_row_slice(events.len(), width, &data);
    let ds = ProbeDataset::new(
        x,
        events.iter().map(|e| e.is_switch).collect(),
        events.iter().map(|e| e.sequence_id.clone()).collect(),
        0,
    )?;
    Ok((ds, clamped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub schema_version: u32,
    pub mode: NllMode,
    pub auroc: f64,
    pub auroc_sd: Option<f64>,
    pub repeat_aurocs: Vec<f64>,
    pub n_events: usize,
    pub n_clamped: usize,
    pub seed: u64,
    pub reference_auroc: f64,
}

/// Logistic classifier of switch events from output NLL features.
pub fn nll_classifier(
    events: &[NllEvent],
    mode: NllMode,
    logreg: &LogisticConfig,
    split: &SplitConfig,
    seed: u64,
) -> Result<NllReport, ProbeError> {
    let (ds, n_clamped) = nll_features(events, mode)?;
    let results = evaluate_repeats(&ds, None, logreg, split, seed)?;
    let a: Vec<f64> = results.iter().map(|r| r.auroc).collect();
    Ok(NllReport {
        schema_version: SCHEMA_VERSION,
        mode,
        auroc: seqstats::mean(&a),
        auroc_sd: (a.len() >= 2).then(|| seqstats::sample_sd(&a)),
        repeat_aurocs: a,
        n_events: ds.len(),
        n_clamped,
        seed,
        reference_auroc: ReferenceValues::default().nll_output_auroc,
    })
}

#[cfg(test)]
mod tests;
