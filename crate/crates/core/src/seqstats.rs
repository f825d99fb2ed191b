// SPDX-License-Identifier: MIT OR Apache-2.0

//! Population statistics over labeled sequences, and the hypothesis tests
//! used by the lens analyses.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::norms::{CategoryNorms, LabeledSequence, Source};
use crate::par::Execution;
use crate::SCHEMA_VERSION;

/// Exact Mann-Whitney enumeration is used up to this combined sample size.
pub const MWU_EXACT_MAX_N: usize = 20;

/// Resamples per independently seeded RNG stream in the permutation test.
const PERMUTATION_BLOCK: usize = 1024;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("no sequences supplied")]
    NoSequences,
    #[error("animal {0:?} is not in the category norms")]
    UnknownAnimal(String),
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite input value")]
    NonFinite,
    #[error("matrices are over different category lists")]
    CategoryMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    TwoSided,
    /// First sample tends to be larger.
    Greater,
    /// First sample tends to be smaller.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    #[serde(default)]
    pub effect_size_d: Option<f64>,
    #[serde(default)]
    pub n_resamples: Option<u64>,
    pub sidedness: Sidedness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Category-to-category transition counts and row-normalized probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub schema_version: u32,
    pub categories: Vec<String>,
    pub counts: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    /// Rows with no outgoing mass; their probabilities are all zero.
    pub flagged_rows: Vec<bool>,
    pub n_transitions: usize,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.categories.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    /// CSV with a category header row and a category label column.
    pub fn probs_csv(&self) -> String {
        matrix_csv(&self.categories, &self.probs)
    }

    pub fn counts_csv(&self) -> String {
        matrix_csv(&self.categories, &self.counts)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut out = String::from("from");
    for l in labels {
        out.push(',');
        out.push_str(&csv_field(l));
    }
    out.push('\n');
    for (l, row) in labels.iter().zip(m) {
        out.push_str(&csv_field(l));
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Pool transitions of `seqs` into a category transition matrix.
///
/// A step from `a` to `b` spreads one unit of mass uniformly over all
/// `(c_a, c_b)` category pairs, i.e. `1 / (|C(a)| * |C(b)|)` per cell.
pub fn transition_matrix(
    seqs: &[LabeledSequence],
    norms: &CategoryNorms,
) -> Result<TransitionMatrix, StatsError> {
    if seqs.is_empty() {
        return Err(StatsError::NoSequences);
    }
    let k = norms.categories().len();
    let mut counts = vec![vec![0.0; k]; k];
    let mut n_transitions = 0;
    for seq in seqs {
        let ids = seq
            .items
            .iter()
            .map(|a| {
                norms
                    .category_ids(a)
                    .ok_or_else(|| StatsError::UnknownAnimal(a.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for w in ids.windows(2) {
            let weight = 1.0 / (w[0].len() * w[1].len()) as f64;
            for &i in w[0] {
                for &j in w[1] {
                    counts[i][j] += weight;
                }
            }
            n_transitions += 1;
        }
    }
    let mut flagged_rows = vec![false; k];
    let probs = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter().map(|c| c / total).collect()
            } else {
                flagged_rows[i] = true;
                vec![0.0; k]
            }
        })
        .collect();
    Ok(TransitionMatrix {
        schema_version: SCHEMA_VERSION,
        categories: norms.categories().to_vec(),
        counts,
        probs,
        flagged_rows,
        n_transitions,
    })
}

/// Diagonal (within-category) and off-diagonal (between-category)
/// probabilities of the non-flagged rows.
pub fn within_between_split(m: &TransitionMatrix) -> (Vec<f64>, Vec<f64>) {
    let mut within = Vec::new();
    let mut between = Vec::new();
    for (i, row) in m.probs.iter().enumerate() {
        if m.flagged_rows[i] {
            continue;
        }
        for (j, &p) in row.iter().enumerate() {
            if i == j {
                within.push(p);
            } else {
                between.push(p);
            }
        }
    }
    (within, between)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSelection {
    /// Cells whose row is active in either matrix.
    #[default]
    Union,
    /// Cells whose row is active in both matrices.
    Intersection,
}

/// Cell-by-cell Spearman correlation of two transition matrices.
pub fn correlate_matrices(
    a: &TransitionMatrix,
    b: &TransitionMatrix,
    cells: CellSelection,
) -> Result<SpearmanResult, StatsError> {
    if a.categories != b.categories {
        return Err(StatsError::CategoryMismatch);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..a.size() {
        let keep = match cells {
            CellSelection::Union => !a.flagged_rows[i] || !b.flagged_rows[i],
            CellSelection::Intersection => !a.flagged_rows[i] && !b.flagged_rows[i],
        };
        if keep {
            x.extend_from_slice(&a.probs[i]);
            y.extend_from_slice(&b.probs[i]);
        }
    }
    spearman(&x, &y)
}

/// 1-based ranks with ties sharing the average rank.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

fn check_finite(x: &[f64]) -> Result<(), StatsError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (denominator n - 1). Spread at rounding level
/// relative to the mean is reported as exactly zero.
pub(crate) fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt();
    if sd <= 1e-12 * m.abs() {
        0.0
    } else {
        sd
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with a two-sided t-approximation p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFew { need: 3, got: n });
    }
    check_finite(x)?;
    check_finite(y)?;
    let rho = pearson(&midranks(x), &midranks(y)).ok_or(StatsError::ZeroVariance)?;
    let df = (n - 2) as f64;
    let p_value = if (1.0 - rho.abs()) < 1e-15 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(SpearmanResult { rho, p_value, n })
}

/// Mann-Whitney U test of `a` against `b`.
///
/// The reported statistic is `U_a = R_a - n_a (n_a + 1) / 2`. Combined sizes
/// up to [`MWU_EXACT_MAX_N`] use the exact permutation distribution of the
/// mid-rank sum (ties included); larger samples use the tie-corrected normal
/// approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64], sidedness: Sidedness) -> Result<TestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::TooFew {
            need: 1,
            got: a.len().min(b.len()),
        });
    }
    check_finite(a)?;
    check_finite(b)?;
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    if n <= MWU_EXACT_MAX_N {
        let p_value = mwu_exact_p(&ranks, na, sidedness);
        return Ok(TestResult {
            method: "mann_whitney_exact".into(),
            statistic: u,
            p_value,
            effect_size_d: None,
            n_resamples: None,
            sidedness,
        });
    }

    let (naf, nbf, nf) = (na as f64, nb as f64, n as f64);
    let mu = naf * nbf / 2.0;
    let tie_term: f64 = tie_group_sizes(&pooled)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum();
    let var = naf * nbf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let sd = var.sqrt();
        let z_dist = Normal::new(0.0, 1.0).expect("standard normal");
        match sidedness {
            Sidedness::TwoSided => {
                let z = ((u - mu).abs() - 0.5).max(0.0) / sd;
                (2.0 * z_dist.sf(z)).min(1.0)
            }
            Sidedness::Greater => z_dist.sf((u - mu - 0.5) / sd),
            Sidedness::Less => z_dist.cdf((u - mu + 0.5) / sd),
        }
    };
    Ok(TestResult {
        method: "mann_whitney_normal".into(),
        statistic: u,
        p_value,
        effect_size_d: None,
        n_resamples: None,
        sidedness,
    })
}

fn tie_group_sizes(x: &[f64]) -> Vec<usize> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        sizes.push(j - i);
        i = j;
    }
    sizes
}

/// Exact p-value from the distribution of the first sample's rank sum over
/// all `C(n, n_a)` label assignments. Mid-ranks are multiples of 1/2, so
/// doubled ranks are integers and the subset-sum DP is exact.
fn mwu_exact_p(ranks: &[f64], na: usize, sidedness: Sidedness) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let observed: usize = doubled[..na].iter().sum();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: number of k-subsets with doubled rank sum s
    let mut ways = vec![vec![0u64; max_sum + 1]; na + 1];
    ways[0][0] = 1;
    for &r in &doubled {
        for k in (1..=na).rev() {
            for s in (r..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - r];
            }
        }
    }
    let dist = &ways[na];
    let total: u64 = dist.iter().sum();
    // doubled null mean: 2 * n_a (n + 1) / 2
    let centre = (na * (ranks.len() + 1)) as i64;
    let obs_dev = (observed as i64 - centre).abs();
    let hits: u64 = dist
        .iter()
        .enumerate()
        .filter(|&(s, &w)| {
            w > 0
                && match sidedness {
                    Sidedness::Less => s <= observed,
                    Sidedness::Greater => s >= observed,
                    Sidedness::TwoSided => (s as i64 - centre).abs() >= obs_dev,
                }
        })
        .map(|(_, &w)| w)
        .sum();
    hits as f64 / total as f64
}

/// Paired sign-flip permutation test on `post - pre`.
///
/// Runs on the default [`Execution`]; see [`paired_permutation_test_with`].
pub fn paired_permutation_test(
    pre: &[f64],
    post: &[f64],
    n_resamples: usize,
    rng_seed: u64,
) -> Result<TestResult, StatsError> {
    paired_permutation_test_with(pre, post, n_resamples, rng_seed, Execution::default())
}

/// The statistic is the mean paired difference. Each resample flips the
/// sign of every difference independently with probability 1/2. The
/// two-sided p-value is `(1 + #{|null| >= |observed|}) / (R + 1)` and the
/// effect size is Cohen's d of the differences (mean over sample SD).
///
/// Resamples are drawn in fixed blocks, each from its own ChaCha stream
/// keyed by `(rng_seed, block)`, so the result does not depend on `exec`.
pub fn paired_permutation_test_with(
    pre: &[f64],
    post: &[f64],
    n_resamples: usize,
    rng_seed: u64,
    exec: Execution,
) -> Result<TestResult, StatsError> {
    if pre.len() != post.len() {
        return Err(StatsError::LengthMismatch(pre.len(), post.len()));
    }
    if pre.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: pre.len(),
        });
    }
    if n_resamples == 0 {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    check_finite(pre)?;
    check_finite(post)?;
    let diffs: Vec<f64> = post.iter().zip(pre).map(|(b, a)| b - a).collect();
    let observed = mean(&diffs);
    let sd = sample_sd(&diffs);

    if sd == 0.0 && observed == 0.0 {
        return Ok(TestResult {
            method: "paired_sign_flip".into(),
            statistic: 0.0,
            p_value: 1.0,
            effect_size_d: Some(0.0),
            n_resamples: Some(n_resamples as u64),
            sidedness: Sidedness::TwoSided,
        });
    }
    // zero-SD nonzero-mean differences have no finite d
    let effect_size_d = (sd > 0.0).then(|| observed / sd);

    let scale = diffs.iter().map(|d| d.abs()).sum::<f64>() / diffs.len() as f64;
    let threshold = observed.abs() - 1e-12 * scale;
    let n_blocks = n_resamples.div_ceil(PERMUTATION_BLOCK);
    let counts = exec.map_range(n_blocks, |block| {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(block as u64);
        let start = block * PERMUTATION_BLOCK;
        let end = (start + PERMUTATION_BLOCK).min(n_resamples);
        let mut hits = 0u64;
        for _ in start..end {
            let s: f64 = diffs
                .iter()
                .map(|&d| if rng.random::<bool>() { d } else { -d })
                .sum();
            if (s / diffs.len() as f64).abs() >= threshold {
                hits += 1;
            }
        }
        hits
    });
    let hits: u64 = counts.into_iter().sum();
    Ok(TestResult {
        method: "paired_sign_flip".into(),
        statistic: observed,
        p_value: ((1 + hits) as f64 / (n_resamples + 1) as f64).min(1.0),
        effect_size_d,
        n_resamples: Some(n_resamples as u64),
        sidedness: Sidedness::TwoSided,
    })
}

/// Standardize with the sample standard deviation.
pub fn zscore(x: &[f64]) -> Result<Vec<f64>, StatsError> {
    if x.len() < 2 {
        return Err(StatsError::TooFew {
            need: 2,
            got: x.len(),
        });
    }
    check_finite(x)?;
    let m = mean(x);
    let sd = sample_sd(x);
    if sd.is_nan() || sd < 1e-300 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(x.iter().map(|v| (v - m) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchRatioSummary {
    pub human_mean: f64,
    pub model_mean: f64,
    pub n_human: usize,
    pub n_model: usize,
    pub test: TestResult,
}

/// Mean switch ratios of two populations and a two-sided Mann-Whitney test.
pub fn switch_ratio_summary(
    human: &[LabeledSequence],
    model: &[LabeledSequence],
) -> Result<SwitchRatioSummary, StatsError> {
    if human.is_empty() || model.is_empty() {
        return Err(StatsError::NoSequences);
    }
    let h: Vec<f64> = human.iter().map(|s| s.switch_ratio).collect();
    let m: Vec<f64> = model.iter().map(|s| s.switch_ratio).collect();
    Ok(SwitchRatioSummary {
        human_mean: mean(&h),
        model_mean: mean(&m),
        n_human: h.len(),
        n_model: m.len(),
        test: mann_whitney_u(&h, &m, Sidedness::TwoSided)?,
    })
}

/// Split sequences by source, and model sequences further by tag.
pub fn partition_by_source(
    seqs: &[LabeledSequence],
) -> (Vec<LabeledSequence>, BTreeMap<String, Vec<LabeledSequence>>) {
    let mut human = Vec::new();
    let mut models: BTreeMap<String, Vec<LabeledSequence>> = BTreeMap::new();
    for s in seqs {
        match s.source {
            Source::Human => human.push(s.clone()),
            Source::Model => models
                .entry(s.model_tag.clone().unwrap_or_else(|| "model".into()))
                .or_default()
                .push(s.clone()),
        }
    }
    (human, models)
}
