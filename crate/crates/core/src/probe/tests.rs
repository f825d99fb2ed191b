// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn pair_count_auroc(s: &[f64], y: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        for (j, &yj) in y.iter().enumerate() {
            if yi && !yj {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auroc(&[5.0; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
    assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(ProbeError::SingleClass)));
}

proptest! {
    #[test]
    fn auroc_matches_pairs_and_invariants(
        raw in proptest::collection::vec((0i32..6, any::<bool>()), 2..40)
    ) {
        let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let y: Vec<bool> = raw.iter().map(|r| r.1).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let a = auroc(&s, &y).unwrap();
        prop_assert!((a - pair_count_auroc(&s, &y)).abs() < 1e-12);
        let mono: Vec<f64> = s.iter().map(|v| (v * 0.5).exp() + 3.0).collect();
        prop_assert!((auroc(&mono, &y).unwrap() - a).abs() < 1e-12);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&neg, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

fn groups_of(n_groups: usize, per: usize) -> Vec<String> {
    (0..n_groups * per).map(|i| format!("g{}", i / per)).collect()
}

#[test]
fn split_ten_groups() {
    let groups = groups_of(10, 4);
    let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
    let s = split_train_eval(&groups, &y, 0.8, 3).unwrap();
    assert_eq!(s.train_groups.len(), 8);
    assert_eq!(s.eval_groups.len(), 2);
    assert!(s.train_groups.is_disjoint(&s.eval_groups));
    assert_eq!(s.train.len() + s.eval.len(), 40);
    for &i in &s.eval {
        assert!(s.eval_groups.contains(&groups[i]));
    }
    assert_eq!(split_train_eval(&groups, &y, 0.8, 3).unwrap(), s);
    let other: Vec<_> = (0..20)
        .map(|seed| split_train_eval(&groups, &y, 0.8, seed).unwrap().eval_groups)
        .collect();
    assert!(other.iter().any(|g| *g != s.eval_groups));
}

#[test]
fn split_single_class_groups_still_balanced() {
    // every group is single-class; strata keep both classes on each side
    let groups = groups_of(10, 3);
    let y: Vec<bool> = (0..30).map(|i| i / 3 < 5).collect();
    for seed in 0..20 {
        let s = split_train_eval(&groups, &y, 0.8, seed).unwrap();
        assert!(s.eval.iter().any(|&i| y[i]) && s.eval.iter().any(|&i| !y[i]));
        assert!(s.train.iter().any(|&i| y[i]) && s.train.iter().any(|&i| !y[i]));
    }
}

#[test]
fn split_errors() {
    let g = groups_of(1, 4);
    let y = vec![true, false, true, false];
    assert!(matches!(split_train_eval(&g, &y, 0.8, 0), Err(ProbeError::ImpossibleStratification(1))));
    assert!(matches!(split_train_eval(&g, &y, 1.0, 0), Err(ProbeError::Config(_))));
    // two groups each holding one class: eval can never contain both
    let g = groups_of(2, 2);
    let y = vec![true, true, false, false];
    assert!(matches!(split_train_eval(&g, &y, 0.5, 0), Err(ProbeError::ImpossibleStratification(2))));
}

#[test]
fn quotas_sum_and_bounds() {
    assert_eq!(proportional_quotas(&[5, 3, 2], 2), vec![1, 1, 0]);
    assert_eq!(proportional_quotas(&[0, 4, 4], 3).iter().sum::<usize>(), 3);
    assert_eq!(proportional_quotas(&[1, 0, 0], 1), vec![1, 0, 0]);
}

#[test]
fn derive_seed_is_stable_and_distinct() {
    assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
    assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
    assert_ne!(derive_seed(1, 2), derive_seed(2, 2));
}

/// `n_layers + 1` matrices of noise with a class-dependent shift of `snr`
/// along a fixed direction in layer `signal` only.
pub(crate) fn planted_source(n_seq: usize, per_seq: usize, d: usize, n_res: usize, signal: usize, snr: f64, seed: u64) -> InMemorySource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_seq * per_seq;
    let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
    let groups = groups_of(n_seq, per_seq);
    let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let layers = (0..n_res)
        .map(|l| {
            DMatrix::from_fn(n, d, |i, j| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let shift = if l == signal && labels[i] { snr * dir[j] } else { 0.0 };
                noise + shift
            })
        })
        .collect();
    InMemorySource {
        model_tag: "toy".into(),
        condition: PromptCondition::Neutral,
        labels,
        groups,
        layers,
    }
}

#[test]
fn planted_signal_layer() {
    let src = planted_source(60, 5, 16, 4, 2, 3.0, 21);
    let config = ProbeConfig::default();
    let report = train_layerwise(&[&src], &config, Execution::default()).unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        let a = c.auroc.unwrap();
        if c.layer == 2 {
            assert!(a >= 0.95, "signal layer {a}");
        } else {
            assert!((a - 0.5).abs() <= 0.1, "layer {} {a}", c.layer);
        }
        assert_eq!(c.repeat_aurocs.len(), 5);
    }
    assert_eq!(report.top_k[0].layers[0], 2);
    let again = train_layerwise(&[&src], &config, Execution::Sequential).unwrap();
    assert_eq!(again, report);
    assert!(report.heatmap_csv().starts_with("model_tag,condition,layer,auroc\ntoy,neutral,0,"));
}

#[test]
fn failed_cell_is_recorded() {
    let mut src = planted_source(10, 4, 4, 2, 1, 3.0, 2);
    src.layers[0] = DMatrix::from_element(40, 4, 1.0);
    let report = train_layerwise(&[&src], &ProbeConfig::default(), Execution::Sequential).unwrap();
    assert!(report.cells[0].auroc.is_none());
    assert!(report.cells[0].error.is_some());
    assert!(report.cells[1].auroc.is_some());
    assert_eq!(report.top_k[0].layers, vec![1]);
}

#[test]
fn dataset_validation() {
    let g = groups_of(2, 2);
    assert!(matches!(
        ProbeDataset::new(DMatrix::zeros(4, 2), vec![true; 4], g.clone(), 0),
        Err(ProbeError::SingleClass)
    ));
    assert!(matches!(
        ProbeDataset::new(DMatrix::zeros(3, 2), vec![true, false, true], g[..3].to_vec(), 0),
        Err(ProbeError::TooFewRows { .. })
    ));
    let mut x = DMatrix::zeros(4, 2);
    x[(0, 0)] = f64::NAN;
    assert!(matches!(
        ProbeDataset::new(x, vec![true, false, true, false], g, 0),
        Err(ProbeError::NonFinite)
    ));
}

fn nll_events(n_seq: usize, planted: bool, seed: u64) -> Vec<NllEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = 8;
    let mut out = Vec::new();
    for s in 0..n_seq {
        for k in 0..4 {
            let is_switch = rng.random::<bool>();
            let partition = TokenSetPartition {
                within: BTreeSet::from([0, 1, 2]),
                between: BTreeSet::from([3, 4, 5]),
                actual: if is_switch { 3 } else { 0 },
                excluded_ambiguous: BTreeSet::new(),
            };
            let dist = if planted {
                // mass shifts toward the set the next animal comes from
                let hi = if is_switch { 3..6 } else { 0..3 };
                let mut d: Vec<f64> = (0..v).map(|t| if hi.contains(&t) { 0.25 } else { 0.05 }).collect();
                let jitter: f64 = rng.random_range(0.9..1.1);
                d.iter_mut().for_each(|p| *p *= jitter);
                let z: f64 = d.iter().sum();
                d.iter().map(|p| p / z).collect()
            } else {
                vec![1.0 / v as f64; v]
            };
            out.push(NllEvent::from_dist(format!("s{s}-{}", k / 2), is_switch, &dist, &partition).unwrap());
        }
    }
    out
}

#[test]
fn nll_uniform_is_chance() {
    let ev = nll_events(40, false, 5);
    let r = nll_classifier(&ev, NllMode::Full, &LogisticConfig::default(), &SplitConfig::default(), 9).unwrap();
    assert!((r.auroc - 0.5).abs() < 1e-9, "{}", r.auroc);
    assert_eq!(r.n_clamped, 0);
}

#[test]
fn nll_planted_is_separable() {
    let ev = nll_events(40, true, 5);
    let r = nll_classifier(&ev, NllMode::Full, &LogisticConfig::default(), &SplitConfig::default(), 9).unwrap();
    assert!(r.auroc >= 0.9, "{}", r.auroc);
    let (ds, _) = nll_features(&ev, NllMode::ActualOnly).unwrap();
    assert_eq!(ds.x.ncols(), 1);
}

#[test]
fn nll_clamps_zero_probability_and_empty_sets() {
    let mut ev = nll_events(2, false, 1);
    let part = TokenSetPartition {
        within: BTreeSet::from([0, 1, 2]),
        between: BTreeSet::new(),
        actual: 0,
        excluded_ambiguous: BTreeSet::new(),
    };
    ev[0] = NllEvent::from_dist("z", true, &[0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0], &part).unwrap();
    let (ds, clamped) = nll_features(&ev, NllMode::Full).unwrap();
    // actual, within and the empty between set of the first event
    assert_eq!(clamped, 3);
    assert!(ds.x.iter().all(|v| v.is_finite() && *v <= -NLL_FLOOR.ln() + 1e-9));
}

#[test]
fn nll_tenfold_lower_actual_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let part = TokenSetPartition {
        within: BTreeSet::from([1, 2]),
        between: BTreeSet::from([3, 4]),
        actual: 0,
        excluded_ambiguous: BTreeSet::new(),
    };
    let events: Vec<NllEvent> = (0..200)
        .map(|i| {
            let is_switch = rng.random::<bool>();
            let base: f64 = rng.random_range(0.2..0.4);
            let p0 = if is_switch { base / 10.0 } else { base };
            let rest = (1.0 - p0) / 9.0;
            let dist: Vec<f64> = (0..10).map(|t| if t == 0 { p0 } else { rest }).collect();
            NllEvent::from_dist(format!("s{}", i / 4), is_switch, &dist, &part).unwrap()
        })
        .collect();
    let r = nll_classifier(&events, NllMode::Full, &LogisticConfig::default(), &SplitConfig::default(), 2).unwrap();
    assert!(r.auroc >= 0.9, "{}", r.auroc);
    let one = nll_classifier(&events, NllMode::ActualOnly, &LogisticConfig::default(), &SplitConfig::default(), 2).unwrap();
    assert!(one.auroc >= 0.9, "{}", one.auroc);
}
