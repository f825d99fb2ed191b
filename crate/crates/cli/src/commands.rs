// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand bodies. Each reads its inputs, runs the library pipeline and
//! writes schema-versioned JSON/CSV into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use forage_lens::contrastive::{build_dataset, load_embeddings, DatasetConfig, Polarity, PromptCondition};
use forage_lens::jsonl;
use forage_lens::lens::{
    align_events, event_layer_probs, event_partition, fmt_opt, late_layer_event_means, late_layer_summary,
    layer_curves_from_values, logitlens, read_dump, EventLayerValues, LateLayerSummary, LayerCurves, Manifest,
    ModelHead, SeriesKind, SeriesPoint, SetProbabilities,
};
use forage_lens::norms::{validate_and_filter, CategoryNorms, LabeledSequence, RawSequence};
use forage_lens::probe::{
    derive_seed, nll_classifier, train_layerwise, DumpSource, LayerSource, NllEvent, NllMode, ProbeConfig,
};
use forage_lens::reference::ReferenceValues;
use forage_lens::seqstats::{
    correlate_matrices, mann_whitney_u, paired_permutation_test_with, partition_by_source, switch_ratio_summary,
    transition_matrix, within_between_split, CellSelection, Sidedness, SpearmanResult, SwitchRatioSummary,
    TestResult,
};
use forage_lens::SCHEMA_VERSION;
use serde::Serialize;

use crate::{Classify, Context, Failure, ProbeInput};

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| Failure::Usage(format!("missing --{flag} (or `{flag}` in the config file)")))
}

fn out_path(ctx: &Context, name: &str) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(&ctx.out_dir).internal()?;
    Ok(ctx.out_dir.join(name))
}

fn write_json<T: Serialize>(ctx: &Context, name: &str, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).internal()?;
    text.push('\n');
    write_text(ctx, name, &text)
}

fn write_text(ctx: &Context, name: &str, text: &str) -> Result<(), Failure> {
    let path = out_path(ctx, name)?;
    std::fs::write(&path, text).map_err(|e| Failure::Internal(anyhow!("writing {}: {e}", path.display())))
}

/// File-name-safe form of a model tag.
fn slug(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn load_norms(ctx: &Context) -> Result<CategoryNorms, Failure> {
    CategoryNorms::parse_file(require(&ctx.config.norms, "norms")?).input()
}

fn load_labeled(ctx: &Context) -> Result<Vec<LabeledSequence>, Failure> {
    let path = require(&ctx.config.sequences, "sequences")?;
    let seqs: Vec<LabeledSequence> = jsonl::read(path).input()?;
    if seqs.is_empty() {
        return Err(Failure::Input(anyhow!("{} contains no sequences", path.display())));
    }
    Ok(seqs)
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    eprintln!("warning: {msg}");
    warnings.push(msg);
}

// ------------------------------------------------------------------ label

pub fn label(ctx: &Context) -> Result<(), Failure> {
    let norms = load_norms(ctx)?;
    let path = require(&ctx.config.sequences, "sequences")?;
    let raw: Vec<RawSequence> = jsonl::read(path).input()?;
    if raw.is_empty() {
        return Err(Failure::Input(anyhow!("{} contains no sequences", path.display())));
    }
    let (kept, report) = validate_and_filter(&raw, &norms, ctx.config.truncate_len).input()?;
    jsonl::write(&out_path(ctx, "labeled.jsonl")?, &kept).internal()?;
    write_json(ctx, "filter_report.json", &report)?;
    eprintln!("kept {} of {} sequences", report.n_kept, report.n_input);
    Ok(())
}

// ------------------------------------------------------------------ stats

#[derive(Serialize)]
struct PopulationSummary {
    name: String,
    n_sequences: usize,
    n_transitions: usize,
    mean_switch_ratio: f64,
    flagged_categories: Vec<String>,
}

#[derive(Serialize)]
struct ModelComparison {
    model_tag: String,
    transition_correlation: Option<SpearmanResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    correlation_error: Option<String>,
    switch_ratio: Option<SwitchRatioSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    switch_ratio_error: Option<String>,
}

#[derive(Serialize)]
struct StatsReport {
    schema_version: u32,
    cell_selection: CellSelection,
    populations: Vec<PopulationSummary>,
    comparisons: Vec<ModelComparison>,
    warnings: Vec<String>,
    reference: ReferenceValues,
}

pub fn stats(ctx: &Context, cells: CellSelection) -> Result<(), Failure> {
    let norms = load_norms(ctx)?;
    let seqs = load_labeled(ctx)?;
    let (human, models) = partition_by_source(&seqs);
    let mut warnings = Vec::new();
    if human.is_empty() {
        warn(&mut warnings, "no human sequences; human-model comparisons omitted".into());
    }
    if models.is_empty() {
        warn(&mut warnings, "no model sequences; model-side outputs omitted".into());
    }

    let mut populations: Vec<(String, &[LabeledSequence])> = Vec::new();
    if !human.is_empty() {
        populations.push(("human".into(), &human));
    }
    for (tag, s) in &models {
        populations.push((tag.clone(), s));
    }

    let mut matrices = BTreeMap::new();
    let mut summaries = Vec::new();
    let mut within_between = String::from("population,kind,value\n");
    let mut ratios = String::from("population,sequence_id,switch_ratio\n");
    for (name, group) in &populations {
        let m = transition_matrix(group, &norms).input()?;
        write_text(ctx, &format!("transitions_{}.csv", slug(name)), &m.probs_csv())?;
        write_text(ctx, &format!("transition_counts_{}.csv", slug(name)), &m.counts_csv())?;
        let (w, b) = within_between_split(&m);
        for (kind, vals) in [("within", w), ("between", b)] {
            for v in vals {
                within_between.push_str(&format!("{name},{kind},{v}\n"));
            }
        }
        for s in group.iter() {
            ratios.push_str(&format!("{name},{},{}\n", s.id, s.switch_ratio));
        }
        summaries.push(PopulationSummary {
            name: name.clone(),
            n_sequences: group.len(),
            n_transitions: m.n_transitions,
            mean_switch_ratio: group.iter().map(|s| s.switch_ratio).sum::<f64>() / group.len() as f64,
            flagged_categories: m
                .categories
                .iter()
                .zip(&m.flagged_rows)
                .filter(|(_, f)| **f)
                .map(|(c, _)| c.clone())
                .collect(),
        });
        matrices.insert(name.clone(), m);
    }
    write_text(ctx, "within_between.csv", &within_between)?;
    write_text(ctx, "switch_ratios.csv", &ratios)?;

    let mut comparisons = Vec::new();
    if let Some(hm) = matrices.get("human") {
        for (tag, group) in &models {
            let corr = correlate_matrices(hm, &matrices[tag], cells);
            let ratio = switch_ratio_summary(&human, group);
            comparisons.push(ModelComparison {
                model_tag: tag.clone(),
                correlation_error: corr.as_ref().err().map(|e| e.to_string()),
                transition_correlation: corr.ok(),
                switch_ratio_error: ratio.as_ref().err().map(|e| e.to_string()),
                switch_ratio: ratio.ok(),
            });
        }
    }
    write_json(
        ctx,
        "stats.json",
        &StatsReport {
            schema_version: SCHEMA_VERSION,
            cell_selection: cells,
            populations: summaries,
            comparisons,
            warnings,
            reference: ReferenceValues::default(),
        },
    )
}

// ------------------------------------------------------------------- lens

#[derive(Serialize)]
struct AlignedTest {
    series: SeriesKind,
    n_pairs: usize,
    test: Option<TestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    reference_d: f64,
}

#[derive(Serialize)]
struct AlignedReport {
    schema_version: u32,
    window: (i32, i32),
    contrast: (i32, i32),
    seed: u64,
    n_switch_events: usize,
    skipped_sequences: BTreeMap<SeriesKind, Vec<String>>,
    tests: Vec<AlignedTest>,
}

#[derive(Serialize)]
struct LateLayerTests {
    switch_within_vs_between: Option<TestResult>,
    non_switch_within_vs_between: Option<TestResult>,
}

#[derive(Serialize)]
struct LateLayerReport {
    schema_version: u32,
    model_tag: String,
    n_layers: usize,
    summary: LateLayerSummary,
    tests: LateLayerTests,
    reference: ReferenceValues,
}

/// Per-event results of the lens pass.
struct EventOutput {
    layers: EventLayerValues,
    final_probs: SetProbabilities,
}

pub fn lens(ctx: &Context, zscore_layers: bool, nll_mode: NllMode) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let norms = load_norms(ctx)?;
    let seqs = load_labeled(ctx)?;
    let manifest_path = require(&cfg.manifest, "manifest")?;
    let manifest = Manifest::from_json(&std::fs::read_to_string(manifest_path).input()?).input()?;
    if cfg.layer_threshold >= manifest.n_layers {
        return Err(Failure::Input(anyhow!(
            "layer threshold {} must be below the layer count {}",
            cfg.layer_threshold,
            manifest.n_layers
        )));
    }
    let dump = read_dump(require(&cfg.dump, "dump")?).input()?;
    manifest.check_dump(&dump).input()?;
    let head = match &cfg.head {
        Some(p) => ModelHead::from_dump(&read_dump(p).input()?, &manifest),
        None => ModelHead::from_dump(&dump, &manifest),
    }
    .input()?;

    let by_id: BTreeMap<&str, &LabeledSequence> = seqs.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut partitions = Vec::with_capacity(manifest.events.len());
    for (i, e) in manifest.events.iter().enumerate() {
        let seq = by_id
            .get(e.sequence_id.as_str())
            .ok_or_else(|| Failure::Input(anyhow!("event {i}: unknown sequence {:?}", e.sequence_id)))?;
        match seq.switch_flags.get(e.position) {
            None => {
                return Err(Failure::Input(anyhow!(
                    "event {i}: position {} is past the last transition of {:?}",
                    e.position,
                    e.sequence_id
                )))
            }
            Some(&flag) if flag != e.is_switch => {
                return Err(Failure::Input(anyhow!(
                    "event {i}: is_switch={} disagrees with the labels of {:?}",
                    e.is_switch,
                    e.sequence_id
                )))
            }
            Some(_) => {}
        }
        partitions.push(event_partition(&seq.items, e.position, &norms, &manifest.first_token_ids).input()?);
    }

    let outputs = ctx.exec.map_range(manifest.events.len(), |i| -> anyhow::Result<EventOutput> {
        let residuals = manifest.read_residuals(&dump, i)?;
        let part = &partitions[i];
        let layers = event_layer_probs(&residuals, &head, part)?;
        let final_name = Manifest::final_dist_name(i);
        let dist: Vec<f64> = if dump.contains(&final_name) {
            dump.read_shaped(&final_name, &[manifest.vocab_size])?
                .into_iter()
                .map(f64::from)
                .collect()
        } else {
            logitlens(residuals.last().expect("n_layers + 1 residuals"), &head)?
        };
        Ok(EventOutput {
            layers: EventLayerValues {
                is_switch: manifest.events[i].is_switch,
                layers,
            },
            final_probs: forage_lens::lens::set_probability(&dist, part)?,
        })
    });
    let outputs = outputs.into_iter().collect::<anyhow::Result<Vec<_>>>().input()?;

    // layer-wise curves and the late-layer table
    let values: Vec<EventLayerValues> = outputs.iter().map(|o| o.layers.clone()).collect();
    let curves = layer_curves_from_values(&values).input()?;
    write_text(ctx, "layer_curves.csv", &curves.to_csv())?;
    if zscore_layers {
        write_text(ctx, "layer_curves_z.csv", &zscored_layer_csv(&curves))?;
    }
    let summary = late_layer_summary(&curves, cfg.layer_threshold).input()?;
    let late_test = |series_a, series_b, switch: bool| -> Option<TestResult> {
        let (sa, na) = late_layer_event_means(&values, cfg.layer_threshold, series_a).ok()?;
        let (sb, nb) = late_layer_event_means(&values, cfg.layer_threshold, series_b).ok()?;
        let (a, b) = if switch { (sa, sb) } else { (na, nb) };
        mann_whitney_u(&a, &b, Sidedness::TwoSided).ok()
    };
    write_json(
        ctx,
        "late_layer.json",
        &LateLayerReport {
            schema_version: SCHEMA_VERSION,
            model_tag: manifest.model_tag.clone(),
            n_layers: manifest.n_layers,
            summary,
            tests: LateLayerTests {
                switch_within_vs_between: late_test(SeriesKind::Within, SeriesKind::Between, true),
                non_switch_within_vs_between: late_test(SeriesKind::Within, SeriesKind::Between, false),
            },
            reference: ReferenceValues::default(),
        },
    )?;

    // switch-aligned curves from the final distribution
    let points: Vec<SeriesPoint> = manifest
        .events
        .iter()
        .zip(&outputs)
        .map(|(e, o)| SeriesPoint {
            sequence_id: e.sequence_id.clone(),
            position: e.position,
            is_switch: e.is_switch,
            probs: o.final_probs,
        })
        .collect();
    let reference = ReferenceValues::default();
    let mut csv = String::from("relative_position,series,mean,sem,n\n");
    let mut tests = Vec::new();
    let mut skipped = BTreeMap::new();
    let mut n_switch_events = 0;
    for (k, kind) in SeriesKind::ALL.into_iter().enumerate() {
        let aligned = align_events(&points, cfg.window, kind).input()?;
        n_switch_events = aligned.values.len();
        let curve = aligned.curve();
        for (j, rel) in curve.relative_positions.iter().enumerate() {
            csv.push_str(&format!(
                "{rel},{},{},{},{}\n",
                kind.as_str(),
                fmt_opt(curve.mean[j]),
                fmt_opt(curve.sem[j]),
                curve.n_events[j]
            ));
        }
        let (pre, post) = aligned.paired(-1, 0);
        let result = paired_permutation_test_with(
            &pre,
            &post,
            cfg.resamples as usize,
            derive_seed(cfg.seed, k as u64),
            ctx.exec,
        );
        tests.push(AlignedTest {
            series: kind,
            n_pairs: pre.len(),
            error: result.as_ref().err().map(|e| e.to_string()),
            test: result.ok(),
            reference_d: match kind {
                SeriesKind::Within => reference.aligned_d_within,
                SeriesKind::Between => reference.aligned_d_between,
                SeriesKind::Actual => reference.aligned_d_actual,
            },
        });
        skipped.insert(kind, aligned.skipped_sequences);
    }
    write_text(ctx, "aligned_curves.csv", &csv)?;
    write_json(
        ctx,
        "aligned_tests.json",
        &AlignedReport {
            schema_version: SCHEMA_VERSION,
            window: cfg.window,
            contrast: (-1, 0),
            seed: cfg.seed,
            n_switch_events,
            skipped_sequences: skipped,
            tests,
        },
    )?;

    // output-NLL classifier baseline
    let nll_events: Vec<NllEvent> = points
        .iter()
        .map(|p| NllEvent {
            sequence_id: p.sequence_id.clone(),
            is_switch: p.is_switch,
            probs: p.probs,
        })
        .collect();
    match nll_classifier(&nll_events, nll_mode, &cfg.logreg, &cfg.split, derive_seed(cfg.seed, 1 << 32)) {
        Ok(report) => write_json(ctx, "nll_probe.json", &report)?,
        Err(e) => eprintln!("warning: NLL classifier skipped: {e}"),
    }
    eprintln!(
        "{} events, {} residual layers, {n_switch_events} switch events aligned",
        manifest.events.len(),
        curves.n_residuals
    );
    Ok(())
}

/// Layer curves with each (series, class) mean z-scored across layers.
fn zscored_layer_csv(curves: &LayerCurves) -> String {
    let mut groups: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for r in &curves.rows {
        if let Some(m) = r.mean {
            groups
                .entry((r.series.as_str().to_string(), r.class.as_str().to_string()))
                .or_default()
                .push((r.layer, m));
        }
    }
    let mut out = String::from("layer,series,class,z\n");
    for ((series, class), pts) in groups {
        let vals: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let z = forage_lens::seqstats::zscore(&vals).ok();
        for (i, (layer, _)) in pts.iter().enumerate() {
            out.push_str(&format!(
                "{layer},{series},{class},{}\n",
                fmt_opt(z.as_ref().map(|z| z[i]))
            ));
        }
    }
    out
}

// ------------------------------------------------------------------ probe

pub fn probe(ctx: &Context, inputs: &[ProbeInput]) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let mut sources = Vec::with_capacity(inputs.len());
    for input in inputs {
        let text = std::fs::read_to_string(&input.manifest)
            .map_err(|e| Failure::Input(anyhow!("reading {}: {e}", input.manifest.display())))?;
        let mut manifest = Manifest::from_json(&text).input()?;
        if !input.model_tag.is_empty() {
            manifest.model_tag = input.model_tag.clone();
        }
        let dump = read_dump(&input.dump).input()?;
        sources.push(DumpSource::new(manifest, dump, input.condition).input()?);
    }
    let refs: Vec<&dyn LayerSource> = sources.iter().map(|s| s as &dyn LayerSource).collect();
    let config = ProbeConfig {
        pca: cfg.pca,
        logreg: cfg.logreg,
        split: cfg.split,
        top_k: cfg.top_k,
        seed: cfg.seed,
    };
    let report = train_layerwise(&refs, &config, ctx.exec).input()?;
    write_json(ctx, "probe_report.json", &report)?;
    write_text(ctx, "probe_heatmap.csv", &report.heatmap_csv())?;
    for t in &report.top_k {
        eprintln!(
            "{} {}: top-{} layers {:?}, mean AUROC {}",
            t.model_tag,
            t.condition.as_str(),
            t.k,
            t.layers,
            fmt_opt(t.mean_auroc)
        );
    }
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} probe cells failed; see probe_report.json");
    }
    Ok(())
}

// ------------------------------------------------------------ contrastive

pub fn contrastive(ctx: &Context, conditions: Vec<PromptCondition>, polarities: Vec<Polarity>) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let norms = load_norms(ctx)?;
    let seqs = load_labeled(ctx)?;
    let (human, _) = partition_by_source(&seqs);
    if human.is_empty() {
        return Err(Failure::Input(anyhow!("no human sequences to build pairs from")));
    }
    let emb = load_embeddings(require(&cfg.embeddings, "embeddings")?, &norms).input()?;
    if !emb.unavailable.is_empty() {
        eprintln!(
            "warning: {} norm animals have no embedding: {}",
            emb.unavailable.len(),
            emb.unavailable.iter().cloned().collect::<Vec<_>>().join(", ")
        );
    }
    let dataset = DatasetConfig {
        conditions,
        polarities,
    };
    let (pairs, report) = build_dataset(&human, &norms, &emb, &dataset, cfg.seed, ctx.exec);
    jsonl::write(&out_path(ctx, "contrastive_pairs.jsonl")?, &pairs).internal()?;
    write_json(ctx, "contrastive_report.json", &report)?;
    eprintln!(
        "{} pairs from {} human sequences, {} skips",
        report.n_pairs,
        report.n_sequences,
        report.skipped.len()
    );
    Ok(())
}
