use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

use reqlens::annotate::{
    annotate_batch, format_validate, merge_rounds, parse_results, resolve_queue, triage_round, AnnotationResult,
    AuditLog, BatchOptions, DisagreementThreshold, EndpointKind, FormatReport, MarkedText, ReviewEntry, RoundConfig,
    TierCounts, TierSet, TieredAnnotation,
};
use reqlens::corpus::{Corpus, FilterReport, LoadReport};
use reqlens::diachrony::{
    cohort_compare, cohort_csv, convergence_curve, curve_csv, shuffle_baseline, timelapse_richness, ConvergenceConfig,
    TimelapseConfig,
};
use reqlens::express::{classify_all, extract_template, ExpressionTemplate, TaxonomyHistogram};
use reqlens::geom::{
    embed, fit_pca, kde_2d, kde_diff, load_projection, nearest_anchor, user_mean, user_trajectory, AnchorMatch,
    AnchorSet, EmbeddingProvider, EmbeddingVector, GridSpec, Projection2D, ProjectionSource,
};
use reqlens::jsonl::read_jsonl;
use reqlens::lexstats::{user_stats, user_stats_csv, Histogram, TextMode, UserStats};
use reqlens::segmark::{parse_markup_with_id, SegmentedUtterance};

use crate::config::{Needs, RunConfig};
use crate::run::{CliError, Run};
use crate::{Cli, Command};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    let needs = |cfg: &RunConfig| needs(cmd, cfg);
    let mut run = Run::open(cmd.name(), cli.config.as_deref(), cmd.overrides(cli), needs)?;
    match cmd {
        Command::Ingest => ingest(&mut run)?,
        Command::Validate { input } => validate(&mut run, input)?,
        Command::Annotate => annotate(&mut run)?,
        Command::Triage {
            large,
            small,
            decisions,
            gold,
            ..
        } => triage(
            &mut run,
            large.as_deref(),
            small.as_deref(),
            decisions.as_deref(),
            gold.as_deref(),
        )?,
        Command::Extract => extract(&mut run)?,
        Command::Classify => classify(&mut run)?,
        Command::Stats { .. } => stats(&mut run)?,
        Command::Compare { .. } => compare(&mut run)?,
        Command::Converge { .. } => converge(&mut run)?,
        Command::Timelapse { .. } => timelapse(&mut run)?,
        Command::Project { .. } => project(&mut run)?,
        Command::Kde => kde(&mut run)?,
    }
    run.finish()
}

fn needs(cmd: &Command, cfg: &RunConfig) -> Needs {
    let expression = cfg.richness.mode == TextMode::ExpressionOnly;
    match cmd {
        Command::Ingest | Command::Annotate => Needs {
            corpus: true,
            annotate: matches!(cmd, Command::Annotate),
            ..Default::default()
        },
        Command::Validate { .. } | Command::Triage { .. } => Needs::default(),
        Command::Extract | Command::Classify => Needs {
            segmentations: true,
            ..Default::default()
        },
        Command::Stats { .. } | Command::Compare { .. } | Command::Timelapse { .. } => Needs {
            corpus: true,
            segmentations: expression,
            compare: matches!(cmd, Command::Compare { .. }),
            ..Default::default()
        },
        Command::Converge { .. } => Needs {
            corpus: true,
            segmentations: true,
            embedding: true,
            seed: true,
            ..Default::default()
        },
        Command::Project { .. } => Needs {
            corpus: true,
            segmentations: true,
            embedding: true,
            ..Default::default()
        },
        Command::Kde => Needs {
            corpus: true,
            segmentations: cfg.projection.is_none(),
            embedding: cfg.projection.is_none(),
            ..Default::default()
        },
    }
}

#[derive(Serialize)]
struct IngestReport {
    load: Option<LoadReport>,
    dropped_non_request: usize,
    /// `kept` counts records after the request-type and spam filters;
    /// `dropped_cohort` counts kept records outside the long-term cohort.
    filter: FilterReport,
    cohort_users: usize,
}

fn ingest(run: &mut Run) -> Result<()> {
    let p = run.corpus()?;
    let cohort = run.cohort(&p.corpus);
    let report = IngestReport {
        load: p.load_report,
        dropped_non_request: p.dropped_non_request,
        filter: FilterReport {
            input_count: p.input_count,
            kept: p.corpus.len(),
            dropped_spam: p.dropped_spam,
            dropped_cohort: p.corpus.len() - cohort.len(),
        },
        cohort_users: cohort.user_count(),
    };
    run.write_jsonl("filtered.jsonl", p.corpus.records())?;
    run.write_json("filter_report.json", &report)
}

fn source_texts(corpus: &Corpus) -> HashMap<String, String> {
    corpus
        .records()
        .iter()
        .map(|r| (r.record_id.clone(), r.text.clone()))
        .collect()
}

fn validate(run: &mut Run, input: &Path) -> Result<()> {
    run.input(input)?;
    let results: Vec<AnnotationResult> = read_jsonl(input)?;
    let sources = match run.cfg.corpus.is_some() {
        true => Some(source_texts(&run.corpus()?.corpus)),
        false => None,
    };
    let report = format_validate(&results, sources.as_ref());
    run.write_json("format_report.json", &report)
}

#[derive(Serialize)]
struct FormatReports {
    large: FormatReport,
    small: FormatReport,
}

fn annotate(run: &mut Run) -> Result<()> {
    let a = run.cfg.annotate.clone().expect("validated");
    let corpus = run.corpus()?.corpus;
    let instructions = match (&a.instructions, &a.instructions_path) {
        (Some(text), _) => text.clone(),
        (None, Some(path)) => {
            run.input(path)?;
            std::fs::read_to_string(path)
                .map_err(|e| CliError::new("io", format!("cannot read instructions: {e}")).at(path))?
        }
        (None, None) => String::new(),
    };
    let opts = BatchOptions {
        instructions,
        parallelism: a.parallelism,
        retry: a.retry,
    };
    let sources = source_texts(&corpus);
    let mut reports = Vec::new();
    for (endpoint, name) in [(&a.large, "annotations_L.jsonl"), (&a.small, "annotations_l.jsonl")] {
        if let EndpointKind::Replay { path } = &endpoint.kind {
            run.input(path)?;
        }
        let results = annotate_batch(endpoint, corpus.records(), &opts)?;
        reports.push(format_validate(&results, Some(&sources)));
        run.write_jsonl(name, &results)?;
    }
    run.write_json(
        "format_report.json",
        &FormatReports {
            large: reports[0],
            small: reports[1],
        },
    )
}

#[derive(Serialize)]
struct TriageReport {
    threshold: DisagreementThreshold,
    round: usize,
    /// Records whose response did not parse or did not preserve the source
    /// text; they are left out of the round.
    ill_formatted_large: Vec<String>,
    ill_formatted_small: Vec<String>,
    /// Records already in the gold set; gold wins over annotator output.
    skipped_gold: usize,
    agreed: usize,
    queued: usize,
    resolved: usize,
    pending: usize,
    training: TierCounts,
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::new("missing_input", format!("{what} not found"))
            .at(&path)
            .into())
    }
}

fn triage(
    run: &mut Run,
    large: Option<&Path>,
    small: Option<&Path>,
    decisions: Option<&Path>,
    gold: Option<&Path>,
) -> Result<()> {
    let large_path = existing(
        large
            .map(Path::to_path_buf)
            .unwrap_or_else(|| run.out_path("annotations_L.jsonl")),
        "large annotator results",
    )?;
    let small_path = existing(
        small
            .map(Path::to_path_buf)
            .unwrap_or_else(|| run.out_path("annotations_l.jsonl")),
        "small annotator results",
    )?;
    let section = run.cfg.annotate.clone();
    let decisions = decisions
        .map(Path::to_path_buf)
        .or_else(|| section.as_ref().and_then(|a| a.decisions.clone()));
    let gold = gold
        .map(Path::to_path_buf)
        .or_else(|| section.as_ref().and_then(|a| a.gold.clone()));
    let threshold = match &section {
        Some(a) => match (a.delta, a.delta_fraction) {
            (None, Some(f)) => DisagreementThreshold::Fraction(f),
            (d, _) => DisagreementThreshold::Words(d.unwrap_or(5)),
        },
        None => DisagreementThreshold::Words(run.delta_override().unwrap_or(5)),
    };
    let round = section.as_ref().map_or(1, |a| a.round);

    let sources = match run.cfg.corpus.is_some() {
        true => source_texts(&run.corpus()?.corpus),
        false => HashMap::new(),
    };
    run.input(&large_path)?;
    run.input(&small_path)?;
    let (large, ill_formatted_large) = parse_results(&read_jsonl(&large_path)?, &sources);
    let (small, ill_formatted_small) = parse_results(&read_jsonl(&small_path)?, &sources);

    let gold_items = match &gold {
        Some(path) => {
            run.input(path)?;
            let rows: Vec<MarkedText> = read_jsonl(path)?;
            rows.iter()
                .map(|m| Ok(TieredAnnotation::gold(parse_markup_with_id(&m.marked_text, &m.id)?)))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let gold_ids: std::collections::HashSet<&str> = gold_items.iter().map(TieredAnnotation::record_id).collect();
    let small_ids: std::collections::HashSet<&str> = small.iter().map(|s| s.record_id()).collect();
    let large_ids: std::collections::HashSet<&str> = large.iter().map(|s| s.record_id()).collect();
    let keep = |s: &&SegmentedUtterance, other: &std::collections::HashSet<&str>| {
        other.contains(s.record_id()) && !gold_ids.contains(s.record_id())
    };
    let skipped_gold = large
        .iter()
        .filter(|s| small_ids.contains(s.record_id()) && gold_ids.contains(s.record_id()))
        .count();
    let large_round: Vec<SegmentedUtterance> = large.iter().filter(|s| keep(s, &small_ids)).cloned().collect();
    let small_round: Vec<SegmentedUtterance> = small.iter().filter(|s| keep(s, &large_ids)).cloned().collect();

    let outcome = triage_round(
        &small_round,
        &large_round,
        &RoundConfig {
            threshold,
            round_index: round,
        },
    )?;
    let (resolved, pending) = match &decisions {
        Some(path) => {
            run.input(path)?;
            let entries: Vec<ReviewEntry> = read_jsonl(path)?;
            // a fresh log per run keeps reruns byte-identical
            let tmp = run.temp_output()?;
            let mut log = AuditLog::open(tmp.path())?;
            let out = resolve_queue(&outcome.review_queue, &entries, Some(&mut log))?;
            drop(log);
            run.persist(tmp, "audit.jsonl")?;
            out
        }
        None => (Vec::new(), outcome.review_queue.clone()),
    };

    let mut silver = outcome.accepted.clone();
    silver.extend(resolved.iter().cloned());
    let mut tiers = vec![TierSet { round, items: silver }];
    if !gold_items.is_empty() {
        tiers.push(TierSet {
            round: 0,
            items: gold_items.clone(),
        });
    }
    let training = merge_rounds(&tiers)?;

    run.write_jsonl("accepted.jsonl", &outcome.accepted)?;
    run.write_jsonl("review_queue.jsonl", &pending)?;
    run.write_jsonl("training.jsonl", &training.items)?;
    run.write_jsonl("segmentations.jsonl", training.items.iter().map(|t| &t.annotation))?;
    run.write_json(
        "triage_report.json",
        &TriageReport {
            threshold,
            round,
            ill_formatted_large,
            ill_formatted_small,
            skipped_gold,
            agreed: outcome.accepted.len(),
            queued: outcome.review_queue.len(),
            resolved: resolved.len(),
            pending: pending.len(),
            training: training.counts,
        },
    )
}

/// Segmentations in analysis order: corpus order when a corpus is
/// configured (every record must then be segmented), else by record id.
fn ordered_segmentations(run: &mut Run) -> Result<Vec<SegmentedUtterance>> {
    let mut segs = run.segmentations()?;
    if run.cfg.corpus.is_none() {
        let mut all: Vec<SegmentedUtterance> = segs.into_values().collect();
        all.sort_by(|a, b| a.record_id().cmp(b.record_id()));
        return Ok(all);
    }
    let corpus = run.corpus()?.corpus;
    corpus
        .records()
        .iter()
        .map(|r| {
            segs.remove(&r.record_id)
                .ok_or_else(|| reqlens::Error::MissingSegmentation(r.record_id.clone()).into())
        })
        .collect()
}

fn extract(run: &mut Run) -> Result<()> {
    let segs = ordered_segmentations(run)?;
    let templates: Vec<ExpressionTemplate> = segs.iter().map(extract_template).collect();
    run.write_jsonl("templates.jsonl", &templates)
}

fn classify(run: &mut Run) -> Result<()> {
    let lex = run.lexicon()?;
    let segs = ordered_segmentations(run)?;
    let classified = classify_all(&segs, &lex);
    let hist: TaxonomyHistogram = classified.iter().map(|c| c.class).collect();
    run.write_jsonl("classified.jsonl", &classified)?;
    run.write("taxonomy.csv", hist.to_csv().as_bytes())
}

type Metric = (&'static str, fn(&UserStats) -> Option<f64>);

const METRICS: [Metric; 3] = [
    ("mattr", |s| s.mattr),
    ("mtld", |s| s.mtld),
    ("mean_formatting_ratio", |s| s.mean_formatting_ratio),
];

/// Histograms of each per-user metric over shared bins, one count column per
/// set: `metric,bin_lo,bin_hi,<set>...`. Ratios use [0, 1]; MTLD uses
/// [0, max] over all sets.
fn distributions_csv(sets: &[(&str, &[UserStats])], bins: usize) -> Result<String> {
    let mut out = String::from("metric,bin_lo,bin_hi");
    for (name, _) in sets {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (metric, get) in METRICS {
        let values: Vec<Vec<f64>> = sets
            .iter()
            .map(|(_, rows)| rows.iter().filter_map(get).collect())
            .collect();
        let hi = match metric {
            "mtld" => values.iter().flatten().copied().fold(0.0, f64::max),
            _ => 1.0,
        };
        let hi = if hi > 0.0 { hi } else { 1.0 };
        let hists = values
            .iter()
            .map(|v| Histogram::build(v, bins, 0.0, hi))
            .collect::<reqlens::Result<Vec<_>>>()?;
        for (b, (lo, hi)) in hists[0].edges().into_iter().enumerate() {
            out.push_str(&format!("{metric},{lo},{hi}"));
            for h in &hists {
                out.push_str(&format!(",{}", h.counts[b]));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn stats(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?.corpus;
    let segs = run.segmentations()?;
    let rows = user_stats(&corpus, &segs, run.cfg.richness.mode, &run.cfg.richness.config())?;
    let dist = distributions_csv(&[("users", &rows)], run.cfg.richness.bins)?;
    run.write("user_stats.csv", user_stats_csv(&rows).as_bytes())?;
    run.write("distributions.csv", dist.as_bytes())
}

#[derive(Serialize)]
struct MetricSummary {
    n: usize,
    mean: Option<f64>,
    median: Option<f64>,
}

fn summarize(rows: &[UserStats]) -> BTreeMap<&'static str, MetricSummary> {
    METRICS
        .iter()
        .map(|(name, get)| {
            let mut v: Vec<f64> = rows.iter().filter_map(get).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let mean = (n > 0).then(|| v.iter().sum::<f64>() / n as f64);
            let median = (n > 0).then(|| match n % 2 {
                1 => v[n / 2],
                _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
            });
            (*name, MetricSummary { n, mean, median })
        })
        .collect()
}

#[derive(Serialize)]
struct CompareSummary {
    main_mode: TextMode,
    reference_mode: TextMode,
    main: BTreeMap<&'static str, MetricSummary>,
    reference: BTreeMap<&'static str, MetricSummary>,
}

/// Per-user distributions of the corpus against the reference corpus. The
/// reference is read in the configured mode when it has segmentations, else
/// as full text.
fn compare(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?.corpus;
    let segs = run.segmentations()?;
    let cfg = run.cfg.richness.config();
    let main_mode = run.cfg.richness.mode;
    let main = user_stats(&corpus, &segs, main_mode, &cfg)?;

    let reference = run.reference_corpus()?;
    let ref_segs_path = run.cfg.compare.as_ref().and_then(|c| c.reference_segmentations.clone());
    let (ref_segs, reference_mode) = match ref_segs_path {
        Some(path) => (run.read_segmentations(&path)?, main_mode),
        None => (HashMap::new(), TextMode::FullText),
    };
    let reference_rows = user_stats(&reference, &ref_segs, reference_mode, &cfg)?;

    let dist = distributions_csv(
        &[("main", &main), ("reference", &reference_rows)],
        run.cfg.richness.bins,
    )?;
    run.write("compare.csv", dist.as_bytes())?;
    run.write_json(
        "compare_summary.json",
        &CompareSummary {
            main_mode,
            reference_mode,
            main: summarize(&main),
            reference: summarize(&reference_rows),
        },
    )
}

/// Template vectors of every record of `corpus`, in corpus order. Items are
/// keyed by record id and carry the template text.
fn template_vectors(
    corpus: &Corpus,
    segs: &HashMap<String, SegmentedUtterance>,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<EmbeddingVector>> {
    let items = corpus
        .records()
        .iter()
        .map(|r| {
            let seg = segs
                .get(&r.record_id)
                .ok_or_else(|| reqlens::Error::MissingSegmentation(r.record_id.clone()))?;
            Ok((r.record_id.clone(), extract_template(seg).template_text))
        })
        .collect::<reqlens::Result<Vec<_>>>()?;
    Ok(embed(&items, provider)?)
}

/// Splits corpus-ordered per-record values into per-user lists.
fn by_user<T: Clone>(corpus: &Corpus, values: &[T]) -> Vec<(String, Vec<T>)> {
    let mut offset = 0;
    corpus
        .users()
        .map(|(user, records)| {
            let chunk = values[offset..offset + records.len()].to_vec();
            offset += records.len();
            (user.to_string(), chunk)
        })
        .collect()
}

fn converge(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?.corpus;
    let cohort = run.cohort(&corpus);
    let segs = run.segmentations()?;
    let provider = run.embedder()?;
    let vectors = template_vectors(&cohort, &segs, provider.as_ref())?;
    let users: Vec<Vec<EmbeddingVector>> = by_user(&cohort, &vectors).into_iter().map(|(_, v)| v).collect();
    let c = run.cfg.convergence;
    let cfg = ConvergenceConfig {
        k: c.k,
        min_users: c.min_users,
    };
    let seed = run.cfg.seed.expect("validated");
    let curve = convergence_curve(&users, &cfg)?;
    let baseline = shuffle_baseline(&users, &cfg, c.trials, seed)?;
    run.write("convergence.csv", curve_csv(&curve, Some(&baseline)).as_bytes())
}

fn timelapse(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?.corpus;
    let cohort = run.cohort(&corpus);
    let segs = run.segmentations()?;
    let t = run.cfg.timelapse;
    let cfg = TimelapseConfig {
        batch_size: t.batch_size,
        min_batch_size: t.min_batch_size,
        mode: run.cfg.richness.mode,
        mtld_threshold: run.cfg.richness.mtld_threshold,
    };
    let full = timelapse_richness(&corpus, &segs, &cfg)?;
    let cohort_cfg = TimelapseConfig {
        batch_size: t.cohort_batch_size.unwrap_or(t.batch_size),
        ..cfg
    };
    let cohort_series = timelapse_richness(&cohort, &segs, &cohort_cfg)?;
    let rows = cohort_compare(&full, &cohort_series);
    run.write("timelapse_full.csv", full.to_csv().as_bytes())?;
    run.write("timelapse_cohort.csv", cohort_series.to_csv().as_bytes())?;
    run.write("cohort_compare.csv", cohort_csv(&rows).as_bytes())
}

/// PCA fitted on user mean vectors and anchors. Points are keyed `user:ID`,
/// `anchor:ID` and, for single dialogs, by plain record id.
fn pca_space(corpus: &Corpus, vectors: &[EmbeddingVector], anchors: &AnchorSet) -> Result<Projection2D> {
    let users = by_user(corpus, vectors);
    let means = users
        .iter()
        .map(|(u, v)| Ok((format!("user:{u}"), user_mean(v)?)))
        .collect::<reqlens::Result<Vec<_>>>()?;
    let mut fit: Vec<&EmbeddingVector> = means.iter().map(|(_, v)| v).collect();
    fit.extend(anchors.anchors().iter().map(|a| &a.vector));
    let model = fit_pca(&fit)?;
    let mut points = BTreeMap::new();
    for (id, v) in &means {
        points.insert(id.clone(), model.transform(v)?);
    }
    for a in anchors.anchors() {
        points.insert(format!("anchor:{}", a.anchor_id), model.transform(&a.vector)?);
    }
    for (r, v) in corpus.records().iter().zip(vectors) {
        points.insert(r.record_id.clone(), model.transform(v)?);
    }
    Ok(Projection2D {
        points,
        source: ProjectionSource::Pca,
    })
}

#[derive(Serialize)]
struct Assignment<'a> {
    record_id: &'a str,
    user_id: &'a str,
    #[serde(flatten)]
    matched: AnchorMatch,
}

#[derive(Serialize)]
struct ProjectReport {
    tau: f64,
    assigned: usize,
    unassigned: usize,
    projection: ProjectionSource,
}

fn project(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?.corpus;
    let segs = run.segmentations()?;
    let provider = run.embedder()?;
    let anchors = run.anchors(provider.as_ref())?;
    let vectors = template_vectors(&corpus, &segs, provider.as_ref())?;
    let tau = run.cfg.anchors.tau;

    let mut assignments = Vec::with_capacity(vectors.len());
    for (r, v) in corpus.records().iter().zip(&vectors) {
        assignments.push(Assignment {
            record_id: &r.record_id,
            user_id: &r.user_id,
            matched: nearest_anchor(v, anchors.anchors(), tau)?,
        });
    }
    let hist: TaxonomyHistogram = assignments.iter().filter_map(|a| a.matched.class()).collect();
    let projection = match run.cfg.projection.clone() {
        Some(path) => {
            run.input(&path)?;
            load_projection(&path)?
        }
        None => pca_space(&corpus, &vectors, &anchors)?,
    };
    let report = ProjectReport {
        tau,
        assigned: hist.total(),
        unassigned: assignments.len() - hist.total(),
        projection: projection.source,
    };
    run.write_jsonl("assignments.jsonl", &assignments)?;
    run.write("anchor_taxonomy.csv", hist.to_csv().as_bytes())?;
    run.write("projection.csv", projection.to_csv().as_bytes())?;
    run.write_json("project_report.json", &report)
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let width = hi - lo;
    if width == 0.0 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo - 0.1 * width, hi + 0.1 * width)
    }
}

#[derive(Serialize)]
struct Trajectory<'a> {
    user_id: &'a str,
    points: &'a [(f64, f64)],
}

/// Density of cohort users' dialog at `early_index` against the one at
/// `late_index`, on a shared grid. Only users reaching the late dialog count.
fn kde(run: &mut Run) -> Result<()> {
    let corpus = run.corpus()?.corpus;
    let cohort = run.cohort(&corpus);
    let projection = match run.cfg.projection.clone() {
        Some(path) => {
            run.input(&path)?;
            load_projection(&path)?
        }
        None => {
            let segs = run.segmentations()?;
            let provider = run.embedder()?;
            let anchors = run.anchors(provider.as_ref())?;
            let vectors = template_vectors(&corpus, &segs, provider.as_ref())?;
            pca_space(&corpus, &vectors, &anchors)?
        }
    };
    let k = run.cfg.kde;
    let mut trajectories = Vec::new();
    for (user, records) in cohort.users() {
        if records.len() > k.late_index {
            trajectories.push((user.to_string(), user_trajectory(user, &projection, &cohort)?));
        }
    }
    if trajectories.len() < 2 {
        return Err(CliError::new(
            "empty_input",
            format!(
                "{} cohort user(s) reach dialog {}; the density maps need at least 2",
                trajectories.len(),
                k.late_index + 1
            ),
        )
        .into());
    }
    let early: Vec<(f64, f64)> = trajectories.iter().map(|(_, t)| t[k.early_index]).collect();
    let late: Vec<(f64, f64)> = trajectories.iter().map(|(_, t)| t[k.late_index]).collect();
    let grid = GridSpec {
        nx: k.nx,
        ny: k.ny,
        x_range: Some(padded_range(early.iter().chain(&late).map(|p| p.0))),
        y_range: Some(padded_range(early.iter().chain(&late).map(|p| p.1))),
    };
    let early_grid = kde_2d(&early, &grid, k.bandwidth)?;
    let late_grid = kde_2d(&late, &grid, k.bandwidth)?;
    let diff = kde_diff(&late_grid, &early_grid)?;
    run.write_json("kde_early.json", &early_grid)?;
    run.write_json("kde_late.json", &late_grid)?;
    run.write_json("kde_diff.json", &diff)?;
    run.write_jsonl(
        "trajectories.jsonl",
        trajectories.iter().map(|(u, t)| Trajectory { user_id: u, points: t }),
    )
}
