//! Review-and-revise annotation loop.
//!
//! A large annotator and a small annotator label the same raw batch. Records
//! on which they differ by fewer than δ words take the large annotator's
//! labels and join the silver tier directly; the rest go to a human review
//! queue. Reviewed items join the silver tier with the reviewer's decision
//! recorded. Gold and silver tiers are then merged into a training set.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};
use crate::jsonl::read_jsonl;
use crate::remote::{ordered_parallel_map, JsonClient, RetryPolicy};
use crate::segmark::{parse_markup_with_id, word_labels, SegmentedUtterance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointKind {
    /// HTTP service; the bearer token is read from `token_env` when set.
    Remote {
        url: String,
        #[serde(default)]
        token_env: Option<String>,
    },
    /// Recorded `{id, marked_text}` JSONL.
    Replay { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorEndpoint {
    pub name: String,
    #[serde(flatten)]
    pub kind: EndpointKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRequest<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub instructions: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedText {
    pub id: String,
    pub marked_text: String,
}

/// One annotator answer; failures are kept as values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub id: String,
    #[serde(flatten)]
    pub outcome: AnnotationOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnnotationOutcome {
    Marked { marked_text: String },
    Failed { error: String },
}

impl AnnotationResult {
    pub fn marked(id: impl Into<String>, marked_text: impl Into<String>) -> Self {
        AnnotationResult {
            id: id.into(),
            outcome: AnnotationOutcome::Marked {
                marked_text: marked_text.into(),
            },
        }
    }

    pub fn failed(id: impl Into<String>, error: impl Into<String>) -> Self {
        AnnotationResult {
            id: id.into(),
            outcome: AnnotationOutcome::Failed { error: error.into() },
        }
    }

    pub fn marked_text(&self) -> Option<&str> {
        match &self.outcome {
            AnnotationOutcome::Marked { marked_text } => Some(marked_text),
            AnnotationOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub instructions: String,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            instructions: String::new(),
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

pub fn load_replay(path: &Path) -> Result<HashMap<String, String>> {
    let rows: Vec<MarkedText> = read_jsonl(path)?;
    Ok(rows.into_iter().map(|r| (r.id, r.marked_text)).collect())
}

/// Sends every record to the endpoint and returns one result per record, in
/// input order.
pub fn annotate_batch(
    endpoint: &AnnotatorEndpoint,
    records: &[UtteranceRecord],
    opts: &BatchOptions,
) -> Result<Vec<AnnotationResult>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    match &endpoint.kind {
        EndpointKind::Replay { path } => {
            let stored = load_replay(path)?;
            let missing: Vec<&str> = records
                .iter()
                .map(|r| r.record_id.as_str())
                .filter(|id| !stored.contains_key(*id))
                .collect();
            if let Some(first) = missing.first() {
                return Err(Error::IncompleteReplay {
                    endpoint: endpoint.name.clone(),
                    missing: missing.len(),
                    first: first.to_string(),
                });
            }
            Ok(records
                .iter()
                .map(|r| AnnotationResult::marked(&r.record_id, &stored[&r.record_id]))
                .collect())
        }
        EndpointKind::Remote { url, token_env } => {
            let token = token_env.as_deref().and_then(|var| std::env::var(var).ok());
            let client = JsonClient::new(url.as_str(), token, opts.retry).map_err(Error::Remote)?;
            Ok(ordered_parallel_map(records, opts.parallelism, |r| {
                let req = AnnotationRequest {
                    id: &r.record_id,
                    text: &r.text,
                    instructions: &opts.instructions,
                };
                match client.post::<_, MarkedText>(&req) {
                    Ok(resp) if resp.id == r.record_id => AnnotationResult::marked(&r.record_id, resp.marked_text),
                    Ok(resp) => AnnotationResult::failed(
                        &r.record_id,
                        format!("response id {:?} does not match request", resp.id),
                    ),
                    Err(e) => AnnotationResult::failed(&r.record_id, e),
                }
            }))
        }
    }
}

/// Number of word positions whose labels differ.
pub fn agreement_count(a: &SegmentedUtterance, b: &SegmentedUtterance) -> Result<usize> {
    if a.text() != b.text() {
        return Err(Error::TextMismatch(a.record_id().to_string()));
    }
    let la = word_labels(a);
    let lb = word_labels(b);
    Ok(la.iter().zip(&lb).filter(|((_, x), (_, y))| x != y).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationTier {
    Gold,
    SilverAgreed,
    SilverReviewed,
}

/// Disagreement gate. Records are accepted when their disagreement count is
/// strictly lower than the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisagreementThreshold {
    /// Absolute number of words.
    Words(usize),
    /// Fraction of the record's word count.
    Fraction(f64),
}

impl DisagreementThreshold {
    pub fn accepts(&self, disagreements: usize, word_count: usize) -> bool {
        match *self {
            DisagreementThreshold::Words(delta) => disagreements < delta,
            DisagreementThreshold::Fraction(f) => (disagreements as f64) < f * word_count as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub threshold: DisagreementThreshold,
    pub round_index: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            threshold: DisagreementThreshold::Words(5),
            round_index: 1,
        }
    }
}

impl RoundConfig {
    pub fn with_delta(delta: usize, round_index: usize) -> Self {
        RoundConfig {
            threshold: DisagreementThreshold::Words(delta),
            round_index,
        }
    }
}

/// How an annotation entered its tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    Agreed {
        disagreements: usize,
    },
    #[serde(rename = "accept_L")]
    AcceptLarge,
    #[serde(rename = "accept_l")]
    AcceptSmall,
    Relabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieredAnnotation {
    pub tier: AnnotationTier,
    pub round: usize,
    pub provenance: Provenance,
    pub annotation: SegmentedUtterance,
}

impl TieredAnnotation {
    pub fn gold(annotation: SegmentedUtterance) -> Self {
        TieredAnnotation {
            tier: AnnotationTier::Gold,
            round: 0,
            provenance: Provenance::Gold,
            annotation,
        }
    }

    pub fn record_id(&self) -> &str {
        self.annotation.record_id()
    }
}

/// A record the two annotators disagreed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub record_id: String,
    pub round: usize,
    pub disagreements: usize,
    pub large: SegmentedUtterance,
    pub small: SegmentedUtterance,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TriageOutcome {
    pub accepted: Vec<TieredAnnotation>,
    pub review_queue: Vec<ReviewItem>,
}

/// Splits annotator pairs into agreed (silver) and queued records. Output
/// follows the order of `large`.
pub fn triage_round(
    small: &[SegmentedUtterance],
    large: &[SegmentedUtterance],
    cfg: &RoundConfig,
) -> Result<TriageOutcome> {
    let small_by_id: HashMap<&str, &SegmentedUtterance> = small.iter().map(|s| (s.record_id(), s)).collect();
    if small_by_id.len() != small.len() {
        return Err(Error::CoverageMismatch(
            "duplicate record in small annotator output".into(),
        ));
    }
    let large_ids: HashSet<&str> = large.iter().map(|s| s.record_id()).collect();
    if large_ids.len() != large.len() {
        return Err(Error::CoverageMismatch(
            "duplicate record in large annotator output".into(),
        ));
    }
    if let Some(id) = large_ids.iter().find(|id| !small_by_id.contains_key(*id)) {
        return Err(Error::CoverageMismatch(format!(
            "{id:?} missing from small annotator output"
        )));
    }
    if let Some(id) = small_by_id.keys().find(|id| !large_ids.contains(*id)) {
        return Err(Error::CoverageMismatch(format!(
            "{id:?} missing from large annotator output"
        )));
    }

    let mut out = TriageOutcome::default();
    for l in large {
        let s = small_by_id[l.record_id()];
        let disagreements = agreement_count(l, s)?;
        let words = word_labels(l).len();
        if cfg.threshold.accepts(disagreements, words) {
            out.accepted.push(TieredAnnotation {
                tier: AnnotationTier::SilverAgreed,
                round: cfg.round_index,
                provenance: Provenance::Agreed { disagreements },
                annotation: l.clone(),
            });
        } else {
            out.review_queue.push(ReviewItem {
                record_id: l.record_id().to_string(),
                round: cfg.round_index,
                disagreements,
                large: l.clone(),
                small: s.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ReviewDecision {
    #[serde(rename = "accept_L")]
    AcceptLarge,
    #[serde(rename = "accept_l")]
    AcceptSmall,
    Relabel {
        marked_text: String,
    },
}

/// A reviewer's verdict on one queued record, as stored in decision files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewEntry {
    pub id: String,
    #[serde(flatten)]
    pub decision: ReviewDecision,
}

pub fn resolve_review(item: &ReviewItem, decision: &ReviewDecision) -> Result<TieredAnnotation> {
    let (annotation, provenance) = match decision {
        ReviewDecision::AcceptLarge => (item.large.clone(), Provenance::AcceptLarge),
        ReviewDecision::AcceptSmall => (item.small.clone(), Provenance::AcceptSmall),
        ReviewDecision::Relabel { marked_text } => {
            let parsed = parse_markup_with_id(marked_text, &item.record_id)?;
            if parsed.text() != item.large.text() {
                return Err(Error::TextMismatch(item.record_id.clone()));
            }
            (parsed, Provenance::Relabel)
        }
    };
    Ok(TieredAnnotation {
        tier: AnnotationTier::SilverReviewed,
        round: item.round,
        provenance,
        annotation,
    })
}

/// Append-only JSONL record of review decisions.
pub struct AuditLog {
    file: File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub id: String,
    pub round: usize,
    pub disagreements: usize,
    #[serde(flatten)]
    pub decision: ReviewDecision,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(AuditLog { file })
    }

    pub fn append(&mut self, item: &ReviewItem, decision: &ReviewDecision) -> Result<()> {
        let entry = AuditEntry {
            id: item.record_id.clone(),
            round: item.round,
            disagreements: item.disagreements,
            decision: decision.clone(),
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io("<audit log>", e))
    }
}

/// Resolves every queued item from `decisions` (keyed by record id), logging
/// each to `audit`. Items without a decision are returned unresolved.
pub fn resolve_queue(
    queue: &[ReviewItem],
    decisions: &[ReviewEntry],
    mut audit: Option<&mut AuditLog>,
) -> Result<(Vec<TieredAnnotation>, Vec<ReviewItem>)> {
    let by_id: HashMap<&str, &ReviewDecision> = decisions.iter().map(|d| (d.id.as_str(), &d.decision)).collect();
    let mut resolved = Vec::new();
    let mut pending = Vec::new();
    for item in queue {
        match by_id.get(item.record_id.as_str()) {
            Some(decision) => {
                let annotation = resolve_review(item, decision)?;
                if let Some(log) = audit.as_deref_mut() {
                    log.append(item, decision)?;
                }
                resolved.push(annotation);
            }
            None => pending.push(item.clone()),
        }
    }
    Ok((resolved, pending))
}

/// One tier's worth of annotations: the gold root set or one round's silver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSet {
    /// 0 for gold; rounds count from 1.
    pub round: usize,
    pub items: Vec<TieredAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub gold: usize,
    pub silver_agreed: usize,
    pub silver_reviewed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingDataset {
    pub items: Vec<TieredAnnotation>,
    pub counts: TierCounts,
}

/// Unions tiers, gold first and then rounds in index order (stable within a
/// tier). A record may appear in only one tier.
pub fn merge_rounds(tiers: &[TierSet]) -> Result<TrainingDataset> {
    let mut order: Vec<&TierSet> = tiers.iter().collect();
    order.sort_by_key(|t| t.round);
    let mut seen = HashSet::new();
    let mut out = TrainingDataset::default();
    for tier in order {
        for item in &tier.items {
            if !seen.insert(item.record_id().to_string()) {
                return Err(Error::DuplicateRecord(item.record_id().to_string()));
            }
            match item.tier {
                AnnotationTier::Gold => out.counts.gold += 1,
                AnnotationTier::SilverAgreed => out.counts.silver_agreed += 1,
                AnnotationTier::SilverReviewed => out.counts.silver_reviewed += 1,
            }
            out.items.push(item.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub total: usize,
    pub ill_formatted: usize,
    pub rate: f64,
}

/// Checks each response parses and, when sources are given, preserves its
/// source text. Failed calls count as ill-formatted, as do responses for
/// records missing from `sources`.
pub fn format_validate(results: &[AnnotationResult], sources: Option<&HashMap<String, String>>) -> FormatReport {
    let ill_formatted = results
        .iter()
        .filter(|r| {
            let Some(marked) = r.marked_text() else {
                return true;
            };
            let Ok(parsed) = parse_markup_with_id(marked, &r.id) else {
                return true;
            };
            match sources {
                None => false,
                Some(src) => src.get(&r.id).is_none_or(|text| text != parsed.text()),
            }
        })
        .count();
    let total = results.len();
    FormatReport {
        total,
        ill_formatted,
        rate: if total == 0 {
            0.0
        } else {
            ill_formatted as f64 / total as f64
        },
    }
}

/// Parses well-formed results into utterances; ill-formed ones are skipped and
/// their ids returned.
pub fn parse_results(
    results: &[AnnotationResult],
    sources: &HashMap<String, String>,
) -> (Vec<SegmentedUtterance>, Vec<String>) {
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for r in results {
        let parsed = r
            .marked_text()
            .and_then(|m| parse_markup_with_id(m, &r.id).ok())
            .filter(|p| sources.get(&r.id).is_none_or(|src| src == p.text()));
        match parsed {
            Some(p) => ok.push(p),
            None => bad.push(r.id.clone()),
        }
    }
    (ok, bad)
}
