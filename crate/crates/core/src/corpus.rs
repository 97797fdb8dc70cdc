//! Chat-log ingestion, spam filtering and cohort selection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::jsonl::read_jsonl;

/// First user turn of one dialog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    #[serde(rename = "conversation_hash")]
    pub record_id: String,
    #[serde(rename = "user_hash")]
    pub user_id: String,
    pub dialog_id: String,
    /// UTC seconds since the epoch.
    pub timestamp: i64,
    #[serde(rename = "model")]
    pub model_tag: String,
    pub text: String,
    #[serde(rename = "language", default, skip_serializing_if = "Option::is_none")]
    pub language_tag: Option<String>,
}

/// Where each record field lives in an input object. Paths are dotted, with
/// numeric segments indexing arrays (`conversation.0.content`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMap {
    pub record_id: String,
    pub user_id: String,
    pub timestamp: String,
    pub model_tag: String,
    pub text: String,
    pub language: String,
    /// Falls back to the record id when absent from an object.
    pub dialog_id: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            record_id: "conversation_hash".into(),
            user_id: "user_hash".into(),
            timestamp: "timestamp".into(),
            model_tag: "model".into(),
            text: "text".into(),
            language: "language".into(),
            dialog_id: "dialog_id".into(),
        }
    }
}

fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, seg| match v {
        Value::Object(map) => map.get(seg),
        Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        _ => None,
    })
}

fn as_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Accepts integer seconds, integral floats, numeric strings, RFC 3339 and
/// `YYYY-MM-DD HH:MM:SS` (taken as UTC).
pub fn parse_timestamp(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64().or_else(|| {
            n.as_f64()
                .filter(|f| f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15)
                .map(|f| f as i64)
        }),
        Value::String(s) => {
            let s = s.trim();
            if let Ok(n) = s.parse::<i64>() {
                return Some(n);
            }
            if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
                return Some(dt.timestamp());
            }
            for fmt in [
                "%Y-%m-%d %H:%M:%S%.f",
                "%Y-%m-%dT%H:%M:%S%.f",
                "%Y-%m-%d %H:%M:%S%.f%:z",
            ] {
                if let Ok(dt) = DateTime::parse_from_str(s, fmt) {
                    return Some(dt.timestamp());
                }
                if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                    return Some(dt.and_utc().timestamp());
                }
            }
            None
        }
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    MalformedJson,
    MissingText,
    MissingField,
    BadTimestamp,
}

/// Outcome of mapping one input object.
fn map_record(value: &Value, schema: &SchemaMap) -> std::result::Result<UtteranceRecord, SkipReason> {
    let text = lookup(value, &schema.text)
        .and_then(Value::as_str)
        .filter(|t| !t.trim().is_empty())
        .ok_or(SkipReason::MissingText)?;
    let record_id = lookup(value, &schema.record_id)
        .and_then(as_string)
        .filter(|s| !s.is_empty())
        .ok_or(SkipReason::MissingField)?;
    let user_id = lookup(value, &schema.user_id)
        .and_then(as_string)
        .ok_or(SkipReason::MissingField)?;
    let timestamp = lookup(value, &schema.timestamp)
        .ok_or(SkipReason::MissingField)
        .and_then(|v| parse_timestamp(v).ok_or(SkipReason::BadTimestamp))?;
    if timestamp < 0 {
        return Err(SkipReason::BadTimestamp);
    }
    let model_tag = lookup(value, &schema.model_tag)
        .and_then(as_string)
        .ok_or(SkipReason::MissingField)?;
    let dialog_id = lookup(value, &schema.dialog_id)
        .and_then(as_string)
        .unwrap_or_else(|| record_id.clone());
    let language_tag = lookup(value, &schema.language).and_then(as_string);
    Ok(UtteranceRecord {
        record_id,
        user_id,
        dialog_id,
        timestamp,
        model_tag,
        text: text.to_string(),
        language_tag,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines: usize,
    pub loaded: usize,
    pub skipped: usize,
    pub skipped_by_reason: BTreeMap<String, usize>,
}

/// Records sorted by `(user_id, timestamp, record_id)` with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<UtteranceRecord>,
}

fn sort_key(r: &UtteranceRecord) -> (&str, i64, &str) {
    (&r.user_id, r.timestamp, &r.record_id)
}

impl Corpus {
    pub fn from_records(mut records: Vec<UtteranceRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(Error::DuplicateRecord(r.record_id.clone()));
            }
        }
        records.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
        Ok(Corpus { records })
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<UtteranceRecord> {
        self.records
    }

    /// Per-user record groups, each chronological.
    pub fn users(&self) -> impl Iterator<Item = (&str, &[UtteranceRecord])> {
        self.records
            .chunk_by(|a, b| a.user_id == b.user_id)
            .map(|group| (group[0].user_id.as_str(), group))
    }

    pub fn user_count(&self) -> usize {
        self.users().count()
    }

    /// Keeps records for which `keep` is true; order is preserved.
    pub fn retain(&self, mut keep: impl FnMut(&UtteranceRecord) -> bool) -> Corpus {
        Corpus {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

pub fn load_corpus(path: &Path, schema: &SchemaMap) -> Result<(Corpus, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut records = Vec::new();
    let skip = |report: &mut LoadReport, reason: SkipReason| {
        report.skipped += 1;
        *report.skipped_by_reason.entry(format!("{reason:?}")).or_insert(0) += 1;
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(_) => {
                skip(&mut report, SkipReason::MalformedJson);
                continue;
            }
        };
        match map_record(&value, schema) {
            Ok(r) => records.push(r),
            Err(reason) => skip(&mut report, reason),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    report.loaded = records.len();
    Ok((Corpus::from_records(records)?, report))
}

#[derive(Deserialize)]
struct SpeakerUtterance {
    id: Value,
    speaker: Value,
    text: String,
}

/// Reads a speaker-keyed utterance collection (`{id, speaker, text}` per line,
/// as in politeness-style corpora) as a corpus of single utterances with
/// timestamp 0.
pub fn load_speaker_corpus(path: &Path) -> Result<Corpus> {
    let rows: Vec<SpeakerUtterance> = read_jsonl(path)?;
    let records: Vec<UtteranceRecord> = rows
        .into_iter()
        .filter(|r| !r.text.trim().is_empty())
        .filter_map(|r| {
            let id = as_string(&r.id)?;
            Some(UtteranceRecord {
                dialog_id: id.clone(),
                record_id: id,
                user_id: as_string(&r.speaker).unwrap_or_default(),
                timestamp: 0,
                model_tag: String::new(),
                text: r.text,
                language_tag: None,
            })
        })
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::from_records(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpamConfig {
    pub sim_threshold: f64,
    pub window_seconds: i64,
}

impl Default for SpamConfig {
    fn default() -> Self {
        SpamConfig {
            sim_threshold: 0.9,
            window_seconds: 300,
        }
    }
}

impl SpamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sim_threshold) {
            return Err(Error::InvalidArgument(format!(
                "sim_threshold must lie in [0, 1], got {}",
                self.sim_threshold
            )));
        }
        if self.window_seconds < 0 {
            return Err(Error::InvalidArgument("window_seconds must be >= 0".into()));
        }
        Ok(())
    }
}

fn token_set(text: &str) -> HashSet<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Jaccard similarity of lowercased whitespace-token sets. Two empty sets are
/// identical.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (token_set(a), token_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Drops a record when it is near-identical to, and close in time after, the
/// last record kept for the same user.
pub fn spam_filter(c: &Corpus, cfg: &SpamConfig) -> Corpus {
    let mut keep = Vec::with_capacity(c.len());
    for (_, group) in c.users() {
        let mut last: Option<(&UtteranceRecord, HashSet<String>)> = None;
        for r in group {
            let tokens = token_set(&r.text);
            let is_spam = last.as_ref().is_some_and(|(prev, prev_tokens)| {
                let union = prev_tokens.union(&tokens).count();
                let sim = if union == 0 {
                    1.0
                } else {
                    prev_tokens.intersection(&tokens).count() as f64 / union as f64
                };
                sim >= cfg.sim_threshold && r.timestamp - prev.timestamp <= cfg.window_seconds
            });
            if !is_spam {
                keep.push(r.clone());
                last = Some((r, tokens));
            }
        }
    }
    Corpus { records: keep }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortFilter {
    pub min_span_days: u32,
    pub min_dialogs: usize,
}

impl Default for CohortFilter {
    fn default() -> Self {
        CohortFilter {
            min_span_days: 14,
            min_dialogs: 10,
        }
    }
}

impl CohortFilter {
    pub fn validate(&self) -> Result<()> {
        if self.min_dialogs < 1 {
            return Err(Error::InvalidArgument("min_dialogs must be >= 1".into()));
        }
        Ok(())
    }

    /// Span must strictly exceed `min_span_days` (a zero minimum imposes no
    /// span constraint); dialog count is inclusive.
    pub fn admits(&self, records: &[UtteranceRecord]) -> bool {
        let (Some(first), Some(last)) = (records.first(), records.last()) else {
            return false;
        };
        let span_ok =
            self.min_span_days == 0 || last.timestamp - first.timestamp > i64::from(self.min_span_days) * 86_400;
        span_ok && records.len() >= self.min_dialogs
    }
}

pub fn select_long_term(c: &Corpus, f: &CohortFilter) -> Corpus {
    let mut records = Vec::new();
    for (_, group) in c.users() {
        if f.admits(group) {
            records.extend_from_slice(group);
        }
    }
    Corpus { records }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestType {
    Request,
    DirectQuestion,
    Both,
    Neither,
}

impl RequestType {
    pub fn is_request_making(self) -> bool {
        matches!(self, RequestType::Request | RequestType::Both)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriageVerdict {
    pub id: String,
    pub verdict: RequestType,
}

#[derive(Debug, Clone, Default)]
pub struct TriageVerdicts {
    by_id: HashMap<String, RequestType>,
}

impl TriageVerdicts {
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<TriageVerdict> = read_jsonl(path)?;
        Ok(rows.into_iter().collect())
    }

    pub fn insert(&mut self, id: impl Into<String>, verdict: RequestType) {
        self.by_id.insert(id.into(), verdict);
    }

    pub fn get(&self, id: &str) -> Option<RequestType> {
        self.by_id.get(id).copied()
    }
}

impl FromIterator<TriageVerdict> for TriageVerdicts {
    fn from_iter<I: IntoIterator<Item = TriageVerdict>>(iter: I) -> Self {
        TriageVerdicts {
            by_id: iter.into_iter().map(|v| (v.id, v.verdict)).collect(),
        }
    }
}

pub fn triage_request_type(u: &UtteranceRecord, verdicts: &TriageVerdicts) -> Result<RequestType> {
    verdicts
        .get(&u.record_id)
        .ok_or_else(|| Error::MissingVerdict(u.record_id.clone()))
}

/// Keeps only request-making records; every record must have a verdict.
pub fn filter_request_making(c: &Corpus, verdicts: &TriageVerdicts) -> Result<Corpus> {
    let mut records = Vec::with_capacity(c.len());
    for r in c.records() {
        if triage_request_type(r, verdicts)?.is_request_making() {
            records.push(r.clone());
        }
    }
    Ok(Corpus { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept: usize,
    pub dropped_spam: usize,
    pub dropped_cohort: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn rec(id: &str, user: &str, ts: i64, text: &str) -> UtteranceRecord {
        UtteranceRecord {
            record_id: id.into(),
            user_id: user.into(),
            dialog_id: id.into(),
            timestamp: ts,
            model_tag: "m".into(),
            text: text.into(),
            language_tag: None,
        }
    }

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_sorts_and_counts() {
        let f = write_tmp(&[
            r#"{"conversation_hash":"c","user_hash":"u2","timestamp":5,"model":"gpt","text":"hi"}"#,
            r#"{"conversation_hash":"a","user_hash":"u1","timestamp":9,"model":"gpt","text":"yo"}"#,
            r#"{"conversation_hash":"b","user_hash":"u1","timestamp":"1970-01-01T00:00:02Z","model":"gpt","text":"hey","language":"en"}"#,
        ]);
        let (c, report) = load_corpus(f.path(), &SchemaMap::default()).unwrap();
        let ids: Vec<_> = c.records().iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(report.loaded, 3);
        assert_eq!(report.skipped, 0);
        assert_eq!(c.records()[0].timestamp, 2);
        assert_eq!(c.records()[0].language_tag.as_deref(), Some("en"));
    }

    #[test]
    fn load_skips_missing_text() {
        let f = write_tmp(&[
            r#"{"conversation_hash":"a","user_hash":"u1","timestamp":1,"model":"gpt","text":"hello"}"#,
            r#"{"conversation_hash":"b","user_hash":"u1","timestamp":2,"model":"gpt"}"#,
        ]);
        let (c, report) = load_corpus(f.path(), &SchemaMap::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.skipped_by_reason["MissingText"], 1);
    }

    #[test]
    fn load_rejects_duplicates_and_empty() {
        let f = write_tmp(&[
            r#"{"conversation_hash":"a","user_hash":"u1","timestamp":1,"model":"gpt","text":"x"}"#,
            r#"{"conversation_hash":"a","user_hash":"u2","timestamp":2,"model":"gpt","text":"y"}"#,
        ]);
        assert!(matches!(
            load_corpus(f.path(), &SchemaMap::default()),
            Err(Error::DuplicateRecord(id)) if id == "a"
        ));
        let f = write_tmp(&[r#"{"conversation_hash":"a"}"#]);
        assert!(matches!(
            load_corpus(f.path(), &SchemaMap::default()),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/x.jsonl"), &SchemaMap::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn nested_schema_paths() {
        let f = write_tmp(&[
            r#"{"conversation_hash":"a","hashed_ip":"u","timestamp":"2023-04-09 00:02:53","model":"gpt-4","conversation":[{"role":"user","content":"Write a poem"}]}"#,
        ]);
        let schema = SchemaMap {
            user_id: "hashed_ip".into(),
            text: "conversation.0.content".into(),
            ..Default::default()
        };
        let (c, _) = load_corpus(f.path(), &schema).unwrap();
        assert_eq!(c.records()[0].text, "Write a poem");
        assert_eq!(c.records()[0].timestamp, 1_680_998_573);
    }

    #[test]
    fn spam_examples() {
        let cfg = SpamConfig {
            sim_threshold: 0.9,
            window_seconds: 60,
        };
        let c = Corpus::from_records(vec![
            rec("a", "u", 0, "write a poem"),
            rec("b", "u", 10, "Write a poem"),
        ])
        .unwrap();
        assert_eq!(spam_filter(&c, &cfg).len(), 1);
        let c = Corpus::from_records(vec![
            rec("a", "u", 0, "write a poem"),
            rec("b", "u", 7200, "write a poem"),
        ])
        .unwrap();
        assert_eq!(spam_filter(&c, &cfg).len(), 2);
        let c = Corpus::from_records(vec![
            rec("a", "u", 0, "write a poem"),
            rec("b", "u", 10, "fix this code"),
        ])
        .unwrap();
        assert_eq!(token_jaccard("write a poem", "fix this code"), 0.0);
        assert_eq!(spam_filter(&c, &cfg).len(), 2);
        // different users never interact
        let c = Corpus::from_records(vec![rec("a", "u", 0, "same"), rec("b", "v", 1, "same")]).unwrap();
        assert_eq!(spam_filter(&c, &cfg).len(), 2);
        assert!(spam_filter(&Corpus::default(), &cfg).is_empty());
    }

    #[test]
    fn spam_compares_with_last_kept() {
        let cfg = SpamConfig {
            sim_threshold: 0.5,
            window_seconds: 100,
        };
        // b ~ a (dropped); c ~ a but not ~ b, still within the window of a
        let c = Corpus::from_records(vec![
            rec("a", "u", 0, "w x y z"),
            rec("b", "u", 10, "w x y q"),
            rec("c", "u", 20, "w x y z k"),
        ])
        .unwrap();
        let once = spam_filter(&c, &cfg);
        assert_eq!(once.len(), 1);
        assert_eq!(spam_filter(&once, &cfg), once);
    }

    fn user_records(user: &str, n: usize, span_secs: i64) -> Vec<UtteranceRecord> {
        (0..n)
            .map(|i| {
                let ts = if n == 1 {
                    0
                } else {
                    span_secs * i as i64 / (n as i64 - 1)
                };
                rec(&format!("{user}-{i}"), user, ts, "x")
            })
            .collect()
    }

    #[test]
    fn long_term_examples() {
        let day = 86_400;
        let mut rs = user_records("keep", 12, 20 * day);
        rs.extend(user_records("exact", 12, 14 * day));
        rs.extend(user_records("few", 9, 30 * day));
        let c = Corpus::from_records(rs).unwrap();
        let out = select_long_term(&c, &CohortFilter::default());
        let users: Vec<_> = out.users().map(|(u, _)| u.to_string()).collect();
        assert_eq!(users, ["keep"]);
    }

    #[test]
    fn zero_filter_is_identity() {
        let mut rs = user_records("a", 1, 0);
        rs.extend(user_records("b", 3, 100));
        let c = Corpus::from_records(rs).unwrap();
        let f = CohortFilter {
            min_span_days: 0,
            min_dialogs: 1,
        };
        assert_eq!(select_long_term(&c, &f), c);
    }

    #[test]
    fn triage_verdicts() {
        let mut v = TriageVerdicts::default();
        v.insert("a", RequestType::Request);
        v.insert("b", RequestType::DirectQuestion);
        v.insert("c", RequestType::Both);
        let c = Corpus::from_records(vec![
            rec("a", "u", 0, "x"),
            rec("b", "u", 1, "y"),
            rec("c", "u", 2, "z"),
        ])
        .unwrap();
        assert_eq!(triage_request_type(&c.records()[0], &v).unwrap(), RequestType::Request);
        let kept = filter_request_making(&c, &v).unwrap();
        let ids: Vec<_> = kept.records().iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        let missing = rec("zz", "u", 0, "q");
        assert!(matches!(
            triage_request_type(&missing, &v),
            Err(Error::MissingVerdict(_))
        ));
    }

    #[test]
    fn speaker_adapter() {
        let f = write_tmp(&[
            r#"{"id":"1","speaker":"alice","text":"Could you please fix this?"}"#,
            r#"{"id":2,"speaker":"bob","text":"Thanks!"}"#,
        ]);
        let c = load_speaker_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.records().iter().all(|r| r.timestamp == 0));
        assert_eq!(c.records()[0].user_id, "alice");
    }

    #[test]
    fn record_json_round_trip_uses_default_schema() {
        let r = rec("a", "u", 3, "hello");
        let line = serde_json::to_string(&r).unwrap();
        let f = write_tmp(&[&line]);
        let (c, _) = load_corpus(f.path(), &SchemaMap::default()).unwrap();
        assert_eq!(c.records()[0], r);
    }
}
