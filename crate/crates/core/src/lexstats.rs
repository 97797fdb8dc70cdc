//! Tokenization and lexical richness: TTR, MATTR, MTLD and the formatting ratio.
//!
//! A token is a maximal run of alphanumeric characters, lowercased. Whitespace,
//! punctuation and symbols all act as boundaries, so `"I'm"` yields `i`, `m` and
//! `"Hello—hello!!"` yields `hello`, `hello`.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::segmark::{word_labels, Label, SegmentedUtterance};

/// Lowercased word tokens of a text, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenStream(Vec<String>);

impl TokenStream {
    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn extend(&mut self, other: TokenStream) {
        self.0.extend(other.0);
    }
}

impl From<Vec<String>> for TokenStream {
    fn from(tokens: Vec<String>) -> Self {
        TokenStream(tokens.into_iter().filter(|t| !t.is_empty()).collect())
    }
}

impl FromIterator<String> for TokenStream {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        TokenStream(iter.into_iter().filter(|t| !t.is_empty()).collect())
    }
}

/// A token together with the character offset of its first character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetToken {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

pub fn tokenize(text: &str) -> TokenStream {
    TokenStream(tokenize_with_offsets(text).into_iter().map(|t| t.text).collect())
}

/// Tokenize, keeping character (not byte) offsets into `text`.
pub fn tokenize_with_offsets(text: &str) -> Vec<OffsetToken> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = pos;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push(OffsetToken {
                start,
                end: pos,
                text: std::mem::take(&mut current),
            });
        }
        pos += 1;
    }
    if !current.is_empty() {
        out.push(OffsetToken {
            start,
            end: pos,
            text: current,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RichnessConfig {
    pub mattr_window: usize,
    pub mtld_threshold: f64,
}

impl Default for RichnessConfig {
    fn default() -> Self {
        RichnessConfig {
            mattr_window: 50,
            mtld_threshold: 0.72,
        }
    }
}

impl RichnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mattr_window < 1 {
            return Err(Error::InvalidArgument("mattr_window must be >= 1".into()));
        }
        if !(self.mtld_threshold > 0.0 && self.mtld_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mtld_threshold must lie in (0, 1), got {}",
                self.mtld_threshold
            )));
        }
        Ok(())
    }
}

pub fn ttr<T: Eq + Hash>(tokens: &[T]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token stream"));
    }
    let distinct: HashSet<&T> = tokens.iter().collect();
    Ok(distinct.len() as f64 / tokens.len() as f64)
}

/// Moving-average TTR over every contiguous window of `window` tokens.
/// Streams no longer than the window fall back to plain TTR.
pub fn mattr<T: Eq + Hash>(tokens: &[T], window: usize) -> Result<f64> {
    if window < 1 {
        return Err(Error::InvalidArgument("MATTR window must be >= 1".into()));
    }
    if tokens.len() <= window {
        return ttr(tokens);
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in &tokens[..window] {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut distinct_sum = counts.len() as u64;
    for i in window..tokens.len() {
        let leaving = &tokens[i - window];
        if let Some(c) = counts.get_mut(leaving) {
            *c -= 1;
            if *c == 0 {
                counts.remove(leaving);
            }
        }
        *counts.entry(&tokens[i]).or_insert(0) += 1;
        distinct_sum += counts.len() as u64;
    }
    let n_windows = (tokens.len() - window + 1) as f64;
    Ok(distinct_sum as f64 / (n_windows * window as f64))
}

fn mtld_pass<'a, T, I>(tokens: I, n: usize, threshold: f64) -> f64
where
    T: Eq + Hash + 'a,
    I: Iterator<Item = &'a T>,
{
    let mut factors = 0.0;
    let mut types: HashSet<&T> = HashSet::new();
    let mut count = 0usize;
    for t in tokens {
        types.insert(t);
        count += 1;
        let running = types.len() as f64 / count as f64;
        if running <= threshold {
            factors += 1.0;
            types.clear();
            count = 0;
        }
    }
    if count > 0 {
        let running = types.len() as f64 / count as f64;
        factors += (1.0 - running) / (1.0 - threshold);
    }
    if factors == 0.0 {
        // no factor completed and the remainder is all-distinct
        n as f64
    } else {
        n as f64 / factors
    }
}

/// Bidirectional MTLD: mean of the forward and backward factor passes.
pub fn mtld<T: Eq + Hash>(tokens: &[T], threshold: f64) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token stream"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "MTLD threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let n = tokens.len();
    let forward = mtld_pass(tokens.iter(), n, threshold);
    let backward = mtld_pass(tokens.iter().rev(), n, threshold);
    Ok((forward + backward) / 2.0)
}

/// Unit in which the formatting ratio is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormattingUnit {
    #[default]
    Words,
    /// Non-whitespace characters.
    Chars,
}

/// Fraction of an utterance's words labelled Expression.
pub fn formatting_ratio(s: &SegmentedUtterance) -> Result<f64> {
    let labels = word_labels(s);
    if labels.is_empty() {
        return Err(Error::EmptyInput("utterance has no tokens"));
    }
    let expr = labels.iter().filter(|(_, l)| *l == Label::Expression).count();
    Ok(expr as f64 / labels.len() as f64)
}

pub fn formatting_ratio_in(s: &SegmentedUtterance, unit: FormattingUnit) -> Result<f64> {
    match unit {
        FormattingUnit::Words => formatting_ratio(s),
        FormattingUnit::Chars => {
            let mut total = 0usize;
            let mut expr = 0usize;
            for (ch, label) in s.text().chars().zip(s.char_labels()) {
                if ch.is_whitespace() {
                    continue;
                }
                total += 1;
                if label == Label::Expression {
                    expr += 1;
                }
            }
            if total == 0 {
                return Err(Error::EmptyInput("utterance has no characters"));
            }
            Ok(expr as f64 / total as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    #[default]
    ExpressionOnly,
    FullText,
}

impl std::str::FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expression_only" | "expression" => Ok(TextMode::ExpressionOnly),
            "full_text" | "full" => Ok(TextMode::FullText),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

/// Tokens of an utterance under the given mode. In expression-only mode a word
/// belongs to the expression when its first character is uncovered.
pub fn mode_tokens(s: &SegmentedUtterance, mode: TextMode) -> Vec<String> {
    match mode {
        TextMode::FullText => tokenize(s.text()).into_inner(),
        TextMode::ExpressionOnly => word_labels(s)
            .into_iter()
            .filter(|(_, l)| *l == Label::Expression)
            .map(|(w, _)| w)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Richness {
    pub mattr: f64,
    pub mtld: f64,
}

/// MATTR and MTLD over one user's utterances, concatenated in the given
/// (chronological) order.
pub fn user_richness(utterances: &[SegmentedUtterance], mode: TextMode, cfg: &RichnessConfig) -> Result<Richness> {
    cfg.validate()?;
    let tokens: Vec<String> = utterances.iter().flat_map(|u| mode_tokens(u, mode)).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyInput("user has no tokens"));
    }
    Ok(Richness {
        mattr: mattr(&tokens, cfg.mattr_window)?,
        mtld: mtld(&tokens, cfg.mtld_threshold)?,
    })
}

/// One row of the per-user statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStats {
    pub user_id: String,
    pub n_dialogs: usize,
    pub mattr: Option<f64>,
    pub mtld: Option<f64>,
    pub mean_formatting_ratio: Option<f64>,
}

/// Richness and mean formatting ratio for every user of a corpus, in user-id
/// order. In full-text mode records without a segmentation are read as plain
/// text; they then count for richness but not for the formatting ratio.
pub fn user_stats(
    corpus: &Corpus,
    segmentations: &HashMap<String, SegmentedUtterance>,
    mode: TextMode,
    cfg: &RichnessConfig,
) -> Result<Vec<UserStats>> {
    cfg.validate()?;
    let users: Vec<_> = corpus.users().collect();
    users
        .par_iter()
        .map(|(user_id, records)| {
            let mut tokens = Vec::new();
            let mut ratios = Vec::new();
            for r in records.iter() {
                match segmentations.get(&r.record_id) {
                    Some(seg) => {
                        tokens.extend(mode_tokens(seg, mode));
                        if let Ok(v) = formatting_ratio(seg) {
                            ratios.push(v);
                        }
                    }
                    None if mode == TextMode::FullText => tokens.extend(tokenize(&r.text).into_inner()),
                    None => return Err(Error::MissingSegmentation(r.record_id.clone())),
                }
            }
            let (mattr_v, mtld_v) = if tokens.is_empty() {
                (None, None)
            } else {
                (
                    Some(mattr(&tokens, cfg.mattr_window)?),
                    Some(mtld(&tokens, cfg.mtld_threshold)?),
                )
            };
            Ok(UserStats {
                user_id: user_id.to_string(),
                n_dialogs: records.len(),
                mattr: mattr_v,
                mtld: mtld_v,
                mean_formatting_ratio: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
            })
        })
        .collect()
}

/// `user_id,n_dialogs,mattr,mtld,mean_formatting_ratio`; undefined values are
/// left empty.
pub fn user_stats_csv(rows: &[UserStats]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("user_id,n_dialogs,mattr,mtld,mean_formatting_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            crate::geom::csv_field(&r.user_id),
            r.n_dialogs,
            cell(r.mattr),
            cell(r.mtld),
            cell(r.mean_formatting_ratio)
        ));
    }
    out
}

/// Fixed-width histogram for distribution dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Values outside `[lo, hi]` are clamped into the edge bins; `hi` itself
    /// falls in the last bin.
    pub fn build(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
        if bins == 0 || hi <= lo || hi.is_nan() || lo.is_nan() {
            return Err(Error::InvalidArgument("histogram needs bins >= 1 and hi > lo".into()));
        }
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values.iter().filter(|v| v.is_finite()) {
            let idx = ((v - lo) / width).floor();
            let idx = idx.clamp(0.0, (bins - 1) as f64) as usize;
            counts[idx] += 1;
        }
        Ok(Histogram { lo, hi, counts })
    }

    pub fn edges(&self) -> Vec<(f64, f64)> {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len())
            .map(|i| (self.lo + i as f64 * width, self.lo + (i + 1) as f64 * width))
            .collect()
    }
}
