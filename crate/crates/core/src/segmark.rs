//! Four-way span partition of an utterance and its inline markup encoding.
//!
//! Request, Context and Role are stored as explicit character spans; Expression
//! is whatever no span covers. Offsets count Unicode scalar values.
//!
//! Markup grammar:
//!
//! ```text
//! [[R]]...[[/R]]   [[C]]...[[/C]]   [[ROLE]]...[[/ROLE]]
//! ```
//!
//! Tags never nest. A literal `[[` is written `\[[`. A run of backslashes
//! directly in front of `[[` is halved; an odd run means the `[[` is literal.
//! Backslashes anywhere else are plain text, and a `[[` that does not start a
//! known tag is read as a literal `[`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::lexstats::tokenize_with_offsets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Request,
    Context,
    Role,
    Expression,
}

/// The three labels that are stored as explicit spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpanLabel {
    #[serde(rename = "R")]
    Request,
    #[serde(rename = "C")]
    Context,
    #[serde(rename = "ROLE")]
    Role,
}

impl SpanLabel {
    pub const ALL: [SpanLabel; 3] = [SpanLabel::Request, SpanLabel::Context, SpanLabel::Role];

    pub fn tag(self) -> &'static str {
        match self {
            SpanLabel::Request => "R",
            SpanLabel::Context => "C",
            SpanLabel::Role => "ROLE",
        }
    }
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl From<SpanLabel> for Label {
    fn from(l: SpanLabel) -> Self {
        match l {
            SpanLabel::Request => Label::Request,
            SpanLabel::Context => Label::Context,
            SpanLabel::Role => Label::Role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: SpanLabel,
}

impl Span {
    pub fn new(start: usize, end: usize, label: SpanLabel) -> Self {
        Span { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSegmented")]
pub struct SegmentedUtterance {
    record_id: String,
    text: String,
    spans: Vec<Span>,
}

#[derive(Deserialize)]
struct RawSegmented {
    record_id: String,
    text: String,
    #[serde(default)]
    spans: Vec<Span>,
}

impl TryFrom<RawSegmented> for SegmentedUtterance {
    type Error = Error;

    fn try_from(raw: RawSegmented) -> Result<Self> {
        SegmentedUtterance::new(raw.record_id, raw.text, raw.spans)
    }
}

fn check_spans(text: &str, spans: &[Span]) -> std::result::Result<(), String> {
    let n = text.chars().count();
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start >= s.end {
            return Err(format!("span {i} is empty ({}..{})", s.start, s.end));
        }
        if s.end > n {
            return Err(format!("span {i} ends at {} beyond text length {n}", s.end));
        }
        if i > 0 && s.start < prev_end {
            return Err(format!("span {i} overlaps or is out of order"));
        }
        prev_end = s.end;
    }
    Ok(())
}

impl SegmentedUtterance {
    /// Builds an utterance, sorting spans by start and rejecting empty,
    /// out-of-range or overlapping spans.
    pub fn new(record_id: impl Into<String>, text: impl Into<String>, mut spans: Vec<Span>) -> Result<Self> {
        let record_id = record_id.into();
        let text = text.into();
        spans.sort_by_key(|s| (s.start, s.end));
        check_spans(&text, &spans).map_err(|reason| Error::InvalidSegmentation {
            record_id: record_id.clone(),
            reason,
        })?;
        Ok(SegmentedUtterance { record_id, text, spans })
    }

    /// An utterance with no spans: all Expression.
    pub fn plain(record_id: impl Into<String>, text: impl Into<String>) -> Self {
        SegmentedUtterance {
            record_id: record_id.into(),
            text: text.into(),
            spans: Vec::new(),
        }
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn with_record_id(mut self, record_id: impl Into<String>) -> Self {
        self.record_id = record_id.into();
        self
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn validate(&self) -> Result<()> {
        check_spans(&self.text, &self.spans).map_err(|reason| Error::InvalidSegmentation {
            record_id: self.record_id.clone(),
            reason,
        })
    }

    /// Text covered by a span (character offsets).
    pub fn span_text(&self, span: &Span) -> &str {
        let (a, b) = char_range_to_bytes(&self.text, span.start, span.end);
        &self.text[a..b]
    }

    /// One label per character.
    pub fn char_labels(&self) -> Vec<Label> {
        let mut labels = vec![Label::Expression; self.char_len()];
        for s in &self.spans {
            for l in &mut labels[s.start..s.end] {
                *l = s.label.into();
            }
        }
        labels
    }

    /// Alternating runs of expression text and spans, in order. Expression
    /// runs are `None`.
    pub fn pieces(&self) -> Vec<(Option<SpanLabel>, &str)> {
        let mut out = Vec::with_capacity(self.spans.len() * 2 + 1);
        let mut byte_of = CharCursor::new(&self.text);
        let mut cursor = 0;
        for s in &self.spans {
            let a = byte_of.byte(s.start);
            let b = byte_of.byte(s.end);
            if a > cursor {
                out.push((None, &self.text[cursor..a]));
            }
            out.push((Some(s.label), &self.text[a..b]));
            cursor = b;
        }
        if cursor < self.text.len() {
            out.push((None, &self.text[cursor..]));
        }
        out
    }
}

/// Monotone char→byte offset lookup.
struct CharCursor<'a> {
    text: &'a str,
    chars: std::str::CharIndices<'a>,
    char_pos: usize,
    byte_pos: usize,
}

impl<'a> CharCursor<'a> {
    fn new(text: &'a str) -> Self {
        CharCursor {
            text,
            chars: text.char_indices(),
            char_pos: 0,
            byte_pos: 0,
        }
    }

    fn byte(&mut self, target: usize) -> usize {
        while self.char_pos < target {
            self.chars.next();
            self.char_pos += 1;
            self.byte_pos = self.chars.clone().next().map(|(b, _)| b).unwrap_or(self.text.len());
        }
        self.byte_pos
    }
}

fn char_range_to_bytes(text: &str, start: usize, end: usize) -> (usize, usize) {
    let mut c = CharCursor::new(text);
    let a = c.byte(start);
    (a, c.byte(end))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarkupError {
    #[error("unclosed [[{label}]] opened at offset {position}")]
    Unclosed { label: SpanLabel, position: usize },
    #[error("[[/{found}]] at offset {position} does not close [[{expected}]]")]
    Mismatched {
        expected: SpanLabel,
        found: SpanLabel,
        position: usize,
    },
    #[error("[[{inner}]] at offset {position} nested inside [[{outer}]]")]
    Nested {
        outer: SpanLabel,
        inner: SpanLabel,
        position: usize,
    },
    #[error("stray [[/{label}]] at offset {position}")]
    StrayClose { label: SpanLabel, position: usize },
    #[error("empty [[{label}]] span at offset {position}")]
    EmptySpan { label: SpanLabel, position: usize },
}

impl MarkupError {
    /// Character offset into the marked text.
    pub fn position(&self) -> usize {
        match *self {
            MarkupError::Unclosed { position, .. }
            | MarkupError::Mismatched { position, .. }
            | MarkupError::Nested { position, .. }
            | MarkupError::StrayClose { position, .. }
            | MarkupError::EmptySpan { position, .. } => position,
        }
    }
}

enum Tag {
    Open(SpanLabel),
    Close(SpanLabel),
}

/// Tries to read a tag starting at `i` (which must point at `[[`); returns the
/// tag and its length in chars.
fn read_tag(chars: &[char], i: usize) -> Option<(Tag, usize)> {
    const NAMES: [(&str, bool, SpanLabel); 6] = [
        ("ROLE", false, SpanLabel::Role),
        ("/ROLE", true, SpanLabel::Role),
        ("R", false, SpanLabel::Request),
        ("/R", true, SpanLabel::Request),
        ("C", false, SpanLabel::Context),
        ("/C", true, SpanLabel::Context),
    ];
    let rest = &chars[i + 2..];
    for (name, close, label) in NAMES {
        let n = name.len();
        if rest.len() >= n + 2 && rest[..n].iter().copied().eq(name.chars()) && rest[n] == ']' && rest[n + 1] == ']' {
            let tag = if close { Tag::Close(label) } else { Tag::Open(label) };
            return Some((tag, n + 4));
        }
    }
    None
}

fn starts_double_bracket(chars: &[char], i: usize) -> bool {
    i + 1 < chars.len() && chars[i] == '[' && chars[i + 1] == '['
}

pub fn parse_markup(marked: &str) -> Result<SegmentedUtterance, MarkupError> {
    parse_markup_with_id(marked, "")
}

pub fn parse_markup_with_id(marked: &str, record_id: &str) -> Result<SegmentedUtterance, MarkupError> {
    let chars: Vec<char> = marked.chars().collect();
    let mut text = String::with_capacity(marked.len());
    let mut out_len = 0usize;
    let mut spans = Vec::new();
    // (label, offset of the open tag in the input, output offset)
    let mut open: Option<(SpanLabel, usize, usize)> = None;

    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' {
            let run = chars[i..].iter().take_while(|&&c| c == '\\').count();
            let q = i + run;
            if starts_double_bracket(&chars, q) {
                for _ in 0..run / 2 {
                    text.push('\\');
                }
                out_len += run / 2;
                if run % 2 == 1 {
                    text.push_str("[[");
                    out_len += 2;
                    i = q + 2;
                } else {
                    i = q;
                }
            } else {
                for _ in 0..run {
                    text.push('\\');
                }
                out_len += run;
                i = q;
            }
            continue;
        }
        if starts_double_bracket(&chars, i) {
            if let Some((tag, len)) = read_tag(&chars, i) {
                match tag {
                    Tag::Open(label) => {
                        if let Some((outer, _, _)) = open {
                            return Err(MarkupError::Nested {
                                outer,
                                inner: label,
                                position: i,
                            });
                        }
                        open = Some((label, i, out_len));
                    }
                    Tag::Close(label) => match open.take() {
                        None => return Err(MarkupError::StrayClose { label, position: i }),
                        Some((expected, _, _)) if expected != label => {
                            return Err(MarkupError::Mismatched {
                                expected,
                                found: label,
                                position: i,
                            })
                        }
                        Some((_, open_pos, start)) => {
                            if start == out_len {
                                return Err(MarkupError::EmptySpan {
                                    label,
                                    position: open_pos,
                                });
                            }
                            spans.push(Span::new(start, out_len, label));
                        }
                    },
                }
                i += len;
                continue;
            }
        }
        text.push(c);
        out_len += 1;
        i += 1;
    }
    if let Some((label, position, _)) = open {
        return Err(MarkupError::Unclosed { label, position });
    }
    Ok(SegmentedUtterance {
        record_id: record_id.to_string(),
        text,
        spans,
    })
}

fn push_backslashes(out: &mut String, n: usize) {
    for _ in 0..n {
        out.push('\\');
    }
}

/// Writes a run of plain text so that `parse_markup` reads it back verbatim.
/// `tag_follows` says whether a tag is emitted right after the run.
fn emit_literal(seg: &[char], tag_follows: bool, out: &mut String) {
    let len = seg.len();
    let mut j = 0;
    while j < len {
        let c = seg[j];
        if c == '\\' {
            let run = seg[j..].iter().take_while(|&&c| c == '\\').count();
            let k = j + run;
            if k + 1 < len && seg[k] == '[' && seg[k + 1] == '[' {
                push_backslashes(out, 2 * run + 1);
                out.push_str("[[");
                j = k + 2;
            } else if (k == len || (k + 1 == len && seg[k] == '[')) && tag_follows {
                // the output continues with "[[" from the tag
                push_backslashes(out, 2 * run);
                j = k;
            } else {
                push_backslashes(out, run);
                j = k;
            }
        } else if c == '[' && j + 1 < len && seg[j + 1] == '[' {
            out.push_str("\\[[");
            j += 2;
        } else {
            out.push(c);
            j += 1;
        }
    }
}

pub fn emit_markup(s: &SegmentedUtterance) -> Result<String> {
    s.validate()?;
    let chars: Vec<char> = s.text.chars().collect();
    let mut out = String::with_capacity(s.text.len() + s.spans.len() * 12);
    let mut cursor = 0;
    for span in &s.spans {
        emit_literal(&chars[cursor..span.start], true, &mut out);
        out.push_str("[[");
        out.push_str(span.label.tag());
        out.push_str("]]");
        emit_literal(&chars[span.start..span.end], true, &mut out);
        out.push_str("[[/");
        out.push_str(span.label.tag());
        out.push_str("]]");
        cursor = span.end;
    }
    emit_literal(&chars[cursor..], false, &mut out);
    Ok(out)
}

/// Each token of the text with the label of the span containing its first
/// character (Expression when uncovered).
pub fn word_labels(s: &SegmentedUtterance) -> Vec<(String, Label)> {
    let tokens = tokenize_with_offsets(&s.text);
    let mut out = Vec::with_capacity(tokens.len());
    let mut spans = s.spans.iter().peekable();
    for tok in tokens {
        while spans.peek().is_some_and(|sp| sp.end <= tok.start) {
            spans.next();
        }
        let label = match spans.peek() {
            Some(sp) if sp.start <= tok.start => sp.label.into(),
            _ => Label::Expression,
        };
        out.push((tok.text, label));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_single_tag() {
        let s = parse_markup("Give me [[R]]a poem about cats[[/R]].").unwrap();
        assert_eq!(s.text(), "Give me a poem about cats.");
        assert_eq!(s.spans(), &[Span::new(8, 25, SpanLabel::Request)]);
        assert_eq!(s.span_text(&s.spans()[0]), "a poem about cats");
    }

    #[test]
    fn parse_two_tags() {
        let s = parse_markup("[[ROLE]]a lawyer[[/ROLE]]. [[R]]draft a contract[[/R]]").unwrap();
        assert_eq!(s.text(), "a lawyer. draft a contract");
        assert_eq!(
            s.spans(),
            &[Span::new(0, 8, SpanLabel::Role), Span::new(10, 26, SpanLabel::Request)]
        );
    }

    #[test]
    fn parse_errors_carry_positions() {
        assert_eq!(
            parse_markup("[[R]]unclosed").unwrap_err(),
            MarkupError::Unclosed {
                label: SpanLabel::Request,
                position: 0
            }
        );
        assert!(matches!(
            parse_markup("ab [[R]]x[[/C]]").unwrap_err(),
            MarkupError::Mismatched { position: 9, .. }
        ));
        assert!(matches!(
            parse_markup("[[R]]x [[C]]y[[/C]][[/R]]").unwrap_err(),
            MarkupError::Nested { position: 7, .. }
        ));
        assert!(matches!(
            parse_markup("abc[[/R]]").unwrap_err(),
            MarkupError::StrayClose { position: 3, .. }
        ));
        assert!(matches!(
            parse_markup("a[[R]][[/R]]").unwrap_err(),
            MarkupError::EmptySpan { position: 1, .. }
        ));
    }

    #[test]
    fn escapes() {
        let s = parse_markup(r"see \[[R]] here").unwrap();
        assert_eq!(s.text(), "see [[R]] here");
        assert!(s.spans().is_empty());
        let s = parse_markup(r"a\\[[R]]b[[/R]]").unwrap();
        assert_eq!(s.text(), r"a\b");
        assert_eq!(s.spans(), &[Span::new(2, 3, SpanLabel::Request)]);
        // unknown tags are text
        let s = parse_markup("x [[Q]] y").unwrap();
        assert_eq!(s.text(), "x [[Q]] y");
        // backslashes elsewhere are untouched
        let s = parse_markup(r"C:\\path\n").unwrap();
        assert_eq!(s.text(), r"C:\\path\n");
    }

    #[test]
    fn emit_examples() {
        let s = parse_markup("Give me [[R]]a poem[[/R]].").unwrap();
        assert_eq!(emit_markup(&s).unwrap(), "Give me [[R]]a poem[[/R]].");
        let plain = SegmentedUtterance::plain("x", "just text");
        assert_eq!(emit_markup(&plain).unwrap(), "just text");
        let lit = SegmentedUtterance::plain("", "a [[b]] c");
        let m = emit_markup(&lit).unwrap();
        assert_eq!(m, r"a \[[b]] c");
        assert_eq!(parse_markup(&m).unwrap(), lit);
    }

    #[test]
    fn tricky_round_trips() {
        let cases = [
            ("[", vec![Span::new(0, 1, SpanLabel::Request)]),
            ("a[b", vec![Span::new(2, 3, SpanLabel::Context)]),
            ("a\\b", vec![Span::new(2, 3, SpanLabel::Context)]),
            ("\\[[x", vec![Span::new(3, 4, SpanLabel::Role)]),
            ("[[[", vec![Span::new(1, 2, SpanLabel::Role)]),
            (
                "\\[",
                vec![Span::new(0, 1, SpanLabel::Request), Span::new(1, 2, SpanLabel::Context)],
            ),
            ("\\\\", vec![Span::new(1, 2, SpanLabel::Request)]),
        ];
        for (text, spans) in cases {
            let s = SegmentedUtterance::new("", text, spans).unwrap();
            let m = emit_markup(&s).unwrap();
            assert_eq!(parse_markup(&m).unwrap(), s, "via {m:?}");
        }
    }

    #[test]
    fn constructor_rejects_bad_spans() {
        assert!(SegmentedUtterance::new("", "abc", vec![Span::new(1, 1, SpanLabel::Request)]).is_err());
        assert!(SegmentedUtterance::new("", "abc", vec![Span::new(1, 4, SpanLabel::Request)]).is_err());
        assert!(SegmentedUtterance::new(
            "",
            "abcd",
            vec![Span::new(0, 2, SpanLabel::Request), Span::new(1, 3, SpanLabel::Context)]
        )
        .is_err());
        // unsorted input is sorted
        let s = SegmentedUtterance::new(
            "",
            "abcd",
            vec![Span::new(2, 3, SpanLabel::Request), Span::new(0, 2, SpanLabel::Context)],
        )
        .unwrap();
        assert_eq!(s.spans()[0].start, 0);
    }

    #[test]
    fn json_shape() {
        let s = parse_markup_with_id("Give me [[R]]a poem[[/R]].", "r1").unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"record_id":"r1","text":"Give me a poem.","spans":[{"start":8,"end":14,"label":"R"}]}"#
        );
        let back: SegmentedUtterance = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"record_id":"r1","text":"ab","spans":[{"start":0,"end":5,"label":"R"}]}"#;
        assert!(serde_json::from_str::<SegmentedUtterance>(bad).is_err());
    }

    #[test]
    fn word_labels_examples() {
        let s = parse_markup("Give me [[R]]a poem[[/R]].").unwrap();
        let got = word_labels(&s);
        let want = [
            ("give", Label::Expression),
            ("me", Label::Expression),
            ("a", Label::Request),
            ("poem", Label::Request),
        ];
        assert_eq!(got.len(), want.len());
        for ((w, l), (ew, el)) in got.iter().zip(want) {
            assert_eq!((w.as_str(), *l), (ew, el));
        }

        let s = SegmentedUtterance::plain("", "Tell me a joke");
        assert!(word_labels(&s).iter().all(|(_, l)| *l == Label::Expression));

        let s = parse_markup("[[C]]Once upon a time, there was[[/C]]").unwrap();
        assert!(word_labels(&s).iter().all(|(_, l)| *l == Label::Context));
    }

    #[test]
    fn straddling_word_takes_first_char_label() {
        // span covers "po" of "poem" and nothing else: word starts inside span
        let s = SegmentedUtterance::new("", "a poem", vec![Span::new(2, 4, SpanLabel::Request)]).unwrap();
        assert_eq!(word_labels(&s)[1].1, Label::Request);
        // span starts mid-word: word belongs to expression
        let s = SegmentedUtterance::new("", "a poem", vec![Span::new(3, 6, SpanLabel::Request)]).unwrap();
        assert_eq!(word_labels(&s)[1].1, Label::Expression);
    }

    #[test]
    fn pieces_cover_text() {
        let s = parse_markup("Hi [[R]]écris[[/R]] ok [[C]]x[[/C]]").unwrap();
        let joined: String = s.pieces().iter().map(|(_, t)| *t).collect();
        assert_eq!(joined, s.text());
        assert_eq!(s.pieces()[1], (Some(SpanLabel::Request), "écris"));
    }
}
