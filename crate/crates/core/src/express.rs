//! Expression templates and the 11-way structural taxonomy.
//!
//! A template is the utterance with every span replaced by a placeholder
//! token; its signature is the sequence of span labels. Classification first
//! decides whether the expression addresses another party (pronouns,
//! greetings, politeness markers, or any Role span), then matches the
//! signature against the fixed structural patterns.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexstats::tokenize;
use crate::segmark::{SegmentedUtterance, SpanLabel};

pub const REQUEST_PLACEHOLDER: &str = "__[REQUEST]__";
pub const CONTEXT_PLACEHOLDER: &str = "__[CONTEXT]__";
pub const ROLE_PLACEHOLDER: &str = "__[ROLE]__";

pub fn placeholder(label: SpanLabel) -> &'static str {
    match label {
        SpanLabel::Request => REQUEST_PLACEHOLDER,
        SpanLabel::Context => CONTEXT_PLACEHOLDER,
        SpanLabel::Role => ROLE_PLACEHOLDER,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionTemplate {
    pub record_id: String,
    pub template_text: String,
    pub signature: Vec<SpanLabel>,
}

impl ExpressionTemplate {
    /// Builds a template from raw text, reading the signature off the
    /// placeholders it contains.
    pub fn from_template_text(record_id: impl Into<String>, template_text: impl Into<String>) -> Self {
        let template_text = template_text.into();
        let signature = placeholder_positions(&template_text)
            .into_iter()
            .map(|(_, label)| label)
            .collect();
        ExpressionTemplate {
            record_id: record_id.into(),
            template_text,
            signature,
        }
    }

    /// Template text with placeholders blanked out.
    pub fn expression_text(&self) -> String {
        let mut out = self.template_text.clone();
        for label in SpanLabel::ALL {
            out = out.replace(placeholder(label), " ");
        }
        out
    }

    /// Puts span contents back into the placeholders, in order.
    pub fn fill(&self, contents: &[&str]) -> Result<String> {
        let slots = placeholder_positions(&self.template_text);
        if slots.len() != contents.len() {
            return Err(Error::InvalidArgument(format!(
                "template has {} placeholders, got {} contents",
                slots.len(),
                contents.len()
            )));
        }
        let mut out = String::with_capacity(self.template_text.len());
        let mut cursor = 0;
        for ((pos, label), content) in slots.into_iter().zip(contents) {
            out.push_str(&self.template_text[cursor..pos]);
            out.push_str(content);
            cursor = pos + placeholder(label).len();
        }
        out.push_str(&self.template_text[cursor..]);
        Ok(out)
    }
}

fn placeholder_positions(text: &str) -> Vec<(usize, SpanLabel)> {
    let mut found: Vec<(usize, SpanLabel)> = SpanLabel::ALL
        .iter()
        .flat_map(|&l| text.match_indices(placeholder(l)).map(move |(i, _)| (i, l)))
        .collect();
    found.sort_by_key(|(i, _)| *i);
    found
}

pub fn extract_template(s: &SegmentedUtterance) -> ExpressionTemplate {
    let mut template_text = String::with_capacity(s.text().len());
    let mut signature = Vec::with_capacity(s.spans().len());
    for (label, piece) in s.pieces() {
        match label {
            None => template_text.push_str(piece),
            Some(label) => {
                template_text.push_str(placeholder(label));
                signature.push(label);
            }
        }
    }
    ExpressionTemplate {
        record_id: s.record_id().to_string(),
        template_text,
        signature,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaxonomyClass {
    #[serde(rename = "NC_R")]
    NcR,
    #[serde(rename = "NC_Rn")]
    NcRn,
    #[serde(rename = "NC_RC")]
    NcRc,
    #[serde(rename = "NC_CR")]
    NcCr,
    #[serde(rename = "NC_RCRplus")]
    NcRcrPlus,
    #[serde(rename = "NC_RCCplus")]
    NcRccPlus,
    #[serde(rename = "NC_Cplus")]
    NcCplus,
    #[serde(rename = "NC_Other")]
    NcOther,
    #[serde(rename = "CONV_SingleR")]
    ConvSingleR,
    #[serde(rename = "CONV_Simple")]
    ConvSimple,
    #[serde(rename = "CONV_Complex")]
    ConvComplex,
}

impl TaxonomyClass {
    pub const ALL: [TaxonomyClass; 11] = [
        TaxonomyClass::NcR,
        TaxonomyClass::NcRn,
        TaxonomyClass::NcRc,
        TaxonomyClass::NcCr,
        TaxonomyClass::NcRcrPlus,
        TaxonomyClass::NcRccPlus,
        TaxonomyClass::NcCplus,
        TaxonomyClass::NcOther,
        TaxonomyClass::ConvSingleR,
        TaxonomyClass::ConvSimple,
        TaxonomyClass::ConvComplex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaxonomyClass::NcR => "NC_R",
            TaxonomyClass::NcRn => "NC_Rn",
            TaxonomyClass::NcRc => "NC_RC",
            TaxonomyClass::NcCr => "NC_CR",
            TaxonomyClass::NcRcrPlus => "NC_RCRplus",
            TaxonomyClass::NcRccPlus => "NC_RCCplus",
            TaxonomyClass::NcCplus => "NC_Cplus",
            TaxonomyClass::NcOther => "NC_Other",
            TaxonomyClass::ConvSingleR => "CONV_SingleR",
            TaxonomyClass::ConvSimple => "CONV_Simple",
            TaxonomyClass::ConvComplex => "CONV_Complex",
        }
    }

    pub fn is_conversational(self) -> bool {
        matches!(
            self,
            TaxonomyClass::ConvSingleR | TaxonomyClass::ConvSimple | TaxonomyClass::ConvComplex
        )
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed in ALL")
    }
}

impl fmt::Display for TaxonomyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaxonomyClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaxonomyClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown taxonomy class {s:?}")))
    }
}

/// Words and phrases that mark an expression as addressed to another party.
/// Entries are lowercased; multi-word entries match as contiguous tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversationalLexicon {
    pub pronouns: Vec<String>,
    pub greetings: Vec<String>,
    pub politeness: Vec<String>,
    /// Signatures with at most this many components are "simple".
    pub simple_max_components: usize,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for ConversationalLexicon {
    fn default() -> Self {
        ConversationalLexicon {
            // object pronouns ("give me", "tell us") are left out: they are
            // routine in bare imperatives
            pronouns: words(&["i", "you", "my", "your", "we"]),
            greetings: words(&["hi", "hello", "hey"]),
            politeness: words(&["please", "thanks", "thank", "could", "would", "kindly"]),
            simple_max_components: 2,
        }
    }
}

impl ConversationalLexicon {
    /// Loads a JSON lexicon; missing lists keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lex: ConversationalLexicon = serde_json::from_str(&raw)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pronouns.is_empty() && self.greetings.is_empty() && self.politeness.is_empty() {
            return Err(Error::InvalidArgument("lexicon is empty".into()));
        }
        Ok(())
    }

    pub fn extend(&mut self, other: &ConversationalLexicon) {
        for (mine, theirs) in [
            (&mut self.pronouns, &other.pronouns),
            (&mut self.greetings, &other.greetings),
            (&mut self.politeness, &other.politeness),
        ] {
            for w in theirs {
                if !mine.contains(w) {
                    mine.push(w.clone());
                }
            }
        }
    }

    /// Precomputed matcher for batch use.
    pub fn matcher(&self) -> LexiconMatcher {
        let mut single = HashSet::new();
        let mut phrases = Vec::new();
        for entry in self.pronouns.iter().chain(&self.greetings).chain(&self.politeness) {
            let toks = tokenize(entry).into_inner();
            match toks.len() {
                0 => {}
                1 => {
                    single.insert(toks.into_iter().next().expect("one token"));
                }
                _ => phrases.push(toks),
            }
        }
        LexiconMatcher {
            single,
            phrases,
            simple_max_components: self.simple_max_components,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LexiconMatcher {
    single: HashSet<String>,
    phrases: Vec<Vec<String>>,
    simple_max_components: usize,
}

impl LexiconMatcher {
    fn matches_tokens(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.single.contains(t))
            || self
                .phrases
                .iter()
                .any(|p| tokens.windows(p.len()).any(|w| w == p.as_slice()))
    }

    pub fn is_conversational(&self, t: &ExpressionTemplate) -> bool {
        if t.signature.contains(&SpanLabel::Role) {
            return true;
        }
        let tokens = tokenize(&t.expression_text()).into_inner();
        self.matches_tokens(&tokens)
    }

    pub fn classify(&self, t: &ExpressionTemplate) -> TaxonomyClass {
        if self.is_conversational(t) {
            classify_conversational(&t.signature, self.simple_max_components)
        } else {
            classify_structure(&t.signature)
        }
    }
}

pub fn is_conversational(t: &ExpressionTemplate, lex: &ConversationalLexicon) -> bool {
    lex.matcher().is_conversational(t)
}

pub fn classify_taxonomy(t: &ExpressionTemplate, lex: &ConversationalLexicon) -> TaxonomyClass {
    lex.matcher().classify(t)
}

fn classify_conversational(sig: &[SpanLabel], simple_max: usize) -> TaxonomyClass {
    if sig == [SpanLabel::Request] {
        TaxonomyClass::ConvSingleR
    } else if sig.len() <= simple_max {
        TaxonomyClass::ConvSimple
    } else {
        TaxonomyClass::ConvComplex
    }
}

fn classify_structure(sig: &[SpanLabel]) -> TaxonomyClass {
    use SpanLabel::{Context as C, Request as R};
    let all = |from: usize, l: SpanLabel| sig[from..].iter().all(|&x| x == l);
    match sig {
        [] => TaxonomyClass::NcOther,
        [R] => TaxonomyClass::NcR,
        _ if all(0, R) => TaxonomyClass::NcRn,
        [R, C] => TaxonomyClass::NcRc,
        [C, R] => TaxonomyClass::NcCr,
        [R, C, R, ..] if all(2, R) => TaxonomyClass::NcRcrPlus,
        [R, C, C, ..] if all(2, C) => TaxonomyClass::NcRccPlus,
        _ if all(0, C) => TaxonomyClass::NcCplus,
        _ => TaxonomyClass::NcOther,
    }
}

/// Class counts in taxonomy order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaxonomyHistogram {
    counts: [usize; 11],
}

impl TaxonomyHistogram {
    pub fn get(&self, class: TaxonomyClass) -> usize {
        self.counts[class.index()]
    }

    pub fn add(&mut self, class: TaxonomyClass) {
        self.counts[class.index()] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaxonomyClass, usize)> + '_ {
        TaxonomyClass::ALL.into_iter().zip(self.counts.iter().copied())
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, usize> {
        self.iter().map(|(c, n)| (c.name(), n)).collect()
    }

    /// `class,count` lines with a header, every class present.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count\n");
        for (c, n) in self.iter() {
            out.push_str(&format!("{c},{n}\n"));
        }
        out
    }
}

pub fn taxonomy_histogram(templates: &[ExpressionTemplate], lex: &ConversationalLexicon) -> TaxonomyHistogram {
    let m = lex.matcher();
    let mut h = TaxonomyHistogram::default();
    for t in templates {
        h.add(m.classify(t));
    }
    h
}

/// Serialized form of a classified template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedTemplate {
    pub record_id: String,
    pub template_text: String,
    pub signature: Vec<SpanLabel>,
    pub class: TaxonomyClass,
}

impl ClassifiedTemplate {
    pub fn new(t: ExpressionTemplate, class: TaxonomyClass) -> Self {
        ClassifiedTemplate {
            record_id: t.record_id,
            template_text: t.template_text,
            signature: t.signature,
            class,
        }
    }
}

/// Extracts and classifies every utterance, preserving input order.
pub fn classify_all(utterances: &[SegmentedUtterance], lex: &ConversationalLexicon) -> Vec<ClassifiedTemplate> {
    let m = lex.matcher();
    utterances
        .par_iter()
        .map(|u| {
            let t = extract_template(u);
            let class = m.classify(&t);
            ClassifiedTemplate::new(t, class)
        })
        .collect()
}

impl FromIterator<TaxonomyClass> for TaxonomyHistogram {
    fn from_iter<I: IntoIterator<Item = TaxonomyClass>>(iter: I) -> Self {
        let mut h = TaxonomyHistogram::default();
        for c in iter {
            h.add(c);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmark::parse_markup;
    use SpanLabel::{Context as C, Request as R, Role};

    fn tpl(text: &str) -> ExpressionTemplate {
        ExpressionTemplate::from_template_text("t", text)
    }

    #[test]
    fn extract_examples() {
        let s = parse_markup("Give me [[R]]a haiku[[/R]].").unwrap();
        let t = extract_template(&s);
        assert_eq!(t.template_text, "Give me __[REQUEST]__.");
        assert_eq!(t.signature, vec![R]);

        let s = parse_markup("[[C]]Roses are red[[/C]]. Now, [[R]]continue[[/R]].").unwrap();
        let t = extract_template(&s);
        assert_eq!(t.template_text, "__[CONTEXT]__. Now, __[REQUEST]__.");
        assert_eq!(t.signature, vec![C, R]);

        let s = parse_markup("nothing marked").unwrap();
        let t = extract_template(&s);
        assert_eq!(t.template_text, "nothing marked");
        assert!(t.signature.is_empty());
    }

    #[test]
    fn fill_inverts_extract() {
        let s = parse_markup("You are [[ROLE]]a chef[[/ROLE]]. [[R]]Plan a menu[[/R]]: [[C]]vegan[[/C]]").unwrap();
        let t = extract_template(&s);
        let contents: Vec<&str> = s.spans().iter().map(|sp| s.span_text(sp)).collect();
        assert_eq!(t.fill(&contents).unwrap(), s.text());
        assert!(t.fill(&["x"]).is_err());
    }

    #[test]
    fn conversational_examples() {
        let lex = ConversationalLexicon::default();
        assert!(is_conversational(&tpl("Can you help me to __[REQUEST]__?"), &lex));
        assert!(!is_conversational(&tpl("__[REQUEST]__ and __[REQUEST]__."), &lex));
        assert!(is_conversational(&tpl("You are __[ROLE]__. Now, __[REQUEST]__."), &lex));
        // role alone forces conversational
        assert!(is_conversational(&tpl("__[ROLE]__ __[REQUEST]__"), &lex));
        // placeholder words never count
        assert!(!is_conversational(&tpl("__[REQUEST]__"), &lex));
    }

    #[test]
    fn phrase_entries() {
        let mut lex = ConversationalLexicon::default();
        lex.politeness.push("if possible".into());
        assert!(is_conversational(&tpl("__[REQUEST]__, if possible."), &lex));
        assert!(!is_conversational(&tpl("__[REQUEST]__ possible if"), &lex));
    }

    #[test]
    fn classify_examples() {
        let lex = ConversationalLexicon::default();
        let t = ExpressionTemplate {
            record_id: "x".into(),
            template_text: "__[REQUEST]__ such as __[CONTEXT]__.".into(),
            signature: vec![R, C],
        };
        assert_eq!(classify_taxonomy(&t, &lex), TaxonomyClass::NcRc);
        assert_eq!(classify_structure(&[R, C, R, R]), TaxonomyClass::NcRcrPlus);
        assert_eq!(classify_conversational(&[Role, R, R, C], 2), TaxonomyClass::ConvComplex);
        assert_eq!(classify_structure(&[]), TaxonomyClass::NcOther);
        assert_eq!(classify_structure(&[C]), TaxonomyClass::NcCplus);
        assert_eq!(classify_structure(&[C, R, C]), TaxonomyClass::NcOther);
        assert_eq!(classify_structure(&[R, C, C, C]), TaxonomyClass::NcRccPlus);
        assert_eq!(classify_structure(&[R, C, R, C]), TaxonomyClass::NcOther);
    }

    #[test]
    fn appending_request_to_single_r() {
        let lex = ConversationalLexicon::default();
        let t = tpl("Write __[REQUEST]__.");
        assert_eq!(classify_taxonomy(&t, &lex), TaxonomyClass::NcR);
        let t2 = tpl("Write __[REQUEST]__. __[REQUEST]__.");
        assert_eq!(classify_taxonomy(&t2, &lex), TaxonomyClass::NcRn);
    }

    #[test]
    fn histogram_counts() {
        let lex = ConversationalLexicon::default();
        let h = taxonomy_histogram(&[], &lex);
        assert_eq!(h.total(), 0);
        let ts = vec![tpl("__[REQUEST]__"); 3];
        let h = taxonomy_histogram(&ts, &lex);
        assert_eq!(h.get(TaxonomyClass::NcR), 3);
        assert_eq!(h.total(), 3);
        assert!(h.to_csv().starts_with("class,count\nNC_R,3\nNC_Rn,0\n"));
    }

    #[test]
    fn class_names_round_trip() {
        for c in TaxonomyClass::ALL {
            assert_eq!(c.name().parse::<TaxonomyClass>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.name()));
        }
        assert_eq!(TaxonomyClass::ALL.iter().filter(|c| c.is_conversational()).count(), 3);
    }
}
