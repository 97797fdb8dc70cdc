use std::collections::HashSet;

use proptest::prelude::*;

use reqlens::corpus::{select_long_term, spam_filter, CohortFilter, Corpus, SpamConfig, UtteranceRecord};
use reqlens::express::{extract_template, ConversationalLexicon};
use reqlens::geom::{cosine_sim, user_mean, EmbeddingVector};
use reqlens::lexstats::{mattr, mtld, ttr};
use reqlens::segmark::{parse_markup, SegmentedUtterance, Span, SpanLabel};

fn record_strategy() -> impl Strategy<Value = Vec<UtteranceRecord>> {
    prop::collection::vec(
        (
            0u8..4,
            0i64..2_000_000,
            prop::sample::select(vec!["a b c", "a b d", "x y", "z"]),
        ),
        0..40,
    )
    .prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (u, ts, text))| UtteranceRecord {
                record_id: format!("r{i}"),
                user_id: format!("u{u}"),
                dialog_id: format!("r{i}"),
                timestamp: ts,
                model_tag: "m".into(),
                text: text.into(),
                language_tag: None,
            })
            .collect()
    })
}

fn vector(dim: usize) -> impl Strategy<Value = EmbeddingVector> {
    prop::collection::vec(-10.0f64..10.0, dim).prop_filter_map("zero vector", |v| {
        (v.iter().any(|x| x.abs() > 1e-3)).then(|| EmbeddingVector::new(v).unwrap())
    })
}

proptest! {
    #[test]
    fn spam_filter_is_idempotent(rows in record_strategy(), window in 0i64..500_000) {
        let c = Corpus::from_records(rows).unwrap();
        let cfg = SpamConfig { sim_threshold: 0.5, window_seconds: window };
        let once = spam_filter(&c, &cfg);
        let twice = spam_filter(&once, &cfg);
        prop_assert_eq!(once.records(), twice.records());
    }

    #[test]
    fn cohort_filter_output_is_subset(rows in record_strategy(), days in 0u32..20, min in 1usize..8) {
        let c = Corpus::from_records(rows).unwrap();
        let out = select_long_term(&c, &CohortFilter { min_span_days: days, min_dialogs: min });
        let ids: HashSet<&str> = c.records().iter().map(|r| r.record_id.as_str()).collect();
        prop_assert!(out.records().iter().all(|r| ids.contains(r.record_id.as_str())));
        // users are kept or dropped whole
        for (user, recs) in out.users() {
            prop_assert_eq!(recs.len(), c.records().iter().filter(|r| r.user_id == user).count());
        }
    }

    #[test]
    fn cohort_identity(rows in record_strategy()) {
        let c = Corpus::from_records(rows).unwrap();
        let out = select_long_term(&c, &CohortFilter { min_span_days: 0, min_dialogs: 1 });
        prop_assert_eq!(out.records(), c.records());
    }

    #[test]
    fn richness_bounds_and_renaming(tokens in prop::collection::vec(0u8..10, 1..200), w in 1usize..60) {
        let m = mattr(&tokens, w).unwrap();
        prop_assert!(m > 0.0 && m <= 1.0);
        prop_assert!(ttr(&tokens).unwrap() <= 1.0);
        let renamed: Vec<u8> = tokens.iter().map(|t| 9 - t).collect();
        prop_assert_eq!(mtld(&tokens, 0.72).unwrap(), mtld(&renamed, 0.72).unwrap());
        prop_assert_eq!(m, mattr(&renamed, w).unwrap());
    }

    #[test]
    fn cosine_is_scale_invariant(a in vector(6), b in vector(6), s in 0.01f64..100.0) {
        let base = cosine_sim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((cosine_sim(&a.scaled(s), &b).unwrap() - base).abs() < 1e-12);
        prop_assert_eq!(cosine_sim(&a, &b).unwrap(), cosine_sim(&b, &a).unwrap());
    }

    #[test]
    fn mean_of_copies(a in vector(5), n in 1usize..6) {
        let copies = vec![a.clone(); n];
        let m = user_mean(&copies).unwrap();
        for (x, y) in m.as_slice().iter().zip(a.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn template_fill_restores_text(words in prop::collection::vec("[a-z]{1,6}", 1..12), labels in prop::collection::vec(0u8..4, 12)) {
        // one span per word, except where the label is 0
        let mut text = String::new();
        let mut spans = Vec::new();
        for (w, l) in words.iter().zip(&labels) {
            if !text.is_empty() {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(w);
            let label = match l { 0 => None, 1 => Some(SpanLabel::Request), 2 => Some(SpanLabel::Context), _ => Some(SpanLabel::Role) };
            if let Some(label) = label {
                spans.push(Span::new(start, start + w.len(), label));
            }
        }
        let seg = SegmentedUtterance::new("x", text.clone(), spans).unwrap();
        let t = extract_template(&seg);
        let contents: Vec<&str> = seg.spans().iter().map(|s| seg.span_text(s)).collect();
        prop_assert_eq!(t.fill(&contents).unwrap(), text);
        let lex = ConversationalLexicon::default();
        // classification depends only on the template
        prop_assert_eq!(lex.matcher().classify(&t), lex.matcher().classify(&extract_template(&parse_markup(&reqlens::segmark::emit_markup(&seg).unwrap()).unwrap())));
    }
}
