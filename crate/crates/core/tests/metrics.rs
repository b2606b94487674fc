use std::collections::BTreeSet;

use proptest::prelude::*;
use wsireport::evaluation::{bleu, composite, cosine, keyword_score, rouge};
use wsireport::verification::{mock_embed, nearest, verify_embedding, Action, CorpusEntry, ReferenceCorpus};

fn words() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "tumor", ",", "."]).prop_map(String::from), 0..50)
}

/// Exhaustive recursion over suffixes, memoized.
fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let mut memo = vec![vec![usize::MAX; b.len() + 1]; a.len() + 1];
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<usize>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if memo[i][j] == usize::MAX {
            memo[i][j] = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
        }
        memo[i][j]
    }
    go(a, b, 0, 0, &mut memo)
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-1.0f32..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|&x| x != 0.0))
}

proptest! {
    #[test]
    fn identities(t in words().prop_filter("non-empty", |t| !t.is_empty())) {
        prop_assert_eq!(bleu(&t, &t), 1.0);
        prop_assert_eq!(rouge(&t, &t), 1.0);
    }

    #[test]
    fn rouge_matches_lcs_oracle(a in words(), b in words()) {
        let l = lcs_oracle(&a, &b);
        let expected = if l == 0 {
            0.0
        } else {
            let (p, r) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        prop_assert!((rouge(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn bleu_in_unit_interval(a in words(), b in words()) {
        let v = bleu(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn jaccard_bounds(a in proptest::collection::btree_set(0u8..10, 0..8), b in proptest::collection::btree_set(0u8..10, 0..8)) {
        let (a, b): (BTreeSet<String>, BTreeSet<String>) = (a.iter().map(u8::to_string).collect(), b.iter().map(u8::to_string).collect());
        let k = keyword_score(&a, &b);
        prop_assert!((0.0..=1.0).contains(&k));
        prop_assert_eq!(k == 1.0, a == b);
    }

    #[test]
    fn composite_is_monotone(c in proptest::array::uniform4(0.0f64..1.0), i in 0usize..4, bump in 0.0f64..0.5) {
        let mut d = c;
        d[i] += bump;
        prop_assert!(composite(d[0], d[1], d[2], d[3]).composite >= composite(c[0], c[1], c[2], c[3]).composite);
    }

    #[test]
    fn nearest_ignores_query_scale(q in unit_vec(6), rows in proptest::collection::vec(unit_vec(6), 1..10), scale in 0.01f32..100.0) {
        let corpus = ReferenceCorpus::new(6, rows.into_iter().enumerate()
            .map(|(i, e)| CorpusEntry { id: format!("r{i}"), text: format!("report {i}"), embedding: e }).collect()).unwrap();
        let (i, s) = nearest(&q, &corpus).unwrap();
        let brute = corpus.entries().iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (j, e)| {
            let s = cosine(&q, &e.embedding).unwrap();
            if s > best.1 { (j, s) } else { best }
        });
        prop_assert_eq!((i, s), brute);
        let scaled: Vec<f32> = q.iter().map(|v| v * scale).collect();
        let (i2, s2) = nearest(&scaled, &corpus).unwrap();
        prop_assert_eq!(i, i2);
        prop_assert!((s - s2).abs() < 1e-6);
    }

    #[test]
    fn verification_outputs_input_or_corpus_and_is_monotone(q in unit_vec(4), rows in proptest::collection::vec(unit_vec(4), 1..6), t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
        let corpus = ReferenceCorpus::new(4, rows.into_iter().enumerate()
            .map(|(i, e)| CorpusEntry { id: format!("r{i}"), text: format!("report {i}"), embedding: e }).collect()).unwrap();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = verify_embedding("generated", &q, &corpus, lo).unwrap();
        let b = verify_embedding("generated", &q, &corpus, hi).unwrap();
        for r in [&a, &b] {
            match r.action {
                Action::Replaced => prop_assert!(corpus.entries().iter().any(|e| e.id == r.best_id && e.text == r.final_text)),
                Action::Retained => prop_assert_eq!(r.final_text.as_str(), "generated"),
            }
        }
        if a.action == Action::Retained {
            prop_assert_eq!(b.action, Action::Retained);
        }
    }

    #[test]
    fn mock_embeddings_are_unit(text in "[a-z ,.]{1,60}") {
        if let Ok(v) = mock_embed(&text, 32) {
            let n: f64 = v.iter().map(|&x| f64::from(x).powi(2)).sum();
            prop_assert!((n - 1.0).abs() < 1e-6);
            prop_assert_eq!(cosine(&v, &v).unwrap(), 1.0);
        }
    }
}
