use std::path::Path;

use proptest::prelude::*;

use sda_core::metrics::{self, EmbeddingTable};

fn fixture() -> EmbeddingTable {
    EmbeddingTable::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/embeddings_4d.txt")).unwrap()
}

const WORDS: [&str; 20] = [
    "the", "a", "cat", "dog", "sat", "ran", "on", "mat", "rug", "fast", "slow", "big", "small", "red", "blue", "home", "park", "and",
    "it", "was",
];

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn scaled(table: &EmbeddingTable, c: f64) -> EmbeddingTable {
    let mut out = EmbeddingTable::new(table.dim());
    for w in WORDS {
        out.insert(w, table.get(w).unwrap().iter().map(|x| x * c).collect()).unwrap();
    }
    out
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..8).prop_map(|v| v.into_iter().map(str::to_string).collect())
}

#[test]
fn fixture_has_twenty_words_in_four_dimensions() {
    let t = fixture();
    assert_eq!(t.dim(), 4);
    assert!(WORDS.iter().all(|w| t.get(w).is_some()));
}

#[test]
fn single_tokens_reduce_to_cosine() {
    let t = fixture();
    let (a, b) = (t.get("cat").unwrap(), t.get("park").unwrap());
    let c = metrics::cosine(a, b);
    assert!((metrics::emb_greedy(&toks("cat"), &toks("park"), &t) - c).abs() < 1e-12);
    assert!((metrics::emb_extrema(&toks("cat"), &toks("park"), &t) - c).abs() < 1e-12);
    assert!((metrics::emb_average(&toks("cat"), &toks("park"), &t) - c).abs() < 1e-12);
}

#[test]
fn oov_tokens_are_ignored_when_some_are_known() {
    let t = fixture();
    let with_oov = metrics::emb_average(&toks("cat zebra"), &toks("dog"), &t);
    let without = metrics::emb_average(&toks("cat"), &toks("dog"), &t);
    assert!((with_oov - without).abs() < 1e-12);
    assert_eq!(metrics::emb_greedy(&toks("zebra"), &toks("okapi"), &t), 0.0);
}

#[test]
fn report_fields_are_finite_and_recorded() {
    let t = fixture();
    let hyps = vec![toks("the cat sat on the mat"), toks("a dog ran")];
    let refs = vec![toks("the cat sat on a rug"), toks("a big dog ran home")];
    let r = metrics::evaluate(&hyps, &refs, &t, "abc", 7).unwrap();
    r.check_finite().unwrap();
    assert_eq!(r.n_samples, 2);
    assert_eq!(r.config_hash, "abc");
    assert_eq!(r.seed, 7);
    assert!(r.bleu_smoothing.contains("0.1"));
    assert!(r.bleu_1 >= r.bleu_4);
}

proptest! {
    #[test]
    fn embedding_metrics_ignore_positive_scaling(h in sentence(), r in sentence(), c in 0.1f64..10.0) {
        let t = fixture();
        let s = scaled(&t, c);
        prop_assert!((metrics::emb_average(&h, &r, &t) - metrics::emb_average(&h, &r, &s)).abs() < 1e-9);
        prop_assert!((metrics::emb_extrema(&h, &r, &t) - metrics::emb_extrema(&h, &r, &s)).abs() < 1e-9);
        prop_assert!((metrics::emb_greedy(&h, &r, &t) - metrics::emb_greedy(&h, &r, &s)).abs() < 1e-9);
    }

    #[test]
    fn metrics_of_identical_sentences(x in sentence()) {
        let t = fixture();
        prop_assert!((metrics::bleu_n(std::slice::from_ref(&x), std::slice::from_ref(&x), 4).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((metrics::emb_greedy(&x, &x, &t) - 1.0).abs() < 1e-9);
        prop_assert!((metrics::emb_average(&x, &x, &t) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distinct_lies_in_unit_interval(xs in prop::collection::vec(sentence(), 1..5)) {
        let d = metrics::distinct_n(&xs, 1).unwrap();
        prop_assert!(d > 0.0 && d <= 1.0);
    }
}
