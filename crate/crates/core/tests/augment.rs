use std::collections::HashSet;

use sda_core::augment::{augment_corpus, load_augmented, select_for_augmentation, MockParaphrase};
use sda_core::corpus::DialogPair;
use sda_core::synth::toy_corpus;
use sda_core::trainer::ScoreLine;

fn corpus(n: usize) -> Vec<DialogPair> {
    toy_corpus(n / 2, n - n / 2, 3)
        .iter()
        .map(|p| DialogPair::from_text(&p.id, &p.query, &p.response, 20).unwrap())
        .collect()
}

#[test]
fn two_hundred_pairs_become_fourteen_hundred() {
    let pairs = corpus(200);
    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let scores: Vec<ScoreLine> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| ScoreLine {
            id: id.clone(),
            score: (i * 37 % 200) as f64 / 200.0,
        })
        .collect();
    let selected = select_for_augmentation(&ids, &scores, 0.6).unwrap();
    assert_eq!(selected.len(), 120);
    let aug = augment_corpus(&pairs, &selected, &MockParaphrase::default(), 10, 20).unwrap();
    assert_eq!(aug.len(), 1400);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aug.jsonl");
    aug.write_jsonl(&path).unwrap();
    let back = load_augmented(&path, 20).unwrap();
    assert_eq!(back.len(), 1400);
    let originals: HashSet<&str> = back.originals.iter().map(|p| p.id.as_str()).collect();
    let chosen: HashSet<&str> = selected.iter().map(String::as_str).collect();
    assert!(back.variants.iter().all(|v| originals.contains(v.parent_id.as_str()) && chosen.contains(v.parent_id.as_str())));
    let keys: HashSet<(&str, usize)> = back.variants.iter().map(|v| (v.parent_id.as_str(), v.variant_index)).collect();
    assert_eq!(keys.len(), 1200);
}

#[test]
fn mock_augmentation_is_reproducible_across_runs() {
    let pairs = corpus(20);
    let selected: Vec<String> = pairs.iter().take(5).map(|p| p.id.clone()).collect();
    let a = augment_corpus(&pairs, &selected, &MockParaphrase::default(), 4, 20).unwrap();
    let b = augment_corpus(&pairs, &selected, &MockParaphrase::default(), 4, 20).unwrap();
    assert_eq!(a.variants.len(), 20);
    let texts = |c: &sda_core::augment::AugmentedCorpus| c.variants.iter().map(|v| v.pair.clone()).collect::<Vec<_>>();
    assert_eq!(texts(&a), texts(&b));
}
