//! Synthetic toy corpus used by the examples and the end-to-end checks.
//!
//! Two populations with known generation difficulty:
//! * `hard-*` pairs: templated queries whose responses fill several slots with
//!   words drawn independently of the query, so no model can predict them;
//! * `copy-*` pairs: the response repeats the query verbatim. Queries are
//!   runs through a fixed cyclic word list, so a generator masters them
//!   quickly (the first word and a successor rule determine everything).
//!
//! Every response has at least ten tokens so decoded outputs (minimum ten
//! steps) are comparable in length with the gold responses.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::Result;

pub const HARD_PREFIX: &str = "hard-";
pub const COPY_PREFIX: &str = "copy-";

const TOPICS: [&str; 12] = [
    "trip", "weekend", "party", "exam", "concert", "meeting", "holiday", "game", "dinner", "move", "interview", "wedding",
];
const QUERY_TEMPLATES: [&str; 4] = [
    "how was your {} last week ?",
    "tell me about the {} , what happened ?",
    "did anything strange happen at the {} ?",
    "what do you remember about the {} ?",
];
const PEOPLE: [&str; 10] = [
    "doctor", "teacher", "pilot", "baker", "farmer", "singer", "driver", "painter", "nurse", "lawyer",
];
const PLACES: [&str; 10] = [
    "station", "harbor", "museum", "market", "library", "garden", "bridge", "castle", "theater", "airport",
];
const THINGS: [&str; 10] = [
    "umbrella", "guitar", "ladder", "lantern", "bicycle", "camera", "violin", "basket", "compass", "kettle",
];
const ACTIONS: [&str; 8] = ["found", "lost", "sold", "painted", "fixed", "borrowed", "dropped", "hid"];
const COPY_CYCLE: [&str; 40] = [
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray", "gold",
    "silver", "north", "south", "east", "west", "up", "down", "left", "right", "front", "back", "inside",
    "outside", "above", "below", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
    "spring", "summer", "autumn", "winter", "morning", "evening",
];
/// Fixed words of the response template.
const RESPONSE_GLUE: [&str; 7] = ["well", "the", "a", "near", "and", "laughed", "."];
const COPY_LENGTHS: std::ops::RangeInclusive<usize> = 10..=14;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyPair {
    pub id: String,
    pub query: String,
    pub response: String,
}

impl ToyPair {
    pub fn is_copy(&self) -> bool {
        self.id.starts_with(COPY_PREFIX)
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty pool")
}

/// `n_hard` templated pairs followed by `n_copy` copy pairs, all distinct,
/// then shuffled.
pub fn toy_corpus(n_hard: usize, n_copy: usize, seed: u64) -> Vec<ToyPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n_hard + n_copy);
    while out.len() < n_hard {
        let template = pick(&mut rng, &QUERY_TEMPLATES);
        let query = template.replace("{}", pick(&mut rng, &TOPICS));
        let response = format!(
            "well the {} {} a {} near the {} and the {} laughed .",
            pick(&mut rng, &PEOPLE),
            pick(&mut rng, &ACTIONS),
            pick(&mut rng, &THINGS),
            pick(&mut rng, &PLACES),
            pick(&mut rng, &PEOPLE),
        );
        if seen.insert((query.clone(), response.clone())) {
            out.push(ToyPair {
                id: format!("{HARD_PREFIX}{:04}", out.len()),
                query,
                response,
            });
        }
    }
    // (stride, start, length) combinations, unit stride first
    let n = COPY_CYCLE.len();
    let mut combos: Vec<(usize, usize, usize)> = Vec::new();
    for stride in 1..n {
        let mut level: Vec<_> = (0..n)
            .flat_map(|start| COPY_LENGTHS.map(move |len| (stride, start, len)))
            .collect();
        level.shuffle(&mut rng);
        combos.extend(level);
        if combos.len() >= n_copy {
            break;
        }
    }
    for (k, &(stride, start, len)) in combos.iter().take(n_copy).enumerate() {
        let text = (0..len)
            .map(|j| COPY_CYCLE[(start + j * stride) % n])
            .collect::<Vec<_>>()
            .join(" ");
        out.push(ToyPair {
            id: format!("{COPY_PREFIX}{k:04}"),
            query: text.clone(),
            response: text,
        });
    }
    out.shuffle(&mut rng);
    out
}

/// Every word the toy corpus can contain, grouped by the list it comes from.
fn word_groups() -> Vec<Vec<String>> {
    let template_words: Vec<String> = QUERY_TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != "{}")
        .map(str::to_string)
        .collect();
    let mut groups: Vec<Vec<String>> = [&TOPICS[..], &PEOPLE, &PLACES, &THINGS, &ACTIONS, &COPY_CYCLE]
        .iter()
        .map(|g| g.iter().map(|w| w.to_string()).collect())
        .collect();
    groups.push(template_words);
    groups.push(RESPONSE_GLUE.iter().map(|w| w.to_string()).collect());
    groups
}

/// Word vectors for the toy vocabulary in the `word v1 .. vd` text format.
/// Words from the same list sit around a shared random centre, so the
/// embedding metrics separate topical from off-topic responses.
pub fn write_embeddings(dim: usize, seed: u64, path: &Path) -> Result<()> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for group in word_groups() {
        let centre: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for word in group {
            let v: Vec<f64> = centre
                .iter()
                .map(|c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c + 0.5 * e
                })
                .collect();
            if seen.insert(word.clone()) {
                let nums: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
                writeln!(w, "{word} {}", nums.join(" "))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(pairs: &[ToyPair], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        writeln!(w, "{}", json!({"id": p.id, "query": p.query, "response": p.response}))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn populations_and_lengths() {
        let pairs = toy_corpus(30, 20, 1);
        assert_eq!(pairs.len(), 50);
        assert_eq!(pairs.iter().filter(|p| p.is_copy()).count(), 20);
        for p in &pairs {
            let r = tokenize(&p.response);
            assert!(r.len() >= 10 && r.len() <= 20, "{}", p.response);
            assert!(tokenize(&p.query).len() <= 20);
            if p.is_copy() {
                assert_eq!(p.query, p.response);
            }
        }
        let ids: std::collections::HashSet<_> = pairs.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn embeddings_cover_the_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        write_embeddings(8, 1, &path).unwrap();
        let table = crate::metrics::EmbeddingTable::load(&path).unwrap();
        assert_eq!(table.dim(), 8);
        for p in toy_corpus(40, 20, 2) {
            for w in tokenize(&p.query).iter().chain(&tokenize(&p.response)) {
                assert!(table.get(w).is_some(), "{w}");
            }
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(toy_corpus(5, 5, 3), toy_corpus(5, 5, 3));
        assert_ne!(toy_corpus(5, 5, 3), toy_corpus(5, 5, 4));
    }
}
