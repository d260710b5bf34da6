//! Selection of the highest-scored pairs and their expansion into augmented
//! variants.
//!
//! An [`Augmenter`] rewrites one side of a pair at a time. Two are shipped:
//! [`MockParaphrase`], a pure rule-based paraphraser used for tests and
//! offline runs, and [`BackTranslate`], a client for an external translation
//! service that round-trips text through a pivot language.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::AugmenterSection;
use crate::corpus::{detokenize, read_records, tokenize, DialogPair, Record};
use crate::error::{Error, Result};
use crate::par;
use crate::trainer::ScoreLine;

/// Environment variable holding the translation service API key.
pub const API_KEY_ENV: &str = "SDA_MT_KEY";

/// Number of pairs selected for a fraction of `n`: `⌈fraction·n⌉`, computed
/// so that products like `0.6·100` that land a hair above an integer in
/// floating point do not round up.
pub fn selection_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let k = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    Ok(k.min(n))
}

/// Ids of the `⌈fraction·N⌉` highest-scored pairs, best first; equal scores
/// are ordered by the lexicographically smaller id.
pub fn select_for_augmentation(ids: &[String], scores: &[ScoreLine], fraction: f64) -> Result<Vec<String>> {
    let mut by_id: HashMap<&str, f64> = HashMap::with_capacity(scores.len());
    for line in scores {
        if !line.score.is_finite() {
            return Err(Error::NonFinite(format!("score of {}", line.id)));
        }
        if by_id.insert(&line.id, line.score).is_some() {
            return Err(Error::invalid(format!("duplicate score for pair {}", line.id)));
        }
    }
    let mut ranked = Vec::with_capacity(ids.len());
    for id in ids {
        let s = *by_id.get(id.as_str()).ok_or_else(|| Error::MissingScore(id.clone()))?;
        ranked.push((s, id));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let k = selection_count(fraction, ids.len())?;
    Ok(ranked.into_iter().take(k).map(|(_, id)| id.clone()).collect())
}

/// Uniform-random selection of the same size, for comparison curves.
pub fn select_random(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    let k = selection_count(fraction, ids.len())?;
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sorted.into_iter().take(k).cloned().collect())
}

/// Rewrites one side of a dialogue pair.
pub trait Augmenter: Sync {
    fn name(&self) -> &str;

    fn augment(&self, text: &str, variant_index: usize) -> Result<String>;

    /// Cap on concurrent calls; `None` means the augmenter is pure and may be
    /// driven by the data-parallel pool.
    fn max_inflight(&self) -> Option<usize> {
        None
    }
}

/// Returns text unchanged.
pub struct Identity;

impl Augmenter for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn augment(&self, text: &str, _variant_index: usize) -> Result<String> {
        Ok(text.to_string())
    }
}

/// Word → synonym group, parsed from the bundled lexicon.
pub struct Lexicon {
    groups: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        let mut index = HashMap::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let words: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
            if words.len() < 2 {
                return Err(Error::invalid(format!("lexicon group needs two words: {line:?}")));
            }
            for w in &words {
                if index.insert(w.clone(), groups.len()).is_some() {
                    return Err(Error::invalid(format!("lexicon word {w:?} appears in two groups")));
                }
            }
            groups.push(words);
        }
        Ok(Lexicon { groups, index })
    }

    pub fn bundled() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| Lexicon::parse(include_str!("../data/lexicon.txt")).expect("bundled lexicon is valid"))
    }

    pub fn group(&self, word: &str) -> Option<&[String]> {
        self.index.get(word).map(|&g| self.groups[g].as_slice())
    }
}

/// Deterministic stand-in for back-translation: synonym substitution from
/// the bundled lexicon, plus one adjacent-word swap once the substitutions
/// for a sentence are exhausted.
///
/// Variant `k` of a sentence with `T` possible substitution patterns uses
/// pattern `1 + (h + k) mod (T − 1)` (pattern 0 is the sentence itself and
/// `h` is a hash of the text), so the first `T − 1` variants are pairwise
/// distinct.
pub struct MockParaphrase {
    lexicon: &'static Lexicon,
}

impl Default for MockParaphrase {
    fn default() -> Self {
        MockParaphrase {
            lexicon: Lexicon::bundled(),
        }
    }
}

fn text_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn is_word(token: &str) -> bool {
    token.chars().all(char::is_alphanumeric)
}

impl MockParaphrase {
    pub fn paraphrase(&self, text: &str, variant_index: usize) -> String {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return text.to_string();
        }
        // (position, group, index of the original word within the group)
        let slots: Vec<(usize, &[String], usize)> = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let group = self.lexicon.group(t)?;
                let own = group.iter().position(|w| w == t)?;
                Some((i, group, own))
            })
            .collect();
        let patterns = slots
            .iter()
            .try_fold(1u128, |acc, (_, g, _)| acc.checked_mul(g.len() as u128))
            .unwrap_or(u128::MAX);
        let h = text_hash(text);
        let k = variant_index as u128;
        let mut round = k;
        if patterns > 1 {
            let alternatives = patterns - 1;
            let mut code = 1 + (h as u128 + k) % alternatives;
            round = k / alternatives;
            for &(pos, group, own) in &slots {
                let n = group.len() as u128;
                let shift = (code % n) as usize;
                code /= n;
                tokens[pos] = group[(own + shift) % group.len()].clone();
            }
        }
        if round > 0 || patterns <= 1 {
            let swappable: Vec<usize> = (0..tokens.len().saturating_sub(1))
                .filter(|&i| is_word(&tokens[i]) && is_word(&tokens[i + 1]) && tokens[i] != tokens[i + 1])
                .collect();
            if !swappable.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(h, variant_index as u64, 0, 0));
                let at = swappable[rng.gen_range(0..swappable.len())];
                tokens.swap(at, at + 1);
            }
        }
        let out = detokenize(&tokens);
        if tokenize(text) == tokens {
            text.to_string()
        } else {
            out
        }
    }
}

impl Augmenter for MockParaphrase {
    fn name(&self) -> &str {
        "mock"
    }

    fn augment(&self, text: &str, variant_index: usize) -> Result<String> {
        Ok(self.paraphrase(text, variant_index))
    }
}

/// Client for a LibreTranslate-style service: `POST endpoint` with
/// `{"q", "source", "target", "format": "text"}` (plus `"api_key"` when
/// `SDA_MT_KEY` is set), answered by `{"translatedText": ...}`. Variant `k`
/// asks for `k` alternatives on the way back and takes the last one offered,
/// falling back to the main translation.
pub struct BackTranslate {
    agent: ureq::Agent,
    endpoint: String,
    pivot: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    max_inflight: usize,
}

impl BackTranslate {
    pub fn from_config(cfg: &AugmenterSection) -> Result<Self> {
        if cfg.endpoint.is_empty() {
            return Err(Error::Config("augmenter.endpoint is empty".into()));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build();
        Ok(BackTranslate {
            agent,
            endpoint: cfg.endpoint.clone(),
            pivot: cfg.pivot_lang.clone(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retries: cfg.retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            max_inflight: cfg.max_inflight.max(1),
        })
    }

    fn request(&self, text: &str, source: &str, target: &str, alternatives: usize) -> Result<String, String> {
        let mut body = json!({"q": text, "source": source, "target": target, "format": "text"});
        if alternatives > 0 {
            body["alternatives"] = json!(alternatives);
        }
        if let Some(key) = &self.api_key {
            body["api_key"] = json!(key);
        }
        let reply: serde_json::Value = self
            .agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        let main = reply["translatedText"]
            .as_str()
            .ok_or_else(|| format!("reply has no translatedText: {reply}"))?;
        let alt = reply["alternatives"]
            .as_array()
            .and_then(|a| a.get(alternatives.checked_sub(1)?))
            .and_then(|v| v.as_str());
        let out = alt.unwrap_or(main).trim();
        if tokenize(out).is_empty() {
            return Err("empty translation".into());
        }
        Ok(out.to_string())
    }

    fn with_retries(&self, mut f: impl FnMut() -> Result<String, String>) -> Result<String, String> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match f() {
                Ok(s) => return Ok(s),
                Err(e) if attempt < self.retries => {
                    debug!("translation attempt {} failed: {e}; retrying in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl Augmenter for BackTranslate {
    fn name(&self) -> &str {
        "backtranslate"
    }

    fn augment(&self, text: &str, variant_index: usize) -> Result<String> {
        let pivot = self.with_retries(|| self.request(text, "en", &self.pivot, 0));
        let back = pivot.and_then(|p| self.with_retries(|| self.request(&p, &self.pivot, "en", variant_index)));
        back.map_err(Error::Translation)
    }

    fn max_inflight(&self) -> Option<usize> {
        Some(self.max_inflight)
    }
}

/// Builds the augmenter named in the config.
pub fn from_config(cfg: &AugmenterSection) -> Result<Box<dyn Augmenter>> {
    Ok(match cfg.kind {
        crate::config::AugmenterKind::Mock => Box::new(MockParaphrase::default()),
        crate::config::AugmenterKind::Backtranslate => Box::new(BackTranslate::from_config(cfg)?),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub parent_id: String,
    pub variant_index: usize,
    pub pair: DialogPair,
}

/// The original pairs plus the variants generated from the selected ones.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCorpus {
    pub originals: Vec<DialogPair>,
    pub variants: Vec<Variant>,
    pub fraction: f64,
    pub multiplier: usize,
}

pub fn variant_id(parent: &str, k: usize) -> String {
    format!("{parent}#v{k}")
}

impl AugmentedCorpus {
    pub fn len(&self) -> usize {
        self.originals.len() + self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Originals first, then variants ordered by (parent, index).
    pub fn pairs(&self) -> impl Iterator<Item = &DialogPair> {
        self.originals.iter().chain(self.variants.iter().map(|v| &v.pair))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        let records = self
            .originals
            .iter()
            .map(|p| (p, None, None))
            .chain(self.variants.iter().map(|v| (&v.pair, Some(v.parent_id.clone()), Some(v.variant_index))));
        for (p, parent_id, variant_index) in records {
            let rec = Record {
                id: Some(p.id.clone()),
                query: p.raw_query.clone(),
                response: p.raw_response.clone(),
                parent_id,
                variant_index,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads an augmented corpus file, checking that every variant's parent is
/// present. Unlike [`crate::corpus::load_corpus`] nothing is deduplicated:
/// a variant may legitimately repeat its parent's tokens.
pub fn load_augmented(path: &Path, max_len: usize) -> Result<AugmentedCorpus> {
    let records = read_records(path)?;
    let mut originals = Vec::new();
    let mut variants = Vec::new();
    let mut ids = HashSet::new();
    for (line, rec) in records {
        let malformed = |msg: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let id = rec.id.clone().unwrap_or_else(|| format!("L{line:06}"));
        if !ids.insert(id.clone()) {
            return Err(malformed(format!("duplicate id {id}")));
        }
        let pair = DialogPair::from_text(id, &rec.query, &rec.response, max_len).map_err(|e| malformed(e.to_string()))?;
        match (rec.parent_id, rec.variant_index) {
            (None, None) => originals.push(pair),
            (Some(parent_id), Some(variant_index)) => variants.push((
                line,
                Variant {
                    parent_id,
                    variant_index,
                    pair,
                },
            )),
            _ => return Err(malformed("parent_id and variant_index must appear together".into())),
        }
    }
    let original_ids: HashSet<&str> = originals.iter().map(|p| p.id.as_str()).collect();
    for (line, v) in &variants {
        if !original_ids.contains(v.parent_id.as_str()) {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("parent {} not in corpus", v.parent_id),
            });
        }
    }
    let mut per_parent: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, v) in &variants {
        *per_parent.entry(v.parent_id.as_str()).or_default() += 1;
    }
    let multiplier = per_parent.values().copied().max().unwrap_or(0);
    let fraction = if originals.is_empty() {
        0.0
    } else {
        per_parent.len() as f64 / originals.len() as f64
    };
    Ok(AugmentedCorpus {
        originals,
        variants: variants.into_iter().map(|(_, v)| v).collect(),
        fraction,
        multiplier,
    })
}

#[derive(Clone, Copy)]
struct Job<'a> {
    parent: &'a DialogPair,
    k: usize,
}

/// Runs `f` over `jobs` with at most `workers` in flight; results keep job order.
fn run_bounded<'a, R: Send>(jobs: &[Job<'a>], workers: usize, f: impl Fn(Job<'a>) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(i) else { break };
                let r = f(job);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Creates `multiplier` variants of every selected pair by augmenting query
/// and response independently, then re-tokenizing and truncating to
/// `max_len`. Unselected pairs are passed through unchanged.
///
/// If any request fails the whole call fails with the ids of every affected
/// parent; no partial corpus is returned.
pub fn augment_corpus(
    corpus: &[DialogPair],
    selected: &[String],
    augmenter: &dyn Augmenter,
    multiplier: usize,
    max_len: usize,
) -> Result<AugmentedCorpus> {
    if multiplier == 0 {
        return Err(Error::invalid("multiplier must be at least 1"));
    }
    let by_id: HashMap<&str, &DialogPair> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut parents: Vec<&DialogPair> = Vec::with_capacity(selected.len());
    let mut seen = HashSet::new();
    for id in selected {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("selected id {id} is not in the corpus")))?;
        if seen.insert(id.as_str()) {
            parents.push(p);
        }
    }
    parents.sort_by(|a, b| a.id.cmp(&b.id));
    let jobs: Vec<Job> = parents
        .iter()
        .flat_map(|&parent| (0..multiplier).map(move |k| Job { parent, k }))
        .collect();

    let make = |job: Job| -> Result<DialogPair, String> {
        let q = augmenter.augment(&job.parent.raw_query, job.k).map_err(|e| e.to_string())?;
        let r = augmenter.augment(&job.parent.raw_response, job.k).map_err(|e| e.to_string())?;
        DialogPair::from_text(variant_id(&job.parent.id, job.k), &q, &r, max_len).map_err(|e| e.to_string())
    };
    let results: Vec<Result<DialogPair, String>> = match augmenter.max_inflight() {
        None => par::map(&jobs, |_, &job| make(job)),
        Some(cap) => run_bounded(&jobs, cap, make),
    };

    let mut variants = Vec::with_capacity(jobs.len());
    let mut failed: Vec<String> = Vec::new();
    let mut last_error = String::new();
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(pair) => variants.push(Variant {
                parent_id: job.parent.id.clone(),
                variant_index: job.k,
                pair,
            }),
            Err(e) => {
                warn!("{} failed on {} variant {}: {e}", augmenter.name(), job.parent.id, job.k);
                if failed.last() != Some(&job.parent.id) {
                    failed.push(job.parent.id.clone());
                }
                last_error = e;
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Augment { ids: failed, last_error });
    }
    let fraction = if corpus.is_empty() {
        0.0
    } else {
        parents.len() as f64 / corpus.len() as f64
    };
    Ok(AugmentedCorpus {
        originals: corpus.to_vec(),
        variants,
        fraction,
        multiplier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn scores(xs: &[(&str, f64)]) -> Vec<ScoreLine> {
        xs.iter()
            .map(|&(id, score)| ScoreLine { id: id.into(), score })
            .collect()
    }

    #[test]
    fn top_fraction_by_score() {
        let s = scores(&[("a", 0.9), ("b", 0.1), ("c", 0.5), ("d", 0.7)]);
        let all = ids(&["a", "b", "c", "d"]);
        assert_eq!(select_for_augmentation(&all, &s, 0.5).unwrap(), ids(&["a", "d"]));
        assert_eq!(select_for_augmentation(&all, &s, 1.0).unwrap().len(), 4);
        assert_eq!(select_for_augmentation(&all, &s, 0.3).unwrap(), ids(&["a", "d"]));
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let s = scores(&[("b", 0.5), ("a", 0.5), ("c", 0.5)]);
        let all = ids(&["c", "b", "a"]);
        assert_eq!(select_for_augmentation(&all, &s, 0.5).unwrap(), ids(&["a", "b"]));
    }

    #[test]
    fn ceil_count_is_exact() {
        assert_eq!(selection_count(0.6, 100).unwrap(), 60);
        assert_eq!(selection_count(0.6, 200).unwrap(), 120);
        assert_eq!(selection_count(0.7, 10).unwrap(), 7);
        assert_eq!(selection_count(0.01, 1).unwrap(), 1);
        assert!(selection_count(0.0, 5).is_err());
        assert!(selection_count(1.5, 5).is_err());
    }

    #[test]
    fn missing_score_names_the_id() {
        let s = scores(&[("a", 0.9)]);
        let err = select_for_augmentation(&ids(&["a", "zz-17"]), &s, 0.5).unwrap_err();
        assert!(matches!(&err, Error::MissingScore(id) if id == "zz-17"), "{err}");
    }

    #[test]
    fn random_selection_is_seeded() {
        let all: Vec<String> = (0..50).map(|i| format!("p{i}")).collect();
        let a = select_random(&all, 0.4, 3).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, select_random(&all, 0.4, 3).unwrap());
        assert_ne!(a, select_random(&all, 0.4, 4).unwrap());
        let mut full = select_random(&all, 1.0, 3).unwrap();
        full.sort();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(full, sorted);
    }

    #[test]
    fn mock_paraphrase_is_deterministic_and_index_keyed() {
        let m = MockParaphrase::default();
        let a = m.paraphrase("i do not know", 0);
        assert_eq!(a, m.paraphrase("i do not know", 0));
        assert_ne!(a, m.paraphrase("i do not know", 1));
        assert_ne!(a, "i do not know");
    }

    #[test]
    fn mock_paraphrase_leaves_uncovered_word_alone() {
        let m = MockParaphrase::default();
        for k in 0..5 {
            assert_eq!(m.paraphrase("xyzzy", k), "xyzzy");
        }
    }

    #[test]
    fn mock_variants_distinct_while_lexicon_permits() {
        let m = MockParaphrase::default();
        // know/think/good: 3·3·4 = 36 patterns, 35 non-trivial
        let text = "i think it is good to know";
        let outs: HashSet<String> = (0..35).map(|k| m.paraphrase(text, k)).collect();
        assert_eq!(outs.len(), 35);
        assert!(!outs.contains(text));
    }

    #[test]
    fn lexicon_rejects_duplicates() {
        assert!(Lexicon::parse("a b\nb c").is_err());
        assert!(Lexicon::parse("lonely").is_err());
        assert!(Lexicon::bundled().group("know").is_some());
    }

    fn pairs(n: usize) -> Vec<DialogPair> {
        (0..n)
            .map(|i| DialogPair::from_text(format!("p{i:03}"), "how was your trip ?", &format!("it was good number {i}"), 20).unwrap())
            .collect()
    }

    #[test]
    fn counts_and_provenance() {
        let corpus = pairs(100);
        let s: Vec<ScoreLine> = corpus
            .iter()
            .enumerate()
            .map(|(i, p)| ScoreLine {
                id: p.id.clone(),
                score: (i as f64 * 0.37).sin().abs(),
            })
            .collect();
        let all: Vec<String> = corpus.iter().map(|p| p.id.clone()).collect();
        let sel = select_for_augmentation(&all, &s, 0.6).unwrap();
        let aug = augment_corpus(&corpus, &sel, &MockParaphrase::default(), 10, 20).unwrap();
        assert_eq!(aug.len(), 700);
        assert_eq!(aug.variants.len(), 600);
        let parents: HashSet<&str> = aug.originals.iter().map(|p| p.id.as_str()).collect();
        assert!(aug.variants.iter().all(|v| parents.contains(v.parent_id.as_str())));
        assert_eq!(aug.originals, corpus);
    }

    #[test]
    fn identity_single_variant_matches_parent_tokens() {
        let corpus = pairs(4);
        let sel = ids(&["p001", "p003"]);
        let aug = augment_corpus(&corpus, &sel, &Identity, 1, 20).unwrap();
        assert_eq!(aug.variants.len(), 2);
        for v in &aug.variants {
            let parent = corpus.iter().find(|p| p.id == v.parent_id).unwrap();
            assert_eq!(v.pair.query, parent.query);
            assert_eq!(v.pair.response, parent.response);
            assert_eq!(v.pair.id, variant_id(&parent.id, 0));
        }
    }

    #[test]
    fn empty_selection_passes_corpus_through() {
        let corpus = pairs(5);
        let aug = augment_corpus(&corpus, &[], &MockParaphrase::default(), 10, 20).unwrap();
        assert_eq!(aug.len(), 5);
        assert_eq!(aug.originals, corpus);
    }

    struct FailOn(&'static str);

    impl Augmenter for FailOn {
        fn name(&self) -> &str {
            "fail"
        }

        fn augment(&self, text: &str, _k: usize) -> Result<String> {
            if text.contains(self.0) {
                Err(Error::invalid("boom"))
            } else {
                Ok(text.to_string())
            }
        }

        fn max_inflight(&self) -> Option<usize> {
            Some(2)
        }
    }

    #[test]
    fn failures_list_every_parent() {
        let corpus = pairs(12);
        let sel: Vec<String> = corpus.iter().map(|p| p.id.clone()).collect();
        let err = augment_corpus(&corpus, &sel, &FailOn("number 1"), 3, 20).unwrap_err();
        match &err {
            Error::Augment { ids: failed, .. } => assert_eq!(failed, &ids(&["p001", "p010", "p011"])),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn bounded_runner_keeps_order() {
        let corpus = pairs(7);
        let sel: Vec<String> = corpus.iter().map(|p| p.id.clone()).collect();
        let bounded = augment_corpus(&corpus, &sel, &FailOn("never matches"), 3, 20).unwrap();
        let pure = augment_corpus(&corpus, &sel, &Identity, 3, 20).unwrap();
        assert_eq!(bounded, pure);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = pairs(6);
        let aug = augment_corpus(&corpus, &ids(&["p002", "p004"]), &MockParaphrase::default(), 3, 20).unwrap();
        let path = dir.path().join("aug.jsonl");
        aug.write_jsonl(&path).unwrap();
        let back = load_augmented(&path, 20).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.variants, aug.variants);
        assert_eq!(back.multiplier, 3);
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("parent_id").is_none());
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["parent_id"], "p004");
        assert_eq!(last["variant_index"], 2);
    }

    #[test]
    fn orphan_variant_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"query\":\"q\",\"response\":\"r\"}\n{\"id\":\"b#v0\",\"query\":\"q\",\"response\":\"r\",\"parent_id\":\"b\",\"variant_index\":0}\n",
        )
        .unwrap();
        assert!(matches!(load_augmented(&path, 20), Err(Error::MalformedRecord { line: 2, .. })));
    }
}
