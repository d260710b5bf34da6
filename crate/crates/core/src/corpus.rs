//! Paired-text ingestion: tokenization, truncation, deduplication,
//! vocabulary construction and deterministic splitting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_MARKERS: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<s>", "</s>"];

/// One query/response training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogPair {
    pub id: String,
    pub query: Vec<String>,
    pub response: Vec<String>,
    pub raw_query: String,
    pub raw_response: String,
}

impl DialogPair {
    /// Tokenizes and truncates both sides. Fails if either side has no tokens.
    pub fn from_text(id: impl Into<String>, query: &str, response: &str, max_len: usize) -> Result<Self> {
        let mut q = tokenize(query);
        let mut r = tokenize(response);
        if q.is_empty() {
            return Err(Error::EmptyInput("query has no tokens"));
        }
        if r.is_empty() {
            return Err(Error::EmptyInput("response has no tokens"));
        }
        q.truncate(max_len);
        r.truncate(max_len);
        Ok(DialogPair {
            id: id.into(),
            query: q,
            response: r,
            raw_query: query.to_string(),
            raw_response: response.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<DialogPair>,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DialogPair> {
        self.pairs.iter()
    }

    /// Writes the corpus in the input JSONL schema plus an `id` field.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for p in &self.pairs {
            let rec = Record {
                id: Some(p.id.clone()),
                query: p.raw_query.clone(),
                response: p.raw_response.clone(),
                parent_id: None,
                variant_index: None,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One line of a corpus file. `parent_id`/`variant_index` appear only on augmented variants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_index: Option<usize>,
}

/// Lowercases, splits on whitespace, and splits every non-alphanumeric
/// symbol into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Reads raw JSONL records, reporting the 1-based line number of any malformed one.
pub fn read_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        records.push((line_no, rec));
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.to_path_buf()));
    }
    Ok(records)
}

fn pair_from_record(path: &Path, line: usize, rec: &Record, max_len: usize) -> Result<DialogPair> {
    let id = rec.id.clone().unwrap_or_else(|| format!("L{line:06}"));
    DialogPair::from_text(id, &rec.query, &rec.response, max_len).map_err(|e| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    })
}

/// Loads a JSONL corpus, truncating each side to `max_len` tokens (head kept)
/// and dropping pairs whose token sequences repeat an earlier pair.
pub fn load_corpus(path: &Path, max_len: usize) -> Result<Corpus> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be positive"));
    }
    let records = read_records(path)?;
    let mut seen_keys: HashSet<(Vec<String>, Vec<String>)> = HashSet::new();
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut pairs = Vec::new();
    for (line, rec) in &records {
        let pair = pair_from_record(path, *line, rec, max_len)?;
        if !seen_keys.insert((pair.query.clone(), pair.response.clone())) {
            continue;
        }
        if !seen_ids.insert(pair.id.clone()) {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: *line,
                msg: format!("duplicate id {}", pair.id),
            });
        }
        pairs.push(pair);
    }
    Ok(Corpus {
        pairs,
        split: Split::Train,
    })
}

/// Splits into train/valid/test by shuffling under `seed`; each part keeps corpus order.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) {
        return Err(Error::invalid(format!("split ratios must be nonnegative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {total}")));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_valid = (((ratios[0] + ratios[1]) * n as f64).round() as usize).clamp(n_train, n) - n_train;

    let take = |idx: &[usize], split: Split| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            pairs: idx.into_iter().map(|i| corpus.pairs[i].clone()).collect(),
            split,
        }
    };
    Ok((
        take(&order[..n_train], Split::Train),
        take(&order[n_train..n_train + n_valid], Split::Valid),
        take(&order[n_train + n_valid..], Split::Test),
    ))
}

/// Token ↔ index map with four reserved entries at indices 0–3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

/// Vocabulary-indexed view of a [`DialogPair`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedPair {
    pub id: String,
    pub query: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl Vocabulary {
    fn with_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED_MARKERS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens; reserved and out-of-range ids are rendered as markers.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_MARKERS[UNK]).to_string())
            .collect()
    }

    pub fn index_pair(&self, pair: &DialogPair) -> IndexedPair {
        IndexedPair {
            id: pair.id.clone(),
            query: self.encode(&pair.query),
            response: self.encode(&pair.response),
        }
    }

    /// One token per line; the first four lines are the reserved markers, so
    /// line `i` (0-based) holds index `i`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED_MARKERS {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: 1,
                msg: "vocabulary must start with the four reserved markers".into(),
            });
        }
        let mut seen = HashSet::new();
        for (i, l) in lines.iter().enumerate() {
            if !seen.insert(*l) {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate token {l:?}"),
                });
            }
        }
        Ok(Vocabulary::with_tokens(lines[NUM_RESERVED..].iter().map(|s| s.to_string())))
    }
}

/// Keeps the `max_size` most frequent tokens; ties go to the token seen first.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocabulary> {
    if max_size < 1 {
        return Err(Error::invalid("vocabulary max_size must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus"));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut next = 0;
    for pair in &corpus.pairs {
        for tok in pair.query.iter().chain(&pair.response) {
            let entry = counts.entry(tok.as_str()).or_insert_with(|| {
                next += 1;
                (0, next)
            });
            entry.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED_MARKERS.contains(t))
        .map(|(t, (c, first))| (t, c, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_size);
    Ok(Vocabulary::with_tokens(ranked.into_iter().map(|(t, _, _)| t.to_string())))
}
