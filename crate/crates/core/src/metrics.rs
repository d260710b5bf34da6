//! Automatic evaluation: distinct-n, corpus BLEU, and the three embedding
//! similarities (average, extrema, greedy), plus the selected-vs-unselected
//! diagnostic table and a paired t-test helper.
//!
//! BLEU is corpus-level with uniform weights over orders `1..=n`, a single
//! reference per hypothesis, the usual brevity penalty, and add-ε smoothing
//! (ε = 0.1) for higher orders with no matches. An order for which the
//! hypotheses contain no n-grams at all is dropped from the geometric mean.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::par;

pub const BLEU_EPSILON: f64 = 0.1;
pub const BLEU_SMOOTHING: &str = "add-epsilon 0.1 on zero higher-order matches";

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = Vec<&str>> + '_ {
    tokens.windows(n).map(|w| w.iter().map(AsRef::as_ref).collect())
}

/// Unique n-grams over total n-grams, pooled across all hypotheses.
pub fn distinct_n<S: AsRef<str>>(hypotheses: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("distinct-n needs n ≥ 1"));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        for g in ngrams(h, n) {
            total += 1;
            unique.insert(g);
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no n-grams for distinct-n"));
    }
    Ok(unique.len() as f64 / total as f64)
}

fn counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU over orders `1..=n` (see the module docs for conventions).
pub fn bleu_n<S: AsRef<str>, T: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension {
            context: "bleu references",
            expected: hypotheses.len(),
            got: references.len(),
        });
    }
    if !(1..=4).contains(&n) {
        return Err(Error::invalid(format!("BLEU order must be in 1..=4, got {n}")));
    }
    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for k in 1..=n {
            let rc = counts(r, k);
            for (g, c) in counts(h, k) {
                matches[k - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[k - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for k in 0..n {
        if totals[k] == 0 {
            continue;
        }
        let m = matches[k] as f64;
        let p = if matches[k] > 0 {
            m / totals[k] as f64
        } else if k == 0 {
            return Ok(0.0);
        } else {
            BLEU_EPSILON / totals[k] as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Word vectors of a fixed dimension; unknown words map to the zero vector.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    vectors: HashMap<String, Vec<f64>>,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            vectors: HashMap::new(),
            dim,
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                context: "embedding vector",
                expected: self.dim,
                got: v.len(),
            });
        }
        self.vectors.insert(word.into(), v);
        Ok(())
    }

    /// Reads `word v1 … vd` lines. A leading `count dim` header line (the
    /// word2vec text convention) is skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() {
                continue;
            }
            let malformed = |msg: String| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            if i == 0 && parts.len() == 2 && parts.iter().all(|p| p.parse::<usize>().is_ok()) {
                continue;
            }
            let v = parts[1..]
                .iter()
                .map(|x| x.parse::<f64>().map_err(|e| malformed(format!("{x:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(malformed("expected a word followed by finite numbers".into()));
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(v.len()));
            t.insert(parts[0], v).map_err(|e| malformed(e.to_string()))?;
        }
        table.ok_or_else(|| Error::EmptyCorpus(path.to_path_buf()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// In-table vectors of a sentence; OOV words are left out.
    fn known<'a, S: AsRef<str>>(&'a self, tokens: &[S]) -> Vec<&'a [f64]> {
        tokens.iter().filter_map(|t| self.get(t.as_ref())).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn mean_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vs {
        for (o, x) in m.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vs.len().max(1) as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// Per dimension, the value of largest magnitude; the positive one wins a tie.
pub fn extrema_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut e = vec![0.0f64; dim];
    for v in vs {
        for (o, &x) in e.iter_mut().zip(v.iter()) {
            if x.abs() > o.abs() || (x.abs() == o.abs() && x > *o) {
                *o = x;
            }
        }
    }
    e
}

/// Both sides' in-table vectors, or `None` (scored 0) when one side has none.
fn sides<'a, S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], table: &'a EmbeddingTable) -> Option<(Vec<&'a [f64]>, Vec<&'a [f64]>)> {
    let h = table.known(hyp);
    let r = table.known(reference);
    if h.is_empty() && r.is_empty() {
        warn!("both sentences are entirely out of vocabulary; embedding score set to 0");
        return None;
    }
    if h.is_empty() || r.is_empty() {
        return None;
    }
    Some((h, r))
}

pub fn emb_average<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], table: &EmbeddingTable) -> f64 {
    sides(hyp, reference, table).map_or(0.0, |(h, r)| cosine(&mean_vector(&h, table.dim), &mean_vector(&r, table.dim)))
}

pub fn emb_extrema<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], table: &EmbeddingTable) -> f64 {
    sides(hyp, reference, table).map_or(0.0, |(h, r)| cosine(&extrema_vector(&h, table.dim), &extrema_vector(&r, table.dim)))
}

fn greedy_one_way(from: &[&[f64]], to: &[&[f64]]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / from.len() as f64
}

/// Greedy matching, averaged over both directions.
pub fn emb_greedy<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T], table: &EmbeddingTable) -> f64 {
    sides(hyp, reference, table).map_or(0.0, |(h, r)| 0.5 * (greedy_one_way(&h, &r) + greedy_one_way(&r, &h)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dist_1: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub emb_average: f64,
    pub emb_extrema: f64,
    pub emb_greedy: f64,
    pub n_samples: usize,
    pub bleu_smoothing: String,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn check_finite(&self) -> Result<()> {
        let fields = [
            ("dist_1", self.dist_1),
            ("dist_2", self.dist_2),
            ("dist_3", self.dist_3),
            ("bleu_1", self.bleu_1),
            ("bleu_2", self.bleu_2),
            ("bleu_3", self.bleu_3),
            ("bleu_4", self.bleu_4),
            ("emb_average", self.emb_average),
            ("emb_extrema", self.emb_extrema),
            ("emb_greedy", self.emb_greedy),
        ];
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite((*name).to_string())),
            None => Ok(()),
        }
    }
}

/// All metrics for aligned hypothesis/reference lists. Embedding scores are
/// averaged over pairs in input order.
pub fn evaluate(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    table: &EmbeddingTable,
    config_hash: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("no hypotheses to evaluate"));
    }
    let pairs: Vec<(&Vec<String>, &Vec<String>)> = hypotheses.iter().zip(references).collect();
    let per_pair = par::map(&pairs, |_, (h, r)| [emb_average(h, r, table), emb_extrema(h, r, table), emb_greedy(h, r, table)]);
    let n = hypotheses.len() as f64;
    let mean = |j: usize| per_pair.iter().map(|v| v[j]).sum::<f64>() / n;
    let report = MetricsReport {
        dist_1: distinct_n(hypotheses, 1)?,
        dist_2: distinct_n(hypotheses, 2)?,
        dist_3: distinct_n(hypotheses, 3)?,
        bleu_1: bleu_n(hypotheses, references, 1)?,
        bleu_2: bleu_n(hypotheses, references, 2)?,
        bleu_3: bleu_n(hypotheses, references, 3)?,
        bleu_4: bleu_n(hypotheses, references, 4)?,
        emb_average: mean(0),
        emb_extrema: mean(1),
        emb_greedy: mean(2),
        n_samples: hypotheses.len(),
        bleu_smoothing: BLEU_SMOOTHING.to_string(),
        config_hash: config_hash.to_string(),
        seed,
    };
    report.check_finite()?;
    Ok(report)
}

/// Per-pair inputs of the selected-vs-unselected diagnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDiagnostic {
    pub id: String,
    /// BLEU of the generated response against the gold response.
    pub generation_bleu: f64,
    /// BLEU of the reconstruction's bag-of-words decode against the original.
    pub reconstruction_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionRow {
    pub partition: &'static str,
    pub n: usize,
    pub generation_bleu: f64,
    pub reconstruction_bleu: f64,
}

/// Mean generation and reconstruction BLEU for the selected and unselected
/// partitions, in that order.
pub fn selected_vs_unselected_report(selected: &[String], pairs: &[PairDiagnostic]) -> Result<Vec<PartitionRow>> {
    let chosen: HashSet<&str> = selected.iter().map(String::as_str).collect();
    let (sel, unsel): (Vec<&PairDiagnostic>, Vec<&PairDiagnostic>) = pairs.iter().partition(|p| chosen.contains(p.id.as_str()));
    let row = |partition: &'static str, part: &[&PairDiagnostic]| -> Result<PartitionRow> {
        if part.is_empty() {
            return Err(Error::EmptyPartition(partition));
        }
        let n = part.len();
        Ok(PartitionRow {
            partition,
            n,
            generation_bleu: part.iter().map(|p| p.generation_bleu).sum::<f64>() / n as f64,
            reconstruction_bleu: part.iter().map(|p| p.reconstruction_bleu).sum::<f64>() / n as f64,
        })
    };
    Ok(vec![row("selected", &sel)?, row("unselected", &unsel)?])
}

pub fn partition_csv(rows: &[PartitionRow]) -> String {
    let mut out = String::from("partition,n,generation_bleu,reconstruction_bleu\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.partition, r.n, r.generation_bleu, r.reconstruction_bleu));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p_value: f64,
}

/// Two-tailed paired t-test on `a[i] − b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "paired t-test",
            expected: a.len(),
            got: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::EmptyInput("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, df, p_value: p });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p_value })
}
