//! The end-to-end stages — prepare, train, score, augment, train-dialog,
//! evaluate — and the fraction sweep built on them.
//!
//! Every stage writes a stamp next to its output holding a key derived from
//! the content of its inputs and the configuration values it depends on.
//! Running a stage whose stamp matches is a no-op unless forced, which lets
//! the sweep reuse one trained selector across fractions.
//!
//! Run directory layout:
//!
//! ```text
//! corpus/     train.jsonl valid.jsonl test.jsonl vocab.txt
//! selector/   parameter files, manifest.json, quality.csv, repr.csv, config.toml
//! scores/     scores.jsonl diagnostics.csv
//! augmented/  augmented.jsonl
//! dialog/     generator.json vocab.txt manifest.json
//! eval/       report.json
//! sweep/      <mode>-<fraction>/{augmented, dialog, eval}, sweep-<mode>.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, load_augmented, select_for_augmentation, select_random, Augmenter};
use crate::config::{hex_digest, RunConfig};
use crate::corpus::{build_vocab, load_corpus, split_corpus, Corpus, DialogPair, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::generator::{DecodeOptions, Decoding, GeneratorConfig, ResponseGenerator, Seq2Seq};
use crate::metrics::{self, bleu_n, EmbeddingTable, MetricsReport, PairDiagnostic};
use crate::nn::Adam;
use crate::par;
use crate::representativeness::Branch;
use crate::trainer::{self, load_models, read_scores, BatchSampler, Convergence, Telemetry, TrainOutcome, Trainer};

pub const STAMP: &str = "stage.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SOURCE_FILE: &str = "source.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const GENERATOR_FILE: &str = "generator.json";
pub const REPORT_FILE: &str = "report.json";

/// Written next to each stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub key: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Content hash of a file, or of every file below a directory (sorted by
/// relative path, stamps excluded).
pub fn content_hash(path: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != STAMP) {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
                out.push((rel, p));
            }
        }
        Ok(())
    }
    if path.is_file() {
        return Ok(hex_digest(&fs::read(path)?));
    }
    if !path.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let mut files = Vec::new();
    walk(path, path, &mut files)?;
    files.sort();
    let mut buf = Vec::new();
    for (rel, p) in files {
        buf.extend_from_slice(rel.as_bytes());
        buf.push(0);
        buf.extend_from_slice(hex_digest(&fs::read(p)?).as_bytes());
        buf.push(b'\n');
    }
    Ok(hex_digest(&buf))
}

fn key_of(stage: &str, parts: &[String]) -> String {
    let mut buf = stage.as_bytes().to_vec();
    for p in parts {
        buf.push(0);
        buf.extend_from_slice(p.as_bytes());
    }
    hex_digest(&buf)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config values serialize")
}

/// Where the stamp of an output lives: inside a directory, or beside a file.
fn stamp_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(STAMP)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".{STAMP}"));
        out.with_file_name(name)
    }
}

/// Runs `body` unless the stamp at `stamp` already carries `key`.
/// Returns whether the body ran.
fn run_stage(stage: &str, stamp: &Path, key: String, cfg: &RunConfig, force: bool, body: impl FnOnce() -> Result<()>) -> Result<bool> {
    if !force {
        if let Ok(text) = fs::read_to_string(stamp) {
            if let Ok(old) = serde_json::from_str::<StageStamp>(&text) {
                if old.key == key {
                    info!("{stage}: up to date, skipping");
                    return Ok(false);
                }
            }
        }
    }
    let _ = fs::remove_file(stamp);
    info!("{stage}: running");
    body()?;
    let s = StageStamp {
        stage: stage.to_string(),
        key,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    fs::write(stamp, serde_json::to_string_pretty(&s)?)?;
    Ok(true)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn ensure_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------- prepare

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vocab: usize,
}

/// Loads, truncates and deduplicates the raw corpus, splits it under the run
/// seed, and builds the vocabulary from the training part.
pub fn prepare(input: &Path, out: &Path, cfg: &RunConfig, force: bool) -> Result<PrepareSummary> {
    ensure_dir(out)?;
    let key = key_of(
        "prepare",
        &[content_hash(input)?, json(&(&cfg.corpus.max_len, &cfg.corpus.vocab_size, &cfg.corpus.split, cfg.seed))],
    );
    run_stage("prepare", &stamp_path(out, true), key, cfg, force, || {
        let corpus = load_corpus(input, cfg.corpus.max_len)?;
        let (train, valid, test) = split_corpus(&corpus, cfg.corpus.split, cfg.seed)?;
        if train.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        let vocab = build_vocab(&train, cfg.corpus.vocab_size)?;
        train.write_jsonl(&out.join(TRAIN_FILE))?;
        valid.write_jsonl(&out.join(VALID_FILE))?;
        test.write_jsonl(&out.join(TEST_FILE))?;
        vocab.save(&out.join(VOCAB_FILE))?;
        Ok(())
    })?;
    let count = |f: &str| -> Result<usize> {
        let text = fs::read_to_string(out.join(f))?;
        Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
    };
    Ok(PrepareSummary {
        train: count(TRAIN_FILE)?,
        valid: count(VALID_FILE)?,
        test: count(TEST_FILE)?,
        vocab: Vocabulary::load(&out.join(VOCAB_FILE))?.len(),
    })
}

/// Training split of a prepared corpus directory, with its vocabulary.
pub fn load_prepared(corpus_dir: &Path, cfg: &RunConfig) -> Result<(Corpus, Vocabulary)> {
    let train = load_corpus(&corpus_dir.join(TRAIN_FILE), cfg.corpus.max_len)?;
    let vocab = Vocabulary::load(&corpus_dir.join(VOCAB_FILE))?;
    Ok((train, vocab))
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Source {
    corpus_dir: PathBuf,
}

/// The configuration values the selector training depends on.
fn train_key_config(cfg: &RunConfig) -> String {
    let mut trainer = cfg.trainer;
    trainer.log_every = 0;
    json(&(
        cfg.seed,
        cfg.batch_size,
        &cfg.corpus.max_len,
        &cfg.encoder,
        &cfg.selector,
        &cfg.generator,
        &cfg.gqd,
        &cfg.vae,
        &cfg.rd,
        &trainer,
    ))
}

/// Trains the selector and its adversaries on a prepared corpus and writes a
/// checkpoint plus telemetry to `out`. Returns `None` when the stage was
/// already up to date.
pub fn train_selector(corpus_dir: &Path, out: &Path, cfg: &RunConfig, force: bool) -> Result<Option<TrainOutcome>> {
    ensure_dir(out)?;
    let key = key_of("train", &[content_hash(corpus_dir)?, train_key_config(cfg)]);
    let mut outcome = None;
    run_stage("train", &stamp_path(out, true), key, cfg, force, || {
        let (train, vocab) = load_prepared(corpus_dir, cfg)?;
        let pairs: Vec<_> = train.pairs.iter().map(|p| vocab.index_pair(p)).collect();
        let mut trainer = Trainer::new(cfg, vocab.len());
        let telemetry = Telemetry::create(out)?;
        let result = trainer::train(&mut trainer, &pairs, cfg, |rec| telemetry.record(rec));
        telemetry.finish()?;
        let o = result?;
        trainer.save_checkpoint(out, cfg, o.convergence)?;
        fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
        let source = Source {
            corpus_dir: fs::canonicalize(corpus_dir)?,
        };
        fs::write(out.join(SOURCE_FILE), serde_json::to_string_pretty(&source)?)?;
        outcome = Some(o);
        Ok(())
    })?;
    Ok(outcome)
}

/// Config and corpus directory recorded by [`train_selector`].
pub fn selector_run(run_dir: &Path) -> Result<(RunConfig, PathBuf)> {
    let text = fs::read_to_string(run_dir.join(CONFIG_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", run_dir.join(CONFIG_FILE).display())))?;
    let cfg = RunConfig::from_toml_str(&text)?;
    let source: Source = serde_json::from_str(&fs::read_to_string(run_dir.join(SOURCE_FILE))?)?;
    Ok((cfg, source.corpus_dir))
}

// ---------------------------------------------------------------- score

/// Exports the evaluation-mode score of every training pair of the corpus a
/// selector run was trained on.
pub fn score(run_dir: &Path, out: &Path, force: bool) -> Result<Vec<trainer::ScoreLine>> {
    let (cfg, corpus_dir) = selector_run(run_dir)?;
    ensure_parent(out)?;
    let key = key_of("score", &[content_hash(run_dir)?, content_hash(&corpus_dir.join(TRAIN_FILE))?]);
    run_stage("score", &stamp_path(out, false), key, &cfg, force, || {
        let (train, vocab) = load_prepared(&corpus_dir, &cfg)?;
        let pairs: Vec<_> = train.pairs.iter().map(|p| vocab.index_pair(p)).collect();
        let (models, _) = load_models(run_dir, &cfg)?;
        trainer::export_scores(&models.encoder, &models.selector, &pairs, out)?;
        Ok(())
    })?;
    read_scores(out)
}

/// Per-pair generation BLEU (greedy decode against the gold response,
/// smoothed BLEU-4) and reconstruction BLEU (the response branch's
/// bag-of-words prediction, top `|response|` tokens, scored as unigram BLEU
/// against the response; the query branch stands in when the response
/// branch is disabled), partitioned by the augmentation selection.
pub fn diagnostics(run_dir: &Path, scores: &[trainer::ScoreLine], out: &Path, force: bool) -> Result<Vec<metrics::PartitionRow>> {
    let (cfg, corpus_dir) = selector_run(run_dir)?;
    ensure_parent(out)?;
    let key = key_of("diagnostics", &[content_hash(run_dir)?, json(&scores.iter().map(|s| (&s.id, s.score)).collect::<Vec<_>>()), json(&cfg.augmenter.fraction)]);
    run_stage("diagnostics", &stamp_path(out, false), key, &cfg, force, || {
        let (train, vocab) = load_prepared(&corpus_dir, &cfg)?;
        let (models, _) = load_models(run_dir, &cfg)?;
        let ids: Vec<String> = train.pairs.iter().map(|p| p.id.clone()).collect();
        let selected = select_for_augmentation(&ids, scores, cfg.augmenter.fraction)?;
        let score_of: std::collections::HashMap<&str, f64> = scores.iter().map(|s| (s.id.as_str(), s.score)).collect();
        let branch = if cfg.vae.branches.contains(Branch::Response) {
            Branch::Response
        } else {
            Branch::Query
        };
        let opts = decode_options(&cfg);
        let rows = par::try_map(&train.pairs, |_, pair| {
            let ip = vocab.index_pair(pair);
            let generated = models.generator.generate(&ip.query, &opts)?;
            let hyp = vocab.decode(&generated.tokens);
            let generation_bleu = bleu_n(&[hyp], std::slice::from_ref(&pair.response), 4)?;

            let enc = models.encoder.encode_pair(&ip.query, &ip.response)?;
            let s = score_of.get(pair.id.as_str()).copied().ok_or_else(|| Error::MissingScore(pair.id.clone()))?;
            let (side, target) = match branch {
                Branch::Query => (&enc.query_final, &pair.query),
                Branch::Response => (&enc.response_final, &pair.response),
            };
            let tilde: Vec<f64> = side.iter().map(|x| x * s).collect();
            let vae = models.vae(branch);
            let zero = vec![0.0; vae.config().z_dim];
            let post = vae.vae_encode(&tilde, &zero)?;
            let rec = vae.decode(&post.sample)?;
            let bag = top_tokens(&rec.bow_logits, target.len());
            let reconstruction_bleu = bleu_n(&[vocab.decode(&bag)], std::slice::from_ref(target), 1)?;
            Ok(PairDiagnostic {
                id: pair.id.clone(),
                generation_bleu,
                reconstruction_bleu,
            })
        })?;
        let table = metrics::selected_vs_unselected_report(&selected, &rows)?;
        fs::write(out, metrics::partition_csv(&table))?;
        Ok(())
    })?;
    parse_partition_csv(out)
}

fn top_tokens(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (crate::corpus::NUM_RESERVED..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn parse_partition_csv(path: &Path) -> Result<Vec<metrics::PartitionRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let partition = match f[0] {
            "selected" => "selected",
            "unselected" => "unselected",
            _ => return Err(bad("unknown partition")),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(metrics::PartitionRow {
            partition,
            n: f[1].parse().map_err(|_| bad("bad count"))?,
            generation_bleu: num(f[2])?,
            reconstruction_bleu: num(f[3])?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- augment

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Highest scores first.
    Selective,
    /// Uniform random subset of the same size, seeded by the run seed.
    Random,
}

impl SelectionMode {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Selective => "selective",
            SelectionMode::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub originals: usize,
    pub selected: usize,
    pub variants: usize,
    pub total: usize,
}

pub struct AugmentRequest<'a> {
    pub scores: &'a Path,
    pub corpus_dir: &'a Path,
    pub fraction: f64,
    pub multiplier: usize,
    pub mode: SelectionMode,
    pub augmenter: &'a dyn Augmenter,
    pub out: &'a Path,
}

/// Selects a fraction of the training pairs and writes the augmented corpus.
pub fn augment(req: &AugmentRequest, cfg: &RunConfig, force: bool) -> Result<AugmentSummary> {
    ensure_parent(req.out)?;
    let train_file = req.corpus_dir.join(TRAIN_FILE);
    let mut augmenter_cfg = cfg.augmenter.clone();
    augmenter_cfg.fraction = req.fraction;
    augmenter_cfg.multiplier = req.multiplier;
    let key = key_of(
        "augment",
        &[
            content_hash(req.scores)?,
            content_hash(&train_file)?,
            json(&(&augmenter_cfg.kind, req.augmenter.name(), req.fraction, req.multiplier, req.mode, cfg.seed, cfg.corpus.max_len)),
            json(&(&augmenter_cfg.endpoint, &augmenter_cfg.pivot_lang)),
        ],
    );
    run_stage("augment", &stamp_path(req.out, false), key, cfg, force, || {
        let train = load_corpus(&train_file, cfg.corpus.max_len)?;
        let ids: Vec<String> = train.pairs.iter().map(|p| p.id.clone()).collect();
        let scores = read_scores(req.scores)?;
        let selected = match req.mode {
            SelectionMode::Selective => select_for_augmentation(&ids, &scores, req.fraction)?,
            SelectionMode::Random => {
                // the score file must still cover the corpus
                select_for_augmentation(&ids, &scores, 1.0)?;
                select_random(&ids, req.fraction, cfg.seed)?
            }
        };
        let aug = augment::augment_corpus(&train.pairs, &selected, req.augmenter, req.multiplier, cfg.corpus.max_len)?;
        aug.write_jsonl(req.out)?;
        Ok(())
    })?;
    let aug = load_augmented(req.out, cfg.corpus.max_len)?;
    let selected = aug
        .variants
        .iter()
        .map(|v| v.parent_id.as_str())
        .collect::<std::collections::HashSet<_>>()
        .len();
    Ok(AugmentSummary {
        originals: aug.originals.len(),
        selected,
        variants: aug.variants.len(),
        total: aug.len(),
    })
}

// ---------------------------------------------------------------- train-dialog

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogManifest {
    pub config_hash: String,
    pub seed: u64,
    pub pairs: usize,
    pub epochs: usize,
    pub steps: u64,
    pub vocab_size: usize,
    pub final_loss: f64,
}

fn dialog_generator(cfg: &RunConfig, vocab_size: usize) -> Seq2Seq {
    let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(cfg.seed, 0xD1A1, 0, 0));
    Seq2Seq::new(
        GeneratorConfig {
            vocab_size,
            embed_dim: cfg.dialog.embed_dim,
            hidden: cfg.dialog.hidden,
        },
        &mut rng,
    )
}

/// Trains the downstream response generator by teacher forcing on a corpus
/// file (original or augmented), `dialog.epochs` passes over the data.
pub fn train_dialog(corpus_file: &Path, out: &Path, cfg: &RunConfig, force: bool) -> Result<DialogManifest> {
    ensure_dir(out)?;
    let key = key_of(
        "train-dialog",
        &[
            content_hash(corpus_file)?,
            json(&(&cfg.dialog, cfg.seed, cfg.batch_size, cfg.corpus.max_len, cfg.corpus.vocab_size)),
        ],
    );
    run_stage("train-dialog", &stamp_path(out, true), key, cfg, force, || {
        let aug = load_augmented(corpus_file, cfg.corpus.max_len)?;
        let corpus = Corpus {
            pairs: aug.pairs().cloned().collect(),
            split: Split::Train,
        };
        let vocab = build_vocab(&corpus, cfg.corpus.vocab_size)?;
        let pairs: Vec<_> = corpus.pairs.iter().map(|p| vocab.index_pair(p)).collect();
        let mut model = dialog_generator(cfg, vocab.len());
        let mut opt = Adam::new(model.params(), cfg.dialog.lr, Some(cfg.dialog.clip_norm));
        let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, par::derive_seed(cfg.seed, 0xD1A1, 1, 0))?;
        let per_epoch = pairs.len().div_ceil(cfg.batch_size) as u64;
        let total = per_epoch * cfg.dialog.epochs as u64;
        let mut last = f64::NAN;
        for step in 0..total {
            let idx = sampler.next_batch();
            let m = &model;
            let results = par::try_map(&idx, |_, &i| m.mle_gradients(&pairs[i].query, &pairs[i].response))?;
            let inv_n = 1.0 / idx.len() as f64;
            let mut acc = None;
            let mut loss = 0.0;
            for (l, grads) in results {
                loss += l * inv_n;
                trainer::add_grads(&mut acc, grads, inv_n);
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite("dialog mle_loss".into()));
            }
            if let Some(g) = acc {
                opt.step(model.params_mut(), &g);
            }
            last = loss;
            if cfg.trainer.log_every > 0 && step % cfg.trainer.log_every == 0 {
                info!("dialog step {step:>6}/{total} mle {loss:.4}");
            }
        }
        model.params().save(&out.join(GENERATOR_FILE))?;
        vocab.save(&out.join(VOCAB_FILE))?;
        fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
        let manifest = DialogManifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            pairs: pairs.len(),
            epochs: cfg.dialog.epochs,
            steps: total,
            vocab_size: vocab.len(),
            final_loss: last,
        };
        fs::write(out.join(trainer::MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    })?;
    Ok(serde_json::from_str(&fs::read_to_string(out.join(trainer::MANIFEST))?)?)
}

/// Loads a downstream generator together with the configuration it was
/// trained under.
pub fn load_dialog(dir: &Path) -> Result<(Seq2Seq, Vocabulary, DialogManifest, RunConfig)> {
    let cfg_text = fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
    let cfg = RunConfig::from_toml_str(&cfg_text)?;
    let manifest: DialogManifest = serde_json::from_str(
        &fs::read_to_string(dir.join(trainer::MANIFEST)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?,
    )?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let mut model = dialog_generator(&cfg, vocab.len());
    model.params_mut().load_values(&dir.join(GENERATOR_FILE))?;
    Ok((model, vocab, manifest, cfg))
}

fn decode_options(cfg: &RunConfig) -> DecodeOptions {
    DecodeOptions {
        min_steps: cfg.generator.min_steps,
        max_steps: cfg.generator.max_steps,
        strategy: Decoding::Greedy,
        keep_distributions: false,
    }
}

// ---------------------------------------------------------------- evaluate

/// Decodes every test query with the downstream generator and scores the
/// responses against the references. Decoding settings and the recorded
/// config hash come from the generator's own run. Without an embedding file
/// the embedding metrics are reported as 0.
pub fn evaluate(dialog_dir: &Path, test_file: &Path, embeddings: Option<&Path>, report: &Path, force: bool) -> Result<MetricsReport> {
    ensure_parent(report)?;
    let (model, vocab, _, cfg) = load_dialog(dialog_dir)?;
    let cfg = &cfg;
    let key = key_of(
        "evaluate",
        &[
            content_hash(dialog_dir)?,
            content_hash(test_file)?,
            embeddings.map(content_hash).transpose()?.unwrap_or_default(),
        ],
    );
    run_stage("evaluate", &stamp_path(report, false), key, cfg, force, || {
        let test = load_corpus(test_file, cfg.corpus.max_len)?;
        let table = match embeddings {
            Some(p) => EmbeddingTable::load(p)?,
            None => {
                log::warn!("no embedding file configured; embedding metrics will be 0");
                EmbeddingTable::new(1)
            }
        };
        let opts = decode_options(cfg);
        let hyps = par::try_map(&test.pairs, |_, p: &DialogPair| {
            let q = vocab.encode(&p.query);
            Ok(vocab.decode(&model.generate(&q, &opts)?.tokens))
        })?;
        let refs: Vec<Vec<String>> = test.pairs.iter().map(|p| p.response.clone()).collect();
        let r = metrics::evaluate(&hyps, &refs, &table, &cfg.hash(), cfg.seed)?;
        fs::write(report, serde_json::to_string_pretty(&r)?)?;
        Ok(())
    })?;
    Ok(serde_json::from_str(&fs::read_to_string(report)?)?)
}

// ---------------------------------------------------------------- pipeline

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn selector(&self) -> PathBuf {
        self.root.join("selector")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores").join(SCORES_FILE)
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("scores").join(DIAGNOSTICS_FILE)
    }
    pub fn augmented(&self) -> PathBuf {
        self.root.join("augmented").join(AUGMENTED_FILE)
    }
    pub fn dialog(&self) -> PathBuf {
        self.root.join("dialog")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("eval").join(REPORT_FILE)
    }
    pub fn sweep_dir(&self, mode: SelectionMode, fraction: f64) -> PathBuf {
        self.root.join("sweep").join(format!("{}-{fraction}", mode.name()))
    }
    pub fn sweep_csv(&self, mode: SelectionMode) -> PathBuf {
        self.root.join("sweep").join(format!("sweep-{}.csv", mode.name()))
    }
}

/// Failure of one pipeline stage; the stage name is reported to the user.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage: name, source })
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub prepared: PrepareSummary,
    pub convergence: Option<Convergence>,
    pub augmented: AugmentSummary,
    pub dialog: DialogManifest,
    pub report: MetricsReport,
}

/// `None` when the configuration leaves the embedding metrics disabled.
pub fn embeddings_path(cfg: &RunConfig) -> Option<&Path> {
    let p = &cfg.metrics.embeddings_path;
    (!p.as_os_str().is_empty()).then_some(p.as_path())
}

/// Runs every stage in order inside `cfg.run_dir`.
pub fn run_pipeline(cfg: &RunConfig, force: bool) -> std::result::Result<PipelineSummary, StageError> {
    let layout = RunLayout::new(&cfg.run_dir);
    let prepared = stage("prepare", prepare(&cfg.corpus.input, &layout.corpus(), cfg, force))?;
    let outcome = stage("train", train_selector(&layout.corpus(), &layout.selector(), cfg, force))?;
    let convergence = match outcome {
        Some(o) => Some(o.convergence),
        None => stage("train", trainer::Manifest::load(&layout.selector()).map(|m| m.convergence)).ok(),
    };
    let scores = stage("score", score(&layout.selector(), &layout.scores(), force))?;
    stage("score", diagnostics(&layout.selector(), &scores, &layout.diagnostics(), force))?;
    let augmenter = stage("augment", augment::from_config(&cfg.augmenter))?;
    let augmented = stage(
        "augment",
        augment(
            &AugmentRequest {
                scores: &layout.scores(),
                corpus_dir: &layout.corpus(),
                fraction: cfg.augmenter.fraction,
                multiplier: cfg.augmenter.multiplier,
                mode: SelectionMode::Selective,
                augmenter: augmenter.as_ref(),
                out: &layout.augmented(),
            },
            cfg,
            force,
        ),
    )?;
    let dialog = stage("train-dialog", train_dialog(&layout.augmented(), &layout.dialog(), cfg, force))?;
    let emb = embeddings_path(cfg);
    let report = stage(
        "evaluate",
        evaluate(&layout.dialog(), &layout.corpus().join(TEST_FILE), emb, &layout.report(), force),
    )?;
    Ok(PipelineSummary {
        prepared,
        convergence,
        augmented,
        dialog,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub selection: &'static str,
    pub selected: usize,
    pub pairs: usize,
    pub steps: u64,
    pub report: MetricsReport,
}

pub const SWEEP_HEADER: &str =
    "fraction,selection,selected,pairs,steps,dist_1,dist_2,dist_3,bleu_1,bleu_2,bleu_3,bleu_4,emb_average,emb_extrema,emb_greedy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let m = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.fraction,
            r.selection,
            r.selected,
            r.pairs,
            r.steps,
            m.dist_1,
            m.dist_2,
            m.dist_3,
            m.bleu_1,
            m.bleu_2,
            m.bleu_3,
            m.bleu_4,
            m.emb_average,
            m.emb_extrema,
            m.emb_greedy
        ));
    }
    out
}

/// Prepares and trains once (cached), then augments, retrains the
/// downstream generator and evaluates once per fraction. Writes the CSV and
/// returns its rows in the order given.
pub fn run_sweep(cfg: &RunConfig, fractions: &[f64], mode: SelectionMode, force: bool) -> std::result::Result<Vec<SweepRow>, StageError> {
    if fractions.is_empty() {
        return Err(StageError {
            stage: "sweep",
            source: Error::invalid("no fractions given"),
        });
    }
    for &f in fractions {
        stage("sweep", augment::selection_count(f, 1).map(|_| ()))?;
    }
    let layout = RunLayout::new(&cfg.run_dir);
    stage("prepare", prepare(&cfg.corpus.input, &layout.corpus(), cfg, force))?;
    stage("train", train_selector(&layout.corpus(), &layout.selector(), cfg, force))?;
    stage("score", score(&layout.selector(), &layout.scores(), force))?;
    let augmenter = stage("augment", augment::from_config(&cfg.augmenter))?;
    let emb = embeddings_path(cfg);
    let mut rows = Vec::new();
    for &fraction in fractions {
        let dir = layout.sweep_dir(mode, fraction);
        let aug_file = dir.join(AUGMENTED_FILE);
        let summary = stage(
            "augment",
            augment(
                &AugmentRequest {
                    scores: &layout.scores(),
                    corpus_dir: &layout.corpus(),
                    fraction,
                    multiplier: cfg.augmenter.multiplier,
                    mode,
                    augmenter: augmenter.as_ref(),
                    out: &aug_file,
                },
                cfg,
                force,
            ),
        )?;
        let dialog = stage("train-dialog", train_dialog(&aug_file, &dir.join("dialog"), cfg, force))?;
        let report = stage(
            "evaluate",
            evaluate(&dir.join("dialog"), &layout.corpus().join(TEST_FILE), emb, &dir.join(REPORT_FILE), force),
        )?;
        info!("sweep {} {fraction}: {} pairs, {} steps, emb_average {:.4}", mode.name(), summary.total, dialog.steps, report.emb_average);
        rows.push(SweepRow {
            fraction,
            selection: mode.name(),
            selected: summary.selected,
            pairs: summary.total,
            steps: dialog.steps,
            report,
        });
    }
    let csv_path = layout.sweep_csv(mode);
    stage("sweep", ensure_parent(&csv_path).and_then(|_| Ok(fs::write(&csv_path, sweep_csv(&rows))?)))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_skip_unchanged_work() {
        let dir = tempfile::tempdir().unwrap();
        let stamp = dir.path().join(STAMP);
        let cfg = RunConfig::default();
        let mut runs = 0;
        assert!(run_stage("t", &stamp, "k1".into(), &cfg, false, || {
            runs += 1;
            Ok(())
        })
        .unwrap());
        assert!(!run_stage("t", &stamp, "k1".into(), &cfg, false, || {
            runs += 1;
            Ok(())
        })
        .unwrap());
        assert!(run_stage("t", &stamp, "k1".into(), &cfg, true, || {
            runs += 1;
            Ok(())
        })
        .unwrap());
        assert!(run_stage("t", &stamp, "k2".into(), &cfg, false, || {
            runs += 1;
            Ok(())
        })
        .unwrap());
        assert_eq!(runs, 3);
        let s: StageStamp = serde_json::from_str(&fs::read_to_string(&stamp).unwrap()).unwrap();
        assert_eq!(s.config_hash, cfg.hash());
    }

    #[test]
    fn failed_stage_leaves_no_stamp() {
        let dir = tempfile::tempdir().unwrap();
        let stamp = dir.path().join(STAMP);
        let cfg = RunConfig::default();
        run_stage("t", &stamp, "k".into(), &cfg, false, || Ok(())).unwrap();
        assert!(run_stage("t", &stamp, "k2".into(), &cfg, false, || Err(Error::invalid("x"))).is_err());
        assert!(!stamp.exists());
    }

    #[test]
    fn directory_hash_ignores_stamp_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "1").unwrap();
        let h1 = content_hash(dir.path()).unwrap();
        fs::write(dir.path().join(STAMP), "{}").unwrap();
        assert_eq!(h1, content_hash(dir.path()).unwrap());
        fs::write(dir.path().join("a.txt"), "2").unwrap();
        assert_ne!(h1, content_hash(dir.path()).unwrap());
    }

    #[test]
    fn file_stamp_sits_beside_file() {
        assert_eq!(stamp_path(Path::new("/x/scores.jsonl"), false), Path::new("/x/scores.jsonl.stage.json"));
        assert_eq!(stamp_path(Path::new("/x/dir"), true), Path::new("/x/dir/stage.json"));
    }

    #[test]
    fn top_tokens_skip_reserved() {
        assert_eq!(top_tokens(&[9.0, 9.0, 9.0, 9.0, 0.1, 0.5, 0.3], 2), vec![5, 6]);
    }
}
