//! Run configuration: a TOML file with dotted sections. Every key has a
//! default, unknown keys are rejected, and the canonical serialization is
//! hashed so artifacts can record which configuration produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::representativeness::Branch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Directory that receives every stage's artifacts.
    pub run_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub encoder: EncoderSection,
    pub selector: SelectorSection,
    pub generator: GeneratorSection,
    pub gqd: GqdSection,
    pub vae: VaeSection,
    pub rd: HeadSection,
    pub trainer: TrainerSection,
    pub augmenter: AugmenterSection,
    pub dialog: DialogSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 13,
            batch_size: 16,
            run_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            encoder: EncoderSection::default(),
            selector: SelectorSection::default(),
            generator: GeneratorSection::default(),
            gqd: GqdSection::default(),
            vae: VaeSection::default(),
            rd: HeadSection::default(),
            trainer: TrainerSection::default(),
            augmenter: AugmenterSection::default(),
            dialog: DialogSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Raw JSONL input; relative paths resolve against the config file.
    pub input: PathBuf,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Train / valid / test fractions.
    pub split: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            input: PathBuf::from("data/train.jsonl"),
            max_len: 20,
            vocab_size: 50_000,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { hidden: 64, embed_dim: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSection {
    pub target_fraction: f64,
}

impl Default for SelectorSection {
    fn default() -> Self {
        SelectorSection { target_fraction: 0.6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub hidden: usize,
    pub embed_dim: usize,
    pub min_steps: usize,
    pub max_steps: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        GeneratorSection {
            hidden: 64,
            embed_dim: 64,
            min_steps: 10,
            max_steps: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub hidden: usize,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { hidden: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GqdSection {
    pub hidden: usize,
    /// Let the discriminator loss move the projection applied to generated
    /// responses. Off by default: the projection sits on the negative side
    /// only, so a trained offset separates real from generated features
    /// regardless of their content.
    pub train_projection: bool,
}

impl Default for GqdSection {
    fn default() -> Self {
        GqdSection {
            hidden: 64,
            train_projection: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    Both,
    Query,
    Response,
}

impl Branches {
    pub fn enabled(self) -> &'static [Branch] {
        match self {
            Branches::Both => &Branch::BOTH,
            Branches::Query => &[Branch::Query],
            Branches::Response => &[Branch::Response],
        }
    }

    pub fn contains(self, b: Branch) -> bool {
        self.enabled().contains(&b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub z_dim: usize,
    pub hidden: usize,
    pub branches: Branches,
}

impl Default for VaeSection {
    fn default() -> Self {
        VaeSection {
            z_dim: 32,
            hidden: 64,
            branches: Branches::Both,
        }
    }
}

/// How "one discriminator step every five generator steps" is laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Six-step cycle: five generator-side steps, then one discriminator step.
    SixCycle,
    /// One discriminator step out of every five steps.
    FiveStep,
}

impl Schedule {
    pub fn is_discriminator_step(self, step: u64) -> bool {
        match self {
            Schedule::SixCycle => step % 6 == 5,
            Schedule::FiveStep => step % 5 == 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adv_quality: f64,
    pub adv_repr: f64,
    pub length_reg: f64,
    pub dpp: f64,
    pub vae: f64,
    pub mle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv_quality: 1.0,
            adv_repr: 1.0,
            length_reg: 100.0,
            dpp: 0.1,
            vae: 1.0,
            mle: 1.0,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        let all = [
            ("adv_quality", self.adv_quality),
            ("adv_repr", self.adv_repr),
            ("length_reg", self.length_reg),
            ("dpp", self.dpp),
            ("vae", self.vae),
            ("mle", self.mle),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("trainer.loss_weights.{name} must be a nonnegative number, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub max_steps: u64,
    /// Likelihood-only generator steps before joint training starts.
    pub pretrain_steps: u64,
    /// Convergence is not checked before this many steps.
    pub min_steps: u64,
    pub lr: f64,
    pub clip_norm: f64,
    pub schedule: Schedule,
    /// Number of discriminator evaluations averaged for convergence.
    pub window: usize,
    pub log_every: u64,
    /// Also update the encoder from the quality-discriminator loss.
    pub train_encoder: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            max_steps: 30_000,
            pretrain_steps: 1500,
            min_steps: 0,
            lr: 1e-3,
            clip_norm: 5.0,
            schedule: Schedule::SixCycle,
            window: 50,
            log_every: 100,
            train_encoder: true,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmenterKind {
    Mock,
    Backtranslate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmenterSection {
    pub kind: AugmenterKind,
    pub fraction: f64,
    pub multiplier: usize,
    pub endpoint: String,
    pub pivot_lang: String,
    pub max_inflight: usize,
    pub retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for AugmenterSection {
    fn default() -> Self {
        AugmenterSection {
            kind: AugmenterKind::Mock,
            fraction: 0.6,
            multiplier: 10,
            endpoint: "http://127.0.0.1:8080/translate".to_string(),
            pivot_lang: "fr".to_string(),
            max_inflight: 4,
            retries: 3,
            backoff_ms: 200,
            timeout_ms: 10_000,
        }
    }
}

/// The downstream response generator retrained on the augmented corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DialogSection {
    pub hidden: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for DialogSection {
    fn default() -> Self {
        DialogSection {
            hidden: 64,
            embed_dim: 64,
            epochs: 5,
            lr: 1e-3,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Text word-vector file (`word v1 .. vd` per line). Empty disables the
    /// embedding metrics.
    pub embeddings_path: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.run_dir);
        resolve(&mut cfg.corpus.input);
        resolve(&mut cfg.metrics.embeddings_path);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.corpus.max_len == 0 || self.corpus.vocab_size == 0 {
            return bad("corpus.max_len and corpus.vocab_size must be positive".into());
        }
        let split_sum: f64 = self.corpus.split.iter().sum();
        if self.corpus.split.iter().any(|&r| r < 0.0) || (split_sum - 1.0).abs() > 1e-9 {
            return bad(format!("corpus.split must be nonnegative and sum to 1, got {:?}", self.corpus.split));
        }
        if !(0.0..=1.0).contains(&self.selector.target_fraction) {
            return bad("selector.target_fraction must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("encoder.hidden", self.encoder.hidden),
            ("encoder.embed_dim", self.encoder.embed_dim),
            ("generator.hidden", self.generator.hidden),
            ("generator.embed_dim", self.generator.embed_dim),
            ("gqd.hidden", self.gqd.hidden),
            ("rd.hidden", self.rd.hidden),
            ("vae.hidden", self.vae.hidden),
            ("vae.z_dim", self.vae.z_dim),
            ("dialog.hidden", self.dialog.hidden),
            ("dialog.embed_dim", self.dialog.embed_dim),
            ("trainer.window", self.trainer.window),
            ("augmenter.multiplier", self.augmenter.multiplier),
            ("augmenter.max_inflight", self.augmenter.max_inflight),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.generator.min_steps > self.generator.max_steps || self.generator.max_steps == 0 {
            return bad("generator.min_steps must not exceed generator.max_steps".into());
        }
        if !(self.augmenter.fraction > 0.0 && self.augmenter.fraction <= 1.0) {
            return bad("augmenter.fraction must lie in (0, 1]".into());
        }
        if !(self.trainer.lr > 0.0 && self.dialog.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        self.trainer.loss_weights.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded. File
    /// locations (run directory, input corpus, word vectors) are left out:
    /// stages key on the contents of those files, so the same run in another
    /// directory hashes the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        c.corpus.input = PathBuf::new();
        c.metrics.embeddings_path = PathBuf::new();
        hex_digest(c.to_toml().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.corpus.max_len, 20);
        assert_eq!(cfg.trainer.max_steps, 30_000);
        assert_eq!(cfg.selector.target_fraction, 0.6);
        assert_eq!(cfg.augmenter.multiplier, 10);
    }

    #[test]
    fn dotted_keys_override() {
        let cfg = RunConfig::from_toml_str(
            "seed = 5\n[trainer.loss_weights]\ndpp = 0.5\n[vae]\nbranches = \"query\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.trainer.loss_weights.dpp, 0.5);
        assert_eq!(cfg.trainer.loss_weights.mle, 1.0);
        assert_eq!(cfg.vae.branches, Branches::Query);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("sede = 5"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("[trainer]\nmax_step = 5").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[trainer.loss_weights]\ndpp = -1.0").is_err());
        assert!(RunConfig::from_toml_str("[corpus]\nsplit = [0.5, 0.2, 0.2]").is_err());
        assert!(RunConfig::from_toml_str("[augmenter]\nfraction = 0.0").is_err());
    }

    #[test]
    fn shipped_config_spells_out_the_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let mut cfg = RunConfig::load(&path).unwrap();
        assert!(cfg.corpus.input.ends_with("data/toy/corpus.jsonl"));
        assert!(cfg.metrics.embeddings_path.ends_with("data/toy/embeddings.txt"));
        let defaults = RunConfig::default();
        cfg.run_dir = defaults.run_dir.clone();
        cfg.corpus.input = defaults.corpus.input.clone();
        cfg.metrics.embeddings_path = defaults.metrics.embeddings_path.clone();
        assert_eq!(cfg, defaults);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut moved = a.clone();
        moved.run_dir = PathBuf::from("/elsewhere");
        moved.corpus.input = PathBuf::from("/elsewhere/train.jsonl");
        moved.metrics.embeddings_path = PathBuf::from("/elsewhere/vectors.txt");
        assert_eq!(a.hash(), moved.hash());
        let back = RunConfig::from_toml_str(&a.to_toml()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn schedules() {
        let disc = (0..60).filter(|&s| Schedule::SixCycle.is_discriminator_step(s)).count();
        assert_eq!(disc, 10);
        let disc = (0..60).filter(|&s| Schedule::FiveStep.is_discriminator_step(s)).count();
        assert_eq!(disc, 12);
    }
}
