//! Joint adversarial training of the selector against the quality and
//! representativeness discriminators.
//!
//! Steps alternate according to [`Schedule`]: generator-side steps update the
//! selector (adversarial, length and DPP terms), the reconstructors and the
//! generator; discriminator steps update the quality discriminator (and the
//! shared encoder), and both representativeness discriminators. Per-sample
//! work runs through [`crate::par`]; gradients are reduced in sample order so
//! a run is bit-reproducible for a fixed seed.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, RunConfig, Schedule};
use crate::corpus::{IndexedPair, TokenId, EOS};
use crate::encoder::{BiGruEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{DecodeOptions, Decoding, GeneratorConfig, ResponseGenerator, Seq2Seq};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Family, ParamSet};
use crate::par;
use crate::quality::{
    discriminator_accuracy, fooling_loss_graph, gqd_accuracy, pair_loss_graph, Gqd,
};
use crate::representativeness::{kl_schedule, vae_loss_graph, Branch, Rd, Vae, VaeConfig};
use crate::selector::{dpp_loss_graph, length_regularizer_graph, Selector};
use crate::tensor::Tensor;

/// Lower and upper bound of the window means that count as "cannot discriminate".
pub const CONVERGENCE_BAND: (f64, f64) = (0.45, 0.55);

/// Every trainable component of the selection model.
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: BiGruEncoder,
    pub selector: Selector,
    pub generator: Seq2Seq,
    pub gqd: Gqd,
    pub vae_q: Vae,
    pub vae_r: Vae,
    pub rd_q: Rd,
    pub rd_r: Rd,
}

impl Models {
    pub fn new(cfg: &RunConfig, vocab_size: usize) -> Self {
        let rng = |family: Family| ChaCha8Rng::seed_from_u64(par::derive_seed(cfg.seed, 0xC0DE, family as u64, 0));
        let d = cfg.encoder.hidden;
        let side = 2 * d;
        let vae_cfg = VaeConfig {
            feature_dim: side,
            hidden: cfg.vae.hidden,
            z_dim: cfg.vae.z_dim,
            vocab_size,
        };
        Models {
            encoder: BiGruEncoder::new(
                EncoderConfig {
                    vocab_size,
                    embed_dim: cfg.encoder.embed_dim,
                    hidden: d,
                },
                &mut rng(Family::Encoder),
            ),
            selector: Selector::new(d, &mut rng(Family::Selector)),
            generator: Seq2Seq::new(
                GeneratorConfig {
                    vocab_size,
                    embed_dim: cfg.generator.embed_dim,
                    hidden: cfg.generator.hidden,
                },
                &mut rng(Family::Generator),
            ),
            gqd: Gqd::new(side, cfg.gqd.hidden, &mut rng(Family::Gqd)),
            vae_q: Vae::new(Branch::Query, vae_cfg, &mut rng(Family::VaeQ)),
            vae_r: Vae::new(Branch::Response, vae_cfg, &mut rng(Family::VaeR)),
            rd_q: Rd::new(Branch::Query, side, cfg.rd.hidden, &mut rng(Family::RdQ)),
            rd_r: Rd::new(Branch::Response, side, cfg.rd.hidden, &mut rng(Family::RdR)),
        }
    }

    pub fn vae(&self, b: Branch) -> &Vae {
        match b {
            Branch::Query => &self.vae_q,
            Branch::Response => &self.vae_r,
        }
    }

    pub fn rd(&self, b: Branch) -> &Rd {
        match b {
            Branch::Query => &self.rd_q,
            Branch::Response => &self.rd_r,
        }
    }

    pub fn params(&self, family: Family) -> &ParamSet {
        match family {
            Family::Encoder => self.encoder.params(),
            Family::Selector => self.selector.params(),
            Family::Generator => self.generator.params(),
            Family::Gqd => self.gqd.params(),
            Family::VaeQ => self.vae_q.params(),
            Family::VaeR => self.vae_r.params(),
            Family::RdQ => self.rd_q.params(),
            Family::RdR => self.rd_r.params(),
        }
    }

    pub fn params_mut(&mut self, family: Family) -> &mut ParamSet {
        match family {
            Family::Encoder => self.encoder.params_mut(),
            Family::Selector => self.selector.params_mut(),
            Family::Generator => self.generator.params_mut(),
            Family::Gqd => self.gqd.params_mut(),
            Family::VaeQ => self.vae_q.params_mut(),
            Family::VaeR => self.vae_r.params_mut(),
            Family::RdQ => self.rd_q.params_mut(),
            Family::RdR => self.rd_r.params_mut(),
        }
    }

    /// Writes one `{family}.json` parameter file per component.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for family in Family::ALL {
            self.params(family).save(&dir.join(format!("{}.json", family.name())))?;
        }
        Ok(())
    }

    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        for family in Family::ALL {
            self.params_mut(family).load_values(&dir.join(format!("{}.json", family.name())))?;
        }
        Ok(())
    }
}

/// Per-step loss values. Sums over the batch for the adversarial terms,
/// batch means for the reconstruction and likelihood terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_d: f64,
    pub l_g: f64,
    pub repr: f64,
    pub length_reg: f64,
    pub dpp: f64,
    pub vae_q: Option<f64>,
    pub vae_r: Option<f64>,
    pub rd_loss: f64,
    pub mle: f64,
    pub gqd_accuracy: f64,
    pub rd_accuracy: f64,
    pub mean_score: f64,
}

impl LossRecord {
    fn check_finite(&self) -> Result<()> {
        let named = [
            ("L_D", Some(self.l_d)),
            ("L_G", Some(self.l_g)),
            ("selector_repr_loss", Some(self.repr)),
            ("length_regularizer", Some(self.length_reg)),
            ("dpp_loss", Some(self.dpp)),
            ("vae_loss_q", self.vae_q),
            ("vae_loss_r", self.vae_r),
            ("rd_loss", Some(self.rd_loss)),
            ("mle_loss", Some(self.mle)),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::NonFinite(name.to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub kind: StepKind,
    pub kl_coeff: f64,
    pub losses: LossRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub batch_index: u64,
    pub kl_coeff: f64,
    pub loss_weights: LossWeights,
    pub rng_seed: u64,
    /// Most recent `(gqd_accuracy, rd_accuracy)` discriminator evaluations.
    pub accuracy_window: VecDeque<(f64, f64)>,
    pub window: usize,
}

impl TrainState {
    pub fn new(seed: u64, loss_weights: LossWeights, window: usize) -> Self {
        TrainState {
            step: 0,
            batch_index: 0,
            kl_coeff: kl_schedule(0),
            loss_weights,
            rng_seed: seed,
            accuracy_window: VecDeque::with_capacity(window),
            window,
        }
    }

    pub fn record_accuracy(&mut self, gqd: f64, rd: f64) {
        if self.accuracy_window.len() == self.window {
            self.accuracy_window.pop_front();
        }
        self.accuracy_window.push_back((gqd, rd));
    }

    /// Window means, `None` while the window is empty.
    pub fn window_means(&self) -> Option<(f64, f64)> {
        if self.accuracy_window.is_empty() {
            return None;
        }
        let n = self.accuracy_window.len() as f64;
        let (a, b) = self
            .accuracy_window
            .iter()
            .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
        Some((a / n, b / n))
    }

    pub fn window_full(&self) -> bool {
        self.accuracy_window.len() >= self.window
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Convergence {
    Continue,
    /// Both discriminators sit at chance over a full window.
    Converged { gqd: f64, rd: f64 },
    /// The step budget ran out; window means as they stood (if any).
    Budget { gqd: Option<f64>, rd: Option<f64> },
}

impl Convergence {
    pub fn is_done(self) -> bool {
        !matches!(self, Convergence::Continue)
    }

    pub fn reason(self) -> &'static str {
        match self {
            Convergence::Continue => "continue",
            Convergence::Converged { .. } => "converged",
            Convergence::Budget { .. } => "budget",
        }
    }
}

pub fn in_band(x: f64) -> bool {
    (CONVERGENCE_BAND.0..=CONVERGENCE_BAND.1).contains(&x)
}

/// Stop rule: both window means inside [0.45, 0.55] over a full window (and
/// at least `min_steps` taken), or the step budget exhausted.
pub fn check_convergence(state: &TrainState, max_steps: u64, min_steps: u64) -> Convergence {
    let means = state.window_means();
    if state.window_full() && state.step >= min_steps {
        if let Some((gqd, rd)) = means {
            if in_band(gqd) && in_band(rd) {
                return Convergence::Converged { gqd, rd };
            }
        }
    }
    if state.step >= max_steps {
        return Convergence::Budget {
            gqd: means.map(|m| m.0),
            rd: means.map(|m| m.1),
        };
    }
    Convergence::Continue
}

/// Deterministic epoch-wise shuffled minibatches. The last batch of an epoch
/// may be short.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("training pairs"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut s = BatchSampler {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(self.seed, 0xBA7C, self.epoch, 0));
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// Hyperparameters the step functions need, pulled out of [`RunConfig`].
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub schedule: Schedule,
    pub target_fraction: f64,
    pub decode: DecodeOptions,
    pub branches: Vec<Branch>,
    pub train_encoder: bool,
    pub train_projection: bool,
    pub z_dim: usize,
}

impl StepSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        StepSettings {
            schedule: cfg.trainer.schedule,
            target_fraction: cfg.selector.target_fraction,
            decode: DecodeOptions {
                min_steps: cfg.generator.min_steps,
                max_steps: cfg.generator.max_steps,
                strategy: Decoding::Greedy,
                keep_distributions: false,
            },
            branches: cfg.vae.branches.enabled().to_vec(),
            train_encoder: cfg.trainer.train_encoder,
            train_projection: cfg.gqd.train_projection,
            z_dim: cfg.vae.z_dim,
        }
    }
}

/// Encoder features and a fresh generated response for one pair.
struct Prepared {
    qf: Vec<f64>,
    rf: Vec<f64>,
    generated: Vec<TokenId>,
    gf: Vec<f64>,
}

impl Prepared {
    fn feature(&self) -> Vec<f64> {
        let mut f = self.qf.clone();
        f.extend_from_slice(&self.rf);
        f
    }

    fn side(&self, b: Branch) -> &[f64] {
        match b {
            Branch::Query => &self.qf,
            Branch::Response => &self.rf,
        }
    }
}

fn branch_tokens(pair: &IndexedPair, b: Branch) -> &[TokenId] {
    match b {
        Branch::Query => &pair.query,
        Branch::Response => &pair.response,
    }
}

fn nonempty(tokens: Vec<TokenId>) -> Vec<TokenId> {
    if tokens.is_empty() {
        vec![EOS]
    } else {
        tokens
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::row_vector(v.to_vec())
}

pub(crate) fn add_grads(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>, scale: f64) {
    match acc {
        None => {
            let mut g = grads;
            if scale != 1.0 {
                g.iter_mut().for_each(|t| t.scale_assign(scale));
            }
            *acc = Some(g);
        }
        Some(a) => {
            for (x, mut y) in a.iter_mut().zip(grads) {
                if scale != 1.0 {
                    y.scale_assign(scale);
                }
                x.add_assign(&y);
            }
        }
    }
}

fn zero_like(set: &ParamSet) -> Vec<Tensor> {
    set.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
}

/// Standard-normal reparameterization noise, keyed by (seed, step, sample, branch).
pub fn vae_noise(seed: u64, step: u64, sample: usize, branch: Branch, z_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, step, sample as u64, branch as u64 + 1));
    (0..z_dim).map(|_| rng.sample(StandardNormal)).collect()
}

struct GenSample {
    l_g: f64,
    repr: f64,
    vae: [Option<f64>; 2],
    m_g: f64,
    m_f: f64,
    p_orig: Vec<f64>,
    p_recon: Vec<f64>,
    selector_grads: Vec<Tensor>,
    vae_grads: [Option<Vec<Tensor>>; 2],
}

struct DiscSample {
    m_g: f64,
    m_f: f64,
    p_orig: Vec<f64>,
    p_recon: Vec<f64>,
    vae: [Option<f64>; 2],
    s: f64,
    grads: Vec<(Family, Vec<Tensor>)>,
}

fn branch_slot(b: Branch) -> usize {
    match b {
        Branch::Query => 0,
        Branch::Response => 1,
    }
}

/// The selection model plus optimizers and training state.
pub struct Trainer {
    pub models: Models,
    pub state: TrainState,
    settings: StepSettings,
    optimizers: Vec<Adam>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, vocab_size: usize) -> Self {
        let models = Models::new(cfg, vocab_size);
        let clip = Some(cfg.trainer.clip_norm).filter(|c| *c > 0.0);
        let optimizers = Family::ALL
            .iter()
            .map(|&f| Adam::new(models.params(f), cfg.trainer.lr, clip))
            .collect();
        Trainer {
            models,
            state: TrainState::new(cfg.seed, cfg.trainer.loss_weights, cfg.trainer.window),
            settings: StepSettings::from_config(cfg),
            optimizers,
        }
    }

    pub fn settings(&self) -> &StepSettings {
        &self.settings
    }

    fn apply(&mut self, family: Family, grads: &[Tensor]) {
        let idx = Family::ALL.iter().position(|&f| f == family).expect("known family");
        let opt = &mut self.optimizers[idx];
        opt.step(self.models.params_mut(family), grads);
    }

    /// Teacher-forced likelihood step on the generator alone; returns the batch
    /// mean loss. Used to warm the generator up before selection starts.
    pub fn pretrain_step(&mut self, batch: &[&IndexedPair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let generator = &self.models.generator;
        let mle = par::try_map(batch, |_, pair| generator.mle_gradients(&pair.query, &pair.response))?;
        let inv_n = 1.0 / batch.len() as f64;
        let mut acc = None;
        let mut loss = 0.0;
        for (l, grads) in mle {
            loss += l * inv_n;
            add_grads(&mut acc, grads, inv_n);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("mle_loss".into()));
        }
        if let Some(gr) = acc {
            self.apply(Family::Generator, &gr);
        }
        Ok(loss)
    }

    fn prepare(&self, batch: &[&IndexedPair]) -> Result<Vec<Prepared>> {
        let m = &self.models;
        let decode = &self.settings.decode;
        par::try_map(batch, |_, pair| {
            let (_, qf) = m.encoder.encode_sequence(&pair.query)?;
            let (_, rf) = m.encoder.encode_sequence(&pair.response)?;
            let generated = nonempty(m.generator.generate(&pair.query, decode)?.tokens);
            let (_, gf) = m.encoder.encode_sequence(&generated)?;
            Ok(Prepared { qf, rf, generated, gf })
        })
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &[&IndexedPair]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        self.state.kl_coeff = kl_schedule(self.state.batch_index);
        let kind = if self.settings.schedule.is_discriminator_step(self.state.step) {
            StepKind::Discriminator
        } else {
            StepKind::Generator
        };
        let losses = match kind {
            StepKind::Generator => self.generator_step(batch)?,
            StepKind::Discriminator => self.discriminator_step(batch)?,
        };
        let record = StepRecord {
            step: self.state.step,
            kind,
            kl_coeff: self.state.kl_coeff,
            losses,
        };
        debug!("step {} {:?} {:?}", record.step, record.kind, record.losses);
        self.state.step += 1;
        self.state.batch_index += 1;
        Ok(record)
    }

    fn generator_step(&mut self, batch: &[&IndexedPair]) -> Result<LossRecord> {
        let w = self.state.loss_weights;
        let prepared = self.prepare(batch)?;
        let n = batch.len();
        let features: Vec<Vec<f64>> = prepared.iter().map(Prepared::feature).collect();
        let scores: Vec<f64> = par::try_map(&features, |_, f| Ok(self.models.selector.score_feature(f)?.value()))?;

        // batch-level terms: gradient with respect to the score vector
        let (length_reg, dpp, score_grad) = {
            let mut g = Graph::new();
            let s = g.input(Tensor::column_vector(scores.clone()));
            let dim = features[0].len();
            let flat: Vec<f64> = features.iter().flatten().copied().collect();
            let f = g.input(Tensor::from_vec(n, dim, flat));
            let lr = length_regularizer_graph(&mut g, s, self.settings.target_fraction);
            let dpp = dpp_loss_graph(&mut g, s, f)?;
            let a = g.scale(lr, w.length_reg);
            let b = g.scale(dpp, w.dpp);
            let total = g.add(a, b);
            let grads = g.backward(total);
            let gs = grads
                .wrt(s)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; n]);
            (g.scalar(lr), g.scalar(dpp), gs)
        };
        if !dpp.is_finite() {
            return Err(Error::NonFinite("dpp_loss".into()));
        }

        let m = &self.models;
        let st = &self.state;
        let settings = &self.settings;
        let items: Vec<(usize, &Prepared)> = prepared.iter().enumerate().collect();
        let samples: Vec<GenSample> = par::try_map(&items, |_, &(i, prep)| {
            let pair = batch[i];
            let mut g = Graph::new();
            let x = g.input(row(&features[i]));
            let s = m.selector.score_graph(&mut g, x);
            let keep = g.one_minus(s);
            let qf = g.input(row(&prep.qf));
            let rf = g.input(row(&prep.rf));
            let gf = g.input(row(&prep.gf));
            let q_hat = g.scale_by(qf, keep);
            let r_hat = g.scale_by(rf, keep);
            let gen = m.gqd.project_graph(&mut g, gf);
            let gen_hat = g.scale_by(gen, keep);
            let m_g = m.gqd.match_graph(&mut g, q_hat, r_hat);
            let m_f = m.gqd.match_graph(&mut g, q_hat, gen_hat);
            let l_g = fooling_loss_graph(&mut g, m_f);

            let mut repr_terms = Vec::new();
            let mut vae_terms: [Option<Var>; 2] = [None, None];
            let mut p_orig = Vec::new();
            let mut p_recon = Vec::new();
            for &b in &settings.branches {
                let side = match b {
                    Branch::Query => qf,
                    Branch::Response => rf,
                };
                let tilde = g.scale_by(side, s);
                let vae = m.vae(b);
                let noise = vae_noise(st.rng_seed, st.step, i, b, settings.z_dim);
                let post = vae.encode_graph(&mut g, tilde, &noise);
                let rec = vae.decode_graph(&mut g, post.sample);
                let rd = m.rd(b);
                let pr = rd.prob_graph(&mut g, rec.features);
                let po = rd.prob_graph(&mut g, tilde);
                p_orig.push(g.scalar(po));
                p_recon.push(g.scalar(pr));
                repr_terms.push(fooling_loss_graph(&mut g, pr));
                let vl = vae_loss_graph(&mut g, tilde, post, rec, st.kl_coeff, branch_tokens(pair, b));
                vae_terms[branch_slot(b)] = Some(vl.total);
            }
            let repr = if repr_terms.is_empty() {
                g.input(Tensor::scalar(0.0))
            } else {
                g.add_all(&repr_terms)
            };

            let a = g.scale(l_g, w.adv_quality);
            let b = g.scale(repr, w.adv_repr);
            let c = g.scale(s, score_grad[i]);
            let objective = g.add_all(&[a, b, c]);
            let selector_grads = g.backward(objective).for_family(m.selector.params());

            let mut vae_grads: [Option<Vec<Tensor>>; 2] = [None, None];
            let mut vae_vals = [None, None];
            for &br in &settings.branches {
                let slot = branch_slot(br);
                let v = vae_terms[slot].expect("enabled branch has a loss");
                vae_vals[slot] = Some(g.scalar(v));
                vae_grads[slot] = Some(g.backward(v).for_family(m.vae(br).params()));
            }
            Ok(GenSample {
                l_g: g.scalar(l_g),
                repr: g.scalar(repr),
                vae: vae_vals,
                m_g: g.scalar(m_g),
                m_f: g.scalar(m_f),
                p_orig,
                p_recon,
                selector_grads,
                vae_grads,
            })
        })?;

        let mle: Vec<(f64, Vec<Tensor>)> =
            par::try_map(batch, |_, pair| m.generator.mle_gradients(&pair.query, &pair.response))?;

        // ordered reductions
        let inv_n = 1.0 / n as f64;
        let mut sel_acc = None;
        let mut vae_acc: [Option<Vec<Tensor>>; 2] = [None, None];
        let mut rec = LossRecord {
            length_reg,
            dpp,
            mean_score: scores.iter().sum::<f64>() * inv_n,
            ..LossRecord::default()
        };
        let mut vae_sum = [0.0, 0.0];
        let (mut m_gs, mut m_fs, mut p_os, mut p_rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for smp in samples {
            rec.l_g += smp.l_g;
            rec.repr += smp.repr;
            m_gs.push(smp.m_g);
            m_fs.push(smp.m_f);
            p_os.extend(smp.p_orig);
            p_rs.extend(smp.p_recon);
            add_grads(&mut sel_acc, smp.selector_grads, 1.0);
            for slot in 0..2 {
                if let (Some(v), Some(gr)) = (smp.vae[slot], smp.vae_grads[slot].clone()) {
                    vae_sum[slot] += v;
                    add_grads(&mut vae_acc[slot], gr, w.vae * inv_n);
                }
            }
        }
        let mut gen_acc = None;
        for (loss, grads) in mle {
            rec.mle += loss * inv_n;
            add_grads(&mut gen_acc, grads, w.mle * inv_n);
        }
        for &b in &self.settings.branches {
            let v = Some(vae_sum[branch_slot(b)] * inv_n);
            match b {
                Branch::Query => rec.vae_q = v,
                Branch::Response => rec.vae_r = v,
            }
        }
        rec.l_d = crate::quality::gqd_loss(&m_gs, &m_fs)?;
        rec.gqd_accuracy = gqd_accuracy(&m_gs, &m_fs)?;
        if !p_os.is_empty() {
            rec.rd_loss = crate::representativeness::rd_loss(&p_os, &p_rs)?;
            rec.rd_accuracy = discriminator_accuracy(&p_os, &p_rs)?;
        }
        rec.check_finite()?;

        // gradient of the (selector-only) objective; the length and DPP terms
        // already entered through the score gradient
        let sel = sel_acc.unwrap_or_else(|| zero_like(self.models.selector.params()));
        self.apply(Family::Selector, &sel);
        for b in self.settings.branches.clone() {
            if let Some(gr) = vae_acc[branch_slot(b)].take() {
                self.apply(b.vae_family(), &gr);
            }
        }
        if let Some(gr) = gen_acc {
            self.apply(Family::Generator, &gr);
        }
        Ok(rec)
    }

    fn discriminator_step(&mut self, batch: &[&IndexedPair]) -> Result<LossRecord> {
        let w = self.state.loss_weights;
        let prepared = self.prepare(batch)?;
        let m = &self.models;
        let st = &self.state;
        let settings = &self.settings;
        let items: Vec<(usize, &Prepared)> = prepared.iter().enumerate().collect();
        let samples: Vec<DiscSample> = par::try_map(&items, |_, &(i, prep)| {
            let pair = batch[i];
            let s = m.selector.score_feature(&prep.feature())?.value();
            let keep = 1.0 - s;
            let mut g = Graph::new();
            let (qf, rf, gf) = if settings.train_encoder {
                let q = m.encoder.encode_graph(&mut g, &pair.query)?.final_state;
                let r = m.encoder.encode_graph(&mut g, &pair.response)?.final_state;
                let gen = m.encoder.encode_graph(&mut g, &prep.generated)?.final_state;
                (q, r, gen)
            } else {
                (g.input(row(&prep.qf)), g.input(row(&prep.rf)), g.input(row(&prep.gf)))
            };
            let q_hat = g.scale(qf, keep);
            let r_hat = g.scale(rf, keep);
            let gen = m.gqd.project_graph(&mut g, gf);
            let gen_hat = g.scale(gen, keep);
            let m_g = m.gqd.match_graph(&mut g, q_hat, r_hat);
            let m_f = m.gqd.match_graph(&mut g, q_hat, gen_hat);
            let l_d = pair_loss_graph(&mut g, m_g, m_f);
            let mut terms = vec![g.scale(l_d, w.adv_quality)];

            let mut p_orig = Vec::new();
            let mut p_recon = Vec::new();
            let mut vae_vals = [None, None];
            for &b in &settings.branches {
                // the reconstruction path does not train the encoder
                let tilde_v: Vec<f64> = prep.side(b).iter().map(|x| x * s).collect();
                let vae = m.vae(b);
                let noise = vae_noise(st.rng_seed, st.step, i, b, settings.z_dim);
                let mut vg = Graph::new();
                let xv = vg.input(row(&tilde_v));
                let post = vae.encode_graph(&mut vg, xv, &noise);
                let recv = vae.decode_graph(&mut vg, post.sample);
                let vl = vae_loss_graph(&mut vg, xv, post, recv, st.kl_coeff, branch_tokens(pair, b));
                vae_vals[branch_slot(b)] = Some(vg.scalar(vl.total));
                let recon = vg.value(recv.features).clone();

                let tilde = g.input(row(&tilde_v));
                let recon = g.input(recon);
                let rd = m.rd(b);
                let po = rd.prob_graph(&mut g, tilde);
                let pr = rd.prob_graph(&mut g, recon);
                p_orig.push(g.scalar(po));
                p_recon.push(g.scalar(pr));
                let l = pair_loss_graph(&mut g, po, pr);
                terms.push(g.scale(l, w.adv_repr));
            }
            let total = g.add_all(&terms);
            let grads = g.backward(total);
            let mut gqd_grads = grads.for_family(m.gqd.params());
            if !settings.train_projection {
                let (pw, pb) = m.gqd.projection();
                gqd_grads[pw].scale_assign(0.0);
                gqd_grads[pb].scale_assign(0.0);
            }
            let mut out = vec![(Family::Gqd, gqd_grads)];
            if settings.train_encoder {
                out.push((Family::Encoder, grads.for_family(m.encoder.params())));
            }
            for &b in &settings.branches {
                out.push((b.rd_family(), grads.for_family(m.rd(b).params())));
            }
            Ok(DiscSample {
                m_g: g.scalar(m_g),
                m_f: g.scalar(m_f),
                p_orig,
                p_recon,
                vae: vae_vals,
                s,
                grads: out,
            })
        })?;

        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let mut accs: Vec<(Family, Option<Vec<Tensor>>)> = Vec::new();
        let (mut m_gs, mut m_fs, mut p_os, mut p_rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut vae_sum = [0.0, 0.0];
        let mut score_sum = 0.0;
        for smp in samples {
            m_gs.push(smp.m_g);
            m_fs.push(smp.m_f);
            p_os.extend(smp.p_orig);
            p_rs.extend(smp.p_recon);
            score_sum += smp.s;
            for slot in 0..2 {
                vae_sum[slot] += smp.vae[slot].unwrap_or(0.0);
            }
            for (family, grads) in smp.grads {
                match accs.iter_mut().find(|(f, _)| *f == family) {
                    Some((_, acc)) => add_grads(acc, grads, 1.0),
                    None => accs.push((family, Some(grads))),
                }
            }
        }
        let mut rec = LossRecord {
            l_d: crate::quality::gqd_loss(&m_gs, &m_fs)?,
            l_g: crate::quality::selector_quality_loss(&m_fs),
            gqd_accuracy: gqd_accuracy(&m_gs, &m_fs)?,
            mean_score: score_sum * inv_n,
            ..LossRecord::default()
        };
        if !p_os.is_empty() {
            rec.rd_loss = crate::representativeness::rd_loss(&p_os, &p_rs)?;
            rec.rd_accuracy = discriminator_accuracy(&p_os, &p_rs)?;
            rec.repr = crate::representativeness::selector_repr_loss(&p_rs);
        }
        for &b in &self.settings.branches {
            let v = Some(vae_sum[branch_slot(b)] * inv_n);
            match b {
                Branch::Query => rec.vae_q = v,
                Branch::Response => rec.vae_r = v,
            }
        }
        rec.check_finite()?;
        // with no enabled branch the RD accuracy is undefined; treat it as chance
        let rd_acc = if p_os.is_empty() { 0.5 } else { rec.rd_accuracy };
        self.state.record_accuracy(rec.gqd_accuracy, rd_acc);
        for (family, grads) in accs {
            if let Some(gr) = grads {
                self.apply(family, &gr);
            }
        }
        Ok(rec)
    }

    /// Writes parameters plus `manifest.json`.
    pub fn save_checkpoint(&self, dir: &Path, cfg: &RunConfig, convergence: Convergence) -> Result<()> {
        self.models.save(dir)?;
        let manifest = Manifest {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            step: self.state.step,
            batch_index: self.state.batch_index,
            vocab_size: self.models.generator.vocab_size(),
            convergence,
            window_means: self.state.window_means(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub batch_index: u64,
    pub vocab_size: usize,
    pub convergence: Convergence,
    pub window_means: Option<(f64, f64)>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Rebuilds the models of a checkpoint directory.
pub fn load_models(dir: &Path, cfg: &RunConfig) -> Result<(Models, Manifest)> {
    let manifest = Manifest::load(dir)?;
    let mut models = Models::new(cfg, manifest.vocab_size);
    models.load_into(dir)?;
    Ok((models, manifest))
}

enum TelemetryMsg {
    Row(StepRecord),
    Flush,
}

/// Ordered, asynchronous CSV writer for the per-step curves:
/// `quality.csv` (step, L_D, L_G, gqd_accuracy) and
/// `repr.csv` (step, vae_loss_q, vae_loss_r, kl_coeff, rd_loss, rd_accuracy).
pub struct Telemetry {
    tx: Option<mpsc::Sender<TelemetryMsg>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

pub const QUALITY_CSV: &str = "quality.csv";
pub const REPR_CSV: &str = "repr.csv";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Telemetry {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut quality = std::io::BufWriter::new(fs::File::create(dir.join(QUALITY_CSV))?);
        let mut repr = std::io::BufWriter::new(fs::File::create(dir.join(REPR_CSV))?);
        writeln!(quality, "step,l_d,l_g,gqd_accuracy")?;
        writeln!(repr, "step,vae_loss_q,vae_loss_r,kl_coeff,rd_loss,rd_accuracy")?;
        let (tx, rx) = mpsc::channel::<TelemetryMsg>();
        let handle = std::thread::spawn(move || -> std::io::Result<()> {
            for msg in rx {
                match msg {
                    TelemetryMsg::Row(r) => {
                        let l = &r.losses;
                        writeln!(quality, "{},{},{},{}", r.step, l.l_d, l.l_g, l.gqd_accuracy)?;
                        writeln!(
                            repr,
                            "{},{},{},{},{},{}",
                            r.step,
                            opt(l.vae_q),
                            opt(l.vae_r),
                            r.kl_coeff,
                            l.rd_loss,
                            l.rd_accuracy
                        )?;
                    }
                    TelemetryMsg::Flush => {
                        quality.flush()?;
                        repr.flush()?;
                    }
                }
            }
            quality.flush()?;
            repr.flush()
        });
        Ok(Telemetry {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn record(&self, r: &StepRecord) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(TelemetryMsg::Row(r.clone()));
        }
    }

    pub fn flush(&self) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(TelemetryMsg::Flush);
        }
    }

    /// Closes the channel and waits for every row to be written.
    pub fn finish(mut self) -> Result<()> {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            h.join()
                .map_err(|_| Error::Checkpoint("telemetry writer panicked".into()))??;
        }
        Ok(())
    }
}

impl Drop for Telemetry {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub convergence: Convergence,
    pub discriminator_steps: u64,
}

/// Runs [`Trainer::train_step`] until [`check_convergence`] says stop.
/// `on_step` sees every record (telemetry, progress reporting).
pub fn train(
    trainer: &mut Trainer,
    pairs: &[IndexedPair],
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    for k in 0..cfg.trainer.pretrain_steps {
        let idx = sampler.next_batch();
        let batch: Vec<&IndexedPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let loss = trainer.pretrain_step(&batch)?;
        if cfg.trainer.log_every > 0 && k % cfg.trainer.log_every == 0 {
            info!("generator warm-up {k:>6} mle {loss:.4}");
        }
    }
    let mut disc = 0;
    loop {
        let c = check_convergence(&trainer.state, cfg.trainer.max_steps, cfg.trainer.min_steps);
        if c.is_done() {
            info!("training stopped at step {} ({})", trainer.state.step, c.reason());
            return Ok(TrainOutcome {
                steps: trainer.state.step,
                convergence: c,
                discriminator_steps: disc,
            });
        }
        let idx = sampler.next_batch();
        let batch: Vec<&IndexedPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let rec = trainer.train_step(&batch)?;
        if rec.kind == StepKind::Discriminator {
            disc += 1;
        }
        if cfg.trainer.log_every > 0 && rec.step % cfg.trainer.log_every == 0 {
            let means = trainer.state.window_means().unwrap_or((f64::NAN, f64::NAN));
            info!(
                "step {:>6} L_D {:.4} L_G {:.4} repr {:.4} dpp {:.3} len {:.3} mle {:.4} mean_s {:.3} window ({:.3}, {:.3})",
                rec.step,
                rec.losses.l_d,
                rec.losses.l_g,
                rec.losses.repr,
                rec.losses.dpp,
                rec.losses.length_reg,
                rec.losses.mle,
                rec.losses.mean_score,
                means.0,
                means.1
            );
        }
        on_step(&rec);
    }
}

/// Evaluation-mode selection scores, one per pair, in input order.
pub fn score_pairs(encoder: &BiGruEncoder, selector: &Selector, pairs: &[IndexedPair]) -> Result<Vec<f64>> {
    par::try_map(pairs, |_, p| {
        let enc = encoder.encode_pair(&p.query, &p.response)?;
        Ok(selector.score(&enc)?.value())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub score: f64,
}

/// Scores every pair and writes `{"id", "score"}` lines.
pub fn export_scores(encoder: &BiGruEncoder, selector: &Selector, pairs: &[IndexedPair], path: &Path) -> Result<Vec<ScoreLine>> {
    let scores = score_pairs(encoder, selector, pairs)?;
    let lines: Vec<ScoreLine> = pairs
        .iter()
        .zip(scores)
        .map(|(p, score)| ScoreLine { id: p.id.clone(), score })
        .collect();
    write_scores(&lines, path)?;
    Ok(lines)
}

pub fn write_scores(lines: &[ScoreLine], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{}", serde_json::to_string(l)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                path: PathBuf::from(path),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Corpus, DialogPair, Split};

    pub(crate) fn tiny_setup(n: usize) -> (RunConfig, Vec<IndexedPair>, usize) {
        let pairs = crate::synth::toy_corpus(n / 2, n - n / 2, 4);
        let corpus = Corpus {
            pairs: pairs
                .iter()
                .map(|p| DialogPair::from_text(&p.id, &p.query, &p.response, 20).unwrap())
                .collect(),
            split: Split::Train,
        };
        let vocab = build_vocab(&corpus, 1000).unwrap();
        let indexed = corpus.pairs.iter().map(|p| vocab.index_pair(p)).collect();
        let mut cfg = RunConfig::default();
        cfg.encoder.hidden = 4;
        cfg.encoder.embed_dim = 4;
        cfg.generator.hidden = 6;
        cfg.generator.embed_dim = 4;
        cfg.gqd.hidden = 5;
        cfg.rd.hidden = 5;
        cfg.vae.hidden = 5;
        cfg.vae.z_dim = 3;
        cfg.batch_size = 4;
        cfg.trainer.log_every = 0;
        (cfg, indexed, vocab.len())
    }

    fn run_steps(cfg: &RunConfig, pairs: &[IndexedPair], vocab: usize, steps: u64) -> Trainer {
        let mut t = Trainer::new(cfg, vocab);
        let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed).unwrap();
        for _ in 0..steps {
            let idx = sampler.next_batch();
            let batch: Vec<&IndexedPair> = idx.iter().map(|&i| &pairs[i]).collect();
            t.train_step(&batch).unwrap();
        }
        t
    }

    #[test]
    fn sixty_steps_have_ten_discriminator_updates() {
        let (cfg, pairs, vocab) = tiny_setup(12);
        let mut t = Trainer::new(&cfg, vocab);
        let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed).unwrap();
        let mut disc = 0;
        for _ in 0..60 {
            let idx = sampler.next_batch();
            let batch: Vec<&IndexedPair> = idx.iter().map(|&i| &pairs[i]).collect();
            if t.train_step(&batch).unwrap().kind == StepKind::Discriminator {
                disc += 1;
            }
        }
        assert_eq!(disc, 10);
        assert_eq!(t.state.accuracy_window.len(), 10);
    }

    #[test]
    fn zero_weights_except_mle_freeze_selection_side() {
        let (mut cfg, pairs, vocab) = tiny_setup(12);
        cfg.trainer.loss_weights = LossWeights {
            adv_quality: 0.0,
            adv_repr: 0.0,
            length_reg: 0.0,
            dpp: 0.0,
            vae: 0.0,
            mle: 1.0,
        };
        let before = Trainer::new(&cfg, vocab);
        let after = run_steps(&cfg, &pairs, vocab, 13);
        for family in [Family::Selector, Family::Gqd, Family::RdQ, Family::RdR, Family::Encoder, Family::VaeQ] {
            assert_eq!(before.models.params(family), after.models.params(family), "{family} moved");
        }
        assert_ne!(before.models.params(Family::Generator), after.models.params(Family::Generator));
    }

    #[test]
    fn disabling_a_branch_leaves_the_other_bitwise_unchanged() {
        let (mut cfg, pairs, vocab) = tiny_setup(12);
        cfg.trainer.loss_weights.adv_repr = 0.0;
        let both = run_steps(&cfg, &pairs, vocab, 5);
        cfg.vae.branches = crate::config::Branches::Query;
        let only_q = run_steps(&cfg, &pairs, vocab, 5);
        assert_eq!(both.models.params(Family::VaeQ), only_q.models.params(Family::VaeQ));
        assert_ne!(both.models.params(Family::VaeR), only_q.models.params(Family::VaeR));
    }

    #[test]
    fn convergence_rule() {
        let mut st = TrainState::new(0, LossWeights::default(), 3);
        assert_eq!(check_convergence(&st, 100, 0), Convergence::Continue);
        for _ in 0..3 {
            st.record_accuracy(0.5, 0.5);
        }
        assert!(matches!(check_convergence(&st, 100, 0), Convergence::Converged { .. }));
        assert_eq!(check_convergence(&st, 100, 10), Convergence::Continue);
        for _ in 0..3 {
            st.record_accuracy(0.9, 0.5);
        }
        assert_eq!(st.accuracy_window.len(), 3);
        assert_eq!(check_convergence(&st, 100, 0), Convergence::Continue);
        st.step = 100;
        let c = check_convergence(&st, 100, 0);
        assert_eq!(c.reason(), "budget");
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut s = BatchSampler::new(10, 4, 1).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch().len(), 4);
        assert_eq!(s.epoch(), 1);
    }
}
