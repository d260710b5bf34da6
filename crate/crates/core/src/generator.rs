//! Response generators.
//!
//! [`ResponseGenerator`] is the pluggable interface used both for producing
//! negative samples during selector training and for the downstream dialog
//! model. [`Seq2Seq`] is the shipped backbone: an LSTM encoder-decoder with
//! dot-product attention, trained by teacher forcing.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};
use crate::nn::{xavier_uniform, Family, LstmCell, LstmState, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub min_steps: usize,
    pub max_steps: usize,
    pub strategy: Decoding,
    /// Keep the per-step output distributions on the result.
    pub keep_distributions: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            min_steps: 10,
            max_steps: 30,
            strategy: Decoding::Greedy,
            keep_distributions: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedResponse {
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<TokenId>,
    /// Masked output distribution at each decoding step (empty unless requested).
    pub step_distributions: Vec<Vec<f64>>,
}

/// A response model that can be trained by maximum likelihood and decoded.
pub trait ResponseGenerator: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn generate(&self, query: &[TokenId], opts: &DecodeOptions) -> Result<GeneratedResponse>;

    /// Mean per-token negative log-likelihood of `response` (plus EOS) under teacher forcing.
    fn mle_loss(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64>;

    /// Loss together with its gradient, aligned with [`ResponseGenerator::params`].
    fn mle_gradients(&self, query: &[TokenId], response: &[TokenId]) -> Result<(f64, Vec<Tensor>)>;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: GeneratorConfig,
    params: ParamSet,
    embedding: usize,
    encoder: LstmCell,
    decoder: LstmCell,
    combine_w: usize,
    combine_b: usize,
    out_w: usize,
    out_b: usize,
}

struct Encoded {
    states: Var,
    final_state: LstmState,
}

impl Seq2Seq {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Self {
        let GeneratorConfig {
            vocab_size: v,
            embed_dim: e,
            hidden: h,
        } = config;
        let mut params = ParamSet::new(Family::Generator);
        let embedding = params.add("embedding", xavier_uniform(v, e, rng));
        let encoder = LstmCell::new(&mut params, "encoder", e, h, rng);
        let decoder = LstmCell::new(&mut params, "decoder", e, h, rng);
        let combine_w = params.add("attn.combine.weight", xavier_uniform(2 * h, h, rng));
        let combine_b = params.add("attn.combine.bias", Tensor::zeros(1, h));
        let out_w = params.add("output.weight", xavier_uniform(h, v, rng));
        let out_b = params.add("output.bias", Tensor::zeros(1, v));
        Seq2Seq {
            config,
            params,
            embedding,
            encoder,
            decoder,
            combine_w,
            combine_b,
            out_w,
            out_b,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Parameter indices of the output projection `(weight, bias)`.
    pub fn output_layer(&self) -> (usize, usize) {
        (self.out_w, self.out_b)
    }

    fn check(&self, tokens: &[TokenId], what: &'static str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput(what));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                index: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph, query: &[TokenId]) -> Encoded {
        let table = g.param(&self.params, self.embedding);
        let x = g.gather(table, query);
        let proj = self.encoder.project_inputs(g, &self.params, x);
        let mut state = self.encoder.zero_state(g);
        let mut rows = Vec::with_capacity(query.len());
        for t in 0..query.len() {
            let xt = g.row(proj, t);
            state = self.encoder.step(g, &self.params, xt, state);
            rows.push(state.h);
        }
        let states = g.stack_rows(&rows);
        Encoded {
            states,
            final_state: state,
        }
    }

    /// One decoder step: returns the new state and the `1 x V` logits.
    fn decode_step(&self, g: &mut Graph, enc: &Encoded, state: LstmState, prev: TokenId) -> (LstmState, Var) {
        let table = g.param(&self.params, self.embedding);
        let x = g.gather(table, &[prev]);
        let xp = self.decoder.project_inputs(g, &self.params, x);
        let state = self.decoder.step(g, &self.params, xp, state);
        // dot-product attention over encoder states
        let ht = g.transpose(state.h);
        let scores = g.matmul(enc.states, ht);
        let scores = g.transpose(scores);
        let weights = g.softmax(scores);
        let context = g.matmul(weights, enc.states);
        let joined = g.concat_cols(&[state.h, context]);
        let wc = g.param(&self.params, self.combine_w);
        let bc = g.param(&self.params, self.combine_b);
        let combined = g.matmul(joined, wc);
        let combined = g.add_row(combined, bc);
        let combined = g.tanh(combined);
        let wo = g.param(&self.params, self.out_w);
        let bo = g.param(&self.params, self.out_b);
        let logits = g.matmul(combined, wo);
        let logits = g.add_row(logits, bo);
        (state, logits)
    }

    /// Teacher-forced mean NLL node.
    pub fn mle_graph(&self, g: &mut Graph, query: &[TokenId], response: &[TokenId]) -> Result<Var> {
        self.check(query, "query")?;
        self.check(response, "response")?;
        let enc = self.encode(g, query);
        let mut state = enc.final_state;
        let mut prev = BOS;
        let mut losses = Vec::with_capacity(response.len() + 1);
        for &target in response.iter().chain(std::iter::once(&EOS)) {
            let (next, logits) = self.decode_step(g, &enc, state, prev);
            state = next;
            losses.push(g.cross_entropy(logits, &[target]));
            prev = target;
        }
        let total = g.add_all(&losses);
        Ok(g.scale(total, 1.0 / losses.len() as f64))
    }
}

/// Logits adjusted so that PAD and BOS are never produced and EOS only after `min_steps`.
fn mask_logits(logits: &mut [f64], produced: usize, min_steps: usize) {
    logits[PAD] = f64::NEG_INFINITY;
    logits[BOS] = f64::NEG_INFINITY;
    if produced < min_steps {
        logits[EOS] = f64::NEG_INFINITY;
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl ResponseGenerator for Seq2Seq {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn generate(&self, query: &[TokenId], opts: &DecodeOptions) -> Result<GeneratedResponse> {
        self.check(query, "query")?;
        if opts.min_steps > opts.max_steps || opts.max_steps == 0 {
            return Err(Error::invalid(format!(
                "decode steps must satisfy 0 < min ({}) <= max ({})",
                opts.min_steps, opts.max_steps
            )));
        }
        if self.config.vocab_size <= EOS + 1 {
            return Err(Error::invalid("vocabulary has no ordinary tokens to generate"));
        }
        let mut rng = match opts.strategy {
            Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut g = Graph::new();
        let enc = self.encode(&mut g, query);
        let mut state = enc.final_state;
        let mut prev = BOS;
        let mut tokens = Vec::with_capacity(opts.max_steps);
        let mut dists = Vec::new();
        while tokens.len() < opts.max_steps {
            let (next, logits) = self.decode_step(&mut g, &enc, state, prev);
            state = next;
            let mut lv = g.value(logits).data().to_vec();
            mask_logits(&mut lv, tokens.len(), opts.min_steps);
            let tok = match (&opts.strategy, rng.as_mut()) {
                (Decoding::Sample { temperature, .. }, Some(rng)) => {
                    let scaled: Vec<f64> = lv.iter().map(|x| x / temperature.max(1e-6)).collect();
                    let probs = graph::softmax(&scaled);
                    WeightedIndex::new(&probs)
                        .map_err(|e| Error::NonFinite(format!("sampling distribution: {e}")))?
                        .sample(rng)
                }
                _ => argmax(&lv),
            };
            if opts.keep_distributions {
                dists.push(graph::softmax(&lv));
            }
            if tok == EOS {
                break;
            }
            tokens.push(tok);
            prev = tok;
        }
        Ok(GeneratedResponse {
            tokens,
            step_distributions: dists,
        })
    }

    fn mle_loss(&self, query: &[TokenId], response: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.mle_graph(&mut g, query, response)?;
        Ok(g.scalar(loss))
    }

    fn mle_gradients(&self, query: &[TokenId], response: &[TokenId]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let loss = self.mle_graph(&mut g, query, response)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite("mle_loss".into()));
        }
        let grads = g.backward(loss).for_family(&self.params);
        Ok((value, grads))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}
