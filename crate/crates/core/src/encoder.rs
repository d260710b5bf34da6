//! Bidirectional GRU encoder shared by the selector, the quality
//! discriminator and the reconstructor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{xavier_uniform, Family, GruCell, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size per direction.
    pub hidden: usize,
}

/// Encoder output for one pair. State rows are `[forward; backward]` per token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub query_states: Tensor,
    pub response_states: Tensor,
    pub query_final: Vec<f64>,
    pub response_final: Vec<f64>,
}

impl EncodedPair {
    /// `[query_final; response_final]`, the selector and kernel feature.
    pub fn feature(&self) -> Vec<f64> {
        let mut f = self.query_final.clone();
        f.extend_from_slice(&self.response_final);
        f
    }
}

/// Graph handles for one encoded sequence.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSeq {
    /// `m x 2d` per-token states.
    pub states: Var,
    /// `1 x 2d` summary: last forward state and last backward state.
    pub final_state: Var,
}

#[derive(Clone, Debug)]
pub struct BiGruEncoder {
    config: EncoderConfig,
    params: ParamSet,
    embedding: usize,
    forward: GruCell,
    backward: GruCell,
}

impl BiGruEncoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new(Family::Encoder);
        let embedding = params.add("embedding", xavier_uniform(config.vocab_size, config.embed_dim, rng));
        let forward = GruCell::new(&mut params, "forward", config.embed_dim, config.hidden, rng);
        let backward = GruCell::new(&mut params, "backward", config.embed_dim, config.hidden, rng);
        BiGruEncoder {
            config,
            params,
            embedding,
            forward,
            backward,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Width of per-token states and final states (`2d`).
    pub fn output_dim(&self) -> usize {
        2 * self.config.hidden
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                index: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<EncodedSeq> {
        self.check_tokens(tokens)?;
        let table = g.param(&self.params, self.embedding);
        let x = g.gather(table, tokens);
        let fwd = self.forward.run(g, &self.params, x, false);
        let bwd = self.backward.run(g, &self.params, x, true);
        let rows: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat_cols(&[f, b]))
            .collect();
        let states = g.stack_rows(&rows);
        let final_state = g.concat_cols(&[*fwd.last().unwrap(), bwd[0]]);
        Ok(EncodedSeq { states, final_state })
    }

    /// Per-token states and final state of one sequence, outside any training graph.
    pub fn encode_sequence(&self, tokens: &[TokenId]) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, tokens)?;
        Ok((g.value(enc.states).clone(), g.value(enc.final_state).data().to_vec()))
    }

    pub fn encode_pair(&self, query: &[TokenId], response: &[TokenId]) -> Result<EncodedPair> {
        let (query_states, query_final) = self.encode_sequence(query)?;
        let (response_states, response_final) = self.encode_sequence(response)?;
        Ok(EncodedPair {
            query_states,
            response_states,
            query_final,
            response_final,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(hidden: usize) -> BiGruEncoder {
        let cfg = EncoderConfig {
            vocab_size: 12,
            embed_dim: 8,
            hidden,
        };
        BiGruEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn shapes_follow_token_counts() {
        let enc = encoder(64);
        let out = enc.encode_pair(&[4, 5, 6, 7, 8], &[9]).unwrap();
        assert_eq!(out.query_states.shape(), (5, 128));
        assert_eq!(out.response_states.shape(), (1, 128));
        assert_eq!(out.query_final.len(), 128);
        assert!(out.query_states.is_finite() && out.response_states.is_finite());
    }

    #[test]
    fn single_token_final_equals_only_row() {
        let enc = encoder(4);
        let out = enc.encode_pair(&[4, 5], &[9]).unwrap();
        assert_eq!(out.response_final, out.response_states.row(0));
    }

    #[test]
    fn final_state_takes_last_forward_and_first_backward() {
        let enc = encoder(4);
        let (states, fin) = enc.encode_sequence(&[4, 5, 6]).unwrap();
        assert_eq!(&fin[..4], &states.row(2)[..4]);
        assert_eq!(&fin[4..], &states.row(0)[4..]);
    }

    #[test]
    fn deterministic_for_fixed_parameters() {
        let enc = encoder(4);
        let a = enc.encode_pair(&[4, 5, 6], &[7, 8]).unwrap();
        let b = enc.encode_pair(&[4, 5, 6], &[7, 8]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_out_of_range_and_empty() {
        let enc = encoder(4);
        assert!(matches!(
            enc.encode_pair(&[4, 12], &[5]),
            Err(Error::TokenOutOfRange { index: 12, vocab_size: 12 })
        ));
        assert!(enc.encode_pair(&[], &[5]).is_err());
    }
}
