//! Generation quality discriminator (GQD).
//!
//! Scores `(query, gold response)` against `(query, generated response)`
//! on the quality branch of the weighted features, and provides the
//! adversarial losses for the discriminator and the selector.

use rand::Rng;

use crate::corpus::TokenId;
use crate::encoder::BiGruEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Family, FeedForward, ParamSet};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]` before logs.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct MatchScore(f64);

impl MatchScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Two affine layers with `tanh` between them and a sigmoid on the scalar output.
#[derive(Clone, Debug)]
pub struct DiscriminatorHead {
    ff: FeedForward,
}

impl DiscriminatorHead {
    pub fn new(set: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        DiscriminatorHead {
            ff: FeedForward::new(set, prefix, &[input, hidden, 1], rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.ff.input_dim()
    }

    pub fn layer_indices(&self) -> &[(usize, usize)] {
        self.ff.layer_indices()
    }

    pub fn prob_graph(&self, g: &mut Graph, set: &ParamSet, x: Var) -> Var {
        let logit = self.ff.forward(g, set, x);
        g.sigmoid(logit)
    }

    pub fn prob(&self, set: &ParamSet, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "discriminator input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut g = Graph::new();
        let xv = g.input(Tensor::row_vector(x.to_vec()));
        let p = self.prob_graph(&mut g, set, xv);
        Ok(g.scalar(p))
    }
}

#[derive(Clone, Debug)]
pub struct Gqd {
    params: ParamSet,
    head: DiscriminatorHead,
    proj_w: usize,
    proj_b: usize,
    side_dim: usize,
}

impl Gqd {
    /// `side_dim` is the width of one final state (`2d`); the head sees both sides concatenated.
    pub fn new(side_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new(Family::Gqd);
        let head = DiscriminatorHead::new(&mut params, "head", 2 * side_dim, hidden, rng);
        // the projection aligns re-encoded generated responses; it starts as identity
        let proj_w = params.add("projection.weight", Tensor::identity(side_dim));
        let proj_b = params.add("projection.bias", Tensor::zeros(1, side_dim));
        Gqd {
            params,
            head,
            proj_w,
            proj_b,
            side_dim,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head(&self) -> &DiscriminatorHead {
        &self.head
    }

    pub fn projection(&self) -> (usize, usize) {
        (self.proj_w, self.proj_b)
    }

    pub fn side_dim(&self) -> usize {
        self.side_dim
    }

    /// Matching probability for a weighted query node and a weighted response node.
    pub fn match_graph(&self, g: &mut Graph, q_hat: Var, r_hat: Var) -> Var {
        let x = g.concat_cols(&[q_hat, r_hat]);
        self.head.prob_graph(g, &self.params, x)
    }

    /// Affine alignment of a re-encoded generated response.
    pub fn project_graph(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.params, self.proj_w);
        let b = g.param(&self.params, self.proj_b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn check_side(&self, context: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.side_dim {
            return Err(Error::Dimension {
                context,
                expected: self.side_dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `m_g`: the weighted gold pair.
    pub fn match_positive(&self, q_hat: &[f64], r_hat: &[f64]) -> Result<MatchScore> {
        self.check_side("gqd query", q_hat)?;
        self.check_side("gqd response", r_hat)?;
        let mut g = Graph::new();
        let q = g.input(Tensor::row_vector(q_hat.to_vec()));
        let r = g.input(Tensor::row_vector(r_hat.to_vec()));
        let m = self.match_graph(&mut g, q, r);
        Ok(MatchScore(g.scalar(m)))
    }

    /// `m_f`: the generated response is re-encoded with the shared encoder,
    /// projected, scaled by the same `1 - s` weight and matched against `q_hat`.
    pub fn match_negative(
        &self,
        encoder: &BiGruEncoder,
        q_hat: &[f64],
        generated: &[TokenId],
        quality_weight: f64,
    ) -> Result<MatchScore> {
        self.check_side("gqd query", q_hat)?;
        if encoder.output_dim() != self.side_dim {
            return Err(Error::Dimension {
                context: "gqd encoder width",
                expected: self.side_dim,
                got: encoder.output_dim(),
            });
        }
        let mut g = Graph::new();
        let enc = encoder.encode_graph(&mut g, generated)?;
        let fin = g.detach(enc.final_state);
        let projected = self.project_graph(&mut g, fin);
        let r = g.scale(projected, quality_weight);
        let q = g.input(Tensor::row_vector(q_hat.to_vec()));
        let m = self.match_graph(&mut g, q, r);
        Ok(MatchScore(g.scalar(m)))
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

fn check_pairs(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.len() != neg.len() {
        return Err(Error::Dimension {
            context: "paired discriminator scores",
            expected: pos.len(),
            got: neg.len(),
        });
    }
    Ok(())
}

/// `-Σ [log(pos_i) + log(1 - neg_i)]` with clamped probabilities. Shared by
/// the quality and representativeness discriminators.
pub fn adversarial_pair_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_pairs(pos, neg)?;
    Ok(-pos
        .iter()
        .zip(neg)
        .map(|(&p, &n)| clamp_prob(p).ln() + (1.0 - clamp_prob(n)).ln())
        .sum::<f64>())
}

/// `-Σ log(p_i)` with clamped probabilities.
pub fn fooling_loss(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>()
}

/// Discriminator loss `L_D = -Σ [log(1 - m_f) + log(m_g)]`.
pub fn gqd_loss(m_g: &[f64], m_f: &[f64]) -> Result<f64> {
    adversarial_pair_loss(m_g, m_f)
}

/// Selector loss `L_G = -Σ log(m_f)`.
pub fn selector_quality_loss(m_f: &[f64]) -> f64 {
    fooling_loss(m_f)
}

/// Fraction of correct decisions over `2N`: a positive counts when strictly
/// above 0.5, a negative when strictly below. A score of exactly 0.5 is
/// never correct.
pub fn discriminator_accuracy(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_pairs(pos, neg)?;
    if pos.is_empty() {
        return Err(Error::EmptyInput("discriminator scores"));
    }
    let correct = pos.iter().filter(|&&p| p > 0.5).count() + neg.iter().filter(|&&n| n < 0.5).count();
    Ok(correct as f64 / (2 * pos.len()) as f64)
}

pub fn gqd_accuracy(m_g: &[f64], m_f: &[f64]) -> Result<f64> {
    discriminator_accuracy(m_g, m_f)
}

/// Graph form of `log(clamp(p))` for a 1x1 probability node.
pub fn clamped_log(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    g.log(c)
}

/// Graph form of `log(1 - clamp(p))`.
pub fn clamped_log_complement(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let one_minus = g.one_minus(c);
    g.log(one_minus)
}

/// Per-sample discriminator loss node `-(log pos + log(1 - neg))`.
pub fn pair_loss_graph(g: &mut Graph, pos: Var, neg: Var) -> Var {
    let a = clamped_log(g, pos);
    let b = clamped_log_complement(g, neg);
    let s = g.add(a, b);
    g.scale(s, -1.0)
}

/// Per-sample fooling loss node `-log p`.
pub fn fooling_loss_graph(g: &mut Graph, p: Var) -> Var {
    let l = clamped_log(g, p);
    g.scale(l, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn zero_head_gives_half() {
        let mut gqd = Gqd::new(3, 4, &mut rng());
        for &(w, b) in gqd.head().layer_indices().to_vec().iter() {
            gqd.params_mut().get_mut(w).data_mut().fill(0.0);
            gqd.params_mut().get_mut(b).data_mut().fill(0.0);
        }
        assert_eq!(gqd.match_positive(&[1.0; 3], &[2.0; 3]).unwrap().value(), 0.5);
    }

    #[test]
    fn hand_set_head_matches_reference_forward_pass() {
        let mut gqd = Gqd::new(1, 2, &mut rng());
        let layers = gqd.head().layer_indices().to_vec();
        let p = gqd.params_mut();
        *p.get_mut(layers[0].0) = Tensor::from_vec(2, 2, vec![0.5, -0.25, 1.0, 0.75]);
        *p.get_mut(layers[0].1) = Tensor::row_vector(vec![0.1, -0.2]);
        *p.get_mut(layers[1].0) = Tensor::from_vec(2, 1, vec![1.5, -2.0]);
        *p.get_mut(layers[1].1) = Tensor::scalar(0.3);
        // input (1, 1)
        let h0 = (0.5f64 + 1.0 + 0.1).tanh();
        let h1 = (-0.25f64 + 0.75 - 0.2).tanh();
        let logit = 1.5 * h0 - 2.0 * h1 + 0.3;
        let expected = 1.0 / (1.0 + (-logit).exp());
        assert_relative_eq!(gqd.match_positive(&[1.0], &[1.0]).unwrap().value(), expected, epsilon = 1e-15);
    }

    #[test]
    fn identity_projection_on_gold_tokens_matches_positive_score() {
        let mut r = rng();
        let enc = BiGruEncoder::new(
            EncoderConfig {
                vocab_size: 10,
                embed_dim: 4,
                hidden: 3,
            },
            &mut r,
        );
        let gqd = Gqd::new(6, 5, &mut r);
        let (q, resp) = ([4usize, 5, 6], [7usize, 8]);
        let pair = enc.encode_pair(&q, &resp).unwrap();
        let s = 0.3;
        let q_hat: Vec<f64> = pair.query_final.iter().map(|x| (1.0 - s) * x).collect();
        let r_hat: Vec<f64> = pair.response_final.iter().map(|x| (1.0 - s) * x).collect();
        let m_g = gqd.match_positive(&q_hat, &r_hat).unwrap();
        let m_f = gqd.match_negative(&enc, &q_hat, &resp, 1.0 - s).unwrap();
        assert_eq!(m_g, m_f);
        assert_eq!(m_f, gqd.match_negative(&enc, &q_hat, &resp, 1.0 - s).unwrap());
        assert!(gqd.match_positive(&q_hat[..2], &r_hat).is_err());
    }

    #[test]
    fn loss_values() {
        assert_relative_eq!(gqd_loss(&[0.5], &[0.5]).unwrap(), 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(gqd_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 4.0 * 2f64.ln(), epsilon = 1e-12);
        assert!(gqd_loss(&[1.0], &[0.0]).unwrap() < 1e-6);
        assert!(gqd_loss(&[0.0], &[1.0]).unwrap().is_finite());
        assert_relative_eq!(selector_quality_loss(&[0.5]), 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(selector_quality_loss(&[(-1f64).exp()]), 1.0, epsilon = 1e-12);
        assert!(selector_quality_loss(&[1.0]) < 1e-6);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(gqd_accuracy(&[0.9; 3], &[0.1; 3]).unwrap(), 1.0);
        assert_eq!(gqd_accuracy(&[0.5; 3], &[0.5; 3]).unwrap(), 0.0);
        assert_eq!(gqd_accuracy(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.5);
        assert!(gqd_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn selector_loss_decreases_in_m_f() {
        let h = 1e-6;
        for &m in &[0.01, 0.2, 0.5, 0.8, 0.99] {
            let d = (selector_quality_loss(&[m + h]) - selector_quality_loss(&[m - h])) / (2.0 * h);
            assert!(d < 0.0);
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative(pos in prop::collection::vec(0.0f64..=1.0, 1..8), neg in prop::collection::vec(0.0f64..=1.0, 8)) {
            let neg = &neg[..pos.len()];
            prop_assert!(gqd_loss(&pos, neg).unwrap() >= 0.0);
            prop_assert!(selector_quality_loss(neg) >= 0.0);
        }

        #[test]
        fn graph_losses_agree_with_plain(p in 0.0f64..=1.0, n in 0.0f64..=1.0) {
            let mut g = Graph::new();
            let pv = g.input(Tensor::scalar(p));
            let nv = g.input(Tensor::scalar(n));
            let ld = pair_loss_graph(&mut g, pv, nv);
            let lg = fooling_loss_graph(&mut g, nv);
            prop_assert!((g.scalar(ld) - gqd_loss(&[p], &[n]).unwrap()).abs() < 1e-12);
            prop_assert!((g.scalar(lg) - selector_quality_loss(&[n])).abs() < 1e-12);
        }
    }
}
