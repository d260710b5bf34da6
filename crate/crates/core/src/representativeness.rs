//! Reconstructor (a feature-space VAE with a bag-of-words head) and the
//! representativeness discriminator (RD). Each runs once per branch, query
//! and response, with separate parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{xavier_uniform, Family, FeedForward, ParamSet};
use crate::quality::{adversarial_pair_loss, discriminator_accuracy, fooling_loss, DiscriminatorHead};
use crate::tensor::Tensor;

/// KL coefficient increment and its period in batches.
pub const KL_STEP: f64 = 0.5;
pub const KL_PERIOD: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Query,
    Response,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Query, Branch::Response];

    pub fn vae_family(self) -> Family {
        match self {
            Branch::Query => Family::VaeQ,
            Branch::Response => Family::VaeR,
        }
    }

    pub fn rd_family(self) -> Family {
        match self {
            Branch::Query => Family::RdQ,
            Branch::Response => Family::RdR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
    pub sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub features: Vec<f64>,
    pub bow_logits: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub logvar: Var,
    pub sample: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ReconstructionVars {
    pub features: Var,
    pub bow_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub total: Var,
    pub kl: Var,
    pub reconstruction: Var,
    pub bow: Var,
}

fn affine(params: &mut ParamSet, name: &str, i: usize, o: usize, rng: &mut impl Rng) -> (usize, usize) {
    let w = params.add(format!("{name}.weight"), xavier_uniform(i, o, rng));
    let b = params.add(format!("{name}.bias"), Tensor::zeros(1, o));
    (w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub z_dim: usize,
    pub vocab_size: usize,
}

#[derive(Clone, Debug)]
pub struct Vae {
    config: VaeConfig,
    params: ParamSet,
    encoder: FeedForward,
    mean_head: (usize, usize),
    logvar_head: (usize, usize),
    decoder: FeedForward,
    bow_head: (usize, usize),
}

impl Vae {
    pub fn new(branch: Branch, config: VaeConfig, rng: &mut impl Rng) -> Self {
        let VaeConfig {
            feature_dim,
            hidden,
            z_dim,
            vocab_size,
        } = config;
        let mut params = ParamSet::new(branch.vae_family());
        let encoder = FeedForward::new(&mut params, "encoder", &[feature_dim, hidden], rng);
        let mean_head = affine(&mut params, "mean", hidden, z_dim, rng);
        let logvar_head = affine(&mut params, "logvar", hidden, z_dim, rng);
        let decoder = FeedForward::new(&mut params, "decoder", &[z_dim, hidden, feature_dim], rng);
        let bow_head = affine(&mut params, "bow", z_dim, vocab_size, rng);
        Vae {
            config,
            params,
            encoder,
            mean_head,
            logvar_head,
            decoder,
            bow_head,
        }
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn affine(&self, g: &mut Graph, x: Var, (w, b): (usize, usize)) -> Var {
        let w = g.param(&self.params, w);
        let b = g.param(&self.params, b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Posterior for a `1 x feature_dim` node, with `noise` the standard-normal draw
    /// used by the reparameterized sample.
    pub fn encode_graph(&self, g: &mut Graph, x: Var, noise: &[f64]) -> PosteriorVars {
        assert_eq!(noise.len(), self.config.z_dim, "noise width");
        let h = self.encoder.forward(g, &self.params, x);
        let h = g.tanh(h);
        let mean = self.affine(g, h, self.mean_head);
        let logvar = self.affine(g, h, self.logvar_head);
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let eps = g.input(Tensor::row_vector(noise.to_vec()));
        let spread = g.mul(std, eps);
        let sample = g.add(mean, spread);
        PosteriorVars { mean, logvar, sample }
    }

    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> ReconstructionVars {
        let features = self.decoder.forward(g, &self.params, z);
        let bow_logits = self.affine(g, z, self.bow_head);
        ReconstructionVars { features, bow_logits }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.feature_dim {
            return Err(Error::Dimension {
                context: "vae input",
                expected: self.config.feature_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn vae_encode(&self, weighted_final: &[f64], noise: &[f64]) -> Result<LatentPosterior> {
        self.check_input(weighted_final)?;
        if noise.len() != self.config.z_dim {
            return Err(Error::Dimension {
                context: "vae noise",
                expected: self.config.z_dim,
                got: noise.len(),
            });
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(weighted_final.to_vec()));
        let post = self.encode_graph(&mut g, x, noise);
        Ok(LatentPosterior {
            mean: g.value(post.mean).data().to_vec(),
            logvar: g.value(post.logvar).data().to_vec(),
            sample: g.value(post.sample).data().to_vec(),
        })
    }

    pub fn decode(&self, sample: &[f64]) -> Result<Reconstruction> {
        if sample.len() != self.config.z_dim {
            return Err(Error::Dimension {
                context: "vae latent",
                expected: self.config.z_dim,
                got: sample.len(),
            });
        }
        let mut g = Graph::new();
        let z = g.input(Tensor::row_vector(sample.to_vec()));
        let rec = self.decode_graph(&mut g, z);
        Ok(Reconstruction {
            features: g.value(rec.features).data().to_vec(),
            bow_logits: g.value(rec.bow_logits).data().to_vec(),
        })
    }
}

/// `½ Σ (μ² + exp(logσ²) − logσ² − 1)`, the KL divergence to `N(0, I)`.
pub fn kl_divergence(mean: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

pub fn kl_graph(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    let m2 = g.square(mean);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev);
    let b = g.sub(a, logvar);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    g.scale(s, 0.5)
}

/// Annealed KL weight: +0.5 every 10,000 batches, capped at 1.
pub fn kl_schedule(batch_index: u64) -> f64 {
    (KL_STEP * (batch_index / KL_PERIOD) as f64).min(1.0)
}

/// `kl_coeff · KL + ‖recon − x‖² + mean BOW cross-entropy over `target_tokens``.
pub fn vae_loss(
    weighted_final: &[f64],
    posterior: &LatentPosterior,
    reconstruction: &Reconstruction,
    kl_coeff: f64,
    target_tokens: &[TokenId],
) -> Result<f64> {
    if reconstruction.features.len() != weighted_final.len() {
        return Err(Error::Dimension {
            context: "vae reconstruction",
            expected: weighted_final.len(),
            got: reconstruction.features.len(),
        });
    }
    if target_tokens.is_empty() {
        return Err(Error::EmptyInput("bag-of-words targets"));
    }
    let kl = kl_divergence(&posterior.mean, &posterior.logvar);
    let rec: f64 = reconstruction
        .features
        .iter()
        .zip(weighted_final)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let lse = crate::graph::log_sum_exp(&reconstruction.bow_logits);
    let bow = target_tokens
        .iter()
        .map(|&t| lse - reconstruction.bow_logits[t])
        .sum::<f64>()
        / target_tokens.len() as f64;
    Ok(kl_coeff * kl + rec + bow)
}

pub fn vae_loss_graph(
    g: &mut Graph,
    x: Var,
    post: PosteriorVars,
    rec: ReconstructionVars,
    kl_coeff: f64,
    target_tokens: &[TokenId],
) -> VaeLossVars {
    let kl = kl_graph(g, post.mean, post.logvar);
    let diff = g.sub(rec.features, x);
    let sq = g.square(diff);
    let reconstruction = g.sum(sq);
    let bow = g.cross_entropy(rec.bow_logits, target_tokens);
    let kl_term = g.scale(kl, kl_coeff);
    let total = g.add_all(&[kl_term, reconstruction, bow]);
    VaeLossVars {
        total,
        kl,
        reconstruction,
        bow,
    }
}

/// Representativeness discriminator for one branch.
#[derive(Clone, Debug)]
pub struct Rd {
    params: ParamSet,
    head: DiscriminatorHead,
}

impl Rd {
    pub fn new(branch: Branch, feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new(branch.rd_family());
        let head = DiscriminatorHead::new(&mut params, "head", feature_dim, hidden, rng);
        Rd { params, head }
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

    /// Probability of the "original" class.
    pub fn prob_graph(&self, g: &mut Graph, x: Var) -> Var {
        self.head.prob_graph(g, &self.params, x)
    }

    pub fn rd_score(&self, features: &[f64]) -> Result<f64> {
        self.head.prob(&self.params, features)
    }
}

/// `-Σ [log p_orig + log(1 − p_recon)]`.
pub fn rd_loss(scores_original: &[f64], scores_reconstructed: &[f64]) -> Result<f64> {
    adversarial_pair_loss(scores_original, scores_reconstructed)
}

/// `-Σ log p_recon`.
pub fn selector_repr_loss(scores_reconstructed: &[f64]) -> f64 {
    fooling_loss(scores_reconstructed)
}

pub fn rd_accuracy(scores_original: &[f64], scores_reconstructed: &[f64]) -> Result<f64> {
    discriminator_accuracy(scores_original, scores_reconstructed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cfg() -> VaeConfig {
        VaeConfig {
            feature_dim: 6,
            hidden: 5,
            z_dim: 3,
            vocab_size: 9,
        }
    }

    #[test]
    fn reparameterization_identity() {
        let mut vae = Vae::new(Branch::Query, cfg(), &mut ChaCha8Rng::seed_from_u64(2));
        let (mw, mb) = vae.mean_head;
        let (lw, lb) = vae.logvar_head;
        for i in [mw, mb, lw, lb] {
            vae.params_mut().get_mut(i).data_mut().fill(0.0);
        }
        let post = vae.vae_encode(&[0.3; 6], &[0.0; 3]).unwrap();
        assert_eq!(post.mean, vec![0.0; 3]);
        assert_eq!(post.sample, vec![0.0; 3]);
        let post = vae.vae_encode(&[0.3; 6], &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(post.sample, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn posterior_shape_and_determinism() {
        let vae = Vae::new(Branch::Response, cfg(), &mut ChaCha8Rng::seed_from_u64(2));
        let a = vae.vae_encode(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a.sample.len(), 3);
        assert_eq!(a, vae.vae_encode(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[0.1, 0.2, 0.3]).unwrap());
        assert!(vae.vae_encode(&[0.1; 5], &[0.0; 3]).is_err());
        let rec = vae.decode(&a.sample).unwrap();
        assert_eq!(rec.features.len(), 6);
        assert_eq!(rec.bow_logits.len(), 9);
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_relative_eq!(kl_divergence(&[1.0, 0.0], &[0.0, 0.0]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn uniform_bow_logits_give_log_vocab() {
        let post = LatentPosterior {
            mean: vec![0.0],
            logvar: vec![0.0],
            sample: vec![0.0],
        };
        let rec = Reconstruction {
            features: vec![1.0, 2.0],
            bow_logits: vec![0.0; 9],
        };
        let loss = vae_loss(&[1.0, 2.0], &post, &rec, 1.0, &[4, 5, 5]).unwrap();
        assert_relative_eq!(loss, 9f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let vae = Vae::new(Branch::Query, cfg(), &mut ChaCha8Rng::seed_from_u64(8));
        let x = [0.1, -0.2, 0.3, 0.0, 0.5, -0.6];
        let noise = [0.4, -0.3, 1.2];
        let post = vae.vae_encode(&x, &noise).unwrap();
        let rec = vae.decode(&post.sample).unwrap();
        let plain = vae_loss(&x, &post, &rec, 0.5, &[4, 7]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(Tensor::row_vector(x.to_vec()));
        let pv = vae.encode_graph(&mut g, xv, &noise);
        let rv = vae.decode_graph(&mut g, pv.sample);
        let lv = vae_loss_graph(&mut g, xv, pv, rv, 0.5, &[4, 7]);
        assert_relative_eq!(g.scalar(lv.total), plain, epsilon = 1e-12);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(kl_schedule(0), 0.0);
        assert_eq!(kl_schedule(9_999), 0.0);
        assert_eq!(kl_schedule(10_000), 0.5);
        assert_eq!(kl_schedule(19_999), 0.5);
        assert_eq!(kl_schedule(25_000), 1.0);
        assert_eq!(kl_schedule(1_000_000), 1.0);
    }

    #[test]
    fn schedule_is_monotone_with_half_steps() {
        let mut prev = kl_schedule(0);
        for b in (0..60_000).step_by(500) {
            let v = kl_schedule(b);
            assert!(v >= prev);
            assert!(v == prev || (v - prev - KL_STEP).abs() < 1e-15);
            prev = v;
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..3 {
            let mean: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let logvar: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..0.5)).collect();
            let n = 100_000;
            let mut acc = 0.0;
            for _ in 0..n {
                for j in 0..3 {
                    let eps: f64 = rng.sample(StandardNormal);
                    let z = mean[j] + (0.5 * logvar[j]).exp() * eps;
                    // log q(z) - log p(z)
                    acc += -0.5 * logvar[j] - 0.5 * eps * eps + 0.5 * z * z;
                }
            }
            let mc = acc / n as f64;
            assert!((mc - kl_divergence(&mean, &logvar)).abs() < 1e-2, "mc {mc}");
        }
    }

    #[test]
    fn rd_losses() {
        assert_relative_eq!(rd_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 4.0 * 2f64.ln(), epsilon = 1e-12);
        assert!(rd_loss(&[1.0], &[0.0]).unwrap() < 1e-6);
        assert_relative_eq!(selector_repr_loss(&[0.5]), 2f64.ln(), epsilon = 1e-12);
        assert!(selector_repr_loss(&[1.0]) < 1e-6);
        // relabeling symmetry with the quality discriminator loss
        assert_eq!(rd_loss(&[0.7, 0.2], &[0.4, 0.9]).unwrap(), crate::quality::gqd_loss(&[0.7, 0.2], &[0.4, 0.9]).unwrap());
    }

    #[test]
    fn rd_score_zero_weights_and_range() {
        let mut rd = Rd::new(Branch::Query, 4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        assert!((0.0..1.0).contains(&rd.rd_score(&[1.0, 2.0, 3.0, 4.0]).unwrap()));
        assert_eq!(rd.rd_score(&[0.5; 4]).unwrap(), rd.rd_score(&[0.5; 4]).unwrap());
        assert!(rd.rd_score(&[0.5; 3]).is_err());
        for i in 0..rd.params().tensors().len() {
            rd.params_mut().get_mut(i).data_mut().fill(0.0);
        }
        assert_eq!(rd.rd_score(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_only_at_prior(mean in prop::collection::vec(-3f64..3.0, 1..6), logvar in prop::collection::vec(-3f64..3.0, 6)) {
            let lv = &logvar[..mean.len()];
            let kl = kl_divergence(&mean, lv);
            prop_assert!(kl >= 0.0);
            let at_prior = mean.iter().all(|&m| m == 0.0) && lv.iter().all(|&l| l == 0.0);
            prop_assert_eq!(kl == 0.0, at_prior);
        }

        #[test]
        fn repr_loss_monotone_decreasing(a in 0.001f64..0.999, b in 0.001f64..0.999) {
            prop_assume!(a < b);
            prop_assert!(selector_repr_loss(&[a]) > selector_repr_loss(&[b]));
        }
    }
}
