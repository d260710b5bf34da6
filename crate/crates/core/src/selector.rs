//! Dialog selector: scores each encoded pair, splits its features into the
//! quality and representativeness branches, and provides the batch-level
//! length-regularizer and DPP diversity losses.

use rand::Rng;

use crate::encoder::EncodedPair;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Family, FeedForward, ParamSet};
use crate::tensor::{self, Tensor};

/// Jitter added to the selected-subset kernel before the log-determinant.
pub const DPP_JITTER: f64 = 1e-6;

/// Scores at or below this are not part of the selected subset.
pub const SELECTION_THRESHOLD: f64 = 0.5;

/// Selector output; always strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SelectionScore(f64);

impl SelectionScore {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(SelectionScore(value))
        } else {
            Err(Error::invalid(format!("selection score {value} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// MLP widths for a per-direction hidden size `d`: input `4d`, then five
/// affine layers of widths `4d, 2d, d, d/2, 1` (`d/2` floored at 1).
pub fn selector_widths(d: usize) -> Vec<usize> {
    vec![4 * d, 4 * d, 2 * d, d, (d / 2).max(1), 1]
}

#[derive(Clone, Debug)]
pub struct Selector {
    params: ParamSet,
    mlp: FeedForward,
}

impl Selector {
    pub fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        Self::with_widths(&selector_widths(hidden), rng)
    }

    pub fn with_widths(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new(Family::Selector);
        let mlp = FeedForward::new(&mut params, "mlp", widths, rng);
        Selector { params, mlp }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn mlp(&self) -> &FeedForward {
        &self.mlp
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Pre-sigmoid logit node for a `1 x 4d` feature node.
    pub fn logit_graph(&self, g: &mut Graph, feature: Var) -> Var {
        self.mlp.forward(g, &self.params, feature)
    }

    pub fn score_graph(&self, g: &mut Graph, feature: Var) -> Var {
        let logit = self.logit_graph(g, feature);
        g.sigmoid(logit)
    }

    pub fn score_feature(&self, feature: &[f64]) -> Result<SelectionScore> {
        if feature.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "selector input",
                expected: self.input_dim(),
                got: feature.len(),
            });
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(feature.to_vec()));
        let s = self.score_graph(&mut g, x);
        let v = g.scalar(s);
        // sigmoid saturates to exactly 0 or 1 for |logit| > ~37
        SelectionScore::new(v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    pub fn score(&self, encoded: &EncodedPair) -> Result<SelectionScore> {
        self.score_feature(&encoded.feature())
    }
}

/// Encoder outputs split by the selection score: the quality branch is scaled
/// by `1 - s`, the representativeness branch by `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedFeatures {
    pub quality: EncodedPair,
    pub representativeness: EncodedPair,
}

impl WeightedFeatures {
    pub fn q_hat(&self) -> &[f64] {
        &self.quality.query_final
    }
    pub fn r_hat(&self) -> &[f64] {
        &self.quality.response_final
    }
    pub fn q_tilde(&self) -> &[f64] {
        &self.representativeness.query_final
    }
    pub fn r_tilde(&self) -> &[f64] {
        &self.representativeness.response_final
    }
}

/// Splits `x` into `((1-s)x, s x)` so that the two parts sum back to `x`
/// exactly: the larger share is rounded once and the smaller one is the
/// (exact) remainder.
fn split_value(x: f64, s: f64) -> (f64, f64) {
    if s >= 0.5 {
        let tilde = s * x;
        (x - tilde, tilde)
    } else {
        let hat = (1.0 - s) * x;
        (hat, x - hat)
    }
}

fn split_slice(xs: &[f64], s: f64) -> (Vec<f64>, Vec<f64>) {
    xs.iter().map(|&x| split_value(x, s)).unzip()
}

fn split_tensor(t: &Tensor, s: f64) -> (Tensor, Tensor) {
    let (a, b) = split_slice(t.data(), s);
    (Tensor::from_vec(t.rows(), t.cols(), a), Tensor::from_vec(t.rows(), t.cols(), b))
}

pub fn weight_features(encoded: &EncodedPair, s: SelectionScore) -> WeightedFeatures {
    let s = s.value();
    let (qs_hat, qs_tilde) = split_tensor(&encoded.query_states, s);
    let (rs_hat, rs_tilde) = split_tensor(&encoded.response_states, s);
    let (qf_hat, qf_tilde) = split_slice(&encoded.query_final, s);
    let (rf_hat, rf_tilde) = split_slice(&encoded.response_final, s);
    WeightedFeatures {
        quality: EncodedPair {
            query_states: qs_hat,
            response_states: rs_hat,
            query_final: qf_hat,
            response_final: rf_hat,
        },
        representativeness: EncodedPair {
            query_states: qs_tilde,
            response_states: rs_tilde,
            query_final: qf_tilde,
            response_final: rf_tilde,
        },
    }
}

/// `|target - mean(scores)|`.
pub fn length_regularizer(scores: &[f64], target_fraction: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((target_fraction - mean).abs())
}

pub fn length_regularizer_graph(g: &mut Graph, scores: Var, target_fraction: f64) -> Var {
    let mean = g.mean(scores);
    let dev = g.add_scalar(mean, -target_fraction);
    g.abs(dev)
}

/// `L[i][j] = s_i s_j <f_i, f_j>`.
#[derive(Clone, Debug, PartialEq)]
pub struct DppKernel {
    pub matrix: Tensor,
    pub feature_dim: usize,
}

pub fn dpp_kernel(scores: &[f64], features: &[Vec<f64>]) -> Result<DppKernel> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if features.len() != scores.len() {
        return Err(Error::Dimension {
            context: "dpp kernel features",
            expected: scores.len(),
            got: features.len(),
        });
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::Dimension {
            context: "dpp kernel feature width",
            expected: dim,
            got: bad.len(),
        });
    }
    let n = scores.len();
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = scores[i] * scores[j] * tensor::dot(&features[i], &features[j]);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(DppKernel {
        matrix: m,
        feature_dim: dim,
    })
}

/// Indices with score strictly above [`SELECTION_THRESHOLD`].
pub fn selected_subset(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > SELECTION_THRESHOLD)
        .map(|(i, _)| i)
        .collect()
}

/// `-log det(L_S + εI) + log det(L + I)` with `S` the thresholded subset.
pub fn dpp_loss(kernel: &DppKernel, scores: &[f64]) -> Result<f64> {
    let n = kernel.matrix.rows();
    if scores.len() != n {
        return Err(Error::Dimension {
            context: "dpp loss scores",
            expected: n,
            got: scores.len(),
        });
    }
    let subset = selected_subset(scores);
    let mut sub = kernel.matrix.principal_submatrix(&subset);
    let mut shifted = kernel.matrix.clone();
    for i in 0..subset.len() {
        sub.set(i, i, sub.get(i, i) + DPP_JITTER);
    }
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + 1.0);
    }
    let loss = tensor::logdet_spd(&shifted)? - tensor::logdet_spd(&sub)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("dpp_loss".into()));
    }
    Ok(loss)
}

/// Differentiable DPP loss: `scores` is an `N x 1` node, `features` an
/// `N x D` node. The subset is read from the current score values and held
/// fixed; gradients flow through the kernel entries.
pub fn dpp_loss_graph(g: &mut Graph, scores: Var, features: Var) -> Result<Var> {
    let subset = selected_subset(g.value(scores).data());
    let ft = g.transpose(features);
    let gram = g.matmul(features, ft);
    let st = g.transpose(scores);
    let outer = g.matmul(scores, st);
    let kernel = g.mul(gram, outer);
    let shifted = g.add_diag(kernel, 1.0);
    let normalizer = g.logdet_spd(shifted)?;
    let sub = g.submatrix(kernel, &subset);
    let sub = g.add_diag(sub, DPP_JITTER);
    let selected = g.logdet_spd(sub)?;
    let loss = g.sub(normalizer, selected);
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite("dpp_loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_selector(widths: &[usize], w: f64) -> Selector {
        let mut sel = Selector::with_widths(widths, &mut ChaCha8Rng::seed_from_u64(0));
        for &(wi, bi) in sel.mlp.layer_indices().to_vec().iter() {
            sel.params.get_mut(wi).data_mut().iter_mut().for_each(|x| *x = w);
            sel.params.get_mut(bi).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        sel
    }

    #[test]
    fn zero_logit_gives_half() {
        let sel = constant_selector(&selector_widths(2), 0.0);
        assert_eq!(sel.score_feature(&[1.0; 8]).unwrap().value(), 0.5);
    }

    #[test]
    fn tiny_mlp_matches_straight_line_forward_pass() {
        // d = 1: widths 4 -> 4 -> 2 -> 1 -> 1 -> 1, all weights 0.1, zero bias, input ones
        let sel = constant_selector(&selector_widths(1), 0.1);
        let h1 = (0.1f64 * 4.0).tanh();
        let h2 = (0.1 * 4.0 * h1).tanh();
        let h3 = (0.1 * 2.0 * h2).tanh();
        let h4 = (0.1 * h3).tanh();
        let logit = 0.1 * h4;
        let expected = 1.0 / (1.0 + (-logit).exp());
        let got = sel.score_feature(&[1.0; 4]).unwrap().value();
        assert_relative_eq!(got, expected, epsilon = 1e-15);
    }

    #[test]
    fn five_affine_layers_with_tapering_widths() {
        let sel = Selector::new(64, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(sel.mlp().num_layers(), 5);
        assert_eq!(sel.input_dim(), 256);
        assert_eq!(selector_widths(64), vec![256, 256, 128, 64, 32, 1]);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let sel = Selector::new(2, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(sel.score_feature(&[0.0; 3]), Err(Error::Dimension { .. })));
    }

    fn pair_with(value: f64) -> EncodedPair {
        EncodedPair {
            query_states: Tensor::filled(2, 2, value),
            response_states: Tensor::filled(1, 2, value),
            query_final: vec![value; 2],
            response_final: vec![value; 2],
        }
    }

    #[test]
    fn weighting_arithmetic_and_limits() {
        let w = weight_features(&pair_with(2.0), SelectionScore::new(0.6).unwrap());
        assert_relative_eq!(w.r_tilde()[0], 1.2, epsilon = 1e-15);
        assert_relative_eq!(w.r_hat()[0], 0.8, epsilon = 1e-15);
        let w = weight_features(&pair_with(2.0), SelectionScore::new(1.0 - 1e-12).unwrap());
        assert!(w.r_hat()[0].abs() < 1e-11);
        assert_relative_eq!(w.r_tilde()[0], 2.0, epsilon = 1e-11);
    }

    #[test]
    fn length_regularizer_examples() {
        assert_eq!(length_regularizer(&[0.6; 5], 0.6).unwrap(), 0.0);
        assert_eq!(length_regularizer(&[1.0, 0.0], 0.5).unwrap(), 0.0);
        assert_relative_eq!(length_regularizer(&[1.0, 1.0], 0.6).unwrap(), 0.4, epsilon = 1e-15);
        assert!(length_regularizer(&[], 0.6).is_err());
    }

    #[test]
    fn kernel_examples() {
        let k = dpp_kernel(&[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(k.matrix, Tensor::identity(2));
        let k = dpp_kernel(&[0.5, 0.5], &[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(k.matrix.data(), &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(k.feature_dim, 2);
    }

    #[test]
    fn dpp_loss_examples() {
        let k = DppKernel {
            matrix: Tensor::identity(2),
            feature_dim: 2,
        };
        let loss = dpp_loss(&k, &[0.9, 0.1]).unwrap();
        assert!((loss - 4f64.ln()).abs() <= 1e-5);
        let empty = dpp_loss(&k, &[0.5, 0.2]).unwrap();
        assert_relative_eq!(empty, 4f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn graph_losses_match_plain_versions() {
        let scores = vec![0.7, 0.3, 0.9];
        let feats = vec![vec![0.2, -0.1, 0.5], vec![0.4, 0.4, -0.2], vec![-0.3, 0.1, 0.6]];
        let plain = dpp_loss(&dpp_kernel(&scores, &feats).unwrap(), &scores).unwrap();
        let mut g = Graph::new();
        let s = g.input(Tensor::column_vector(scores.clone()));
        let f = g.input(Tensor::from_rows(&feats));
        let loss = dpp_loss_graph(&mut g, s, f).unwrap();
        assert_relative_eq!(g.scalar(loss), plain, epsilon = 1e-12);
        let lr = length_regularizer_graph(&mut g, s, 0.6);
        assert_relative_eq!(g.scalar(lr), length_regularizer(&scores, 0.6).unwrap(), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn branches_sum_back_exactly(s in 1e-9f64..(1.0 - 1e-9), xs in prop::collection::vec(-1e3f64..1e3, 1..16)) {
            let enc = EncodedPair {
                query_states: Tensor::row_vector(xs.clone()),
                response_states: Tensor::row_vector(xs.clone()),
                query_final: xs.clone(),
                response_final: xs.clone(),
            };
            let w = weight_features(&enc, SelectionScore::new(s).unwrap());
            for i in 0..xs.len() {
                prop_assert_eq!(w.q_hat()[i] + w.q_tilde()[i], xs[i]);
                prop_assert_eq!(
                    w.quality.query_states.data()[i] + w.representativeness.query_states.data()[i],
                    xs[i]
                );
            }
        }

        #[test]
        fn length_regularizer_zero_iff_mean_on_target(scores in prop::collection::vec(0.01f64..0.99, 1..20), target in 0.0f64..1.0) {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let lr = length_regularizer(&scores, target).unwrap();
            prop_assert!(lr >= 0.0);
            prop_assert_eq!(lr == 0.0, mean == target);
        }

        #[test]
        fn scores_strictly_inside_unit_interval(feature in prop::collection::vec(-50f64..50.0, 8)) {
            let sel = Selector::new(2, &mut ChaCha8Rng::seed_from_u64(11));
            let s = sel.score_feature(&feature).unwrap().value();
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
