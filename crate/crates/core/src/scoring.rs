use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EsiConfig, Metric, Normalization, Smoothing, Weighting};
use crate::metrics::{self, MetricError, TruncatedDistribution};
use crate::scalar::Scalar;
use crate::token::{same_tokens, Token};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("empty response")]
    EmptyResponse,
    #[error("trace alignment: {0}")]
    TraceAlignment(String),
    #[error("no variant traces supplied")]
    NoVariants,
    #[error("sample {index}: {got} log-probabilities for {want} tokens")]
    LogprobCount { index: usize, got: usize, want: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Per-position top-k distributions for one `(prompt, response)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace<T> {
    prompt_ref: String,
    response_tokens: Vec<Token>,
    positions: Vec<TruncatedDistribution<T>>,
}

impl<T: Scalar> TokenTrace<T> {
    pub fn new(
        prompt_ref: impl Into<String>,
        response_tokens: Vec<Token>,
        positions: Vec<TruncatedDistribution<T>>,
    ) -> Result<Self, ScoringError> {
        if response_tokens.is_empty() {
            return Err(ScoringError::EmptyResponse);
        }
        if response_tokens.len() != positions.len() {
            return Err(ScoringError::TraceAlignment(format!(
                "{} response tokens but {} positions",
                response_tokens.len(),
                positions.len()
            )));
        }
        Ok(TokenTrace {
            prompt_ref: prompt_ref.into(),
            response_tokens,
            positions,
        })
    }

    pub fn prompt_ref(&self) -> &str {
        &self.prompt_ref
    }

    pub fn response_tokens(&self) -> &[Token] {
        &self.response_tokens
    }

    pub fn positions(&self) -> &[TruncatedDistribution<T>] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.response_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response_tokens.is_empty()
    }

    pub fn with_prompt_ref(mut self, prompt_ref: impl Into<String>) -> Self {
        self.prompt_ref = prompt_ref.into();
        self
    }

    pub fn cast<U: Scalar>(&self) -> TokenTrace<U> {
        TokenTrace {
            prompt_ref: self.prompt_ref.clone(),
            response_tokens: self.response_tokens.clone(),
            positions: self.positions.iter().map(|d| d.cast()).collect(),
        }
    }
}

/// A sampled generation with the log-probability of each sampled token.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrace<T> {
    pub trace: TokenTrace<T>,
    pub chosen_logprobs: Vec<T>,
}

/// One uncertainty score for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub method: String,
    pub value: f64,
    pub trial_index: usize,
    pub config_fingerprint: String,
}

/// Distance between the original and intervened distributions at one
/// position, after aligning their supports.
pub fn token_shift<T: Scalar>(
    orig_pos: &TruncatedDistribution<T>,
    var_pos: &TruncatedDistribution<T>,
    metric: Metric,
    smoothing: Smoothing,
) -> Result<T, ScoringError> {
    let (a, b) = metrics::aligned_probs(orig_pos, var_pos, smoothing)?;
    Ok(metrics::distance(&a, &b, metric)?)
}

fn retruncate<T: Scalar>(
    d: &TruncatedDistribution<T>,
    k: usize,
) -> Result<Cow<'_, TruncatedDistribution<T>>, MetricError> {
    if d.len() <= k {
        Ok(Cow::Borrowed(d))
    } else {
        metrics::truncate_topk(d.entries().iter().cloned(), k).map(Cow::Owned)
    }
}

/// Importance weight per position: entropy of the original top-k softmax, or 1.
pub fn position_weights<T: Scalar>(
    positions: &[TruncatedDistribution<T>],
    weighting: Weighting,
) -> Vec<T> {
    positions.iter().map(|d| position_weight(d, weighting)).collect()
}

fn position_weight<T: Scalar>(d: &TruncatedDistribution<T>, weighting: Weighting) -> T {
    match weighting {
        Weighting::Entropy => metrics::entropy_unchecked(&d.probs()),
        Weighting::None => T::one(),
    }
}

/// Weighted mean token-wise shift between the original trace and each
/// variant trace, averaged over variants.
///
/// Positions are re-truncated to `cfg.k` first, so traces recorded with a
/// larger k can be rescored at any smaller k.
pub fn esi_score<T: Scalar>(
    orig: &TokenTrace<T>,
    variants: &[&TokenTrace<T>],
    cfg: &EsiConfig,
) -> Result<T, ScoringError> {
    let n = orig.len();
    if n == 0 {
        return Err(ScoringError::EmptyResponse);
    }
    if variants.is_empty() {
        return Err(ScoringError::NoVariants);
    }
    let orig_pos: Vec<_> = orig
        .positions()
        .iter()
        .map(|d| retruncate(d, cfg.k))
        .collect::<Result<_, _>>()?;
    let alpha: Vec<T> = orig_pos
        .iter()
        .map(|d| position_weight(d, cfg.weighting))
        .collect();

    let mut total = T::zero();
    for (l, var) in variants.iter().enumerate() {
        if !same_tokens(var.response_tokens(), orig.response_tokens()) {
            return Err(ScoringError::TraceAlignment(format!(
                "variant {l} ({}) scores a different response than the original ({} vs {} tokens)",
                var.prompt_ref(),
                var.len(),
                n
            )));
        }
        for (t, (o, v)) in orig_pos.iter().zip(var.positions()).enumerate() {
            if alpha[t] == T::zero() {
                continue;
            }
            let v = retruncate(v, cfg.k)?;
            total = total + alpha[t] * token_shift(o, v.as_ref(), cfg.metric, cfg.smoothing)?;
        }
    }
    let l = T::lit(variants.len() as f64);
    let denom = match cfg.normalization {
        Normalization::Length => l * T::lit(n as f64),
        Normalization::WeightSum => l * alpha.iter().copied().sum(),
    };
    if denom == T::zero() {
        return Ok(T::zero());
    }
    Ok(total / denom)
}

/// Length-normalized predictive entropy: the mean over samples of each
/// sample's mean negative log-probability.
pub fn ln_pe_score<T: Scalar>(samples: &[SampledTrace<T>]) -> Result<T, ScoringError> {
    if samples.is_empty() {
        return Err(ScoringError::EmptyResponse);
    }
    let mut acc = T::zero();
    for (index, s) in samples.iter().enumerate() {
        let want = s.trace.len();
        if want == 0 || s.chosen_logprobs.is_empty() {
            return Err(ScoringError::EmptyResponse);
        }
        if s.chosen_logprobs.len() != want {
            return Err(ScoringError::LogprobCount {
                index,
                got: s.chosen_logprobs.len(),
                want,
            });
        }
        let nll: T = s.chosen_logprobs.iter().map(|&lp| -lp).sum();
        acc = acc + nll / T::lit(want as f64);
    }
    Ok(acc / T::lit(samples.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::truncate_topk;
    use proptest::prelude::*;

    fn tok(i: u32) -> Token {
        Token::with_id(format!("t{i}"), i)
    }

    fn pos(logits: &[f64]) -> TruncatedDistribution<f64> {
        truncate_topk(logits.iter().enumerate().map(|(i, &l)| (tok(i as u32), l)), logits.len()).unwrap()
    }

    /// Position whose softmax is exactly `probs` (zeros are dropped).
    fn pos_from_probs(probs: &[f64]) -> TruncatedDistribution<f64> {
        truncate_topk(
            probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (tok(i as u32), p.ln())),
            probs.len(),
        )
        .unwrap()
    }

    fn trace(name: &str, positions: Vec<TruncatedDistribution<f64>>) -> TokenTrace<f64> {
        let toks = positions.iter().map(|d| d.top().clone()).collect();
        TokenTrace::new(name, toks, positions).unwrap()
    }

    fn cfg(metric: Metric, weighting: Weighting, k: usize) -> EsiConfig {
        EsiConfig {
            metric,
            weighting,
            k,
            ..EsiConfig::default()
        }
    }

    #[test]
    fn shift_examples() {
        let a = pos(&[1.0, 0.3, -2.0]);
        assert_eq!(token_shift(&a, &a, Metric::Hellinger, Smoothing::ScaledMin).unwrap(), 0.0);

        let only_a = truncate_topk(vec![(Token::text("a"), 0.0)], 5).unwrap();
        let only_b = truncate_topk(vec![(Token::text("b"), 0.0)], 5).unwrap();
        let h = token_shift(&only_a, &only_b, Metric::Hellinger, Smoothing::ScaledMin).unwrap();
        // union {a, b}; the missing token gets logit -ln 10, i.e. probability 1/11
        let p = [10.0 / 11.0, 1.0 / 11.0];
        let q = [1.0f64 / 11.0, 10.0 / 11.0];
        let want = (0.5 * ((p[0] as f64).sqrt() - q[0].sqrt()).powi(2) * 2.0).sqrt();
        assert!((h - want).abs() < 1e-15);
        assert!(h > 0.0 && h < 1.0);
        let back = token_shift(&only_b, &only_a, Metric::Hellinger, Smoothing::ScaledMin).unwrap();
        assert!((h - back).abs() < 1e-15);
    }

    #[test]
    fn identity_variants_score_zero() {
        let o = trace("orig", vec![pos(&[0.4, 0.1, -1.0]), pos(&[2.0, 1.9, 0.0])]);
        let copies = vec![&o; 4];
        for m in Metric::ALL {
            let s = esi_score(&o, &copies, &cfg(*m, Weighting::Entropy, 100)).unwrap();
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn single_position_unweighted() {
        let o = trace("o", vec![pos_from_probs(&[0.5, 0.5])]);
        // exp(-800) underflows to zero, so the variant is exactly [1, 0] on the same support
        let v = TokenTrace::new("v", o.response_tokens().to_vec(), vec![pos(&[0.0, -800.0])]).unwrap();
        assert_eq!(v.positions()[0].probs(), vec![1.0, 0.0]);
        let s = esi_score(&o, &[&v], &cfg(Metric::Hellinger, Weighting::None, 100)).unwrap();
        assert!((s - (1.0 - 0.5f64.sqrt()).sqrt()).abs() < 1e-12);
        assert!((s - 0.541196).abs() < 1e-6);
    }

    #[test]
    fn zero_entropy_weight_annihilates() {
        let o = trace("o", vec![pos_from_probs(&[1.0, 0.0])]);
        let v = TokenTrace::new("v", o.response_tokens().to_vec(), vec![pos(&[0.0, 3.0])]).unwrap();
        assert_eq!(esi_score(&o, &[&v], &cfg(Metric::Hellinger, Weighting::Entropy, 100)).unwrap(), 0.0);
        assert!(esi_score(&o, &[&v], &cfg(Metric::Hellinger, Weighting::None, 100)).unwrap() > 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            TokenTrace::<f64>::new("x", vec![], vec![]).unwrap_err(),
            ScoringError::EmptyResponse
        );
        assert!(matches!(
            TokenTrace::<f64>::new("x", vec![tok(0)], vec![]),
            Err(ScoringError::TraceAlignment(_))
        ));
        let o = trace("o", vec![pos(&[1.0, 0.0])]);
        let other = trace("v", vec![pos(&[0.0, 1.0])]);
        assert!(matches!(
            esi_score(&o, &[&other], &EsiConfig::default()),
            Err(ScoringError::TraceAlignment(_))
        ));
        assert_eq!(esi_score(&o, &[], &EsiConfig::default()), Err(ScoringError::NoVariants));
    }

    #[test]
    fn retruncation_follows_k() {
        let o = trace("o", vec![pos(&[3.0, 2.0, 1.0, 0.0])]);
        let v = TokenTrace::new("v", o.response_tokens().to_vec(), vec![pos(&[3.0, 0.5, 1.0, 2.5])]).unwrap();
        let full = esi_score(&o, &[&v], &cfg(Metric::Hellinger, Weighting::None, 4)).unwrap();
        let k1 = esi_score(&o, &[&v], &cfg(Metric::Hellinger, Weighting::None, 1)).unwrap();
        assert!(full > 0.0);
        assert_eq!(k1, 0.0);
    }

    #[test]
    fn weight_sum_normalization() {
        let o = trace("o", vec![pos(&[0.0, 0.0]), pos(&[1.0, 0.0])]);
        let v = TokenTrace::new("v", o.response_tokens().to_vec(), vec![pos(&[0.0, -1.0]), pos(&[1.0, 0.5])]).unwrap();
        let mut c = cfg(Metric::Hellinger, Weighting::Entropy, 10);
        let by_len = esi_score(&o, &[&v], &c).unwrap();
        c.normalization = Normalization::WeightSum;
        let by_w = esi_score(&o, &[&v], &c).unwrap();
        let alpha: f64 = position_weights(o.positions(), Weighting::Entropy).iter().sum();
        assert!((by_w * alpha - by_len * 2.0).abs() < 1e-12);
    }

    #[test]
    fn ln_pe_examples() {
        let t = trace("s", vec![pos(&[0.0])]);
        let certain = SampledTrace { trace: t.clone(), chosen_logprobs: vec![0.0] };
        assert_eq!(ln_pe_score(&[certain]).unwrap(), 0.0);
        let half = SampledTrace { trace: t.clone(), chosen_logprobs: vec![0.5f64.ln()] };
        assert!((ln_pe_score(&[half]).unwrap() - 0.693147).abs() < 1e-6);

        let t2 = trace("s2", vec![pos(&[0.0]), pos(&[0.0])]);
        let a = SampledTrace { trace: t.clone(), chosen_logprobs: vec![-1.2] };
        let b = SampledTrace { trace: t2.clone(), chosen_logprobs: vec![-0.4, -2.0] };
        let got = ln_pe_score(&[a, b]).unwrap();
        assert!((got - (1.2 + 1.2) / 2.0).abs() < 1e-15);

        assert_eq!(ln_pe_score::<f64>(&[]), Err(ScoringError::EmptyResponse));
        let bad = SampledTrace { trace: t2, chosen_logprobs: vec![-1.0] };
        assert!(matches!(ln_pe_score(&[bad]), Err(ScoringError::LogprobCount { .. })));
    }

    fn logit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-6.0f64..6.0, n)
    }

    fn random_case() -> impl Strategy<Value = (TokenTrace<f64>, Vec<TokenTrace<f64>>)> {
        (1usize..4, 1usize..5).prop_flat_map(|(n, l)| {
            (
                prop::collection::vec(logit_vec(5), n),
                prop::collection::vec(prop::collection::vec(logit_vec(5), n), l),
            )
                .prop_map(|(o, vs)| {
                    let orig = trace("o", o.iter().map(|x| pos(x)).collect());
                    let vars = vs
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            TokenTrace::new(format!("v{i}"), orig.response_tokens().to_vec(), v.iter().map(|x| pos(x)).collect()).unwrap()
                        })
                        .collect();
                    (orig, vars)
                })
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_linear((orig, vars) in random_case(), seed in 0u64..1000) {
            let c = cfg(Metric::Hellinger, Weighting::Entropy, 5);
            let refs: Vec<_> = vars.iter().collect();
            let s = esi_score(&orig, &refs, &c).unwrap();
            let mut shuffled = refs.clone();
            let r = (seed as usize) % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            prop_assert!((esi_score(&orig, &shuffled, &c).unwrap() - s).abs() < 1e-12);
            let mean: f64 = refs.iter().map(|v| esi_score(&orig, &[*v], &c).unwrap()).sum::<f64>() / refs.len() as f64;
            prop_assert!((mean - s).abs() < 1e-12);
        }

        #[test]
        fn hellinger_bounds((orig, vars) in random_case()) {
            let refs: Vec<_> = vars.iter().collect();
            let weighted = esi_score(&orig, &refs, &cfg(Metric::Hellinger, Weighting::Entropy, 5)).unwrap();
            let max_alpha = position_weights(orig.positions(), Weighting::Entropy).into_iter().fold(0.0, f64::max);
            prop_assert!(weighted >= 0.0 && weighted <= max_alpha + 1e-12);
            let plain = esi_score(&orig, &refs, &cfg(Metric::Hellinger, Weighting::None, 5)).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&plain));
        }

        // Moving a variant distribution further along the segment away from the
        // original (same support) cannot lower the score.
        #[test]
        fn monotone_in_distance(o in logit_vec(4), v in logit_vec(4), step in 1.1f64..3.0) {
            let orig = trace("o", vec![pos(&o)]);
            let near = TokenTrace::new("v", orig.response_tokens().to_vec(), vec![pos(&v)]).unwrap();
            let far_logits: Vec<f64> = o.iter().zip(&v).map(|(a, b)| a + step * (b - a)).collect();
            let far = TokenTrace::new("v", orig.response_tokens().to_vec(), vec![pos(&far_logits)]).unwrap();
            let c = cfg(Metric::Hellinger, Weighting::Entropy, 4);
            let s_near = esi_score(&orig, &[&near], &c).unwrap();
            let s_far = esi_score(&orig, &[&far], &c).unwrap();
            prop_assert!(s_far >= s_near - 1e-12, "{} < {}", s_far, s_near);
        }
    }
}
