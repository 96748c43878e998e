//! Truncated token distributions, support alignment and distances.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in `f32`
//! and `f64`. All logarithms are natural.

use std::collections::HashMap;

use thiserror::Error;

use crate::config::{Metric, Smoothing};
use crate::scalar::Scalar;
use crate::token::{KeyMode, Token, TokenKey};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("probability vector not normalized (sum {sum})")]
    NonNormalized { sum: f64 },
    #[error("negative or non-finite probability {value} at index {index}")]
    InvalidProbability { index: usize, value: f64 },
    #[error("non-finite logit for token {token}")]
    InvalidLogit { token: String },
    #[error("duplicate token {token}")]
    DuplicateToken { token: String },
    #[error("k must be at least 1")]
    ZeroK,
}

/// Top-k `(token, logit)` pairs at one generation position.
///
/// Entries are sorted by descending logit, ties by ascending token, with no
/// duplicate tokens and at most `k` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDistribution<T> {
    entries: Vec<(Token, T)>,
    k: usize,
}

fn entry_order<T: Scalar>(a: &(Token, T), b: &(Token, T)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .expect("logits are finite")
        .then_with(|| a.0.cmp(&b.0))
}

impl<T: Scalar> TruncatedDistribution<T> {
    /// Validates already-truncated entries (any order) without dropping any.
    pub fn from_entries(mut entries: Vec<(Token, T)>, k: usize) -> Result<Self, MetricError> {
        if k == 0 {
            return Err(MetricError::ZeroK);
        }
        if entries.is_empty() {
            return Err(MetricError::EmptyDistribution);
        }
        check_logits(&entries)?;
        entries.sort_by(entry_order);
        check_unique(&entries)?;
        if entries.len() > k {
            return Err(MetricError::DimensionMismatch {
                left: entries.len(),
                right: k,
            });
        }
        Ok(TruncatedDistribution { entries, k })
    }

    pub fn entries(&self) -> &[(Token, T)] {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self) -> &Token {
        &self.entries[0].0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.entries.iter().map(|(t, _)| t)
    }

    pub fn min_logit(&self) -> T {
        self.entries[self.entries.len() - 1].1
    }

    /// Softmax over the retained entries, in entry order.
    pub fn probs(&self) -> Vec<T> {
        let logits: Vec<T> = self.entries.iter().map(|(_, l)| *l).collect();
        softmax(&logits)
    }

    /// Same distribution with every logit converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> TruncatedDistribution<U> {
        TruncatedDistribution {
            entries: self
                .entries
                .iter()
                .map(|(t, l)| (t.clone(), U::lit(l.to_f64_lossy())))
                .collect(),
            k: self.k,
        }
    }
}

fn check_logits<T: Scalar>(entries: &[(Token, T)]) -> Result<(), MetricError> {
    match entries.iter().find(|(_, l)| !l.is_finite()) {
        Some((t, _)) => Err(MetricError::InvalidLogit { token: t.to_string() }),
        None => Ok(()),
    }
}

fn check_unique<T>(entries: &[(Token, T)]) -> Result<(), MetricError> {
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    for (t, _) in entries {
        if !seen.insert(t) {
            return Err(MetricError::DuplicateToken { token: t.to_string() });
        }
    }
    Ok(())
}

/// Keeps the `k` largest logits, ties broken by ascending token.
pub fn truncate_topk<T: Scalar>(
    logits: impl IntoIterator<Item = (Token, T)>,
    k: usize,
) -> Result<TruncatedDistribution<T>, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let mut entries: Vec<(Token, T)> = logits.into_iter().collect();
    if entries.is_empty() {
        return Err(MetricError::EmptyDistribution);
    }
    check_logits(&entries)?;
    entries.sort_by(entry_order);
    check_unique(&entries)?;
    entries.truncate(k);
    Ok(TruncatedDistribution { entries, k })
}

/// Two probability vectors over a shared, ordered support.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair<T> {
    pub support: Vec<Token>,
    pub probs_a: Vec<T>,
    pub probs_b: Vec<T>,
}

/// Logit given to a token absent from a distribution whose smallest retained
/// logit is `min`.
pub fn smoothed_logit<T: Scalar>(min: T, smoothing: Smoothing) -> T {
    let ten = T::lit(10.0);
    match smoothing {
        Smoothing::ScaledMin => {
            if min > T::zero() {
                min / ten
            } else if min < T::zero() {
                min - T::lit(0.9) * min.abs()
            } else {
                -ten.ln()
            }
        }
        Smoothing::MinMinusMargin => min - ten.ln(),
    }
}

/// Extends both distributions to the union of their supports and
/// softmax-normalizes each over it.
///
/// The support lists `d1`'s tokens in its own order followed by the tokens
/// only `d2` has. Tokens are matched by integer id when every token on both
/// sides has one, otherwise by string.
pub fn align_supports<T: Scalar>(
    d1: &TruncatedDistribution<T>,
    d2: &TruncatedDistribution<T>,
    smoothing: Smoothing,
) -> Result<AlignedPair<T>, MetricError> {
    let (support, probs_a, probs_b) = align_with(d1, d2, smoothing, |t| t.clone())?;
    Ok(AlignedPair {
        support,
        probs_a,
        probs_b,
    })
}

/// [`align_supports`] without materializing the support.
pub(crate) fn aligned_probs<T: Scalar>(
    d1: &TruncatedDistribution<T>,
    d2: &TruncatedDistribution<T>,
    smoothing: Smoothing,
) -> Result<(Vec<T>, Vec<T>), MetricError> {
    let (_, a, b) = align_with(d1, d2, smoothing, |_| ())?;
    Ok((a, b))
}

fn align_with<'a, T: Scalar, S>(
    d1: &'a TruncatedDistribution<T>,
    d2: &'a TruncatedDistribution<T>,
    smoothing: Smoothing,
    keep: impl Fn(&Token) -> S,
) -> Result<(Vec<S>, Vec<T>, Vec<T>), MetricError> {
    if d1.is_empty() || d2.is_empty() {
        return Err(MetricError::EmptyDistribution);
    }
    let mode = KeyMode::for_tokens(d1.tokens().chain(d2.tokens()));
    // d1's tokens are unique, so they take slots 0..d1.len() in order.
    let mut index: HashMap<TokenKey<'a>, usize> = HashMap::with_capacity(d1.len() + d2.len());
    let mut support: Vec<S> = Vec::with_capacity(d1.len() + d2.len());
    let mut slots_b = Vec::with_capacity(d2.len());
    for t in d1.tokens() {
        index.insert(t.key(mode), support.len());
        support.push(keep(t));
    }
    for t in d2.tokens() {
        let slot = *index.entry(t.key(mode)).or_insert_with(|| {
            support.push(keep(t));
            support.len() - 1
        });
        slots_b.push(slot);
    }
    let n = support.len();
    let fill_a = smoothed_logit(d1.min_logit(), smoothing);
    let mut logits_a = vec![fill_a; n];
    for (i, (_, l)) in d1.entries().iter().enumerate() {
        logits_a[i] = *l;
    }
    let fill_b = smoothed_logit(d2.min_logit(), smoothing);
    let mut logits_b = vec![fill_b; n];
    for (&slot, (_, l)) in slots_b.iter().zip(d2.entries()) {
        logits_b[slot] = *l;
    }
    Ok((support, softmax(&logits_a), softmax(&logits_b)))
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn check_probability_vector<T: Scalar>(p: &[T]) -> Result<(), MetricError> {
    if p.is_empty() {
        return Err(MetricError::EmptyDistribution);
    }
    for (index, &v) in p.iter().enumerate() {
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(MetricError::InvalidProbability {
                index,
                value: v.to_f64_lossy(),
            });
        }
    }
    let sum: T = p.iter().copied().sum();
    if (sum - T::one()).abs() > T::NORM_TOL {
        return Err(MetricError::NonNormalized { sum: sum.to_f64_lossy() });
    }
    Ok(())
}

/// Distance between two probability vectors on the same support.
///
/// For `Metric::Kl` the first argument is the reference (original-prompt)
/// distribution: `KL(p || q)`.
pub fn distance<T: Scalar>(p: &[T], q: &[T], metric: Metric) -> Result<T, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    check_probability_vector(p)?;
    check_probability_vector(q)?;
    Ok(match metric {
        Metric::Hellinger => hellinger(p, q),
        Metric::SqHellinger => {
            let h = hellinger(p, q);
            h * h
        }
        Metric::Kl => kl_divergence(p, q),
        Metric::Bhattacharyya => bhattacharyya(p, q),
    })
}

pub fn hellinger<T: Scalar>(p: &[T], q: &[T]) -> T {
    let s: T = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    (s * T::lit(0.5)).sqrt()
}

/// `Σ p ln(p/q)` with `0 ln 0 = 0`; infinite when `q` misses mass of `p`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a == T::zero() {
                T::zero()
            } else if b == T::zero() {
                T::infinity()
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

pub fn bhattacharyya<T: Scalar>(p: &[T], q: &[T]) -> T {
    // The coefficient of identical inputs is their rounded total mass, not 1.
    if p == q {
        return T::zero();
    }
    let bc: T = p.iter().zip(q).map(|(&a, &b)| (a * b).sqrt()).sum();
    -bc.min(T::one()).ln()
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T, MetricError> {
    check_probability_vector(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked<T: Scalar>(p: &[T]) -> T {
    let h: T = p
        .iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum();
    h.max(T::zero())
}
