//! Exact checks of the sequence-level identities behind the ESI score, by
//! brute-force enumeration over a small mock language model.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{enumerate_sequences, BackendError, LogitProvider, MockLM, Prompt, SequenceModel, MAX_ENUMERATION};
use crate::config::{EsiConfig, InterventionMethod, Metric, Normalization, Weighting};
use crate::metrics::kl_divergence;
use crate::scoring::{esi_score, ScoringError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("KL divergence is infinite: {0}")]
    InfiniteKl(String),
    #[error("need at least {need} variants, got {got}")]
    TooFewVariants { need: usize, got: usize },
    #[error("token {0} has no integer id")]
    MissingTokenId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check_name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    pub fn new(check_name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let abs_diff = (lhs - rhs).abs();
        OracleReport {
            check_name: check_name.into(),
            lhs,
            rhs,
            abs_diff,
            tolerance,
            // NaN fails
            passed: abs_diff <= tolerance,
        }
    }
}

/// A model whose next-token distribution depends on the prompt text only.
/// Without an end-of-sequence token every sequence has length `len`.
#[derive(Debug, Clone, Default)]
pub struct StationaryModel {
    pub dists: HashMap<String, Vec<f64>>,
    pub len: usize,
}

impl StationaryModel {
    pub fn new(len: usize) -> Self {
        StationaryModel {
            dists: HashMap::new(),
            len,
        }
    }

    pub fn with(mut self, prompt: impl Into<String>, dist: Vec<f64>) -> Self {
        self.dists.insert(prompt.into(), dist);
        self
    }
}

impl SequenceModel for StationaryModel {
    fn vocab_size(&self) -> usize {
        self.dists.values().next().map_or(0, Vec::len)
    }

    fn max_len(&self) -> usize {
        self.len
    }

    fn eos(&self) -> Option<u32> {
        None
    }

    fn next_dist(&self, prompt: &Prompt, _context: &[u32]) -> Vec<f64> {
        self.dists
            .get(&prompt.text)
            .unwrap_or_else(|| panic!("no distribution for prompt {:?}", prompt.text))
            .clone()
    }
}

fn token_kl(p: &[f64], q: &[f64], what: impl FnOnce() -> String) -> Result<f64, OracleError> {
    let kl = kl_divergence(p, q);
    if kl.is_finite() {
        Ok(kl)
    } else {
        Err(OracleError::InfiniteKl(what()))
    }
}

/// `Σ_y p(y|x1) ln(p(y|x1) / p(y|x2))` over every sequence of the model.
pub fn sequence_kl_exact<M: SequenceModel + ?Sized>(lm: &M, x1: &Prompt, x2: &Prompt) -> Result<f64, OracleError> {
    let p = enumerate_sequences(lm, x1)?;
    let q = enumerate_sequences(lm, x2)?;
    let mut kl = 0.0;
    for (y, &a) in &p {
        match q.get(y) {
            Some(&b) if b > 0.0 => kl += a * (a / b).ln(),
            _ => return Err(OracleError::InfiniteKl(format!("sequence {y:?} has zero mass under {:?}", x2.text))),
        }
    }
    Ok(kl)
}

/// Token-level KL summed over positions and averaged over every prefix,
/// weighting prefixes by their probability under `x1`.
pub fn tokenwise_kl_expected<M: SequenceModel + ?Sized>(lm: &M, x1: &Prompt, x2: &Prompt) -> Result<f64, OracleError> {
    let (v, t) = (lm.vocab_size(), lm.max_len());
    if (v as f64).powi(t as i32) > MAX_ENUMERATION {
        return Err(BackendError::EnumerationTooLarge { vocab: v, len: t }.into());
    }
    let mut total = 0.0;
    let mut stack: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = stack.pop() {
        if prefix.len() == t {
            continue;
        }
        let p = lm.next_dist(x1, &prefix);
        let q = lm.next_dist(x2, &prefix);
        total += mass * token_kl(&p, &q, || format!("after prefix {prefix:?}"))?;
        for (tok, &pt) in p.iter().enumerate() {
            if pt > 0.0 {
                let mut next = prefix.clone();
                next.push(tok as u32);
                stack.push((next, mass * pt));
            }
        }
    }
    Ok(total)
}

/// Expected pairwise KL over a uniformly weighted variant set: the mean of
/// the sequence KL over all ordered pairs, equal pairs included.
pub fn epkl_exact<M: SequenceModel + Sync + ?Sized>(lm: &M, variants: &[Prompt]) -> Result<f64, OracleError> {
    let n = variants.len();
    if n < 2 {
        return Err(OracleError::TooFewVariants { need: 2, got: n });
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
    let kls = pairs
        .par_iter()
        .map(|&(i, j)| sequence_kl_exact(lm, &variants[i], &variants[j]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(kls.iter().sum::<f64>() / (n * n) as f64)
}

fn kl_config(vocab: usize) -> EsiConfig {
    EsiConfig {
        metric: Metric::Kl,
        weighting: Weighting::None,
        k: vocab,
        normalization: Normalization::Length,
        ..EsiConfig::for_method(InterventionMethod::Identity)
    }
}

/// Compares the ESI score (KL, unweighted, full vocabulary) computed from
/// backend traces against the exact variant-set average of the length
/// normalized token KL along the original prompt's greedy response.
pub fn verify_esi_vs_epkl<M: SequenceModel + LogitProvider + ?Sized>(
    lm: &M,
    original: &Prompt,
    variants: &[Prompt],
    tolerance: f64,
) -> Result<OracleReport, OracleError> {
    if variants.is_empty() {
        return Err(OracleError::TooFewVariants { need: 1, got: 0 });
    }
    let vocab = lm.vocab_size();
    let cfg = kl_config(vocab);
    let greedy = lm.generate_greedy(original, lm.max_len(), vocab)?;
    let traces = variants
        .iter()
        .map(|v| lm.score_teacher_forced(v, greedy.response_tokens(), vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<_> = traces.iter().collect();
    let lhs = esi_score(&greedy, &refs, &cfg)?;

    let path = greedy
        .response_tokens()
        .iter()
        .map(|t| t.id().ok_or_else(|| OracleError::MissingTokenId(t.to_string())))
        .collect::<Result<Vec<u32>, _>>()?;
    let n = path.len() as f64;
    let mut rhs = 0.0;
    for v in variants {
        let mut sum = 0.0;
        for t in 0..path.len() {
            let p = lm.next_dist(original, &path[..t]);
            let q = lm.next_dist(v, &path[..t]);
            sum += token_kl(&p, &q, || format!("position {t} of {:?}", v.text))?;
        }
        rhs += sum / n;
    }
    rhs /= variants.len() as f64;
    Ok(OracleReport::new(
        format!("esi_vs_epkl[{}]", original.query_id),
        lhs,
        rhs,
        tolerance,
    ))
}

/// Exact EPKL of one variant set while the mock's sensitivity sweeps a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySweep {
    pub seed: u64,
    pub sensitivities: Vec<f64>,
    pub epkl: Vec<f64>,
    pub non_decreasing: bool,
}

pub const SENSITIVITY_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub fn sensitivity_sweep(seed: u64, vocab: usize, len: usize, n_variants: usize) -> Result<SensitivitySweep, OracleError> {
    let (original, variants) = mock_prompts(seed, n_variants);
    let epkl = SENSITIVITY_GRID
        .iter()
        .map(|&lambda| {
            let lm = MockLM::new(seed, vocab, len, lambda).with_query(original.query_id.clone(), original.text.clone(), false);
            epkl_exact(&lm, &variants)
        })
        .collect::<Result<Vec<_>, _>>()?;
    // tiny slack for rounding at λ = 0
    let non_decreasing = epkl.windows(2).all(|w| w[1] >= w[0] - 1e-15);
    Ok(SensitivitySweep {
        seed,
        sensitivities: SENSITIVITY_GRID.to_vec(),
        epkl,
        non_decreasing,
    })
}

/// The original prompt and `n` distinct variant prompts of a mock query.
pub fn mock_prompts(seed: u64, n: usize) -> (Prompt, Vec<Prompt>) {
    let qid = format!("mock{seed}");
    let text = format!("question {seed}");
    let variants = (0..n)
        .map(|i| Prompt::variant(qid.clone(), i, format!("{text} variant {i}")))
        .collect();
    (Prompt::original(qid, text), variants)
}

fn spurious_mock(seed: u64, vocab: usize, len: usize, sensitivity: f64) -> (MockLM, Prompt) {
    let (original, _) = mock_prompts(seed, 0);
    let lm = MockLM::new(seed, vocab, len, sensitivity).with_query(original.query_id.clone(), original.text.clone(), false);
    (lm, original)
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub base_seed: u64,
    /// Mocks checked for the sequence/token-level KL identity.
    pub identity_seeds: usize,
    /// Mocks checked for the ESI/EPKL correspondence.
    pub esi_seeds: usize,
    pub tolerance: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            base_seed: 0,
            identity_seeds: 100,
            esi_seeds: 20,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub reports: Vec<OracleReport>,
    pub sweeps: Vec<SensitivitySweep>,
}

impl SuiteOutcome {
    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }
}

/// The default battery of exact checks on seeded mocks.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteOutcome, OracleError> {
    let tol = opts.tolerance;
    let mut reports = Vec::new();

    let two = StationaryModel::new(1)
        .with("a", vec![0.5, 0.5])
        .with("b", vec![0.9, 0.1]);
    let (a, b) = (Prompt::original("fixed", "a"), Prompt::original("fixed", "b"));
    reports.push(OracleReport::new(
        "sequence_kl_closed_form",
        sequence_kl_exact(&two, &a, &b)?,
        0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln(),
        tol,
    ));
    let chain = StationaryModel { len: 2, ..two.clone() };
    reports.push(OracleReport::new(
        "sequence_kl_chain_rule",
        sequence_kl_exact(&chain, &a, &b)?,
        2.0 * kl_divergence(&two.dists["a"], &two.dists["b"]),
        tol,
    ));
    reports.push(OracleReport::new("sequence_kl_self", sequence_kl_exact(&chain, &a, &a)?, 0.0, tol));

    let seeds: Vec<u64> = (0..opts.identity_seeds as u64).map(|s| opts.base_seed + s).collect();
    let identity = seeds
        .par_iter()
        .map(|&seed| {
            let (lm, original) = spurious_mock(seed, 4, 4, 0.5);
            let (_, variants) = mock_prompts(seed, 1);
            Ok(OracleReport::new(
                format!("tokenwise_kl_identity[seed={seed}]"),
                sequence_kl_exact(&lm, &original, &variants[0])?,
                tokenwise_kl_expected(&lm, &original, &variants[0])?,
                tol,
            ))
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    reports.extend(identity);

    let (lm, _) = spurious_mock(opts.base_seed, 4, 3, 0.5);
    let (_, pair) = mock_prompts(opts.base_seed, 2);
    let kl_ab = sequence_kl_exact(&lm, &pair[0], &pair[1])?;
    let kl_ba = sequence_kl_exact(&lm, &pair[1], &pair[0])?;
    reports.push(OracleReport::new(
        "epkl_ordered_pairs",
        epkl_exact(&lm, &pair)?,
        (kl_ab + kl_ba) / 4.0,
        tol,
    ));
    let (orig, variants) = mock_prompts(opts.base_seed, 4);
    let robust = MockLM::new(opts.base_seed, 4, 3, 0.5).with_query(orig.query_id.clone(), orig.text.clone(), true);
    reports.push(OracleReport::new("epkl_robust_zero", epkl_exact(&robust, &variants)?, 0.0, tol));
    let mut esi_robust = verify_esi_vs_epkl(&robust, &orig, &variants, tol)?;
    esi_robust.check_name = "esi_vs_epkl_robust".into();
    reports.push(esi_robust);
    let mut esi_identity = verify_esi_vs_epkl(&lm, &orig, std::slice::from_ref(&orig), tol)?;
    esi_identity.check_name = "esi_vs_epkl_identity".into();
    reports.push(esi_identity);

    let esi_seeds: Vec<u64> = (0..opts.esi_seeds as u64).map(|s| opts.base_seed + s).collect();
    let esi = esi_seeds
        .par_iter()
        .map(|&seed| {
            let (lm, original) = spurious_mock(seed, 4, 3, 0.5);
            let (_, variants) = mock_prompts(seed, 4);
            verify_esi_vs_epkl(&lm, &original, &variants, tol)
        })
        .collect::<Result<Vec<_>, _>>()?;
    reports.extend(esi);

    let sweeps = (0..5)
        .map(|s| sensitivity_sweep(opts.base_seed + s, 4, 3, 4))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SuiteOutcome { reports, sweeps })
}

/// Fixed-width table of reports, one row per check.
pub fn render_table(reports: &[OracleReport]) -> String {
    let width = reports.iter().map(|r| r.check_name.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>22}  {:>22}  {:>10}  {:>8}  pass",
        "check", "lhs", "rhs", "diff", "tol"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>22.15e}  {:>22.15e}  {:>10.3e}  {:>8.1e}  {}",
            r.check_name,
            r.lhs,
            r.rhs,
            r.abs_diff,
            r.tolerance,
            if r.passed { "yes" } else { "NO" }
        );
    }
    out
}

pub fn render_sweeps(sweeps: &[SensitivitySweep]) -> String {
    let mut out = String::new();
    for s in sweeps {
        let values: Vec<String> = s
            .sensitivities
            .iter()
            .zip(&s.epkl)
            .map(|(l, e)| format!("{l}:{e:.6}"))
            .collect();
        let _ = writeln!(
            out,
            "epkl by sensitivity, seed {}: {}{}",
            s.seed,
            values.join(" "),
            if s.non_decreasing { "" } else { "  (not monotone)" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> (StationaryModel, Prompt, Prompt) {
        let m = StationaryModel::new(1)
            .with("a", vec![0.5, 0.5])
            .with("b", vec![0.9, 0.1]);
        (m, Prompt::original("q", "a"), Prompt::original("q", "b"))
    }

    #[test]
    fn closed_form_two_token_kl() {
        let (m, a, b) = two_point();
        let kl = sequence_kl_exact(&m, &a, &b).unwrap();
        assert!((kl - 0.510826).abs() < 1e-6);
        assert_eq!(sequence_kl_exact(&m, &a, &a).unwrap(), 0.0);
        assert!((tokenwise_kl_expected(&m, &a, &b).unwrap() - kl).abs() < 1e-15);
    }

    #[test]
    fn chain_rule_doubles_over_two_steps() {
        let (m, a, b) = two_point();
        let one = sequence_kl_exact(&m, &a, &b).unwrap();
        let two = StationaryModel { len: 2, ..m };
        assert!((sequence_kl_exact(&two, &a, &b).unwrap() - 2.0 * one).abs() < 1e-12);
    }

    #[test]
    fn infinite_kl_is_reported() {
        let m = StationaryModel::new(1)
            .with("a", vec![0.5, 0.5])
            .with("b", vec![1.0, 0.0]);
        let (a, b) = (Prompt::original("q", "a"), Prompt::original("q", "b"));
        assert!(matches!(sequence_kl_exact(&m, &a, &b), Err(OracleError::InfiniteKl(_))));
        assert!(matches!(tokenwise_kl_expected(&m, &a, &b), Err(OracleError::InfiniteKl(_))));
        // the reverse direction is finite
        assert!(sequence_kl_exact(&m, &b, &a).unwrap().is_finite());
    }

    #[test]
    fn enumeration_guard() {
        let m = MockLM::new(0, 50, 10, 0.5);
        let (a, b) = (Prompt::original("q", "a"), Prompt::original("q", "b"));
        assert!(matches!(
            tokenwise_kl_expected(&m, &a, &b),
            Err(OracleError::Backend(BackendError::EnumerationTooLarge { .. }))
        ));
    }

    #[test]
    fn epkl_counts_diagonal_pairs() {
        let (lm, _) = spurious_mock(3, 4, 3, 0.5);
        let (_, v) = mock_prompts(3, 2);
        let want = (sequence_kl_exact(&lm, &v[0], &v[1]).unwrap() + sequence_kl_exact(&lm, &v[1], &v[0]).unwrap()) / 4.0;
        assert!((epkl_exact(&lm, &v).unwrap() - want).abs() < 1e-15);
        let same = vec![v[0].clone(), v[0].clone()];
        assert_eq!(epkl_exact(&lm, &same).unwrap(), 0.0);
        assert!(matches!(epkl_exact(&lm, &v[..1]), Err(OracleError::TooFewVariants { .. })));
    }

    #[test]
    fn identity_holds_on_mocks() {
        for seed in 0..10 {
            let (lm, x1) = spurious_mock(seed, 4, 4, 0.5);
            let (_, v) = mock_prompts(seed, 1);
            let a = sequence_kl_exact(&lm, &x1, &v[0]).unwrap();
            let b = tokenwise_kl_expected(&lm, &x1, &v[0]).unwrap();
            assert!(a > 0.0);
            assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
        }
    }

    #[test]
    fn esi_matches_exact_average() {
        let (lm, x) = spurious_mock(11, 4, 3, 0.5);
        let (_, v) = mock_prompts(11, 4);
        let r = verify_esi_vs_epkl(&lm, &x, &v, 1e-9).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.lhs > 0.0);

        let r0 = verify_esi_vs_epkl(&lm, &x, std::slice::from_ref(&x), 1e-9).unwrap();
        assert_eq!((r0.lhs, r0.rhs), (0.0, 0.0));
    }

    #[test]
    fn report_pass_flag_tracks_tolerance() {
        assert!(OracleReport::new("x", 1.0, 1.0 + 1e-10, 1e-9).passed);
        assert!(!OracleReport::new("x", 1.0, 1.1, 1e-9).passed);
        assert!(!OracleReport::new("x", f64::NAN, 0.0, 1e-9).passed);
    }

    #[test]
    fn small_suite_passes_and_renders() {
        let out = run_suite(&SuiteOptions {
            identity_seeds: 3,
            esi_seeds: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(out.all_passed(), "{}", render_table(&out.reports));
        let table = render_table(&out.reports);
        assert!(table.starts_with("check"));
        assert_eq!(table.lines().count(), out.reports.len() + 1);
        assert_eq!(out.sweeps.len(), 5);
        assert!(out.sweeps.iter().all(|s| s.epkl[0].abs() < 1e-15));
    }
}
