//! AUROC, the pool-and-resample trial protocol, and report files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EsiConfig;
use crate::rng::{derive_rng, stream_id};
use crate::scalar::Scalar;
use crate::scoring::{esi_score, ScoreRecord, ScoringError, TokenTrace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUROC needs both classes, got {incorrect} incorrect and {correct} correct")]
    DegenerateLabels { incorrect: usize, correct: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {index} is not a number")]
    NanScore { index: usize },
    #[error("query {query_id} has {have} variant traces, trials need {need}")]
    InsufficientPool { query_id: String, have: usize, need: usize },
    #[error("no label for {} queries: {}", .0.len(), .0.join(", "))]
    MissingLabel(Vec<String>),
    #[error("invalid trial configuration: {0}")]
    InvalidConfig(String),
    #[error("query {query_id}: {source}")]
    Scoring {
        query_id: String,
        #[source]
        source: ScoringError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_trials: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            n_trials: 10,
            l: 10,
            pool_size: 40,
            seed: 0,
        }
    }
}

impl TrialConfig {
    pub fn from_esi(cfg: &EsiConfig, n_trials: usize) -> Self {
        TrialConfig {
            n_trials,
            l: cfg.l,
            pool_size: cfg.pool_size,
            seed: cfg.seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_trials == 0 {
            return Err(EvalError::InvalidConfig("n_trials must be positive".into()));
        }
        if self.l == 0 || self.l > self.pool_size {
            return Err(EvalError::InvalidConfig(format!(
                "L ({}) must be in 1..=pool_size ({})",
                self.l, self.pool_size
            )));
        }
        Ok(())
    }
}

/// Area under the ROC curve with incorrect answers as the positive class:
/// the chance that an incorrect answer outscores a correct one, ties
/// counting half. `labels[i]` is true when answer `i` is correct.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NanScore { index });
    }
    let correct = labels.iter().filter(|&&c| c).count();
    let incorrect = labels.len() - correct;
    if correct == 0 || incorrect == 0 {
        return Err(EvalError::DegenerateLabels { incorrect, correct });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    // Sum of midranks of the incorrect answers; doubled to stay integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u64;
        let tied_incorrect = order[i..=j].iter().filter(|&&x| !labels[x]).count() as u64;
        rank_sum2 += midrank2 * tied_incorrect;
        i = j + 1;
    }
    let (n1, n0) = (incorrect as u64, correct as u64);
    let u2 = rank_sum2 - n1 * (n1 + 1);
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

/// Original and variant traces of one query; `variants[i]` belongs to pool
/// member `i`.
#[derive(Debug, Clone)]
pub struct QueryTraces<T> {
    pub query_id: String,
    pub original: TokenTrace<T>,
    pub variants: Vec<TokenTrace<T>>,
}

/// Pool indices used by one trial of one query, ascending.
pub fn draw_trial(seed: u64, query_id: &str, trial: usize, pool_size: usize, l: usize) -> Vec<usize> {
    let mut rng = derive_rng(seed, &stream_id(&["resample", query_id, &trial.to_string()]));
    let mut picked = index::sample(&mut rng, pool_size, l).into_vec();
    picked.sort_unstable();
    picked
}

pub fn esi_method_name(cfg: &EsiConfig) -> String {
    format!("esi_{}", cfg.intervention_method)
}

pub const LN_PE: &str = "ln_pe";

/// Scores every query once per trial on `L` distinct pool members.
/// Records come back grouped by query in input order, trials ascending
/// from 1.
pub fn resample_trials<T: Scalar>(
    queries: &[QueryTraces<T>],
    trial: &TrialConfig,
    cfg: &EsiConfig,
) -> Result<Vec<ScoreRecord>, EvalError> {
    trial.validate()?;
    let method = esi_method_name(cfg);
    let fingerprint = cfg.fingerprint();
    let per_query = queries
        .par_iter()
        .map(|q| {
            if q.variants.len() < trial.pool_size {
                return Err(EvalError::InsufficientPool {
                    query_id: q.query_id.clone(),
                    have: q.variants.len(),
                    need: trial.pool_size,
                });
            }
            (1..=trial.n_trials)
                .map(|i| {
                    let picked: Vec<&TokenTrace<T>> = draw_trial(trial.seed, &q.query_id, i, trial.pool_size, trial.l)
                        .into_iter()
                        .map(|j| &q.variants[j])
                        .collect();
                    let value = esi_score(&q.original, &picked, cfg).map_err(|source| EvalError::Scoring {
                        query_id: q.query_id.clone(),
                        source,
                    })?;
                    Ok(ScoreRecord {
                        query_id: q.query_id.clone(),
                        method: method.clone(),
                        value: value.to_f64_lossy(),
                        trial_index: i,
                        config_fingerprint: fingerprint.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean: f64,
    pub std: f64,
    pub n_trials: usize,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialAuroc {
    pub method: String,
    pub trial: usize,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: BTreeMap<String, MethodSummary>,
    pub trials: Vec<TrialAuroc>,
}

/// Mean and sample (n - 1) standard deviation; zero spread for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-method, per-trial AUROC and their mean and spread.
///
/// With `permissive`, records of unlabeled queries are dropped with a
/// warning instead of failing the report.
pub fn report(records: &[ScoreRecord], labels: &HashMap<String, bool>, permissive: bool) -> Result<EvalReport, EvalError> {
    let missing: BTreeSet<&str> = records
        .iter()
        .filter(|r| !labels.contains_key(&r.query_id))
        .map(|r| r.query_id.as_str())
        .collect();
    if !missing.is_empty() {
        if !permissive {
            return Err(EvalError::MissingLabel(missing.into_iter().map(String::from).collect()));
        }
        log::warn!("excluding {} unlabeled queries from the report", missing.len());
    }

    let mut grouped: BTreeMap<&str, BTreeMap<usize, (Vec<f64>, Vec<bool>)>> = BTreeMap::new();
    let mut queries: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        let Some(&label) = labels.get(&r.query_id) else {
            continue;
        };
        let slot = grouped.entry(&r.method).or_default().entry(r.trial_index).or_default();
        slot.0.push(r.value);
        slot.1.push(label);
        queries.entry(&r.method).or_default().insert(&r.query_id);
    }

    let mut out = EvalReport::default();
    for (method, trials) in grouped {
        let mut values = Vec::with_capacity(trials.len());
        for (trial, (scores, labs)) in trials {
            let a = auroc(&scores, &labs)?;
            values.push(a);
            out.trials.push(TrialAuroc {
                method: method.to_string(),
                trial,
                auroc: a,
            });
        }
        let (mean, std) = mean_std(&values);
        out.summary.insert(
            method.to_string(),
            MethodSummary {
                mean,
                std,
                n_trials: values.len(),
                n_queries: queries[method].len(),
            },
        );
    }
    Ok(out)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,trial,auroc\n");
        for t in &self.trials {
            let _ = writeln!(s, "{},{},{}", t.method, t.trial, t.auroc);
        }
        s
    }

    /// `{method: {mean, std, n_trials, n_queries}}`
    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.summary.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>6}  {:>7}\n", "method", "auroc", "std", "trials", "queries");
        for (m, r) in &self.summary {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>6}  {:>7}",
                m, r.mean, r.std, r.n_trials, r.n_queries
            );
        }
        s
    }

    /// Writes `auroc.csv`, `summary.json` and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, body) in [
            ("auroc.csv", self.to_csv()),
            ("summary.json", self.summary_json()),
            ("summary.txt", self.to_text()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(&p))?;
        }
        Ok(())
    }
}

pub fn write_records(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>, EvalError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: shown.clone(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: shown.clone(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
