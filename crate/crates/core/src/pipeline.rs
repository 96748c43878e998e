//! File-based pipeline: intervene → generate → trace → score → eval, plus
//! the oracle suite and parameter sweeps.
//!
//! Every stage reads and writes plain files in one output directory and
//! records their SHA-256 in `manifest.json`. A stage refuses inputs whose
//! hash no longer matches the one recorded by the stage that wrote them,
//! unless forced.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    read_trace, write_trace, BackendError, ChatProvider, HttpBackend, HttpOptions, LogitProvider, MockChat,
    Prompt, ReplayBackend, TraceRecord, ORIGINAL,
};
use crate::config::{
    fingerprint_of, BackendKind, ConfigError, EsiConfig, InterventionMethod, Metric, Normalization, Smoothing,
    Weighting,
};
use crate::dataset::{DatasetError, QueryRecord};
use crate::eval::{self, EvalError, EvalReport, QueryTraces, TrialConfig, LN_PE};
use crate::intervene::{build_variant_pool, read_pools, write_pools, CharNoise, InterveneError, PoolSettings, VariantPool};
use crate::oracle::{self, OracleError, SuiteOptions, SuiteOutcome};
use crate::scoring::{ln_pe_score, ScoreRecord, ScoringError};
use crate::synth::{mock_for, MockSettings};

pub const POOLS: &str = "pools.jsonl";
pub const RESPONSES: &str = "responses.jsonl";
pub const SAMPLES: &str = "samples.jsonl";
pub const TRACES: &str = "traces.jsonl";
pub const SCORES: &str = "scores.jsonl";
pub const REPORT_DIR: &str = "report";
pub const VERIFY_DIR: &str = "verify";
pub const SWEEP_DIR: &str = "sweep";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Intervene(#[from] InterveneError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("query {query_id}: {source}")]
    Scoring {
        query_id: String,
        #[source]
        source: ScoringError,
    },
    #[error("stage `{stage}` needs {path}, which does not exist; run the stage that produces it first")]
    MissingInput { stage: String, path: String },
    #[error("{path} changed since it was written (recorded {recorded}, found {actual}); rerun the producing stage or pass --force")]
    StaleInput { path: String, recorded: String, actual: String },
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 for provider failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend(_)
            | PipelineError::Intervene(InterveneError::Backend { .. })
            | PipelineError::Oracle(OracleError::Backend(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Flat run configuration. Field names mirror [`EsiConfig`] and
/// [`TrialConfig`]; `L` and `pool_size` default per intervention method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub intervention_method: InterventionMethod,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<usize>,
    pub k: usize,
    pub metric: Metric,
    pub weighting: Weighting,
    pub soc_min_len: usize,
    pub soc_prob: f64,
    pub smoothing: Smoothing,
    pub normalization: Normalization,
    pub seed: u64,
    pub n_trials: usize,
    /// Longest greedy response requested from the provider.
    pub max_tokens: usize,
    /// Samples per query for the LN-PE baseline; 0 disables it.
    pub ln_pe_samples: usize,
    pub ln_pe_temperature: f64,
    pub max_paraphrase_calls: usize,
    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub replay_traces: Vec<PathBuf>,
    pub workers: usize,
    pub mock_seed: u64,
    pub mock_vocab: usize,
    pub mock_max_len: usize,
    pub mock_sensitivity: f64,
    /// Drop unlabeled queries from reports instead of failing.
    pub permissive_labels: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let esi = EsiConfig::default();
        let mock = MockSettings::default();
        PipelineConfig {
            intervention_method: esi.intervention_method,
            l: None,
            pool_size: None,
            k: esi.k,
            metric: esi.metric,
            weighting: esi.weighting,
            soc_min_len: esi.soc_min_len,
            soc_prob: esi.soc_prob,
            smoothing: esi.smoothing,
            normalization: esi.normalization,
            seed: esi.seed,
            n_trials: TrialConfig::default().n_trials,
            max_tokens: 64,
            ln_pe_samples: 10,
            ln_pe_temperature: 1.0,
            max_paraphrase_calls: 3,
            backend: BackendKind::Mock,
            endpoint: None,
            api_key_env: None,
            replay_traces: Vec::new(),
            workers: 1,
            mock_seed: mock.seed,
            mock_vocab: mock.vocab_size,
            mock_max_len: mock.max_len,
            mock_sensitivity: mock.sensitivity,
            permissive_labels: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn esi(&self) -> EsiConfig {
        let defaults = EsiConfig::for_method(self.intervention_method);
        EsiConfig {
            intervention_method: self.intervention_method,
            l: self.l.unwrap_or(defaults.l),
            pool_size: self.pool_size.unwrap_or(defaults.pool_size),
            k: self.k,
            metric: self.metric,
            weighting: self.weighting,
            soc_min_len: self.soc_min_len,
            soc_prob: self.soc_prob,
            smoothing: self.smoothing,
            normalization: self.normalization,
            seed: self.seed,
        }
    }

    pub fn trials(&self) -> TrialConfig {
        TrialConfig::from_esi(&self.esi(), self.n_trials)
    }

    pub fn mock(&self) -> MockSettings {
        MockSettings {
            seed: self.mock_seed,
            vocab_size: self.mock_vocab,
            max_len: self.mock_max_len,
            sensitivity: self.mock_sensitivity,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.esi().validate()?;
        self.trials().validate()?;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()).into());
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.ln_pe_samples > 0 && !(self.ln_pe_temperature > 0.0) {
            return bad("ln_pe_temperature must be positive");
        }
        if self.mock_vocab < 2 || self.mock_max_len == 0 {
            return bad("mock_vocab must be at least 2 and mock_max_len positive");
        }
        if !(0.0..=1.0).contains(&self.mock_sensitivity) {
            return bad("mock_sensitivity must lie in [0, 1]");
        }
        if self.backend == BackendKind::Http && self.endpoint.is_none() {
            return bad("the http backend needs an endpoint");
        }
        Ok(())
    }

    /// Hash of everything that can change outputs; the worker count cannot.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(&PipelineConfig {
            workers: 0,
            ..self.clone()
        })
    }
}

/// Token-distribution and paraphrase providers for one run.
#[derive(Clone)]
pub struct Backends {
    pub logits: Arc<dyn LogitProvider>,
    pub chat: Option<Arc<dyn ChatProvider>>,
}

/// Builds the providers named by `cfg`. The mock registers every dataset
/// query; the HTTP provider must be able to score supplied continuations.
pub fn connect_backends(cfg: &PipelineConfig, dataset: &[QueryRecord]) -> Result<Backends, PipelineError> {
    match cfg.backend {
        BackendKind::Mock => Ok(Backends {
            logits: Arc::new(mock_for(dataset, cfg.mock())),
            chat: Some(Arc::new(MockChat { per_call: 5 })),
        }),
        BackendKind::Replay => {
            if cfg.replay_traces.is_empty() {
                return Err(ConfigError::Invalid("the replay backend needs at least one trace file".into()).into());
            }
            Ok(Backends {
                logits: Arc::new(ReplayBackend::from_files(&cfg.replay_traces)?),
                chat: None,
            })
        }
        BackendKind::Http => {
            let endpoint = cfg.endpoint.as_deref().expect("validated");
            let api_key = match &cfg.api_key_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    ConfigError::Invalid(format!("environment variable {var} holding the API key is not set"))
                })?),
                None => None,
            };
            let http = Arc::new(HttpBackend::connect(endpoint, api_key, HttpOptions::default())?);
            let caps = http.capabilities();
            if !caps.supports_teacher_forcing {
                return Err(BackendError::Capability(format!(
                    "{endpoint} cannot score supplied continuations; capabilities: {}",
                    serde_json::to_string(&caps).expect("capabilities serialize")
                ))
                .into());
            }
            let chat: Option<Arc<dyn ChatProvider>> = caps.supports_chat.then(|| http.clone() as Arc<dyn ChatProvider>);
            Ok(Backends { logits: http, chat })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Hashes of every file each stage read and wrote.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config_fingerprint: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl PipelineManifest {
    /// Hash recorded for `file` by the stage that wrote it.
    pub fn recorded(&self, file: &str) -> Option<&str> {
        self.stages
            .values()
            .find_map(|s| s.outputs.get(file))
            .map(String::as_str)
    }
}

pub fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    force: bool,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
        Ok(Pipeline { cfg, out, force, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn manifest(&self) -> Result<PipelineManifest, PipelineError> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(PipelineManifest::default());
        }
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))
    }

    /// Hashes the inputs of `stage`, refusing missing files and files that
    /// changed after their producing stage recorded them.
    fn check_inputs(&self, stage: &str, names: &[&str]) -> Result<BTreeMap<String, String>, PipelineError> {
        let manifest = self.manifest()?;
        let mut hashes = BTreeMap::new();
        for name in names {
            let p = self.path(name);
            if !p.exists() {
                return Err(PipelineError::MissingInput {
                    stage: stage.to_string(),
                    path: p.display().to_string(),
                });
            }
            let actual = file_hash(&p)?;
            if let Some(recorded) = manifest.recorded(name) {
                if recorded != actual {
                    if !self.force {
                        return Err(PipelineError::StaleInput {
                            path: p.display().to_string(),
                            recorded: recorded.to_string(),
                            actual,
                        });
                    }
                    log::warn!("{}: hash changed since it was written; continuing because of --force", p.display());
                }
            }
            hashes.insert(name.to_string(), actual);
        }
        Ok(hashes)
    }

    fn record(&self, stage: &str, inputs: BTreeMap<String, String>, outputs: &[&str]) -> Result<(), PipelineError> {
        let mut manifest = self.manifest()?;
        let outputs = outputs
            .iter()
            .map(|name| Ok((name.to_string(), file_hash(&self.path(name))?)))
            .collect::<Result<_, PipelineError>>()?;
        let fingerprint = self.cfg.fingerprint();
        manifest.config_fingerprint = fingerprint.clone();
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                config_fingerprint: fingerprint,
                inputs,
                outputs,
            },
        );
        let p = self.path(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&p, text).map_err(io_err(&p))
    }

    /// Dataset → variant pools.
    pub fn intervene(&self, dataset: &[QueryRecord], chat: Option<&dyn ChatProvider>) -> Result<Vec<VariantPool>, PipelineError> {
        if dataset.is_empty() {
            return Err(PipelineError::Validation("dataset is empty".into()));
        }
        let esi = self.cfg.esi();
        let settings = PoolSettings {
            method: esi.intervention_method,
            pool_size: esi.pool_size,
            noise: CharNoise {
                min_len: esi.soc_min_len,
                prob: esi.soc_prob,
            },
            max_paraphrase_calls: self.cfg.max_paraphrase_calls,
            seed: esi.seed,
        };
        let pools = self.pool.install(|| {
            dataset
                .par_iter()
                .map(|r| build_variant_pool(&r.query_id, &r.parts(), &settings, chat))
                .collect::<Result<Vec<_>, _>>()
        })?;
        write_pools(self.path(POOLS), &pools)?;
        self.record("intervene", BTreeMap::new(), &[POOLS])?;
        Ok(pools)
    }

    fn read_pools(&self) -> Result<Vec<VariantPool>, PipelineError> {
        Ok(read_pools(self.path(POOLS))?)
    }

    /// Pools → greedy traces of the original prompts, plus sampled
    /// responses for LN-PE when the provider can sample.
    pub fn generate(&self, provider: &dyn LogitProvider) -> Result<(), PipelineError> {
        let inputs = self.check_inputs("generate", &[POOLS])?;
        let pools = self.read_pools()?;
        let cfg = &self.cfg;
        let sampling = cfg.ln_pe_samples > 0 && provider.capabilities().supports_sampling;
        if cfg.ln_pe_samples > 0 && !sampling {
            log::warn!("provider cannot sample; LN-PE will not be scored");
        }
        let per_query = self.pool.install(|| {
            pools
                .par_iter()
                .map(|pool| {
                    let prompt = Prompt::original(pool.query_id.clone(), pool.original.clone());
                    let greedy = provider.generate_greedy(&prompt, cfg.max_tokens, cfg.k)?;
                    let samples = if sampling {
                        provider.sample_responses(
                            &prompt,
                            cfg.ln_pe_samples,
                            cfg.ln_pe_temperature,
                            cfg.max_tokens,
                            cfg.k,
                            cfg.seed,
                        )?
                    } else {
                        Vec::new()
                    };
                    Ok((
                        TraceRecord::from_trace(&pool.query_id, &greedy),
                        samples
                            .iter()
                            .map(|s| TraceRecord::from_sample(&pool.query_id, s))
                            .collect::<Vec<_>>(),
                    ))
                })
                .collect::<Result<Vec<_>, BackendError>>()
        })?;
        let (responses, samples): (Vec<_>, Vec<_>) = per_query.into_iter().unzip();
        write_trace(self.path(RESPONSES), &responses)?;
        write_trace(self.path(SAMPLES), &samples.into_iter().flatten().collect::<Vec<_>>())?;
        self.record("generate", inputs, &[RESPONSES, SAMPLES])
    }

    /// Pools + greedy responses → teacher-forced traces of every variant.
    pub fn trace(&self, provider: &dyn LogitProvider) -> Result<(), PipelineError> {
        let inputs = self.check_inputs("trace", &[POOLS, RESPONSES])?;
        provider.capabilities().require_teacher_forcing()?;
        let pools = self.read_pools()?;
        let responses = self.responses_by_query()?;
        let jobs: Vec<(&VariantPool, usize)> = pools
            .iter()
            .flat_map(|p| (0..p.variants.len()).map(move |i| (p, i)))
            .collect();
        let k = self.cfg.k;
        let records = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(pool, i)| {
                    let response = responses.get(&pool.query_id).ok_or_else(|| {
                        PipelineError::Validation(format!("{RESPONSES} has no response for {}", pool.query_id))
                    })?;
                    let v = &pool.variants[i];
                    let prompt = Prompt::variant(pool.query_id.clone(), v.variant_index, v.text.clone());
                    let trace = provider.score_teacher_forced(&prompt, &response.response_tokens, k)?;
                    Ok(TraceRecord::from_trace(&pool.query_id, &trace))
                })
                .collect::<Result<Vec<_>, PipelineError>>()
        })?;
        write_trace(self.path(TRACES), &records)?;
        self.record("trace", inputs, &[TRACES])
    }

    fn responses_by_query(&self) -> Result<HashMap<String, TraceRecord>, PipelineError> {
        Ok(read_trace(self.path(RESPONSES))?
            .into_iter()
            .filter(|r| r.prompt_variant_id == ORIGINAL)
            .map(|r| (r.query_id.clone(), r))
            .collect())
    }

    /// Traces → ESI records per trial and one LN-PE record per query.
    pub fn score(&self) -> Result<Vec<ScoreRecord>, PipelineError> {
        let inputs = self.check_inputs("score", &[POOLS, RESPONSES, SAMPLES, TRACES])?;
        let pools = self.read_pools()?;
        let responses = self.responses_by_query()?;
        let mut variants: HashMap<(String, String), TraceRecord> = read_trace(self.path(TRACES))?
            .into_iter()
            .map(|r| ((r.query_id.clone(), r.prompt_variant_id.clone()), r))
            .collect();
        let esi = self.cfg.esi();
        let queries = pools
            .iter()
            .map(|pool| {
                let qid = &pool.query_id;
                let original = responses
                    .get(qid)
                    .ok_or_else(|| PipelineError::Validation(format!("{RESPONSES} has no response for {qid}")))?
                    .to_trace()?;
                let traces = (0..pool.variants.len())
                    .map(|i| {
                        let vid = Prompt::variant(qid.clone(), i, "").variant_id();
                        variants
                            .remove(&(qid.clone(), vid.clone()))
                            .ok_or_else(|| PipelineError::Validation(format!("{TRACES} has no trace for {qid}/{vid}")))?
                            .to_trace()
                            .map_err(PipelineError::from)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(QueryTraces {
                    query_id: qid.clone(),
                    original,
                    variants: traces,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let trials = self.cfg.trials();
        let mut records = self.pool.install(|| eval::resample_trials(&queries, &trials, &esi))?;

        let mut samples: BTreeMap<String, Vec<TraceRecord>> = BTreeMap::new();
        for r in read_trace(self.path(SAMPLES))? {
            samples.entry(r.query_id.clone()).or_default().push(r);
        }
        let fingerprint = esi.fingerprint();
        for pool in &pools {
            let Some(recs) = samples.get(&pool.query_id) else {
                continue;
            };
            let mut recs: Vec<&TraceRecord> = recs.iter().collect();
            recs.sort_by_key(|r| sample_index(&r.prompt_variant_id));
            let sampled = recs.iter().map(|r| r.to_sample()).collect::<Result<Vec<_>, _>>()?;
            let value = ln_pe_score(&sampled).map_err(|source| PipelineError::Scoring {
                query_id: pool.query_id.clone(),
                source,
            })?;
            records.push(ScoreRecord {
                query_id: pool.query_id.clone(),
                method: LN_PE.to_string(),
                value,
                trial_index: 1,
                config_fingerprint: fingerprint.clone(),
            });
        }
        eval::write_records(self.path(SCORES), &records)?;
        self.record("score", inputs, &[SCORES])?;
        Ok(records)
    }

    /// Score records + dataset labels → AUROC report files.
    pub fn eval(&self, dataset: &[QueryRecord]) -> Result<EvalReport, PipelineError> {
        let inputs = self.check_inputs("eval", &[SCORES])?;
        let records = eval::read_records(self.path(SCORES))?;
        let labels: HashMap<String, bool> = dataset
            .iter()
            .filter_map(|r| r.correct.map(|c| (r.query_id.clone(), c)))
            .collect();
        let report = eval::report(&records, &labels, self.cfg.permissive_labels)?;
        report.write(self.path(REPORT_DIR))?;
        let outputs = ["auroc.csv", "summary.json", "summary.txt"].map(|f| format!("{REPORT_DIR}/{f}"));
        let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
        self.record("eval", inputs, &outputs)?;
        Ok(report)
    }

    /// Runs the oracle suite and writes its table and JSON form.
    pub fn verify(&self, opts: &SuiteOptions) -> Result<SuiteOutcome, PipelineError> {
        let outcome = self.pool.install(|| oracle::run_suite(opts))?;
        let dir = self.path(VERIFY_DIR);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut json = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
        json.push('\n');
        let text = format!(
            "{}\n{}",
            oracle::render_table(&outcome.reports),
            oracle::render_sweeps(&outcome.sweeps)
        );
        for (name, body) in [("oracle.json", json), ("oracle.txt", text)] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))?;
        }
        self.record(
            "verify",
            BTreeMap::new(),
            &[&format!("{VERIFY_DIR}/oracle.json"), &format!("{VERIFY_DIR}/oracle.txt")],
        )?;
        Ok(outcome)
    }

    /// Every stage from intervention to the report.
    pub fn run_all(&self, dataset: &[QueryRecord], backends: &Backends) -> Result<EvalReport, PipelineError> {
        self.intervene(dataset, backends.chat.as_deref())?;
        self.generate(backends.logits.as_ref())?;
        self.trace(backends.logits.as_ref())?;
        self.score()?;
        self.eval(dataset)
    }
}

// Inverse of `sample_id`; unknown ids sort last.
fn sample_index(variant_id: &str) -> usize {
    variant_id
        .strip_prefix('s')
        .and_then(|i| i.parse().ok())
        .unwrap_or(usize::MAX)
}

/// Sweepable configuration fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    K,
    Metric,
    SocProb,
    Method,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "k",
            SweepParam::Metric => "metric",
            SweepParam::SocProb => "p",
            SweepParam::Method => "method",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;

    /// `k=5,20,100`, `metric=hellinger,kl`, `p=0.1,0.3` or `method=soc,typo`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, values) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("sweep axis `{s}` is not NAME=V1,V2,...")))?;
        let param = match name.trim() {
            "k" => SweepParam::K,
            "metric" => SweepParam::Metric,
            "p" | "soc_prob" => SweepParam::SocProb,
            "method" | "intervention_method" => SweepParam::Method,
            other => {
                return Err(ConfigError::UnknownVariant {
                    kind: "sweep axis",
                    value: other.to_string(),
                })
            }
        };
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(ConfigError::Invalid(format!("sweep axis `{name}` has no values")));
        }
        let axis = SweepAxis { param, values };
        for v in &axis.values {
            axis.apply(&PipelineConfig::default(), v)?;
        }
        Ok(axis)
    }
}

impl SweepAxis {
    pub fn apply(&self, base: &PipelineConfig, value: &str) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = base.clone();
        let bad = || ConfigError::Invalid(format!("bad value `{value}` for sweep axis {}", self.param.name()));
        match self.param {
            SweepParam::K => cfg.k = value.parse().map_err(|_| bad())?,
            SweepParam::Metric => cfg.metric = value.parse()?,
            SweepParam::SocProb => cfg.soc_prob = value.parse().map_err(|_| bad())?,
            SweepParam::Method => cfg.intervention_method = value.parse()?,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("param,value,method,mean,std,n_trials,n_queries\n");
        for p in &self.points {
            for (m, r) in &p.report.summary {
                let _ = writeln!(s, "{},{},{m},{},{},{},{}", p.param, p.value, r.mean, r.std, r.n_trials, r.n_queries);
            }
        }
        s
    }

    /// Per axis and method: mean AUROC along the axis, its spread and
    /// whether it moves monotonically in the order given.
    pub fn to_text(&self) -> String {
        let mut by_axis: BTreeMap<&str, BTreeMap<&str, Vec<(&str, f64)>>> = BTreeMap::new();
        for p in &self.points {
            for (m, r) in &p.report.summary {
                by_axis
                    .entry(&p.param)
                    .or_default()
                    .entry(m)
                    .or_default()
                    .push((&p.value, r.mean));
            }
        }
        let mut s = String::new();
        for (axis, methods) in by_axis {
            for (m, series) in methods {
                let means: Vec<f64> = series.iter().map(|x| x.1).collect();
                let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
                let shape = if means.windows(2).all(|w| w[1] >= w[0]) {
                    "non-decreasing"
                } else if means.windows(2).all(|w| w[1] <= w[0]) {
                    "non-increasing"
                } else {
                    "not monotone"
                };
                let cells: Vec<String> = series.iter().map(|(v, a)| format!("{axis}={v}: {a:.4}")).collect();
                let _ = writeln!(s, "{m}  {}  spread {spread:.4} ({shape})", cells.join("  "));
            }
        }
        s
    }
}

/// Runs the full pipeline once per value of each axis, one axis at a time,
/// each point in `out/sweep/<param>=<value>/`.
pub fn sweep(
    base: &PipelineConfig,
    out: &Path,
    force: bool,
    axes: &[SweepAxis],
    dataset: &[QueryRecord],
    connect: &dyn Fn(&PipelineConfig) -> Result<Backends, PipelineError>,
) -> Result<SweepReport, PipelineError> {
    let mut report = SweepReport::default();
    for axis in axes {
        for value in &axis.values {
            let cfg = axis.apply(base, value)?;
            let dir = out.join(SWEEP_DIR).join(format!("{}={value}", axis.param.name()));
            let backends = connect(&cfg)?;
            let point = Pipeline::new(cfg, dir, force)?.run_all(dataset, &backends)?;
            report.points.push(SweepPoint {
                param: axis.param.name().to_string(),
                value: value.clone(),
                report: point,
            });
        }
    }
    let dir = out.join(SWEEP_DIR);
    for (name, body) in [("summary.csv", report.to_csv()), ("summary.txt", report.to_text())] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))?;
    }
    Ok(report)
}
