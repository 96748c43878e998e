use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use esi_core::backend::{StubOptions, StubServer};
use esi_core::config::{BackendKind, InterventionMethod, Metric};
use esi_core::dataset::{load_dataset, write_dataset, DatasetFormat, QueryRecord};
use esi_core::oracle::{render_sweeps, render_table, SuiteOptions};
use esi_core::pipeline::{connect_backends, sweep, Pipeline, PipelineConfig, PipelineError, SweepAxis};
use esi_core::synth::{bundled_dataset, mock_for};

/// Prompt-intervention uncertainty scores for language-model answers.
#[derive(Parser, Debug)]
#[command(name = "esi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args, Debug, Clone)]
struct Opts {
    /// Flat TOML file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// QA JSONL dataset; defaults to the bundled synthetic set.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long, global = true)]
    api_key_env: Option<String>,
    /// Trace files served by the replay backend.
    #[arg(long = "traces", global = true)]
    traces: Vec<PathBuf>,
    #[arg(long, global = true)]
    method: Option<InterventionMethod>,
    #[arg(long, global = true)]
    metric: Option<Metric>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long = "L", global = true)]
    l: Option<usize>,
    #[arg(long, global = true)]
    pool_size: Option<usize>,
    /// Per-word probability of a character-level intervention.
    #[arg(long, global = true)]
    soc_prob: Option<f64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "esi-out")]
    out: PathBuf,
    /// Run even when inputs changed since they were written.
    #[arg(long, global = true)]
    force: bool,
    /// Leave unlabeled queries out of reports instead of failing.
    #[arg(long, global = true)]
    permissive: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dataset → variant pools.
    Intervene,
    /// Pools → greedy traces of the original prompts (and LN-PE samples).
    Generate,
    /// Pools + responses → teacher-forced variant traces.
    Trace,
    /// Traces → score records.
    Score,
    /// Score records + labels → AUROC report.
    Eval,
    /// Exact oracle checks on seeded mock models.
    Verify,
    /// Full pipeline once per value of each axis, e.g. `--axis k=5,20,100`.
    Sweep {
        #[arg(long = "axis", required = true)]
        axes: Vec<SweepAxis>,
    },
    /// Every stage from intervene to eval.
    Run,
    /// Write the bundled synthetic dataset.
    Synth {
        #[arg(long, default_value = "synthetic_qa.jsonl")]
        path: PathBuf,
    },
    /// Serve the mock model over the HTTP contract until killed.
    StubServer {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Refuse continuation scoring.
        #[arg(long)]
        no_teacher_forcing: bool,
    },
}

fn config(opts: &Opts) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &opts.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),+) => {
            $(if let Some(v) = opts.$flag.clone() { cfg.$field = v; })+
        };
    }
    set!(backend => backend, method => intervention_method, metric => metric, k => k, soc_prob => soc_prob,
         trials => n_trials, seed => seed, workers => workers);
    if opts.endpoint.is_some() {
        cfg.endpoint = opts.endpoint.clone();
    }
    if opts.api_key_env.is_some() {
        cfg.api_key_env = opts.api_key_env.clone();
    }
    if opts.l.is_some() {
        cfg.l = opts.l;
    }
    if opts.pool_size.is_some() {
        cfg.pool_size = opts.pool_size;
    }
    if !opts.traces.is_empty() {
        cfg.replay_traces = opts.traces.clone();
    }
    cfg.permissive_labels |= opts.permissive;
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(opts: &Opts) -> Result<Vec<QueryRecord>, PipelineError> {
    match &opts.dataset {
        Some(p) => Ok(load_dataset(p, DatasetFormat::QaJsonl)?),
        None => {
            log::info!("no --dataset given; using the bundled synthetic dataset");
            Ok(bundled_dataset())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    let opts = &cli.opts;
    match cli.command {
        Command::Synth { path } => {
            write_dataset(&path, &bundled_dataset()).map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
            println!("wrote {}", path.display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::StubServer { addr, no_teacher_forcing } => {
            let cfg = config(opts)?;
            let lm = mock_for(&dataset(opts)?, cfg.mock());
            let stub_opts = StubOptions {
                teacher_forcing: !no_teacher_forcing,
                chat: Some(Arc::new(esi_core::backend::MockChat { per_call: 5 })),
                ..StubOptions::new()
            };
            let server = StubServer::start(&addr, Arc::new(lm), stub_opts).map_err(|source| PipelineError::Io {
                path: addr.clone(),
                source,
            })?;
            println!("serving mock model at {}", server.url());
            server.wait();
            return Ok(ExitCode::SUCCESS);
        }
        _ => {}
    }

    let cfg = config(opts)?;
    let data = dataset(opts)?;
    let connect = |cfg: &PipelineConfig| connect_backends(cfg, &data);
    let pipeline = || Pipeline::new(cfg.clone(), &opts.out, opts.force);
    match cli.command {
        Command::Intervene => {
            let chat = if cfg.intervention_method == InterventionMethod::Paraphrase {
                connect(&cfg)?.chat
            } else {
                None
            };
            let pools = pipeline()?.intervene(&data, chat.as_deref())?;
            println!("wrote {} variant pools", pools.len());
        }
        Command::Generate => pipeline()?.generate(connect(&cfg)?.logits.as_ref())?,
        Command::Trace => pipeline()?.trace(connect(&cfg)?.logits.as_ref())?,
        Command::Score => {
            let records = pipeline()?.score()?;
            println!("wrote {} score records", records.len());
        }
        Command::Eval => print!("{}", pipeline()?.eval(&data)?.to_text()),
        Command::Run => {
            let backends = connect(&cfg)?;
            print!("{}", pipeline()?.run_all(&data, &backends)?.to_text());
        }
        Command::Verify => {
            let outcome = pipeline()?.verify(&SuiteOptions {
                base_seed: cfg.seed,
                ..SuiteOptions::default()
            })?;
            print!("{}\n{}", render_table(&outcome.reports), render_sweeps(&outcome.sweeps));
            if !outcome.all_passed() {
                eprintln!("error: oracle checks failed");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Sweep { axes } => {
            let report = sweep(&cfg, &opts.out, opts.force, &axes, &data, &connect)?;
            print!("{}", report.to_text());
        }
        Command::Synth { .. } | Command::StubServer { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
