//! `mcq-probe` command line: `probe` fills the cache, `analyze` turns cached
//! probes into reports without touching any backend, `synth` writes a
//! synthetic dataset.
//!
//! Every run flag can also come from a TOML file given with `--config`,
//! using the flag name as the key (`label-style = "A)"`). Flags win.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::analysis::{
    phrasing_comparison, report_dir, single_phrasing_reports, write_ledger, write_profiles,
    write_report, AnalysisError,
};
use crate::backend::{
    run_probe, BackendIdentity, FirstTokenBackend, HttpBackend, MockBackend, MockModelSpec,
    ProbeCache, ProbeOptions, ProbeSummary, RetryPolicy, API_KEY_ENV, MIN_TOP_K,
};
use crate::dataset::{load_dataset, synthesize_dataset, write_dataset, Dataset, DatasetFormat};
use crate::prompting::{LabelStyle, Phrasing};
use crate::uncertainty::{
    profile_dataset, ProfileConfig, VariantSet, DEFAULT_CONFORM_FLOOR, NO_PROBE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

/// Question-type mix of the reference exam: fill-the-gap, fill-two-gaps,
/// wh-question, sentence completion.
pub const DEFAULT_MIX: [f64; 4] = [67.0 / 451.0, 14.0 / 451.0, 227.0 / 451.0, 143.0 / 451.0];

#[derive(Debug, Parser)]
#[command(
    name = "mcq-probe",
    version,
    about = "Probe model uncertainty on three-choice MCQs and compare it with student answers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query the backend for every uncached (question, phrasing) pair.
    Probe(RunArgs),
    /// Build all reports from the cache. Never contacts a backend.
    Analyze(RunArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset file (.jsonl or .csv).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Completion endpoint URL (http backend).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Instruction phrasings to use, e.g. `--phrasing 1,2` [default: 1,2].
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub phrasing: Vec<Phrasing>,
    /// Choice label style: A) | A. | (A) [default: A)].
    #[arg(long)]
    pub label_style: Option<String>,
    /// Letter token forms counted as an answer, comma separated
    /// [default: upper,space-upper,lower,space-lower].
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Probe cache [default: <out>/cache.jsonl].
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Significance level [default: 0.05].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Mock backend seed (required for the mock).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Analyze whatever is cached instead of failing on missing probes.
    #[arg(long)]
    #[serde(default)]
    pub allow_partial: bool,
    /// Mock positional bias on labels A, B, C [default: 1,1,1].
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub mock_bias: Vec<f64>,
    /// Mock log-normal noise scale [default: 0].
    #[arg(long)]
    pub mock_noise: Option<f64>,
    /// Failed probes are appended here [default: <out>/probe_errors.jsonl].
    #[arg(long)]
    pub error_log: Option<PathBuf>,
    /// Top logprobs requested per query [default: 10].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// First retry delay in milliseconds; doubles per retry [default: 1000].
    #[arg(long)]
    pub retry_base_ms: Option<u64>,
    /// Per-request timeout in seconds [default: 60].
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Minimum averaged letter mass for a probe to count [default: 0.05].
    #[arg(long)]
    pub conform_floor: Option<f64>,
}

impl RunArgs {
    /// Fills unset fields from `other`.
    fn or(self, other: RunArgs) -> RunArgs {
        fn pick_vec<T>(a: Vec<T>, b: Vec<T>) -> Vec<T> {
            if a.is_empty() {
                b
            } else {
                a
            }
        }
        RunArgs {
            config: self.config,
            dataset: self.dataset.or(other.dataset),
            backend: self.backend.or(other.backend),
            endpoint: self.endpoint.or(other.endpoint),
            model: self.model.or(other.model),
            phrasing: pick_vec(self.phrasing, other.phrasing),
            label_style: self.label_style.or(other.label_style),
            variants: self.variants.or(other.variants),
            concurrency: self.concurrency.or(other.concurrency),
            cache: self.cache.or(other.cache),
            out: self.out.or(other.out),
            alpha: self.alpha.or(other.alpha),
            seed: self.seed.or(other.seed),
            allow_partial: self.allow_partial || other.allow_partial,
            mock_bias: pick_vec(self.mock_bias, other.mock_bias),
            mock_noise: self.mock_noise.or(other.mock_noise),
            error_log: self.error_log.or(other.error_log),
            top_k: self.top_k.or(other.top_k),
            retry_base_ms: self.retry_base_ms.or(other.retry_base_ms),
            timeout_secs: self.timeout_secs.or(other.timeout_secs),
            conform_floor: self.conform_floor.or(other.conform_floor),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Http {
        endpoint: String,
        model: String,
        retry: RetryPolicy,
        timeout: Duration,
    },
    Mock {
        seed: u64,
        bias: [f64; 3],
        noise: f64,
    },
}

/// Fully resolved settings for `probe` and `analyze`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub backend: BackendConfig,
    pub phrasings: Vec<Phrasing>,
    pub label_style: LabelStyle,
    pub variants: VariantSet,
    pub concurrency: usize,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub alpha: f64,
    pub allow_partial: bool,
    pub error_log: PathBuf,
    pub top_k: usize,
    pub conform_floor: f64,
}

impl RunConfig {
    /// Merges flags over the config file (if any) and validates.
    pub fn resolve(args: RunArgs) -> Result<RunConfig, String> {
        let args = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                let file: RunArgs =
                    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                args.or(file)
            }
            None => args,
        };

        let dataset = args.dataset.ok_or("--dataset is required")?;
        let out = args.out.unwrap_or_else(|| PathBuf::from("out"));
        let label_style = match args.label_style {
            Some(s) => s.parse()?,
            None => LabelStyle::default(),
        };
        let variants = match args.variants {
            Some(s) => s.parse()?,
            None => VariantSet::default(),
        };
        let mut phrasings = if args.phrasing.is_empty() {
            Phrasing::ALL.to_vec()
        } else {
            args.phrasing
        };
        phrasings.sort();
        phrasings.dedup();

        let backend = match args.backend.ok_or("--backend is required (http or mock)")? {
            BackendKind::Http => BackendConfig::Http {
                endpoint: args.endpoint.ok_or("the http backend needs --endpoint")?,
                model: args.model.ok_or("the http backend needs --model")?,
                retry: RetryPolicy {
                    base_delay: Duration::from_millis(args.retry_base_ms.unwrap_or(1000)),
                    ..RetryPolicy::default()
                },
                timeout: Duration::from_secs(args.timeout_secs.unwrap_or(60)),
            },
            BackendKind::Mock => {
                let bias = match args.mock_bias.as_slice() {
                    [] => [1.0; 3],
                    &[a, b, c] => [a, b, c],
                    other => {
                        return Err(format!("--mock-bias needs 3 values, got {}", other.len()))
                    }
                };
                BackendConfig::Mock {
                    seed: args.seed.ok_or("the mock backend needs --seed")?,
                    bias,
                    noise: args.mock_noise.unwrap_or(0.0),
                }
            }
        };

        let alpha = args.alpha.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(format!("--alpha must lie in (0, 1), got {alpha}"));
        }
        let top_k = args.top_k.unwrap_or(10);
        if top_k < MIN_TOP_K {
            return Err(format!("--top-k must be at least {MIN_TOP_K}, got {top_k}"));
        }
        let concurrency = args.concurrency.unwrap_or(4);
        if concurrency == 0 {
            return Err("--concurrency must be at least 1".into());
        }
        let conform_floor = args.conform_floor.unwrap_or(DEFAULT_CONFORM_FLOOR);
        if !(0.0..=1.0).contains(&conform_floor) {
            return Err(format!(
                "--conform-floor must lie in [0, 1], got {conform_floor}"
            ));
        }
        Ok(RunConfig {
            dataset,
            backend,
            phrasings,
            label_style,
            variants,
            concurrency,
            cache: args.cache.unwrap_or_else(|| out.join("cache.jsonl")),
            error_log: args
                .error_log
                .unwrap_or_else(|| out.join("probe_errors.jsonl")),
            out,
            alpha,
            allow_partial: args.allow_partial,
            top_k,
            conform_floor,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Number of questions.
    #[arg(long, short = 'n', default_value_t = 451)]
    pub n: usize,
    /// Question-type fractions for types 1-4, comma separated
    /// [default: 67/451, 14/451, 227/451, 143/451].
    #[arg(long, value_delimiter = ',')]
    pub mix: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; the format follows the extension (.jsonl or .csv).
    #[arg(long)]
    pub out: PathBuf,
}

fn load(path: &Path) -> Result<Dataset, String> {
    load_dataset(path, DatasetFormat::from_path(path)).map_err(|e| e.to_string())
}

/// The mock's latents are the dataset's student rates.
fn build_backend(cfg: &RunConfig, ds: &Dataset) -> Result<Box<dyn FirstTokenBackend>, String> {
    match &cfg.backend {
        BackendConfig::Http {
            endpoint,
            model,
            retry,
            timeout,
        } => {
            let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
            let b = HttpBackend::new(
                endpoint.clone(),
                model.clone(),
                cfg.label_style,
                key,
                *retry,
                *timeout,
            )
            .map_err(|e| e.to_string())?;
            Ok(Box::new(b))
        }
        BackendConfig::Mock { seed, bias, noise } => {
            let spec = MockModelSpec::from_student_rates(ds, *bias, *noise, *seed)
                .map_err(|e| e.to_string())?;
            Ok(Box::new(
                MockBackend::new(spec, cfg.label_style).map_err(|e| e.to_string())?,
            ))
        }
    }
}

/// Identity the cache is keyed by, derived without building a client.
pub fn backend_identity(cfg: &RunConfig, ds: &Dataset) -> Result<BackendIdentity, String> {
    match &cfg.backend {
        BackendConfig::Http {
            endpoint, model, ..
        } => Ok(BackendIdentity {
            model: model.clone(),
            endpoint: endpoint.clone(),
            label_style: cfg.label_style,
        }),
        BackendConfig::Mock { .. } => Ok(build_backend(cfg, ds)?.identity().clone()),
    }
}

/// Runs the probe stage for `cfg`; see [`run_probe`].
pub fn probe(
    cfg: &RunConfig,
    progress: impl FnMut(usize, usize, usize),
) -> Result<ProbeSummary, String> {
    let ds = load(&cfg.dataset)?;
    let backend = build_backend(cfg, &ds)?;
    let mut cache = ProbeCache::open(&cfg.cache).map_err(|e| e.to_string())?;
    let opts = ProbeOptions {
        phrasings: cfg.phrasings.clone(),
        concurrency: cfg.concurrency,
        top_k: cfg.top_k,
    };
    run_probe(
        &ds,
        backend.as_ref(),
        &mut cache,
        Some(&cfg.error_log),
        &opts,
        progress,
    )
    .map_err(|e| e.to_string())
}

pub fn cmd_probe(cfg: &RunConfig) -> i32 {
    let mut stderr = std::io::stderr();
    let summary = probe(cfg, |done, total, failed| {
        let _ = write!(stderr, "\rprobed {done}/{total} ({failed} failed)");
        if done == total {
            let _ = writeln!(stderr);
        }
    });
    let summary = match summary {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    println!(
        "{} new probes ({} already cached, {} failed)",
        summary.written,
        summary.skipped,
        summary.failures.len()
    );
    if summary.is_complete() {
        EXIT_OK
    } else {
        eprintln!(
            "{} probes failed; see {}",
            summary.failures.len(),
            cfg.error_log.display()
        );
        EXIT_PARTIAL
    }
}

pub fn cmd_analyze(cfg: &RunConfig) -> i32 {
    match analyze(cfg) {
        Ok(dirs) => {
            for d in dirs {
                println!("wrote {}", d.display());
            }
            EXIT_OK
        }
        Err(e) => fail(&e),
    }
}

/// Writes every report the cache supports and returns the directories used.
pub fn analyze(cfg: &RunConfig) -> Result<Vec<PathBuf>, String> {
    let ds = load(&cfg.dataset)?;
    if !cfg.cache.exists() {
        return Err(format!(
            "{}: cache not found; run `probe` first",
            cfg.cache.display()
        ));
    }
    let cache = ProbeCache::open(&cfg.cache).map_err(|e| e.to_string())?;
    let identity = backend_identity(cfg, &ds)?;
    let profile_cfg = ProfileConfig {
        variants: cfg.variants.clone(),
        conform_floor: cfg.conform_floor,
    };

    let sets: Vec<_> = cfg
        .phrasings
        .iter()
        .map(|&ph| profile_dataset::<f64>(&ds, &cache, &identity, ph, &profile_cfg))
        .collect();
    for set in &sets {
        let missing: Vec<&str> = set
            .excluded
            .iter()
            .filter(|e| e.reason == NO_PROBE)
            .map(|e| e.question_id.as_str())
            .collect();
        if missing.is_empty() {
            continue;
        }
        if !cfg.allow_partial {
            return Err(format!(
                "{} questions have no cached probe for phrasing {} (use --allow-partial to skip them): {}",
                missing.len(),
                set.phrasing,
                missing.join(", ")
            ));
        }
        eprintln!(
            "warning: phrasing {}: {} of {} questions not probed; listed in ledger.csv",
            set.phrasing,
            missing.len(),
            ds.len()
        );
    }

    let io = |e: AnalysisError| e.to_string();
    let mut dirs = Vec::new();
    for set in &sets {
        let dir = report_dir(&cfg.out, &identity, &set.phrasing.to_string());
        let reports = single_phrasing_reports(set, &ds, cfg.alpha);
        for r in &reports {
            write_report(r, &dir).map_err(io)?;
        }
        write_ledger(&reports, &dir).map_err(io)?;
        write_profiles(set, &dir).map_err(io)?;
        dirs.push(dir);
    }
    if let [first, second] = sets.as_slice() {
        match phrasing_comparison(first, second, &ds, cfg.alpha) {
            Ok(report) => {
                let dir = report_dir(&cfg.out, &identity, &report.phrasing);
                write_report(&report, &dir).map_err(io)?;
                write_ledger(std::slice::from_ref(&report), &dir).map_err(io)?;
                dirs.push(dir);
            }
            Err(e @ AnalysisError::MismatchedCoverage { .. }) => {
                eprintln!("warning: skipping phrasing comparison: {e}");
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(dirs)
}

pub fn cmd_synth(args: &SynthArgs) -> i32 {
    let mix = match args.mix.as_slice() {
        [] => DEFAULT_MIX,
        &[a, b, c, d] => [a, b, c, d],
        other => return fail(&format!("--mix needs 4 fractions, got {}", other.len())),
    };
    let format = DatasetFormat::from_path(&args.out);
    let ds = match synthesize_dataset(args.n, mix, args.seed) {
        Ok(ds) => ds,
        Err(e) => return fail(&e.to_string()),
    };
    if let Err(e) = write_dataset(&ds, &args.out, format) {
        return fail(&e.to_string());
    }
    println!("wrote {} questions to {}", ds.len(), args.out.display());
    EXIT_OK
}

fn fail(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    EXIT_ERROR
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Probe(args) => match RunConfig::resolve(args) {
            Ok(cfg) => cmd_probe(&cfg),
            Err(e) => fail(&e),
        },
        Command::Analyze(args) => match RunConfig::resolve(args) {
            Ok(cfg) => cmd_analyze(&cfg),
            Err(e) => fail(&e),
        },
        Command::Synth(args) => cmd_synth(&args),
    }
}
