//! Run orchestration: prompts, completions, parsing, judging, records.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml      config snapshot (uninterpolated)
//! manifest.jsonl   canonical task manifest
//! cache/           completion cache shared by every sub-run
//! records.jsonl    one row per judged sample
//! reports/         tables generated from the records
//! sweep/K{k}_M{m}/ and ablate/<mask>/   sub-runs with their own records and reports
//! ```

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use m2wf_core::ablation::StageMask;
use m2wf_core::noise::NoiseSpec;
use m2wf_core::retrieval::{index_pool, retrieve, ExamplePool};
use m2wf_core::strategy::{
    build_continuation_prompt, build_prompt, build_stage_prompt, extract_code, parse_stage_artifacts, parse_trace,
    M2WFParams, ParseFailure, PromptBundle, Stage, StrategyKind,
};
use m2wf_core::task::{BenchmarkManifest, Task};
use m2wf_core::usage::TokenUsage;
use rayon::prelude::*;

use crate::config::{BenchmarkKind, LoadedConfig, ProviderKind, StrategySpec};
use crate::corpus;
use crate::error::{HarnessError, Result};
use crate::llmclient::{
    Client, ClientError, CompletionRecord, DiskCache, MockProvider, OpenAiProvider, Provider, SamplingParams,
};
use crate::record::{RecordLog, RunRecord, Timings, TraceSummary, RECORD_SCHEMA_VERSION};
use crate::sandbox::{Sandbox, SandboxOptions, Verdict};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORTS_DIR: &str = "reports";
pub const CACHE_DIR: &str = "cache";

/// Seed stride between samples of the same task in the stage ablation.
const SAMPLE_SEED_STRIDE: u64 = 1_000_003;

/// One prompting method applied to every task.
#[derive(Debug, Clone)]
pub enum Method {
    Single(StrategySpec),
    /// Two-step workflow with the artifacts of `mask` corrupted in between.
    Masked { label: String, params: M2WFParams, mask: StageMask, noise: NoiseSpec },
}

impl Method {
    pub fn label(&self) -> &str {
        match self {
            Method::Single(spec) => &spec.label,
            Method::Masked { label, .. } => label,
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            Method::Single(spec) => spec.kind,
            Method::Masked { .. } => StrategyKind::M2WF,
        }
    }
}

/// What a run did, for the CLI summary line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub rows_written: usize,
    pub rows_skipped: usize,
    /// Completions fetched from the provider rather than the cache.
    pub fresh_completions: usize,
    pub cached_completions: usize,
}

/// Prepares `run_dir`: checks or writes the config snapshot and writes the
/// canonical manifest.
pub fn prepare_run_dir(run_dir: &Path, loaded: &LoadedConfig, manifest: &BenchmarkManifest) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| HarnessError::io(run_dir, e))?;
    let snapshot = run_dir.join(CONFIG_SNAPSHOT);
    match std::fs::read_to_string(&snapshot) {
        Ok(existing) if existing != loaded.raw => {
            return Err(HarnessError::Config(format!(
                "{} holds a different configuration; use a new run directory",
                run_dir.display()
            )))
        }
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            std::fs::write(&snapshot, &loaded.raw).map_err(|e| HarnessError::io(&snapshot, e))?
        }
        Err(e) => return Err(HarnessError::io(&snapshot, e)),
    }
    corpus::write_canonical(manifest, &run_dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn load_manifest(loaded: &LoadedConfig) -> Result<BenchmarkManifest> {
    let c = &loaded.config;
    let path = loaded.resolve(&c.benchmark.path);
    let manifest = match c.benchmark.kind {
        BenchmarkKind::Humaneval => corpus::load_humaneval(&path)?,
        BenchmarkKind::Studenteval => corpus::load_studenteval(&path, &c.benchmark.columns)?,
        BenchmarkKind::Codeforces => {
            let level = c.benchmark.level.as_deref().ok_or_else(|| HarnessError::Config("benchmark.level is required".into()))?;
            corpus::load_codeforces(&path, level)?
        }
        BenchmarkKind::MultiplE => corpus::load_multipl_e(&path, c.language(), &c.runners())?,
        BenchmarkKind::Canonical => corpus::read_canonical(&path)?,
    };
    match c.benchmark.limit {
        Some(limit) if limit < manifest.len() => {
            let tasks = manifest.tasks()[..limit].to_vec();
            Ok(BenchmarkManifest::new(manifest.name(), tasks, manifest.metadata().clone())?)
        }
        _ => Ok(manifest),
    }
}

/// The few-shot example pool, when configured.
pub fn load_pool(loaded: &LoadedConfig) -> Result<Option<ExamplePool>> {
    let Some(section) = &loaded.config.retrieval else { return Ok(None) };
    let path = loaded.resolve(&section.path);
    let mut tasks = Vec::new();
    for level in &section.levels {
        tasks.extend(corpus::load_codeforces(&path, level)?.tasks().iter().cloned());
    }
    let (pool, _skipped) = index_pool(tasks.iter())?;
    Ok(Some(pool))
}

pub fn build_client(loaded: &LoadedConfig, cache_dir: &Path) -> Result<Client> {
    let c = &loaded.config;
    let model = c.model_config();
    let provider: Arc<dyn Provider> = match c.model.provider {
        ProviderKind::Mock => {
            let path = loaded.resolve(c.model.transcript.as_deref().unwrap_or(Path::new("")));
            Arc::new(MockProvider::from_path(&path).map_err(HarnessError::Config)?)
        }
        ProviderKind::Openai => {
            let key = model.api_key().map_err(|e| HarnessError::Config(e.to_string()))?;
            Arc::new(OpenAiProvider::new(&model.endpoint, key, model.request_timeout, model.server_side_n))
        }
    };
    let mut client = Client::new(model, provider).with_cache(DiskCache::open(cache_dir)?);
    if let Some(phrases) = &c.model.refusal_phrases {
        client = client.with_refusal_phrases(phrases.clone());
    }
    Ok(client)
}

pub fn build_sandbox(loaded: &LoadedConfig, run_dir: &Path, manifest: &BenchmarkManifest) -> Result<Sandbox> {
    let c = &loaded.config;
    let options = SandboxOptions {
        limits: c.limits(),
        runners: c.runners(),
        compare: c.sandbox.compare,
        wrapper: c.sandbox.wrapper.clone(),
    };
    let label = run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let sandbox = Sandbox::new(&label, options)?;
    let mut languages: Vec<&str> = manifest.tasks().iter().map(|t| t.language.as_str()).collect();
    languages.sort_unstable();
    languages.dedup();
    for language in languages {
        sandbox.check_runner(language).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    Ok(sandbox)
}

/// Everything needed to turn a task into judged rows.
pub struct Pipeline<'a> {
    pub client: &'a Client,
    pub sandbox: &'a Sandbox,
    pub sampling: SamplingParams,
    pub pool: Option<&'a ExamplePool>,
}

/// Failures that leave a sample without a row, so a later resume retries it.
enum SampleError {
    Client(ClientError),
    Other(String),
}

impl From<ClientError> for SampleError {
    fn from(e: ClientError) -> Self {
        SampleError::Client(e)
    }
}

impl From<m2wf_core::Error> for SampleError {
    fn from(e: m2wf_core::Error) -> Self {
        SampleError::Other(e.to_string())
    }
}

impl std::fmt::Display for SampleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleError::Client(e) => write!(f, "{e}"),
            SampleError::Other(e) => f.write_str(e),
        }
    }
}

struct Judged {
    verdict: Verdict,
    judge_ms: u64,
}

impl Pipeline<'_> {
    fn judge(&self, task: &Task, sample_index: u32, candidate: Result<&str, &ParseFailure>) -> Result<Judged, SampleError> {
        let start = Instant::now();
        let outcome = self
            .sandbox
            .judge(task, sample_index, candidate)
            .map_err(|e| SampleError::Other(format!("sandbox: {e}")))?;
        Ok(Judged { verdict: outcome.verdict, judge_ms: start.elapsed().as_millis() as u64 })
    }

    fn base_record(&self, task: &Task, method: &Method, sample_index: u32, bundle: &PromptBundle) -> RunRecord {
        RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            task_id: task.id.clone(),
            strategy: method.label().to_string(),
            kind: method.kind(),
            model: self.client.config().model_name.clone(),
            sample_index,
            fingerprint: bundle.params_fingerprint.clone(),
            completion_refs: Vec::new(),
            trace: TraceSummary::default(),
            verdict: Verdict::ParseFailure,
            subset: task.subset(),
            timings: Timings::default(),
            usage: TokenUsage::default(),
        }
    }

    fn single(
        &self,
        task: &Task,
        method: &Method,
        spec: &StrategySpec,
        indices: &[u32],
        summary: &Mutex<RunSummary>,
    ) -> Result<Vec<RunRecord>, SampleError> {
        let shots = match spec.shots {
            Some(count) => {
                let pool = self.pool.ok_or_else(|| SampleError::Other("few-shot prompting needs an example pool".into()))?;
                Some(retrieve(pool, &task.prompt, count)?)
            }
            None => None,
        };
        let bundle = build_prompt(spec.kind, task, &spec.params, shots.as_deref())?;
        let completions = self.client.complete_indices(&bundle, &self.sampling, indices)?;
        count_completions(summary, &completions);
        let mut rows = Vec::with_capacity(completions.len());
        for completion in completions {
            let parsed = parse_trace(spec.kind, &completion.text, &spec.params, &task.language);
            let judged = self.judge(task, completion.sample_index, parsed.as_ref().map(|t| t.final_code.as_str()))?;
            let mut row = self.base_record(task, method, completion.sample_index, &bundle);
            row.trace = match &parsed {
                Ok(trace) => TraceSummary {
                    recalled: trace.recalled.len(),
                    selected: trace.selected_indices.clone(),
                    warnings: trace.parse_warnings.clone(),
                    refusal: completion.refusal,
                    parse_failure: None,
                },
                Err(failure) => failure_summary(failure, completion.refusal),
            };
            row.completion_refs = vec![completion.cache_key.clone()];
            row.verdict = judged.verdict;
            row.timings = Timings { latency_ms: completion.latency_ms, judge_ms: judged.judge_ms };
            row.usage = completion.usage;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Two-step workflow for one sample: stages up to the split point, then
    /// corruption of the masked artifacts, then the remaining stages.
    #[allow(clippy::too_many_arguments)]
    fn masked(
        &self,
        task: &Task,
        method: &Method,
        params: &M2WFParams,
        mask: StageMask,
        noise: NoiseSpec,
        sample_index: u32,
        summary: &Mutex<RunSummary>,
    ) -> Result<RunRecord, SampleError> {
        let split = mask.split_point();
        let first_bundle = build_stage_prompt(task, params, split)?;
        let first = take_one(self.client.complete_indices(&first_bundle, &self.sampling, &[sample_index])?)?;
        count_completions(summary, std::slice::from_ref(&first));
        let mut row = self.base_record(task, method, sample_index, &first_bundle);
        row.completion_refs.push(first.cache_key.clone());
        row.usage = first.usage;
        row.timings.latency_ms = first.latency_ms;

        let mut artifacts = match parse_stage_artifacts(&first.text, split) {
            Ok(artifacts) => artifacts,
            Err(failure) => {
                let failure = ParseFailure { reason: format!("step 1: {}", failure.reason), ..failure };
                row.trace = failure_summary(&failure, first.refusal);
                row.verdict = self.judge(task, sample_index, Err(&failure))?.verdict;
                return Ok(row);
            }
        };
        let seed = noise.seed.wrapping_add(u64::from(sample_index).wrapping_mul(SAMPLE_SEED_STRIDE));
        mask.corrupt(&mut artifacts, &noise.with_seed(seed))?;
        let next = Stage::ALL.into_iter().find(|s| *s > split).unwrap_or(Stage::Guidance);
        let second_bundle = build_continuation_prompt(task, params, &artifacts, next)?;
        let second = take_one(self.client.complete_indices(&second_bundle, &self.sampling, &[sample_index])?)?;
        count_completions(summary, std::slice::from_ref(&second));
        row.completion_refs.push(second.cache_key.clone());
        row.usage = add_usage(row.usage, second.usage);
        row.timings.latency_ms += second.latency_ms;

        let code = extract_code(&second.text, &task.language);
        let judged = self.judge(task, sample_index, code.as_ref().copied())?;
        row.trace = match code {
            Ok(_) => TraceSummary {
                recalled: artifacts.recalled.len(),
                refusal: first.refusal || second.refusal,
                ..TraceSummary::default()
            },
            Err(failure) => failure_summary(&failure, second.refusal),
        };
        row.verdict = judged.verdict;
        row.timings.judge_ms = judged.judge_ms;
        Ok(row)
    }

    fn task_rows(
        &self,
        task: &Task,
        method: &Method,
        log: &RecordLog,
        summary: &Mutex<RunSummary>,
    ) -> Result<(), SampleError> {
        let pending: Vec<u32> = (0..self.sampling.n).filter(|i| !log.is_done(&task.id, method.label(), *i)).collect();
        summary.lock().expect("summary lock").rows_skipped += (self.sampling.n as usize) - pending.len();
        if pending.is_empty() {
            return Ok(());
        }
        let write = |row: &RunRecord| -> Result<(), SampleError> {
            log.append(row).map_err(|e| SampleError::Other(e.to_string()))?;
            summary.lock().expect("summary lock").rows_written += 1;
            Ok(())
        };
        match method {
            Method::Single(spec) => {
                for row in self.single(task, method, spec, &pending, summary)? {
                    write(&row)?;
                }
            }
            Method::Masked { params, mask, noise, .. } => {
                for index in pending {
                    write(&self.masked(task, method, params, *mask, *noise, index, summary)?)?;
                }
            }
        }
        Ok(())
    }

    /// Runs every method on every task, appending to `records_path`. Tasks
    /// run in parallel on `workers` threads; methods and samples of one task
    /// run in order. Returns all rows in the log afterwards.
    pub fn run(
        &self,
        tasks: &[Task],
        methods: &[Method],
        records_path: &Path,
        workers: usize,
    ) -> Result<(Vec<RunRecord>, RunSummary)> {
        let (log, _) = RecordLog::open(records_path)?;
        let summary = Mutex::new(RunSummary::default());
        let failures = Mutex::new(Vec::<String>::new());
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| HarnessError::Run(e.to_string()))?;
        pool.install(|| {
            tasks.par_iter().for_each(|task| {
                for method in methods {
                    if let Err(e) = self.task_rows(task, method, &log, &summary) {
                        failures.lock().expect("failure lock").push(format!("{} [{}]: {e}", task.id, method.label()));
                    }
                }
            })
        });
        let mut failures = failures.into_inner().expect("failure lock");
        if !failures.is_empty() {
            failures.sort();
            return Err(HarnessError::Run(format!("{} task/method pairs failed:\n  {}", failures.len(), failures.join("\n  "))));
        }
        let (rows, _) = crate::record::read_records(records_path)?;
        Ok((rows, summary.into_inner().expect("summary lock")))
    }
}

fn take_one(mut records: Vec<CompletionRecord>) -> Result<CompletionRecord, SampleError> {
    match records.len() {
        1 => Ok(records.remove(0)),
        n => Err(SampleError::Other(format!("expected one completion, got {n}"))),
    }
}

fn count_completions(summary: &Mutex<RunSummary>, records: &[CompletionRecord]) {
    let mut s = summary.lock().expect("summary lock");
    for r in records {
        if r.from_cache {
            s.cached_completions += 1;
        } else {
            s.fresh_completions += 1;
        }
    }
}

fn failure_summary(failure: &ParseFailure, refusal: bool) -> TraceSummary {
    TraceSummary {
        warnings: failure.warnings.clone(),
        refusal: refusal || failure.refusal,
        parse_failure: Some(failure.reason.clone()),
        ..TraceSummary::default()
    }
}

fn add_usage(a: TokenUsage, b: TokenUsage) -> TokenUsage {
    TokenUsage {
        input_tokens: a.input_tokens + b.input_tokens,
        output_tokens: a.output_tokens + b.output_tokens,
        api_calls: a.api_calls + b.api_calls,
        estimated: a.estimated || b.estimated,
    }
}

/// Sub-run directory of one sweep cell.
pub fn sweep_dir(run_dir: &Path, k: u32, m: u32) -> PathBuf {
    run_dir.join("sweep").join(format!("K{k}_M{m}"))
}

/// Sub-run directory of one ablation mask.
pub fn ablation_dir(run_dir: &Path, mask: StageMask) -> PathBuf {
    run_dir.join("ablate").join(mask.label().replace('+', "_"))
}
