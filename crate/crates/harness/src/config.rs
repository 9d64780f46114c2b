//! Run configuration: TOML with `${VAR}` interpolation in string values.
//!
//! Relative paths are resolved against the directory of the config file.
//! The run directory keeps the raw, uninterpolated text, so values pulled
//! from the environment never reach disk.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use m2wf_core::ablation::{SweepPlan, StageMask};
use m2wf_core::noise::NoiseSpec;
use m2wf_core::strategy::{language_display_name, M2WFParams, StrategyKind};
use serde::Deserialize;

use crate::corpus::StudentEvalColumns;
use crate::error::{HarnessError, Result};
use crate::llmclient::{ModelConfig, SamplingParams};
use crate::sandbox::{default_runners, CompareMode, ExecutionLimits, RunnerTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Humaneval,
    Studenteval,
    Codeforces,
    MultiplE,
    /// A manifest already in the canonical JSON-lines form.
    Canonical,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub kind: BenchmarkKind,
    pub path: PathBuf,
    /// Language tag of the tasks; MultiPL-E target language.
    pub language: Option<String>,
    /// Codeforces difficulty level.
    pub level: Option<String>,
    #[serde(default)]
    pub columns: StudentEvalColumns,
    /// Keep only the first `limit` tasks.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Openai,
    Mock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub provider: ProviderKind,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    pub api_key_env: Option<String>,
    /// Mock transcript file.
    pub transcript: Option<PathBuf>,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    pub rate_limit_per_minute: Option<u32>,
    #[serde(default)]
    pub server_side_n: bool,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    pub refusal_phrases: Option<Vec<String>>,
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_request_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    5
}
fn default_backoff() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub label: Option<String>,
    pub k: Option<u32>,
    pub m: Option<u32>,
    /// Language named in the workflow instructions; defaults from the
    /// benchmark language.
    pub language: Option<String>,
    /// Retrieved examples for few-shot prompting.
    pub shots: Option<usize>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_n")]
    pub n: u32,
}

fn default_temperature() -> f64 {
    0.8
}
fn default_top_p() -> f64 {
    0.95
}
fn default_n() -> u32 {
    1
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { temperature: default_temperature(), top_p: default_top_p(), n: default_n() }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    #[serde(default = "default_wall")]
    pub wall_timeout_secs: f64,
    #[serde(default = "default_compile")]
    pub compile_timeout_secs: f64,
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
    #[serde(default = "default_output")]
    pub output_kb: usize,
}

fn default_wall() -> f64 {
    10.0
}
fn default_compile() -> f64 {
    30.0
}
fn default_memory() -> u64 {
    512
}
fn default_output() -> usize {
    1024
}

impl Default for LimitsSection {
    fn default() -> Self {
        Self {
            wall_timeout_secs: default_wall(),
            compile_timeout_secs: default_compile(),
            memory_mb: default_memory(),
            output_kb: default_output(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    #[serde(default = "default_ks")]
    pub ks: Vec<u32>,
    /// Emit the acc@k table.
    #[serde(default)]
    pub acc: bool,
    /// Also emit the selection-budget acc@k variant with this many submissions.
    pub acc_budget: Option<usize>,
}

fn default_ks() -> Vec<u32> {
    vec![1]
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { ks: default_ks(), acc: false, acc_budget: None }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxSection {
    #[serde(default)]
    pub wrapper: Vec<String>,
    #[serde(default)]
    pub compare: CompareMode,
}

/// Few-shot example pool: Codeforces-format files filtered by level.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    pub path: PathBuf,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub k_values: Vec<u32>,
    pub m_values: Vec<u32>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_n")]
    pub n: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// Stage masks to run, e.g. `"recall+evaluation"`; defaults to the
    /// seven table rows.
    pub masks: Option<Vec<String>>,
    pub k: Option<u32>,
    pub m: Option<u32>,
}

fn default_period() -> usize {
    10
}
fn default_level() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub benchmark: BenchmarkSection,
    pub model: ModelSection,
    pub strategies: Vec<StrategySection>,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default)]
    pub report: ReportSection,
    /// Added to, or replacing, the built-in runner table.
    #[serde(default)]
    pub runners: RunnerTable,
    #[serde(default)]
    pub sandbox: SandboxSection,
    pub retrieval: Option<RetrievalSection>,
    pub sweep: Option<SweepSection>,
    pub ablation: Option<AblationSection>,
}

fn default_output_dir() -> PathBuf {
    "runs".into()
}
fn default_workers() -> usize {
    4
}

/// One configured prompting method with its resolved parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategySpec {
    pub label: String,
    pub kind: StrategyKind,
    pub params: M2WFParams,
    pub shots: Option<usize>,
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// The file as written, before interpolation.
    pub raw: String,
    pub base_dir: PathBuf,
    pub source: PathBuf,
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Replaces `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate(text: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| config_err(format!("unterminated ${{ in {text:?}")))?;
        let name = &after[..end];
        let valid = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !valid {
            return Err(config_err(format!("invalid variable name {name:?}")));
        }
        out.push_str(&lookup(name).ok_or_else(|| config_err(format!("environment variable {name} is not set")))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(value: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    match value {
        toml::Value::String(s) => *s = interpolate(s, lookup)?,
        toml::Value::Array(items) => {
            for item in items {
                interpolate_value(item, lookup)?;
            }
        }
        toml::Value::Table(table) => {
            for (_, item) in table.iter_mut() {
                interpolate_value(item, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(raw: &str) -> Result<Self> {
        Self::parse_with(raw, &|name| std::env::var(name).ok())
    }

    /// Parses with a custom variable lookup. Reports use one that never
    /// fails, since they only need settings that rarely come from the
    /// environment.
    pub fn parse_with(raw: &str, lookup: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(raw).map_err(|e| config_err(e.to_string()))?;
        interpolate_value(&mut value, lookup)?;
        value.try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let raw = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let config = Self::parse(&raw)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig { config, raw, base_dir, source: path.to_path_buf() })
    }

    pub fn language(&self) -> &str {
        self.benchmark.language.as_deref().unwrap_or(m2wf_core::task::DEFAULT_LANGUAGE)
    }

    pub fn sampling(&self) -> SamplingParams {
        SamplingParams { temperature: self.sampling.temperature, top_p: self.sampling.top_p, n: self.sampling.n }
    }

    pub fn limits(&self) -> ExecutionLimits {
        let secs = |s: f64| Duration::from_secs_f64(s.max(0.0));
        ExecutionLimits {
            wall_timeout: secs(self.limits.wall_timeout_secs),
            compile_timeout: secs(self.limits.compile_timeout_secs),
            memory_cap: self.limits.memory_mb * 1024 * 1024,
            output_cap: self.limits.output_kb * 1024,
        }
    }

    pub fn runners(&self) -> RunnerTable {
        let mut table = default_runners();
        for (tag, spec) in &self.runners {
            let mut spec = spec.clone();
            spec.language_tag = tag.clone();
            table.insert(tag.clone(), spec);
        }
        table
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            model_name: m.name.clone(),
            endpoint: m.endpoint.clone(),
            api_key_env: m.api_key_env.clone(),
            request_timeout: Duration::from_secs_f64(m.request_timeout_secs.max(0.0)),
            max_retries: m.max_retries,
            rate_limit_per_minute: m.rate_limit_per_minute,
            server_side_n: m.server_side_n,
            backoff_base: Duration::from_secs_f64(m.backoff_base_secs.max(0.0)),
        }
    }

    fn params_for(&self, k: Option<u32>, m: Option<u32>, language: Option<&str>) -> Result<M2WFParams> {
        let defaults = M2WFParams::default();
        let lang = language.map(str::to_string).unwrap_or_else(|| language_display_name(self.language()));
        let params = M2WFParams { k: k.unwrap_or(defaults.k), m: m.unwrap_or(defaults.m), target_language: lang };
        params.validate().map_err(|e| config_err(format!("{e} (K={}, M={})", params.k, params.m)))?;
        Ok(params)
    }

    pub fn strategies(&self) -> Result<Vec<StrategySpec>> {
        if self.strategies.is_empty() {
            return Err(config_err("no strategies configured"));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for s in &self.strategies {
            let label = s.label.clone().unwrap_or_else(|| s.kind.as_str().to_string());
            if !seen.insert(label.clone()) {
                return Err(config_err(format!("duplicate strategy label {label:?}")));
            }
            if s.kind == StrategyKind::FewShot {
                if self.retrieval.is_none() {
                    return Err(config_err(format!("strategy {label:?} needs a [retrieval] pool")));
                }
                if s.shots.unwrap_or(1) == 0 {
                    return Err(config_err(format!("strategy {label:?} needs at least one shot")));
                }
            }
            out.push(StrategySpec {
                label,
                kind: s.kind,
                params: self.params_for(s.k, s.m, s.language.as_deref())?,
                shots: (s.kind == StrategyKind::FewShot).then(|| s.shots.unwrap_or(1)),
            });
        }
        Ok(out)
    }

    pub fn sweep_plan(&self) -> Result<SweepPlan> {
        let plan = match &self.sweep {
            None => SweepPlan::published(),
            Some(s) => SweepPlan {
                k_values: s.k_values.clone(),
                m_values: s.m_values.clone(),
                temperature: s.temperature,
                top_p: s.top_p,
                n: s.n,
            },
        };
        plan.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(plan)
    }

    /// Masks, noise and workflow parameters for the stage ablation.
    pub fn ablation(&self) -> Result<(Vec<StageMask>, NoiseSpec, M2WFParams)> {
        let section = self.ablation.clone().unwrap_or(AblationSection {
            period: default_period(),
            level: default_level(),
            seed: None,
            masks: None,
            k: None,
            m: None,
        });
        let masks = match &section.masks {
            None => StageMask::table_rows().to_vec(),
            Some(list) => list
                .iter()
                .map(|s| s.parse::<StageMask>().map_err(|e| config_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        };
        if masks.is_empty() {
            return Err(config_err("ablation needs at least one mask"));
        }
        let noise = NoiseSpec { period: section.period, level: section.level, seed: section.seed.unwrap_or(self.seed) };
        noise.validate().map_err(|e| config_err(e.to_string()))?;
        let workflow = self.strategies.iter().find(|s| s.kind == StrategyKind::M2WF);
        let params = self.params_for(
            section.k.or(workflow.and_then(|s| s.k)),
            section.m.or(workflow.and_then(|s| s.m)),
            workflow.and_then(|s| s.language.as_deref()),
        )?;
        Ok((masks, noise, params))
    }
}

impl LoadedConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// `output_dir/run_id`, the run id defaulting to the config file stem.
    pub fn default_run_dir(&self) -> PathBuf {
        let id = self.config.run_id.clone().unwrap_or_else(|| {
            self.source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
        });
        self.resolve(&self.config.output_dir).join(id)
    }

    /// Everything that can be checked without calling a model.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.strategies()?;
        c.sampling().validate().map_err(|e| config_err(e.to_string()))?;
        c.limits().validate().map_err(|e| config_err(e.to_string()))?;
        c.model_config().validate().map_err(|e| config_err(e.to_string()))?;
        if c.workers == 0 {
            return Err(config_err("workers must be positive"));
        }
        if c.report.ks.is_empty() || c.report.ks.contains(&0) {
            return Err(config_err("report.ks must list positive k values"));
        }
        if let Some(k) = c.report.ks.iter().find(|k| **k > c.sampling.n) {
            return Err(config_err(format!("report k={k} exceeds the {} samples drawn per task", c.sampling.n)));
        }
        let bench = self.resolve(&c.benchmark.path);
        if !bench.is_file() {
            return Err(config_err(format!("benchmark file {} does not exist", bench.display())));
        }
        if c.benchmark.kind == BenchmarkKind::Codeforces && c.benchmark.level.is_none() {
            return Err(config_err("codeforces benchmarks need benchmark.level"));
        }
        match c.model.provider {
            ProviderKind::Mock => {
                let t = c.model.transcript.as_ref().ok_or_else(|| config_err("the mock provider needs model.transcript"))?;
                if !self.resolve(t).is_file() {
                    return Err(config_err(format!("transcript {} does not exist", self.resolve(t).display())));
                }
            }
            ProviderKind::Openai => {
                if c.model.endpoint.trim().is_empty() {
                    return Err(config_err("model.endpoint is empty"));
                }
            }
        }
        if let Some(r) = &c.retrieval {
            if !self.resolve(&r.path).is_file() {
                return Err(config_err(format!("retrieval pool {} does not exist", self.resolve(&r.path).display())));
            }
            if r.levels.is_empty() {
                return Err(config_err("retrieval.levels is empty"));
            }
        }
        if !c.runners().contains_key(c.language()) {
            return Err(config_err(format!("no runner configured for language {:?}", c.language())));
        }
        Ok(())
    }
}

/// Key-value view of what a config resolves to, for `validate` output.
pub fn describe(loaded: &LoadedConfig) -> Result<BTreeMap<&'static str, String>> {
    let c = &loaded.config;
    let labels: Vec<String> = c.strategies()?.into_iter().map(|s| s.label).collect();
    Ok(BTreeMap::from([
        ("benchmark", loaded.resolve(&c.benchmark.path).display().to_string()),
        ("model", c.model.name.clone()),
        ("strategies", labels.join(", ")),
        ("samples per task", c.sampling.n.to_string()),
        ("run directory", loaded.default_run_dir().display().to_string()),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[benchmark]
kind = "humaneval"
path = "data.jsonl"

[model]
name = "${MODEL_NAME_FOR_TEST}"
provider = "mock"
transcript = "t.json"

[[strategies]]
kind = "m2wf"
k = 3
m = 2
"#;

    #[test]
    fn interpolation() {
        let env = |name: &str| (name == "A").then(|| "x".to_string());
        assert_eq!(interpolate("a${A}b${A}", &env).unwrap(), "axbx");
        assert_eq!(interpolate("plain $A {A}", &env).unwrap(), "plain $A {A}");
        assert!(interpolate("${B}", &env).is_err());
        assert!(interpolate("${A", &env).is_err());
    }

    #[test]
    fn parses_with_defaults() {
        std::env::set_var("MODEL_NAME_FOR_TEST", "gpt-test");
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.model.name, "gpt-test");
        assert_eq!(c.sampling.n, 1);
        assert_eq!(c.report.ks, vec![1]);
        let s = c.strategies().unwrap();
        assert_eq!((s[0].params.k, s[0].params.m, s[0].params.target_language.as_str()), (3, 2, "Python3"));
        assert_eq!(c.limits().wall_timeout, Duration::from_secs(10));
    }

    #[test]
    fn rejects_m_above_k() {
        std::env::set_var("MODEL_NAME_FOR_TEST", "gpt-test");
        let c = RunConfig::parse(&MINIMAL.replace("m = 2", "m = 4")).unwrap();
        let err = c.strategies().unwrap_err().to_string();
        assert!(err.contains("K=3") && err.contains("M=4"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        std::env::set_var("MODEL_NAME_FOR_TEST", "gpt-test");
        assert!(RunConfig::parse(&format!("{MINIMAL}\n[sampling]\ntemp = 1.0\n")).is_err());
    }
}
