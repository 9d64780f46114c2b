//! The operations behind each CLI subcommand.

use std::path::{Path, PathBuf};

use m2wf_core::ablation::{StageMask, SweepCell, SweepGrid};
use m2wf_core::metrics::drop_percent;
use m2wf_core::strategy::{M2WFParams, StrategyKind};
use serde::Serialize;

use crate::config::{LoadedConfig, ReportSection, RunConfig, StrategySpec};
use crate::error::{HarnessError, Result};
use crate::llmclient::SamplingParams;
use crate::record::{read_records, RunRecord};
use crate::report::{build_report, Report, Table};
use crate::runner::{
    ablation_dir, build_client, build_sandbox, load_manifest, load_pool, prepare_run_dir, sweep_dir, Method, Pipeline,
    RunSummary, CACHE_DIR, CONFIG_SNAPSHOT, RECORDS_FILE, REPORTS_DIR,
};

/// Loads and validates a config; the run directory defaults from it.
pub fn load_config(config: &Path, run_dir: Option<&Path>) -> Result<(LoadedConfig, PathBuf)> {
    let loaded = RunConfig::load(config)?;
    loaded.validate()?;
    let dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| loaded.default_run_dir());
    Ok((loaded, dir))
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub summary: RunSummary,
    pub report: Report,
}

struct Session {
    loaded: LoadedConfig,
    run_dir: PathBuf,
    manifest: m2wf_core::task::BenchmarkManifest,
    client: crate::llmclient::Client,
    sandbox: crate::sandbox::Sandbox,
    pool: Option<m2wf_core::retrieval::ExamplePool>,
}

impl Session {
    fn open(config: &Path, run_dir: Option<&Path>) -> Result<Self> {
        let (loaded, run_dir) = load_config(config, run_dir)?;
        let manifest = load_manifest(&loaded)?;
        prepare_run_dir(&run_dir, &loaded, &manifest)?;
        let client = build_client(&loaded, &run_dir.join(CACHE_DIR))?;
        let sandbox = build_sandbox(&loaded, &run_dir, &manifest)?;
        let pool = load_pool(&loaded)?;
        Ok(Self { loaded, run_dir, manifest, client, sandbox, pool })
    }

    fn execute(&self, dir: &Path, methods: &[Method], sampling: SamplingParams) -> Result<(Vec<RunRecord>, RunSummary)> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let pipeline = Pipeline { client: &self.client, sandbox: &self.sandbox, sampling, pool: self.pool.as_ref() };
        pipeline.run(self.manifest.tasks(), methods, &dir.join(RECORDS_FILE), self.loaded.config.workers)
    }
}

fn labels(methods: &[Method]) -> Vec<String> {
    methods.iter().map(|m| m.label().to_string()).collect()
}

fn add(total: &mut RunSummary, part: &RunSummary) {
    total.rows_written += part.rows_written;
    total.rows_skipped += part.rows_skipped;
    total.fresh_completions += part.fresh_completions;
    total.cached_completions += part.cached_completions;
}

/// Runs every configured strategy and writes the reports.
pub fn run(config: &Path, run_dir: Option<&Path>) -> Result<RunOutcome> {
    let session = Session::open(config, run_dir)?;
    let methods: Vec<Method> = session.loaded.config.strategies()?.into_iter().map(Method::Single).collect();
    let (records, summary) = session.execute(&session.run_dir, &methods, session.loaded.config.sampling())?;
    let report = build_report(&records, &session.loaded.config.report, &labels(&methods))?;
    report.write(&session.run_dir.join(REPORTS_DIR))?;
    Ok(RunOutcome { run_dir: session.run_dir, summary, report })
}

/// Regenerates the reports of a finished run from its records.
pub fn report(run_dir: &Path) -> Result<Report> {
    let snapshot = run_dir.join(CONFIG_SNAPSHOT);
    let raw = std::fs::read_to_string(&snapshot).map_err(|e| HarnessError::io(&snapshot, e))?;
    let config = RunConfig::parse_with(&raw, &|name| Some(std::env::var(name).unwrap_or_default()))?;
    let order: Vec<String> = config.strategies()?.into_iter().map(|s| s.label).collect();
    let (records, _) = read_records(&run_dir.join(RECORDS_FILE))?;
    let report = build_report(&records, &config.report, &order)?;
    report.write(&run_dir.join(REPORTS_DIR))?;
    Ok(report)
}

/// Token table of a finished run.
pub fn tokens(run_dir: &Path) -> Result<Table> {
    Ok(report(run_dir)?.tokens_table())
}

pub struct SweepOutcome {
    pub run_dir: PathBuf,
    pub grid: SweepGrid,
    pub summary: RunSummary,
}

/// Runs the workflow at every (K, M) cell of the sweep plan.
pub fn sweep(config: &Path, run_dir: Option<&Path>) -> Result<SweepOutcome> {
    let session = Session::open(config, run_dir)?;
    let c = &session.loaded.config;
    let plan = c.sweep_plan()?;
    let sampling = SamplingParams { temperature: plan.temperature, top_p: plan.top_p, n: plan.n };
    let language = c.strategies()?.into_iter().find(|s| s.kind == StrategyKind::M2WF).map_or_else(
        || M2WFParams::default().with_language(m2wf_core::strategy::language_display_name(c.language())).target_language,
        |s| s.params.target_language,
    );
    let settings = ReportSection { ks: vec![1], acc: false, acc_budget: None };
    let mut grid = SweepGrid::default();
    let mut total = RunSummary::default();
    for (k, m) in plan.cells()? {
        let spec = StrategySpec {
            label: StrategyKind::M2WF.as_str().into(),
            kind: StrategyKind::M2WF,
            params: M2WFParams { k, m, target_language: language.clone() },
            shots: None,
        };
        let methods = [Method::Single(spec)];
        let dir = sweep_dir(&session.run_dir, k, m);
        let (records, summary) = session.execute(&dir, &methods, sampling)?;
        add(&mut total, &summary);
        let report = build_report(&records, &settings, &labels(&methods))?;
        report.write(&dir.join(REPORTS_DIR))?;
        grid.cells.push(SweepCell { k, m, pass_at_1: report.scores.rows[0].avg });
    }
    write_grid(&session.run_dir.join("sweep"), &grid)?;
    Ok(SweepOutcome { run_dir: session.run_dir, grid, summary: total })
}

fn write_file(path: &Path, body: String) -> Result<()> {
    std::fs::write(path, body).map_err(|e| HarnessError::io(path, e))
}

pub fn grid_table(grid: &SweepGrid) -> Table {
    Table {
        header: vec!["K".into(), "M".into(), "pass@1".into()],
        rows: grid.cells.iter().map(|c| vec![c.k.to_string(), c.m.to_string(), format!("{:.2}", c.pass_at_1)]).collect(),
    }
}

fn write_grid(dir: &Path, grid: &SweepGrid) -> Result<()> {
    let json = serde_json::to_string_pretty(grid).expect("grid serializes") + "\n";
    write_file(&dir.join("grid.json"), json)?;
    write_file(&dir.join("grid.csv"), grid_table(grid).to_csv())?;
    let series = grid.series_by_m();
    let mut ks: Vec<u32> = grid.cells.iter().map(|c| c.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut header = vec!["M".to_string()];
    header.extend(ks.iter().map(|k| format!("K={k}")));
    let rows = series
        .iter()
        .map(|(m, points)| {
            let mut row = vec![m.to_string()];
            row.extend(ks.iter().map(|k| {
                points.iter().find(|p| p.0 == *k).map(|p| format!("{:.2}", p.1)).unwrap_or_else(|| "-".into())
            }));
            row
        })
        .collect();
    write_file(&dir.join("series.csv"), Table { header, rows }.to_csv())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mask: StageMask,
    pub label: String,
    pub pass_at_1: f64,
    /// Relative drop against the clean row, when one was run.
    pub drop: Option<f64>,
}

pub struct AblationOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<AblationRow>,
    pub summary: RunSummary,
}

/// Runs the two-step workflow once per stage mask.
pub fn ablate(config: &Path, run_dir: Option<&Path>) -> Result<AblationOutcome> {
    let session = Session::open(config, run_dir)?;
    let c = &session.loaded.config;
    let (masks, noise, params) = c.ablation()?;
    let settings = ReportSection { ks: vec![1], acc: false, acc_budget: None };
    let mut rows = Vec::new();
    let mut total = RunSummary::default();
    for mask in masks {
        let methods = [Method::Masked { label: mask.label(), params: params.clone(), mask, noise }];
        let dir = ablation_dir(&session.run_dir, mask);
        let (records, summary) = session.execute(&dir, &methods, c.sampling())?;
        add(&mut total, &summary);
        let report = build_report(&records, &settings, &labels(&methods))?;
        report.write(&dir.join(REPORTS_DIR))?;
        rows.push(AblationRow { mask, label: mask.label(), pass_at_1: report.scores.rows[0].avg, drop: None });
    }
    if let Some(clean) = rows.iter().find(|r| r.mask.is_clean()).map(|r| r.pass_at_1) {
        for row in &mut rows {
            if !row.mask.is_clean() {
                row.drop = drop_percent(clean, row.pass_at_1);
            }
        }
    }
    let dir = session.run_dir.join("ablate");
    let table = ablation_table(&rows);
    table.write(&dir, "ablation")?;
    write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n")?;
    Ok(AblationOutcome { run_dir: session.run_dir, rows, summary: total })
}

/// A check mark means the stage's artifacts were left intact.
pub fn ablation_table(rows: &[AblationRow]) -> Table {
    let mark = |kept: bool| if kept { "✓" } else { "✗" }.to_string();
    Table {
        header: ["Recall", "Evaluation", "Planning", "pass@1", "Drop %"].map(String::from).to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    mark(!r.mask.recall),
                    mark(!r.mask.evaluation),
                    mark(!r.mask.planning),
                    format!("{:.2}", r.pass_at_1),
                    r.drop.map(|d| format!("{d:.2}")).unwrap_or_else(|| "-".into()),
                ]
            })
            .collect(),
    }
}
