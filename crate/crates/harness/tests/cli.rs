mod common;

use std::time::{Duration, Instant};

use common::*;
use m2wf_core::strategy::{build_prompt, M2WFParams, StrategyKind};
use m2wf_core::usage::{summarize_usage, UsageSample};
use m2wf_harness::commands;
use m2wf_harness::record::{read_records, RunRecord};
use serde_json::json;

fn masked_timings(mut rows: Vec<RunRecord>) -> Vec<RunRecord> {
    for r in &mut rows {
        r.timings = Default::default();
    }
    rows.sort_by_key(RunRecord::key);
    rows
}

#[test]
fn mock_run_scores_half_the_tasks() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    let config = fx.config(Fixture::default_strategies(), "");
    let started = Instant::now();
    let out = cli(&["run", "--config", config.to_str().unwrap()], fx.dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(started.elapsed() < Duration::from_secs(30));
    let text = stdout(&out);
    for label in ["normal", "cot", "m2wf"] {
        assert!(text.contains(&format!("| mock-model | {label} | 50.00 | 50.00 |")), "{text}");
    }
    assert!(text.contains("fresh completions: 12"), "{text}");

    let run_dir = fx.run_dir();
    for name in ["config.toml", "manifest.jsonl", "records.jsonl", "reports/scores.csv", "reports/scores.md", "reports/tokens.csv", "reports/report.json"] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }
    let (rows, _) = read_records(&run_dir.join("records.jsonl")).unwrap();
    assert_eq!(rows.len(), 12);
    let report_before = std::fs::read(run_dir.join("reports/report.json")).unwrap();

    // A second run is served entirely from records and cache.
    let again = cli(&["run", "--config", config.to_str().unwrap()], fx.dir.path());
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stdout(&again).contains("rows written: 0, rows already present: 12, fresh completions: 0"), "{}", stdout(&again));
    assert_eq!(std::fs::read(run_dir.join("reports/report.json")).unwrap(), report_before);
}

#[test]
fn cache_alone_avoids_provider_calls() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    let config = fx.config(Fixture::default_strategies(), "");
    let first = commands::run(&config, None).unwrap();
    assert_eq!(first.summary.fresh_completions, 12);
    std::fs::remove_file(fx.run_dir().join("records.jsonl")).unwrap();
    let second = commands::run(&config, None).unwrap();
    assert_eq!((second.summary.fresh_completions, second.summary.cached_completions), (0, 12));
    assert_eq!(second.report, first.report);
}

#[test]
fn m_above_k_is_a_config_error() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    let config = fx.config("[[strategies]]\nkind = \"m2wf\"\nk = 3\nm = 4\n", "");
    for sub in ["validate", "run"] {
        let out = cli(&[sub, "--config", config.to_str().unwrap()], fx.dir.path());
        assert_eq!(out.status.code(), Some(2), "{sub}: {}", stderr(&out));
        let err = stderr(&out);
        assert!(err.contains("M") && err.contains("K=3") && err.contains("M=4"), "{err}");
    }
    assert!(!fx.run_dir().exists());
}

#[test]
fn missing_baseline_file_is_a_config_error() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    std::fs::remove_file(fx.path("humaneval.jsonl")).unwrap();
    let config = fx.config(Fixture::default_strategies(), "");
    let out = cli(&["validate", "--config", config.to_str().unwrap()], fx.dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn provider_failures_leave_no_rows_and_exit_one() {
    let fx = Fixture::new();
    // Task 3 has no transcript rule at all.
    let rules = (0..3).map(|i| rule(&task_id(i), vec![plain_response(i, true)])).collect();
    fx.transcript(rules);
    let config = fx.config("[[strategies]]\nkind = \"normal\"\n", "");
    let out = cli(&["run", "--config", config.to_str().unwrap()], fx.dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("HumanEval/3"), "{}", stderr(&out));
    let (rows, _) = read_records(&fx.run_dir().join("records.jsonl")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.task_id != "HumanEval/3"));
}

#[test]
fn report_is_byte_identical_across_regenerations() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    let config = fx.config(Fixture::default_strategies(), "[report]\nks = [1]\nacc = true\nacc_budget = 1\n");
    commands::run(&config, None).unwrap();
    let reports = fx.run_dir().join("reports");
    let snapshot = |dir: &std::path::Path| -> Vec<(std::path::PathBuf, Vec<u8>)> {
        files_under(dir).into_iter().map(|p| (p.clone(), std::fs::read(&p).unwrap())).collect()
    };
    let first = snapshot(&reports);
    for _ in 0..2 {
        let out = cli(&["report", "--run-dir", fx.run_dir().to_str().unwrap()], fx.dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(snapshot(&reports), first);
    }
    assert!(reports.join("acc.csv").is_file());
}

#[test]
fn token_table_matches_independent_summary() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    let config = fx.config(Fixture::default_strategies(), "");
    commands::run(&config, None).unwrap();
    let (rows, _) = read_records(&fx.run_dir().join("records.jsonl")).unwrap();
    let oracle = summarize_usage(rows.iter().map(|r| UsageSample {
        model: &r.model,
        strategy: r.kind,
        request: &r.fingerprint,
        usage: r.usage,
    }))
    .unwrap();
    let out = cli(&["tokens", "--run-dir", fx.run_dir().to_str().unwrap()], fx.dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for s in &oracle {
        let line = format!("| {} | {} | {:.2} | {:.2} |", s.model, s.strategy.title(), s.mean_input(), s.mean_output());
        assert!(text.contains(&line), "{line} not in\n{text}");
    }
    // Tasks 0 and 2 report provider usage, so both kinds of row exist.
    let normal = oracle.iter().find(|s| s.strategy == StrategyKind::Normal).unwrap();
    assert!(normal.estimated && normal.total_input >= 240);
}

#[test]
fn sweep_writes_grid_and_finds_the_best_cell() {
    let fx = Fixture::new();
    let tasks = fx.tasks();
    let mut rules = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let params = M2WFParams::new(6, 2).unwrap();
        let fp = build_prompt(StrategyKind::M2WF, task, &params, None).unwrap().params_fingerprint;
        rules.push(rule(&fp, vec![workflow_response(6, i, true)]));
        // Other cells solve only the first task.
        rules.push(rule(&task_id(i), vec![workflow_response(5, i, i == 0)]));
    }
    fx.transcript(rules);
    let config = fx.config(
        "[[strategies]]\nkind = \"m2wf\"\n",
        "[sweep]\nk_values = [5, 6, 7, 8]\nm_values = [1, 2, 3]\n",
    );
    let out = cli(&["sweep", "--config", config.to_str().unwrap()], fx.dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("best: K=6 M=2 pass@1=100.00"), "{}", stdout(&out));
    let sweep = fx.run_dir().join("sweep");
    let cells: Vec<_> = std::fs::read_dir(&sweep).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(cells.len(), 12);
    for k in 5..=8 {
        for m in 1..=3 {
            assert!(sweep.join(format!("K{k}_M{m}/records.jsonl")).is_file());
        }
    }
    let grid: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sweep.join("grid.json")).unwrap()).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 12);
    let csv = std::fs::read_to_string(sweep.join("grid.csv")).unwrap();
    assert!(csv.contains("6,2,100.00") && csv.contains("5,1,25.00"), "{csv}");
    assert!(std::fs::read_to_string(sweep.join("series.csv")).unwrap().starts_with("M,K=5,K=6,K=7,K=8"));
}

fn ablation_transcript(fx: &Fixture) {
    let mut rules = Vec::new();
    for i in 0..TASKS.len() {
        rules.push(rule(&format!("{}/m2wf-step1", task_id(i)), vec![recall_only_response(5)]));
        let mut intact = rule(&format!("{}/m2wf-step2", task_id(i)), vec![plain_response(i, true)]);
        intact["contains"] = json!([marker().trim()]);
        rules.push(intact);
        rules.push(rule(&format!("{}/m2wf-step2", task_id(i)), vec![plain_response(i, false)]));
    }
    fx.transcript(rules);
}

#[test]
fn corrupting_recall_lowers_pass_rate() {
    let fx = Fixture::new();
    ablation_transcript(&fx);
    let config = fx.config(
        "[[strategies]]\nkind = \"m2wf\"\n",
        "[ablation]\nmasks = [\"recall\", \"clean\"]\n",
    );
    let out = cli(&["ablate", "--config", config.to_str().unwrap()], fx.dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let outcome = commands::ablate(&config, None).unwrap();
    assert_eq!(outcome.summary.fresh_completions, 0);
    let recall = outcome.rows.iter().find(|r| r.label == "recall").unwrap();
    let clean = outcome.rows.iter().find(|r| r.label == "clean").unwrap();
    assert_eq!(clean.pass_at_1, 100.0);
    assert!(recall.pass_at_1 < clean.pass_at_1);
    assert_eq!(recall.drop, Some(100.0));
    let table = std::fs::read_to_string(fx.run_dir().join("ablate/ablation.md")).unwrap();
    assert!(table.contains("| ✗ | ✓ | ✓ | 0.00 | 100.00 |"), "{table}");
    assert!(table.contains("| ✓ | ✓ | ✓ | 100.00 | - |"), "{table}");
}

#[test]
fn zero_noise_masks_match_the_clean_pipeline() {
    let fx = Fixture::new();
    ablation_transcript(&fx);
    let config = fx.config(
        "[[strategies]]\nkind = \"m2wf\"\n",
        "[ablation]\nlevel = 0.0\nmasks = [\"clean\", \"recall\"]\n",
    );
    let outcome = commands::ablate(&config, None).unwrap();
    // Four tasks, two steps each: the recall mask reuses every completion.
    assert_eq!((outcome.summary.fresh_completions, outcome.summary.cached_completions), (8, 8));
    let clean = read_records(&fx.run_dir().join("ablate/clean/records.jsonl")).unwrap().0;
    let recall = read_records(&fx.run_dir().join("ablate/recall/records.jsonl")).unwrap().0;
    let refs = |rows: &[RunRecord]| {
        let mut v: Vec<_> = rows.iter().map(|r| (r.task_id.clone(), r.completion_refs.clone(), r.verdict)).collect();
        v.sort();
        v
    };
    assert_eq!(refs(&clean), refs(&recall));
    assert_eq!(outcome.rows[0].pass_at_1, outcome.rows[1].pass_at_1);
}

#[test]
fn secrets_never_reach_the_run_directory() {
    use std::io::{BufRead, BufReader, Read, Write};
    let secret = "sk-test-0123456789-do-not-leak";
    std::env::set_var("M2WF_TEST_SECRET_KEY", secret);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let mut reader = BufReader::new(stream);
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0u8; length];
            let _ = reader.read_exact(&mut buf);
            let body = json!({
                "choices": [{ "index": 0, "message": { "content": plain_response(0, true) } }],
                "usage": { "prompt_tokens": 11, "completion_tokens": 7 },
            })
            .to_string();
            let mut stream = reader.into_inner();
            let _ = write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
        }
    });
    let text = format!(
        r#"output_dir = "runs"
run_id = "main"
workers = 1
[benchmark]
kind = "humaneval"
path = "humaneval.jsonl"
limit = 1
[model]
name = "remote-model"
provider = "openai"
endpoint = "{url}"
api_key_env = "M2WF_TEST_SECRET_KEY"
refusal_phrases = ["${{M2WF_TEST_SECRET_KEY}}"]
[[strategies]]
kind = "normal"
"#
    );
    let fx = Fixture::new();
    let config = fx.write("config.toml", &text);
    let outcome = commands::run(&config, None).unwrap();
    assert_eq!(outcome.report.scores.rows[0].avg, 100.0);
    let files = files_under(&fx.run_dir());
    assert!(files.len() > 5);
    for path in files {
        let bytes = std::fs::read(&path).unwrap();
        assert!(!String::from_utf8_lossy(&bytes).contains(secret), "secret found in {}", path.display());
    }
}

#[test]
fn resume_after_torn_write_matches_uninterrupted_run() {
    let fx = Fixture::new();
    fx.half_solved_transcript();
    let config = fx.config(Fixture::default_strategies(), "");
    commands::run(&config, None).unwrap();
    let reference = read_records(&fx.run_dir().join("records.jsonl")).unwrap().0;

    let crashed = fx.path("crashed");
    std::fs::create_dir_all(&crashed).unwrap();
    std::fs::copy(fx.run_dir().join("config.toml"), crashed.join("config.toml")).unwrap();
    let full = std::fs::read_to_string(fx.run_dir().join("records.jsonl")).unwrap();
    let lines: Vec<&str> = full.lines().collect();
    let torn = format!("{}\n{}\n{}", lines[0], lines[1], &lines[2][..lines[2].len() / 2]);
    std::fs::write(crashed.join("records.jsonl"), torn).unwrap();

    let resumed = commands::run(&config, Some(&crashed)).unwrap();
    assert_eq!(resumed.summary.rows_written, 10);
    let rows = read_records(&crashed.join("records.jsonl")).unwrap().0;
    assert_eq!(masked_timings(rows), masked_timings(reference));
}

#[test]
fn resume_after_killing_the_process() {
    let fx = Fixture::new();
    let mut rules = Vec::new();
    for i in 0..TASKS.len() {
        let slow = format!("```python\nimport time\ntime.sleep(0.2)\n{}```\n", code(i, i < 2));
        rules.push(rule(&task_id(i), vec![slow.clone()]));
        rules.push(rule(&format!("{}/m2wf", task_id(i)), vec![workflow_response(5, i, i < 2)]));
    }
    fx.transcript(rules);
    let config = fx.config(Fixture::default_strategies(), "[sampling]\nn = 3\n\n[report]\nks = [1, 3]\n");
    let config_arg = config.to_str().unwrap();

    let killed = fx.path("killed");
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_m2wf"))
        .args(["run", "--config", config_arg, "--run-dir", killed.to_str().unwrap()])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(700));
    let _ = child.kill();
    let _ = child.wait();

    let resumed = cli(&["run", "--config", config_arg, "--run-dir", killed.to_str().unwrap()], fx.dir.path());
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    let reference = commands::run(&config, None).unwrap();
    let rows = read_records(&killed.join("records.jsonl")).unwrap().0;
    let expected = read_records(&reference.run_dir.join("records.jsonl")).unwrap().0;
    assert_eq!(rows.len(), 36);
    assert_eq!(masked_timings(rows), masked_timings(expected));
}
