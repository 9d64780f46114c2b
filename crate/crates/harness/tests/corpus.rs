use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use m2wf_core::task::{StdioCase, SubsetLabel, Task, TestSuite, META_LEVEL};
use m2wf_harness::corpus::{
    load_codeforces, load_humaneval, load_multipl_e, load_studenteval, parse_canonical, to_canonical_jsonl,
    CorpusError, StudentEvalColumns,
};
use m2wf_harness::sandbox::{default_runners, Sandbox, SandboxOptions, Verdict};
use proptest::prelude::*;
use serde_json::json;

fn write(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn humaneval_line(i: usize) -> String {
    json!({
        "task_id": format!("HumanEval/{i}"),
        "prompt": format!("def f{i}(x):\n    \"\"\"Return x plus {i}.\"\"\"\n"),
        "entry_point": format!("f{i}"),
        "canonical_solution": format!("    return x + {i}\n"),
        "test": format!("def check(candidate):\n    assert candidate(1) == {}\n", 1 + i),
    })
    .to_string()
}

#[test]
fn humaneval_keeps_file_order_and_closes_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "he.jsonl", &[humaneval_line(2), humaneval_line(0), humaneval_line(1)]);
    let m = load_humaneval(&path).unwrap();
    assert_eq!(m.name(), "he");
    let ids: Vec<&str> = m.tasks().iter().map(|t| t.id.as_str()).collect();
    assert_eq!(ids, ["HumanEval/2", "HumanEval/0", "HumanEval/1"]);
    let TestSuite::CheckProgram(test) = &m.tasks()[0].test_suite else { panic!("function-mode suite expected") };
    assert_eq!(test.matches("check(f2)").count(), 1);
    assert_eq!(m.tasks()[0].entry_point.as_deref(), Some("f2"));
}

#[test]
fn empty_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let err = load_humaneval(&path).unwrap_err();
    assert!(err.to_string().contains("empty manifest"), "{err}");
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "he.jsonl", &[humaneval_line(0), "{not json".into(), humaneval_line(2)]);
    match load_humaneval(&path).unwrap_err() {
        CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn missing_field_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut broken: serde_json::Value = serde_json::from_str(&humaneval_line(1)).unwrap();
    broken.as_object_mut().unwrap().remove("test");
    let path = write(dir.path(), "he.jsonl", &[humaneval_line(0), broken.to_string()]);
    let err = load_humaneval(&path).unwrap_err();
    assert!(matches!(err, CorpusError::Schema { line: 2, .. }), "{err}");
    assert!(err.to_string().contains("\"test\""), "{err}");
}

fn studenteval_line(problem: &str, subset: &str) -> String {
    json!({
        "problem": problem,
        "prompt": "def g(x):\n",
        "assertions": "assert g(1) == 1\n",
        "entrypoint": "g",
        "subset": subset,
    })
    .to_string()
}

#[test]
fn studenteval_subsets_and_ids() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = ["first_failure", "first_success", "last_failure", "last_success"]
        .iter()
        .map(|s| studenteval_line("p", s))
        .collect();
    let path = write(dir.path(), "se.jsonl", &lines);
    let m = load_studenteval(&path, &StudentEvalColumns::default()).unwrap();
    let subsets: Vec<Option<SubsetLabel>> = m.tasks().iter().map(Task::subset).collect();
    assert_eq!(subsets, SubsetLabel::ALL.iter().copied().map(Some).collect::<Vec<_>>());
    assert_eq!(m.tasks()[3].id, "p/3");

    let bad = write(dir.path(), "bad.jsonl", &[studenteval_line("p", "mid_success")]);
    let err = load_studenteval(&bad, &StudentEvalColumns::default()).unwrap_err();
    assert!(matches!(err, CorpusError::Schema { line: 1, .. }), "{err}");
    assert!(err.to_string().contains("mid_success"), "{err}");
}

#[test]
fn studenteval_csv_with_flag_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("se.csv");
    std::fs::write(
        &path,
        "problem,prompt,assertions,entrypoint,is_first_failure,is_first_success,is_last_failure,is_last_success\n\
         p1,\"def g(x):\n\",assert g(1) == 1,g,False,False,True,False\n\
         p2,\"def g(x):\n\",assert g(1) == 1,g,0,1,0,0\n",
    )
    .unwrap();
    let m = load_studenteval(&path, &StudentEvalColumns::default()).unwrap();
    let subsets: Vec<Option<SubsetLabel>> = m.tasks().iter().map(Task::subset).collect();
    assert_eq!(subsets, [Some(SubsetLabel::LastFailure), Some(SubsetLabel::FirstSuccess)]);
}

fn codeforces_line(id: &str, level: &str) -> String {
    json!({
        "id": id,
        "prompt": "Read two integers and print their sum.",
        "level": level,
        "tests": [{ "input": "1 2\n", "output": "3\n" }, { "input": "5 7\n", "output": "12\n" }],
        "solution": "a, b = map(int, input().split())\nprint(a + b)\n",
    })
    .to_string()
}

#[test]
fn codeforces_filters_by_level() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "cf.jsonl", &[codeforces_line("1A", "A"), codeforces_line("2A", "A"), codeforces_line("3B", "B")]);
    let a = load_codeforces(&path, "A").unwrap();
    assert_eq!(a.len(), 2);
    let b = load_codeforces(&path, "B").unwrap();
    assert_eq!((b.len(), b.name()), (1, "cf-B"));
    assert_eq!(b.metadata().get(META_LEVEL).map(String::as_str), Some("B"));
    assert_eq!(b.tasks()[0].metadata.get(META_LEVEL).map(String::as_str), Some("B"));
    let TestSuite::Cases(cases) = &b.tasks()[0].test_suite else { panic!("stdio suite expected") };
    assert_eq!(cases[1], StdioCase { stdin: "5 7\n".into(), expected_stdout: "12\n".into() });
    assert!(load_codeforces(&path, "C").unwrap_err().to_string().contains("empty manifest"));
}

#[test]
fn multipl_e_languages() {
    let dir = tempfile::tempdir().unwrap();
    let line = json!({
        "name": "HumanEval_3_below_zero",
        "prompt": "#include <vector>\nbool below_zero(std::vector<long> ops) {\n",
        "tests": "}\nint main() {\n    assert(below_zero({1, -2}) == true);\n}\n",
    })
    .to_string();
    let path = write(dir.path(), "mpe.jsonl", &[line]);
    let runners = default_runners();
    let m = load_multipl_e(&path, "cpp", &runners).unwrap();
    let task = &m.tasks()[0];
    assert_eq!((task.entry_point.as_deref(), task.language.as_str()), (Some("below_zero"), "cpp"));
    let TestSuite::CheckProgram(tests) = &task.test_suite else { panic!() };
    assert!(tests.starts_with("int main()"), "{tests}");
    let err = load_multipl_e(&path, "cobol", &runners).unwrap_err();
    assert!(matches!(err, CorpusError::UnknownLanguage { .. }));
    assert!(err.to_string().contains("cobol") && err.to_string().contains("cpp"), "{err}");
}

#[test]
fn loading_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "he.jsonl", &(0..5).map(humaneval_line).collect::<Vec<_>>());
    let a = to_canonical_jsonl(&load_humaneval(&path).unwrap());
    let b = to_canonical_jsonl(&load_humaneval(&path).unwrap());
    assert_eq!(a, b);
}

#[test]
fn reference_solutions_pass_in_the_sandbox() {
    let dir = tempfile::tempdir().unwrap();
    let he = load_humaneval(&write(dir.path(), "he.jsonl", &(0..3).map(humaneval_line).collect::<Vec<_>>())).unwrap();
    let cf = load_codeforces(&write(dir.path(), "cf.jsonl", &[codeforces_line("1A", "A")]), "A").unwrap();
    let sandbox = Sandbox::new("reference", SandboxOptions { runners: default_runners(), ..SandboxOptions::default() }).unwrap();
    for task in he.tasks().iter().chain(cf.tasks()) {
        let reference = task.reference_solution.as_deref().unwrap();
        let outcome = sandbox.execute(task, 0, reference).unwrap();
        assert_eq!(outcome.verdict, Verdict::Pass, "{}: {}", task.id, outcome.stderr);
    }
}

/// Tasks of one judge mode: function tasks carry an entry point and a
/// non-empty check program, stdio tasks at least one case.
fn arb_task(stdio: bool) -> impl Strategy<Value = Task> {
    let suite = if stdio {
        prop::collection::vec((".{0,10}", ".{0,10}"), 1..3)
            .prop_map(|cases| {
                TestSuite::Cases(cases.into_iter().map(|(stdin, expected_stdout)| StdioCase { stdin, expected_stdout }).collect())
            })
            .boxed()
    } else {
        "[a-z].{0,40}".prop_map(TestSuite::CheckProgram).boxed()
    };
    let entry = if stdio { Just(None).boxed() } else { "[a-z_]{1,8}".prop_map(Some).boxed() };
    (
        "[a-z]{1,8}",
        "(?s).{0,60}",
        entry,
        suite,
        prop::option::of(".{0,30}"),
        prop::collection::btree_map("[a-z]{1,5}", ".{0,8}", 0..3),
    )
        .prop_map(|(id, prompt, entry_point, test_suite, reference_solution, metadata)| Task {
            id,
            prompt,
            entry_point,
            test_suite,
            language: "python3".into(),
            reference_solution,
            metadata,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn canonical_form_round_trips(
        tasks in any::<bool>().prop_flat_map(|stdio| prop::collection::vec(arb_task(stdio), 1..6)),
        name in "[a-z]{1,10}",
    ) {
        let mut seen = std::collections::BTreeSet::new();
        let tasks: Vec<Task> = tasks.into_iter().filter(|t| seen.insert(t.id.clone())).collect();
        let manifest = m2wf_core::task::BenchmarkManifest::new(name, tasks, BTreeMap::from([("k".into(), "v".into())])).unwrap();
        let text = to_canonical_jsonl(&manifest);
        let back = parse_canonical(&text, Path::new("mem.jsonl")).unwrap();
        prop_assert_eq!(back.name(), manifest.name());
        prop_assert_eq!(back.metadata(), manifest.metadata());
        prop_assert_eq!(back.tasks(), manifest.tasks());
    }
}
