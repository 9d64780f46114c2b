use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use m2wf_core::strategy::{build_prompt, M2WFParams, PromptBundle, StrategyKind};
use m2wf_core::task::{Task, TestSuite};
use m2wf_core::usage::{summarize_usage as summarize_samples, TokenUsage, UsageSample};
use m2wf_harness::llmclient::{
    Client, ClientError, Clock, DiskCache, MockProvider, ModelConfig, OpenAiProvider, Provider, ProviderError,
    ProviderRequest, RateLimiter, RuleUsage, SamplingParams, Transcript, TranscriptRule, VirtualClock, RATE_WINDOW,
};
use proptest::prelude::*;

fn task(id: &str) -> Task {
    Task {
        id: id.into(),
        prompt: "def f():\n    \"\"\"Return one.\"\"\"\n".into(),
        entry_point: Some("f".into()),
        test_suite: TestSuite::CheckProgram("assert f() == 1\n".into()),
        language: "python3".into(),
        reference_solution: None,
        metadata: BTreeMap::new(),
    }
}

fn bundle(id: &str) -> PromptBundle {
    build_prompt(StrategyKind::Normal, &task(id), &M2WFParams::default(), None).unwrap()
}

fn rule(key: &str, responses: &[&str], failures: &[u16]) -> TranscriptRule {
    TranscriptRule {
        key: key.into(),
        contains: vec![],
        responses: responses.iter().map(|s| s.to_string()).collect(),
        usage: Some(RuleUsage { input_tokens: 100, output_tokens: 40 }),
        failures: failures.to_vec(),
    }
}

fn config(max_retries: u32) -> ModelConfig {
    ModelConfig { max_retries, ..ModelConfig::new("mock-model", "mock://") }
}

const SAMPLING: SamplingParams = SamplingParams { temperature: 0.8, top_p: 0.95, n: 1 };

#[test]
fn retries_transient_failures_with_backoff() {
    let mock = Arc::new(MockProvider::new(Transcript { server_side_n: false, rules: vec![rule("t", &["ok"], &[429, 429])] }).unwrap());
    let clock = Arc::new(VirtualClock::default());
    let client = Client::new(config(5), mock.clone()).with_clock(clock.clone());
    let records = client.complete(&bundle("t"), &SAMPLING).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].attempts, 3);
    assert_eq!(records[0].text, "ok");
    assert_eq!(mock.calls(), 3);
    assert_eq!(clock.sleeps(), vec![Duration::from_secs(1), Duration::from_secs(2)]);
}

#[test]
fn exhausted_retries_carry_the_attempt_log() {
    let mock = Arc::new(MockProvider::new(Transcript { server_side_n: false, rules: vec![rule("t", &["ok"], &[500, 502, 503])] }).unwrap());
    let client = Client::new(config(1), mock.clone()).with_clock(Arc::new(VirtualClock::default()));
    match client.complete(&bundle("t"), &SAMPLING) {
        Err(ClientError::Exhausted(log)) => {
            assert_eq!(log.len(), 2);
            assert!(log[0].error.contains("500") && log[1].error.contains("502"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(mock.calls(), 2);
}

#[test]
fn auth_failures_are_not_retried() {
    let mock = Arc::new(MockProvider::new(Transcript { server_side_n: false, rules: vec![rule("t", &["ok"], &[401])] }).unwrap());
    let client = Client::new(config(5), mock.clone()).with_clock(Arc::new(VirtualClock::default()));
    assert!(matches!(client.complete(&bundle("t"), &SAMPLING), Err(ClientError::Auth(_))));
    assert_eq!(mock.calls(), 1);
}

#[test]
fn warm_cache_makes_no_calls_and_replays_text() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = Transcript { server_side_n: false, rules: vec![rule("*", &["a", "b", "c"], &[])] };
    let sampling = SamplingParams { n: 15, ..SAMPLING };

    let cold_mock = Arc::new(MockProvider::new(transcript.clone()).unwrap());
    let cold = Client::new(config(0), cold_mock.clone()).with_cache(DiskCache::open(dir.path()).unwrap());
    let first = cold.complete(&bundle("t"), &sampling).unwrap();
    assert_eq!(first.iter().map(|r| r.sample_index).collect::<Vec<_>>(), (0..15).collect::<Vec<_>>());
    assert_eq!(cold_mock.calls(), 15);
    assert!(first.iter().all(|r| !r.from_cache));
    assert_eq!(first[4].text, "b");

    let warm_mock = Arc::new(MockProvider::new(transcript).unwrap());
    let warm = Client::new(config(0), warm_mock.clone()).with_cache(DiskCache::open(dir.path()).unwrap());
    let one = warm.complete(&bundle("t"), &SamplingParams { n: 1, ..SAMPLING }).unwrap();
    assert!(one[0].from_cache);
    let again = warm.complete(&bundle("t"), &sampling).unwrap();
    assert_eq!(warm_mock.calls(), 0);
    for (a, b) in first.iter().zip(&again) {
        assert_eq!((&a.text, a.sample_index, &a.usage), (&b.text, b.sample_index, &b.usage));
        assert!(b.from_cache);
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 15);

    // Different sampling settings do not share entries.
    let hotter = warm.complete(&bundle("t"), &SamplingParams { temperature: 1.0, ..SAMPLING }).unwrap();
    assert!(!hotter[0].from_cache);
}

#[test]
fn server_side_n_makes_one_call() {
    let transcript = Transcript { server_side_n: true, rules: vec![rule("*", &["x"], &[])] };
    let mock = Arc::new(MockProvider::new(transcript).unwrap());
    let cfg = ModelConfig { server_side_n: true, ..config(0) };
    let records = Client::new(cfg, mock.clone()).complete(&bundle("t"), &SamplingParams { n: 5, ..SAMPLING }).unwrap();
    assert_eq!(mock.calls(), 1);
    assert_eq!(records.len(), 5);
    assert_eq!(records.iter().map(|r| r.usage.api_calls).sum::<u64>(), 1);
    assert_eq!(records.iter().map(|r| r.usage.output_tokens).sum::<u64>(), 200);
    assert!(records.iter().all(|r| r.usage.input_tokens == 100));

    let per_sample = Arc::new(MockProvider::new(Transcript { server_side_n: false, rules: vec![rule("*", &["x"], &[])] }).unwrap());
    let records = Client::new(config(0), per_sample.clone()).complete(&bundle("t"), &SamplingParams { n: 5, ..SAMPLING }).unwrap();
    assert_eq!(per_sample.calls(), 5);
    assert_eq!(records.iter().map(|r| r.usage.api_calls).sum::<u64>(), 5);
}

#[test]
fn missing_usage_is_estimated_and_refusals_flagged() {
    let mut r = rule("*", &["I'm sorry, I can't assist with that."], &[]);
    r.usage = None;
    let mock = Arc::new(MockProvider::new(Transcript { server_side_n: false, rules: vec![r] }).unwrap());
    let b = bundle("t");
    let record = &Client::new(config(0), mock).complete(&b, &SAMPLING).unwrap()[0];
    assert!(record.refusal);
    assert!(record.usage.estimated);
    assert_eq!(record.usage.input_tokens, (b.user_text().chars().count() as u64).div_ceil(4));
    assert_eq!(record.usage.output_tokens, (record.text.chars().count() as u64).div_ceil(4));
}

#[test]
fn rule_lookup_order() {
    let b = bundle("t");
    let mut by_fp = rule(&b.params_fingerprint, &["fingerprint"], &[]);
    by_fp.contains = vec!["Return one".into()];
    let transcript = Transcript {
        server_side_n: false,
        rules: vec![rule("*", &["wildcard"], &[]), rule("t", &["task"], &[]), rule("t/normal", &["variant"], &[]), by_fp],
    };
    let client = Client::new(config(0), Arc::new(MockProvider::new(transcript).unwrap()));
    assert_eq!(client.complete(&b, &SAMPLING).unwrap()[0].text, "fingerprint");
    let other = build_prompt(StrategyKind::CoT, &task("t"), &M2WFParams::default(), None).unwrap();
    assert_eq!(client.complete(&other, &SAMPLING).unwrap()[0].text, "task");
    assert_eq!(client.complete(&bundle("u"), &SAMPLING).unwrap()[0].text, "wildcard");
}

proptest! {
    #[test]
    fn limiter_never_exceeds_window(limit in 1u32..12, requests in 1usize..60, gaps in prop::collection::vec(0u64..20_000, 60)) {
        let clock = VirtualClock::default();
        let limiter = RateLimiter::new(Some(limit));
        let mut stamps = Vec::new();
        for gap in gaps.iter().take(requests) {
            clock.advance(Duration::from_millis(*gap));
            limiter.acquire(&clock);
            stamps.push(clock.now());
        }
        for (i, start) in stamps.iter().enumerate() {
            let inside = stamps[i..].iter().filter(|t| **t < *start + RATE_WINDOW).count();
            prop_assert!(inside <= limit as usize);
        }
    }

    #[test]
    fn usage_summary_is_additive(a in prop::collection::vec((0u64..5000, 0u64..5000), 1..20), b in prop::collection::vec((0u64..5000, 0u64..5000), 1..20)) {
        let sample = |(i, o): &(u64, u64), req: usize| (format!("r{req}"), TokenUsage { input_tokens: *i, output_tokens: *o, api_calls: 1, estimated: false });
        let left: Vec<_> = a.iter().enumerate().map(|(k, x)| sample(x, k)).collect();
        let right: Vec<_> = b.iter().enumerate().map(|(k, x)| sample(x, k + 1000)).collect();
        let summarize = |rows: &[(String, TokenUsage)]| summarize_samples(rows.iter().map(|(req, usage)| UsageSample {
            model: "m", strategy: StrategyKind::M2WF, request: req, usage: *usage,
        })).unwrap().remove(0);
        let (sl, sr) = (summarize(&left), summarize(&right));
        let both: Vec<_> = left.iter().chain(&right).cloned().collect();
        let sb = summarize(&both);
        let weighted = (sl.mean_input() * a.len() as f64 + sr.mean_input() * b.len() as f64) / (a.len() + b.len()) as f64;
        prop_assert!((sb.mean_input() - weighted).abs() < 1e-9);
        let weighted = (sl.mean_output() * a.len() as f64 + sr.mean_output() * b.len() as f64) / (a.len() + b.len()) as f64;
        prop_assert!((sb.mean_output() - weighted).abs() < 1e-9);
    }
}

/// Serves one canned HTTP response per connection and returns the request bodies.
fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut length = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(format!("{auth}\n{}", String::from_utf8(buf).unwrap()));
            let mut stream = reader.into_inner();
            write!(stream, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn openai_wire_format() {
    let ok = r#"{"choices":[{"index":1,"message":{"content":"second"}},{"index":0,"message":{"content":"first"}}],"usage":{"prompt_tokens":12,"completion_tokens":34}}"#;
    let (url, server) = serve(vec![(200, ok.into()), (429, "{}".into()), (401, "{}".into())]);
    let provider = OpenAiProvider::new(url, Some("test-key".into()), Duration::from_secs(5), true);
    let b = bundle("t");
    let request = ProviderRequest { model: "gpt-x", bundle: &b, temperature: 0.8, top_p: 0.95, indices: &[0, 1] };
    let response = provider.complete(&request).unwrap();
    assert_eq!(response.choices, vec!["first", "second"]);
    assert_eq!(response.usage.unwrap().prompt_tokens, 12);
    assert!(matches!(provider.complete(&request), Err(ProviderError::Transient(_))));
    assert!(matches!(provider.complete(&request), Err(ProviderError::Auth(_))));
    let bodies = server.join().unwrap();
    let (auth, body) = bodies[0].split_once('\n').unwrap();
    assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer test-key");
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["model"], "gpt-x");
    assert_eq!(json["n"], 2);
    assert_eq!(json["top_p"], 0.95);
    assert_eq!(json["messages"][0]["role"], "user");
    assert_eq!(json["messages"][0]["content"], b.user_text());
}
