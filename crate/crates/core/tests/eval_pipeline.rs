use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use proptest::prelude::*;

use vizlint::bundled::bundled_tables;
use vizlint::eval::{
    parse_output, read_journal, run_eval, score, template_index, EndpointConfig, EvalRecord,
    Failure, HttpClient, MockClient, ModelClient, ModelRequest, Phrasing, QueryError,
};
use vizlint::genset::{generate_dataset, DatasetInstance, GenConfig};
use vizlint::rules::{rule_catalog, ViolationSet};

enum Reply {
    Status(u16, &'static str),
    Sleep(Duration),
}

/// Serve one scripted reply per connection; returns the base URL and the captured requests.
fn stub(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for reply in replies {
            let Ok((stream, _)) = listener.accept() else {
                return;
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
                head.push_str(&line);
            }
            let mut body = vec![0; length];
            let _ = reader.read_exact(&mut body);
            log.lock()
                .unwrap()
                .push(format!("{head}\n{}", String::from_utf8_lossy(&body)));
            let mut stream = stream;
            match reply {
                Reply::Status(code, text) => {
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                        text.len()
                    );
                }
                Reply::Sleep(d) => thread::sleep(d),
            }
        }
    });
    (url, seen)
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"[\"log_x\"]"}}]}"#;

fn request() -> ModelRequest<'static> {
    ModelRequest {
        prompt: "hello",
        instance_id: "vl-00000",
        repetition: 1,
    }
}

fn client(url: &str, timeout: Duration) -> HttpClient {
    HttpClient::new(url, "test-model", timeout).with_retries(2, Duration::from_millis(10))
}

#[test]
fn http_returns_completion_verbatim_and_sends_chat_body() {
    let (url, seen) = stub(vec![Reply::Status(200, OK)]);
    let c = client(&url, Duration::from_secs(5)).with_api_key(Some("secret".into()));
    assert_eq!(c.complete(&request()).unwrap(), r#"["log_x"]"#);
    let log = seen.lock().unwrap();
    let req = log[0].to_ascii_lowercase();
    assert!(req.starts_with("post /v1/chat/completions"));
    assert!(req.contains("authorization: bearer secret"));
    let body: serde_json::Value =
        serde_json::from_str(log[0].split("\n\n").last().unwrap()).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello");
    assert!(body.get("temperature").is_none());
}

#[test]
fn http_transport_errors_are_retried_twice() {
    let (url, seen) = stub(vec![
        Reply::Status(503, "busy"),
        Reply::Status(500, "oops"),
        Reply::Status(200, OK),
    ]);
    assert_eq!(
        client(&url, Duration::from_secs(5))
            .complete(&request())
            .unwrap(),
        r#"["log_x"]"#
    );
    assert_eq!(seen.lock().unwrap().len(), 3);

    let (url, seen) = stub((0..3).map(|_| Reply::Status(500, "down")).collect());
    assert!(matches!(
        client(&url, Duration::from_secs(5)).complete(&request()),
        Err(QueryError::Transport(_))
    ));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_malformed_envelope() {
    let (url, _) = stub(vec![Reply::Status(200, r#"{"result":"[]"}"#)]);
    assert!(matches!(
        client(&url, Duration::from_secs(5)).complete(&request()),
        Err(QueryError::MalformedResponseEnvelope(_))
    ));
}

#[test]
fn http_timeout_is_reported_and_not_retried() {
    let (url, seen) = stub(vec![
        Reply::Sleep(Duration::from_secs(2)),
        Reply::Status(200, OK),
    ]);
    match client(&url, Duration::from_millis(300)).complete(&request()) {
        Err(QueryError::Timeout { elapsed }) => assert!(elapsed >= 0.25),
        other => panic!("expected timeout, got {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_records_transport_failures() {
    let (data, tables) = dataset(3);
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let c = HttpClient::new(
        &format!("http://127.0.0.1:{port}"),
        "m",
        Duration::from_secs(2),
    )
    .with_retries(0, Duration::ZERO);
    let run = run_eval(&data, &tables, &c, &endpoint(2), Phrasing::Natural, None).unwrap();
    assert_eq!(run.records.len(), 6);
    assert!(run
        .records
        .iter()
        .all(|r| r.failure == Some(Failure::Transport) && !r.adherent));
    assert!(!run.warnings.is_empty());
}

fn dataset(n: usize) -> (Vec<DatasetInstance>, Vec<vizlint::data::DataTable>) {
    let tables = bundled_tables();
    let config = GenConfig {
        target_size: n,
        seed: 21,
        ..GenConfig::default()
    };
    (
        generate_dataset(&config, &tables).unwrap().instances,
        tables,
    )
}

fn endpoint(k: u32) -> EndpointConfig {
    EndpointConfig {
        k,
        seed: 8,
        parallel: 3,
        ..EndpointConfig::default()
    }
}

fn truth(data: &[DatasetInstance]) -> BTreeMap<String, ViolationSet> {
    data.iter()
        .map(|i| (i.id.clone(), i.violations.clone()))
        .collect()
}

#[test]
fn oracle_run_is_perfect_and_ordered() {
    let (data, tables) = dataset(2);
    let mock = MockClient::Oracle(MockClient::truth_from(&data));
    let run = run_eval(&data, &tables, &mock, &endpoint(3), Phrasing::Natural, None).unwrap();
    assert_eq!(run.records.len(), 6);
    assert!(run
        .records
        .iter()
        .all(|r| r.adherent && r.failure.is_none()));
    let keys: Vec<(String, u32)> = run
        .records
        .iter()
        .map(|r| (r.instance_id.clone(), r.repetition))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let m = score(&run.records, &truth(&data)).unwrap();
    assert_eq!(m.global_avg, Some(1.0));
    assert!(m.per_problem_f1.values().all(|f| *f == 1.0));
}

#[test]
fn template_assignment_is_seeded_not_scheduled() {
    let (data, tables) = dataset(20);
    let mock = MockClient::Empty;
    let a = run_eval(&data, &tables, &mock, &endpoint(3), Phrasing::Natural, None).unwrap();
    let b = run_eval(
        &data,
        &tables,
        &mock,
        &EndpointConfig {
            parallel: 1,
            ..endpoint(3)
        },
        Phrasing::Formal,
        None,
    )
    .unwrap();
    let ta: Vec<usize> = a.records.iter().map(|r| r.template_index).collect();
    let tb: Vec<usize> = b.records.iter().map(|r| r.template_index).collect();
    assert_eq!(ta, tb);
    for r in &a.records {
        assert_eq!(
            r.template_index,
            template_index(8, &r.instance_id, r.repetition)
        );
    }
    let c = run_eval(
        &data,
        &tables,
        &mock,
        &EndpointConfig {
            seed: 9,
            ..endpoint(3)
        },
        Phrasing::Natural,
        None,
    )
    .unwrap();
    assert_ne!(
        ta,
        c.records
            .iter()
            .map(|r| r.template_index)
            .collect::<Vec<_>>()
    );
}

#[test]
fn prose_mock_is_never_adherent() {
    let (data, tables) = dataset(4);
    let run = run_eval(
        &data,
        &tables,
        &MockClient::Prose,
        &endpoint(2),
        Phrasing::Natural,
        None,
    )
    .unwrap();
    assert!(run
        .records
        .iter()
        .all(|r| !r.adherent && r.failure == Some(Failure::Parse) && r.parsed.is_none()));
    let m = score(&run.records, &truth(&data)).unwrap();
    assert_eq!(m.adherence, 0.0);
    assert_eq!(m.global_avg, Some(0.0));
}

/// Counts requests and fails the run's scheduling if any key is asked twice.
struct Counting<'a> {
    inner: &'a MockClient,
    calls: Mutex<HashMap<(String, u32), usize>>,
}

impl ModelClient for Counting<'_> {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, QueryError> {
        *self
            .calls
            .lock()
            .unwrap()
            .entry((request.instance_id.to_owned(), request.repetition))
            .or_default() += 1;
        self.inner.complete(request)
    }
}

#[test]
fn interrupted_runs_resume_from_the_journal() {
    let (data, tables) = dataset(6);
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("records.jsonl");
    let oracle = MockClient::Oracle(MockClient::truth_from(&data));
    let full = run_eval(
        &data,
        &tables,
        &oracle,
        &endpoint(2),
        Phrasing::Natural,
        Some(&journal),
    )
    .unwrap();

    // keep five records and a torn final line
    let text = std::fs::read_to_string(&journal).unwrap();
    let mut kept: Vec<&str> = text.lines().take(5).collect();
    kept.push("{\"instance_id\":\"vl-000");
    std::fs::write(&journal, kept.join("\n")).unwrap();
    assert_eq!(read_journal(&journal).unwrap().len(), 5);

    let counting = Counting {
        inner: &oracle,
        calls: Mutex::new(HashMap::new()),
    };
    let resumed = run_eval(
        &data,
        &tables,
        &counting,
        &endpoint(2),
        Phrasing::Natural,
        Some(&journal),
    )
    .unwrap();
    assert_eq!(resumed.resumed, 5);
    let calls = counting.calls.lock().unwrap();
    assert_eq!(calls.len(), 7);
    assert!(calls.values().all(|c| *c == 1));
    let strip = |rs: &[EvalRecord]| {
        rs.iter()
            .map(|r| (r.key().0.to_owned(), r.key().1, r.parsed.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&resumed.records), strip(&full.records));
}

#[test]
fn metrics_ignore_dataset_order() {
    let (data, tables) = dataset(30);
    let truth_map = MockClient::truth_from(&data);
    let noisy = MockClient::Noisy {
        p: 0.1,
        truth: truth_map,
    };
    let forward = run_eval(
        &data,
        &tables,
        &noisy,
        &endpoint(3),
        Phrasing::Natural,
        None,
    )
    .unwrap();
    let mut reversed_data = data.clone();
    reversed_data.reverse();
    let backward = run_eval(
        &reversed_data,
        &tables,
        &noisy,
        &endpoint(3),
        Phrasing::Natural,
        None,
    )
    .unwrap();
    let a = score(&forward.records, &truth(&data)).unwrap();
    let b = score(&backward.records, &truth(&data)).unwrap();
    assert_eq!(a, b);
    let g = a.global_avg.unwrap();
    assert!(g > 0.0 && g < 1.0);
}

#[test]
fn missing_truth_and_duplicates_are_errors() {
    let rec = |id: &str| EvalRecord {
        instance_id: id.into(),
        repetition: 1,
        template_index: 1,
        raw_output: "[]".into(),
        parsed: Some(vec![]),
        adherent: true,
        latency: 0.0,
        failure: None,
        error: None,
    };
    let truth = BTreeMap::from([("a".to_owned(), ViolationSet::new())]);
    assert!(matches!(
        score(&[rec("b")], &truth),
        Err(vizlint::eval::EvalError::MissingGroundTruth(_))
    ));
    assert!(matches!(
        score(&[rec("a"), rec("a")], &truth),
        Err(vizlint::eval::EvalError::DuplicateRecord { .. })
    ));
}

#[test]
fn sample_std_across_repetitions() {
    let truth = BTreeMap::from([("a".to_owned(), ViolationSet::from_names(["log_x"]).unwrap())]);
    let rec = |rep: u32, out: &str| EvalRecord {
        instance_id: "a".into(),
        repetition: rep,
        template_index: 1,
        raw_output: out.into(),
        parsed: parse_output(out).ok(),
        adherent: true,
        latency: 0.0,
        failure: None,
        error: None,
    };
    let m = score(&[rec(1, r#"["log_x"]"#), rec(2, "[]")], &truth).unwrap();
    assert_eq!(m.per_problem_f1["log_x"], 0.5);
    assert!((m.per_problem_std["log_x"] - 0.5f64.sqrt()).abs() < 1e-12);
    assert_eq!(m.repetitions, vec![1, 2]);
}

fn names_strategy() -> impl Strategy<Value = Vec<String>> {
    proptest::sample::subsequence(
        rule_catalog()
            .iter()
            .map(|d| d.name.to_owned())
            .collect::<Vec<_>>(),
        0..8,
    )
}

proptest! {
    #[test]
    fn rendered_violation_sets_parse_back(names in names_strategy()) {
        let set = ViolationSet::from_names(&names).unwrap();
        let parsed = parse_output(&set.to_string()).unwrap();
        prop_assert_eq!(ViolationSet::from_names(parsed).unwrap(), set);
    }

    /// Marking a record non-adherent never raises F1 of rules in its ground truth.
    #[test]
    fn non_adherence_never_helps(truths in proptest::collection::vec(names_strategy(), 1..6),
                                 preds in proptest::collection::vec(names_strategy(), 6),
                                 flip in 0usize..6) {
        let truth: BTreeMap<String, ViolationSet> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("i{i}"), ViolationSet::from_names(t).unwrap()))
            .collect();
        let records: Vec<EvalRecord> = truths
            .iter()
            .enumerate()
            .map(|(i, _)| EvalRecord {
                instance_id: format!("i{i}"),
                repetition: 1,
                template_index: 1,
                raw_output: String::new(),
                parsed: Some(preds[i].clone()),
                adherent: true,
                latency: 0.0,
                failure: None,
                error: None,
            })
            .collect();
        let flip = flip % records.len();
        let mut flipped = records.clone();
        flipped[flip].adherent = false;
        flipped[flip].parsed = None;
        flipped[flip].failure = Some(Failure::Parse);
        let before = score(&records, &truth).unwrap();
        let after = score(&flipped, &truth).unwrap();
        for name in truth[&format!("i{flip}")].iter() {
            prop_assert!(after.per_problem_f1[name] <= before.per_problem_f1[name] + 1e-12);
        }
        for v in after.per_problem_f1.values().chain(after.per_category_avg.values()) {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
