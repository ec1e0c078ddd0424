//! Wire contracts for the policy, value and sandbox services, checked
//! against a tiny in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use nbmcts_core::gateway::{
    estimate_value, generate_candidates, GatewayError, HeuristicTokens, HttpPolicy, HttpValueEstimator, Message,
    Policy, RetryPolicy, SamplingParams, ValueEstimator, VALUE_INPUT_BUDGET,
};
use nbmcts_core::sandbox::{ExecStatus, Executor, HttpExecutor, SessionSpec};
use nbmcts_core::trajectory::{PathLabel, TrajectoryRecord};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Seen) -> (u16, String) + Send + Sync;

struct Server {
    base: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Server {
    fn start(handler: Box<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                    continue;
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut len = 0usize;
                let mut auth = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (k, v) = line.split_once(':').unwrap();
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => auth = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let req = Seen { path, auth, body: serde_json::from_slice(&body).unwrap_or(Value::Null) };
                let n = {
                    let mut l = log.lock().unwrap();
                    l.push(req.clone());
                    l.len() - 1
                };
                let (status, text) = handler(n, &req);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        Self { base, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn conversation() -> Vec<Message> {
    vec![Message::system("sys"), Message::user("What is 2+2?")]
}

fn chat_reply(texts: &[&str]) -> String {
    let choices: Vec<Value> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"index": i, "message": {"role": "assistant", "content": t}, "finish_reason": "stop"}))
        .collect();
    json!({ "choices": choices }).to_string()
}

#[test]
fn policy_request_shape_and_top_up() {
    // a server that ignores `n` and returns one choice per call
    let server = Server::start(Box::new(|i, _| (200, chat_reply(&[&format!("Thought: t{i}\nFormatted answer: @x[{i}]")]))));
    let policy = HttpPolicy::new(&server.base, "m-1", Some("sekret".into())).with_retry(RetryPolicy::fast());
    assert!(policy.url().ends_with("/v1/chat/completions"));
    let params = SamplingParams { n: 3, seed: Some(11), ..SamplingParams::default() };
    let got = generate_candidates(&policy, &conversation(), &params).unwrap();
    assert_eq!(got.len(), 3);
    assert_eq!(got[2].text, "Thought: t2\nFormatted answer: @x[2]");

    let reqs = server.requests();
    assert_eq!(reqs.len(), 3);
    let first = &reqs[0];
    assert_eq!(first.path, "/v1/chat/completions");
    assert_eq!(first.auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(first.body["model"], "m-1");
    assert_eq!(first.body["messages"], json!([{"role":"system","content":"sys"},{"role":"user","content":"What is 2+2?"}]));
    assert_eq!(first.body["n"], 3);
    assert_eq!(first.body["temperature"], 1.0);
    assert_eq!(first.body["top_p"], 0.95);
    assert_eq!(first.body["max_tokens"], 8192);
    assert_eq!(first.body["seed"], 11);
    // later calls ask only for what is still missing
    assert_eq!(reqs[1].body["n"], 2);
    assert_ne!(reqs[1].body["seed"], reqs[0].body["seed"]);
}

#[test]
fn policy_logprobs_become_mean() {
    let server = Server::start(Box::new(|_, _| {
        let body = json!({"choices": [{
            "message": {"role": "assistant", "content": "x"},
            "logprobs": {"content": [{"token": "a", "logprob": -1.0}, {"token": "b", "logprob": -3.0}]}
        }]});
        (200, body.to_string())
    }));
    let policy = HttpPolicy::new(&server.base, "m", None).with_retry(RetryPolicy::fast());
    let params = SamplingParams { n: 1, logprobs: true, ..SamplingParams::default() };
    let got = policy.sample(&conversation(), &params).unwrap();
    assert_eq!(got[0].mean_logprob, Some(-2.0));
    let reqs = server.requests();
    assert_eq!(reqs[0].body["logprobs"], true);
    assert!(reqs[0].auth.is_none());
}

#[test]
fn server_errors_retry_then_fail() {
    let server = Server::start(Box::new(|_, _| (500, "{\"error\":\"boom\"}".into())));
    let policy = HttpPolicy::new(&server.base, "m", None).with_retry(RetryPolicy::fast());
    let err = policy.sample(&conversation(), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::ServiceUnavailable { attempts: 3, .. }), "{err}");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn rate_limit_is_retried() {
    let server = Server::start(Box::new(|i, _| if i == 0 { (429, "{}".into()) } else { (200, chat_reply(&["ok"])) }));
    let policy = HttpPolicy::new(&server.base, "m", None).with_retry(RetryPolicy::fast());
    let got = policy.sample(&conversation(), &SamplingParams { n: 1, ..SamplingParams::default() }).unwrap();
    assert_eq!(got[0].text, "ok");
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let server = Server::start(Box::new(|_, _| (400, "{\"error\":\"bad\"}".into())));
    let policy = HttpPolicy::new(&server.base, "m", None).with_retry(RetryPolicy::fast());
    let err = policy.sample(&conversation(), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::Rejected { status: 400, .. }), "{err}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn malformed_policy_body_is_reported() {
    let server = Server::start(Box::new(|_, _| (200, "{\"nope\":1}".into())));
    let policy = HttpPolicy::new(&server.base, "m", None).with_retry(RetryPolicy::fast());
    let err = policy.sample(&conversation(), &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, GatewayError::MalformedResponse { .. }));
}

#[test]
fn score_contract() {
    let server = Server::start(Box::new(|i, _| match i {
        0 => (200, "{\"value\": 0.25}".into()),
        1 => (200, "{\"value\": 1.7}".into()),
        _ => (200, "{\"score\": 0.1}".into()),
    }));
    let value = HttpValueEstimator::new(&server.base, Some("vk".into())).with_retry(RetryPolicy::fast());
    assert!(value.url().ends_with("/score"));
    assert_eq!(value.score(&conversation()).unwrap(), 0.25);
    // out-of-range scores are clamped by the caller
    assert_eq!(estimate_value(&value, &conversation(), VALUE_INPUT_BUDGET, &HeuristicTokens).unwrap(), 1.0);
    assert!(matches!(value.score(&conversation()), Err(GatewayError::MalformedResponse { .. })));

    let reqs = server.requests();
    assert_eq!(reqs[0].path, "/score");
    assert_eq!(reqs[0].auth.as_deref(), Some("Bearer vk"));
    assert_eq!(reqs[0].body, json!({"messages": [{"role":"system","content":"sys"},{"role":"user","content":"What is 2+2?"}]}));
}

#[test]
fn score_input_is_truncated_to_budget() {
    let server = Server::start(Box::new(|_, _| (200, "{\"value\": 0.0}".into())));
    let value = HttpValueEstimator::new(&server.base, None).with_retry(RetryPolicy::fast());
    let mut conv = conversation();
    for i in 0..40 {
        conv.push(Message::assistant(format!("{i} {}", "x".repeat(400))));
    }
    estimate_value(&value, &conv, 1_000, &HeuristicTokens).unwrap();
    let sent = server.requests()[0].body["messages"].as_array().unwrap().len();
    assert!(sent < conv.len());
    assert_eq!(server.requests()[0].body["messages"][1]["content"], "What is 2+2?");
}

#[test]
fn run_code_contract() {
    let server = Server::start(Box::new(|_, req| {
        let n = req.body["cells"].as_array().map_or(0, Vec::len);
        let mut results: Vec<Value> = (0..n.saturating_sub(1))
            .map(|_| json!({"status":"ok","stdout":"","stderr":"","error_name":null,"duration_ms":1,"truncated":false}))
            .collect();
        results.push(json!({"status":"error","stdout":"","stderr":"Traceback","error_name":"ZeroDivisionError","duration_ms":2,"truncated":false}));
        (200, json!({ "results": results }).to_string())
    }));
    let exec = HttpExecutor::new(&server.base).with_retry(RetryPolicy::fast());
    let spec = SessionSpec { data_dir: Some("/data/t1".into()), ..SessionSpec::default() };
    let out = exec.run_cells(&spec, &["x = 1".into(), "1/0".into()]).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].status, ExecStatus::Error);
    assert_eq!(out[1].error_name.as_deref(), Some("ZeroDivisionError"));
    let req = &server.requests()[0];
    assert_eq!(req.path, "/run_code");
    assert_eq!(req.body["cells"], json!(["x = 1", "1/0"]));
    assert_eq!(req.body["timeout"], 180.0);
    assert_eq!(req.body["data_dir"], "/data/t1");
}

#[test]
fn trajectory_record_schema() {
    let rec = TrajectoryRecord {
        task_id: "t".into(),
        node_id: 3,
        path_label: PathLabel::Incorrect,
        q_value: -0.5,
        conversation: vec![Message::user("q"), Message::assistant("a")],
    };
    let line = serde_json::to_string(&rec).unwrap();
    assert_eq!(
        line,
        r#"{"task_id":"t","node_id":3,"path_label":"incorrect","q_value":-0.5,"conversation":[{"role":"user","content":"q"},{"role":"assistant","content":"a"}]}"#
    );
    let back: TrajectoryRecord = serde_json::from_str(&line).unwrap();
    assert_eq!(back, rec);
}
