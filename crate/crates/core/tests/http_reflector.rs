use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use espl::population::NodeId;
use espl::reflect::{self, CrossoverEvidence, Edit, EditScript, HttpReflector, Reflector, Templates};
use espl::rollout::{Grader, Problem, Trajectory, TrajectoryContent};
use espl::transport::{
    ChatMessage, ChatRequest, ChatTransport, HttpConfig, HttpTransport, RecordingTransport, ReplayTransport,
    TransportError,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Minimal chat-completions server. `reply(n, body)` returns the status and
/// the assistant content for the n-th request (0-based).
fn serve(reply: impl Fn(usize, &Value) -> (u16, String) + Send + 'static) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut length, mut auth) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let n = {
                let mut log = log.lock().unwrap();
                log.push(Seen { auth, body: body.clone() });
                log.len() - 1
            };
            let (status, content) = reply(n, &body);
            let payload = if status == 200 {
                json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
            } else {
                json!({"error": content}).to_string()
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, seen)
}

fn config(url: &str) -> HttpConfig {
    HttpConfig {
        endpoint: url.into(),
        api_key_env: None,
        max_retries: 2,
        timeout_secs: 10.0,
        backoff_base_ms: 1,
        max_in_flight: 2,
    }
}

fn hello() -> ChatRequest {
    ChatRequest { model: "m".into(), messages: vec![ChatMessage::user("hello")], temperature: 0.0 }
}

#[test]
fn retries_rate_limits_then_succeeds_with_auth() {
    std::env::set_var("ESPL_TEST_TOKEN", "sekrit");
    let (url, seen) = serve(|n, _| if n == 0 { (429, "slow down".into()) } else { (200, "hi there".into()) });
    let transport = HttpTransport::new(HttpConfig { api_key_env: Some("ESPL_TEST_TOKEN".into()), ..config(&url) }).unwrap();
    assert_eq!(transport.complete(&hello()).unwrap(), "hi there");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert!(seen.iter().all(|s| s.auth.as_deref() == Some("Bearer sekrit")));
    assert_eq!(seen[0].body["model"], "m");
    assert_eq!(seen[0].body["messages"][0]["content"], "hello");
}

#[test]
fn server_errors_exhaust_retries() {
    let (url, seen) = serve(|_, _| (503, "down".into()));
    let err = HttpTransport::new(config(&url)).unwrap().complete(&hello()).unwrap_err();
    assert!(matches!(err, TransportError::Exhausted { attempts: 3, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(|_, _| (400, "bad request".into()));
    let err = HttpTransport::new(config(&url)).unwrap().complete(&hello()).unwrap_err();
    assert!(matches!(err, TransportError::Status { status: 400, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unparseable_reply_gets_one_repair_turn() {
    let good = "```json\n{\"diagnosis\": \"d\", \"edits\": [{\"op\": \"add\", \"text\": \"Check units.\"}]}\n```";
    let (url, seen) = serve(move |n, _| (200, if n == 0 { "I think you should check units.".into() } else { good.into() }));
    let backend = reflector(Arc::new(HttpTransport::new(config(&url)).unwrap()));
    let (problem, _) = case();
    let summaries = vec![
        reflect::TrajectorySummary { success: true, reward: 1.0, text: "ok".into() },
        reflect::TrajectorySummary { success: false, reward: 0.0, text: "bad".into() },
    ];
    let lesson = reflect::critique(&backend, &summaries, PROMPT, &problem, 2).unwrap();
    assert_eq!(lesson.edits, vec![Edit::Add { text: "Check units.".into() }]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let repair = seen[1].body["messages"].as_array().unwrap();
    assert_eq!(repair.len(), 3);
    assert_eq!(repair[1]["role"], "assistant");
}

#[test]
fn persistent_garbage_is_a_parse_error() {
    let (url, seen) = serve(|_, _| (200, "no json at all".into()));
    let backend = reflector(Arc::new(HttpTransport::new(config(&url)).unwrap()));
    let err = backend.aggregate(PROMPT, &[]).unwrap_err();
    assert!(matches!(err, reflect::ReflectError::Parse(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn long_critiques_are_capped_at_k_ops() {
    let edits: Vec<Value> = (0..5).map(|i| json!({"op": "add", "text": format!("Rule {i}.")})).collect();
    let reply = format!("```json\n{}\n```", json!({"diagnosis": "many", "edits": edits}));
    let (url, _) = serve(move |_, _| (200, reply.clone()));
    let backend = reflector(Arc::new(HttpTransport::new(config(&url)).unwrap()));
    let (problem, _) = case();
    let summaries = vec![
        reflect::TrajectorySummary { success: true, reward: 1.0, text: "ok".into() },
        reflect::TrajectorySummary { success: false, reward: 0.0, text: "bad".into() },
    ];
    let lesson = reflect::critique(&backend, &summaries, PROMPT, &problem, 2).unwrap();
    assert_eq!(lesson.edits.len(), 2);
    assert_eq!(lesson.edits[1], Edit::Add { text: "Rule 1.".into() });
}

// Replay fixture: one pass through every reflection stage.

const PROMPT: &str = "You are a careful problem solver.\n1. Read the problem statement closely.\n2. Check the final answer.";
const OTHER: &str = "You are a careful problem solver.\n1. Break the problem into independent parts.";

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/reflector_replay.jsonl")
}

fn reflector(transport: Arc<dyn ChatTransport>) -> HttpReflector {
    HttpReflector::new(transport, "reference", 0.0, Templates::builtin())
}

fn case() -> (Problem, Vec<Trajectory>) {
    let problem = Problem {
        id: "sum-of-digits".into(),
        payload: "What is the sum of the digits of 2^10?".into(),
        grader: Grader::ExactMatch { target: "7".into() },
    };
    let rollouts = [("2^10 = 1024, digits sum to 7. Answer: 7", 1.0), ("2^10 = 1000. Answer: 1", 0.0), ("1024 -> 1+0+2+4 = 7. Answer: 7", 1.0)]
        .into_iter()
        .map(|(text, reward)| Trajectory {
            prompt_id: NodeId(0),
            problem_id: problem.id.clone(),
            content: TrajectoryContent::Text(text.into()),
            reward,
        })
        .collect();
    (problem, rollouts)
}

fn evidence() -> Vec<CrossoverEvidence> {
    vec![
        CrossoverEvidence { prompt_id: NodeId(0), prompt_text: PROMPT.into(), won_problems: vec!["sum-of-digits".into()] },
        CrossoverEvidence { prompt_id: NodeId(3), prompt_text: OTHER.into(), won_problems: vec!["tiling".into()] },
    ]
}

/// Runs every stage through the public wrappers and returns their outputs.
fn drive(backend: &dyn Reflector) -> (Vec<reflect::TrajectorySummary>, reflect::ReflectionLesson, EditScript, Option<EditScript>) {
    let (problem, rollouts) = case();
    let summaries = reflect::summarize_trajectories(backend, PROMPT, &problem, &rollouts).unwrap();
    let lesson = reflect::critique(backend, &summaries, PROMPT, &problem, 2).unwrap();
    let script = reflect::aggregate(backend, PROMPT, std::slice::from_ref(&lesson), 500).unwrap();
    let cross = reflect::crossover_reflect(backend, NodeId(0), PROMPT, &evidence(), 500).unwrap();
    (summaries, lesson, script, cross)
}

fn scripted_reply(body: &Value) -> String {
    let prompt = body["messages"][0]["content"].as_str().unwrap();
    let block = if prompt.starts_with("You are reviewing rollouts") {
        json!({"summaries": [
            {"text": "Expanded 2^10 correctly and added the digits."},
            {"text": "Miscomputed 2^10 as 1000 and never checked it."},
            {"text": "Wrote out 1024 and summed digit by digit."}
        ]})
    } else if prompt.starts_with("Some of these attempts") {
        json!({"diagnosis": "The failure skipped verifying an intermediate power.",
               "edits": [{"op": "modify", "index": 1, "text": "Verify every intermediate value before giving the final answer."}]})
    } else if prompt.starts_with("Several reflections") {
        json!({"edits": [{"op": "merge", "indices": [0, 1], "text": "Read closely and verify every intermediate value."}]})
    } else {
        json!({"edits": [{"op": "add", "text": "Break the problem into independent parts."}]})
    };
    format!("Here is my answer.\n```json\n{block:#}\n```")
}

/// Regenerates the committed fixture. Point `ESPL_RECORD_ENDPOINT` at a
/// live endpoint to record real replies; otherwise a scripted local server
/// answers.
#[test]
#[ignore = "rewrites tests/fixtures/reflector_replay.jsonl"]
fn record_replay_fixture() {
    let path = fixture_path();
    let _ = std::fs::remove_file(&path);
    let url = std::env::var("ESPL_RECORD_ENDPOINT").unwrap_or_else(|_| serve(|_, body| (200, scripted_reply(body))).0);
    let http = HttpTransport::new(HttpConfig { api_key_env: Some("OPENAI_API_KEY".into()), ..config(&url) }).unwrap();
    let backend = reflector(Arc::new(RecordingTransport::new(http, &path).unwrap()));
    drive(&backend);
}

#[test]
fn replay_fixture_drives_every_stage() {
    let replay = ReplayTransport::open(fixture_path()).unwrap();
    let backend = reflector(Arc::new(replay));
    let (summaries, lesson, script, cross) = drive(&backend);

    assert_eq!(summaries.len(), 3);
    assert_eq!(summaries.iter().map(|s| s.success).collect::<Vec<_>>(), [true, false, true]);
    assert_eq!(summaries[1].text, "Miscomputed 2^10 as 1000 and never checked it.");

    assert_eq!(lesson.problem_id, "sum-of-digits");
    assert_eq!(
        lesson.edits,
        vec![Edit::Modify { index: 1, text: "Verify every intermediate value before giving the final answer.".into() }]
    );

    assert_eq!(
        script.edits,
        vec![Edit::Merge { indices: vec![0, 1], text: "Read closely and verify every intermediate value.".into() }]
    );
    let round_trip: EditScript = serde_json::from_str(&serde_json::to_string(&script).unwrap()).unwrap();
    assert_eq!(round_trip, script);
    assert_eq!(
        reflect::apply_edits(PROMPT, &script).unwrap(),
        "You are a careful problem solver.\n1. Read closely and verify every intermediate value."
    );

    assert_eq!(
        cross.unwrap().edits,
        vec![Edit::Add { text: "Break the problem into independent parts.".into() }]
    );
}
