use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use dreamforge::model::{
    ErrorClass, GenerationRequest, ModelClient, OpenAiCompatProvider, PromptCache, Provider, HTTP_PROVIDER,
    MAX_ATTEMPTS,
};
use dreamforge::{Error, GenerationConfig, Mode, ModelRef, ProviderRegistry};
use serde_json::{json, Value as Json};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Json,
}

/// Answers each request with the next scripted `(status, body)`; the last
/// entry repeats once the script runs out.
struct Server {
    endpoint: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Server {
    fn start(script: Vec<(u16, Json)>) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let mut script: VecDeque<(u16, Json)> = script.into();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                    continue;
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
                let mut length = 0;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen {
                    path,
                    authorization,
                    body: serde_json::from_slice(&body).unwrap_or(Json::Null),
                });
                let (status, reply) = if script.len() > 1 {
                    script.pop_front().unwrap()
                } else {
                    script.front().cloned().unwrap()
                };
                let reply = reply.to_string();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        Server { endpoint, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn chat_reply(text: &str) -> Json {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
}

fn provider() -> OpenAiCompatProvider {
    OpenAiCompatProvider::new()
        .with_retry_unit(Duration::from_millis(1))
        .with_timeout(Duration::from_secs(10))
}

/// A model pointing at `server` whose key lives in a per-test variable.
fn model(server: &Server, var: &str) -> ModelRef {
    std::env::set_var(var, "sk-test");
    ModelRef::openai_compatible(&server.endpoint, "gpt-test").with_api_key_env(var)
}

fn ask(p: &OpenAiCompatProvider, m: &ModelRef, cfg: &GenerationConfig) -> dreamforge::Result<String> {
    p.generate(
        m,
        &GenerationRequest {
            system_prompt: Some("Be brief."),
            prompt: "hello",
            config: cfg,
        },
    )
}

fn class_of(e: &Error) -> Option<ErrorClass> {
    match e {
        Error::Provider { class, .. } => Some(*class),
        _ => None,
    }
}

#[test]
fn chat_request_shape_and_reply() {
    let server = Server::start(vec![(200, chat_reply("hi there"))]);
    let m = model(&server, "DF_TEST_KEY_SHAPE");
    let cfg = GenerationConfig {
        temperature: 0.5,
        max_tokens: 32,
        seed: Some(3),
        stop: Some(vec!["\n".into()]),
    };
    assert_eq!(ask(&provider(), &m, &cfg).unwrap(), "hi there");
    let seen = server.requests();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(
        seen[0].body,
        json!({
            "model": "gpt-test",
            "messages": [{"role": "system", "content": "Be brief."}, {"role": "user", "content": "hello"}],
            "temperature": 0.5,
            "max_tokens": 32,
            "seed": 3,
            "stop": ["\n"],
        })
    );
}

#[test]
fn transient_failures_are_retried() {
    let server = Server::start(vec![
        (429, json!({"error": "slow down"})),
        (503, json!({"error": "busy"})),
        (200, chat_reply("finally")),
    ]);
    let m = model(&server, "DF_TEST_KEY_RETRY");
    assert_eq!(ask(&provider(), &m, &GenerationConfig::default()).unwrap(), "finally");
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn persistent_rate_limiting_gives_up() {
    let server = Server::start(vec![(429, json!({"error": "slow down"}))]);
    let m = model(&server, "DF_TEST_KEY_GIVEUP");
    let err = ask(&provider(), &m, &GenerationConfig::default()).unwrap_err();
    assert_eq!(class_of(&err), Some(ErrorClass::RateLimited));
    assert_eq!(server.requests().len(), MAX_ATTEMPTS as usize);
}

#[test]
fn client_errors_are_not_retried() {
    for (status, class) in [(401, ErrorClass::Auth), (403, ErrorClass::Auth), (400, ErrorClass::BadRequest)] {
        let server = Server::start(vec![(status, json!({"error": "no"}))]);
        let m = model(&server, "DF_TEST_KEY_CLIENT");
        let err = ask(&provider(), &m, &GenerationConfig::default()).unwrap_err();
        assert_eq!(class_of(&err), Some(class), "status {status}");
        assert_eq!(server.requests().len(), 1);
    }
}

#[test]
fn malformed_reply_is_a_bad_response() {
    let server = Server::start(vec![(200, json!({"choices": []}))]);
    let m = model(&server, "DF_TEST_KEY_BADRESP");
    let err = ask(&provider(), &m, &GenerationConfig::default()).unwrap_err();
    assert_eq!(class_of(&err), Some(ErrorClass::BadResponse));
}

#[test]
fn missing_key_fails_without_a_request() {
    let server = Server::start(vec![(200, chat_reply("x"))]);
    let m = ModelRef::openai_compatible(&server.endpoint, "gpt-test").with_api_key_env("DF_TEST_KEY_NEVER_SET");
    let err = ask(&provider(), &m, &GenerationConfig::default()).unwrap_err();
    assert!(matches!(err, Error::AuthMissing(ref v) if v == "DF_TEST_KEY_NEVER_SET"));
    assert!(server.requests().is_empty());
}

#[test]
fn unreachable_endpoint_is_a_network_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    std::env::set_var("DF_TEST_KEY_NET", "k");
    let m = ModelRef::openai_compatible(format!("http://127.0.0.1:{port}"), "gpt").with_api_key_env("DF_TEST_KEY_NET");
    let err = ask(&provider(), &m, &GenerationConfig::default()).unwrap_err();
    assert_eq!(class_of(&err), Some(ErrorClass::Network));
}

#[test]
fn embeddings_come_back_in_input_order() {
    let server = Server::start(vec![(
        200,
        json!({"data": [
            {"index": 1, "embedding": [0.5, 0.25]},
            {"index": 0, "embedding": [1.0, 2.0]},
        ]}),
    )]);
    let m = model(&server, "DF_TEST_KEY_EMBED");
    let got = provider().embed(&m, &["a".into(), "b".into()]).unwrap();
    assert_eq!(got, vec![vec![1.0, 2.0], vec![0.5, 0.25]]);
    let seen = server.requests();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "gpt-test", "input": ["a", "b"]}));
}

#[test]
fn client_caches_http_completions() {
    let server = Server::start(vec![(200, chat_reply("cached answer"))]);
    let m = model(&server, "DF_TEST_KEY_CLIENTCACHE");
    let registry = ProviderRegistry::with_defaults();
    registry.register(HTTP_PROVIDER, Arc::new(provider()));
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(PromptCache::open(&dir.path().join("prompts.db")).unwrap());
    let client = ModelClient::new(registry.clone(), cache.clone(), Mode::Live);
    let cfg = GenerationConfig::default();
    assert_eq!(client.generate(&m, None, "q", &cfg).unwrap(), "cached answer");
    assert_eq!(client.generate(&m, None, "q", &cfg).unwrap(), "cached answer");
    assert_eq!(server.requests().len(), 1);

    registry.disable_transport();
    let replay = ModelClient::new(registry, cache, Mode::Replay);
    assert_eq!(replay.generate(&m, None, "q", &cfg).unwrap(), "cached answer");
    assert!(matches!(replay.generate(&m, None, "other", &cfg), Err(Error::ReplayMiss(_))));
    assert_eq!(server.requests().len(), 1);
}
