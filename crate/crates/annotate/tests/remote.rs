//! Remote backends against a scripted local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use lxfuse_annotate::remote::{ChatClient, RemoteConfig, RemoteScorer};
use lxfuse_annotate::{
    final_select, judge_captions, qa_from_caption, refine_loop, AnnotateError, ImageRef, PromptTemplates, Rating,
    Scorer,
};

struct Request {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one scripted `(status, body)` per connection, then stops.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Request>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
            let (mut len, mut auth) = (0, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Request {
                path,
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn chat(content: &str) -> (u16, String) {
    (
        200,
        serde_json::json!({"choices": [{"message": {"content": content}}]}).to_string(),
    )
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: format!("{url}/v1"),
        model: "m".into(),
        retries: 2,
        backoff_ms: 1,
        timeout_secs: 5,
        ..Default::default()
    }
}

#[test]
fn chat_backend_drives_the_loop() {
    let (url, rx) = serve(vec![
        chat("1. a warm person\n2. a parked car\n"),
        chat("- two figures\n- a hot engine\n- extra line"),
        chat("a hot engine\n"),
    ]);
    let mut client = ChatClient::new(config(&url), PromptTemplates::default());
    let scorer = lxfuse_annotate::mock::HashScorer;
    let state = refine_loop(&mut client, &scorer, ImageRef::new("img3"), 2, 2).unwrap();
    assert_eq!(state.candidates.len(), 4);
    assert_eq!(state.candidates[0].text, "a warm person");
    assert_eq!(state.candidates[3].text, "a hot engine");
    assert_eq!(final_select(&mut client, &state).unwrap(), "a hot engine");

    let first = rx.recv().unwrap();
    assert_eq!(first.path, "/v1/chat/completions");
    assert_eq!(first.body["model"], "m");
    assert!(first.body["messages"][0]["content"].as_str().unwrap().contains("img3"));
    let second = rx.recv().unwrap();
    let prompt = second.body["messages"][0]["content"].as_str().unwrap();
    assert!(prompt.contains("a parked car"), "{prompt}");
}

#[test]
fn transient_errors_are_retried() {
    let (url, rx) = serve(vec![(503, "{}".into()), (500, "oops".into()), chat("[]")]);
    let client = ChatClient::new(config(&url), PromptTemplates::default());
    assert_eq!(client.complete("hi").unwrap(), "[]");
    assert_eq!(rx.iter().count(), 3);
}

#[test]
fn persistent_errors_fail_explicitly() {
    let (url, _rx) = serve(vec![(500, "a".into()), (502, "b".into()), (503, "c".into())]);
    let client = ChatClient::new(config(&url), PromptTemplates::default());
    match client.complete("hi") {
        Err(AnnotateError::Backend { attempts, detail, .. }) => {
            assert_eq!(attempts, 3);
            assert!(detail.contains("503"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn qa_and_judge_through_chat() {
    let qa = r#"[{"question":"How many?","answer":"2","modality":"IR"},{"question":"Color?","answer":"red","modality":"RGB"}]"#;
    let (url, _rx) = serve(vec![
        chat(qa),
        chat(r#"{"accuracy": "Very Good", "detail": "fair"}"#),
        chat(r#"{"accuracy": "Poor"}"#),
    ]);
    let mut client = ChatClient::new(config(&url), PromptTemplates::default());
    assert_eq!(
        qa_from_caption(&mut client, "two people by a red car").unwrap().len(),
        2
    );
    let pairs = vec![("ir".to_string(), "rgb".to_string())];
    let table = judge_captions(&mut client, &pairs).unwrap();
    assert_eq!(table.counts[0][Rating::VeryGood as usize], 1);
    assert_eq!(table.counts[1][Rating::Fair as usize], 1);
    assert!(matches!(
        judge_captions(&mut client, &pairs),
        Err(AnnotateError::MissingField { .. })
    ));
}

#[test]
fn scorer_posts_text_and_bearer_token() {
    std::env::set_var("LXFUSE_TEST_SCORER_TOKEN", "s3cret");
    let (url, rx) = serve(vec![(200, r#"{"score": 0.75}"#.into())]);
    let cfg = RemoteConfig {
        base_url: url,
        token_env: Some("LXFUSE_TEST_SCORER_TOKEN".into()),
        ..config("")
    };
    let scorer = RemoteScorer::new(cfg);
    let s = scorer
        .score("a car", &ImageRef::with_path("i9", "/data/i9.png"))
        .unwrap();
    assert_eq!(s, 0.75);
    let req = rx.recv().unwrap();
    assert_eq!(req.path, "/score");
    assert_eq!(req.auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(req.body["text"], "a car");
    assert_eq!(req.body["image_path"], "/data/i9.png");
}

#[test]
fn missing_token_variable_is_reported() {
    let cfg = RemoteConfig {
        token_env: Some("LXFUSE_TEST_UNSET_TOKEN_VAR".into()),
        ..config("http://127.0.0.1:9")
    };
    let err = RemoteScorer::new(cfg).score("x", &ImageRef::new("i")).unwrap_err();
    assert!(err.to_string().contains("LXFUSE_TEST_UNSET_TOKEN_VAR"));
}
