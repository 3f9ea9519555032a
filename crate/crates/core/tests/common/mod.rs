//! Local stand-in for an OpenAI-compatible API.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::Value;

pub struct Request {
    pub path: String,
    pub auth: Option<String>,
    pub body: Value,
}

pub type Handler = dyn Fn(&Request, usize) -> (u16, Value) + Send + Sync;

pub struct FakeApi {
    pub url: String,
    pub calls: Arc<AtomicUsize>,
    pub requests: Arc<Mutex<Vec<Request>>>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl FakeApi {
    /// `handler` gets the request and its 0-based arrival number.
    pub fn start(handler: impl Fn(&Request, usize) -> (u16, Value) + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
        let calls = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = {
            let (server, calls, requests) = (server.clone(), calls.clone(), requests.clone());
            std::thread::spawn(move || {
                for mut rq in server.incoming_requests() {
                    let mut text = String::new();
                    rq.as_reader().read_to_string(&mut text).unwrap();
                    let req = Request {
                        path: rq.url().to_string(),
                        auth: rq
                            .headers()
                            .iter()
                            .find(|h| h.field.equiv("Authorization"))
                            .map(|h| h.value.to_string()),
                        body: serde_json::from_str(&text).unwrap_or(Value::Null),
                    };
                    let n = calls.fetch_add(1, Ordering::SeqCst);
                    let handler = handler.clone();
                    let (code, body) = handler(&req, n);
                    requests.lock().unwrap().push(req);
                    let resp = tiny_http::Response::from_string(body.to_string())
                        .with_status_code(code)
                        .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
                    let _ = rq.respond(resp);
                }
            })
        };
        FakeApi {
            url,
            calls,
            requests,
            server,
            thread: Some(thread),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Drop for FakeApi {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// A chat-completions response carrying `content`.
pub fn chat_reply(content: &str) -> Value {
    serde_json::json!({
        "id": "x",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
}

/// Text of the last message in a chat request.
pub fn last_message(req: &Request) -> String {
    req.body["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}
